use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use forestnet::autocontext::ForestStack;
use forestnet::deepnet::{export_activation_images, loss_curve_csv, map_stack_to_net, train_sgd, LayerRef, SparseNet, Stage};
use forestnet::io::{read_grayscale, write_label_map, Palette};
use forestnet::mapback::{map_back_1, map_back_2};
use forestnet::metrics::evaluate;
use forestnet::pipeline::{mapback_samples, prepare, train_stack};
use forestnet::rf2nn::{StrengthTriple, VoteScaling};
use forestnet::synth::{write_dataset, Generator, SyntheticTask};

use crate::config::{load_config, load_split, stacks_with, Split};
use crate::error::{CliError, CliResult};
use crate::model::Model;

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn image_files(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let entries = fs::read_dir(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| matches!(f.extension().and_then(|x| x.to_str()), Some("png" | "pgm" | "pnm")))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(CliError::Data(format!("{} does not exist", p.display())));
        }
    }
    if files.is_empty() {
        return Err(CliError::Data("no input images".into()));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

#[derive(Debug, Args)]
pub struct TrainRfArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Writes `<out>/stack/` and `<out>/train_report.csv`.
pub fn train_rf(args: &TrainRfArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output.clone());
    let train = load_split(&cfg, Split::Train)?;
    let t = Instant::now();
    let (pre, data) = prepare(cfg.bank()?, &train)?;
    let stack = train_stack(&cfg, &pre, &data)?;
    log::info!("trained {} levels in {:.1?}", stack.levels().len(), t.elapsed());
    stack.save(&out.join("stack"))?;

    let traces = data.iter().map(|d| stack.predict(&d.stack)).collect::<forestnet::Result<Vec<_>>>()?;
    let mut report = String::from("level,metric,value\n");
    for k in 0..stack.levels().len() {
        let preds: Vec<_> = traces.iter().map(|t| t.levels[k].argmax()).collect();
        let eval = evaluate(
            train.iter().zip(&preds).map(|(im, p)| (im.id.clone(), p, &im.labels)),
            cfg.classes,
            cfg.background,
        )?;
        for (name, v) in [("pixel_accuracy_fg", eval.accuracy), ("dice_class_balanced", eval.dice)] {
            if let Some(v) = v {
                writeln!(report, "{},{name},{v}", k + 1).unwrap();
                println!("level {} train {name} {v:.4}", k + 1);
            }
        }
    }
    write_file(&out.join("train_report.csv"), &report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum VoteScalingArg {
    Counts,
    LeafNormalized,
}

impl From<VoteScalingArg> for VoteScaling {
    fn from(v: VoteScalingArg) -> Self {
        match v {
            VoteScalingArg::Counts => VoteScaling::Counts,
            VoteScalingArg::LeafNormalized => VoteScaling::LeafNormalized,
        }
    }
}

fn parse_strengths(s: &str) -> Result<StrengthTriple, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] => StrengthTriple::new(a, b, c).map_err(|e| e.to_string()),
        _ => Err("expected str_in,str_path,str_vote".into()),
    }
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long)]
    pub stack: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Strengths and vote scaling are read from here unless given below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `str_in,str_path,str_vote`; repeat once per level for per-level values.
    #[arg(long = "strengths", value_parser = parse_strengths)]
    pub strengths: Vec<StrengthTriple>,
    #[arg(long, value_enum)]
    pub vote_scaling: Option<VoteScalingArg>,
    /// Report the fraction of pixels where net and stack argmax agree.
    #[arg(long)]
    pub check: Option<PathBuf>,
}

pub fn map(args: &MapArgs) -> CliResult<()> {
    let cfg = args.config.as_deref().map(load_config).transpose()?.unwrap_or_default();
    let strengths = if args.strengths.is_empty() { cfg.strengths.clone() } else { args.strengths.clone() };
    let scaling = args.vote_scaling.map(VoteScaling::from).unwrap_or(cfg.vote_scaling);
    let stack = ForestStack::load(&args.stack)?;
    let net = map_stack_to_net(&stack, &strengths, scaling)?;
    println!("hidden layers {}", net.hidden_layer_count());
    if let Some(img) = &args.check {
        let image = read_grayscale(img)?;
        let a = stack.predict_image(&image)?.final_maps().argmax();
        let b = net.predict_image(&image)?.argmax();
        let same = a.labels().iter().zip(b.labels()).filter(|(x, y)| x == y).count();
        println!("argmax agreement {:.6}", same as f64 / a.labels().len() as f64);
    }
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    net.save(&args.out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Checkpoints go to `<out>.iter<N>` when `train.checkpoint_every` is set.
/// On divergence the last finite parameters are saved to `<out>.diverged`.
pub fn finetune(args: &FinetuneArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let net = SparseNet::load(&args.net)?;
    let pre = net.preprocessor().ok_or_else(|| CliError::Data("net carries no preprocessor".into()))?.clone();
    let data = stacks_with(&pre, &load_split(&cfg, Split::Train)?)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let frozen = cfg.frozen.set(net.levels());
    let trained = train_sgd(net, &data, &cfg.train, &frozen, |i, n| n.save(&with_suffix(&args.out, &format!(".iter{i:06}"))));
    let trained = match trained {
        Err(forestnet::Error::Diverged { iteration, last_finite }) => {
            last_finite.save(&with_suffix(&args.out, ".diverged"))?;
            return Err(forestnet::Error::Diverged { iteration, last_finite }.into());
        }
        other => other?,
    };
    let csv = args.loss_csv.clone().unwrap_or_else(|| with_suffix(&args.out, ".loss.csv"));
    write_file(&csv, &loss_curve_csv(&trained.curve))?;
    if let (Some(first), Some(last)) = (trained.curve.first(), trained.curve.last()) {
        println!("loss {:.6} -> {:.6} over {} iterations", first.loss, last.loss, trained.curve.len());
    }
    trained.net.save(&args.out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum VariantArg {
    Mb1,
    Mb2,
}

#[derive(Debug, Args)]
pub struct MapbackArgs {
    #[arg(long)]
    pub net: PathBuf,
    /// The stack the net was mapped from.
    #[arg(long)]
    pub stack: PathBuf,
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    /// Training data and sampling for mb2.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// mb2 also writes `<out>/mapback_report.csv` with per-level leaf coverage.
pub fn mapback(args: &MapbackArgs) -> CliResult<()> {
    let net = SparseNet::load(&args.net)?;
    let source = ForestStack::load(&args.stack)?;
    match args.variant {
        VariantArg::Mb1 => map_back_1(&net, &source)?.save(&args.out)?,
        VariantArg::Mb2 => {
            let cfg_path = args.config.as_deref().ok_or_else(|| CliError::Config("mb2 needs --config for training data".into()))?;
            let cfg = load_config(cfg_path)?;
            let pre = net.preprocessor().ok_or_else(|| CliError::Data("net carries no preprocessor".into()))?;
            let data = stacks_with(pre, &load_split(&cfg, Split::Train)?)?;
            let samples = mapback_samples(&cfg, &data)?;
            let stacks: Vec<_> = data.iter().map(|d| &d.stack).collect();
            let (rs, report) = map_back_2(&net, &source, &stacks, &samples)?;
            rs.save(&args.out)?;
            let mut csv = String::from("level,populated_leaf_fraction\n");
            for (k, f) in report.populated_fraction.iter().enumerate() {
                writeln!(csv, "{},{f}", k + 1).unwrap();
                println!("level {} populated leaves {:.4}", k + 1, f);
            }
            write_file(&args.out.join("mapback_report.csv"), &csv)?;
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Net file, stack directory or remapped stack directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Image files or directories of images.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

/// One indexed-color label map per input, plus `palette.txt`.
pub fn predict(args: &PredictArgs) -> CliResult<()> {
    let model = Model::load(&args.model)?;
    log::info!("loaded {model}");
    let palette = Palette::for_classes(model.classes());
    create_dir(&args.out)?;
    palette.save(&args.out.join("palette.txt"))?;
    for f in image_files(&args.images)? {
        let labels = model.predict_image(&read_grayscale(&f)?)?.argmax();
        let dst = args.out.join(format!("{}.png", stem(&f)));
        write_label_map(&dst, &labels, &palette)?;
        log::info!("wrote {}", dst.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Metrics CSV; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let model = Model::load(&args.model)?;
    if model.classes() != cfg.classes {
        return Err(CliError::Config(format!("model has {} classes, config {}", model.classes(), cfg.classes)));
    }
    let images = load_split(&cfg, args.split)?;
    let preds = images
        .iter()
        .map(|im| Ok(model.predict_image(&im.image)?.argmax()))
        .collect::<forestnet::Result<Vec<_>>>()?;
    let e = evaluate(images.iter().zip(&preds).map(|(im, p)| (im.id.clone(), p, &im.labels)), cfg.classes, cfg.background)?;
    match &args.out {
        Some(p) => {
            write_file(p, &e.to_csv())?;
            for r in e.rows.iter().filter(|r| r.image == "all") {
                println!("{} {:.4}", r.metric, r.value);
            }
        }
        None => print!("{}", e.to_csv()),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// 1-based hidden layer index; defaults to every class layer `H_{3k}`.
    #[arg(long = "layer")]
    pub layers: Vec<usize>,
    /// Units to export; defaults to all units of each layer.
    #[arg(long = "unit")]
    pub units: Vec<usize>,
}

pub fn inspect(args: &InspectArgs) -> CliResult<()> {
    let net = SparseNet::load(&args.net)?;
    let image = read_grayscale(&args.image)?;
    let pre = net.preprocessor().ok_or_else(|| CliError::Data("net carries no preprocessor".into()))?;
    let layers: Vec<LayerRef> = if args.layers.is_empty() {
        (0..net.levels()).map(|k| LayerRef::new(k, Stage::Vote)).collect()
    } else {
        args.layers
            .iter()
            .map(|&i| {
                LayerRef::from_index(i)
                    .filter(|l| l.level < net.levels())
                    .ok_or_else(|| CliError::Config(format!("layer {i} outside 1..={}", 3 * net.levels())))
            })
            .collect::<CliResult<_>>()?
    };
    let fwd = net.forward(&pre.prepare(&image)?, &layers)?;
    let prefix = format!("{}_", stem(&args.image));
    for layer in layers {
        let maps = fwd.snapshot.get(layer)?;
        let units: Vec<usize> = if args.units.is_empty() { (0..maps.units).collect() } else { args.units.clone() };
        let written = export_activation_images(&fwd.snapshot, layer, &units, &args.out, &prefix)?;
        println!("{}: {} images", net.layer_name(layer), written.len());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GeneratorArg {
    Bands,
    Blobs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Take the task from this config's `[synth]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub generator: Option<GeneratorArg>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

/// Writes the dataset layout read by `[data]` plus `task.toml`.
pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let mut task = match &args.config {
        Some(p) => load_config(p)?.synth.ok_or_else(|| CliError::Config(format!("{} has no [synth] section", p.display())))?,
        None => SyntheticTask::default(),
    };
    if let Some(s) = args.seed {
        task.seed = s;
    }
    if let Some(g) = args.generator {
        task.generator = match g {
            GeneratorArg::Bands => Generator::Bands,
            GeneratorArg::Blobs => Generator::Blobs,
        };
    }
    task.classes = args.classes.unwrap_or(task.classes);
    task.noise = args.noise.unwrap_or(task.noise);
    task.train = args.train.unwrap_or(task.train);
    task.test = args.test.unwrap_or(task.test);
    if let Some(s) = args.size {
        task.width = s;
        task.height = s;
    }
    task.validate()?;
    let set = task.generate()?;
    write_dataset(&args.out, &set, task.classes)?;
    let toml = toml::to_string(&task).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&args.out.join("task.toml"), &toml)?;
    println!("{} train, {} test images in {}", set.train.len(), set.test.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Models to time; each is a net file or a stack directory.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
}

/// Mean wall time per image for each model, as CSV on stdout.
pub fn bench(args: &BenchArgs) -> CliResult<()> {
    let images = image_files(&args.images)?.iter().map(|p| read_grayscale(p)).collect::<forestnet::Result<Vec<_>>>()?;
    println!("model,kind,images,ms_per_image");
    for path in &args.models {
        let model = Model::load(path)?;
        // Warm-up pass so one-off allocation does not count.
        model.predict_image(&images[0])?;
        let t = Instant::now();
        for _ in 0..args.repeat.max(1) {
            for im in &images {
                model.predict_image(im)?;
            }
        }
        let ms = t.elapsed().as_secs_f64() * 1e3 / (args.repeat.max(1) * images.len()) as f64;
        println!("{},{model},{},{ms:.3}", path.display(), images.len());
    }
    Ok(())
}
