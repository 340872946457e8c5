use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use forestnet::io::read_label_map;
use forestnet::metrics::evaluate;

fn forestnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forestnet"))
        .args(args)
        .env("FORESTNET_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = forestnet(args);
    assert!(
        out.status.success(),
        "forestnet {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    forestnet(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"
classes = 3
levels = 2
output = "out"
seed = 3

[synth]
width = 32
height = 32
classes = 3
train = 4
test = 2
seed = 5

[level.forest]
trees = 2
max_depth = 4
candidate_features = 10
delta_max = 6

[level.sampling]
stride = 2

[train]
iterations = 6
stride = 4
checkpoint_every = 3
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn full_pipeline_round_trips_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, SMALL);
    let out = d.join("out");

    let report = ok(&["train-rf", "--config", s(&cfg)]);
    assert!(report.contains("level 2 train dice_class_balanced"));
    let train_report = fs::read_to_string(out.join("train_report.csv")).unwrap();
    assert_eq!(train_report.lines().count(), 1 + 2 * 2);

    let stack = out.join("stack");
    let net = out.join("net.bin");
    let data = d.join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let test_img = data.join("images/test_000.png");
    let mapped = ok(&["map", "--stack", s(&stack), "--config", s(&cfg), "--out", s(&net), "--check", s(&test_img)]);
    assert!(mapped.contains("hidden layers 5"), "{mapped}");

    let tuned = out.join("tuned.bin");
    ok(&["finetune", "--net", s(&net), "--config", s(&cfg), "--out", s(&tuned)]);
    let csv = fs::read_to_string(out.join("tuned.bin.loss.csv")).unwrap();
    let lrs: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(lrs.len(), 6);
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    for i in [3, 6] {
        let cp = out.join(format!("tuned.bin.iter{i:06}"));
        forestnet::deepnet::SparseNet::load(&cp).unwrap();
    }

    let mb1 = out.join("mb1");
    let mb2 = out.join("mb2");
    ok(&["mapback", "--net", s(&tuned), "--stack", s(&stack), "--variant", "mb1", "--out", s(&mb1)]);
    let mb2_out = ok(&["mapback", "--net", s(&tuned), "--stack", s(&stack), "--variant", "mb2", "--config", s(&cfg), "--out", s(&mb2)]);
    assert!(mb2_out.contains("populated leaves"));
    assert!(fs::read_to_string(mb2.join("mapback_report.csv")).unwrap().starts_with("level,populated_leaf_fraction"));
    for (dir, v) in [(&mb1, "mb1"), (&mb2, "mb2")] {
        assert_eq!(forestnet::mapback::RemappedStack::load(dir).unwrap().variant.to_string(), v);
    }

    for model in [&stack, &tuned, &mb1, &mb2] {
        let preds = d.join("preds").join(model.file_name().unwrap());
        ok(&["predict", "--model", s(model), "--out", s(&preds), s(&data.join("images"))]);
        assert_eq!(fs::read_dir(&preds).unwrap().count(), 4 + 2 + 1);
    }

    let metrics = out.join("metrics.csv");
    ok(&["eval", "--model", s(&tuned), "--config", s(&cfg), "--out", s(&metrics)]);
    assert!(fs::read_to_string(&metrics).unwrap().contains("all,dice_class_balanced,"));

    let acts = out.join("acts");
    let inspected = ok(&["inspect", "--net", s(&tuned), "--image", s(&test_img), "--out", s(&acts)]);
    assert_eq!(inspected.lines().count(), 2);
    let exported = fs::read_dir(&acts).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png").count();
    assert_eq!(exported, 2 * 3);

    let bench = ok(&["bench", "--model", s(&stack), "--model", s(&tuned), "--repeat", "1", s(&test_img)]);
    assert_eq!(bench.lines().count(), 3);
}

#[test]
fn eval_matches_metrics_on_written_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, SMALL);
    ok(&["train-rf", "--config", s(&cfg)]);
    let data = d.join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let stack = d.join("out/stack");
    let preds = d.join("preds");
    let tests: Vec<PathBuf> = ["test_000", "test_001"].iter().map(|id| data.join(format!("images/{id}.png"))).collect();
    let mut args = vec!["predict", "--model", s(&stack), "--out", s(&preds)];
    args.extend(tests.iter().map(|p| s(p)));
    ok(&args);

    let maps: Vec<_> = ["test_000", "test_001"]
        .iter()
        .map(|id| {
            let p = read_label_map(&preds.join(format!("{id}.png"))).unwrap();
            let t = read_label_map(&data.join(format!("labels/{id}.png"))).unwrap();
            (id.to_string(), p, t)
        })
        .collect();
    let oracle = evaluate(maps.iter().map(|(id, p, t)| (id.clone(), p, t)), 3, 0).unwrap();

    let csv = ok(&["eval", "--model", s(&stack), "--config", s(&cfg)]);
    let rows: Vec<(String, String, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), oracle.rows.len());
    for ((img, metric, v), r) in rows.iter().zip(&oracle.rows) {
        assert_eq!((img, metric), (&r.image, &r.metric));
        assert_eq!(*v, r.value);
    }
}

#[test]
fn mb1_of_untrained_net_reproduces_stack_labels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, SMALL);
    ok(&["train-rf", "--config", s(&cfg)]);
    let data = d.join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let stack = d.join("out/stack");
    let net = d.join("net.bin");
    let mb1 = d.join("mb1");
    ok(&["map", "--stack", s(&stack), "--out", s(&net), "--strengths", "100,1,0.1"]);
    ok(&["mapback", "--net", s(&net), "--stack", s(&stack), "--variant", "mb1", "--out", s(&mb1)]);
    let images = data.join("images");
    ok(&["predict", "--model", s(&stack), "--out", s(&d.join("a")), s(&images)]);
    ok(&["predict", "--model", s(&mb1), "--out", s(&d.join("b")), s(&images)]);
    for e in fs::read_dir(d.join("a")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().unwrap() == "png" {
            let a = read_label_map(&p).unwrap();
            let b = read_label_map(&d.join("b").join(p.file_name().unwrap())).unwrap();
            assert_eq!(a, b, "{}", p.display());
        }
    }
}

#[test]
fn finetune_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, SMALL);
    ok(&["train-rf", "--config", s(&cfg)]);
    let net = d.join("net.bin");
    ok(&["map", "--stack", s(&d.join("out/stack")), "--config", s(&cfg), "--out", s(&net)]);
    let runs: Vec<(Vec<u8>, String)> = ["t1.bin", "t2.bin"]
        .iter()
        .map(|name| {
            let out = d.join(name);
            ok(&["finetune", "--net", s(&net), "--config", s(&cfg), "--out", s(&out)]);
            (fs::read(&out).unwrap(), fs::read_to_string(d.join(format!("{name}.loss.csv"))).unwrap())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn synth_is_deterministic_with_disjoint_splits() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        ok(&["synth", "--out", s(p), "--seed", "9", "--size", "24", "--train", "3", "--test", "2"]);
    }
    for sub in ["images", "labels"] {
        for e in fs::read_dir(a.join(sub)).unwrap() {
            let p = e.unwrap().path();
            assert_eq!(fs::read(&p).unwrap(), fs::read(b.join(sub).join(p.file_name().unwrap())).unwrap());
        }
    }
    let train = fs::read_to_string(a.join("train.txt")).unwrap();
    let test = fs::read_to_string(a.join("test.txt")).unwrap();
    assert!(train.lines().all(|id| !test.lines().any(|t| t == id)));
    assert_eq!((train.lines().count(), test.lines().count()), (3, 2));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let missing = write_config(
        d,
        "classes = 2\n[data]\nimages = \"img\"\nlabels = \"nope\"\ntrain_split = \"train.txt\"\n",
    );
    fs::create_dir(d.join("img")).unwrap();
    fs::write(d.join("train.txt"), "a\n").unwrap();
    assert_eq!(code(&["train-rf", "--config", s(&missing)]), 2);

    let unknown = write_config(d, "classes = 2\nbogus_key = 1\n");
    assert_eq!(code(&["train-rf", "--config", s(&unknown)]), 2);

    assert_eq!(code(&["predict", "--model", s(&d.join("absent.bin")), "--out", s(&d.join("o")), s(&d.join("img"))]), 3);

    let cfg = write_config(d, &SMALL.replace("iterations = 6", "iterations = 6\nlr_a = 1e308"));
    ok(&["train-rf", "--config", s(&cfg)]);
    let net = d.join("net.bin");
    ok(&["map", "--stack", s(&d.join("out/stack")), "--config", s(&cfg), "--out", s(&net)]);
    let tuned = d.join("tuned.bin");
    assert_eq!(code(&["finetune", "--net", s(&net), "--config", s(&cfg), "--out", s(&tuned)]), 4);
    assert!(d.join("tuned.bin.diverged").is_file());

    assert_eq!(code(&["no-such-command"]), 2);
}
