//! Dataset directories: `images/<id>.png|pgm`, `labels/<id>.png` and split
//! files listing one id per line.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};
use crate::io::{read_grayscale, read_label_map};
use crate::synth::LabeledImage;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "pgm", "pnm"];

/// Ids listed in a split file; blank lines and `#` comments are skipped.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::format(path.display().to_string(), "duplicate id in split file"));
    }
    Ok(ids)
}

/// Fail if any id appears in both splits.
pub fn check_disjoint(a: &[String], b: &[String]) -> Result<()> {
    let set: BTreeSet<&String> = a.iter().collect();
    if let Some(dup) = b.iter().find(|id| set.contains(id)) {
        return Err(Error::Config(format!("id '{dup}' is in both train and test splits")));
    }
    Ok(())
}

pub fn image_path(images_dir: &Path, id: &str) -> Result<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| images_dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::io(&images_dir.join(id), std::io::Error::new(std::io::ErrorKind::NotFound, "no image with this id")))
}

pub fn load_image(images_dir: &Path, id: &str) -> Result<Image> {
    read_grayscale(&image_path(images_dir, id)?)
}

/// Load images with their label maps; sizes must match.
pub fn load_labeled(images_dir: &Path, labels_dir: &Path, ids: &[String]) -> Result<Vec<LabeledImage>> {
    ids.iter()
        .map(|id| {
            let image = load_image(images_dir, id)?;
            let labels: LabelMap = read_label_map(&labels_dir.join(format!("{id}.png")))?;
            if (image.width(), image.height()) != (labels.width(), labels.height()) {
                return Err(Error::Dimension(format!("image '{id}' and its label map differ in size")));
            }
            Ok(LabeledImage { id: id.clone(), image, labels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{write_dataset, SyntheticTask};

    #[test]
    fn loads_what_synth_writes() {
        let dir = tempfile::tempdir().unwrap();
        let task = SyntheticTask { width: 32, height: 32, classes: 3, train: 2, test: 1, ..SyntheticTask::default() };
        let set = task.generate().unwrap();
        write_dataset(dir.path(), &set, 3).unwrap();
        let ids = read_split(&dir.path().join("train.txt")).unwrap();
        let back = load_labeled(&dir.path().join("images"), &dir.path().join("labels"), &ids).unwrap();
        assert_eq!(back, set.train);
        let test = read_split(&dir.path().join("test.txt")).unwrap();
        check_disjoint(&ids, &test).unwrap();
        assert!(check_disjoint(&ids, &ids).is_err());
    }

    #[test]
    fn missing_image_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(dir.path(), "nope"), Err(Error::Io { .. })));
    }
}
