use std::fmt;
use std::path::Path;

use forestnet::autocontext::ForestStack;
use forestnet::deepnet::SparseNet;
use forestnet::grid::{ClassMaps, Image};
use forestnet::mapback::{is_remapped, RemappedStack};

/// Anything that labels images: a net file, a stack directory, or a
/// remapped stack directory.
pub enum Model {
    Stack(ForestStack),
    Remapped(RemappedStack),
    Net(SparseNet),
}

impl Model {
    pub fn load(path: &Path) -> forestnet::Result<Model> {
        if path.is_dir() {
            if is_remapped(path)? {
                Ok(Model::Remapped(RemappedStack::load(path)?))
            } else {
                Ok(Model::Stack(ForestStack::load(path)?))
            }
        } else {
            Ok(Model::Net(SparseNet::load(path)?))
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Model::Stack(s) => s.classes(),
            Model::Remapped(r) => r.stack.classes(),
            Model::Net(n) => n.classes(),
        }
    }

    pub fn predict_image(&self, image: &Image) -> forestnet::Result<ClassMaps> {
        match self {
            Model::Stack(s) => Ok(s.predict_image(image)?.final_maps().clone()),
            Model::Remapped(r) => Ok(r.predict_image(image)?.final_maps().clone()),
            Model::Net(n) => n.predict_image(image),
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Stack(s) => write!(f, "forest stack ({} levels)", s.levels().len()),
            Model::Remapped(r) => write!(f, "{} remapped stack ({} levels)", r.variant, r.stack.levels().len()),
            Model::Net(n) => write!(f, "sparse net ({} hidden layers)", n.hidden_layer_count()),
        }
    }
}
