//! JSON checkpoint container: the model configuration plus every parameter
//! by path. Floats round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    config: ModelConfig,
    params: BTreeMap<String, StoredTensor>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let container = Container {
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|(p, t)| {
                (
                    p.to_string(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &container)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_container(path: &Path) -> Result<Container> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

fn into_store(params: BTreeMap<String, StoredTensor>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (path, t) in params {
        let tensor = Tensor::new(t.shape, t.data)
            .map_err(|e| Error::Load(format!("parameter {path}: {e}")))?;
        store.insert(path, tensor);
    }
    Ok(store)
}

/// Loads a checkpoint using the configuration stored inside it.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let c = read_container(path)?;
    Model::from_params(c.config, into_store(c.params)?)
}

/// Loads the parameters of a checkpoint into the model described by
/// `config`; fails naming the first parameter that does not fit.
pub fn load_checkpoint_as(path: &Path, config: &ModelConfig) -> Result<Model> {
    let c = read_container(path)?;
    Model::from_params(config.clone(), into_store(c.params)?)
}
