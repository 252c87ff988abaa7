use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mlp, MlpSpec, Model, SuperfeaturePartition, TypeMModel};
use crate::error::{Error, Result};
use crate::store::{Container, StoreKind};

/// Architecture metadata stored in a model file's header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    BlackBox {
        input_dim: usize,
        hidden_widths: Vec<usize>,
        num_classes: usize,
    },
    TypeM {
        input_dim: usize,
        hidden_widths: Vec<usize>,
        num_classes: usize,
        superfeatures: usize,
        partition: SuperfeaturePartition,
        prior: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    architecture: Architecture,
}

const FORMAT: &str = "ked-model";

impl Model {
    pub fn architecture(&self) -> Architecture {
        match self {
            Model::BlackBox(m) => Architecture::BlackBox {
                input_dim: m.spec().input_dim,
                hidden_widths: m.spec().hidden_widths.clone(),
                num_classes: m.spec().num_classes,
            },
            Model::TypeM(t) => Architecture::TypeM {
                input_dim: t.partition().input_dim(),
                hidden_widths: t.hidden_widths().to_vec(),
                num_classes: t.num_classes(),
                superfeatures: t.partition().len(),
                partition: t.partition().clone(),
                prior: t.prior().to_vec(),
            },
        }
    }
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    model_container(model).encode()
}

fn model_container(model: &Model) -> Container {
    let header = Header {
        format: FORMAT.to_string(),
        architecture: model.architecture(),
    };
    Container {
        kind: StoreKind::Model,
        header: serde_json::to_string(&header).expect("header serializes"),
        arrays: model
            .params()
            .iter()
            .map(|p| p.value.data().to_vec())
            .collect(),
    }
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<Model> {
    from_container(Container::decode(bytes, path)?, path)
}

fn from_container(c: Container, path: &Path) -> Result<Model> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: 24,
        detail,
    };
    if c.kind != StoreKind::Model {
        return Err(bad("file holds a dataset, not a model".into()));
    }
    let header: Header =
        serde_json::from_str(&c.header).map_err(|e| bad(format!("model header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("unknown model format {:?}", header.format)));
    }
    let mut arrays = c.arrays;
    match header.architecture {
        Architecture::BlackBox {
            input_dim,
            hidden_widths,
            num_classes,
        } => {
            let spec = MlpSpec::new(input_dim, hidden_widths, num_classes)?;
            Ok(Model::BlackBox(Mlp::from_arrays(spec, arrays)?))
        }
        Architecture::TypeM {
            input_dim,
            hidden_widths,
            num_classes,
            superfeatures,
            partition,
            prior,
        } => {
            if partition.input_dim() != input_dim || partition.len() != superfeatures {
                return Err(bad("partition disagrees with the stored dimensions".into()));
            }
            let per_net = 2 * (hidden_widths.len() + 1);
            if arrays.len() != per_net * superfeatures {
                return Err(bad(format!(
                    "{} arrays for {superfeatures} subnets of {per_net}",
                    arrays.len()
                )));
            }
            let mut subnets = Vec::with_capacity(superfeatures);
            for group in partition.groups() {
                let rest = arrays.split_off(per_net);
                let spec = MlpSpec::new(group.len(), hidden_widths.clone(), num_classes)?;
                subnets.push(Mlp::from_arrays(
                    spec,
                    std::mem::replace(&mut arrays, rest),
                )?);
            }
            Ok(Model::TypeM(TypeMModel::from_subnets(
                partition, subnets, prior,
            )?))
        }
    }
}

/// Write `model`; returns the configuration hash embedded in the file.
pub fn save_model(model: &Model, path: &Path) -> Result<String> {
    let c = model_container(model);
    c.write(path)?;
    Ok(c.config_hash())
}

pub fn load_model(path: &Path) -> Result<Model> {
    from_container(Container::read(path)?, path)
}
