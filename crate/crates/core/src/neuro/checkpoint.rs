//! Bit-exact JSON checkpoints of parameter sets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::Mat;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cluster-alloc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    /// Stores every set under `"{group}/{name}"`.
    pub fn new(groups: &[(&str, &ParamSet)], metadata: serde_json::Value) -> Result<Self> {
        let mut tensors = Vec::new();
        for (group, set) in groups {
            for (name, m) in set.iter() {
                if !m.iter().all(|v| v.is_finite()) {
                    return Err(Error::Format(format!("{group}/{name} holds non-finite values")));
                }
                tensors.push(TensorRecord {
                    name: format!("{group}/{name}"),
                    shape: [m.nrows(), m.ncols()],
                    data: m.iter().copied().collect(),
                });
            }
        }
        Ok(Self { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, metadata, tensors })
    }

    /// Overwrites `target` with the tensors saved under `group`.
    pub fn restore(&self, group: &str, target: &mut ParamSet) -> Result<()> {
        let prefix = format!("{group}/");
        let mut loaded = ParamSet::new();
        for t in self.tensors.iter().filter(|t| t.name.starts_with(&prefix)) {
            let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::Format(format!("{}: {e}", t.name)))?;
            loaded.insert(&t.name[prefix.len()..], m);
        }
        if loaded.is_empty() {
            return Err(Error::Format(format!("checkpoint has no group {group}")));
        }
        target.load_from(&loaded)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
