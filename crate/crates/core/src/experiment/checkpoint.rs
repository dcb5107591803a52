//! JSON checkpoint: backbone, head, last projector and prototype pools.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::drift::Projector;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::prototypes::PrototypePool;
use crate::training::ClassifierHead;

pub const CHECKPOINT_FORMAT: &str = "driftlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Number of tasks completed.
    pub task: usize,
    pub extractor: Mlp,
    pub head: ClassifierHead,
    pub projector: Option<Projector>,
    pub pools: BTreeMap<String, PrototypePool>,
}

impl Checkpoint {
    pub fn new(
        seed: u64,
        task: usize,
        extractor: Mlp,
        head: ClassifierHead,
        projector: Option<Projector>,
        pools: BTreeMap<String, PrototypePool>,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            task,
            extractor,
            head,
            projector,
            pools,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!("not a checkpoint: format `{}`", c.format)));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {}", c.version)));
        }
        // Re-run topology checks that plain deserialisation skips.
        let extractor = Mlp::from_layers(c.extractor.spec().clone(), c.extractor.layers().to_vec())?;
        let d = extractor.output_dim();
        if let Some(p) = &c.projector {
            if p.dim() != d {
                return Err(Error::dim(format!("projector dim {} vs feature dim {d}", p.dim())));
            }
        }
        if let Some((name, _)) = c.pools.iter().find(|(_, p)| p.dim() != d) {
            return Err(Error::dim(format!("pool `{name}` does not match feature dim {d}")));
        }
        Ok(Checkpoint { extractor, ..c })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
