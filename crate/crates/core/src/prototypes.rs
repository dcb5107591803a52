//! Class prototypes and the optional per-class memory used by the NME and
//! stored-feature baselines.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::extractor::FeatureMap;
use crate::rng::SeedTree;
use crate::tensor::{mean_of_rows, Matrix};

pub type ClassVectors = BTreeMap<usize, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub vector: Vec<f64>,
    /// Task that introduced the class.
    pub origin_task: usize,
    /// Task at whose end the vector was last written.
    pub updated_task: usize,
}

/// One prototype per seen class, keyed by class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypePool {
    dim: usize,
    entries: BTreeMap<usize, PrototypeEntry>,
}

impl PrototypePool {
    pub fn new(dim: usize) -> Self {
        PrototypePool {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.entries.get(&class).map(|e| e.vector.as_slice())
    }

    pub fn entry(&self, class: usize) -> Option<&PrototypeEntry> {
        self.entries.get(&class)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &PrototypeEntry)> {
        self.entries.iter().map(|(&c, e)| (c, e))
    }

    /// Register the prototype of a newly seen class.
    pub fn insert(&mut self, class: usize, vector: Vec<f64>, task: usize) -> Result<()> {
        self.check_vector(class, &vector)?;
        if self.entries.contains_key(&class) {
            return Err(Error::state(format!("class {class} already has a prototype")));
        }
        self.entries.insert(
            class,
            PrototypeEntry {
                vector,
                origin_task: task,
                updated_task: task,
            },
        );
        Ok(())
    }

    pub fn insert_all(&mut self, vectors: ClassVectors, task: usize) -> Result<()> {
        for (c, v) in vectors {
            self.insert(c, v, task)?;
        }
        Ok(())
    }

    /// Replace existing prototypes and stamp them with `task`.
    pub fn update(&mut self, updates: &ClassVectors, task: usize) -> Result<()> {
        for (&c, v) in updates {
            self.check_vector(c, v)?;
            let e = self.entries.get(&c).ok_or(Error::Key(c))?;
            if task < e.updated_task {
                return Err(Error::state(format!(
                    "class {c} was updated at task {}, cannot rewrite at earlier task {task}",
                    e.updated_task
                )));
            }
        }
        for (&c, v) in updates {
            let e = self.entries.get_mut(&c).expect("checked above");
            e.vector.clone_from(v);
            e.updated_task = task;
        }
        Ok(())
    }

    fn check_vector(&self, class: usize, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::dim(format!(
                "prototype for class {class} has dim {}, pool dim {}",
                v.len(),
                self.dim
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!("prototype for class {class} is not finite")));
        }
        Ok(())
    }
}

pub fn update_pool(pool: &mut PrototypePool, updates: &ClassVectors, task: usize) -> Result<()> {
    pool.update(updates, task)
}

/// Mean feature of each class of `task`, over labeled samples only if asked.
pub fn compute_prototypes(extractor: &dyn FeatureMap, task: &Task, labeled_only: bool) -> Result<ClassVectors> {
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for &c in &task.classes {
        let idx = task.class_indices(c, labeled_only);
        if idx.is_empty() {
            return Err(Error::data(format!(
                "class {c} of task {} has no {}samples",
                task.index,
                if labeled_only { "labeled " } else { "" }
            )));
        }
        let start = rows.len();
        rows.extend(idx);
        groups.push((c, start..rows.len()));
    }
    let feats = extractor.embed(&task.inputs.select_rows(&rows)?)?;
    Ok(groups
        .into_iter()
        .map(|(c, range)| {
            let idx: Vec<usize> = range.collect();
            (c, mean_of_rows(&feats, &idx).expect("non-empty group"))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankMode {
    /// Raw input samples, re-embedded with the current extractor (NME).
    Samples,
    /// Features from the extractor of the class's own task, carried forward
    /// through each drift projector.
    Features,
}

/// Per-class memory of at most `capacity` items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    mode: BankMode,
    capacity: usize,
    items: BTreeMap<usize, Matrix>,
}

impl FeatureBank {
    pub fn new(mode: BankMode, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("bank capacity must be ≥ 1"));
        }
        Ok(FeatureBank {
            mode,
            capacity,
            items: BTreeMap::new(),
        })
    }

    pub fn mode(&self) -> BankMode {
        self.mode
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn count(&self, class: usize) -> usize {
        self.items.get(&class).map_or(0, |m| m.rows())
    }

    pub fn classes(&self) -> Vec<usize> {
        self.items.keys().copied().collect()
    }

    /// Keep a uniformly random subset of `candidates` (at most `capacity`
    /// rows) for `class`, replacing whatever was stored before.
    pub fn insert(&mut self, class: usize, candidates: &Matrix, seed: SeedTree) -> Result<()> {
        let n = candidates.rows();
        let keep = n.min(self.capacity);
        let mut rng = seed.indexed("bank", class).rng();
        let mut idx = sample(&mut rng, n, keep).into_vec();
        idx.sort_unstable();
        self.items.insert(class, candidates.select_rows(&idx)?);
        Ok(())
    }

    /// Store the (labeled) samples of every class in `task`. In feature mode
    /// they are embedded with `extractor` first.
    pub fn insert_task(
        &mut self,
        task: &Task,
        extractor: &dyn FeatureMap,
        labeled_only: bool,
        seed: SeedTree,
    ) -> Result<()> {
        for &c in &task.classes {
            let idx = task.class_indices(c, labeled_only);
            if idx.is_empty() {
                return Err(Error::data(format!("class {c} has no samples to store")));
            }
            let rows = task.inputs.select_rows(&idx)?;
            let items = match self.mode {
                BankMode::Samples => rows,
                BankMode::Features => extractor.embed(&rows)?,
            };
            self.insert(c, &items, seed)?;
        }
        Ok(())
    }

    fn stored(&self, class: usize) -> Result<&Matrix> {
        self.items
            .get(&class)
            .ok_or_else(|| Error::data(format!("bank holds nothing for class {class}")))
    }

    /// NME: mean of the current extractor over each stored sample set.
    pub fn recompute_means(&self, extractor: &dyn FeatureMap, classes: &[usize]) -> Result<ClassVectors> {
        if self.mode != BankMode::Samples {
            return Err(Error::state("recompute_means needs a sample bank"));
        }
        classes
            .iter()
            .map(|&c| Ok((c, extractor.embed(self.stored(c)?)?.column_means())))
            .collect()
    }

    /// Replace stored features of `classes` by their image under `projector`.
    pub fn project(&mut self, projector: &dyn FeatureMap, classes: &[usize]) -> Result<()> {
        if self.mode != BankMode::Features {
            return Err(Error::state("project needs a feature bank"));
        }
        for &c in classes {
            let projected = projector.embed(self.stored(c)?)?;
            self.items.insert(c, projected);
        }
        Ok(())
    }

    /// Mean of the stored features of each class (feature mode).
    pub fn feature_means(&self, classes: &[usize]) -> Result<ClassVectors> {
        if self.mode != BankMode::Features {
            return Err(Error::state("feature_means needs a feature bank"));
        }
        classes
            .iter()
            .map(|&c| Ok((c, self.stored(c)?.column_means())))
            .collect()
    }
}
