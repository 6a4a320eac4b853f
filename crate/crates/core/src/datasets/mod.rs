//! Two-domain semi-supervised data model.
//!
//! A [`DomainDataset`] holds four pools: labeled source training data, labeled and unlabeled
//! target training data, and a labeled target test set. Pools are immutable once built.

mod batches;
mod manifest;
mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batches::{make_batches, make_pool_batches, BatchSlot, BatchStream, TriStreamBatch};
pub use manifest::{load_manifest, save_manifest, FORMAT_VERSION};
pub use synthetic::{generate_synthetic, AffineShift, ClassConditional, PoolCounts, SyntheticConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Binary diagnosis label. `Disease` is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Disease,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Disease => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Normal),
            1 => Some(Label::Disease),
            _ => None,
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Label::Normal => [1.0, 0.0],
            Label::Disease => [0.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Vec<f64>,
    pub label: Option<Label>,
    pub domain: Domain,
}

impl Example {
    pub fn is_finite(&self) -> bool {
        self.features.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub dim: usize,
    /// Original array shape for inputs that were flattened (e.g. `[1, 28, 28]`).
    pub shape: Option<Vec<usize>>,
    pub source_train: Vec<Example>,
    pub target_train_labeled: Vec<Example>,
    pub target_train_unlabeled: Vec<Example>,
    pub target_test: Vec<Example>,
}

impl DomainDataset {
    pub fn n_source(&self) -> usize {
        self.source_train.len()
    }

    pub fn n_target_labeled(&self) -> usize {
        self.target_train_labeled.len()
    }

    pub fn n_target_unlabeled(&self) -> usize {
        self.target_train_unlabeled.len()
    }

    pub fn n_target(&self) -> usize {
        self.n_target_labeled() + self.n_target_unlabeled()
    }

    /// All target training examples, labeled first.
    pub fn target_train(&self) -> impl Iterator<Item = &Example> {
        self.target_train_labeled
            .iter()
            .chain(self.target_train_unlabeled.iter())
    }

    pub fn iter_all(&self) -> impl Iterator<Item = &Example> {
        self.source_train
            .iter()
            .chain(self.target_train())
            .chain(self.target_test.iter())
    }

    /// Checks every structural invariant of the data model.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if let Some(shape) = &self.shape {
            let product: usize = shape.iter().product();
            if product != self.dim {
                return Err(Error::Config(format!(
                    "shape {shape:?} does not flatten to dim {}",
                    self.dim
                )));
            }
        }
        let pools: [(&str, &[Example], Domain, Option<bool>); 4] = [
            ("source_train", &self.source_train, Domain::Source, Some(true)),
            (
                "target_train_labeled",
                &self.target_train_labeled,
                Domain::Target,
                Some(true),
            ),
            (
                "target_train_unlabeled",
                &self.target_train_unlabeled,
                Domain::Target,
                Some(false),
            ),
            ("target_test", &self.target_test, Domain::Target, Some(true)),
        ];
        let mut ids = HashSet::new();
        for (name, pool, domain, labeled) in pools {
            for ex in pool {
                if ex.domain != domain {
                    return Err(Error::Input(format!("{name}: example {} has wrong domain", ex.id)));
                }
                if ex.features.len() != self.dim {
                    return Err(Error::Dimension {
                        expected: self.dim,
                        actual: ex.features.len(),
                    });
                }
                if !ex.is_finite() {
                    return Err(Error::Input(format!("{name}: example {} has non-finite features", ex.id)));
                }
                if labeled == Some(true) && ex.label.is_none() {
                    return Err(Error::Input(format!("{name}: example {} is unlabeled", ex.id)));
                }
                if labeled == Some(false) && ex.label.is_some() {
                    return Err(Error::Input(format!("{name}: example {} carries a label", ex.id)));
                }
                if !ids.insert(ex.id.as_str()) {
                    return Err(Error::Input(format!("duplicate example id {}", ex.id)));
                }
            }
        }
        if self.n_target_labeled() >= self.n_source() && self.n_source() > 0 {
            return Err(Error::Input(format!(
                "labeled target pool ({}) must be smaller than the source pool ({})",
                self.n_target_labeled(),
                self.n_source()
            )));
        }
        Ok(())
    }
}

/// Number of positives in a pool per the fraction rule: `floor(fraction * n)`.
pub(crate) fn floor_count(fraction: f64, n: usize) -> usize {
    // guard against products such as 0.3 * 280 landing a hair under an integer
    ((fraction * n as f64) + 1e-9).floor() as usize
}
