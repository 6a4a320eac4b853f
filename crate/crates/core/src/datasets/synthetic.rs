//! Synthetic two-domain benchmark with controlled domain discrepancy and task difference.
//!
//! Source data is a two-class Gaussian mixture. Target data runs the same generative process
//! and then applies an affine map (rotation of the first two coordinates plus a translation);
//! target positives are additionally offset so the optimal decision rule moves.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{floor_count, Domain, DomainDataset, Example, Label};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassConditional {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` covariance.
    pub cov: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineShift {
    /// Rotation angle (radians) in the plane of the first two coordinates.
    pub rotation: f64,
    pub translation: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub source: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl PoolCounts {
    /// Source / target-train / target-test sizes of the reference chest X-ray collection.
    pub const REFERENCE: PoolCounts = PoolCounts {
        source: 7919,
        target_train: 2799,
        target_test: 945,
    };

    /// Scales every count, rounding half to even.
    pub fn scaled(self, factor: f64) -> PoolCounts {
        let scale = |n: usize| (n as f64 * factor).round_ties_even() as usize;
        PoolCounts {
            source: scale(self.source),
            target_train: scale(self.target_train),
            target_test: scale(self.target_test),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dim: usize,
    /// Source class-conditionals, `[normal, disease]`.
    pub source_classes: [ClassConditional; 2],
    pub shift: AffineShift,
    /// Extra offset applied to target disease examples after the affine map.
    pub target_positive_offset: Vec<f64>,
    pub source_positive_fraction: f64,
    pub target_positive_fraction: f64,
    pub test_positive_fraction: f64,
    pub counts: PoolCounts,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dim: 2,
            source_classes: [
                ClassConditional {
                    mean: vec![-1.0, 0.0],
                    cov: vec![vec![0.6, 0.0], vec![0.0, 0.6]],
                },
                ClassConditional {
                    mean: vec![1.0, 0.0],
                    cov: vec![vec![0.6, 0.0], vec![0.0, 0.6]],
                },
            ],
            shift: AffineShift {
                rotation: std::f64::consts::FRAC_PI_4,
                translation: vec![1.0, 0.5],
            },
            target_positive_offset: vec![0.0, 1.0],
            source_positive_fraction: 2306.0 / 7919.0,
            target_positive_fraction: 258.0 / 2799.0,
            test_positive_fraction: 60.0 / 945.0,
            counts: PoolCounts::REFERENCE.scaled(0.1),
            labeled_fraction: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Same config with every domain difference removed.
    pub fn without_shift(mut self) -> Self {
        self.shift = AffineShift {
            rotation: 0.0,
            translation: vec![0.0; self.dim],
        };
        self.target_positive_offset = vec![0.0; self.dim];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        for (i, class) in self.source_classes.iter().enumerate() {
            if class.mean.len() != d {
                return Err(Error::Config(format!("class {i} mean has length {}", class.mean.len())));
            }
            cholesky(&class.cov, d).map_err(|m| Error::Config(format!("class {i} covariance {m}")))?;
        }
        if self.shift.translation.len() != d || self.target_positive_offset.len() != d {
            return Err(Error::Config("shift vectors must have length dim".into()));
        }
        if d < 2 && self.shift.rotation != 0.0 {
            return Err(Error::Config("rotation requires dim >= 2".into()));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled fraction {} outside (0, 1]",
                self.labeled_fraction
            )));
        }
        for (name, f) in [
            ("source", self.source_positive_fraction),
            ("target", self.target_positive_fraction),
            ("test", self.test_positive_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} positive fraction {f} outside (0, 1)")));
            }
        }
        let c = self.counts;
        if c.source == 0 || c.target_train == 0 || c.target_test == 0 {
            return Err(Error::Config(format!("every pool needs at least one example: {c:?}")));
        }
        Ok(())
    }
}

fn cholesky(cov: &[Vec<f64>], d: usize) -> std::result::Result<DMatrix<f64>, &'static str> {
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err("has the wrong shape");
    }
    let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
    for i in 0..d {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                return Err("is not symmetric");
            }
        }
    }
    m.cholesky().map(|c| c.l()).ok_or("is not positive definite")
}

struct Sampler {
    means: [DVector<f64>; 2],
    factors: [DMatrix<f64>; 2],
    rotation: DMatrix<f64>,
    translation: DVector<f64>,
    offset: DVector<f64>,
}

impl Sampler {
    fn new(cfg: &SyntheticConfig) -> Result<Self> {
        let d = cfg.dim;
        let factor = |i: usize| {
            cholesky(&cfg.source_classes[i].cov, d).map_err(|m| Error::Config(format!("covariance {m}")))
        };
        let mut rotation = DMatrix::identity(d, d);
        if d >= 2 {
            let (s, c) = cfg.shift.rotation.sin_cos();
            rotation[(0, 0)] = c;
            rotation[(0, 1)] = -s;
            rotation[(1, 0)] = s;
            rotation[(1, 1)] = c;
        }
        Ok(Sampler {
            means: [
                DVector::from_column_slice(&cfg.source_classes[0].mean),
                DVector::from_column_slice(&cfg.source_classes[1].mean),
            ],
            factors: [factor(0)?, factor(1)?],
            rotation,
            translation: DVector::from_column_slice(&cfg.shift.translation),
            offset: DVector::from_column_slice(&cfg.target_positive_offset),
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng, label: Label, domain: Domain) -> Vec<f64> {
        let k = label.index();
        let d = self.means[k].len();
        let noise = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
        let z = &self.means[k] + &self.factors[k] * noise;
        let x = match domain {
            Domain::Source => z,
            Domain::Target => {
                let mut x = &self.rotation * z + &self.translation;
                if label == Label::Disease {
                    x += &self.offset;
                }
                x
            }
        };
        x.iter().copied().collect()
    }
}

fn draw_pool(
    sampler: &Sampler,
    rng: &mut ChaCha8Rng,
    domain: Domain,
    n: usize,
    positive_fraction: f64,
    prefix: &str,
) -> Vec<Example> {
    let n_pos = floor_count(positive_fraction, n);
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_pos { Label::Disease } else { Label::Normal })
        .collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| Example {
            id: format!("{prefix}-{i:06}"),
            features: sampler.draw(rng, label, domain),
            label: Some(label),
            domain,
        })
        .collect()
}

/// Draws a full [`DomainDataset`]; identical configs give identical datasets.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DomainDataset> {
    cfg.validate()?;
    let sampler = Sampler::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let source_train = draw_pool(
        &sampler,
        &mut rng,
        Domain::Source,
        cfg.counts.source,
        cfg.source_positive_fraction,
        "src",
    );
    let target_train = draw_pool(
        &sampler,
        &mut rng,
        Domain::Target,
        cfg.counts.target_train,
        cfg.target_positive_fraction,
        "tgt",
    );
    let target_test = draw_pool(
        &sampler,
        &mut rng,
        Domain::Target,
        cfg.counts.target_test,
        cfg.test_positive_fraction,
        "test",
    );

    // stratified labeled split over both target classes
    let n_labeled = floor_count(cfg.labeled_fraction, target_train.len());
    let n_pos = target_train
        .iter()
        .filter(|e| e.label == Some(Label::Disease))
        .count();
    let n_neg = target_train.len() - n_pos;
    let labeled_pos = floor_count(cfg.labeled_fraction, n_pos).min(n_labeled);
    let labeled_neg = (n_labeled - labeled_pos).min(n_neg);

    let (mut taken_pos, mut taken_neg) = (0, 0);
    let mut target_train_labeled = Vec::with_capacity(n_labeled);
    let mut target_train_unlabeled = Vec::with_capacity(target_train.len() - n_labeled);
    for mut ex in target_train {
        let keep = match ex.label {
            Some(Label::Disease) if taken_pos < labeled_pos => {
                taken_pos += 1;
                true
            }
            Some(Label::Normal) if taken_neg < labeled_neg => {
                taken_neg += 1;
                true
            }
            _ => false,
        };
        if keep {
            target_train_labeled.push(ex);
        } else {
            ex.label = None;
            target_train_unlabeled.push(ex);
        }
    }

    let ds = DomainDataset {
        dim: cfg.dim,
        shape: None,
        source_train,
        target_train_labeled,
        target_train_unlabeled,
        target_test,
    };
    ds.validate()?;
    Ok(ds)
}
