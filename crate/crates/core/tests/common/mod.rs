#![allow(dead_code)]

pub mod gradcheck;

use covid_da::autodiff::Tensor;
use covid_da::datasets::{PoolCounts, SyntheticConfig, TriStreamBatch};
use covid_da::losses::{self, LossConfig, LossReport};
use covid_da::networks::{ArchSpec, ModelBundle, ParamGroup};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a small absolute floor so vanishing gradients compare on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub fn tiny_synthetic(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        counts: PoolCounts {
            source: 24,
            target_train: 20,
            target_test: 12,
        },
        test_positive_fraction: 0.25,
        target_positive_fraction: 0.3,
        labeled_fraction: 0.5,
        seed,
        ..SyntheticConfig::default()
    }
}

pub fn tiny_arch() -> ArchSpec {
    ArchSpec {
        input_dim: 2,
        extractor_widths: vec![3],
        discriminator_hidden: 3,
        ..ArchSpec::default()
    }
}

/// Central differences of `pick(report)` w.r.t. every parameter, in canonical order.
pub fn fd_params(
    bundle: &ModelBundle,
    batch: &TriStreamBatch<'_>,
    cfg: &LossConfig,
    pick: impl Fn(&LossReport) -> f64,
) -> Vec<(ParamGroup, Tensor)> {
    let n = bundle.params().len();
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let (group, shape) = {
            let params = bundle.params();
            (params[p].0, params[p].2.raw_dim())
        };
        let mut grad = Tensor::zeros(shape);
        let len = grad.len();
        for k in 0..len {
            let eval = |delta: f64| {
                let mut b = bundle.clone();
                let mut params = b.params_mut();
                let t = &mut params[p].1;
                let v = t.as_slice_mut().expect("parameters are contiguous");
                v[k] += delta;
                pick(&losses::composite_objective(batch, &b, cfg).unwrap())
            };
            let g = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            grad.as_slice_mut().unwrap()[k] = g;
        }
        out.push((group, grad));
    }
    out
}
