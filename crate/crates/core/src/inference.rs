//! Ensemble prediction: the shared head averaged with a domain-specific head.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::autodiff::Graph;
use crate::datasets::{Example, Label};
use crate::error::{Error, Result};
use crate::networks::{self, InferenceMode, ModelBundle};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub shared: [f64; 2],
    /// Domain-specific head output; equals `shared` for single-classifier bundles.
    pub branch: [f64; 2],
    pub ensemble: [f64; 2],
    pub hard_label: Label,
    pub positive_score: f64,
}

impl Prediction {
    /// Averages the two branches; ties go to the negative class.
    pub fn from_branches(shared: [f64; 2], branch: [f64; 2]) -> Self {
        let ensemble = [(shared[0] + branch[0]) / 2.0, (shared[1] + branch[1]) / 2.0];
        let hard_label = if ensemble[1] > ensemble[0] {
            Label::Disease
        } else {
            Label::Normal
        };
        Prediction {
            shared,
            branch,
            ensemble,
            hard_label,
            positive_score: ensemble[1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Branch {
    Source,
    Target,
}

fn row(t: &ndarray::Array2<f64>) -> [f64; 2] {
    [t[[0, 0]], t[[0, 1]]]
}

fn predict_one(bundle: &ModelBundle, x: &[f64], branch: Branch) -> Result<Prediction> {
    if x.len() != bundle.input_dim() {
        return Err(Error::Dimension {
            expected: bundle.input_dim(),
            actual: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite input features".into()));
    }
    let mut g = Graph::new();
    let vars = bundle.bind(&mut g);
    let input = networks::input_batch(&mut g, [x], bundle.input_dim())?;
    let f = networks::forward_features(&mut g, &bundle.extractor, &vars.extractor, input)?;
    let shared_var = networks::classify(&mut g, &vars.shared, f)?;
    let shared = row(g.value(shared_var));
    let specific = match (bundle.inference, branch) {
        (InferenceMode::SharedOnly, _) => shared,
        (InferenceMode::Ensemble, Branch::Target) => {
            let p = networks::classify(&mut g, &vars.target_head, f)?;
            row(g.value(p))
        }
        (InferenceMode::Ensemble, Branch::Source) => {
            let p = networks::classify(&mut g, &vars.source_head, f)?;
            row(g.value(p))
        }
    };
    Ok(Prediction::from_branches(shared, specific))
}

/// Target-domain prediction: shared head averaged with the target head.
pub fn predict_target(bundle: &ModelBundle, x: &[f64]) -> Result<Prediction> {
    predict_one(bundle, x, Branch::Target)
}

/// Source-domain prediction: shared head averaged with the source head.
pub fn predict_source(bundle: &ModelBundle, x: &[f64]) -> Result<Prediction> {
    predict_one(bundle, x, Branch::Source)
}

/// Batch form of [`predict_target`]; each row is evaluated independently, so results match
/// the single-example path exactly.
pub fn predict_target_batch<'a>(
    bundle: &ModelBundle,
    xs: impl IntoIterator<Item = &'a [f64]>,
) -> Result<Vec<Prediction>> {
    xs.into_iter().map(|x| predict_target(bundle, x)).collect()
}

pub fn predict_source_batch<'a>(
    bundle: &ModelBundle,
    xs: impl IntoIterator<Item = &'a [f64]>,
) -> Result<Vec<Prediction>> {
    xs.into_iter().map(|x| predict_source(bundle, x)).collect()
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    id: &'a str,
    positive_score: f64,
    hard_label: usize,
}

/// Writes one `{id, positive_score, hard_label}` JSON record per line.
pub fn export_predictions(path: impl AsRef<Path>, examples: &[Example], preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    if examples.len() != preds.len() {
        return Err(Error::Input("examples and predictions differ in length".into()));
    }
    let mut out = Vec::new();
    for (ex, p) in examples.iter().zip(preds) {
        let rec = PredictionRecord {
            id: &ex.id,
            positive_score: p.positive_score,
            hard_label: p.hard_label.index(),
        };
        serde_json::to_writer(&mut out, &rec).expect("record serializes");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}
