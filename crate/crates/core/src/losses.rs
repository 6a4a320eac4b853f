//! Scalar objectives: adversarial domain losses, classifier diversity, focal classification
//! loss, and their composition into the single training objective.
//!
//! The composite objective `J = L_f + alpha * (L_d1 + L_d2) - beta * L_div` is minimized by
//! plain gradient descent over all parameters. The minimax structure is encoded in the graph:
//!
//! * `D_1` sees the features through a gradient reversal, so the extractor ascends `L_d1`
//!   while `D_1` descends it.
//! * `D_2` sees `[f || C_d(f)]` with `f` detached and the prediction reversed, so only the
//!   shared head ascends `L_d2`.
//! * Diversity predictions are computed on detached features; only the heads receive it.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datasets::{Example, Label, TriStreamBatch};
use crate::error::{Error, Result};
use crate::networks::{self, BundleGrads, InferenceMode, ModelBundle, NUM_CLASSES};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainMeasure {
    LeastSquare,
    Gan,
    Focal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMeasure {
    Cosine,
    L1,
    L2,
    Kl,
    Js,
}

/// Which terms enter the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveTerms {
    pub classification: bool,
    pub feature_adversarial: bool,
    pub classifier_adversarial: bool,
    pub diversity: bool,
}

impl Default for ObjectiveTerms {
    fn default() -> Self {
        ObjectiveTerms {
            classification: true,
            feature_adversarial: true,
            classifier_adversarial: true,
            diversity: true,
        }
    }
}

impl ObjectiveTerms {
    pub const NONE: ObjectiveTerms = ObjectiveTerms {
        classification: false,
        feature_adversarial: false,
        classifier_adversarial: false,
        diversity: false,
    };

    pub fn classification_only() -> Self {
        ObjectiveTerms {
            classification: true,
            ..Self::NONE
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub domain_measure: DomainMeasure,
    pub diversity_measure: DiversityMeasure,
    pub epsilon: f64,
    pub terms: ObjectiveTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            beta: 0.1,
            gamma: 2.0,
            domain_measure: DomainMeasure::LeastSquare,
            diversity_measure: DiversityMeasure::Cosine,
            epsilon: DEFAULT_EPSILON,
            terms: ObjectiveTerms::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative finite number, got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_f: f64,
    pub l_d1: f64,
    pub l_d2: f64,
    pub l_div: f64,
    /// Composite objective `J`.
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_f, self.l_d1, self.l_d2, self.l_div, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

// ---------------------------------------------------------------------------------------------
// graph-level building blocks

/// Domain loss over discriminator outputs (`n x 1` each). Source is labeled 0, target 1.
pub fn domain_loss_graph(
    g: &mut Graph,
    measure: DomainMeasure,
    d_source: Var,
    d_target: Var,
    gamma: f64,
    eps: f64,
) -> Var {
    let (source_term, target_term) = match measure {
        DomainMeasure::LeastSquare => {
            let s = g.mul(d_source, d_source);
            let one_minus = one_minus(g, d_target);
            let t = g.mul(one_minus, one_minus);
            (s, t)
        }
        DomainMeasure::Gan => {
            let s = one_minus(g, d_source);
            let s = neg_log(g, s, eps);
            let t = neg_log(g, d_target, eps);
            (s, t)
        }
        DomainMeasure::Focal => {
            // source: -(d)^gamma log(1 - d); target: -(1 - d)^gamma log(d)
            let s_miss = one_minus(g, d_source);
            let s_log = neg_log(g, s_miss, eps);
            let s_w = g.powf(d_source, gamma);
            let s = g.mul(s_w, s_log);
            let t_log = neg_log(g, d_target, eps);
            let t_miss = one_minus(g, d_target);
            let t_w = g.powf(t_miss, gamma);
            let t = g.mul(t_w, t_log);
            (s, t)
        }
    };
    let s = g.mean(source_term);
    let t = g.mean(target_term);
    g.add(s, t)
}

fn one_minus(g: &mut Graph, x: Var) -> Var {
    let n = g.neg(x);
    g.add_scalar(n, 1.0)
}

fn neg_log(g: &mut Graph, x: Var, eps: f64) -> Var {
    let c = g.clamp(x, eps, 1.0);
    let l = g.ln(c);
    g.neg(l)
}

/// Row-wise similarity in `[0, 1]` between probability rows; 1 iff equal.
fn similarity(g: &mut Graph, measure: DiversityMeasure, a: Var, b: Var, eps: f64) -> Var {
    match measure {
        DiversityMeasure::Cosine => {
            let ab = g.mul(a, b);
            let dot = g.sum_cols(ab);
            let aa = g.mul(a, a);
            let na = g.sum_cols(aa);
            let na = g.sqrt(na);
            let bb = g.mul(b, b);
            let nb = g.sum_cols(bb);
            let nb = g.sqrt(nb);
            let denom = g.mul(na, nb);
            let denom = g.clamp(denom, eps, f64::INFINITY);
            g.div(dot, denom)
        }
        DiversityMeasure::L1 => {
            let diff = g.sub(a, b);
            let abs = g.abs(diff);
            let dist = g.sum_cols(abs);
            // largest L1 distance between two probability vectors is 2
            let scaled = g.scale(dist, -0.5);
            g.add_scalar(scaled, 1.0)
        }
        DiversityMeasure::L2 => {
            let diff = g.sub(a, b);
            let sq = g.mul(diff, diff);
            let sq = g.sum_cols(sq);
            let sq = g.clamp(sq, eps * eps, f64::INFINITY);
            let dist = g.sqrt(sq);
            let scaled = g.scale(dist, -std::f64::consts::FRAC_1_SQRT_2);
            g.add_scalar(scaled, 1.0)
        }
        DiversityMeasure::Kl => {
            let kl = kl_rows(g, a, b, eps);
            let neg = g.neg(kl);
            g.exp(neg)
        }
        DiversityMeasure::Js => {
            let sum = g.add(a, b);
            let m = g.scale(sum, 0.5);
            let kl_a = kl_rows(g, a, m, eps);
            let kl_b = kl_rows(g, b, m, eps);
            let js = g.add(kl_a, kl_b);
            let scaled = g.scale(js, -0.5 / std::f64::consts::LN_2);
            g.add_scalar(scaled, 1.0)
        }
    }
}

/// `KL(p || q)` per row with clamped logs.
fn kl_rows(g: &mut Graph, p: Var, q: Var, eps: f64) -> Var {
    let pc = g.clamp(p, eps, 1.0);
    let lp = g.ln(pc);
    let qc = g.clamp(q, eps, 1.0);
    let lq = g.ln(qc);
    let diff = g.sub(lp, lq);
    let w = g.mul(p, diff);
    g.sum_cols(w)
}

/// `-mean_s sim(shared, source_specific) - mean_t sim(shared, target_specific)`.
///
/// Always in `[-2, 0]`; `-2` means the shared and specific heads agree everywhere.
pub fn diversity_graph(
    g: &mut Graph,
    measure: DiversityMeasure,
    shared_source: Var,
    specific_source: Var,
    shared_target: Var,
    specific_target: Var,
    eps: f64,
) -> Var {
    let s = similarity(g, measure, shared_source, specific_source, eps);
    let s = g.mean(s);
    let t = similarity(g, measure, shared_target, specific_target, eps);
    let t = g.mean(t);
    let both = g.add(s, t);
    g.neg(both)
}

/// `-mean_i y_i^T ((1 - p_i)^gamma * log p_i)` with `p` clamped into `[eps, 1]` inside the log.
pub fn focal_graph(g: &mut Graph, one_hot: Var, probs: Var, gamma: f64, eps: f64) -> Var {
    let clamped = g.clamp(probs, eps, 1.0);
    let log_p = g.ln(clamped);
    let weighted = if gamma == 0.0 {
        log_p
    } else {
        let miss = one_minus(g, probs);
        let miss = g.clamp(miss, 0.0, 1.0);
        let w = g.powf(miss, gamma);
        g.mul(w, log_p)
    };
    let picked = g.mul(one_hot, weighted);
    let per_row = g.sum_cols(picked);
    let m = g.mean(per_row);
    g.neg(m)
}

// ---------------------------------------------------------------------------------------------
// value-level API

fn check_unit_interval(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Input(format!("{name}: empty batch")));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("{name}: discriminator output {v} outside [0, 1]")));
    }
    Ok(())
}

fn column(g: &mut Graph, values: &[f64]) -> Var {
    g.leaf(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape"))
}

fn prob_rows(g: &mut Graph, name: &str, rows: &[[f64; 2]]) -> Result<Var> {
    for r in rows {
        let ok = r.iter().all(|&p| (0.0..=1.0).contains(&p)) && (r[0] + r[1] - 1.0).abs() <= 1e-6;
        if !ok {
            return Err(Error::Input(format!("{name}: {r:?} is not a probability vector")));
        }
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(g.leaf(Array2::from_shape_vec((rows.len(), 2), data).expect("row shape")))
}

/// Least-square domain loss of the feature discriminator.
pub fn domain_loss_d1(d1_source: &[f64], d1_target: &[f64]) -> Result<f64> {
    domain_loss_variant(DomainMeasure::LeastSquare, d1_source, d1_target, 0.0, DEFAULT_EPSILON)
}

/// Least-square domain loss of the joint discriminator; same formula as [`domain_loss_d1`].
pub fn domain_loss_d2(d2_source: &[f64], d2_target: &[f64]) -> Result<f64> {
    domain_loss_variant(DomainMeasure::LeastSquare, d2_source, d2_target, 0.0, DEFAULT_EPSILON)
}

pub fn domain_loss_variant(
    measure: DomainMeasure,
    d_source: &[f64],
    d_target: &[f64],
    gamma: f64,
    eps: f64,
) -> Result<f64> {
    check_unit_interval("source", d_source)?;
    check_unit_interval("target", d_target)?;
    let mut g = Graph::new();
    let s = column(&mut g, d_source);
    let t = column(&mut g, d_target);
    let l = domain_loss_graph(&mut g, measure, s, t, gamma, eps);
    Ok(g.scalar_value(l))
}

/// Diversity between shared and domain-specific predictions, paired per example.
pub fn diversity_loss(
    pairs_source: &[([f64; 2], [f64; 2])],
    pairs_target: &[([f64; 2], [f64; 2])],
    measure: DiversityMeasure,
    eps: f64,
) -> Result<f64> {
    if pairs_source.is_empty() || pairs_target.is_empty() {
        return Err(Error::Input("diversity loss needs pairs from both domains".into()));
    }
    let mut g = Graph::new();
    let split = |pairs: &[([f64; 2], [f64; 2])]| -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        pairs.iter().copied().unzip()
    };
    let (ds, ss) = split(pairs_source);
    let (dt, st) = split(pairs_target);
    let ds = prob_rows(&mut g, "source shared", &ds)?;
    let ss = prob_rows(&mut g, "source specific", &ss)?;
    let dt = prob_rows(&mut g, "target shared", &dt)?;
    let st = prob_rows(&mut g, "target specific", &st)?;
    let l = diversity_graph(&mut g, measure, ds, ss, dt, st, eps);
    Ok(g.scalar_value(l))
}

/// Focal loss over labeled examples; `labels[i]` must be present.
pub fn focal_loss(labels: &[Option<Label>], probs: &[[f64; 2]], gamma: f64, eps: f64) -> Result<f64> {
    if labels.len() != probs.len() {
        return Err(Error::Input(format!(
            "{} labels for {} predictions",
            labels.len(),
            probs.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("focal loss over an empty batch".into()));
    }
    let one_hot = one_hot_rows(labels.iter().copied())?;
    let mut g = Graph::new();
    let y = g.leaf(one_hot);
    let p = prob_rows(&mut g, "prediction", probs)?;
    let l = focal_graph(&mut g, y, p, gamma, eps);
    Ok(g.scalar_value(l))
}

fn one_hot_rows(labels: impl ExactSizeIterator<Item = Option<Label>>) -> Result<Array2<f64>> {
    let n = labels.len();
    let mut data = Vec::with_capacity(n * NUM_CLASSES);
    for (i, l) in labels.enumerate() {
        let l = l.ok_or_else(|| Error::Input(format!("example {i} in a labeled slot has no label")))?;
        data.extend_from_slice(&l.one_hot());
    }
    Ok(Array2::from_shape_vec((n, NUM_CLASSES), data).expect("one-hot shape"))
}

// ---------------------------------------------------------------------------------------------
// composite objective

/// Graph nodes of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub l_f: Option<Var>,
    pub l_d1: Option<Var>,
    pub l_d2: Option<Var>,
    pub l_div: Option<Var>,
    pub total: Var,
}

impl ObjectiveVars {
    pub fn report(&self, g: &Graph) -> LossReport {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar_value(x));
        LossReport {
            l_f: v(self.l_f),
            l_d1: v(self.l_d1),
            l_d2: v(self.l_d2),
            l_div: v(self.l_div),
            total: g.scalar_value(self.total),
        }
    }
}

fn features_of<'a>(examples: impl IntoIterator<Item = &'a Example>) -> impl Iterator<Item = &'a [f64]> {
    examples.into_iter().map(|e| e.features.as_slice())
}

fn average(g: &mut Graph, a: Var, b: Var) -> Var {
    let s = g.add(a, b);
    g.scale(s, 0.5)
}

/// Builds the composite objective for one batch on an already-bound bundle.
///
/// Terms whose inputs are absent (e.g. no target rows) are skipped and report 0. Disabled
/// terms are still evaluated for telemetry but do not enter `total`.
pub fn build_objective(
    g: &mut Graph,
    bundle: &ModelBundle,
    vars: &networks::BundleVars,
    batch: &TriStreamBatch<'_>,
    cfg: &LossConfig,
) -> Result<ObjectiveVars> {
    let dim = bundle.input_dim();
    let eps = cfg.epsilon;
    let ensemble = bundle.inference == InferenceMode::Ensemble;
    let n_tl = batch.target_labeled.len();
    let has_source = !batch.source.is_empty();
    let has_target = batch.n_target() > 0;

    let f_source = if has_source {
        let x = networks::input_batch(g, features_of(batch.source.iter().copied()), dim)?;
        Some(networks::forward_features(g, &bundle.extractor, &vars.extractor, x)?)
    } else {
        None
    };
    let f_target = if has_target {
        let x = networks::input_batch(g, features_of(batch.target()), dim)?;
        Some(networks::forward_features(g, &bundle.extractor, &vars.extractor, x)?)
    } else {
        None
    };

    // classification on ensemble (or shared-only) predictions over every labeled example
    let mut labeled_probs = Vec::new();
    let mut labels: Vec<Option<Label>> = Vec::new();
    if let Some(fs) = f_source {
        let p_shared = networks::classify(g, &vars.shared, fs)?;
        let p = if ensemble {
            let p_specific = networks::classify(g, &vars.source_head, fs)?;
            average(g, p_shared, p_specific)
        } else {
            p_shared
        };
        labeled_probs.push(p);
        labels.extend(batch.source.iter().map(|e| e.label));
    }
    if let (Some(ft), true) = (f_target, n_tl > 0) {
        let fl = g.slice_rows(ft, 0, n_tl);
        let p_shared = networks::classify(g, &vars.shared, fl)?;
        let p = if ensemble {
            let p_specific = networks::classify(g, &vars.target_head, fl)?;
            average(g, p_shared, p_specific)
        } else {
            p_shared
        };
        labeled_probs.push(p);
        labels.extend(batch.target_labeled.iter().map(|e| e.label));
    }
    let l_f = match labeled_probs.as_slice() {
        [] => None,
        [p] => Some(*p),
        [a, b] => Some(g.concat_rows(*a, *b)),
        _ => unreachable!(),
    }
    .map(|p| -> Result<Var> {
        let y = g.leaf(one_hot_rows(labels.iter().copied())?);
        Ok(focal_graph(g, y, p, cfg.gamma, eps))
    })
    .transpose()?;

    let (mut l_d1, mut l_d2, mut l_div) = (None, None, None);
    if let (Some(fs), Some(ft)) = (f_source, f_target) {
        // feature adversarial: reversed features into D_1
        let rs = g.grl(fs, 1.0);
        let rt = g.grl(ft, 1.0);
        let ds = networks::discriminate(g, &bundle.feature_disc, &vars.feature_disc, rs)?;
        let dt = networks::discriminate(g, &bundle.feature_disc, &vars.feature_disc, rt)?;
        l_d1 = Some(domain_loss_graph(g, cfg.domain_measure, ds, dt, cfg.gamma, eps));

        // classifier adversarial: detached features, reversed shared prediction into D_2
        let fs_detached = g.stop_gradient(fs);
        let ft_detached = g.stop_gradient(ft);
        let joint = |g: &mut Graph, f: Var| -> Result<Var> {
            let p = networks::classify(g, &vars.shared, f)?;
            let p = g.grl(p, 1.0);
            let v = g.concat_cols(f, p);
            networks::discriminate(g, &bundle.joint_disc, &vars.joint_disc, v)
        };
        let ds = joint(g, fs_detached)?;
        let dt = joint(g, ft_detached)?;
        l_d2 = Some(domain_loss_graph(g, cfg.domain_measure, ds, dt, cfg.gamma, eps));

        if ensemble {
            let shared_s = networks::classify(g, &vars.shared, fs_detached)?;
            let spec_s = networks::classify(g, &vars.source_head, fs_detached)?;
            let shared_t = networks::classify(g, &vars.shared, ft_detached)?;
            let spec_t = networks::classify(g, &vars.target_head, ft_detached)?;
            l_div = Some(diversity_graph(
                g,
                cfg.diversity_measure,
                shared_s,
                spec_s,
                shared_t,
                spec_t,
                eps,
            ));
        }
    }

    let terms = cfg.terms;
    let mut total: Option<Var> = None;
    let mut push = |g: &mut Graph, term: Var| {
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    };
    if terms.classification {
        let lf = l_f.ok_or_else(|| Error::Input("batch has no labeled examples".into()))?;
        push(g, lf);
    }
    let adversarial = [
        (terms.feature_adversarial, l_d1),
        (terms.classifier_adversarial, l_d2),
    ];
    for (enabled, term) in adversarial {
        if let (true, Some(l)) = (enabled, term) {
            let w = g.scale(l, cfg.alpha);
            push(g, w);
        }
    }
    if let (true, Some(l)) = (terms.diversity, l_div) {
        let w = g.scale(l, -cfg.beta);
        push(g, w);
    }
    let total = match total {
        Some(t) => t,
        None => g.scalar(0.0),
    };
    Ok(ObjectiveVars {
        l_f,
        l_d1,
        l_d2,
        l_div,
        total,
    })
}

/// Loss values for one batch without gradients.
pub fn composite_objective(
    batch: &TriStreamBatch<'_>,
    bundle: &ModelBundle,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let vars = bundle.bind(&mut g);
    let obj = build_objective(&mut g, bundle, &vars, batch, cfg)?;
    Ok(obj.report(&g))
}

/// Loss values and the gradient of `total` w.r.t. every parameter.
pub fn objective_gradients(
    batch: &TriStreamBatch<'_>,
    bundle: &ModelBundle,
    cfg: &LossConfig,
) -> Result<(LossReport, BundleGrads)> {
    let mut g = Graph::new();
    let vars = bundle.bind(&mut g);
    let obj = build_objective(&mut g, bundle, &vars, batch, cfg)?;
    let grads = g.backward(obj.total);
    Ok((obj.report(&g), bundle.collect_grads(&vars, &grads)))
}
