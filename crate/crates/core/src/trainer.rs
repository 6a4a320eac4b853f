//! Training loop, baselines, and checkpoints.
//!
//! Every step draws one batch, evaluates the composite objective, and applies a single
//! simultaneous gradient step to every parameter. Gradient reversal inside the objective makes
//! that one descent step act as ascent for the adversarial side.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::datasets::{self, BatchSlot, BatchStream, DomainDataset, Example, Label};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossReport, ObjectiveTerms};
use crate::metrics::{self, MetricsReport};
use crate::networks::{
    self, ArchSpec, ClassifierHead, Discriminator, FeatureExtractor, InferenceMode, Linear, ModelBundle,
    ParamGroup,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub seed: u64,
    /// Score the target test pool after every epoch.
    pub eval_each_epoch: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.001,
            batch_size: 16,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            seed: 0,
            eval_each_epoch: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        self.loss.validate()
    }

    fn effective_momentum(&self) -> f64 {
        match self.optimizer {
            OptimizerKind::Sgd => 0.0,
            OptimizerKind::SgdMomentum => self.momentum,
        }
    }

    fn batch_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub metrics: Option<MetricsReport>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Step indices at which a new training phase began (fine-tuning).
    pub phase_boundaries: Vec<usize>,
}

impl TrainLog {
    /// Mean composite objective per epoch.
    pub fn epoch_mean_losses(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for s in &self.steps {
            if out.len() <= s.epoch {
                out.resize(s.epoch + 1, (0.0, 0));
            }
            out[s.epoch].0 += s.losses.total;
            out[s.epoch].1 += 1;
        }
        out.into_iter().map(|(t, n)| t / n.max(1) as f64).collect()
    }

    /// Writes one `{step, L_f, L_d1, L_d2, L_div, J}` JSON record per line.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            step: usize,
            #[serde(rename = "L_f")]
            l_f: f64,
            #[serde(rename = "L_d1")]
            l_d1: f64,
            #[serde(rename = "L_d2")]
            l_d2: f64,
            #[serde(rename = "L_div")]
            l_div: f64,
            #[serde(rename = "J")]
            total: f64,
        }
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.steps {
            let row = Row {
                step: s.step,
                l_f: s.losses.l_f,
                l_d1: s.losses.l_d1,
                l_d2: s.losses.l_d2,
                l_div: s.losses.l_div,
                total: s.losses.total,
            };
            serde_json::to_writer(&mut w, &row).expect("row serializes");
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// SGD with optional heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, bundle: &ModelBundle) -> Self {
        Optimizer {
            learning_rate: cfg.learning_rate,
            momentum: cfg.effective_momentum(),
            velocity: bundle
                .params()
                .iter()
                .map(|(_, _, t)| Array2::zeros(t.dim()))
                .collect(),
        }
    }

    pub fn apply(&mut self, bundle: &mut ModelBundle, grads: &networks::BundleGrads) {
        let lr = self.learning_rate;
        for (((_, param), (_, grad)), vel) in bundle
            .params_mut()
            .into_iter()
            .zip(&grads.grads)
            .zip(self.velocity.iter_mut())
        {
            if self.momentum == 0.0 {
                param.scaled_add(-lr, grad);
            } else {
                vel.mapv_inplace(|v| v * self.momentum);
                *vel += grad;
                param.scaled_add(-lr, vel);
            }
        }
    }
}

/// Resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub log: TrainLog,
    pub optimizer: Optimizer,
    /// Optimizer steps already taken in the current phase.
    pub step: usize,
}

struct Phase<'a> {
    stream: BatchStream<'a>,
    loss: LossConfig,
}

fn check_dims(ds: &DomainDataset, bundle: &ModelBundle) -> Result<()> {
    if ds.dim != bundle.input_dim() {
        return Err(Error::Dimension {
            expected: bundle.input_dim(),
            actual: ds.dim,
        });
    }
    Ok(())
}

fn epoch_metrics(bundle: &ModelBundle, ds: &DomainDataset, cfg: &TrainConfig) -> Option<MetricsReport> {
    if !cfg.eval_each_epoch {
        return None;
    }
    // single-class or empty test pools have no AUC; skip rather than fail training
    metrics::evaluate(bundle, &ds.target_test).ok()
}

/// Runs the phase from `state.step` until `cfg.epochs` epochs are done.
fn run_phase(
    state: &mut TrainState,
    mut phase: Phase<'_>,
    ds: &DomainDataset,
    cfg: &TrainConfig,
    step_offset: usize,
) -> Result<()> {
    let per_epoch = phase.stream.steps_per_epoch();
    let total = per_epoch * cfg.epochs;
    phase.stream.skip_steps(state.step);
    let mut epoch_start = Instant::now();
    while state.step < total {
        let batch = phase.stream.next().expect("batch streams are infinite");
        let (report, grads) = losses::objective_gradients(&batch, &state.bundle, &phase.loss)?;
        let global = step_offset + state.step;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: global,
                l_f: report.l_f,
                l_d1: report.l_d1,
                l_d2: report.l_d2,
                l_div: report.l_div,
            });
        }
        state.optimizer.apply(&mut state.bundle, &grads);
        state.log.steps.push(StepRecord {
            step: global,
            epoch: state.log.epochs.len(),
            losses: report,
        });
        state.step += 1;
        if state.step % per_epoch == 0 {
            state.log.epochs.push(EpochRecord {
                epoch: state.log.epochs.len(),
                metrics: epoch_metrics(&state.bundle, ds, cfg),
                wall_clock_secs: epoch_start.elapsed().as_secs_f64(),
            });
            epoch_start = Instant::now();
        }
    }
    Ok(())
}

/// Full adaptation training over the tri-stream batches.
///
/// Deterministic given the dataset, initial bundle, and config.
pub fn train(ds: &DomainDataset, bundle: ModelBundle, cfg: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    let optimizer = Optimizer::new(cfg, &bundle);
    let state = TrainState {
        bundle,
        log: TrainLog::default(),
        optimizer,
        step: 0,
    };
    let state = resume(ds, state, cfg)?;
    Ok((state.bundle, state.log))
}

/// Continues adaptation training from a saved state, reconstructing the batch stream from the
/// seed and skipping the batches already consumed.
pub fn resume(ds: &DomainDataset, mut state: TrainState, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    check_dims(ds, &state.bundle)?;
    let stream = datasets::make_batches(ds, cfg.batch_size, cfg.batch_seed())?;
    let phase = Phase {
        stream,
        loss: cfg.loss.clone(),
    };
    run_phase(&mut state, phase, ds, cfg, 0)?;
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CovidDa,
    SourceOnly,
    TargetOnly,
    FineTune,
    FeatureDaOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SourceOnly,
        Method::TargetOnly,
        Method::FineTune,
        Method::FeatureDaOnly,
        Method::CovidDa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::CovidDa => "covid_da",
            Method::SourceOnly => "source_only",
            Method::TargetOnly => "target_only",
            Method::FineTune => "fine_tune",
            Method::FeatureDaOnly => "feature_da_only",
        }
    }
}

fn supervised_phase(
    state: &mut TrainState,
    ds: &DomainDataset,
    pool: &[Example],
    slot: BatchSlot,
    cfg: &TrainConfig,
    step_offset: usize,
) -> Result<()> {
    let stream = datasets::make_pool_batches(pool, slot, cfg.batch_size, cfg.batch_seed())?;
    let loss = LossConfig {
        terms: ObjectiveTerms::classification_only(),
        ..cfg.loss.clone()
    };
    run_phase(state, Phase { stream, loss }, ds, cfg, step_offset)
}

/// Trains `method`. `CovidDa` uses `cfg.loss.terms` as given; the baselines override them.
pub fn run_method(
    method: Method,
    ds: &DomainDataset,
    mut bundle: ModelBundle,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    check_dims(ds, &bundle)?;
    match method {
        Method::CovidDa => {
            bundle.inference = InferenceMode::Ensemble;
            train(ds, bundle, cfg)
        }
        Method::FeatureDaOnly => {
            bundle.inference = InferenceMode::Ensemble;
            let mut cfg = cfg.clone();
            cfg.loss.terms = ObjectiveTerms {
                classification: true,
                feature_adversarial: true,
                classifier_adversarial: false,
                diversity: false,
            };
            train(ds, bundle, &cfg)
        }
        Method::SourceOnly | Method::TargetOnly | Method::FineTune => {
            bundle.inference = InferenceMode::SharedOnly;
            let optimizer = Optimizer::new(cfg, &bundle);
            let mut state = TrainState {
                bundle,
                log: TrainLog::default(),
                optimizer,
                step: 0,
            };
            if method != Method::TargetOnly {
                supervised_phase(&mut state, ds, &ds.source_train, BatchSlot::Source, cfg, 0)?;
            }
            if method != Method::SourceOnly {
                let offset = state.log.steps.len();
                if method == Method::FineTune {
                    state.log.phase_boundaries.push(offset);
                    state.optimizer = Optimizer::new(cfg, &state.bundle);
                    state.step = 0;
                }
                supervised_phase(
                    &mut state,
                    ds,
                    &ds.target_train_labeled,
                    BatchSlot::TargetLabeled,
                    cfg,
                    offset,
                )?;
            }
            Ok((state.bundle, state.log))
        }
    }
}

/// Baseline runner; `kind` must not be [`Method::CovidDa`].
pub fn run_baseline(
    kind: Method,
    ds: &DomainDataset,
    bundle: ModelBundle,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    if kind == Method::CovidDa {
        return Err(Error::Config("covid_da is not a baseline".into()));
    }
    run_method(kind, ds, bundle, cfg)
}

/// Balanced accuracy of the feature discriminator at telling source from target features
/// (`D_1 > 0.5` means target).
pub fn feature_discriminator_accuracy(bundle: &ModelBundle, source: &[Example], target: &[Example]) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Input("domain accuracy needs examples from both domains".into()));
    }
    let mut g = Graph::new();
    let vars = bundle.bind(&mut g);
    let mut side = |examples: &[Example], want_target: bool| -> Result<f64> {
        let x = networks::input_batch(&mut g, examples.iter().map(|e| e.features.as_slice()), bundle.input_dim())?;
        let f = networks::forward_features(&mut g, &bundle.extractor, &vars.extractor, x)?;
        let d = networks::discriminate(&mut g, &bundle.feature_disc, &vars.feature_disc, f)?;
        let hits = g.value(d).iter().filter(|&&v| (v > 0.5) == want_target).count();
        Ok(hits as f64 / examples.len() as f64)
    };
    let s = side(source, false)?;
    let t = side(target, true)?;
    Ok((s + t) / 2.0)
}

// ---------------------------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ParamRecord {
    fn new(name: String, group: ParamGroup, t: &Tensor) -> Self {
        ParamRecord {
            name,
            group,
            rows: t.nrows(),
            cols: t.ncols(),
            data: t.iter().copied().collect(),
        }
    }

    fn tensor(&self) -> Result<Tensor> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|_| Error::Checkpoint(format!("{}: data length does not match shape", self.name)))
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerRecord {
    learning_rate: f64,
    momentum: f64,
    step: usize,
    velocity: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    arch: ArchSpec,
    seed: u64,
    inference: InferenceMode,
    step: usize,
    params: Vec<ParamRecord>,
    log: TrainLog,
    optimizer: Option<OptimizerRecord>,
}

fn write_checkpoint(file: &CheckpointFile, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn param_records(bundle: &ModelBundle) -> Vec<ParamRecord> {
    bundle
        .params()
        .into_iter()
        .map(|(group, name, t)| ParamRecord::new(name, group, t))
        .collect()
}

/// Saves the bundle and its log.
pub fn save_checkpoint(bundle: &ModelBundle, log: &TrainLog, path: impl AsRef<Path>) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        arch: bundle.arch.clone(),
        seed: bundle.seed,
        inference: bundle.inference,
        step: log.steps.len(),
        params: param_records(bundle),
        log: log.clone(),
        optimizer: None,
    };
    write_checkpoint(&file, path.as_ref())
}

/// Saves everything needed to continue with [`resume`].
pub fn save_train_state(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let velocity = state
        .bundle
        .params()
        .into_iter()
        .zip(&state.optimizer.velocity)
        .map(|((group, name, _), v)| ParamRecord::new(name, group, v))
        .collect();
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        arch: state.bundle.arch.clone(),
        seed: state.bundle.seed,
        inference: state.bundle.inference,
        step: state.step,
        params: param_records(&state.bundle),
        log: state.log.clone(),
        optimizer: Some(OptimizerRecord {
            learning_rate: state.optimizer.learning_rate,
            momentum: state.optimizer.momentum,
            step: state.step,
            velocity,
        }),
    };
    write_checkpoint(&file, path.as_ref())
}

fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("corrupt file: {e}")))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} is not supported (expected {CHECKPOINT_VERSION})",
            file.format_version
        )));
    }
    Ok(file)
}

fn bundle_from_records(file: &CheckpointFile) -> Result<ModelBundle> {
    let arch = file.arch.clone();
    arch.validate()?;
    let mut bundle = ModelBundle {
        extractor: FeatureExtractor {
            layers: vec![Linear::zeros(1, 1); arch.extractor_widths.len()],
            activation: arch.extractor_activation,
        },
        shared: ClassifierHead {
            linear: Linear::zeros(1, 1),
        },
        target_head: ClassifierHead {
            linear: Linear::zeros(1, 1),
        },
        source_head: ClassifierHead {
            linear: Linear::zeros(1, 1),
        },
        feature_disc: Discriminator {
            hidden: Linear::zeros(1, 1),
            output: Linear::zeros(1, 1),
            activation: arch.discriminator_activation,
        },
        joint_disc: Discriminator {
            hidden: Linear::zeros(1, 1),
            output: Linear::zeros(1, 1),
            activation: arch.discriminator_activation,
        },
        arch,
        inference: file.inference,
        seed: file.seed,
    };
    let slots = bundle.params_mut();
    if slots.len() != file.params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter arrays, found {}",
            slots.len(),
            file.params.len()
        )));
    }
    for ((group, slot), rec) in slots.into_iter().zip(&file.params) {
        if group != rec.group {
            return Err(Error::Checkpoint(format!("{}: unexpected group {:?}", rec.name, rec.group)));
        }
        *slot = rec.tensor()?;
    }
    bundle.check_shapes()?;
    Ok(bundle)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelBundle, TrainLog)> {
    let file = read_checkpoint(path.as_ref())?;
    let bundle = bundle_from_records(&file)?;
    Ok((bundle, file.log))
}

pub fn load_train_state(path: impl AsRef<Path>) -> Result<TrainState> {
    let file = read_checkpoint(path.as_ref())?;
    let bundle = bundle_from_records(&file)?;
    let opt = file
        .optimizer
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
    let velocity = opt.velocity.iter().map(ParamRecord::tensor).collect::<Result<Vec<_>>>()?;
    for ((_, name, p), v) in bundle.params().iter().zip(&velocity) {
        if p.dim() != v.dim() {
            return Err(Error::Checkpoint(format!("{name}: velocity shape mismatch")));
        }
    }
    Ok(TrainState {
        optimizer: Optimizer {
            learning_rate: opt.learning_rate,
            momentum: opt.momentum,
            velocity,
        },
        step: opt.step,
        log: file.log,
        bundle,
    })
}

/// Labels of a pool as `0/1`.
pub fn label_vector(examples: &[Example]) -> Vec<u8> {
    examples
        .iter()
        .map(|e| e.label.map_or(0, |l: Label| l.index() as u8))
        .collect()
}
