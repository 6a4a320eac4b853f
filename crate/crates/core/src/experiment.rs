//! Config-driven experiment runner.
//!
//! An [`ExperimentConfig`] expands into table rows (methods, ablation toggles, trade-off sweeps,
//! loss-measure variants). Every row is trained once per seed; the results are aggregated into a
//! [`ResultsTable`] and written under the output directory together with per-run logs and
//! checkpoints. Nothing written to the tables or logs depends on wall-clock time, so repeating a
//! run reproduces them byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{self, DomainDataset, Example, SyntheticConfig};
use crate::error::{Error, Result};
use crate::losses::{DiversityMeasure, DomainMeasure, LossReport};
use crate::metrics::{self, MetricsReport, RowCheck};
use crate::networks::{ArchSpec, ModelBundle};
use crate::trainer::{self, Method, TrainConfig};

pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_TXT: &str = "results.txt";
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
pub const RUNS_DIR: &str = "runs";
pub const PLOTS_DIR: &str = "plots";

/// Added to the dataset seed when drawing the held-out source sample used to score `D_1`.
const HELD_OUT_SALT: u64 = 0x00d1_5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Drawn per run; the run seed is added to the generator seed.
    Synthetic(SyntheticConfig),
    /// Loaded once and shared by every run.
    Manifest { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticConfig::default())
    }
}

/// Objective toggles for the adaptation methods. `use_focal = false` trains with plain
/// cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_focal: bool,
    pub use_d1: bool,
    pub use_d2: bool,
    pub use_div: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_focal: true,
            use_d1: true,
            use_d2: true,
            use_div: true,
        }
    }
}

impl Ablation {
    const fn new(use_focal: bool, use_d1: bool, use_d2: bool, use_div: bool) -> Self {
        Ablation {
            use_focal,
            use_d1,
            use_d2,
            use_div,
        }
    }

    /// The five ablation rows: cross-entropy, focal, focal + D1, focal + D1 + D2, everything.
    pub const LADDER: [Ablation; 5] = [
        Ablation::new(false, false, false, false),
        Ablation::new(true, false, false, false),
        Ablation::new(true, true, false, false),
        Ablation::new(true, true, true, false),
        Ablation::new(true, true, true, true),
    ];

    pub fn label(&self) -> String {
        let mut parts = vec![if self.use_focal { "focal" } else { "ce" }];
        for (on, name) in [(self.use_d1, "d1"), (self.use_d2, "d2"), (self.use_div, "div")] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }

    pub fn apply(&self, cfg: &mut TrainConfig) {
        let terms = &mut cfg.loss.terms;
        terms.classification = true;
        terms.feature_adversarial = self.use_d1;
        terms.classifier_adversarial = self.use_d2;
        terms.diversity = self.use_div;
        if !self.use_focal {
            cfg.loss.gamma = 0.0;
        }
    }
}

/// Lists that expand into extra table rows. Each non-empty list contributes one row per entry,
/// varying only that setting from the base config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub methods: Vec<Method>,
    pub ablations: Vec<Ablation>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub domain_measures: Vec<DomainMeasure>,
    pub diversity_measures: Vec<DiversityMeasure>,
}

impl Grid {
    pub fn is_empty(&self) -> bool {
        self.methods.is_empty()
            && self.ablations.is_empty()
            && self.alpha.is_empty()
            && self.beta.is_empty()
            && self.domain_measures.is_empty()
            && self.diversity_measures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub method: Method,
    /// Applied on top of `train.loss.terms` for the adaptation methods.
    pub ablation: Ablation,
    /// `train.seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    /// `arch.input_dim` is taken from the dataset.
    pub arch: ArchSpec,
    pub grid: Grid,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            dataset: DatasetSpec::default(),
            method: Method::CovidDa,
            ablation: Ablation::default(),
            train: TrainConfig::default(),
            arch: ArchSpec::default(),
            grid: Grid::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("results"),
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Full effective configuration, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        self.arch.validate()?;
        for v in expand(self)? {
            v.train
                .validate()
                .map_err(|e| Error::Config(format!("row {}: {e}", v.label)))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: f64,
}

/// One table row before training.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub method: Method,
    pub parameter: Option<Parameter>,
    pub train: TrainConfig,
}

fn measure_name<T: Serialize>(m: &T) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Expands the config into table rows, in a fixed order.
pub fn expand(cfg: &ExperimentConfig) -> Result<Vec<Variant>> {
    let mut base = cfg.train.clone();
    cfg.ablation.apply(&mut base);
    let variant = |label: String, method: Method, parameter: Option<Parameter>, train: TrainConfig| Variant {
        label,
        method,
        parameter,
        train,
    };
    let g = &cfg.grid;
    if g.is_empty() {
        return Ok(vec![variant(cfg.method.name().into(), cfg.method, None, base)]);
    }
    let mut rows = Vec::new();
    for &m in &g.methods {
        rows.push(variant(format!("method={}", m.name()), m, None, base.clone()));
    }
    for a in &g.ablations {
        let mut t = cfg.train.clone();
        a.apply(&mut t);
        rows.push(variant(format!("ablation={}", a.label()), cfg.method, None, t));
    }
    for (name, values) in [("alpha", &g.alpha), ("beta", &g.beta)] {
        for &v in values {
            let mut t = base.clone();
            if name == "alpha" {
                t.loss.alpha = v;
            } else {
                t.loss.beta = v;
            }
            let p = Parameter {
                name: name.into(),
                value: v,
            };
            rows.push(variant(format!("{name}={v}"), cfg.method, Some(p), t));
        }
    }
    for &m in &g.domain_measures {
        let mut t = base.clone();
        t.loss.domain_measure = m;
        rows.push(variant(format!("domain_measure={}", measure_name(&m)), cfg.method, None, t));
    }
    for &m in &g.diversity_measures {
        let mut t = base.clone();
        t.loss.diversity_measure = m;
        rows.push(variant(format!("diversity_measure={}", measure_name(&m)), cfg.method, None, t));
    }
    let mut labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("grid produces duplicate rows".into()));
    }
    Ok(rows)
}

/// Dataset for one seed plus, for synthetic data, a held-out source sample the size of the
/// test pool.
pub fn dataset_for_seed(spec: &DatasetSpec, seed: u64) -> Result<(DomainDataset, Option<Vec<Example>>)> {
    match spec {
        DatasetSpec::Synthetic(s) => {
            let mut c = s.clone();
            c.seed = s.seed.wrapping_add(seed);
            let ds = datasets::generate_synthetic(&c)?;
            let mut h = c.clone();
            h.seed = c.seed.wrapping_add(HELD_OUT_SALT);
            let mut held = datasets::generate_synthetic(&h)?.source_train;
            held.truncate(ds.target_test.len());
            Ok((ds, Some(held)))
        }
        DatasetSpec::Manifest { path } => Ok((datasets::load_manifest(path)?, None)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub metrics: MetricsReport,
    /// Balanced domain accuracy of `D_1` on held-out source vs target test features.
    pub d1_accuracy: Option<f64>,
    pub final_losses: Option<LossReport>,
}

/// Point statistics for the scalar metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub auc: f64,
    pub sum: f64,
    pub cost: f64,
    pub specificity: f64,
}

impl MetricStats {
    const NAMES: [&'static str; 7] = ["f1", "recall", "precision", "auc", "sum", "cost", "specificity"];

    fn values(&self) -> [f64; 7] {
        [
            self.f1,
            self.recall,
            self.precision,
            self.auc,
            self.sum,
            self.cost,
            self.specificity,
        ]
    }

    fn from_values(v: [f64; 7]) -> Self {
        MetricStats {
            f1: v[0],
            recall: v[1],
            precision: v[2],
            auc: v[3],
            sum: v[4],
            cost: v[5],
            specificity: v[6],
        }
    }

    fn of(r: &MetricsReport) -> Self {
        MetricStats {
            f1: r.f1,
            recall: r.recall,
            precision: r.precision,
            auc: r.auc,
            sum: r.sum,
            cost: r.cost,
            specificity: r.specificity,
        }
    }
}

/// Linear-interpolation quantile of a non-empty sample.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

pub fn iqr(values: &[f64]) -> f64 {
    quantile(values, 0.75) - quantile(values, 0.25)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub label: String,
    pub method: Method,
    pub parameter: Option<Parameter>,
    /// Run directory relative to the output directory.
    pub dir: String,
    pub median: MetricStats,
    pub iqr: MetricStats,
    pub d1_accuracy_median: Option<f64>,
    pub runs: Vec<RunResult>,
}

impl ResultsRow {
    fn aggregate(v: &Variant, dir: String, runs: Vec<RunResult>) -> Self {
        let per_metric: Vec<Vec<f64>> = (0..7)
            .map(|i| runs.iter().map(|r| MetricStats::of(&r.metrics).values()[i]).collect())
            .collect();
        let stat = |f: fn(&[f64]) -> f64| {
            let mut out = [0.0; 7];
            for (o, vals) in out.iter_mut().zip(&per_metric) {
                *o = f(vals);
            }
            MetricStats::from_values(out)
        };
        let accs: Vec<f64> = runs.iter().filter_map(|r| r.d1_accuracy).collect();
        ResultsRow {
            label: v.label.clone(),
            method: v.method,
            parameter: v.parameter.clone(),
            dir,
            median: stat(median),
            iqr: stat(iqr),
            d1_accuracy_median: (!accs.is_empty()).then(|| median(&accs)),
            runs,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub name: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ResultsRow>,
}

impl ResultsTable {
    pub fn row(&self, label: &str) -> Option<&ResultsRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Fixed-width text rendering: median (IQR) per metric.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "row");
        for name in MetricStats::NAMES {
            let _ = write!(out, " {name:>17}");
        }
        out.push_str("      d1_acc\n");
        for r in &self.rows {
            let _ = write!(out, "{:<width$}", r.label);
            for (m, q) in r.median.values().iter().zip(r.iqr.values()) {
                let _ = write!(out, " {:>8.3} ({:>6.3})", m, q);
            }
            match r.d1_accuracy_median {
                Some(a) => {
                    let _ = writeln!(out, " {a:>11.3}");
                }
                None => out.push_str("           -\n"),
            }
        }
        out
    }

    fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Input(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["label".to_string(), "method".into(), "parameter".into(), "value".into()];
        for n in MetricStats::NAMES {
            header.push(format!("{n}_median"));
            header.push(format!("{n}_iqr"));
        }
        header.push("d1_accuracy_median".into());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let (pname, pval) = match &r.parameter {
                Some(p) => (p.name.clone(), p.value.to_string()),
                None => (String::new(), String::new()),
            };
            let mut rec = vec![r.label.clone(), r.method.name().into(), pname, pval];
            for (m, q) in r.median.values().iter().zip(r.iqr.values()) {
                rec.push(m.to_string());
                rec.push(q.to_string());
            }
            rec.push(r.d1_accuracy_median.map(|a| a.to_string()).unwrap_or_default());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `results.json`, `results.csv` and `results.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("table serializes");
        write_file(&dir.join(RESULTS_JSON), json.as_bytes())?;
        self.write_csv(&dir.join(RESULTS_CSV))?;
        write_file(&dir.join(RESULTS_TXT), self.render().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RESULTS_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Directory-safe form of a row label.
pub fn dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn uses_feature_discriminator(method: Method, train: &TrainConfig) -> bool {
    match method {
        Method::FeatureDaOnly => true,
        Method::CovidDa => train.loss.terms.feature_adversarial,
        _ => false,
    }
}

/// Trains and scores one (row, seed) pair, writing its log, metrics and checkpoint into
/// `run_dir` when given.
pub fn run_single(
    v: &Variant,
    arch: &ArchSpec,
    ds: &DomainDataset,
    held_out_source: Option<&[Example]>,
    seed: u64,
    run_dir: Option<&Path>,
    save_checkpoint: bool,
) -> Result<RunResult> {
    let mut train = v.train.clone();
    train.seed = seed;
    let bundle = ModelBundle::new(arch.clone().with_input_dim(ds.dim), seed)?;
    let (bundle, log) = trainer::run_method(v.method, ds, bundle, &train)?;
    let metrics = metrics::evaluate(&bundle, &ds.target_test)?;
    let d1_accuracy = match held_out_source {
        Some(src) if uses_feature_discriminator(v.method, &train) && !src.is_empty() => Some(
            trainer::feature_discriminator_accuracy(&bundle, src, &ds.target_test)?,
        ),
        _ => None,
    };
    let result = RunResult {
        seed,
        metrics,
        d1_accuracy,
        final_losses: log.steps.last().map(|s| s.losses),
    };
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        log.export(dir.join("log.jsonl"))?;
        let json = serde_json::to_string_pretty(&result).expect("run result serializes");
        write_file(&dir.join("metrics.json"), json.as_bytes())?;
        if save_checkpoint {
            // timings go to their own file so the checkpoint stays reproducible
            let timing: Vec<f64> = log.epochs.iter().map(|e| e.wall_clock_secs).collect();
            let mut stable = log.clone();
            for e in &mut stable.epochs {
                e.wall_clock_secs = 0.0;
            }
            trainer::save_checkpoint(&bundle, &stable, dir.join("checkpoint.json"))?;
            let t = serde_json::to_string(&timing).expect("timings serialize");
            write_file(&dir.join("timing.json"), t.as_bytes())?;
        }
    }
    Ok(result)
}

/// Trains every row for every seed and writes all artifacts under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    run_experiment_in(cfg, Some(&cfg.output_dir))
}

/// As [`run_experiment`]; `out = None` keeps everything in memory.
pub fn run_experiment_in(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ResultsTable> {
    cfg.validate()?;
    let variants = expand(cfg)?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_file(&out.join(EFFECTIVE_CONFIG), cfg.to_toml_string()?.as_bytes())?;
    }
    let dirs: Vec<String> = variants.iter().map(|v| dir_name(&v.label)).collect();
    let mut runs: Vec<Vec<RunResult>> = vec![Vec::with_capacity(cfg.seeds.len()); variants.len()];
    for &seed in &cfg.seeds {
        let (ds, held) = dataset_for_seed(&cfg.dataset, seed).map_err(|e| Error::Run {
            context: format!("dataset, seed {seed}"),
            source: Box::new(e),
        })?;
        for (i, v) in variants.iter().enumerate() {
            let run_dir = out.map(|o| o.join(RUNS_DIR).join(&dirs[i]).join(format!("seed-{seed}")));
            let r = run_single(
                v,
                &cfg.arch,
                &ds,
                held.as_deref(),
                seed,
                run_dir.as_deref(),
                cfg.save_checkpoints,
            )
            .map_err(|e| Error::Run {
                context: format!("row {}, seed {seed}", v.label),
                source: Box::new(e),
            })?;
            runs[i].push(r);
        }
    }
    let table = ResultsTable {
        name: cfg.name.clone(),
        seeds: cfg.seeds.clone(),
        rows: variants
            .iter()
            .zip(dirs)
            .zip(runs)
            .map(|((v, d), r)| ResultsRow::aggregate(v, d, r))
            .collect(),
    };
    if let Some(out) = out {
        table.write(out)?;
    }
    Ok(table)
}

// ---------------------------------------------------------------------------------------------
// plots

#[derive(Deserialize)]
struct LogLine {
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
    j: f64,
}

fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn plot_losses(log: &[LogLine], title: &str, path: &Path) -> Result<()> {
    type Pick = fn(&LogLine) -> f64;
    let series: [(&str, Pick, RGBColor); 5] = [
        ("J", |l| l.j, BLACK),
        ("L_f", |l| l.l_f, BLUE),
        ("L_d1", |l| l.l_d1, RED),
        ("L_d2", |l| l.l_d2, MAGENTA),
        ("L_div", |l| l.l_div, GREEN),
    ];
    let x_max = log.last().map_or(1, |l| l.step.max(1)) as f64;
    let (y0, y1) = bounds(log.iter().flat_map(|l| [l.j, l.l_f, l.l_d1, l.l_d2, l.l_div]));
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..x_max, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("loss")
        .draw()
        .map_err(plot_err)?;
    for (name, pick, color) in series {
        chart
            .draw_series(LineSeries::new(log.iter().map(|l| (l.step as f64, pick(l))), color))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn plot_sweep(name: &str, points: &[(f64, f64)], path: &Path) -> Result<()> {
    // trade-off grids span decades, so positive sweeps go on a log axis
    let log_x = points.iter().all(|p| p.0 > 0.0);
    let xs: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| (if log_x { x.log10() } else { x }, y))
        .collect();
    let (x0, x1) = bounds(xs.iter().map(|p| p.0));
    let (y0, y1) = bounds(xs.iter().map(|p| p.1).chain([0.0, 100.0]));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("median F1 vs {name}"), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    let x_desc = if log_x { format!("log10 {name}") } else { name.to_string() };
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc("F1")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(xs.iter().copied(), BLUE))
        .map_err(plot_err)?;
    chart
        .draw_series(xs.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Writes loss curves (first seed of each row) and median-F1-vs-parameter plots as SVG under
/// `<results>/plots`. A table without rows writes nothing. Returns the written files.
pub fn emit_plots(results: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let results = results.as_ref();
    let table = ResultsTable::load(results)?;
    if table.rows.is_empty() {
        return Ok(Vec::new());
    }
    let plots = results.join(PLOTS_DIR);
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut written = Vec::new();
    for row in &table.rows {
        let Some(first) = row.runs.first() else { continue };
        let log_path = results
            .join(RUNS_DIR)
            .join(&row.dir)
            .join(format!("seed-{}", first.seed))
            .join("log.jsonl");
        let log = read_log(&log_path)?;
        let path = plots.join(format!("loss_{}.svg", row.dir));
        plot_losses(&log, &format!("{} (seed {})", row.label, first.seed), &path)?;
        written.push(path);
    }
    let mut names: Vec<&str> = table
        .rows
        .iter()
        .filter_map(|r| r.parameter.as_ref().map(|p| p.name.as_str()))
        .collect();
    names.dedup();
    for name in names {
        let points: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter_map(|r| {
                r.parameter
                    .as_ref()
                    .filter(|p| p.name == name)
                    .map(|p| (p.value, r.median.f1))
            })
            .collect();
        let path = plots.join(format!("f1_vs_{}.svg", dir_name(name)));
        plot_sweep(name, &points, &path)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------------------------
// published-table check

#[derive(Clone, Debug, PartialEq)]
pub struct TableReport {
    pub checks: Vec<RowCheck>,
}

impl TableReport {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }

    pub fn all_passed(&self) -> bool {
        self.passed() == self.checks.len()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            match c.counts {
                Some(k) => {
                    let _ = writeln!(
                        out,
                        "{status} {:<12} tp={:<3} fp={:<3} sum={:.4} (residual {:+.4}) cost={:.2} (residual {:+.4})",
                        c.method, k.true_pos, k.false_pos, c.sum, c.sum_residual, c.cost, c.cost_residual
                    );
                }
                None => {
                    let _ = writeln!(out, "{status} {:<12} counts not recoverable", c.method);
                }
            }
        }
        let _ = writeln!(out, "{}/{} rows pass", self.passed(), self.checks.len());
        out
    }
}

/// Recomputes Sum and Cost for every embedded reference row.
pub fn verify_reference_tables() -> TableReport {
    TableReport {
        checks: metrics::verify_reference_table(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut s = SyntheticConfig::default();
        s.counts = datasets::PoolCounts {
            source: 40,
            target_train: 30,
            target_test: 20,
        };
        s.test_positive_fraction = 0.25;
        let mut cfg = ExperimentConfig {
            dataset: DatasetSpec::Synthetic(s),
            seeds: vec![1, 2],
            ..Default::default()
        };
        cfg.train.epochs = 1;
        cfg.train.batch_size = 8;
        cfg.arch.extractor_widths = vec![4];
        cfg.arch.discriminator_hidden = 4;
        cfg
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "method = \"source_only\"\nseeds = [3]\n[train]\nepochs = 2\n[dataset]\nkind = \"synthetic\"\ndim = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.method, Method::SourceOnly);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.seeds, vec![3]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("sedes = [1]").is_err());
    }

    #[test]
    fn ladder_expands_to_five_rows() {
        let mut cfg = tiny();
        cfg.grid.ablations = Ablation::LADDER.to_vec();
        let rows = expand(&cfg).unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(
            labels,
            [
                "ablation=ce",
                "ablation=focal",
                "ablation=focal+d1",
                "ablation=focal+d1+d2",
                "ablation=focal+d1+d2+div"
            ]
        );
        assert_eq!(rows[0].train.loss.gamma, 0.0);
        assert!(!rows[2].train.loss.terms.classifier_adversarial);
        assert!(rows[4].train.loss.terms.diversity);
    }

    #[test]
    fn alpha_sweep_rows_carry_parameter() {
        let mut cfg = tiny();
        cfg.grid.alpha = vec![1e-3, 1e-2, 1e-1, 1.0];
        let rows = expand(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].label, "alpha=0.001");
        assert_eq!(rows[3].train.loss.alpha, 1.0);
        assert!(rows.iter().all(|r| r.train.loss.beta == 0.1));
    }

    #[test]
    fn duplicate_rows_rejected() {
        let mut cfg = tiny();
        cfg.grid.beta = vec![0.1, 0.1];
        assert!(expand(&cfg).is_err());
    }

    #[test]
    fn bad_seeds_rejected() {
        let mut cfg = tiny();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn quantiles() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(median(&v), 3.0);
        assert_eq!(iqr(&v), 2.0);
        assert_eq!(median(&[1.0, 2.0]), 1.5);
        assert_eq!(iqr(&[7.0]), 0.0);
    }

    #[test]
    fn in_memory_run_has_one_result_per_seed() {
        let mut cfg = tiny();
        cfg.grid.methods = vec![Method::SourceOnly, Method::CovidDa];
        let t = run_experiment_in(&cfg, None).unwrap();
        assert_eq!(t.rows.len(), 2);
        for r in &t.rows {
            assert_eq!(r.runs.len(), 2);
        }
        assert!(t.rows[0].d1_accuracy_median.is_none());
        assert!(t.rows[1].d1_accuracy_median.is_some());
    }

    #[test]
    fn run_errors_name_row_and_seed() {
        let mut cfg = tiny();
        cfg.dataset = DatasetSpec::Manifest {
            path: "/nonexistent/manifest.jsonl".into(),
        };
        let err = run_experiment_in(&cfg, None).unwrap_err();
        assert!(err.to_string().contains("seed 1"), "{err}");
        assert_eq!(err.kind(), "io");
    }

    #[test]
    fn shipped_table_passes() {
        let r = verify_reference_tables();
        assert_eq!(r.checks.len(), 12);
        assert!(r.all_passed(), "{}", r.render());
    }
}
