//! Acceptance suite. Runs without the libtest harness so each criterion prints exactly one
//! `PASS`/`FAIL` line; the process exits nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, UnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::gradcheck;
use covid_da::datasets::{generate_synthetic, load_manifest, save_manifest, Label, PoolCounts, SyntheticConfig};
use covid_da::experiment::{self, DatasetSpec, ExperimentConfig, Grid};
use covid_da::inference::predict_target;
use covid_da::losses::{self, DiversityMeasure};
use covid_da::networks::{ArchSpec, ModelBundle};
use covid_da::trainer::{self, Method, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Runs a check that reports failure by panicking.
fn no_panic(name: &str, f: impl FnOnce() + UnwindSafe) -> std::result::Result<(), String> {
    catch_unwind(f).map_err(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        format!("{name}: {msg}")
    })
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let report = experiment::verify_reference_tables();
    let elapsed = start.elapsed();
    let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.method).collect();
    ensure(failed.is_empty(), format!("rows out of tolerance: {failed:?}"))?;
    ensure(report.checks.len() == 12, "expected 12 rows")?;
    ensure(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    let worst = report
        .checks
        .iter()
        .map(|c| c.sum_residual.abs().max(c.cost_residual.abs()))
        .fold(0.0, f64::max);
    let row = |m: &str| report.checks.iter().find(|c| c.method == m).unwrap();
    let (cd, so) = (row("COVID-DA"), row("Source-only"));
    Ok(format!(
        "12/12 rows, worst residual {worst:.4}, COVID-DA sum {:.2} cost {:.1}, Source-only sum {:.2} cost {:.1}, {elapsed:?}",
        cd.sum, cd.cost, so.sum, so.cost
    ))
}

fn random_prob(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let p: f64 = rng.random();
    [1.0 - p, p]
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_ce = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..16);
        let probs: Vec<[f64; 2]> = (0..n).map(|_| random_prob(&mut rng)).collect();
        let labels: Vec<Option<Label>> = (0..n)
            .map(|_| Some(if rng.random_bool(0.5) { Label::Disease } else { Label::Normal }))
            .collect();
        let focal = losses::focal_loss(&labels, &probs, 0.0, losses::DEFAULT_EPSILON).map_err(|e| e.to_string())?;
        let ce = labels
            .iter()
            .zip(&probs)
            .map(|(l, p)| -p[l.unwrap().index()].max(losses::DEFAULT_EPSILON).ln())
            .sum::<f64>()
            / n as f64;
        worst_ce = worst_ce.max((focal - ce).abs());
    }
    ensure(worst_ce <= 1e-12, format!("focal(gamma=0) vs cross-entropy differs by {worst_ce:e}"))?;

    let half = vec![0.5; 8];
    let uniform_d1 = losses::domain_loss_d1(&half, &half).map_err(|e| e.to_string())?;
    let uniform_d2 = losses::domain_loss_d2(&half, &half).map_err(|e| e.to_string())?;
    // source labelled 0, target labelled 1
    let perfect_d1 = losses::domain_loss_d1(&[0.0; 8], &[1.0; 8]).map_err(|e| e.to_string())?;
    let perfect_d2 = losses::domain_loss_d2(&[0.0; 8], &[1.0; 8]).map_err(|e| e.to_string())?;
    ensure(uniform_d1 == 0.5 && uniform_d2 == 0.5, format!("uniform outputs give {uniform_d1}, {uniform_d2}"))?;
    ensure(perfect_d1 == 0.0 && perfect_d2 == 0.0, format!("perfect discrimination gives {perfect_d1}, {perfect_d2}"))?;

    let (mut lo, mut hi) = (0.0f64, -2.0f64);
    for _ in 0..10_000 {
        let s = [(random_prob(&mut rng), random_prob(&mut rng))];
        let t = [(random_prob(&mut rng), random_prob(&mut rng))];
        let l = losses::diversity_loss(&s, &t, DiversityMeasure::Cosine, losses::DEFAULT_EPSILON)
            .map_err(|e| e.to_string())?;
        ensure((-2.0..=0.0).contains(&l), format!("cosine diversity {l} outside [-2, 0]"))?;
        lo = lo.min(l);
        hi = hi.max(l);
    }
    let agree = [([1.0, 0.0], [1.0, 0.0])];
    let orthogonal = [([1.0, 0.0], [0.0, 1.0])];
    let at_agree = losses::diversity_loss(&agree, &agree, DiversityMeasure::Cosine, losses::DEFAULT_EPSILON)
        .map_err(|e| e.to_string())?;
    let at_orth = losses::diversity_loss(&orthogonal, &orthogonal, DiversityMeasure::Cosine, losses::DEFAULT_EPSILON)
        .map_err(|e| e.to_string())?;
    ensure(at_agree == -2.0, format!("identical predictions give {at_agree}, expected -2"))?;
    ensure(at_orth == 0.0, format!("orthogonal predictions give {at_orth}, expected 0"))?;
    Ok(format!(
        "focal/CE max diff {worst_ce:e}; L_d uniform 0.5, perfect 0; cosine on 1e4 pairs in [{lo:.4}, {hi:.4}], endpoints -2 and 0 exact"
    ))
}

fn criterion_3() -> Check {
    let checks: [(&str, fn()); 14] = [
        ("elementwise binary ops", gradcheck::elementwise_binary_ops),
        ("broadcast and matrix ops", gradcheck::broadcast_and_matrix_ops),
        ("unary ops", gradcheck::unary_ops),
        ("reductions", gradcheck::reductions_and_reshapes),
        ("domain losses", gradcheck::domain_losses),
        ("diversity losses", gradcheck::diversity_losses),
        ("focal loss", gradcheck::focal_loss_graph),
        ("L_f parameters", gradcheck::classification_gradients_match_finite_differences),
        ("L_d1 routing", gradcheck::feature_adversarial_routing),
        ("L_d2 routing", gradcheck::classifier_adversarial_routing),
        ("L_div routing", gradcheck::diversity_gradients_match_finite_differences),
        ("full objective", gradcheck::full_objective_discriminator_and_head_gradients),
        ("GRL exact", gradcheck::grl_backward_is_negated_scaled_upstream_exactly),
        ("stop_gradient exact", gradcheck::stop_gradient_blocks_exactly),
    ];
    for (name, f) in checks {
        no_panic(name, f)?;
    }
    Ok(format!(
        "{} groups, 20 instances each, step {:e}, tol {:e}; GRL and stopped paths exact",
        checks.len(),
        common::FD_STEP,
        common::FD_TOL
    ))
}

fn adaptation_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "acceptance".into(),
        dataset: DatasetSpec::Synthetic(SyntheticConfig::default()),
        grid: Grid {
            methods: vec![Method::SourceOnly, Method::FeatureDaOnly, Method::CovidDa],
            ..Grid::default()
        },
        seeds: vec![0, 1, 2, 3, 4],
        save_checkpoints: false,
        ..ExperimentConfig::default()
    }
}

struct AdaptationRun {
    f1: BTreeMap<&'static str, f64>,
    d1_accuracy: Option<f64>,
    elapsed: Duration,
}

fn adaptation_run() -> std::result::Result<AdaptationRun, String> {
    let cfg = adaptation_config();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let table = experiment::run_experiment_in(&cfg, Some(dir.path())).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut f1 = BTreeMap::new();
    let mut d1_accuracy = None;
    for m in [Method::SourceOnly, Method::FeatureDaOnly, Method::CovidDa] {
        let row = table
            .rows
            .iter()
            .find(|r| r.method == m)
            .ok_or_else(|| format!("no row for {}", m.name()))?;
        f1.insert(m.name(), row.median.f1);
        if m == Method::CovidDa {
            d1_accuracy = row.d1_accuracy_median;
        }
    }
    Ok(AdaptationRun {
        f1,
        d1_accuracy,
        elapsed,
    })
}

fn criterion_4(run: &std::result::Result<AdaptationRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let (so, fd, cd) = (run.f1["source_only"], run.f1["feature_da_only"], run.f1["covid_da"]);
    let detail = format!(
        "median F1 source_only {so:.2} < feature_da_only {fd:.2} < covid_da {cd:.2} (margin {:.2}), {:.1?}",
        cd - so,
        run.elapsed
    );
    ensure(so < fd && fd < cd, format!("ordering violated: {detail}"))?;
    ensure(cd - so >= 10.0, format!("margin below 10 points: {detail}"))?;
    ensure(run.elapsed <= Duration::from_secs(300), format!("over 5 min: {detail}"))?;
    Ok(detail)
}

fn criterion_5(run: &std::result::Result<AdaptationRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let acc = run.d1_accuracy.ok_or("covid_da row has no D1 accuracy")?;
    ensure((0.4..=0.7).contains(&acc), format!("median D1 accuracy {acc:.3} outside [0.4, 0.7]"))?;
    Ok(format!("median held-out D1 accuracy {acc:.3}"))
}

const CLI_CONFIG: &str = r#"
name = "determinism"
seeds = [0, 1]

[dataset]
kind = "synthetic"
counts = { source = 120, target_train = 60, target_test = 30 }
test_positive_fraction = 0.2

[train]
epochs = 3
batch_size = 8

[arch]
extractor_widths = [8]
discriminator_hidden = 8

[grid]
methods = ["source_only", "target_only", "fine_tune", "feature_da_only", "covid_da"]
alpha = [0.01, 0.1]
"#;

fn snapshot(root: &Path) -> std::io::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "timing.json") {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn criterion_6() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, CLI_CONFIG).map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let run = || -> std::result::Result<BTreeMap<String, Vec<u8>>, String> {
        let _ = std::fs::remove_dir_all(&out);
        for args in [
            vec!["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
            vec!["plot", "--results", out.to_str().unwrap()],
        ] {
            let o = Command::new(env!("CARGO_BIN_EXE_covid-da"))
                .args(&args)
                .output()
                .map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&o.stderr)));
            }
        }
        snapshot(&out).map_err(|e| e.to_string())
    };
    let first = run()?;
    let second = run()?;
    let keys: Vec<_> = first.keys().collect();
    ensure(keys == second.keys().collect::<Vec<_>>(), "different file sets")?;
    let differing: Vec<_> = first.iter().filter(|(k, v)| second[*k] != **v).map(|(k, _)| k.clone()).collect();
    ensure(differing.is_empty(), format!("files differ: {differing:?}"))?;
    let logs = keys.iter().filter(|k| k.ends_with("log.jsonl")).count();
    Ok(format!(
        "{} files identical across two runs ({logs} training logs, tables, checkpoints, plots)",
        first.len()
    ))
}

fn criterion_7() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut examples = 0;
    for cfg in [
        SyntheticConfig::default(),
        SyntheticConfig {
            counts: PoolCounts {
                source: 5000,
                target_train: 3500,
                target_test: 1500,
            },
            seed: 9,
            ..SyntheticConfig::default()
        },
    ] {
        let ds = generate_synthetic(&cfg).map_err(|e| e.to_string())?;
        let path = dir.path().join("m.jsonl");
        save_manifest(&ds, &path).map_err(|e| e.to_string())?;
        let back = load_manifest(&path).map_err(|e| e.to_string())?;
        ensure(back == ds, "manifest round-trip changed the dataset")?;
        examples += ds.iter_all().count();
    }

    let ds = generate_synthetic(&SyntheticConfig::default()).map_err(|e| e.to_string())?;
    let bundle = ModelBundle::new(ArchSpec::default(), 7).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 2,
        eval_each_epoch: false,
        ..TrainConfig::default()
    };
    let (trained, log) = trainer::run_method(Method::CovidDa, &ds, bundle, &cfg).map_err(|e| e.to_string())?;
    let path = dir.path().join("ckpt.json");
    trainer::save_checkpoint(&trained, &log, &path).map_err(|e| e.to_string())?;
    let (back, back_log) = trainer::load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure(back == trained, "checkpoint round-trip changed parameters")?;
    ensure(back_log.steps == log.steps, "checkpoint round-trip changed the log")?;
    for e in ds.iter_all() {
        let a = predict_target(&trained, &e.features).map_err(|e| e.to_string())?;
        let b = predict_target(&back, &e.features).map_err(|e| e.to_string())?;
        let same = a.ensemble.iter().zip(&b.ensemble).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same && a == b, format!("prediction for {} differs after reload", e.id))?;
    }
    Ok(format!(
        "manifests of {examples} examples and a trained checkpoint round-trip exactly; {} forward passes bit-identical",
        ds.iter_all().count()
    ))
}

fn main() -> ExitCode {
    // failing checks are reported on their criterion line; keep panic noise out of the output
    std::panic::set_hook(Box::new(|_| {}));
    let adaptation = adaptation_run();
    let results: [(&str, Check); 7] = [
        ("metrics oracle", criterion_1()),
        ("loss unit suite", criterion_2()),
        ("gradient suite", criterion_3()),
        ("desk-scale adaptation ordering", criterion_4(&adaptation)),
        ("feature confusion", criterion_5(&adaptation)),
        ("CLI determinism", criterion_6()),
        ("round trips", criterion_7()),
    ];
    let mut failed = 0;
    for (i, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!("{}/{} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
