//! Finite-difference and exact-routing gradient checks shared by the `gradients`, `routing`
//! and `acceptance` targets. Every check panics on the first failing entry.

use super::{fd_params, rel_err, tiny_arch, tiny_synthetic, FD_STEP, FD_TOL};
use covid_da::autodiff::{Graph, Tensor, Var};
use covid_da::datasets::{generate_synthetic, make_batches};
use covid_da::losses::{self, DiversityMeasure, DomainMeasure, LossConfig, ObjectiveTerms};
use covid_da::networks::{ModelBundle, ParamGroup};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    /// Bounded away from zero, either sign.
    NonZero,
    /// Inside `(0, 1)`.
    Unit,
}

fn sample(rng: &mut ChaCha8Rng, shape: (usize, usize), d: Domain) -> Tensor {
    Array2::from_shape_fn(shape, |_| match d {
        Domain::Any => rng.random_range(-2.0..2.0),
        Domain::Positive => rng.random_range(0.3..2.5),
        Domain::NonZero => {
            let m: f64 = rng.random_range(0.2..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        }
        Domain::Unit => rng.random_range(0.05..0.95),
    })
}

/// Checks `sum(W * op(inputs))` for a random weight `W`, which exercises the full Jacobian.
fn check_op(
    name: &str,
    shapes: &[((usize, usize), Domain)],
    op: impl Fn(&mut Graph, &[Var]) -> Var,
) {
    for inst in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(inst * 7919 + name.len() as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|&(s, d)| sample(&mut rng, s, d)).collect();
        let out_shape = {
            let mut g = Graph::new();
            let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = op(&mut g, &vs);
            g.shape(out)
        };
        let w = sample(&mut rng, out_shape, Domain::Any);
        let value = |inputs: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
            let mut g = Graph::new();
            let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = op(&mut g, &vs);
            let wv = g.leaf(w.clone());
            let prod = g.mul(out, wv);
            let s = g.sum(prod);
            let grads = g.backward(s);
            (g.scalar_value(s), vs.iter().map(|&v| grads.get(v).cloned()).collect())
        };
        let (_, analytic) = value(&inputs);
        for (i, input) in inputs.iter().enumerate() {
            let a = analytic[i].clone().unwrap_or_else(|| Tensor::zeros(input.raw_dim()));
            for k in 0..input.len() {
                let shifted = |delta: f64| {
                    let mut xs = inputs.clone();
                    xs[i].as_slice_mut().unwrap()[k] += delta;
                    value(&xs).0
                };
                let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
                let an = a.as_slice().unwrap()[k];
                let err = rel_err(an, numeric);
                assert!(
                    err <= FD_TOL,
                    "{name} instance {inst} input {i} entry {k}: analytic {an} numeric {numeric} rel err {err}"
                );
            }
        }
    }
}

const A: (usize, usize) = (3, 4);

pub fn elementwise_binary_ops() {
    check_op("add", &[(A, Domain::Any), (A, Domain::Any)], |g, v| g.add(v[0], v[1]));
    check_op("sub", &[(A, Domain::Any), (A, Domain::Any)], |g, v| g.sub(v[0], v[1]));
    check_op("mul", &[(A, Domain::Any), (A, Domain::Any)], |g, v| g.mul(v[0], v[1]));
    check_op("div", &[(A, Domain::Any), (A, Domain::Positive)], |g, v| g.div(v[0], v[1]));
}

pub fn broadcast_and_matrix_ops() {
    check_op("add_row", &[(A, Domain::Any), ((1, 4), Domain::Any)], |g, v| g.add_row(v[0], v[1]));
    check_op("mul_col", &[(A, Domain::Any), ((3, 1), Domain::Any)], |g, v| g.mul_col(v[0], v[1]));
    check_op("matmul", &[(A, Domain::Any), ((4, 2), Domain::Any)], |g, v| g.matmul(v[0], v[1]));
}

pub fn unary_ops() {
    check_op("scale", &[(A, Domain::Any)], |g, v| g.scale(v[0], -1.7));
    check_op("add_scalar", &[(A, Domain::Any)], |g, v| g.add_scalar(v[0], 0.3));
    check_op("neg", &[(A, Domain::Any)], |g, v| g.neg(v[0]));
    check_op("tanh", &[(A, Domain::Any)], |g, v| g.tanh(v[0]));
    check_op("sigmoid", &[(A, Domain::Any)], |g, v| g.sigmoid(v[0]));
    check_op("softplus", &[(A, Domain::Any)], |g, v| g.softplus(v[0]));
    check_op("exp", &[(A, Domain::Any)], |g, v| g.exp(v[0]));
    check_op("ln", &[(A, Domain::Positive)], |g, v| g.ln(v[0]));
    check_op("sqrt", &[(A, Domain::Positive)], |g, v| g.sqrt(v[0]));
    check_op("abs", &[(A, Domain::NonZero)], |g, v| g.abs(v[0]));
    check_op("powf", &[(A, Domain::Positive)], |g, v| g.powf(v[0], 2.5));
    check_op("clamp", &[(A, Domain::Unit)], |g, v| g.clamp(v[0], 0.02, 0.98));
    check_op("softmax", &[(A, Domain::Any)], |g, v| g.softmax(v[0]));
}

pub fn reductions_and_reshapes() {
    check_op("sum_cols", &[(A, Domain::Any)], |g, v| g.sum_cols(v[0]));
    check_op("mean", &[(A, Domain::Any)], |g, v| g.mean(v[0]));
    check_op("sum", &[(A, Domain::Any)], |g, v| g.sum(v[0]));
    check_op("concat_cols", &[(A, Domain::Any), ((3, 2), Domain::Any)], |g, v| {
        g.concat_cols(v[0], v[1])
    });
    check_op("concat_rows", &[(A, Domain::Any), ((2, 4), Domain::Any)], |g, v| {
        g.concat_rows(v[0], v[1])
    });
    check_op("slice_rows", &[((5, 2), Domain::Any)], |g, v| g.slice_rows(v[0], 1, 4));
}

pub fn domain_losses() {
    for (measure, tag) in [
        (DomainMeasure::LeastSquare, "ls"),
        (DomainMeasure::Gan, "gan"),
        (DomainMeasure::Focal, "focal-domain"),
    ] {
        check_op(
            tag,
            &[((4, 1), Domain::Unit), ((3, 1), Domain::Unit)],
            |g, v| losses::domain_loss_graph(g, measure, v[0], v[1], 2.0, 1e-8),
        );
    }
}

pub fn diversity_losses() {
    for (measure, tag) in [
        (DiversityMeasure::Cosine, "cosine"),
        (DiversityMeasure::L1, "l1"),
        (DiversityMeasure::L2, "l2"),
        (DiversityMeasure::Kl, "kl"),
        (DiversityMeasure::Js, "js"),
    ] {
        // logits pass through softmax so every perturbation stays on the simplex
        check_op(tag, &[((3, 2), Domain::Any); 4], |g, v| {
            let p: Vec<Var> = v.iter().map(|&x| g.softmax(x)).collect();
            losses::diversity_graph(g, measure, p[0], p[1], p[2], p[3], 1e-8)
        });
    }
}

pub fn focal_loss_graph() {
    for gamma in [0.0, 0.5, 2.0] {
        check_op("focal", &[((5, 2), Domain::Any)], |g, v| {
            let y = g.leaf(ndarray::array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]);
            let p = g.softmax(v[0]);
            losses::focal_graph(g, y, p, gamma, 1e-8)
        });
    }
}

fn objective_case(inst: u64) -> (ModelBundle, covid_da::datasets::DomainDataset) {
    let ds = generate_synthetic(&tiny_synthetic(inst)).unwrap();
    let bundle = ModelBundle::new(tiny_arch(), inst + 100).unwrap();
    (bundle, ds)
}

fn assert_close(label: &str, analytic: &[(ParamGroup, Tensor)], numeric: &[(ParamGroup, Tensor)], sign: f64) {
    for ((ga, ta), (gn, tn)) in analytic.iter().zip(numeric) {
        assert_eq!(ga, gn);
        for (a, n) in ta.iter().zip(tn.iter()) {
            let err = rel_err(*a, sign * n);
            assert!(err <= FD_TOL, "{label} {ga:?}: analytic {a} numeric {} rel err {err}", sign * n);
        }
    }
}

fn cfg(terms: ObjectiveTerms) -> LossConfig {
    LossConfig {
        terms,
        ..LossConfig::default()
    }
}

fn groups(grads: &[(ParamGroup, Tensor)], keep: &[ParamGroup]) -> Vec<(ParamGroup, Tensor)> {
    grads.iter().filter(|(g, _)| keep.contains(g)).cloned().collect()
}

pub fn classification_gradients_match_finite_differences() {
    for inst in 0..INSTANCES {
        let (bundle, ds) = objective_case(inst);
        let batch = make_batches(&ds, 4, inst).unwrap().next().unwrap();
        let c = cfg(ObjectiveTerms::classification_only());
        let (_, analytic) = losses::objective_gradients(&batch, &bundle, &c).unwrap();
        let numeric = fd_params(&bundle, &batch, &c, |r| r.total);
        assert_close(&format!("L_f instance {inst}"), &analytic.grads, &numeric, 1.0);
    }
}

pub fn feature_adversarial_routing() {
    use ParamGroup::*;
    for inst in 0..INSTANCES {
        let (bundle, ds) = objective_case(inst);
        let batch = make_batches(&ds, 4, inst).unwrap().next().unwrap();
        let c = cfg(ObjectiveTerms {
            feature_adversarial: true,
            ..ObjectiveTerms::NONE
        });
        let (_, analytic) = losses::objective_gradients(&batch, &bundle, &c).unwrap();
        let numeric = fd_params(&bundle, &batch, &c, |r| c.alpha * r.l_d1);
        // the discriminator descends on alpha * L_d1; the extractor sees the reversed gradient
        assert_close(
            &format!("D1 instance {inst}"),
            &groups(&analytic.grads, &[FeatureDiscriminator]),
            &groups(&numeric, &[FeatureDiscriminator]),
            1.0,
        );
        assert_close(
            &format!("G_f via D1 instance {inst}"),
            &groups(&analytic.grads, &[Extractor]),
            &groups(&numeric, &[Extractor]),
            -1.0,
        );
    }
}

pub fn classifier_adversarial_routing() {
    use ParamGroup::*;
    for inst in 0..INSTANCES {
        let (bundle, ds) = objective_case(inst);
        let batch = make_batches(&ds, 4, inst).unwrap().next().unwrap();
        let c = cfg(ObjectiveTerms {
            classifier_adversarial: true,
            ..ObjectiveTerms::NONE
        });
        let (_, analytic) = losses::objective_gradients(&batch, &bundle, &c).unwrap();
        let numeric = fd_params(&bundle, &batch, &c, |r| c.alpha * r.l_d2);
        assert_close(
            &format!("D2 instance {inst}"),
            &groups(&analytic.grads, &[JointDiscriminator]),
            &groups(&numeric, &[JointDiscriminator]),
            1.0,
        );
        assert_close(
            &format!("C_d via D2 instance {inst}"),
            &groups(&analytic.grads, &[SharedClassifier]),
            &groups(&numeric, &[SharedClassifier]),
            -1.0,
        );
        assert!(analytic.is_exactly_zero(Extractor));
    }
}

pub fn diversity_gradients_match_finite_differences() {
    use ParamGroup::*;
    for measure in [
        DiversityMeasure::Cosine,
        DiversityMeasure::L1,
        DiversityMeasure::L2,
        DiversityMeasure::Kl,
        DiversityMeasure::Js,
    ] {
        for inst in 0..INSTANCES {
            let (bundle, ds) = objective_case(inst);
            let batch = make_batches(&ds, 4, inst).unwrap().next().unwrap();
            let mut c = cfg(ObjectiveTerms {
                diversity: true,
                ..ObjectiveTerms::NONE
            });
            c.diversity_measure = measure;
            let (_, analytic) = losses::objective_gradients(&batch, &bundle, &c).unwrap();
            let numeric = fd_params(&bundle, &batch, &c, |r| -c.beta * r.l_div);
            let heads = [SharedClassifier, TargetClassifier, SourceClassifier];
            assert_close(
                &format!("div {measure:?} instance {inst}"),
                &groups(&analytic.grads, &heads),
                &groups(&numeric, &heads),
                1.0,
            );
            assert!(analytic.is_exactly_zero(Extractor));
        }
    }
}

pub fn full_objective_discriminator_and_head_gradients() {
    use ParamGroup::*;
    // With every term on, Θ2 sees no reversal and the specific heads see only L_f and L_div.
    for inst in 0..INSTANCES {
        let (bundle, ds) = objective_case(inst);
        let batch = make_batches(&ds, 4, inst).unwrap().next().unwrap();
        let c = LossConfig::default();
        let (_, analytic) = losses::objective_gradients(&batch, &bundle, &c).unwrap();
        let numeric = fd_params(&bundle, &batch, &c, |r| r.total);
        let keep = [TargetClassifier, SourceClassifier, FeatureDiscriminator, JointDiscriminator];
        assert_close(
            &format!("J instance {inst}"),
            &groups(&analytic.grads, &keep),
            &groups(&numeric, &keep),
            1.0,
        );
    }
}

pub fn grl_backward_is_negated_scaled_upstream_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for strength in [1.0, 0.1, 2.5, 0.0] {
        let x = Array2::from_shape_fn((3, 4), |_| rng.random_range(-3.0..3.0));
        let w = Array2::from_shape_fn((3, 4), |_| rng.random_range(-3.0..3.0));
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let r = g.grl(xv, strength);
        assert_eq!(g.value(r), &x);
        let p = g.mul(r, wv);
        let s = g.sum(p);
        let grads = g.backward(s);
        let expected = w.mapv(|v| v * -strength);
        assert_eq!(grads.get(xv).unwrap(), &expected);
    }
}

pub fn stop_gradient_blocks_exactly() {
    let mut g = Graph::new();
    let x = g.leaf(ndarray::array![[1.5, -2.0]]);
    let a = g.stop_gradient(x);
    let b = g.tanh(a);
    let s = g.sum(b);
    let grads = g.backward(s);
    assert!(grads.get(x).is_none_or(|t| t.iter().all(|&v| v == 0.0)));
}
