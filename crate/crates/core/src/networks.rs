//! Feature extractor, the three classifier heads, the two discriminators, and the
//! [`ModelBundle`] that owns all of their parameters.
//!
//! Networks hold plain arrays. To differentiate, [`ModelBundle::bind`] inserts every parameter
//! into a [`Graph`] as a leaf and returns the handles; forward functions then build on those.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Softplus => g.softplus(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSpec {
    pub input_dim: usize,
    /// Extractor layer widths; the last one is the feature dimension. Empty means the
    /// extractor is the identity map.
    pub extractor_widths: Vec<usize>,
    pub extractor_activation: Activation,
    pub discriminator_hidden: usize,
    pub discriminator_activation: Activation,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            input_dim: 2,
            extractor_widths: vec![64, 64],
            extractor_activation: Activation::Tanh,
            discriminator_hidden: 64,
            discriminator_activation: Activation::Tanh,
        }
    }
}

impl ArchSpec {
    pub fn with_input_dim(mut self, d: usize) -> Self {
        self.input_dim = d;
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor_widths.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.extractor_widths.contains(&0) || self.discriminator_hidden == 0 {
            return Err(Error::Config(format!("architecture has a zero-width layer: {self:?}")));
        }
        Ok(())
    }
}

/// Affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array2::zeros((1, output)),
        }
    }

    /// Uniform in `[-1/sqrt(in), 1/sqrt(in)]` for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |shape| Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound));
        let weight = draw((input, output));
        let bias = draw((1, output));
        Linear { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn bind(&self, g: &mut Graph) -> LinearVars {
        LinearVars {
            weight: g.leaf(self.weight.clone()),
            bias: g.leaf(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let xw = g.matmul(x, self.weight);
        g.add_row(xw, self.bias)
    }
}

/// `G_f`: stack of affine layers, each followed by the activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl FeatureExtractor {
    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(Linear::input_dim)
    }
}

/// One affine layer `k -> 2` followed by softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub linear: Linear,
}

/// Two affine layers with a sigmoid output in `(0, 1)`; larger means "target domain".
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub hidden: Linear,
    pub output: Linear,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Extractor,
    SharedClassifier,
    TargetClassifier,
    SourceClassifier,
    FeatureDiscriminator,
    JointDiscriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Extractor,
        ParamGroup::SharedClassifier,
        ParamGroup::TargetClassifier,
        ParamGroup::SourceClassifier,
        ParamGroup::FeatureDiscriminator,
        ParamGroup::JointDiscriminator,
    ];

    /// Minimizing side of the minimax (extractor and classifiers); the rest are discriminators.
    pub fn is_theta1(self) -> bool {
        !self.is_theta2()
    }

    pub fn is_theta2(self) -> bool {
        matches!(
            self,
            ParamGroup::FeatureDiscriminator | ParamGroup::JointDiscriminator
        )
    }
}

/// How predictions are formed at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Average of the shared head and the domain-specific head.
    Ensemble,
    /// Shared head alone (single-classifier baselines).
    SharedOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: ArchSpec,
    pub extractor: FeatureExtractor,
    pub shared: ClassifierHead,
    pub target_head: ClassifierHead,
    pub source_head: ClassifierHead,
    pub feature_disc: Discriminator,
    pub joint_disc: Discriminator,
    pub inference: InferenceMode,
    pub seed: u64,
}

/// Graph handles for every parameter of a bound [`ModelBundle`].
#[derive(Clone, Debug)]
pub struct BundleVars {
    pub extractor: Vec<LinearVars>,
    pub shared: LinearVars,
    pub target_head: LinearVars,
    pub source_head: LinearVars,
    pub feature_disc: [LinearVars; 2],
    pub joint_disc: [LinearVars; 2],
    flat: Vec<(ParamGroup, Var)>,
}

impl BundleVars {
    /// Handles in canonical parameter order (same as [`ModelBundle::params`]).
    pub fn flat(&self) -> &[(ParamGroup, Var)] {
        &self.flat
    }
}

/// Per-parameter gradients in canonical order.
#[derive(Clone, Debug)]
pub struct BundleGrads {
    pub grads: Vec<(ParamGroup, Tensor)>,
}

impl BundleGrads {
    pub fn group_norm(&self, group: ParamGroup) -> f64 {
        self.grads
            .iter()
            .filter(|(g, _)| *g == group)
            .map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_exactly_zero(&self, group: ParamGroup) -> bool {
        self.grads
            .iter()
            .filter(|(g, _)| *g == group)
            .all(|(_, t)| t.iter().all(|&x| x == 0.0))
    }
}

impl ModelBundle {
    /// Randomly initialized bundle.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.extractor_widths.len());
        let mut width = arch.input_dim;
        for &w in &arch.extractor_widths {
            layers.push(Linear::init(width, w, &mut rng));
            width = w;
        }
        let k = arch.feature_dim();
        let head = |rng: &mut ChaCha8Rng| ClassifierHead {
            linear: Linear::init(k, NUM_CLASSES, rng),
        };
        let disc = |input: usize, rng: &mut ChaCha8Rng| Discriminator {
            hidden: Linear::init(input, arch.discriminator_hidden, rng),
            output: Linear::init(arch.discriminator_hidden, 1, rng),
            activation: arch.discriminator_activation,
        };
        let shared = head(&mut rng);
        let target_head = head(&mut rng);
        let source_head = head(&mut rng);
        let feature_disc = disc(k, &mut rng);
        let joint_disc = disc(k + NUM_CLASSES, &mut rng);
        Ok(ModelBundle {
            extractor: FeatureExtractor {
                layers,
                activation: arch.extractor_activation,
            },
            arch,
            shared,
            target_head,
            source_head,
            feature_disc,
            joint_disc,
            inference: InferenceMode::Ensemble,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    /// Every trainable array in canonical order, tagged with its group and a stable name.
    pub fn params(&self) -> Vec<(ParamGroup, String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.extractor.layers.iter().enumerate() {
            out.push((ParamGroup::Extractor, format!("extractor.{i}.weight"), &l.weight));
            out.push((ParamGroup::Extractor, format!("extractor.{i}.bias"), &l.bias));
        }
        let heads = [
            (ParamGroup::SharedClassifier, "shared", &self.shared),
            (ParamGroup::TargetClassifier, "target_head", &self.target_head),
            (ParamGroup::SourceClassifier, "source_head", &self.source_head),
        ];
        for (group, name, h) in heads {
            out.push((group, format!("{name}.weight"), &h.linear.weight));
            out.push((group, format!("{name}.bias"), &h.linear.bias));
        }
        let discs = [
            (ParamGroup::FeatureDiscriminator, "feature_disc", &self.feature_disc),
            (ParamGroup::JointDiscriminator, "joint_disc", &self.joint_disc),
        ];
        for (group, name, d) in discs {
            out.push((group, format!("{name}.hidden.weight"), &d.hidden.weight));
            out.push((group, format!("{name}.hidden.bias"), &d.hidden.bias));
            out.push((group, format!("{name}.output.weight"), &d.output.weight));
            out.push((group, format!("{name}.output.bias"), &d.output.bias));
        }
        out
    }

    /// Mutable view of [`ModelBundle::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut out = Vec::new();
        for l in self.extractor.layers.iter_mut() {
            out.push((ParamGroup::Extractor, &mut l.weight));
            out.push((ParamGroup::Extractor, &mut l.bias));
        }
        for (group, h) in [
            (ParamGroup::SharedClassifier, &mut self.shared),
            (ParamGroup::TargetClassifier, &mut self.target_head),
            (ParamGroup::SourceClassifier, &mut self.source_head),
        ] {
            out.push((group, &mut h.linear.weight));
            out.push((group, &mut h.linear.bias));
        }
        for (group, d) in [
            (ParamGroup::FeatureDiscriminator, &mut self.feature_disc),
            (ParamGroup::JointDiscriminator, &mut self.joint_disc),
        ] {
            out.push((group, &mut d.hidden.weight));
            out.push((group, &mut d.hidden.bias));
            out.push((group, &mut d.output.weight));
            out.push((group, &mut d.output.bias));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Inserts every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> BundleVars {
        let extractor: Vec<LinearVars> = self.extractor.layers.iter().map(|l| l.bind(g)).collect();
        let shared = self.shared.linear.bind(g);
        let target_head = self.target_head.linear.bind(g);
        let source_head = self.source_head.linear.bind(g);
        let feature_disc = [self.feature_disc.hidden.bind(g), self.feature_disc.output.bind(g)];
        let joint_disc = [self.joint_disc.hidden.bind(g), self.joint_disc.output.bind(g)];

        let mut flat = Vec::new();
        for l in &extractor {
            flat.push((ParamGroup::Extractor, l.weight));
            flat.push((ParamGroup::Extractor, l.bias));
        }
        for (group, l) in [
            (ParamGroup::SharedClassifier, &shared),
            (ParamGroup::TargetClassifier, &target_head),
            (ParamGroup::SourceClassifier, &source_head),
        ] {
            flat.push((group, l.weight));
            flat.push((group, l.bias));
        }
        for (group, ls) in [
            (ParamGroup::FeatureDiscriminator, &feature_disc),
            (ParamGroup::JointDiscriminator, &joint_disc),
        ] {
            for l in ls {
                flat.push((group, l.weight));
                flat.push((group, l.bias));
            }
        }
        BundleVars {
            extractor,
            shared,
            target_head,
            source_head,
            feature_disc,
            joint_disc,
            flat,
        }
    }

    /// Collects gradients for every bound parameter; unreached parameters get zeros.
    pub fn collect_grads(&self, vars: &BundleVars, grads: &Gradients) -> BundleGrads {
        let grads = vars
            .flat
            .iter()
            .zip(self.params())
            .map(|(&(group, var), (_, _, value))| {
                let g = grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(value.dim()));
                (group, g)
            })
            .collect();
        BundleGrads { grads }
    }

    /// Checks that every array has the shape implied by `arch`.
    pub fn check_shapes(&self) -> Result<()> {
        let fresh = ModelBundle::new(self.arch.clone(), 0)?;
        let ours = self.params();
        let expected = fresh.params();
        if ours.len() != expected.len() {
            return Err(Error::Checkpoint("parameter count does not match architecture".into()));
        }
        for ((_, name, a), (_, _, b)) in ours.iter().zip(expected.iter()) {
            if a.dim() != b.dim() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match architecture {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Input batch as a graph leaf; every row must have `dim` entries.
pub fn input_batch<'a>(
    g: &mut Graph,
    rows: impl IntoIterator<Item = &'a [f64]>,
    dim: usize,
) -> Result<Var> {
    let mut data = Vec::new();
    let mut n = 0;
    for row in rows {
        if row.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: row.len(),
            });
        }
        data.extend_from_slice(row);
        n += 1;
    }
    let t = Array2::from_shape_vec((n, dim), data).expect("shape checked above");
    Ok(g.leaf(t))
}

fn check_cols(g: &Graph, x: Var, expected: usize) -> Result<()> {
    let actual = g.shape(x).1;
    if actual != expected {
        return Err(Error::Dimension { expected, actual });
    }
    Ok(())
}

/// `f = G_f(x)`.
pub fn forward_features(
    g: &mut Graph,
    extractor: &FeatureExtractor,
    vars: &[LinearVars],
    x: Var,
) -> Result<Var> {
    if let Some(d) = extractor.input_dim() {
        check_cols(g, x, d)?;
    }
    let mut h = x;
    for l in vars {
        let z = l.forward(g, h);
        h = extractor.activation.apply(g, z);
    }
    Ok(h)
}

/// Row-wise class probabilities `softmax(f W + b)`.
pub fn classify(g: &mut Graph, head: &LinearVars, f: Var) -> Result<Var> {
    let k = g.shape(head.weight).0;
    check_cols(g, f, k)?;
    let logits = head.forward(g, f);
    Ok(g.softmax(logits))
}

/// Discriminator output in `(0, 1)`, one row per input row.
pub fn discriminate(g: &mut Graph, disc: &Discriminator, vars: &[LinearVars; 2], v: Var) -> Result<Var> {
    check_cols(g, v, disc.hidden.input_dim())?;
    let z = vars[0].forward(g, v);
    let h = disc.activation.apply(g, z);
    let out = vars[1].forward(g, h);
    Ok(g.sigmoid(out))
}

/// Gradient reversal with the given strength.
pub fn grl(g: &mut Graph, v: Var, strength: f64) -> Var {
    g.grl(v, strength)
}

pub fn stop_gradient(g: &mut Graph, v: Var) -> Var {
    g.stop_gradient(v)
}
