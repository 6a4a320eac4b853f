//! A small reverse-mode automatic differentiation tape over dense `f64` matrices.
//!
//! Every value is a 2-D array (`rows x cols`). Scalars are `1 x 1`. A [`Graph`] records
//! operations in creation order, so the node list is already topologically sorted and
//! [`Graph::backward`] walks it in reverse.
//!
//! Two routing primitives are first class: [`Graph::grl`] (identity forward, negated and
//! scaled gradient backward) and [`Graph::stop_gradient`] (identity forward, no gradient).

use ndarray::{concatenate, s, Array2, Axis, Zip};

pub type Tensor = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `(n, m) + (1, m)`
    AddRow(Var, Var),
    /// `(n, m) * (n, 1)`
    MulCol(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var),
    SumCols(Var),
    Mean(Var),
    Sum(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize, usize),
    Grl(Var, f64),
    StopGradient,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated output w.r.t. `v`, or `None` if no path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> bool {
    a.dim() == b.dim()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert!(same_shape(self.value(a), self.value(b)), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert!(same_shape(self.value(a), self.value(b)), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert!(same_shape(self.value(a), self.value(b)), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert!(same_shape(self.value(a), self.value(b)), "div: shape mismatch");
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "add_row: shape mismatch");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "mul_col: shape mismatch");
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul: inner dimension mismatch");
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Elementwise `x^p`; inputs are expected to be nonnegative when `p` is fractional.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let total: f64 = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.push(v, Op::Softmax(a))
    }

    /// `(n, m) -> (n, 1)` row sums.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Mean of all entries as a `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(!t.is_empty(), "mean of empty tensor");
        let m = t.sum() / t.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let m = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), m), Op::Sum(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row count mismatch");
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows: column count mismatch");
        self.push(v, Op::ConcatRows(a, b))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    /// Gradient reversal: identity forward, upstream gradient times `-strength` backward.
    pub fn grl(&mut self, a: Var, strength: f64) -> Var {
        assert!(strength >= 0.0, "grl strength must be nonnegative");
        let v = self.value(a).clone();
        self.push(v, Op::Grl(a, strength))
    }

    /// Identity forward, blocks all gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient)
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, b, g.clone());
                    accumulate(&mut grads, a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.mapv(|x| -x));
                    accumulate(&mut grads, a, g.clone());
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, b, &g * self.value(a));
                    accumulate(&mut grads, a, &g * self.value(b));
                }
                Op::Div(a, b) => {
                    let bv = self.value(b);
                    let ga = &g / bv;
                    let gb = -(&ga * out);
                    accumulate(&mut grads, b, gb);
                    accumulate(&mut grads, a, ga);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, a, g.clone());
                }
                Op::MulCol(a, col) => {
                    let gc = (&g * self.value(a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, col, gc);
                    accumulate(&mut grads, a, &g * self.value(col));
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, b, self.value(a).t().dot(&g));
                    accumulate(&mut grads, a, g.dot(&self.value(b).t()));
                }
                Op::Scale(a, c) => accumulate(&mut grads, a, g.mapv(|x| x * c)),
                Op::AddScalar(a) => accumulate(&mut grads, a, g.clone()),
                Op::Neg(a) => accumulate(&mut grads, a, g.mapv(|x| -x)),
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(out).for_each(|x, &y| *x *= 1.0 - y * y);
                    accumulate(&mut grads, a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(out).for_each(|x, &y| *x *= y * (1.0 - y));
                    accumulate(&mut grads, a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(a))
                        .for_each(|x, &z| *x *= sigmoid(z));
                    accumulate(&mut grads, a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, a, &g * out),
                Op::Log(a) => accumulate(&mut grads, a, &g / self.value(a)),
                Op::Sqrt(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(out).for_each(|x, &y| *x *= 0.5 / y);
                    accumulate(&mut grads, a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(a)).for_each(|x, &z| {
                        *x *= if z > 0.0 {
                            1.0
                        } else if z < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, a, ga);
                }
                Op::Powf(a, p) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(a)).for_each(|x, &z| {
                        *x *= if p == 0.0 { 0.0 } else { p * z.powf(p - 1.0) }
                    });
                    accumulate(&mut grads, a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(a)).for_each(|x, &z| {
                        if z < lo || z > hi {
                            *x = 0.0;
                        }
                    });
                    accumulate(&mut grads, a, ga);
                }
                Op::Softmax(a) => {
                    let mut ga = &g * out;
                    for (mut row, y) in ga.rows_mut().into_iter().zip(out.rows()) {
                        let dot: f64 = row.sum();
                        Zip::from(&mut row).and(&y).for_each(|x, &yv| *x -= yv * dot);
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::SumCols(a) => {
                    let (n, m) = self.shape(a);
                    let ga = Array2::from_shape_fn((n, m), |(i, _)| g[[i, 0]]);
                    accumulate(&mut grads, a, ga);
                }
                Op::Mean(a) => {
                    let (n, m) = self.shape(a);
                    let ga = Array2::from_elem((n, m), g[[0, 0]] / (n * m) as f64);
                    accumulate(&mut grads, a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(a), g[[0, 0]]);
                    accumulate(&mut grads, a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let split = self.shape(a).1;
                    accumulate(&mut grads, b, g.slice(s![.., split..]).to_owned());
                    accumulate(&mut grads, a, g.slice(s![.., ..split]).to_owned());
                }
                Op::ConcatRows(a, b) => {
                    let split = self.shape(a).0;
                    accumulate(&mut grads, b, g.slice(s![split.., ..]).to_owned());
                    accumulate(&mut grads, a, g.slice(s![..split, ..]).to_owned());
                }
                Op::SliceRows(a, start, end) => {
                    let mut ga = Array2::zeros(self.shape(a));
                    ga.slice_mut(s![start..end, ..]).assign(&g);
                    accumulate(&mut grads, a, ga);
                }
                Op::Grl(a, strength) => accumulate(&mut grads, a, g.mapv(|x| -strength * x)),
                Op::StopGradient => {}
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
