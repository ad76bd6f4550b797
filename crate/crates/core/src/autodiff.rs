//! Reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] (or [`Tape::backward_from`] with explicit upstream
//! gradients) walks the record in reverse and accumulates adjoints. Every
//! network in the crate (style encoder, codec, denoiser) and every guidance
//! gradient is expressed on this tape, so one finite-difference suite covers
//! the whole gradient machinery.

use ndarray::{concatenate, s, Array2, Axis};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// a (m×n) + b (1×n) broadcast over rows
    AddRow(Var, Var),
    Scale(Var, f64),
    /// a (m×n) scaled by a 1×1 variable
    ScaleBy(Var, Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    NormalizeRows(Var),
    MeanRows(Var),
    SegmentMean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; no adjoint is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Tensor::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×n row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn scale_by(&mut self, a: Var, k: Var) -> Var {
        let kv = self.scalar(k);
        let value = self.value(a) * kv;
        let ng = self.ng(a) || self.ng(k);
        self.push(value, Op::ScaleBy(a, k), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(value, Op::Silu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// Elementwise |x|; the adjoint uses sign(0) = 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let ng = self.ng(a);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        let ng = self.ng(a);
        self.push(value, Op::LayerNormRows(a), ng)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let norm = row.dot(&row).sqrt().max(NORM_FLOOR);
            row.mapv_inplace(|x| x / norm);
        }
        let ng = self.ng(a);
        self.push(value, Op::NormalizeRows(a), ng)
    }

    /// Mean over rows, producing a 1×n row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    /// Mean over consecutive blocks of `w` rows: (m×n) → (m/w × n).
    pub fn segment_mean(&mut self, a: Var, w: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(w > 0 && m % w == 0, "segment width must divide row count");
        let src = self.value(a);
        let mut value = Tensor::zeros((m / w, n));
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let block = src.slice(s![i * w..(i + 1) * w, ..]);
            row.assign(&block.mean_axis(Axis(0)).expect("non-empty"));
        }
        let ng = self.ng(a);
        self.push(value, Op::SegmentMean(a, w), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::from_elem((1, 1), t.sum() / t.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::MeanAll(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        let ng = self.ng(a);
        self.push(value, Op::SelectRows(a, rows.to_vec()), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape must preserve element count");
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Tensor::from_shape_vec((rows, cols), flat).expect("checked length");
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Backward pass from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        self.backward_from(&[(out, Tensor::from_elem((1, 1), 1.0))])
    }

    /// Backward pass seeded with explicit upstream adjoints.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "seed gradient shape mismatch");
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0 + 1);
        }
        for idx in (0..last).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].needs_grad {
                accumulate(grads, v, t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    send(*a, g.dot(&bv.t()));
                }
                if self.ng(*b) {
                    send(*b, av.t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    send(*a, g.dot(bv));
                }
                if self.ng(*b) {
                    send(*b, g.t().dot(av));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                send(*a, g * self.value(*b));
                send(*b, g * self.value(*a));
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, k) => send(*a, g * *k),
            Op::ScaleBy(a, k) => {
                let kv = self.scalar(*k);
                if self.ng(*a) {
                    send(*a, g * kv);
                }
                if self.ng(*k) {
                    let dk = (g * self.value(*a)).sum();
                    send(*k, Tensor::from_elem((1, 1), dk));
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                send(*a, g * &y.mapv(|y| 1.0 - y * y));
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = x.mapv(|x| {
                    let sg = sigmoid(x);
                    sg * (1.0 + x * (1.0 - sg))
                });
                send(*a, g * &d);
            }
            Op::Exp(a) => send(*a, g * &node.value),
            Op::Square(a) => send(*a, g * &self.value(*a).mapv(|x| 2.0 * x)),
            Op::Abs(a) => send(*a, g * &self.value(*a).mapv(sign)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = g * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |d, &y| *d -= y * dot);
                }
                send(*a, dx);
            }
            Op::LayerNormRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut dx = Tensor::zeros(x.dim());
                for r in 0..x.nrows() {
                    let xr = x.row(r);
                    let n = xr.len() as f64;
                    let mean = xr.sum() / n;
                    let var = xr.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let g_mean = gr.sum() / n;
                    let gy_mean = gr.dot(&yr) / n;
                    for c in 0..xr.len() {
                        dx[[r, c]] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                    }
                }
                send(*a, dx);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut dx = Tensor::zeros(x.dim());
                for r in 0..x.nrows() {
                    let norm = x.row(r).dot(&x.row(r)).sqrt().max(NORM_FLOOR);
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let proj = gr.dot(&yr);
                    for c in 0..x.ncols() {
                        dx[[r, c]] = (gr[c] - yr[c] * proj) / norm;
                    }
                }
                send(*a, dx);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.shape(*a);
                let row = g.row(0).mapv(|x| x / m as f64);
                let dx = row.broadcast((m, n)).expect("broadcast row").to_owned();
                send(*a, dx);
            }
            Op::SegmentMean(a, w) => {
                let (m, n) = self.shape(*a);
                let mut dx = Tensor::zeros((m, n));
                for (i, grow) in g.rows().into_iter().enumerate() {
                    let share = grow.mapv(|x| x / *w as f64);
                    for r in i * w..(i + 1) * w {
                        dx.row_mut(r).assign(&share);
                    }
                }
                send(*a, dx);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a);
                send(*a, Tensor::from_elem(shape, g[[0, 0]]));
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                send(*a, Tensor::from_elem(shape, g[[0, 0]] / n));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    send(*p, g.slice(s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let mut dx = Tensor::zeros(self.shape(*a));
                let rows = g.nrows();
                dx.slice_mut(s![*start..*start + rows, ..]).assign(g);
                send(*a, dx);
            }
            Op::SelectRows(a, rows) => {
                let mut dx = Tensor::zeros(self.shape(*a));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = dx.row_mut(r);
                    dst += &g.row(i);
                }
                send(*a, dx);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a);
                let flat: Vec<f64> = g.iter().copied().collect();
                send(*a, Tensor::from_shape_vec(shape, flat).expect("same element count"));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// sign with sign(0) = 0.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(out ⊙ probe))/d(input) for a unary graph builder.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let xv = tape.var(x.clone());
        let out = build(&mut tape, xv);
        let probe = random(&mut rng, tape.shape(out).0, tape.shape(out).1);
        let pv = tape.constant(probe.clone());
        let prod = tape.mul(out, pv);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let analytic = grads.get_or_zeros(xv, x.dim());

        let eval = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let out = build(&mut t, xv);
            (t.value(out) * &probe).sum()
        };
        let h = 1e-5;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "entry ({r},{c}): analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 6);
        check_unary(|t, v| t.tanh(v), x.clone());
        check_unary(|t, v| t.silu(v), x.clone());
        check_unary(|t, v| t.exp(v), x.clone());
        check_unary(|t, v| t.square(v), x.clone());
        check_unary(|t, v| t.abs(v), x.clone());
        check_unary(|t, v| t.softmax_rows(v), x.clone());
        check_unary(|t, v| t.layer_norm_rows(v), x.clone());
        check_unary(|t, v| t.normalize_rows(v), x.clone());
        check_unary(|t, v| t.mean_rows(v), x.clone());
        check_unary(|t, v| t.segment_mean(v, 2), x.clone());
        check_unary(|t, v| t.reshape(v, 3, 8), x.clone());
        check_unary(|t, v| t.slice_rows(v, 1, 2), x.clone());
        check_unary(|t, v| t.select_rows(v, &[3, 0, 3]), x.clone());
        check_unary(|t, v| t.scale(v, -1.7), x.clone());
        check_unary(|t, v| t.mean_all(v), x.clone());
        check_unary(
            |t, v| {
                let a = t.slice_rows(v, 0, 2);
                let b = t.slice_rows(v, 2, 2);
                t.concat_rows(&[b, a, b])
            },
            x,
        );
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&mut rng, 6, 3);
        let row = random(&mut rng, 1, 6);
        let other = random(&mut rng, 4, 6);
        let x = random(&mut rng, 4, 6);
        {
            let w = w.clone();
            check_unary(
                move |t, v| {
                    let wv = t.constant(w.clone());
                    t.matmul(v, wv)
                },
                x.clone(),
            );
        }
        check_unary(
            move |t, v| {
                let ov = t.constant(other.clone());
                let p = t.matmul_t(v, ov);
                let q = t.matmul_t(ov, v);
                let m = t.mul(p, q);
                t.sub(m, p)
            },
            x.clone(),
        );
        check_unary(
            move |t, v| {
                let rv = t.constant(row.clone());
                t.add_row(v, rv)
            },
            x.clone(),
        );
        // gradient w.r.t. the scalar in scale_by and the row in add_row
        check_unary(
            |t, k| {
                let base = t.constant(Tensor::from_shape_fn((3, 2), |(i, j)| (i + 2 * j) as f64 - 1.5));
                let s = t.scale_by(base, k);
                t.add(s, s)
            },
            Tensor::from_elem((1, 1), 0.37),
        );
        check_unary(
            |t, r| {
                let base = t.constant(Tensor::from_shape_fn((3, 2), |(i, j)| (i * j) as f64));
                let y = t.add_row(base, r);
                t.tanh(y)
            },
            Tensor::from_shape_vec((1, 2), vec![0.2, -0.4]).unwrap(),
        );
    }

    #[test]
    fn abs_uses_zero_subgradient_at_kink() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros((1, 3)));
        let a = tape.abs(x);
        let s = tape.sum_all(a);
        let g = tape.backward(s);
        assert!(g.get(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones((2, 2)));
        let x = tape.var(Tensor::ones((2, 2)));
        let y = tape.mul(c, x);
        let s = tape.sum_all(y);
        let g = tape.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &Tensor::ones((2, 2)));
    }

    #[test]
    fn segment_mean_adjoint_spreads_evenly() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros((8, 2)));
        let seg = tape.segment_mean(x, 4);
        let g = tape.backward_from(&[(seg, Tensor::from_shape_vec((2, 2), vec![4.0, 8.0, -4.0, 0.0]).unwrap())]);
        let dx = g.get(x).unwrap();
        assert_eq!(dx.row(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(dx.row(7).to_vec(), vec![-1.0, 0.0]);
    }
}
