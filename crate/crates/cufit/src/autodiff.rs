//! Minimal reverse-mode automatic differentiation over `ndarray` values.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! The op set is exactly what the transformer forward pass, the adapter
//! variants, and the training losses need — nothing more.
//!
//! Activations are rank-3 (`batch × tokens × dim`) or rank-2
//! (`batch × dim`); parameters are rank-2 or rank-1. Weight matrices follow
//! the `(out, in)` row convention throughout: `y = x · Wᵀ`.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, Axis, s};

/// A value flowing through the tape.
#[derive(Debug, Clone)]
pub enum Value<T> {
    Scalar(T),
    Vector(Array1<T>),
    Matrix(Array2<T>),
    Cube(Array3<T>),
}

impl<T: Scalar> Value<T> {
    pub fn zeros_like(&self) -> Self {
        match self {
            Value::Scalar(_) => Value::Scalar(T::zero()),
            Value::Vector(a) => Value::Vector(Array1::zeros(a.raw_dim())),
            Value::Matrix(a) => Value::Matrix(Array2::zeros(a.raw_dim())),
            Value::Cube(a) => Value::Cube(Array3::zeros(a.raw_dim())),
        }
    }

    pub fn add_assign(&mut self, other: &Value<T>) {
        match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => *a = *a + *b,
            (Value::Vector(a), Value::Vector(b)) => *a += b,
            (Value::Matrix(a), Value::Matrix(b)) => *a += b,
            (Value::Cube(a), Value::Cube(b)) => *a += b,
            _ => panic!("rank mismatch in gradient accumulation"),
        }
    }

    pub fn as_scalar(&self) -> T {
        match self {
            Value::Scalar(v) => *v,
            _ => panic!("expected scalar value"),
        }
    }

    pub fn as_vector(&self) -> &Array1<T> {
        match self {
            Value::Vector(v) => v,
            _ => panic!("expected vector value"),
        }
    }

    pub fn as_matrix(&self) -> &Array2<T> {
        match self {
            Value::Matrix(v) => v,
            _ => panic!("expected matrix value"),
        }
    }

    pub fn as_cube(&self) -> &Array3<T> {
        match self {
            Value::Cube(v) => v,
            _ => panic!("expected cube value"),
        }
    }

    /// Number of scalar elements.
    pub fn len(&self) -> usize {
        match self {
            Value::Scalar(_) => 1,
            Value::Vector(a) => a.len(),
            Value::Matrix(a) => a.len(),
            Value::Cube(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat iteration in logical (row-major) order.
    pub fn iter_flat(&self) -> Box<dyn Iterator<Item = T> + '_> {
        match self {
            Value::Scalar(v) => Box::new(std::iter::once(*v)),
            Value::Vector(a) => Box::new(a.iter().copied()),
            Value::Matrix(a) => Box::new(a.iter().copied()),
            Value::Cube(a) => Box::new(a.iter().copied()),
        }
    }

    /// Mutate the flat element at `idx` (used by finite-difference tests and
    /// the optimizer).
    pub fn flat_mut(&mut self, idx: usize) -> &mut T {
        match self {
            Value::Scalar(v) => {
                assert_eq!(idx, 0);
                v
            }
            Value::Vector(a) => a.get_mut(idx).expect("flat index in range"),
            Value::Matrix(a) => {
                let cols = a.ncols();
                a.get_mut((idx / cols, idx % cols)).expect("flat index in range")
            }
            Value::Cube(a) => {
                let (_, d1, d2) = a.dim();
                let plane = d1 * d2;
                a.get_mut((idx / plane, (idx % plane) / d2, idx % d2))
                    .expect("flat index in range")
            }
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn FnOnce(&Value<T>, &[Value<T>], &mut [Option<Value<T>>])>;

pub struct Tape<T: Scalar> {
    values: Vec<Value<T>>,
    requires: Vec<bool>,
    back: Vec<Option<BackFn<T>>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Value<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Value<T>> {
        self.grads[var.0].as_ref()
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Value<T>>], idx: usize, delta: Value<T>) {
    match &mut grads[idx] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape with gradient recording disabled behaves as a plain forward
    /// evaluator (used for inference).
    pub fn with_grad(grad_enabled: bool) -> Self {
        Tape { values: Vec::new(), requires: Vec::new(), back: Vec::new(), grad_enabled }
    }

    pub fn value(&self, var: Var) -> &Value<T> {
        &self.values[var.0]
    }

    fn push(&mut self, value: Value<T>, requires: bool, back: Option<BackFn<T>>) -> Var {
        let requires = requires && self.grad_enabled;
        self.values.push(value);
        self.requires.push(requires);
        self.back.push(if requires { back } else { None });
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Value<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn param(&mut self, value: Value<T>) -> Var {
        self.push(value, true, None)
    }

    fn requires(&self, var: Var) -> bool {
        self.requires[var.0]
    }

    /// Run reverse accumulation from `loss` (must be a scalar node).
    pub fn backward(mut self, loss: Var) -> Gradients<T> {
        assert!(matches!(self.values[loss.0], Value::Scalar(_)), "loss must be scalar");
        let mut grads: Vec<Option<Value<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Value::Scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = self.back[i].take() {
                let gout = grads[i].clone().expect("checked above");
                back(&gout, &self.values, &mut grads);
            }
        }
        Gradients { grads }
    }

    // ---- shape helpers -------------------------------------------------

    /// Flatten leading axes so the value is a `(rows, last_dim)` matrix.
    fn as_rows(value: &Value<T>) -> Array2<T> {
        match value {
            Value::Matrix(m) => m.clone(),
            Value::Cube(c) => {
                let (b, t, d) = c.dim();
                c.to_shape((b * t, d)).expect("contiguous").to_owned()
            }
            _ => panic!("expected matrix or cube"),
        }
    }

    fn from_rows(template: &Value<T>, rows: Array2<T>) -> Value<T> {
        match template {
            Value::Matrix(_) => Value::Matrix(rows),
            Value::Cube(c) => {
                let (b, t, _) = c.dim();
                let d = rows.ncols();
                Value::Cube(rows.into_shape_with_order((b, t, d)).expect("contiguous"))
            }
            _ => panic!("expected matrix or cube"),
        }
    }

    // ---- ops -----------------------------------------------------------

    /// `y = x · Wᵀ` where `w` has shape `(out, in)`; `x` is a matrix
    /// `(B, in)` or cube `(B, T, in)`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let xr = Self::as_rows(&self.values[x.0]);
        let wm = self.values[w.0].as_matrix();
        let y = xr.dot(&wm.t());
        let out = Self::from_rows(&self.values[x.0], y);
        let req = self.requires(x) || self.requires(w);
        let (xi, wi) = (x.0, w.0);
        self.push(
            out,
            req,
            Some(Box::new(move |g, values, grads| {
                let gr = Self::as_rows(g);
                let xr = Self::as_rows(&values[xi]);
                let wm = values[wi].as_matrix();
                // dx = g · W ; dW = gᵀ · x
                let dx = gr.dot(wm);
                accum(grads, xi, Self::from_rows(&values[xi], dx));
                accum(grads, wi, Value::Matrix(gr.t().dot(&xr)));
            })),
        )
    }

    /// Add a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bv = self.values[b.0].as_vector().clone();
        let out = match &self.values[x.0] {
            Value::Matrix(m) => Value::Matrix(m + &bv),
            Value::Cube(c) => Value::Cube(c + &bv),
            _ => panic!("expected matrix or cube"),
        };
        let req = self.requires(x) || self.requires(b);
        let (xi, bi) = (x.0, b.0);
        self.push(
            out,
            req,
            Some(Box::new(move |g, _values, grads| {
                let gr = Self::as_rows(g);
                let db = gr.sum_axis(Axis(0));
                accum(grads, xi, g.clone());
                accum(grads, bi, Value::Vector(db));
            })),
        )
    }

    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = match (&self.values[a.0], &self.values[b.0]) {
            (Value::Matrix(x), Value::Matrix(y)) => Value::Matrix(x + y),
            (Value::Cube(x), Value::Cube(y)) => Value::Cube(x + y),
            (Value::Vector(x), Value::Vector(y)) => Value::Vector(x + y),
            (Value::Scalar(x), Value::Scalar(y)) => Value::Scalar(*x + *y),
            _ => panic!("rank mismatch in add"),
        };
        let req = self.requires(a) || self.requires(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            req,
            Some(Box::new(move |g, _values, grads| {
                accum(grads, ai, g.clone());
                accum(grads, bi, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let neg = self.scale(b, T::from_f64(-1.0));
        self.add(a, neg)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = match &self.values[x.0] {
            Value::Scalar(v) => Value::Scalar(*v * k),
            Value::Vector(a) => Value::Vector(a.mapv(|v| v * k)),
            Value::Matrix(a) => Value::Matrix(a.mapv(|v| v * k)),
            Value::Cube(a) => Value::Cube(a.mapv(|v| v * k)),
        };
        let req = self.requires(x);
        let xi = x.0;
        self.push(
            out,
            req,
            Some(Box::new(move |g, _values, grads| {
                let dg = match g {
                    Value::Scalar(v) => Value::Scalar(*v * k),
                    Value::Vector(a) => Value::Vector(a.mapv(|v| v * k)),
                    Value::Matrix(a) => Value::Matrix(a.mapv(|v| v * k)),
                    Value::Cube(a) => Value::Cube(a.mapv(|v| v * k)),
                };
                accum(grads, xi, dg);
            })),
        )
    }

    /// Elementwise product of two same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = match (&self.values[a.0], &self.values[b.0]) {
            (Value::Matrix(x), Value::Matrix(y)) => Value::Matrix(x * y),
            (Value::Cube(x), Value::Cube(y)) => Value::Cube(x * y),
            (Value::Vector(x), Value::Vector(y)) => Value::Vector(x * y),
            _ => panic!("rank mismatch in mul"),
        };
        let req = self.requires(a) || self.requires(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            req,
            Some(Box::new(move |g, values, grads| {
                let mul_pair = |g: &Value<T>, other: &Value<T>| match (g, other) {
                    (Value::Matrix(x), Value::Matrix(y)) => Value::Matrix(x * y),
                    (Value::Cube(x), Value::Cube(y)) => Value::Cube(x * y),
                    (Value::Vector(x), Value::Vector(y)) => Value::Vector(x * y),
                    _ => panic!("rank mismatch"),
                };
                accum(grads, ai, mul_pair(g, &values[bi]));
                accum(grads, bi, mul_pair(g, &values[ai]));
            })),
        )
    }

    /// Batched `a · bᵀ`: `(B,T,d) × (B,S,d) → (B,T,S)`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let ac = self.values[a.0].as_cube();
        let bc = self.values[b.0].as_cube();
        let (nb, t, d) = ac.dim();
        let (nb2, s_len, d2) = bc.dim();
        assert_eq!(nb, nb2);
        assert_eq!(d, d2);
        let mut out = Array3::zeros((nb, t, s_len));
        for i in 0..nb {
            let prod = ac.index_axis(Axis(0), i).dot(&bc.index_axis(Axis(0), i).t());
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let req = self.requires(a) || self.requires(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            Value::Cube(out),
            req,
            Some(Box::new(move |g, values, grads| {
                let gc = g.as_cube();
                let ac = values[ai].as_cube();
                let bc = values[bi].as_cube();
                let mut da = Array3::zeros(ac.raw_dim());
                let mut db = Array3::zeros(bc.raw_dim());
                for i in 0..gc.dim().0 {
                    let gi = gc.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bc.index_axis(Axis(0), i)));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&gi.t().dot(&ac.index_axis(Axis(0), i)));
                }
                accum(grads, ai, Value::Cube(da));
                accum(grads, bi, Value::Cube(db));
            })),
        )
    }

    /// Batched `a · b`: `(B,T,S) × (B,S,d) → (B,T,d)`.
    pub fn bmm_nn(&mut self, a: Var, b: Var) -> Var {
        let ac = self.values[a.0].as_cube();
        let bc = self.values[b.0].as_cube();
        let (nb, t, s_len) = ac.dim();
        let (nb2, s2, d) = bc.dim();
        assert_eq!(nb, nb2);
        assert_eq!(s_len, s2);
        let mut out = Array3::zeros((nb, t, d));
        for i in 0..nb {
            let prod = ac.index_axis(Axis(0), i).dot(&bc.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let req = self.requires(a) || self.requires(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            Value::Cube(out),
            req,
            Some(Box::new(move |g, values, grads| {
                let gc = g.as_cube();
                let ac = values[ai].as_cube();
                let bc = values[bi].as_cube();
                let mut da = Array3::zeros(ac.raw_dim());
                let mut db = Array3::zeros(bc.raw_dim());
                for i in 0..gc.dim().0 {
                    let gi = gc.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bc.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&ac.index_axis(Axis(0), i).t().dot(&gi));
                }
                accum(grads, ai, Value::Cube(da));
                accum(grads, bi, Value::Cube(db));
            })),
        )
    }

    /// Slice columns `[start, start+len)` of the last axis of a cube.
    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xc = self.values[x.0].as_cube();
        let out = xc.slice(s![.., .., start..start + len]).to_owned();
        let req = self.requires(x);
        let xi = x.0;
        self.push(
            Value::Cube(out),
            req,
            Some(Box::new(move |g, values, grads| {
                let gc = g.as_cube();
                let mut dx = Array3::zeros(values[xi].as_cube().raw_dim());
                dx.slice_mut(s![.., .., start..start + len]).assign(gc);
                accum(grads, xi, Value::Cube(dx));
            })),
        )
    }

    /// Concatenate cubes along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.values[v.0].as_cube().view()).collect();
        let out = ndarray::concatenate(Axis(2), &views).expect("compatible shapes");
        let req = parts.iter().any(|v| self.requires(*v));
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let widths: Vec<usize> = parts.iter().map(|v| self.values[v.0].as_cube().dim().2).collect();
        self.push(
            Value::Cube(out),
            req,
            Some(Box::new(move |g, _values, grads| {
                let gc = g.as_cube();
                let mut start = 0;
                for (i, w) in idx.iter().zip(widths.iter()) {
                    let part = gc.slice(s![.., .., start..start + w]).to_owned();
                    accum(grads, *i, Value::Cube(part));
                    start += w;
                }
            })),
        )
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        fn softmax_rows<T: Scalar>(rows: &Array2<T>) -> Array2<T> {
            let mut out = rows.clone();
            for mut row in out.rows_mut() {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            out
        }
        let rows = Self::as_rows(&self.values[x.0]);
        let p = softmax_rows(&rows);
        let out = Self::from_rows(&self.values[x.0], p);
        let req = self.requires(x);
        let xi = x.0;
        let out_idx = self.values.len();
        self.push(
            out,
            req,
            Some(Box::new(move |g, values, grads| {
                let p = Self::as_rows(&values[out_idx]);
                let gr = Self::as_rows(g);
                // dx = p ⊙ (g − sum(g ⊙ p, last))
                let dot = (&gr * &p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = &p * &(&gr - &dot);
                accum(grads, xi, Self::from_rows(&values[xi], dx));
            })),
        )
    }

    /// Log-softmax along the last axis of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let m = self.values[x.0].as_matrix();
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b).ln();
            row.mapv_inplace(|v| v - lse);
        }
        let req = self.requires(x);
        let xi = x.0;
        let out_idx = self.values.len();
        self.push(
            Value::Matrix(out),
            req,
            Some(Box::new(move |g, values, grads| {
                let lsm = values[out_idx].as_matrix();
                let gm = g.as_matrix();
                let p = lsm.mapv(T::exp);
                let row_g = gm.sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = gm - &(&p * &row_g);
                accum(grads, xi, Value::Matrix(dx));
            })),
        )
    }

    /// Layer normalization along the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let rows = Self::as_rows(&self.values[x.0]);
        let gv = self.values[gamma.0].as_vector().clone();
        let bv = self.values[beta.0].as_vector().clone();
        let d = rows.ncols();
        let dlen = T::from_f64(d as f64);
        let mut out = Array2::zeros(rows.raw_dim());
        for (r, mut o) in rows.rows().into_iter().zip(out.rows_mut()) {
            let mean = r.sum() / dlen;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b)
                / dlen;
            let inv = (var + eps).sqrt().recip();
            for j in 0..d {
                o[j] = (r[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let out = Self::from_rows(&self.values[x.0], out);
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        self.push(
            out,
            req,
            Some(Box::new(move |g, values, grads| {
                let rows = Self::as_rows(&values[xi]);
                let gv = values[gi].as_vector();
                let gr = Self::as_rows(g);
                let d = rows.ncols();
                let dlen = T::from_f64(d as f64);
                let mut dx = Array2::zeros(rows.raw_dim());
                let mut dgamma = Array1::zeros(d);
                let mut dbeta = Array1::zeros(d);
                for ((r, go), mut dr) in
                    rows.rows().into_iter().zip(gr.rows()).zip(dx.rows_mut())
                {
                    let mean = r.sum() / dlen;
                    let var = r
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .fold(T::zero(), |a, b| a + b)
                        / dlen;
                    let inv = (var + eps).sqrt().recip();
                    // xhat_j = (x_j - mean) * inv
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (r[j] - mean) * inv;
                        let dxhat = go[j] * gv[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgamma[j] = dgamma[j] + go[j] * xhat;
                        dbeta[j] = dbeta[j] + go[j];
                    }
                    for j in 0..d {
                        let xhat = (r[j] - mean) * inv;
                        let dxhat = go[j] * gv[j];
                        dr[j] = inv * (dxhat - sum_dxhat / dlen - xhat * sum_dxhat_xhat / dlen);
                    }
                }
                accum(grads, xi, Self::from_rows(&values[xi], dx));
                accum(grads, gi, Value::Vector(dgamma));
                accum(grads, bi, Value::Vector(dbeta));
            })),
        )
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Var {
        let c0 = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c1 = T::from_f64(0.044_715);
        let half = T::from_f64(0.5);
        let gelu = move |v: T| {
            let u = c0 * (v + c1 * v * v * v);
            half * v * (T::one() + u.tanh())
        };
        let out = match &self.values[x.0] {
            Value::Matrix(a) => Value::Matrix(a.mapv(gelu)),
            Value::Cube(a) => Value::Cube(a.mapv(gelu)),
            Value::Vector(a) => Value::Vector(a.mapv(gelu)),
            _ => panic!("gelu on scalar"),
        };
        let req = self.requires(x);
        let xi = x.0;
        self.push(
            out,
            req,
            Some(Box::new(move |g, values, grads| {
                let dgelu = move |v: T| {
                    let u = c0 * (v + c1 * v * v * v);
                    let th = u.tanh();
                    let sech2 = T::one() - th * th;
                    let du = c0 * (T::one() + T::from_f64(3.0) * c1 * v * v);
                    half * (T::one() + th) + half * v * sech2 * du
                };
                let apply = |a: &Value<T>, g: &Value<T>| match (a, g) {
                    (Value::Matrix(x), Value::Matrix(gg)) => Value::Matrix(x.mapv(dgelu) * gg),
                    (Value::Cube(x), Value::Cube(gg)) => Value::Cube(x.mapv(dgelu) * gg),
                    (Value::Vector(x), Value::Vector(gg)) => Value::Vector(x.mapv(dgelu) * gg),
                    _ => panic!("rank mismatch"),
                };
                accum(grads, xi, apply(&values[xi], g));
            })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let f = |v: T| if v > T::zero() { v } else { T::zero() };
        let out = match &self.values[x.0] {
            Value::Matrix(a) => Value::Matrix(a.mapv(f)),
            Value::Cube(a) => Value::Cube(a.mapv(f)),
            Value::Vector(a) => Value::Vector(a.mapv(f)),
            _ => panic!("relu on scalar"),
        };
        let req = self.requires(x);
        let xi = x.0;
        self.push(
            out,
            req,
            Some(Box::new(move |g, values, grads| {
                let df = |v: T| if v > T::zero() { T::one() } else { T::zero() };
                let apply = |a: &Value<T>, g: &Value<T>| match (a, g) {
                    (Value::Matrix(x), Value::Matrix(gg)) => Value::Matrix(x.mapv(df) * gg),
                    (Value::Cube(x), Value::Cube(gg)) => Value::Cube(x.mapv(df) * gg),
                    (Value::Vector(x), Value::Vector(gg)) => Value::Vector(x.mapv(df) * gg),
                    _ => panic!("rank mismatch"),
                };
                accum(grads, xi, apply(&values[xi], g));
            })),
        )
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, x: Var) -> Var {
        let out = match &self.values[x.0] {
            Value::Matrix(a) => Value::Matrix(a.mapv(T::exp)),
            Value::Vector(a) => Value::Vector(a.mapv(T::exp)),
            Value::Cube(a) => Value::Cube(a.mapv(T::exp)),
            _ => panic!("exp on scalar"),
        };
        let req = self.requires(x);
        let xi = x.0;
        let out_idx = self.values.len();
        self.push(
            out,
            req,
            Some(Box::new(move |g, values, grads| {
                let apply = |e: &Value<T>, g: &Value<T>| match (e, g) {
                    (Value::Matrix(x), Value::Matrix(gg)) => Value::Matrix(x * gg),
                    (Value::Cube(x), Value::Cube(gg)) => Value::Cube(x * gg),
                    (Value::Vector(x), Value::Vector(gg)) => Value::Vector(x * gg),
                    _ => panic!("rank mismatch"),
                };
                accum(grads, xi, apply(&values[out_idx], g));
            })),
        )
    }

    /// Append broadcast rows (one `(m, c)` matrix shared across the batch) to
    /// the token axis of a `(B, T, c)` cube, producing `(B, T+m, c)`.
    pub fn append_rows(&mut self, x: Var, extra: Var) -> Var {
        let xc = self.values[x.0].as_cube();
        let em = self.values[extra.0].as_matrix();
        let (b, t, c) = xc.dim();
        let m = em.nrows();
        assert_eq!(em.ncols(), c);
        let mut out = Array3::zeros((b, t + m, c));
        out.slice_mut(s![.., ..t, ..]).assign(xc);
        for i in 0..b {
            out.slice_mut(s![i, t.., ..]).assign(em);
        }
        let req = self.requires(x) || self.requires(extra);
        let (xi, ei) = (x.0, extra.0);
        self.push(
            Value::Cube(out),
            req,
            Some(Box::new(move |g, values, grads| {
                let gc = g.as_cube();
                let (_, t_all, _) = gc.dim();
                let t = values[xi].as_cube().dim().1;
                let dx = gc.slice(s![.., ..t, ..]).to_owned();
                let de = gc.slice(s![.., t..t_all, ..]).sum_axis(Axis(0));
                accum(grads, xi, Value::Cube(dx));
                accum(grads, ei, Value::Matrix(de));
            })),
        )
    }

    /// Keep only the first `keep` rows of the token axis.
    pub fn take_rows(&mut self, x: Var, keep: usize) -> Var {
        let xc = self.values[x.0].as_cube();
        let out = xc.slice(s![.., ..keep, ..]).to_owned();
        let req = self.requires(x);
        let xi = x.0;
        self.push(
            Value::Cube(out),
            req,
            Some(Box::new(move |g, values, grads| {
                let gc = g.as_cube();
                let mut dx = Array3::zeros(values[xi].as_cube().raw_dim());
                dx.slice_mut(s![.., ..keep, ..]).assign(gc);
                accum(grads, xi, Value::Cube(dx));
            })),
        )
    }

    /// Extract one token row (e.g. the class token at index 0): `(B,T,c) → (B,c)`.
    pub fn row_at(&mut self, x: Var, index: usize) -> Var {
        let xc = self.values[x.0].as_cube();
        let out = xc.index_axis(Axis(1), index).to_owned();
        let req = self.requires(x);
        let xi = x.0;
        self.push(
            Value::Matrix(out),
            req,
            Some(Box::new(move |g, values, grads| {
                let gm = g.as_matrix();
                let mut dx = Array3::zeros(values[xi].as_cube().raw_dim());
                dx.index_axis_mut(Axis(1), index).assign(gm);
                accum(grads, xi, Value::Cube(dx));
            })),
        )
    }

    /// Gather one column per row of a matrix: `pick[b] = x[b, labels[b]]`.
    pub fn gather_labels(&mut self, x: Var, labels: &[usize]) -> Var {
        let m = self.values[x.0].as_matrix();
        assert_eq!(m.nrows(), labels.len());
        let out = Array1::from_iter(labels.iter().enumerate().map(|(b, &l)| m[(b, l)]));
        let req = self.requires(x);
        let xi = x.0;
        let labels = labels.to_vec();
        self.push(
            Value::Vector(out),
            req,
            Some(Box::new(move |g, values, grads| {
                let gv = g.as_vector();
                let mut dx = Array2::zeros(values[xi].as_matrix().raw_dim());
                for (b, &l) in labels.iter().enumerate() {
                    dx[(b, l)] = gv[b];
                }
                accum(grads, xi, Value::Matrix(dx));
            })),
        )
    }

    /// Row sums of a matrix: `(B,k) → (B,)`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let m = self.values[x.0].as_matrix();
        let out = m.sum_axis(Axis(1));
        let req = self.requires(x);
        let xi = x.0;
        self.push(
            Value::Vector(out),
            req,
            Some(Box::new(move |g, values, grads| {
                let gv = g.as_vector();
                let k = values[xi].as_matrix().ncols();
                let mut dx = Array2::zeros(values[xi].as_matrix().raw_dim());
                for (mut row, &gb) in dx.rows_mut().into_iter().zip(gv.iter()) {
                    row.fill(gb);
                }
                let _ = k;
                accum(grads, xi, Value::Matrix(dx));
            })),
        )
    }

    /// Fixed-weight contraction of a vector to a scalar: `Σ w_i x_i`.
    pub fn weighted_sum(&mut self, x: Var, weights: Array1<T>) -> Var {
        let v = self.values[x.0].as_vector();
        assert_eq!(v.len(), weights.len());
        let out = v.dot(&weights);
        let req = self.requires(x);
        let xi = x.0;
        self.push(
            Value::Scalar(out),
            req,
            Some(Box::new(move |g, _values, grads| {
                let gs = g.as_scalar();
                accum(grads, xi, Value::Vector(weights.mapv(|w| w * gs)));
            })),
        )
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array3};
    use rand::Rng;
    use rand_chacha::ChaCha20Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::from_seed([42; 32])
    }

    fn rand_vec(rng: &mut ChaCha20Rng, n: usize) -> Array1<f64> {
        Array1::from_iter((0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0))
    }

    fn rand_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn rand_cube(rng: &mut ChaCha20Rng, b: usize, t: usize, c: usize) -> Array3<f64> {
        Array3::from_shape_fn((b, t, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Check the analytic gradient of every parameter against central finite
    /// differences of `f`.
    fn check_grads(
        params: Vec<Value<f64>>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars);
        let analytic: Vec<Value<f64>> = {
            let loss_val = tape.value(loss).as_scalar();
            assert!(loss_val.is_finite());
            let grads = tape.backward(loss);
            vars.iter()
                .map(|v| grads.get(*v).cloned().unwrap_or_else(|| params[0].zeros_like()))
                .collect()
        };
        let eps = 1e-6;
        for (pi, param) in params.iter().enumerate() {
            for idx in 0..param.len() {
                let eval = |delta: f64| {
                    let mut shifted = params.clone();
                    *shifted[pi].flat_mut(idx) += delta;
                    let mut tape = Tape::with_grad(false);
                    let vars: Vec<Var> =
                        shifted.iter().map(|p| tape.param(p.clone())).collect();
                    let out = f(&mut tape, &vars);
                    tape.value(out).as_scalar()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let got = analytic[pi].iter_flat().nth(idx).unwrap();
                let denom = numeric.abs().max(got.abs()).max(1e-8);
                assert!(
                    (numeric - got).abs() / denom < tol,
                    "param {pi} idx {idx}: analytic {got} vs numeric {numeric}"
                );
            }
        }
    }

    fn to_scalar_loss(tape: &mut Tape<f64>, v: Var) -> Var {
        // Reduce any value to a scalar via a fixed weighted sum so gradients
        // of all elements are exercised.
        let val = tape.value(v).clone();
        match val {
            Value::Scalar(_) => v,
            Value::Vector(a) => {
                let w = Array1::from_iter((0..a.len()).map(|i| 0.3 + 0.1 * i as f64));
                tape.weighted_sum(v, w)
            }
            Value::Matrix(a) => {
                let (r, c) = a.dim();
                let w = Array2::from_shape_fn((r, c), |(i, j)| 0.2 + 0.05 * (i * c + j) as f64);
                let wv = tape.constant(Value::Matrix(w));
                let prod = tape.mul(v, wv);
                let rs = tape.row_sum(prod);
                let ones = Array1::ones(r);
                tape.weighted_sum(rs, ones)
            }
            Value::Cube(a) => {
                let (b, t, c) = a.dim();
                let w = Array3::from_shape_fn((b, t, c), |(i, j, k)| {
                    0.1 + 0.03 * ((i * t + j) * c + k) as f64
                });
                let wv = tape.constant(Value::Cube(w));
                let prod = tape.mul(v, wv);
                let cls = tape.row_at(prod, 0);
                let rest_rows = t; // sum all rows by summing each row_at
                let mut acc = cls;
                for r in 1..rest_rows {
                    let row = tape.row_at(prod, r);
                    acc = tape.add(acc, row);
                }
                let rs = tape.row_sum(acc);
                let ones = Array1::ones(b);
                tape.weighted_sum(rs, ones)
            }
        }
    }

    #[test]
    fn grad_linear_and_bias() {
        let mut r = rng();
        let x = Value::Cube(rand_cube(&mut r, 2, 3, 4));
        let w = Value::Matrix(rand_mat(&mut r, 5, 4));
        let b = Value::Vector(rand_vec(&mut r, 5));
        check_grads(
            vec![x, w, b],
            |tape, vars| {
                let y = tape.linear(vars[0], vars[1]);
                let y = tape.add_bias(y, vars[2]);
                to_scalar_loss(tape, y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_attention_core() {
        let mut r = rng();
        let q = Value::Cube(rand_cube(&mut r, 2, 3, 4));
        let k = Value::Cube(rand_cube(&mut r, 2, 3, 4));
        let v = Value::Cube(rand_cube(&mut r, 2, 3, 4));
        check_grads(
            vec![q, k, v],
            |tape, vars| {
                let scores = tape.bmm_nt(vars[0], vars[1]);
                let scores = tape.scale(scores, 0.5);
                let probs = tape.softmax_last(scores);
                let ctx = tape.bmm_nn(probs, vars[2]);
                to_scalar_loss(tape, ctx)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut r = rng();
        let x = Value::Cube(rand_cube(&mut r, 2, 3, 6));
        let gamma = Value::Vector(rand_vec(&mut r, 6));
        let beta = Value::Vector(rand_vec(&mut r, 6));
        check_grads(
            vec![x, gamma, beta],
            |tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-6);
                to_scalar_loss(tape, y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_activations() {
        let mut r = rng();
        let x = Value::Matrix(rand_mat(&mut r, 3, 5));
        check_grads(
            vec![x.clone()],
            |tape, vars| {
                let y = tape.gelu(vars[0]);
                to_scalar_loss(tape, y)
            },
            1e-5,
        );
        check_grads(
            vec![x.clone()],
            |tape, vars| {
                let y = tape.exp(vars[0]);
                to_scalar_loss(tape, y)
            },
            1e-5,
        );
        // relu gradient is exact away from 0; random values are a.s. nonzero
        check_grads(
            vec![x],
            |tape, vars| {
                let y = tape.relu(vars[0]);
                to_scalar_loss(tape, y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_token_surgery() {
        let mut r = rng();
        let x = Value::Cube(rand_cube(&mut r, 2, 3, 4));
        let extra = Value::Matrix(rand_mat(&mut r, 2, 4));
        check_grads(
            vec![x, extra],
            |tape, vars| {
                let y = tape.append_rows(vars[0], vars[1]);
                let y = tape.take_rows(y, 4);
                let y = tape.col_slice(y, 1, 2);
                to_scalar_loss(tape, y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_concat_and_slice_roundtrip() {
        let mut r = rng();
        let x = Value::Cube(rand_cube(&mut r, 2, 3, 6));
        check_grads(
            vec![x],
            |tape, vars| {
                let a = tape.col_slice(vars[0], 0, 3);
                let b = tape.col_slice(vars[0], 3, 3);
                let y = tape.concat_cols(&[a, b]);
                to_scalar_loss(tape, y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_log_softmax_ce() {
        let mut r = rng();
        let logits = Value::Matrix(rand_mat(&mut r, 4, 5));
        let labels = vec![0usize, 2, 4, 1];
        check_grads(
            vec![logits],
            |tape, vars| {
                let lsm = tape.log_softmax(vars[0]);
                let picked = tape.gather_labels(lsm, &labels);
                let w = Array1::from_vec(vec![-0.25, -0.25, -0.5, 0.0]);
                tape.weighted_sum(picked, w)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_mul_sub() {
        let mut r = rng();
        let a = Value::Matrix(rand_mat(&mut r, 3, 4));
        let b = Value::Matrix(rand_mat(&mut r, 3, 4));
        check_grads(
            vec![a, b],
            |tape, vars| {
                let p = tape.mul(vars[0], vars[1]);
                let d = tape.sub(p, vars[1]);
                to_scalar_loss(tape, d)
            },
            1e-6,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Value::Matrix(Array2::ones((2, 2))));
        let w = tape.param(Value::Matrix(Array2::ones((2, 2))));
        let y = tape.mul(x, w);
        let rs = tape.row_sum(y);
        let loss = tape.weighted_sum(rs, Array1::ones(2));
        let grads = tape.backward(loss);
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng();
        let mut tape: Tape<f64> = Tape::with_grad(false);
        let x = tape.constant(Value::Cube(rand_cube(&mut r, 3, 4, 7)));
        let p = tape.softmax_last(x);
        for row in tape.value(p).as_cube().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
