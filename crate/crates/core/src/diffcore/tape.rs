//! Define-by-run computation record with reverse-mode gradients.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs to replay the gradient. [`Tape::backward`] walks the nodes in
//! reverse and returns one gradient tensor per entry of the
//! [`ParameterSet`] the tape was opened on.

use crate::diffcore::params::{Grads, ParamId, ParameterSet};
use crate::diffcore::tensor::{axpy, dot, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Derivative of an elementwise map given `(input, output)`.
pub type ElementwiseDerivative<T> = fn(T, T) -> T;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Map {
        x: Var,
        df: ElementwiseDerivative<T>,
    },
    GlobalAvgPool {
        x: Var,
    },
    L2Normalize {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    LogClamp {
        x: Var,
        lo: T,
        hi: T,
    },
    LogSoftmax {
        x: Var,
        inv_t: f64,
    },
    Mul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    ScaleShift {
        x: Var,
        scale: f64,
    },
    SumAll(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive operations evaluated against one parameter set.
pub struct Tape<'p, T: Real = f32> {
    params: &'p ParameterSet<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParameterSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node, widened to f64.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item().as_f64()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Trainable leaf bound to a parameter of the set.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.value(id).clone();
        self.push(value, Op::Param(id), true)
    }

    /// 2-D convolution: `x` is `[N, C, H, W]`, `w` is `[O, C, k, k]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} incompatible with kernel {ws:?}"),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {bs:?} for {} output channels", ws[0]),
            ));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} with stride {stride} does not fit {xs:?}", ws[2]),
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k: ws[2],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[2]) / stride + 1,
        };
        let (kk, p) = (geom.cols(), geom.positions());
        let mut cols = vec![T::zero(); geom.n * kk * p];
        let mut out = vec![T::zero(); geom.n * geom.o * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let in_len = geom.c * geom.h * geom.w;
            for n in 0..geom.n {
                let col = &mut cols[n * kk * p..(n + 1) * kk * p];
                im2col(&xv[n * in_len..(n + 1) * in_len], &geom, col);
                let out_n = &mut out[n * geom.o * p..(n + 1) * geom.o * p];
                for o in 0..geom.o {
                    let row = &mut out_n[o * p..(o + 1) * p];
                    row.fill(bv[o]);
                    for c in 0..kk {
                        axpy(wv[o * kk + c], &col[c * p..(c + 1) * p], row);
                    }
                }
            }
        }
        let value = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            needs,
        ))
    }

    /// Affine map `x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "affine",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                let xi = &xv[i * inp..(i + 1) * inp];
                for o in 0..out {
                    let acc = bv[o].as_f64() + dot(xi, &wv[o * inp..(o + 1) * inp]);
                    y[i * out + o] = T::from_f64(acc);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![n, out], y)?,
            Op::Affine { x, w, b },
            needs,
        ))
    }

    /// Elementwise map with an explicit derivative rule.
    pub fn map(&mut self, x: Var, f: fn(T) -> T, df: ElementwiseDerivative<T>) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Map { x, df }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |v, _| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), |_, y| y)
    }

    /// Mean over the spatial axes of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {xs:?}")));
        }
        let (n, c, area) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let out: Vec<T> = xv
            .chunks(area.max(1))
            .take(n * c)
            .map(|plane| {
                let s: f64 = plane.iter().map(|v| v.as_f64()).sum();
                T::from_f64(s / area as f64)
            })
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool { x }, needs))
    }

    /// Divides each row of `[N, D]` by its Euclidean norm plus `eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::shape("l2_normalize_rows", format!("input {xs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in xv.chunks(d.max(1)).take(n) {
            let r = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            norms.push(r);
            let s = r + eps;
            out.extend(row.iter().map(|&v| T::from_f64(v.as_f64() / s)));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::L2Normalize { x, eps, norms },
            needs,
        ))
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where clamping is active.
    pub fn log_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| v.max(lo).min(hi).ln())
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::LogClamp { x, lo, hi }, needs)
    }

    /// Row-wise `log softmax(x / temperature)` over `[N, K]`.
    pub fn log_softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || temperature <= 0.0 {
            return Err(Error::shape(
                "log_softmax_rows",
                format!("input {xs:?} at temperature {temperature}"),
            ));
        }
        let (n, k) = (xs[0], xs[1]);
        let inv_t = 1.0 / temperature;
        let mut out = Vec::with_capacity(n * k);
        for row in self.value(x).data().chunks(k.max(1)).take(n) {
            out.extend(log_softmax_f64(row, inv_t).into_iter().map(T::from_f64));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n, k], out)?,
            Op::LogSoftmax { x, inv_t },
            needs,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(T, T) -> T) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        let op = match name {
            "mul" => Op::Mul(a, b),
            "add" => Op::Add(a, b),
            _ => Op::Sub(a, b),
        };
        Ok(self.push(value, op, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    /// `scale * x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| T::from_f64(scale * v.as_f64() + shift))
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::ScaleShift { x, scale }, needs)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.scale_shift(x, scale, 0.0)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::SumAll(x), needs)
    }

    /// Columns `start..end` of a `[N, K]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || start > end || end > xs[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{end} of {xs:?}"),
            ));
        }
        let (n, k) = (xs[0], xs[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&src[i * k + start..i * k + end]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n, end - start], out)?,
            Op::SliceCols { x, start },
            needs,
        ))
    }

    /// Selects (possibly repeated) rows along the leading axis.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let n = src.rows();
        if src.shape().is_empty() {
            return Err(Error::shape("gather_rows", "rank-0 input"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of {n}"),
            ));
        }
        let w = src.row_len();
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(src.row(r));
        }
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar node. Parameters that did not contribute
    /// receive zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward called on a variable that was never recorded".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut out = self.params.zero_grads();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let dst = out.get_mut(*id).data_mut();
                    for (d, &s) in dst.iter_mut().zip(g.data()) {
                        *d = *d + s;
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => self.conv2d_backward(&g, *x, *w, *b, geom, cols, &mut grads),
                Op::Affine { x, w, b } => self.affine_backward(&g, *x, *w, *b, &mut grads),
                Op::Map { x, df } => {
                    let xv = self.value(*x).data();
                    let yv = node.value.data();
                    let dx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &gj)| gj * df(xv[j], yv[j]))
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.shape(*x);
                    let area = xs[2] * xs[3];
                    let inv = T::from_f64(1.0 / area as f64);
                    let mut dx = Vec::with_capacity(self.value(*x).len());
                    for &gj in g.data() {
                        dx.extend(std::iter::repeat_n(gj * inv, area));
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::L2Normalize { x, eps, norms } => {
                    let xv = self.value(*x).data();
                    let d = self.shape(*x)[1];
                    let mut dx = vec![T::zero(); xv.len()];
                    for (row, &r) in norms.iter().enumerate() {
                        let xr = &xv[row * d..(row + 1) * d];
                        let gr = &g.data()[row * d..(row + 1) * d];
                        let s = r + eps;
                        let xg = dot(xr, gr);
                        let coef = if r > 0.0 { xg / (s * s * r) } else { 0.0 };
                        for j in 0..d {
                            dx[row * d + j] =
                                T::from_f64(gr[j].as_f64() / s - xr[j].as_f64() * coef);
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::LogClamp { x, lo, hi } => {
                    let xv = self.value(*x).data();
                    let dx = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gj, &v)| {
                            if v < *lo || v > *hi {
                                T::zero()
                            } else {
                                gj / v
                            }
                        })
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmax { x, inv_t } => {
                    let k = self.shape(*x)[1];
                    let mut dx = Vec::with_capacity(g.len());
                    for (yr, gr) in node.value.data().chunks(k).zip(g.data().chunks(k)) {
                        let gsum: f64 = gr.iter().map(|v| v.as_f64()).sum();
                        for (&y, &gj) in yr.iter().zip(gr) {
                            let p = y.as_f64().exp();
                            dx.push(T::from_f64((gj.as_f64() - p * gsum) * inv_t));
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let bv = self.value(*b).data();
                        let da = g.data().iter().zip(bv).map(|(&x, &y)| x * y).collect();
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let av = self.value(*a).data();
                        let db = g.data().iter().zip(av).map(|(&x, &y)| x * y).collect();
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.data().to_vec());
                    self.accumulate(&mut grads, *b, g.data().to_vec());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.data().to_vec());
                    self.accumulate(&mut grads, *b, g.data().iter().map(|&v| -v).collect());
                }
                Op::ScaleShift { x, scale } => {
                    let s = T::from_f64(*scale);
                    self.accumulate(&mut grads, *x, g.data().iter().map(|&v| v * s).collect());
                }
                Op::SumAll(x) => {
                    let n = self.value(*x).len();
                    self.accumulate(&mut grads, *x, vec![g.item(); n]);
                }
                Op::SliceCols { x, start } => {
                    let k = self.shape(*x)[1];
                    let w = node.value.shape()[1];
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (row, gr) in g.data().chunks(w.max(1)).enumerate() {
                        dx[row * k + start..row * k + start + w].copy_from_slice(gr);
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows { x, rows } => {
                    let w = self.value(*x).row_len();
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (j, &r) in rows.iter().enumerate() {
                        for c in 0..w {
                            dx[r * w + c] = dx[r * w + c] + g.data()[j * w + c];
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (d, s) in t.data_mut().iter_mut().zip(delta) {
                    *d = *d + s;
                }
            }
            slot @ None => {
                let shape = self.shape(v).to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient matches value shape"));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        cols: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (kk, p) = (geom.cols(), geom.positions());
        let wv = self.value(w).data();
        let gd = g.data();
        let mut dw = vec![0.0f64; geom.o * kk];
        let mut db = vec![0.0f64; geom.o];
        let want_x = self.needs(x);
        let in_len = geom.c * geom.h * geom.w;
        let mut dx = if want_x {
            vec![T::zero(); geom.n * in_len]
        } else {
            Vec::new()
        };
        let mut dcol = vec![T::zero(); if want_x { kk * p } else { 0 }];
        for n in 0..geom.n {
            let col = &cols[n * kk * p..(n + 1) * kk * p];
            let gn = &gd[n * geom.o * p..(n + 1) * geom.o * p];
            for o in 0..geom.o {
                let go = &gn[o * p..(o + 1) * p];
                db[o] += go.iter().map(|v| v.as_f64()).sum::<f64>();
                for c in 0..kk {
                    dw[o * kk + c] += dot(go, &col[c * p..(c + 1) * p]);
                }
            }
            if want_x {
                dcol.fill(T::zero());
                for o in 0..geom.o {
                    let go = &gn[o * p..(o + 1) * p];
                    for c in 0..kk {
                        axpy(wv[o * kk + c], go, &mut dcol[c * p..(c + 1) * p]);
                    }
                }
                col2im(&dcol, geom, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
        self.accumulate(grads, w, dw.into_iter().map(T::from_f64).collect());
        self.accumulate(grads, b, db.into_iter().map(T::from_f64).collect());
        if want_x {
            self.accumulate(grads, x, dx);
        }
    }

    fn affine_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Var,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x);
        let (n, inp) = (xs[0], xs[1]);
        let out = self.shape(w)[0];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        if self.needs(w) || self.needs(b) {
            let mut dw = vec![0.0f64; out * inp];
            let mut db = vec![0.0f64; out];
            for i in 0..n {
                let xi = &xv[i * inp..(i + 1) * inp];
                for o in 0..out {
                    let go = gd[i * out + o].as_f64();
                    db[o] += go;
                    if go != 0.0 {
                        for (d, &xj) in dw[o * inp..(o + 1) * inp].iter_mut().zip(xi) {
                            *d += go * xj.as_f64();
                        }
                    }
                }
            }
            self.accumulate(grads, w, dw.into_iter().map(T::from_f64).collect());
            self.accumulate(grads, b, db.into_iter().map(T::from_f64).collect());
        }
        if self.needs(x) {
            let mut dx = vec![T::zero(); n * inp];
            for i in 0..n {
                let row = &mut dx[i * inp..(i + 1) * inp];
                for o in 0..out {
                    axpy(gd[i * out + o], &wv[o * inp..(o + 1) * inp], row);
                }
            }
            self.accumulate(grads, x, dx);
        }
    }
}

/// `log softmax(row * inv_t)` in f64 with the log-sum-exp shift.
pub(crate) fn log_softmax_f64<T: Real>(row: &[T], inv_t: f64) -> Vec<f64> {
    let z: Vec<f64> = row.iter().map(|v| v.as_f64() * inv_t).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.into_iter().map(|v| v - lse).collect()
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut col[((c * g.k + ki) * g.k + kj) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &col[((c * g.k + ki) * g.k + kj) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let at = iy as usize * g.w + ix as usize;
                            plane[at] = plane[at] + row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f64>) -> (ParameterSet<f64>, ParamId) {
        let mut p = ParameterSet::new();
        let id = p.add("w", Tensor::vector(v)).unwrap();
        (p, id)
    }

    #[test]
    fn identity_record_returns_input() {
        let p = ParameterSet::<f32>::new();
        let mut tape = Tape::new(&p);
        let x = tape.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(tape.value(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_weight_affine_returns_bias() {
        let mut p = ParameterSet::<f32>::new();
        let w = p.add("w", Tensor::zeros(&[2, 3])).unwrap();
        let b = p.add("b", Tensor::vector(vec![0.25, -1.5])).unwrap();
        let mut tape = Tape::new(&p);
        let x = tape.input(Tensor::new(vec![1, 3], vec![4.0, -2.0, 9.0]).unwrap());
        let (wv, bv) = (tape.param(w), tape.param(b));
        let y = tape.affine(x, wv, bv).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -1.5]);
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let (p, id) = one_param(vec![3.0]);
        let mut tape = Tape::new(&p);
        let w = tape.param(id);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).data(), &[6.0]);
    }

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let (p, id) = one_param(vec![0.5, -2.0, 7.0, 1e-3]);
        let mut tape = Tape::new(&p);
        let w = tape.param(id);
        let loss = tape.sum_all(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).data(), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_foreign_or_vector_nodes() {
        let (p, id) = one_param(vec![1.0, 2.0]);
        let tape = Tape::new(&p);
        assert!(matches!(tape.backward(Var(0)), Err(Error::Usage(_))));
        let mut tape = Tape::new(&p);
        let w = tape.param(id);
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let p = ParameterSet::<f32>::new();
        let mut tape = Tape::new(&p);
        let x = tape.input(Tensor::zeros(&[2, 3]));
        let w = tape.input(Tensor::zeros(&[4, 5]));
        let b = tape.input(Tensor::zeros(&[4]));
        match tape.affine(x, w, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "affine"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        // 1 sample, 2 channels, 5x5 input, 3 output channels, stride 2, pad 1.
        let mut p = ParameterSet::<f64>::new();
        let wdata: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5).collect();
        let w = p
            .add("w", Tensor::new(vec![3, 2, 3, 3], wdata.clone()).unwrap())
            .unwrap();
        let b = p.add("b", Tensor::vector(vec![0.1, -0.2, 0.3])).unwrap();
        let xdata: Vec<f64> = (0..50).map(|i| ((i * 5) % 13) as f64 * 0.1 - 0.6).collect();
        let mut tape = Tape::new(&p);
        let x = tape.input(Tensor::new(vec![1, 2, 5, 5], xdata.clone()).unwrap());
        let (wv, bv) = (tape.param(w), tape.param(b));
        let y = tape.conv2d(x, wv, bv, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 3, 3]);
        let bias = [0.1, -0.2, 0.3];
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = bias[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as i64 - 1;
                                let ix = (ox * 2 + kj) as i64 - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += wdata[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * xdata[c * 25 + iy as usize * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = tape.value(y).data()[(o * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_softmax_rows_sum_to_one() {
        let p = ParameterSet::<f64>::new();
        let mut tape = Tape::new(&p);
        let x = tape.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 40.0]).unwrap());
        let y = tape.log_softmax_rows(x, 2.0).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
