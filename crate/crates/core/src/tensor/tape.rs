use rand::RngCore;

use super::kernels::{self, ConvGeom};
use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Negative-branch slope of LeakyReLU; also used at exactly zero.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv3x3 { x: Var, k: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    LeakyRelu(Var),
    Dropout { x: Var, mask: Vec<T> },
    Reshape(Var),
    SoftmaxCe { logits: Var, probs: Vec<T>, targets: Vec<usize> },
    L2 { params: Vec<Var>, lambda: T },
    Add(Var, Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records operations for one forward pass so they can be replayed backwards.
///
/// A tape built with [`Tape::inference`] computes the same values but keeps
/// no backward state.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

/// Gradients of a scalar with respect to every value on a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zero when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    pub fn inference() -> Self {
        Self { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let c = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != c {
            return Err(Error::Dimension(format!("bias {sb:?} for input {sx:?}")));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in value.data_mut().chunks_exact_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v = *v + bb;
            }
        }
        Ok(self.push(value, Op::AddBias(x, b)))
    }

    /// "Same"-padded 3×3 cross-correlation plus bias.
    ///
    /// `x` is `[h, w, cin]` or `[n, h, w, cin]`; `k` is `[3, 3, cin, cout]`;
    /// `b` is `[cout]`. The output keeps the rank of `x`.
    pub fn conv3x3(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let g = self.conv_geom(x, k, b)?;
        let value = kernels::conv3x3_forward(&g, self.value(x).data(), self.value(k).data(), self.value(b).data());
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = g.cout;
        let value = Tensor::new(shape, value)?;
        Ok(self.push(value, Op::Conv3x3 { x, k, b }))
    }

    fn conv_geom(&self, x: Var, k: Var, b: Var) -> Result<ConvGeom> {
        let (sx, sk, sb) = (self.shape(x), self.shape(k), self.shape(b));
        let (n, h, w, cin) = match *sx {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => return Err(Error::Dimension(format!("conv input must be [h,w,c] or [n,h,w,c], got {sx:?}"))),
        };
        if sk.len() != 4 || sk[0] != 3 || sk[1] != 3 {
            return Err(Error::Dimension(format!("conv kernel must be [3,3,cin,cout], got {sk:?}")));
        }
        if sk[2] != cin {
            return Err(Error::Dimension(format!(
                "conv channel mismatch: input {sx:?} has {cin} channels, kernel {sk:?} expects {}",
                sk[2]
            )));
        }
        if sb != [sk[3]] {
            return Err(Error::Dimension(format!("conv bias {sb:?} for kernel {sk:?}")));
        }
        Ok(ConvGeom { n, h, w, cin, cout: sk[3] })
    }

    /// 2×2 max pooling; `x` is `[h, w, c]` or `[n, h, w, c]`.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (n, h, w, c) = match *sx {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => return Err(Error::Dimension(format!("maxpool input must be rank 3 or 4, got {sx:?}"))),
        };
        let (out, argmax) = kernels::maxpool2x2_forward(n, h, w, c, self.value(x).data(), self.record);
        let mut shape = sx;
        let r = shape.len();
        shape[r - 3] = h.div_ceil(2);
        shape[r - 2] = w.div_ceil(2);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let slope = T::lit(LEAKY_SLOPE);
        let value = self.value(x).map(|v| leaky(v, slope));
        self.push(value, Op::LeakyRelu(x))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, enabled: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !enabled || rate == 0.0 {
            return Ok(x);
        }
        let mut value = self.value(x).clone();
        let mask = dropout_in_place(value.data_mut(), rate, rng, self.record);
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Mean of `-log softmax(logits)[target]` over the rows of `logits`
    /// (`[C]` or `[n, C]`). Returns a one-element tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, classes) = match *shape {
            [c] => (1, c),
            [n, c] => (n, c),
            _ => return Err(Error::Dimension(format!("logits must be [C] or [n,C], got {shape:?}"))),
        };
        if targets.len() != rows {
            return Err(Error::Dimension(format!("{} targets for {rows} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Parameter(format!("target class {bad} out of range for {classes} classes")));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), classes);
        let lg = self.value(logits).data();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lg[r * classes..(r + 1) * classes];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
            loss = loss + (lse - row[t]);
        }
        let loss = loss / T::from_usize(rows).unwrap();
        let probs = if self.record { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, probs, targets: targets.to_vec() },
        ))
    }

    /// `lambda · Σ w²` over all entries of `params`.
    pub fn l2(&mut self, params: &[Var], lambda: f64) -> Var {
        let lambda = T::lit(lambda);
        let total = params
            .iter()
            .flat_map(|&p| self.value(p).data().iter())
            .fold(T::zero(), |acc, &w| acc + w * w);
        self.push(Tensor::scalar(lambda * total), Op::L2 { params: params.to_vec(), lambda })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!("add of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Reverse-mode sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(Error::Parameter("backward on an inference tape".into()));
        }
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, dy.data(), false, vb.data(), true, T::zero(), &mut da);
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, va.data(), true, dy.data(), false, T::zero(), &mut db);
                    accumulate(&mut grads, *a, Tensor::new(vec![m, k], da)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![k, n], db)?);
                }
                Op::AddBias(x, b) => {
                    let c = self.shape(*b)[0];
                    let mut db = vec![T::zero(); c];
                    for row in dy.data().chunks_exact(c) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::new(vec![c], db)?);
                    accumulate(&mut grads, *x, dy);
                }
                Op::Conv3x3 { x, k, b } => {
                    let g = self.conv_geom(*x, *k, *b)?;
                    let (dx, dk, db) =
                        kernels::conv3x3_backward(&g, self.value(*x).data(), self.value(*k).data(), dy.data());
                    accumulate(&mut grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                    accumulate(&mut grads, *k, Tensor::new(self.shape(*k).to_vec(), dk)?);
                    accumulate(&mut grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let d = dx.data_mut();
                    for (&src, &g) in argmax.iter().zip(dy.data()) {
                        d[src] = d[src] + g;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LeakyRelu(x) => {
                    let slope = T::lit(LEAKY_SLOPE);
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v <= T::zero() {
                            *d = *d * slope;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = dy;
                    for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                        *d = *d * m;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    let dx = dy.reshape(self.shape(*x))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxCe { logits, probs, targets } => {
                    let scale = dy.item() / T::from_usize(targets.len()).unwrap();
                    let classes = probs.len() / targets.len();
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * classes + t] = dl[r * classes + t] - T::one();
                    }
                    for v in dl.iter_mut() {
                        *v = *v * scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(self.shape(*logits).to_vec(), dl)?);
                }
                Op::L2 { params, lambda } => {
                    let scale = T::lit(2.0) * *lambda * dy.item();
                    for &p in params {
                        accumulate(&mut grads, p, self.value(p).map(|w| w * scale));
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Sum(x) => {
                    let g = dy.item();
                    accumulate(&mut grads, *x, Tensor::full(self.shape(*x), g));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Multiplies `data` by inverted-dropout factors: `0` with probability
/// `rate`, else `1/(1-rate)`. Each `u64` draw yields two 32-bit uniforms (low
/// half first); a uniform below `round(rate·2³²)` drops its element. Returns
/// the factors when `keep_mask` is set, else an empty vector.
pub(crate) fn dropout_in_place<T: Scalar>(data: &mut [T], rate: f64, rng: &mut Rng, keep_mask: bool) -> Vec<T> {
    map_dropout_in_place(data, rate, rng, keep_mask, |v| v)
}

/// [`dropout_in_place`] applied to `f(v)` instead of `v`, in one pass.
pub(crate) fn map_dropout_in_place<T: Scalar>(
    data: &mut [T],
    rate: f64,
    rng: &mut Rng,
    keep_mask: bool,
    f: impl Fn(T) -> T,
) -> Vec<T> {
    const WORDS: usize = 128;
    let threshold = (rate * 4_294_967_296.0).round() as u64;
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut mask = Vec::with_capacity(if keep_mask { data.len() } else { 0 });
    // uniforms are drawn ahead of each block so the select loop can vectorize
    let mut halves = [0u32; 2 * WORDS];
    for block in data.chunks_mut(2 * WORDS) {
        for pair in halves[..block.len().next_multiple_of(2)].chunks_exact_mut(2) {
            let r = rng.next_u64();
            pair[0] = r as u32;
            pair[1] = (r >> 32) as u32;
        }
        for (v, &u) in block.iter_mut().zip(&halves) {
            let m = if u as u64 >= threshold { keep } else { T::zero() };
            *v = f(*v) * m;
        }
        if keep_mask {
            mask.extend(halves[..block.len()].iter().map(|&u| if u as u64 >= threshold { keep } else { T::zero() }));
        }
    }
    mask
}

/// LeakyReLU of one value.
#[inline]
pub(crate) fn leaky<T: Scalar>(v: T, slope: T) -> T {
    let scaled = slope * v;
    if v > T::zero() {
        v
    } else {
        scaled
    }
}
