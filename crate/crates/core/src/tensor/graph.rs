use rand::Rng;

use super::{shape_err, split_axis, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Map(Var, fn(f64) -> f64),
    Softmax(Var, usize),
    LayerNorm { x: Var, axis: usize, inv_std: Vec<f64> },
    CausalConv(Var, Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Reverse(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Dropout(Var, Vec<f64>),
    SelectiveScan { inputs: [Var; 6], states: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in creation order and replays them backwards.
///
/// Nodes are appended as operations execute, so insertion order is a
/// topological order. Nodes whose inputs are all constant are stored as
/// constants and never visited by [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `src` viewed inside the broadcast shape `out` (zero on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let offset = out.len() - src.len();
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    strides
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Walks every index of `shape` in row-major order, tracking two strided offsets.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            ia -= sa[d] * shape[d];
            ib -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(e^z - 1) / z`, continuous at zero.
pub(crate) fn phi(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi`].
pub(crate) fn phi_prime(z: f64) -> f64 {
    if z.abs() < 1e-2 {
        let z2 = z * z;
        0.5 + z / 3.0 + z2 / 8.0 + z2 * z / 30.0 + z2 * z2 / 144.0 + z2 * z2 * z / 840.0
    } else {
        (z.exp_m1() * (z - 1.0) + z) / (z * z)
    }
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

    /// Adds a leaf whose gradient will be populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Adds a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if rg {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Leaf, false)
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise binary (numpy-style broadcasting) ----

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "hadamard",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let (da, db) = (self.data(a), self.data(b));
        let (shape, data) = if sa == sb {
            (sa, da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect())
        } else {
            let out = broadcast_shape(name, &sa, &sb)?;
            let n: usize = out.iter().product();
            let mut data = vec![0.0; n];
            if out == sa && sa.ends_with(&sb) {
                let m = db.len();
                for (o, slot) in data.iter_mut().enumerate() {
                    *slot = f(da[o], db[o % m]);
                }
            } else {
                let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
                walk2(&out, &ta, &tb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            }
            (out, data)
        };
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    // ---- linear algebra ----

    /// `[.., m, k] x [k, n]` (shared right operand) or `[.., m, k] x [.., k, n]`
    /// with identical leading batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands must have rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k, k2, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let shared = rb == 2;
        if !shared && sa[..ra - 2] != sb[..rb - 2] {
            return Err(shape_err("matmul", format!("batch dimensions differ: {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        if shared {
            gemm_acc(da, db, &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                gemm_acc(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        if let Some(i) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(TensorError::Domain {
                op: "exp",
                detail: format!("overflow at element {i} (input {})", self.data(x)[i]),
            });
        }
        Ok(self.push(value, Op::Exp(x), &[x]))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(i) = self.data(x).iter().position(|&v| !(v > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {} at element {i}", self.data(x)[i]),
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// `x^p` for nonnegative `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        if let Some(i) = self.data(x).iter().position(|&v| v < 0.0 || (v == 0.0 && p < 1.0 && p != 0.0)) {
            return Err(TensorError::Domain {
                op: "powf",
                detail: format!("base {} at element {i} with exponent {p}", self.data(x)[i]),
            });
        }
        Ok(self.unary(x, Op::Powf(x, p), |v| if p == 0.0 { 1.0 } else { v.powf(p) }))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        self.unary(x, Op::Map(x, df), f)
    }

    // ---- axis operations ----

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::Invalid { op, detail: format!("axis {axis} out of range for rank {rank}") });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x, axis), &[x]))
    }

    /// Normalizes to zero mean and unit variance along `axis`: `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mean = (0..n).map(|j| src[at(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (src[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for j in 0..n {
                    out[at(j)] = (src[at(j)] - mean) * r;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, axis, inv_std }, &[x]))
    }

    /// Depthwise causal convolution over the second-to-last axis.
    ///
    /// `x` is `[.., L, C]`, `kernel` is `[C, W]` indexed by lag:
    /// `y[t, c] = sum_j kernel[c, j] * x[t - j, c]` with zeros before the start.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() < 2 || sk.len() != 2 || sk[0] != sx[sx.len() - 1] {
            return Err(shape_err("causal_conv1d", format!("input {sx:?} incompatible with kernel {sk:?}")));
        }
        let (l, c, w) = (sx[sx.len() - 2], sx[sx.len() - 1], sk[1]);
        let batch = sx[..sx.len() - 2].iter().product::<usize>();
        let (xs, ks) = (self.data(x), self.data(kernel));
        let mut out = vec![0.0; xs.len()];
        for b in 0..batch {
            let base = b * l * c;
            for t in 0..l {
                for j in 0..w.min(t + 1) {
                    let src = base + (t - j) * c;
                    let dst = base + t * c;
                    for ch in 0..c {
                        out[dst + ch] += ks[ch * w + j] * xs[src + ch];
                    }
                }
            }
        }
        Ok(self.push(Tensor::from_parts(sx, out), Op::CausalConv(x, kernel), &[x, kernel]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::Invalid { op: "concat", detail: "no inputs".into() })?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start >= end || end > shape[axis] {
            return Err(shape_err("slice", format!("range {start}..{end} invalid for axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let len = end - start;
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[o * n * inner + start * inner..o * n * inner + end * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshaped(shape.to_vec())
            .map_err(|_| shape_err("reshape", format!("cannot reshape {:?} into {shape:?}", self.shape(x))))?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Invalid {
                op: "transpose",
                detail: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let st = contiguous_strides(&shape);
        let ps: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        walk2(&out_shape, &ps, &ps, |o, ia, _| out[o] = src[ia]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("reverse", x, axis)?;
        let value = reverse_axis(self.value(x), axis);
        Ok(self.push(value, Op::Reverse(x, axis), &[x]))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(if mean { "mean" } else { "sum" }, x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[o * n * inner + j * inner..o * n * inner + (j + 1) * inner];
                for (slot, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *slot += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        Ok(self.push(Tensor::from_parts(oshape, out), op, &[x]))
    }

    /// Sums out `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Averages out `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    /// Inverted dropout. Identity when `rate == 0` or outside training.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid { op: "dropout", detail: format!("rate {rate} outside [0, 1)") });
        }
        if rate == 0.0 || !training {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> =
            (0..self.value(x).numel()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Dropout(x, mask), &[x]))
    }

    /// Diagonal selective state-space scan with zero-order-hold discretization.
    ///
    /// Shapes: `u`, `delta`: `[B, L, C]`; `a`: `[C, S]` (continuous, negative);
    /// `b`, `c`: `[B, L, S]`; `d`: `[C]`. Per channel and state:
    /// `h_t = exp(delta_t a) h_{t-1} + phi(delta_t a) delta_t b_t u_t`,
    /// `y_t = sum_s c_t h_t + d u_t`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        if su.len() != 3 {
            return Err(shape_err("selective_scan", format!("input must be [B, L, C], got {su:?}")));
        }
        let (nb, l, nc) = (su[0], su[1], su[2]);
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != nc {
            return Err(shape_err("selective_scan", format!("state matrix {sa:?} does not match {nc} channels")));
        }
        let ns = sa[1];
        let checks = [
            (delta, vec![nb, l, nc], "delta"),
            (b, vec![nb, l, ns], "input map"),
            (c, vec![nb, l, ns], "output map"),
            (d, vec![nc], "skip"),
        ];
        for (v, want, what) in checks {
            if self.shape(v) != want.as_slice() {
                return Err(shape_err(
                    "selective_scan",
                    format!("{what} has shape {:?}, expected {want:?}", self.shape(v)),
                ));
            }
        }
        if let Some(i) = self.data(delta).iter().position(|&v| !(v > 0.0)) {
            return Err(TensorError::Domain {
                op: "selective_scan",
                detail: format!("non-positive timescale at element {i}"),
            });
        }
        let (us, ds, as_, bs, cs, dd) =
            (self.data(u), self.data(delta), self.data(a), self.data(b), self.data(c), self.data(d));
        let mut y = vec![0.0; nb * l * nc];
        let mut states = vec![0.0; nb * l * nc * ns];
        for bi in 0..nb {
            for t in 0..l {
                let tok = bi * l + t;
                for ch in 0..nc {
                    let ut = us[tok * nc + ch];
                    let dt = ds[tok * nc + ch];
                    let mut acc = dd[ch] * ut;
                    let cur = (tok * nc + ch) * ns;
                    for s in 0..ns {
                        let z = dt * as_[ch * ns + s];
                        let prev = if t > 0 { states[cur - nc * ns + s] } else { 0.0 };
                        let h = z.exp() * prev + phi(z) * dt * bs[tok * ns + s] * ut;
                        states[cur + s] = h;
                        acc += cs[tok * ns + s] * h;
                    }
                    y[tok * nc + ch] = acc;
                }
            }
        }
        let inputs = [u, delta, a, b, c, d];
        Ok(self.push(Tensor::from_parts(su, y), Op::SelectiveScan { inputs, states }, &inputs))
    }

    // ---- reverse pass ----

    /// Populates gradients of the scalar `loss` for every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if node.requires_grad {
                    Some(Tensor::from_parts(
                        node.value.shape().to_vec(),
                        g.unwrap_or_else(|| vec![0.0; node.value.numel()]),
                    ))
                } else {
                    None
                }
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let nodes = &self.nodes;
        // Accumulates into the gradient buffer of `v` when it participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = (self.data(*a), self.data(*b));
                let shape = node.value.shape();
                let (ta, tb) = (broadcast_strides(sa, shape), broadcast_strides(sb, shape));
                let kind = *kind;
                acc(*a, &mut |ga| {
                    walk2(shape, &ta, &tb, |o, ia, ib| {
                        ga[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[o],
                            BinaryKind::Mul => g[o] * db[ib],
                        }
                    })
                });
                acc(*b, &mut |gb| {
                    walk2(shape, &ta, &tb, |o, ia, ib| {
                        gb[ib] += match kind {
                            BinaryKind::Add => g[o],
                            BinaryKind::Sub => -g[o],
                            BinaryKind::Mul => g[o] * da[ia],
                        }
                    })
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ra, rb) = (sa.len(), sb.len());
                let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 1]);
                let shared = rb == 2;
                let batch: usize = sa[..ra - 2].iter().product();
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for bi in 0..batch {
                        let boff = if shared { 0 } else { bi * k * n };
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let brow = &db[boff + p * n..boff + (p + 1) * n];
                                ga[(bi * m + i) * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for bi in 0..batch {
                        let boff = if shared { 0 } else { bi * k * n };
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let av = da[(bi * m + i) * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (slot, gv) in gb[boff + p * n..boff + (p + 1) * n].iter_mut().zip(grow) {
                                    *slot += av * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(s, gv)| *s += c * gv)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(s, gv)| *s += gv)),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * out[i];
                }
            }),
            Op::Log(x) => {
                let xs = self.data(*x);
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] / xs[i];
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Silu(x) => {
                let xs = self.data(*x);
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        let s = sigmoid(xs[i]);
                        gx[i] += g[i] * (s + xs[i] * s * (1.0 - s));
                    }
                })
            }
            Op::Softplus(x) => {
                let xs = self.data(*x);
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sigmoid(xs[i]);
                    }
                })
            }
            Op::Powf(x, p) => {
                let xs = self.data(*x);
                let p = *p;
                acc(*x, &mut |gx| {
                    if p == 0.0 {
                        return;
                    }
                    for i in 0..g.len() {
                        gx[i] += g[i] * p * xs[i].powf(p - 1.0);
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let xs = self.data(*x);
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        if xs[i] >= *lo && xs[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                })
            }
            Op::Map(x, df) => {
                let xs = self.data(*x);
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * df(xs[i]);
                    }
                })
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let mg = (0..n).map(|j| g[at(j)]).sum::<f64>() / n as f64;
                            let mgy = (0..n).map(|j| g[at(j)] * out[at(j)]).sum::<f64>() / n as f64;
                            let r = inv_std[o * inner + i];
                            for j in 0..n {
                                gx[at(j)] += r * (g[at(j)] - mg - out[at(j)] * mgy);
                            }
                        }
                    }
                })
            }
            Op::CausalConv(x, kernel) => {
                let sx = self.shape(*x);
                let (l, c) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                let w = self.shape(*kernel)[1];
                let batch = sx[..sx.len() - 2].iter().product::<usize>();
                let (xs, ks) = (self.data(*x), self.data(*kernel));
                acc(*x, &mut |gx| {
                    for b in 0..batch {
                        let base = b * l * c;
                        for t in 0..l {
                            for j in 0..w.min(t + 1) {
                                for ch in 0..c {
                                    gx[base + (t - j) * c + ch] += ks[ch * w + j] * g[base + t * c + ch];
                                }
                            }
                        }
                    }
                });
                acc(*kernel, &mut |gk| {
                    for b in 0..batch {
                        let base = b * l * c;
                        for t in 0..l {
                            for j in 0..w.min(t + 1) {
                                for ch in 0..c {
                                    gk[ch * w + j] += xs[base + (t - j) * c + ch] * g[base + t * c + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..o * total * inner + (offset + n) * inner];
                            for (s, gval) in gv[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *s += gval;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[o * n * inner + start * inner..o * n * inner + (start + len) * inner];
                        for (s, gval) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *s += gval;
                        }
                    }
                })
            }
            Op::Permute(x, perm) => {
                let st = contiguous_strides(self.shape(*x));
                let ps: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                let shape = node.value.shape();
                acc(*x, &mut |gx| walk2(shape, &ps, &ps, |o, ia, _| gx[ia] += g[o]))
            }
            Op::Reverse(x, axis) => {
                let gt = reverse_axis(&Tensor::from_parts(node.value.shape().to_vec(), g.to_vec()), *axis);
                acc(*x, &mut |gx| gx.iter_mut().zip(gt.data()).for_each(|(s, v)| *s += v))
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let f = if matches!(node.op, Op::Mean(..)) { 1.0 / n as f64 } else { 1.0 };
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                gx[o * n * inner + j * inner + i] += f * g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::SumAll(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|s| *s += g[0])),
            Op::Dropout(x, mask) => acc(*x, &mut |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }),
            Op::SelectiveScan { inputs, states } => self.backprop_scan(inputs, states, g, grads),
        }
    }

    fn backprop_scan(&self, inputs: &[Var; 6], states: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let [u, delta, a, b, c, d] = *inputs;
        let su = self.shape(u);
        let (nb, l, nc) = (su[0], su[1], su[2]);
        let ns = self.shape(a)[1];
        let (us, ds, as_, bs, cs, dd) =
            (self.data(u), self.data(delta), self.data(a), self.data(b), self.data(c), self.data(d));
        let mut gu = vec![0.0; us.len()];
        let mut gdelta = vec![0.0; ds.len()];
        let mut ga = vec![0.0; as_.len()];
        let mut gb = vec![0.0; bs.len()];
        let mut gc = vec![0.0; cs.len()];
        let mut gd = vec![0.0; dd.len()];
        let mut carry = vec![0.0; nc * ns];
        for bi in 0..nb {
            carry.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..l).rev() {
                let tok = bi * l + t;
                for ch in 0..nc {
                    let gy = g[tok * nc + ch];
                    let ut = us[tok * nc + ch];
                    let dt = ds[tok * nc + ch];
                    gd[ch] += gy * ut;
                    let mut gut = gy * dd[ch];
                    let mut gdt = 0.0;
                    let cur = (tok * nc + ch) * ns;
                    for s in 0..ns {
                        let av = as_[ch * ns + s];
                        let z = dt * av;
                        let ez = z.exp();
                        let ph = phi(z);
                        let bv = bs[tok * ns + s];
                        let h = states[cur + s];
                        let prev = if t > 0 { states[cur - nc * ns + s] } else { 0.0 };
                        let gh = carry[ch * ns + s] + gy * cs[tok * ns + s];
                        gc[tok * ns + s] += gy * h;
                        let gbb = gh * ut;
                        gut += gh * ph * dt * bv;
                        let gz = gh * prev * ez + gbb * phi_prime(z) * dt * bv;
                        gdt += gz * av + gbb * ph * bv;
                        ga[ch * ns + s] += gz * dt;
                        gb[tok * ns + s] += gbb * ph * dt;
                        carry[ch * ns + s] = gh * ez;
                    }
                    gu[tok * nc + ch] += gut;
                    gdelta[tok * nc + ch] += gdt;
                }
            }
        }
        for (v, gv) in [(u, gu), (delta, gdelta), (a, ga), (b, gb), (c, gc), (d, gd)] {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; gv.len()]);
            buf.iter_mut().zip(&gv).for_each(|(s, x)| *s += x);
        }
    }
}

pub(crate) fn reverse_axis(t: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..n {
            let from = o * n * inner + j * inner;
            let to = o * n * inner + (n - 1 - j) * inner;
            out[to..to + inner].copy_from_slice(&src[from..from + inner]);
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}
