//! Named parameter storage, the forward-pass context, and the basic layers
//! shared by every model component.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{relative_error, GradCheckReport, Graph, InputCheck, Result, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store, also the index into [`Ctx::backward`] output.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors ("parameter groups").
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under `name`. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let (idx, previous) = self.params.insert_full(name, value);
        assert!(previous.is_none(), "duplicate parameter {:?}", self.params.get_index(idx).unwrap().0);
        ParamId(idx)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).unwrap().0
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// One forward pass: a fresh graph with parameters bound lazily from a store.
pub struct Ctx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    /// Evaluation mode: dropout disabled, no randomness needed.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()], training: false, rng: None }
    }

    pub fn train(store: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()], training: true, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.graph.shape(v).to_vec()
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => self.graph.dropout(x, rate, true, &mut **rng),
            _ => Ok(x),
        }
    }

    /// Runs backward from `loss` and returns the gradient of every bound parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        self.graph.backward(loss)?;
        Ok(self.bound.iter().map(|b| b.and_then(|v| self.graph.grad(v).cloned())).collect())
    }
}

/// Names parameters under a dotted prefix while a model is being built.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_>) -> T) -> T {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut inner = Builder { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut inner)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, value)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, &mut *self.rng);
        self.add(name, t)
    }

    pub fn random(&mut self) -> f64 {
        self.rng.random()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        b.scoped(name, |b| Self {
            weight: b.fan_in_uniform("weight", vec![in_dim, out_dim], in_dim),
            bias: Some(b.fan_in_uniform("bias", vec![out_dim], in_dim)),
            in_dim,
            out_dim,
        })
    }

    pub fn no_bias(b: &mut Builder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        b.scoped(name, |b| Self {
            weight: b.fan_in_uniform("weight", vec![in_dim, out_dim], in_dim),
            bias: None,
            in_dim,
            out_dim,
        })
    }

    /// Applies `x W + b` over the last axis of `x`.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let y = cx.graph.matmul(x, w)?;
        match self.bias {
            Some(bias) => {
                let b = cx.param(bias);
                cx.graph.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Self {
        b.scoped(name, |b| Self {
            scale: b.add("scale", Tensor::ones(vec![dim])),
            shift: b.add("shift", Tensor::zeros(vec![dim])),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let axis = cx.graph.shape(x).len() - 1;
        let n = cx.graph.layer_norm(x, axis, LAYER_NORM_EPS)?;
        let s = cx.param(self.scale);
        let t = cx.param(self.shift);
        let y = cx.graph.hadamard(n, s)?;
        cx.graph.add(y, t)
    }
}

/// `Linear -> SiLU -> Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder<'_>, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        b.scoped(name, |b| Self {
            fc1: Linear::new(b, "fc1", in_dim, hidden),
            fc2: Linear::new(b, "fc2", hidden, out_dim),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.graph.silu(h);
        self.fc2.forward(cx, h)
    }
}

/// Splits a `[B, W]` matrix into `[B, L, token_width]` tokens, zero-padding
/// the right end when `W` is not a multiple of the token width.
pub fn tokenize(cx: &mut Ctx<'_>, x: Var, token_width: usize) -> Result<Var> {
    let shape = cx.shape(x);
    let (batch, width) = (shape[0], shape[1]);
    let tokens = width.div_ceil(token_width);
    let padded = tokens * token_width;
    let x = if padded > width {
        let pad = cx.constant(Tensor::zeros(vec![batch, padded - width]));
        cx.graph.concat(&[x, pad], 1)?
    } else {
        x
    };
    cx.graph.reshape(x, &[batch, tokens, token_width])
}

/// Stacks `[B, D]` vectors into a `[B, n, D]` token sequence.
pub fn stack_tokens(cx: &mut Ctx<'_>, xs: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(xs.len());
    for &x in xs {
        let s = cx.shape(x);
        parts.push(cx.graph.reshape(x, &[s[0], 1, s[1]])?);
    }
    cx.graph.concat(&parts, 1)
}

/// Token `i` of a `[B, L, D]` sequence as a `[B, D]` matrix.
pub fn token(cx: &mut Ctx<'_>, x: Var, i: usize) -> Result<Var> {
    let s = cx.shape(x);
    let t = cx.graph.slice(x, 1, i, i + 1)?;
    cx.graph.reshape(t, &[s[0], s[2]])
}

/// Central-difference check of every parameter group in `store` for the
/// scalar produced by `f` in evaluation mode. At most `max_per_group`
/// evenly strided elements are probed in each group.
pub fn grad_check_store(
    store: &ParamStore,
    f: impl Fn(&mut Ctx<'_>) -> Result<Var>,
    h: f64,
    tol: f64,
    max_per_group: usize,
) -> Result<GradCheckReport> {
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut cx = Ctx::eval(s);
        let out = f(&mut cx)?;
        Ok(cx.value(out).item())
    };
    let grads = {
        let mut cx = Ctx::eval(store);
        let out = f(&mut cx)?;
        cx.backward(out)?
    };
    let mut probe = store.clone();
    let mut report = GradCheckReport { tol, inputs: Vec::new() };
    for id in store.ids() {
        let n = store.get(id).numel();
        let stride = n.div_ceil(max_per_group.max(1)).max(1);
        let mut check = InputCheck { input: id.0, checked: 0, max_rel_err: 0.0, max_abs_err: 0.0, passed: true };
        for i in (0..n).step_by(stride) {
            let x0 = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + h;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0 - h;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[id.0].as_ref().map_or(0.0, |g| g.data()[i]);
            check.max_rel_err = check.max_rel_err.max(relative_error(analytic, numeric));
            check.max_abs_err = check.max_abs_err.max((analytic - numeric).abs());
            check.checked += 1;
        }
        check.passed = check.max_rel_err < tol;
        report.inputs.push(check);
    }
    Ok(report)
}

/// Scalar reduction `sum(out * w)` with fixed non-uniform weights, used to
/// turn a module output into a loss for gradient tests.
pub fn weighted_sum(cx: &mut Ctx<'_>, out: Var) -> Result<Var> {
    let shape = cx.shape(out);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect())?;
    let w = cx.constant(w);
    let y = cx.graph.hadamard(out, w)?;
    Ok(cx.graph.sum_all(y))
}
