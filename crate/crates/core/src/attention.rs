//! Multi-head attention, the post-norm self-attention block and the
//! bidirectional cross-attention interaction module.

use crate::nn::{Builder, Ctx, LayerNorm, Linear, ParamStore};
use crate::tensor::{shape_err, Result, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub width: usize,
    pub heads: usize,
    /// Divide scores by `sqrt(head_width)` before the softmax.
    pub scaled: bool,
}

impl AttentionConfig {
    pub fn new(width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width {width} is not divisible into {heads} heads");
        Self { width, heads, scaled: true }
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

/// Output of the attention core before the output map.
pub struct Attended {
    /// `[B, H, Lq, Lk]` row-stochastic weights.
    pub weights: Var,
    /// `[B, H, Lk, Db]` per-head value rows.
    pub values: Var,
    /// `[B, Lq, D]` concatenated head outputs.
    pub heads: Var,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: AttentionConfig) -> Self {
        let d = cfg.width;
        b.scoped(name, |b| Self {
            cfg,
            query: Linear::no_bias(b, "query", d, d),
            key: Linear::no_bias(b, "key", d, d),
            value: Linear::no_bias(b, "value", d, d),
            output: Linear::new(b, "output", d, d),
        })
    }

    fn split_heads(&self, cx: &mut Ctx<'_>, x: Var, perm: &[usize]) -> Result<Var> {
        let s = cx.shape(x);
        let (h, db) = (self.cfg.heads, self.cfg.head_width());
        let x = cx.graph.reshape(x, &[s[0], s[1], h, db])?;
        cx.graph.transpose(x, perm)
    }

    pub fn attend(&self, cx: &mut Ctx<'_>, queries_from: Var, keys_values_from: Var) -> Result<Attended> {
        let qs = cx.shape(queries_from);
        let ks = cx.shape(keys_values_from);
        let d = self.cfg.width;
        if qs.len() != 3 || ks.len() != 3 || qs[2] != d || ks[2] != d || qs[0] != ks[0] {
            return Err(shape_err("attention", format!("queries {qs:?} and keys {ks:?} must be [B, L, {d}]")));
        }
        let q = self.query.forward(cx, queries_from)?;
        let k = self.key.forward(cx, keys_values_from)?;
        let v = self.value.forward(cx, keys_values_from)?;
        let q = self.split_heads(cx, q, &[0, 2, 1, 3])?;
        let kt = self.split_heads(cx, k, &[0, 2, 3, 1])?;
        let values = self.split_heads(cx, v, &[0, 2, 1, 3])?;
        let mut scores = cx.graph.matmul(q, kt)?;
        if self.cfg.scaled {
            scores = cx.graph.scale(scores, 1.0 / (self.cfg.head_width() as f64).sqrt());
        }
        let weights = cx.graph.softmax(scores, 3)?;
        let out = cx.graph.matmul(weights, values)?;
        let out = cx.graph.transpose(out, &[0, 2, 1, 3])?;
        let heads = cx.graph.reshape(out, &[qs[0], qs[1], d])?;
        Ok(Attended { weights, values, heads })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, queries_from: Var, keys_values_from: Var) -> Result<Var> {
        let a = self.attend(cx, queries_from, keys_values_from)?;
        self.output.forward(cx, a.heads)
    }

    /// Zeroes the query generator, making every attention row uniform.
    pub fn zero_query(&self, store: &mut ParamStore) {
        self.query.zero(store);
    }
}

/// `inner = N(x + L(MSA(x)))`, `out = N(inner + L(inner))`.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub mha: MultiHeadAttention,
    pub attn_linear: Linear,
    pub attn_norm: LayerNorm,
    pub ff_linear: Linear,
    pub ff_norm: LayerNorm,
}

impl SelfAttentionBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: AttentionConfig) -> Self {
        let d = cfg.width;
        b.scoped(name, |b| Self {
            mha: MultiHeadAttention::new(b, "mha", cfg),
            attn_linear: Linear::new(b, "attn_linear", d, d),
            attn_norm: LayerNorm::new(b, "attn_norm", d),
            ff_linear: Linear::new(b, "ff_linear", d, d),
            ff_norm: LayerNorm::new(b, "ff_norm", d),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let a = self.mha.forward(cx, x, x)?;
        let a = self.attn_linear.forward(cx, a)?;
        let r = cx.graph.add(x, a)?;
        let inner = self.attn_norm.forward(cx, r)?;
        let f = self.ff_linear.forward(cx, inner)?;
        let r = cx.graph.add(inner, f)?;
        self.ff_norm.forward(cx, r)
    }

    pub fn zero_linears(&self, store: &mut ParamStore) {
        self.attn_linear.zero(store);
        self.ff_linear.zero(store);
    }
}

#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub blocks: Vec<SelfAttentionBlock>,
}

impl AttentionStack {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: AttentionConfig, depth: usize) -> Self {
        b.scoped(name, |b| Self {
            blocks: (0..depth).map(|i| SelfAttentionBlock::new(b, &format!("block{i}"), cfg)).collect(),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, mut x: Var) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(cx, x)?;
        }
        Ok(x)
    }
}

/// Bidirectional interaction: each branch queries the other and keeps a
/// residual, `F¹ = x¹ + MHA(x¹, x²)` and `F² = x² + MHA(x², x¹)`.
#[derive(Debug, Clone)]
pub struct Binm {
    pub first: MultiHeadAttention,
    /// `None` when both directions share one set of generators.
    pub second: Option<MultiHeadAttention>,
}

impl Binm {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: AttentionConfig, shared: bool) -> Self {
        b.scoped(name, |b| Self {
            first: MultiHeadAttention::new(b, "first", cfg),
            second: (!shared).then(|| MultiHeadAttention::new(b, "second", cfg)),
        })
    }

    pub fn second_direction(&self) -> &MultiHeadAttention {
        self.second.as_ref().unwrap_or(&self.first)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, branch1: Var, branch2: Var) -> Result<(Var, Var)> {
        let a = self.first.forward(cx, branch1, branch2)?;
        let f1 = cx.graph.add(branch1, a)?;
        let b = self.second_direction().forward(cx, branch2, branch1)?;
        let f2 = cx.graph.add(branch2, b)?;
        Ok((f1, f2))
    }

    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.first.output.zero(store);
        self.second_direction().output.zero(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check_store, weighted_sum, ParamId, LAYER_NORM_EPS};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn mha(seed: u64, width: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let m =
            MultiHeadAttention::new(&mut Builder::new(&mut store, &mut r), "mha", AttentionConfig::new(width, heads));
        (store, m)
    }

    fn set(store: &mut ParamStore, id: ParamId, data: Vec<f64>) {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::new(shape, data).unwrap();
    }

    fn softmax(xs: &[f64]) -> Vec<f64> {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
        (0..cols).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j]).sum()).collect()
    }

    /// Direct per-token, per-head evaluation of softmax(q kᵀ / s) v followed by the output map.
    fn oracle(store: &ParamStore, m: &MultiHeadAttention, xq: &[Vec<f64>], xkv: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = m.cfg.width;
        let db = m.cfg.head_width();
        let w = |l: &Linear| store.get(l.weight).data().to_vec();
        let (wq, wk, wv, wo) = (w(&m.query), w(&m.key), w(&m.value), w(&m.output));
        let bo = store.get(m.output.bias.unwrap()).data().to_vec();
        let ks: Vec<_> = xkv.iter().map(|x| matvec(x, &wk, d)).collect();
        let vs: Vec<_> = xkv.iter().map(|x| matvec(x, &wv, d)).collect();
        let scale = if m.cfg.scaled { (db as f64).sqrt() } else { 1.0 };
        xq.iter()
            .map(|x| {
                let q = matvec(x, &wq, d);
                let mut cat = vec![0.0; d];
                for h in 0..m.cfg.heads {
                    let r = h * db..(h + 1) * db;
                    let scores: Vec<f64> = ks
                        .iter()
                        .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / scale)
                        .collect();
                    let p = softmax(&scores);
                    for (pj, v) in p.iter().zip(&vs) {
                        for c in r.clone() {
                            cat[c] += pj * v[c];
                        }
                    }
                }
                matvec(&cat, &wo, d).iter().zip(&bo).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        let d = *t.shape().last().unwrap();
        t.data().chunks(d).map(|c| c.to_vec()).collect()
    }

    fn run_mha(store: &ParamStore, m: &MultiHeadAttention, q: &Tensor, kv: &Tensor) -> Tensor {
        let mut cx = Ctx::eval(store);
        let (qv, kvv) = (cx.constant(q.clone()), cx.constant(kv.clone()));
        let y = m.forward(&mut cx, qv, kvv).unwrap();
        cx.value(y).clone()
    }

    #[test]
    fn zero_query_averages_values() {
        let (mut store, m) = mha(1, 4, 2);
        m.zero_query(&mut store);
        let q = Tensor::randn(vec![1, 2, 4], 1.0, &mut rng(2));
        let kv = Tensor::randn(vec![1, 3, 4], 1.0, &mut rng(3));
        let mut cx = Ctx::eval(&store);
        let (qv, kvv) = (cx.constant(q), cx.constant(kv.clone()));
        let a = m.attend(&mut cx, qv, kvv).unwrap();
        for w in cx.value(a.weights).data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let wv = store.get(m.value.weight).data().to_vec();
        let vrows: Vec<_> = rows(&kv).iter().map(|x| matvec(x, &wv, 4)).collect();
        let mean: Vec<f64> = (0..4).map(|c| vrows.iter().map(|v| v[c]).sum::<f64>() / 3.0).collect();
        for row in rows(cx.value(a.heads)) {
            for c in 0..4 {
                assert!((row[c] - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let (store, m) = mha(4, 6, 3);
        let q = Tensor::randn(vec![2, 5, 6], 1.0, &mut rng(5));
        let kv = Tensor::randn(vec![2, 1, 6], 1.0, &mut rng(6));
        let mut cx = Ctx::eval(&store);
        let (qv, kvv) = (cx.constant(q), cx.constant(kv.clone()));
        let a = m.attend(&mut cx, qv, kvv).unwrap();
        let wv = store.get(m.value.weight).data().to_vec();
        let heads = cx.value(a.heads).clone();
        for b in 0..2 {
            let v = matvec(&kv.data()[b * 6..(b + 1) * 6], &wv, 6);
            for l in 0..5 {
                let off = (b * 5 + l) * 6;
                for (h, want) in heads.data()[off..off + 6].iter().zip(&v) {
                    assert!((h - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_token_hand_case() {
        let (mut store, mut m) = mha(0, 2, 1);
        m.cfg.scaled = true;
        set(&mut store, m.query.weight, vec![1.0, 0.0, 0.0, 1.0]);
        set(&mut store, m.key.weight, vec![2.0, 0.0, 0.0, 1.0]);
        set(&mut store, m.value.weight, vec![1.0, 0.0, 0.0, 1.0]);
        set(&mut store, m.output.weight, vec![1.0, 0.0, 0.0, 1.0]);
        set(&mut store, m.output.bias.unwrap(), vec![0.0, 0.0]);
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = run_mha(&store, &m, &x, &x);
        // Token 0: q=[1,0], keys [2,0],[0,1] → scores [2,0]/√2.
        let s = 2f64.sqrt();
        let p0 = 1.0 / (1.0 + (-2.0 / s).exp());
        // Token 1: q=[0,1] → scores [0,1]/√2.
        let p1 = 1.0 / (1.0 + (1.0 / s).exp());
        let want = [p0, 1.0 - p0, p1, 1.0 - p1];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        m.cfg.scaled = false;
        let y = run_mha(&store, &m, &x, &x);
        let p0 = 1.0 / (1.0 + (-2f64).exp());
        assert!((y.data()[0] - p0).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_evaluation() {
        for (seed, heads) in [(7, 1), (8, 2), (9, 4)] {
            let (store, m) = mha(seed, 8, heads);
            let q = Tensor::randn(vec![1, 3, 8], 1.0, &mut rng(seed + 10));
            let kv = Tensor::randn(vec![1, 4, 8], 1.0, &mut rng(seed + 20));
            let y = run_mha(&store, &m, &q, &kv);
            let want = oracle(&store, &m, &rows(&q), &rows(&kv));
            for (got, w) in rows(&y).iter().zip(&want) {
                for (a, b) in got.iter().zip(w) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_width_mismatch() {
        let (store, m) = mha(1, 4, 2);
        let mut cx = Ctx::eval(&store);
        let q = cx.constant(Tensor::zeros(vec![1, 2, 4]));
        let kv = cx.constant(Tensor::zeros(vec![1, 2, 3]));
        assert!(m.forward(&mut cx, q, kv).is_err());
    }

    #[test]
    fn rows_sum_to_one_and_output_in_value_hull() {
        let (store, m) = mha(11, 6, 2);
        let q = Tensor::randn(vec![2, 3, 6], 2.0, &mut rng(12));
        let kv = Tensor::randn(vec![2, 4, 6], 2.0, &mut rng(13));
        let mut cx = Ctx::eval(&store);
        let (qv, kvv) = (cx.constant(q), cx.constant(kv));
        let a = m.attend(&mut cx, qv, kvv).unwrap();
        for row in cx.value(a.weights).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let v = cx.value(a.values).clone();
        let heads = cx.value(a.heads).clone();
        for b in 0..2 {
            for h in 0..2 {
                for c in 0..3 {
                    let col: Vec<f64> = (0..4).map(|k| v.data()[((b * 2 + h) * 4 + k) * 3 + c]).collect();
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for l in 0..3 {
                        let o = heads.data()[(b * 3 + l) * 6 + h * 3 + c];
                        assert!(o >= lo - 1e-9 && o <= hi + 1e-9);
                    }
                }
            }
        }
    }

    fn block(seed: u64, width: usize) -> (ParamStore, SelfAttentionBlock) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let blk = SelfAttentionBlock::new(&mut Builder::new(&mut store, &mut r), "blk", AttentionConfig::new(width, 2));
        (store, blk)
    }

    fn run_block(store: &ParamStore, blk: &SelfAttentionBlock, x: &Tensor) -> Tensor {
        let mut cx = Ctx::eval(store);
        let xv = cx.constant(x.clone());
        let y = blk.forward(&mut cx, xv).unwrap();
        cx.value(y).clone()
    }

    #[test]
    fn zero_linears_give_double_norm() {
        let (mut store, blk) = block(3, 8);
        blk.zero_linears(&mut store);
        let x = Tensor::randn(vec![1, 3, 8], 1.5, &mut rng(4));
        let y = run_block(&store, &blk, &x);
        let norm = |r: &[f64]| -> Vec<f64> {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            let v = r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / r.len() as f64;
            r.iter().map(|a| (a - m) / (v + LAYER_NORM_EPS).sqrt()).collect()
        };
        for (got, row) in rows(&y).iter().zip(rows(&x)) {
            for (a, b) in got.iter().zip(norm(&norm(&row))) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let (store, blk) = block(5, 8);
        let x = Tensor::randn(vec![1, 3, 8], 1.0, &mut rng(6));
        let y = rows(&run_block(&store, &blk, &x));
        let perm = [2, 0, 1];
        let xr = rows(&x);
        let px: Vec<f64> = perm.iter().flat_map(|&i| xr[i].clone()).collect();
        let py = rows(&run_block(&store, &blk, &Tensor::new(vec![1, 3, 8], px).unwrap()));
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in py[k].iter().zip(&y[i]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn block_gradient_check() {
        let (mut store, blk) = block(7, 8);
        let x = store.add("input", Tensor::randn(vec![1, 3, 8], 1.0, &mut rng(8)));
        let report = grad_check_store(
            &store,
            |cx| {
                let xv = cx.param(x);
                let y = blk.forward(cx, xv)?;
                weighted_sum(cx, y)
            },
            1e-5,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    fn binm(seed: u64, shared: bool) -> (ParamStore, Binm) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let m = Binm::new(&mut Builder::new(&mut store, &mut r), "binm", AttentionConfig::new(4, 2), shared);
        (store, m)
    }

    #[test]
    fn binm_identical_branches_shared_params() {
        let (store, m) = binm(1, true);
        let x = Tensor::randn(vec![2, 2, 4], 1.0, &mut rng(2));
        let mut cx = Ctx::eval(&store);
        let (a, b) = (cx.constant(x.clone()), cx.constant(x));
        let (f1, f2) = m.forward(&mut cx, a, b).unwrap();
        assert_eq!(cx.value(f1), cx.value(f2));
    }

    #[test]
    fn binm_zero_query_adds_opposite_mean() {
        let (mut store, m) = binm(3, false);
        m.first.zero_query(&mut store);
        m.second_direction().zero_query(&mut store);
        let x1 = Tensor::randn(vec![1, 2, 4], 1.0, &mut rng(4));
        let x2 = Tensor::randn(vec![1, 3, 4], 1.0, &mut rng(5));
        let mut cx = Ctx::eval(&store);
        let (a, b) = (cx.constant(x1.clone()), cx.constant(x2.clone()));
        let (f1, f2) = m.forward(&mut cx, a, b).unwrap();
        let expect = |mh: &MultiHeadAttention, res: &Tensor, other: &Tensor| -> Vec<Vec<f64>> {
            let wv = store.get(mh.value.weight).data().to_vec();
            let wo = store.get(mh.output.weight).data().to_vec();
            let bo = store.get(mh.output.bias.unwrap()).data().to_vec();
            let vr: Vec<_> = rows(other).iter().map(|x| matvec(x, &wv, 4)).collect();
            let mean: Vec<f64> = (0..4).map(|c| vr.iter().map(|v| v[c]).sum::<f64>() / vr.len() as f64).collect();
            let o = matvec(&mean, &wo, 4);
            rows(res).iter().map(|r| (0..4).map(|c| r[c] + o[c] + bo[c]).collect()).collect()
        };
        for (got, want) in [(f1, expect(&m.first, &x1, &x2)), (f2, expect(m.second_direction(), &x2, &x1))] {
            for (g, w) in rows(cx.value(got)).iter().zip(&want) {
                for (a, b) in g.iter().zip(w) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn binm_matches_direct_evaluation_both_ways() {
        let (store, m) = binm(6, false);
        let x1 = Tensor::randn(vec![1, 2, 4], 1.0, &mut rng(7));
        let x2 = Tensor::randn(vec![1, 2, 4], 1.0, &mut rng(8));
        let mut cx = Ctx::eval(&store);
        let (a, b) = (cx.constant(x1.clone()), cx.constant(x2.clone()));
        let (f1, f2) = m.forward(&mut cx, a, b).unwrap();
        let want1 = oracle(&store, &m.first, &rows(&x1), &rows(&x2));
        let want2 = oracle(&store, m.second_direction(), &rows(&x2), &rows(&x1));
        for (f, x, want) in [(f1, &x1, want1), (f2, &x2, want2)] {
            for ((g, r), w) in rows(cx.value(f)).iter().zip(rows(x)).zip(&want) {
                for c in 0..4 {
                    assert!((g[c] - r[c] - w[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn binm_gradients_cross_branches() {
        let (mut store, m) = binm(9, false);
        let x1 = store.add("x1", Tensor::randn(vec![1, 2, 4], 1.0, &mut rng(10)));
        let x2 = store.add("x2", Tensor::randn(vec![1, 1, 4], 1.0, &mut rng(11)));
        for first in [true, false] {
            let mut cx = Ctx::eval(&store);
            let (a, b) = (cx.param(x1), cx.param(x2));
            let (f1, f2) = m.forward(&mut cx, a, b).unwrap();
            let loss = weighted_sum(&mut cx, if first { f1 } else { f2 }).unwrap();
            let grads = cx.backward(loss).unwrap();
            let other = if first { x2 } else { x1 };
            assert!(grads[other.index()].as_ref().unwrap().sq_norm() > 0.0);
        }
        let report = grad_check_store(
            &store,
            |cx| {
                let (a, b) = (cx.param(x1), cx.param(x2));
                let (f1, f2) = m.forward(cx, a, b)?;
                let l1 = weighted_sum(cx, f1)?;
                let l2 = weighted_sum(cx, f2)?;
                cx.graph.add(l1, l2)
            },
            1e-5,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
