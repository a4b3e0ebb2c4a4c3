//! The fine-tuning model: shared-learning and interactive-learning branches,
//! the dynamic expert selection module, the predictor head and the
//! asymmetric multi-label loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionConfig, AttentionStack, Binm};
use crate::codecs::{PseiConfig, PseiEncoder, PssiConfig, PssiEncoder, BCE_CLAMP};
use crate::nn::{stack_tokens, token, Builder, Ctx, Linear, Mlp, ParamStore};
use crate::tensor::{shape_err, Tensor, TensorError, Var};

/// Additive logit bias that removes an unselected expert from the softmax.
const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("gate threshold {0} is outside [0, 1]")]
    Threshold(f64),
    #[error("gate confidences must be a nonempty probability vector")]
    Confidences,
    #[error("incompatible pretrained groups: {}", .0.join(", "))]
    Incompatible(Vec<String>),
    #[error("configuration leaves the model without any feature channel")]
    NoChannels,
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Both,
    MslOnly,
    MilOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub branch: Branch,
    pub use_binm: bool,
    pub use_dsm: bool,
    pub use_spatial: bool,
    pub use_sequence: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { branch: Branch::Both, use_binm: true, use_dsm: true, use_spatial: true, use_sequence: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pssi: PssiConfig,
    pub psei: PseiConfig,
    pub terms: usize,
    pub heads: usize,
    pub msl_blocks: usize,
    pub expert_hidden: usize,
    pub expert_width: usize,
    pub predictor_hidden: usize,
    pub dropout: f64,
    /// Gate threshold; `None` means `1 / V`.
    pub threshold: Option<f64>,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(ppi_width: usize, attr_width: usize, seq_width: usize, terms: usize) -> Self {
        let mut pssi = PssiConfig::new(vec![ppi_width, attr_width]);
        let mut psei = PseiConfig::new(seq_width);
        pssi.dropout = 0.3;
        psei.dropout = 0.3;
        Self {
            pssi,
            psei,
            terms,
            heads: 4,
            msl_blocks: 2,
            expert_hidden: 64,
            expert_width: 32,
            predictor_hidden: 64,
            dropout: 0.3,
            threshold: None,
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            ablation: Ablation::default(),
        }
    }

    pub fn latent(&self) -> usize {
        self.pssi.latent
    }

    fn msl_channels(&self) -> usize {
        match self.ablation.branch {
            Branch::MilOnly => 0,
            _ => 2 * self.ablation.use_spatial as usize + self.ablation.use_sequence as usize,
        }
    }

    fn mil_channels(&self) -> usize {
        match self.ablation.branch {
            Branch::MslOnly => 0,
            _ => 2 * self.ablation.use_spatial as usize + self.ablation.use_sequence as usize,
        }
    }

    /// Number of feature channels entering the selection module.
    pub fn channels(&self) -> usize {
        self.msl_channels() + self.mil_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pssi.latent != self.psei.latent {
            return Err(shape_err("model config", "spatial and sequence latent widths differ").into());
        }
        if self.channels() == 0 {
            return Err(ModelError::NoChannels);
        }
        if !self.latent().is_multiple_of(self.heads) {
            return Err(shape_err(
                "model config",
                format!("latent {} not divisible by {} heads", self.latent(), self.heads),
            )
            .into());
        }
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(ModelError::Threshold(t));
            }
        }
        Ok(())
    }

    pub fn resolved_threshold(&self) -> f64 {
        self.threshold.unwrap_or(1.0 / self.channels() as f64)
    }
}

/// Outcome of thresholded expert selection for one protein.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub confidences: Vec<f64>,
    pub threshold: f64,
    /// Selected expert indices in ascending order.
    pub active: Vec<usize>,
    pub weights: Vec<f64>,
    /// True when no confidence reached the threshold and the top expert was used.
    pub fallback: bool,
}

/// Selects `S = {i : p̂_i ≥ t}`, falling back to the most confident expert
/// when `S` is empty, and renormalizes `p̂` over `S`.
pub fn select_experts(confidences: &[f64], threshold: f64) -> Result<GateDecision> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ModelError::Threshold(threshold));
    }
    if confidences.is_empty() || confidences.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(ModelError::Confidences);
    }
    let mut active: Vec<usize> = (0..confidences.len()).filter(|&i| confidences[i] >= threshold).collect();
    let fallback = active.is_empty();
    if fallback {
        let top = (0..confidences.len()).fold(0, |best, i| if confidences[i] > confidences[best] { i } else { best });
        active.push(top);
    }
    let total: f64 = active.iter().map(|&i| confidences[i]).sum();
    let mut weights = vec![0.0; confidences.len()];
    for &i in &active {
        weights[i] = if total > 0.0 { confidences[i] / total } else { 1.0 / active.len() as f64 };
    }
    Ok(GateDecision { confidences: confidences.to_vec(), threshold, active, weights, fallback })
}

/// Mean over all `N·M` entries of
/// `−y (1−p)^{γ⁺} log p − (1−y) p^{γ⁻} log(1−p)` with clamped `p`.
pub fn asymmetric_loss(cx: &mut Ctx<'_>, scores: Var, labels: Var, gamma_pos: f64, gamma_neg: f64) -> Result<Var> {
    let s = cx.shape(scores);
    if s != cx.shape(labels) {
        return Err(shape_err("asymmetric loss", format!("scores {s:?} vs labels {:?}", cx.shape(labels))).into());
    }
    let g = &mut cx.graph;
    let p = g.clamp(scores, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let neg_p = g.scale(p, -1.0);
    let q = g.add_scalar(neg_p, 1.0);
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;
    let neg_y = g.scale(labels, -1.0);
    let not_y = g.add_scalar(neg_y, 1.0);
    let mut pos = g.hadamard(labels, log_p)?;
    if gamma_pos != 0.0 {
        let focus = g.powf(q, gamma_pos)?;
        pos = g.hadamard(pos, focus)?;
    }
    let mut neg = g.hadamard(not_y, log_q)?;
    if gamma_neg != 0.0 {
        let focus = g.powf(p, gamma_neg)?;
        neg = g.hadamard(neg, focus)?;
    }
    let sum = g.add(pos, neg)?;
    let total = g.sum_all(sum);
    let n: usize = s.iter().product();
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Per-protein inputs: PPI rows, attribute rows and normalized sequence embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalInputs {
    pub ppi: Tensor,
    pub attributes: Tensor,
    pub sequence: Tensor,
}

impl ModalInputs {
    pub fn rows(&self) -> usize {
        self.ppi.shape()[0]
    }
}

/// Joint self-attention over the per-modality projections, in channel order
/// `[PPI, Seq, Attr]`.
#[derive(Debug, Clone)]
pub struct MslBranch {
    pub ppi: Option<Mlp>,
    pub seq: Option<Mlp>,
    pub attr: Option<Mlp>,
    pub stack: AttentionStack,
}

impl MslBranch {
    fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Self {
        let d = cfg.latent();
        let a = cfg.ablation;
        b.scoped("msl", |b| Self {
            ppi: a.use_spatial.then(|| Mlp::new(b, "mlp_ppi", d, d, d)),
            seq: a.use_sequence.then(|| Mlp::new(b, "mlp_seq", d, d, d)),
            attr: a.use_spatial.then(|| Mlp::new(b, "mlp_attr", d, d, d)),
            stack: AttentionStack::new(b, "attn", AttentionConfig::new(d, cfg.heads), cfg.msl_blocks),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, lat: &Latents) -> Result<Var> {
        let mut tokens = Vec::new();
        for (mlp, x) in [(&self.ppi, lat.ppi), (&self.seq, lat.seq), (&self.attr, lat.attr)] {
            if let (Some(mlp), Some(x)) = (mlp, x) {
                tokens.push(mlp.forward(cx, x)?);
            }
        }
        let seq = stack_tokens(cx, &tokens)?;
        Ok(self.stack.forward(cx, seq)?)
    }
}

/// Cross-attention between the spatial tokens `[PPI, Attr]` and the sequence
/// token, re-assembled as channels `[PPI, Seq, Attr]`.
#[derive(Debug, Clone)]
pub struct MilBranch {
    pub ppi: Option<Mlp>,
    pub attr: Option<Mlp>,
    pub seq: Option<Mlp>,
    pub binm: Option<Binm>,
}

impl MilBranch {
    fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Self {
        let d = cfg.latent();
        let a = cfg.ablation;
        b.scoped("mil", |b| Self {
            ppi: a.use_spatial.then(|| Mlp::new(b, "mlp_ppi", d, d, d)),
            attr: a.use_spatial.then(|| Mlp::new(b, "mlp_attr", d, d, d)),
            seq: a.use_sequence.then(|| Mlp::new(b, "mlp_seq", d, d, d)),
            binm: (a.use_binm && a.use_spatial && a.use_sequence)
                .then(|| Binm::new(b, "binm", AttentionConfig::new(d, cfg.heads), false)),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, lat: &Latents) -> Result<Var> {
        let mut spatial = Vec::new();
        for (mlp, x) in [(&self.ppi, lat.ppi), (&self.attr, lat.attr)] {
            if let (Some(mlp), Some(x)) = (mlp, x) {
                spatial.push(mlp.forward(cx, x)?);
            }
        }
        let seq = match (&self.seq, lat.seq) {
            (Some(mlp), Some(x)) => Some(mlp.forward(cx, x)?),
            _ => None,
        };
        let channels = match (&self.binm, seq) {
            (Some(binm), Some(s)) => {
                let a = stack_tokens(cx, &spatial)?;
                let b = stack_tokens(cx, &[s])?;
                let (fa, fb) = binm.forward(cx, a, b)?;
                let a0 = token(cx, fa, 0)?;
                let a1 = token(cx, fa, 1)?;
                let b0 = token(cx, fb, 0)?;
                vec![a0, b0, a1]
            }
            _ => {
                let mut c = Vec::new();
                if let Some(&p) = spatial.first() {
                    c.push(p);
                }
                c.extend(seq);
                c.extend(spatial.get(1).copied());
                c
            }
        };
        Ok(stack_tokens(cx, &channels)?)
    }
}

/// Confidence gate plus one expert per channel over the flattened feature map.
#[derive(Debug, Clone)]
pub struct Dsm {
    pub gate: Mlp,
    pub experts: Vec<Mlp>,
}

impl Dsm {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Self {
        let v = cfg.channels();
        let flat = v * cfg.latent();
        b.scoped("dsm", |b| Self {
            gate: Mlp::new(b, "gate", flat, cfg.expert_hidden, v),
            experts: (0..v)
                .map(|i| Mlp::new(b, &format!("expert{i}"), flat, cfg.expert_hidden, cfg.expert_width))
                .collect(),
        })
    }

    /// Returns the `[B, V·De]` fused vector and the per-protein decisions.
    pub fn forward(&self, cx: &mut Ctx<'_>, flat: Var, threshold: f64) -> Result<(Var, Vec<GateDecision>)> {
        let logits = self.gate.forward(cx, flat)?;
        let p_hat = cx.graph.softmax(logits, 1)?;
        let v = self.experts.len();
        let batch = cx.shape(flat)[0];
        let p = cx.value(p_hat).clone();
        let decisions = p.data().chunks(v).map(|row| select_experts(row, threshold)).collect::<Result<Vec<_>>>()?;
        let mut mask = vec![MASKED_LOGIT; batch * v];
        for (b, d) in decisions.iter().enumerate() {
            for &i in &d.active {
                mask[b * v + i] = 0.0;
            }
        }
        let mask = cx.constant(Tensor::new(vec![batch, v], mask)?);
        let masked = cx.graph.add(logits, mask)?;
        let w = cx.graph.softmax(masked, 1)?;
        let w = cx.graph.reshape(w, &[batch, v, 1])?;
        let mut outs = Vec::with_capacity(v);
        for e in &self.experts {
            outs.push(e.forward(cx, flat)?);
        }
        let stacked = stack_tokens(cx, &outs)?;
        let weighted = cx.graph.hadamard(stacked, w)?;
        let de = cx.shape(weighted)[2];
        let fused = cx.graph.reshape(weighted, &[batch, v * de])?;
        Ok((fused, decisions))
    }
}

/// `Linear -> SiLU -> dropout -> Linear -> sigmoid`.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Predictor {
    fn new(b: &mut Builder<'_>, in_dim: usize, hidden: usize, terms: usize, dropout: f64) -> Self {
        b.scoped("predictor", |b| Self {
            fc1: Linear::new(b, "fc1", in_dim, hidden),
            fc2: Linear::new(b, "fc2", hidden, terms),
            dropout,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.graph.silu(h);
        let h = cx.dropout(h, self.dropout)?;
        let logits = self.fc2.forward(cx, h)?;
        Ok(cx.graph.sigmoid(logits))
    }
}

/// Per-modality latents from the pretrained encoders.
#[derive(Debug, Clone, Copy)]
pub struct Latents {
    pub ppi: Option<Var>,
    pub attr: Option<Var>,
    pub seq: Option<Var>,
}

/// Graph handles for every intermediate representation of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub latents: Latents,
    pub msl: Option<Var>,
    pub mil: Option<Var>,
    /// `[B, V, D]` feature map entering the selection module.
    pub x_dsm: Var,
    /// Predictor input.
    pub fused: Var,
    pub scores: Var,
    pub gates: Vec<GateDecision>,
}

#[derive(Debug, Clone)]
pub struct Dsrpgo {
    pub cfg: ModelConfig,
    pub pssi: Option<PssiEncoder>,
    pub psei: Option<PseiEncoder>,
    pub msl: Option<MslBranch>,
    pub mil: Option<MilBranch>,
    pub dsm: Option<Dsm>,
    pub predictor: Predictor,
}

impl Dsrpgo {
    pub fn new(b: &mut Builder<'_>, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let a = cfg.ablation;
        let pssi = a.use_spatial.then(|| b.scoped("pssi", |b| PssiEncoder::new(b, "enc", &cfg.pssi)));
        let psei = a.use_sequence.then(|| b.scoped("psei", |b| PseiEncoder::new(b, "enc", &cfg.psei)));
        let msl = (cfg.msl_channels() > 0).then(|| MslBranch::new(b, &cfg));
        let mil = (cfg.mil_channels() > 0).then(|| MilBranch::new(b, &cfg));
        let dsm = a.use_dsm.then(|| Dsm::new(b, &cfg));
        let width = if a.use_dsm { cfg.channels() * cfg.expert_width } else { cfg.channels() * cfg.latent() };
        let predictor = Predictor::new(b, width, cfg.predictor_hidden, cfg.terms, cfg.dropout);
        Ok(Self { cfg, pssi, psei, msl, mil, dsm, predictor })
    }

    /// Builds a fresh model and its parameter store from a seed.
    pub fn init(cfg: ModelConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut Builder::new(&mut store, rng), cfg)?;
        Ok((store, model))
    }

    pub fn latents(&self, cx: &mut Ctx<'_>, inputs: &ModalInputs) -> Result<Latents> {
        let (ppi, attr) = match &self.pssi {
            Some(enc) => {
                let p = cx.constant(inputs.ppi.clone());
                let a = cx.constant(inputs.attributes.clone());
                let z = enc.encode(cx, &[p, a], &self.cfg.pssi)?;
                (Some(z[0]), Some(z[1]))
            }
            None => (None, None),
        };
        let seq = match &self.psei {
            Some(enc) => {
                let s = cx.constant(inputs.sequence.clone());
                Some(enc.encode(cx, s, &self.cfg.psei)?)
            }
            None => None,
        };
        Ok(Latents { ppi, attr, seq })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, inputs: &ModalInputs) -> Result<ModelOutput> {
        let latents = self.latents(cx, inputs)?;
        let msl = self.msl.as_ref().map(|m| m.forward(cx, &latents)).transpose()?;
        let mil = self.mil.as_ref().map(|m| m.forward(cx, &latents)).transpose()?;
        let parts: Vec<Var> = msl.iter().chain(mil.iter()).copied().collect();
        let x_dsm = if parts.len() == 1 { parts[0] } else { cx.graph.concat(&parts, 1)? };
        let batch = inputs.rows();
        let flat = cx.graph.reshape(x_dsm, &[batch, self.cfg.channels() * self.cfg.latent()])?;
        let (fused, gates) = match &self.dsm {
            Some(dsm) => dsm.forward(cx, flat, self.cfg.resolved_threshold())?,
            None => (flat, Vec::new()),
        };
        let scores = self.predictor.forward(cx, fused)?;
        Ok(ModelOutput { latents, msl, mil, x_dsm, fused, scores, gates })
    }

    pub fn loss(&self, cx: &mut Ctx<'_>, inputs: &ModalInputs, labels: &Tensor) -> Result<(Var, ModelOutput)> {
        let out = self.forward(cx, inputs)?;
        let y = cx.constant(labels.clone());
        let loss = asymmetric_loss(cx, out.scores, y, self.cfg.gamma_pos, self.cfg.gamma_neg)?;
        Ok((loss, out))
    }

    /// Evaluation-mode scores.
    pub fn predict(&self, store: &ParamStore, inputs: &ModalInputs) -> Result<Tensor> {
        let mut cx = Ctx::eval(store);
        let out = self.forward(&mut cx, inputs)?;
        Ok(cx.value(out.scores).clone())
    }
}

/// Which parameter groups came from pretraining and which were freshly initialized.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadManifest {
    pub loaded: Vec<String>,
    pub fresh: Vec<String>,
}

/// Copies `pssi.enc.*` groups from `pssi` and `psei.enc.*` groups from
/// `psei` into `store`. Absent checkpoints leave their groups fresh.
pub fn load_pretrained(
    store: &mut ParamStore,
    pssi: Option<&ParamStore>,
    psei: Option<&ParamStore>,
) -> Result<LoadManifest> {
    let mut manifest = LoadManifest::default();
    let mut incompatible = Vec::new();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut updates = Vec::new();
    for name in names {
        let source = if name.starts_with("pssi.enc.") {
            pssi
        } else if name.starts_with("psei.enc.") {
            psei
        } else {
            None
        };
        let Some(t) = source.and_then(|s| s.by_name(&name)) else {
            manifest.fresh.push(name);
            continue;
        };
        let current = store.by_name(&name).expect("name taken from store");
        if t.shape() != current.shape() {
            incompatible.push(format!("{name} {:?} vs {:?}", t.shape(), current.shape()));
            continue;
        }
        updates.push((name.clone(), t.clone()));
        manifest.loaded.push(name);
    }
    if !incompatible.is_empty() {
        return Err(ModelError::Incompatible(incompatible));
    }
    for (name, t) in updates {
        *store.by_name_mut(&name).expect("name taken from store") = t;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codecs::{Psei, Pssi};
    use crate::nn::grad_check_store;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn alg1_hand_cases() {
        let d = select_experts(&[0.7, 0.2, 0.1], 0.5).unwrap();
        assert_eq!((d.active.clone(), d.weights.clone(), d.fallback), (vec![0], vec![1.0, 0.0, 0.0], false));
        let d = select_experts(&[0.5, 0.3, 0.2], 0.25).unwrap();
        assert_eq!(d.active, vec![0, 1]);
        assert_eq!(d.weights, vec![0.5 / 0.8, 0.3 / 0.8, 0.0]);
        assert!(close(&d.weights, &[0.625, 0.375, 0.0], 1e-15));
        let p = [0.45, 0.35, 0.2];
        let d = select_experts(&p, 0.0).unwrap();
        assert_eq!(d.active, vec![0, 1, 2]);
        assert!(close(&d.weights, &p, 1e-15));
        let d = select_experts(&[0.4, 0.35, 0.25], 0.5).unwrap();
        assert!(d.fallback);
        assert_eq!((d.active, d.weights), (vec![0], vec![1.0, 0.0, 0.0]));
    }

    #[test]
    fn threshold_out_of_range() {
        assert!(matches!(select_experts(&[1.0], 1.5), Err(ModelError::Threshold(_))));
        assert!(matches!(select_experts(&[1.0], -0.1), Err(ModelError::Threshold(_))));
        assert!(matches!(select_experts(&[], 0.5), Err(ModelError::Confidences)));
    }

    fn softmax(xs: &[f64]) -> Vec<f64> {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn gate_invariants_on_random_outputs() {
        let mut r = rng(0);
        for _ in 0..10_000 {
            let logits: Vec<f64> = (0..6).map(|_| r.random_range(-3.0..3.0)).collect();
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let (t1, t2): (f64, f64) = (r.random(), r.random());
            let (lo, hi) = (t1.min(t2) * 0.5, t1.max(t2) * 0.5);
            let a = select_experts(&p, lo).unwrap();
            let b = select_experts(&p, hi).unwrap();
            for d in [&a, &b] {
                assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (i, w) in d.weights.iter().enumerate() {
                    assert!(*w >= 0.0);
                    assert!(d.active.contains(&i) || *w == 0.0);
                }
            }
            if !b.fallback {
                assert!(b.active.iter().all(|i| a.active.contains(i)));
            }
            let shift = r.random_range(-50.0..50.0);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let c = select_experts(&softmax(&shifted), lo).unwrap();
            assert_eq!(c.active, a.active);
            assert!(close(&c.weights, &a.weights, 1e-9));
        }
    }

    fn loss_of(p: &[f64], y: &[f64], gp: f64, gn: f64) -> f64 {
        let store = ParamStore::new();
        let mut cx = Ctx::eval(&store);
        let n = p.len();
        let pv = cx.constant(Tensor::new(vec![1, n], p.to_vec()).unwrap());
        let yv = cx.constant(Tensor::new(vec![1, n], y.to_vec()).unwrap());
        let l = asymmetric_loss(&mut cx, pv, yv, gp, gn).unwrap();
        cx.value(l).item()
    }

    #[test]
    fn asymmetric_loss_hand_values() {
        assert!((loss_of(&[0.5], &[1.0], 0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((loss_of(&[0.5], &[1.0], 2.0, 0.0) - 0.173287).abs() < 1e-6);
        assert!((loss_of(&[0.5], &[1.0], 2.0, 0.0) - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!(loss_of(&[1.0 - 1e-9], &[1.0], 0.0, 4.0) < 1e-6);
        let direct = -(0.3f64.powi(4)) * 0.7f64.ln();
        assert!((loss_of(&[0.3], &[0.0], 0.0, 4.0) - direct).abs() < 1e-15);
    }

    #[test]
    fn asymmetric_loss_reduces_to_bce() {
        let mut r = rng(3);
        for _ in 0..50 {
            let p: Vec<f64> = (0..12).map(|_| r.random_range(0.01..0.99)).collect();
            let y: Vec<f64> = (0..12).map(|_| (r.random::<f64>() < 0.5) as u8 as f64).collect();
            let bce: f64 =
                p.iter().zip(&y).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / 12.0;
            assert!((loss_of(&p, &y, 0.0, 0.0) - bce).abs() < 1e-12);
        }
    }

    pub(crate) fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(6, 5, 8, 4);
        cfg.pssi.latent = 8;
        cfg.pssi.token_width = 4;
        cfg.pssi.state = 2;
        cfg.psei.latent = 8;
        cfg.psei.token_width = 4;
        cfg.psei.blocks = 1;
        cfg.heads = 2;
        cfg.msl_blocks = 1;
        cfg.expert_hidden = 8;
        cfg.expert_width = 4;
        cfg.predictor_hidden = 8;
        cfg
    }

    pub(crate) fn tiny_inputs(n: usize, seed: u64) -> (ModalInputs, Tensor) {
        let mut r = rng(seed);
        let bin =
            |shape: Vec<usize>, r: &mut ChaCha8Rng| Tensor::uniform(shape, 0.0, 1.0, r).map(|v| (v < 0.4) as u8 as f64);
        let inputs = ModalInputs {
            ppi: bin(vec![n, 6], &mut r),
            attributes: bin(vec![n, 5], &mut r),
            sequence: Tensor::uniform(vec![n, 8], 0.0, 1.0, &mut r),
        };
        let labels = bin(vec![n, 4], &mut r);
        (inputs, labels)
    }

    fn model(cfg: ModelConfig, seed: u64) -> (ParamStore, Dsrpgo) {
        Dsrpgo::init(cfg, &mut rng(seed)).unwrap()
    }

    #[test]
    fn output_shapes_and_gate_invariants() {
        let (store, m) = model(tiny_config(), 1);
        let (x, _) = tiny_inputs(3, 2);
        let mut cx = Ctx::eval(&store);
        let out = m.forward(&mut cx, &x).unwrap();
        assert_eq!(cx.shape(out.msl.unwrap()), vec![3, 3, 8]);
        assert_eq!(cx.shape(out.mil.unwrap()), vec![3, 3, 8]);
        assert_eq!(cx.shape(out.x_dsm), vec![3, 6, 8]);
        assert_eq!(cx.shape(out.fused), vec![3, 24]);
        assert_eq!(cx.shape(out.scores), vec![3, 4]);
        assert!(cx.value(out.scores).data().iter().all(|&s| s > 0.0 && s < 1.0));
        assert_eq!(out.gates.len(), 3);
        let fused = cx.value(out.fused).clone();
        for (b, g) in out.gates.iter().enumerate() {
            assert!((g.confidences.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(g.threshold, 1.0 / 6.0);
            for e in 0..6 {
                let block = &fused.data()[b * 24 + e * 4..b * 24 + e * 4 + 4];
                if !g.active.contains(&e) {
                    assert!(block.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_predictor_gives_half() {
        let (mut store, m) = model(tiny_config(), 1);
        m.predictor.fc2.zero(&mut store);
        let (x, _) = tiny_inputs(2, 3);
        assert!(m.predict(&store, &x).unwrap().data().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn eval_is_deterministic() {
        let (store, m) = model(tiny_config(), 4);
        let (x, _) = tiny_inputs(3, 5);
        assert_eq!(m.predict(&store, &x).unwrap(), m.predict(&store, &x).unwrap());
    }

    #[test]
    fn msl_permutation_equivariance() {
        let (store, m) = model(tiny_config(), 6);
        let msl = m.msl.as_ref().unwrap();
        let mut r = rng(7);
        let zs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(vec![2, 8], 1.0, &mut r)).collect();
        let run = |order: [usize; 3]| {
            let mut cx = Ctx::eval(&store);
            let v: Vec<Var> = zs.iter().map(|z| cx.constant(z.clone())).collect();
            let mlps = [msl.ppi.as_ref().unwrap(), msl.seq.as_ref().unwrap(), msl.attr.as_ref().unwrap()];
            let projected: Vec<Var> = (0..3).map(|i| mlps[i].forward(&mut cx, v[i]).unwrap()).collect();
            let ordered: Vec<Var> = order.iter().map(|&i| projected[i]).collect();
            let seq = stack_tokens(&mut cx, &ordered).unwrap();
            let y = msl.stack.forward(&mut cx, seq).unwrap();
            cx.value(y).clone()
        };
        let base = run([0, 1, 2]);
        let perm = run([2, 0, 1]);
        for b in 0..2 {
            for (k, i) in [2usize, 0, 1].into_iter().enumerate() {
                let a = &perm.data()[(b * 3 + k) * 8..(b * 3 + k + 1) * 8];
                let e = &base.data()[(b * 3 + i) * 8..(b * 3 + i + 1) * 8];
                assert!(close(a, e, 1e-9));
            }
        }
    }

    #[test]
    fn mil_zero_outputs_return_projections() {
        let (mut store, m) = model(tiny_config(), 8);
        let mil = m.mil.as_ref().unwrap();
        mil.binm.as_ref().unwrap().zero_outputs(&mut store);
        let (x, _) = tiny_inputs(2, 9);
        let mut cx = Ctx::eval(&store);
        let lat = m.latents(&mut cx, &x).unwrap();
        let ch = mil.forward(&mut cx, &lat).unwrap();
        let p = mil.ppi.as_ref().unwrap().forward(&mut cx, lat.ppi.unwrap()).unwrap();
        let s = mil.seq.as_ref().unwrap().forward(&mut cx, lat.seq.unwrap()).unwrap();
        let a = mil.attr.as_ref().unwrap().forward(&mut cx, lat.attr.unwrap()).unwrap();
        let want = stack_tokens(&mut cx, &[p, s, a]).unwrap();
        assert_eq!(cx.value(ch), cx.value(want));
    }

    #[test]
    fn gradients_reach_all_pathways() {
        let (store, m) = model(tiny_config(), 10);
        let (x, _) = tiny_inputs(2, 11);
        let mut cx = Ctx::eval(&store);
        let lat = m.latents(&mut cx, &x).unwrap();
        let msl = m.msl.as_ref().unwrap().forward(&mut cx, &lat).unwrap();
        let l = crate::nn::weighted_sum(&mut cx, msl).unwrap();
        let g = cx.backward(l).unwrap();
        let norm = |prefix: &str| -> f64 {
            store
                .ids()
                .filter(|&id| store.name(id).starts_with(prefix))
                .map(|id| g[id.index()].as_ref().map_or(0.0, |t| t.sq_norm()))
                .sum()
        };
        for p in ["msl.mlp_ppi", "msl.mlp_seq", "msl.mlp_attr", "pssi.enc.src0", "pssi.enc.src1", "psei.enc"] {
            assert!(norm(p) > 0.0, "{p}");
        }

        let mut cx = Ctx::eval(&store);
        let lat = m.latents(&mut cx, &x).unwrap();
        let mil = m.mil.as_ref().unwrap().forward(&mut cx, &lat).unwrap();
        let seq_channel = token(&mut cx, mil, 1).unwrap();
        let l = crate::nn::weighted_sum(&mut cx, seq_channel).unwrap();
        let g = cx.backward(l).unwrap();
        let norm = |prefix: &str| -> f64 {
            store
                .ids()
                .filter(|&id| store.name(id).starts_with(prefix))
                .map(|id| g[id.index()].as_ref().map_or(0.0, |t| t.sq_norm()))
                .sum()
        };
        assert!(norm("mil.mlp_ppi") > 0.0);
    }

    #[test]
    fn full_model_gradient_check() {
        let mut cfg = tiny_config();
        cfg.gamma_pos = 1.0;
        cfg.threshold = Some(0.0);
        let (store, m) = model(cfg, 12);
        let (x, y) = tiny_inputs(2, 13);
        let report = grad_check_store(
            &store,
            |cx| {
                Ok(m.loss(cx, &x, &y)
                    .map_err(|e| match e {
                        ModelError::Tensor(t) => t,
                        other => panic!("{other}"),
                    })?
                    .0)
            },
            1e-5,
            1e-3,
            1,
        )
        .unwrap();
        let checked: usize = report.inputs.iter().map(|c| c.checked).sum();
        assert!(checked >= 100, "{checked}");
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn ablation_channel_counts() {
        let mut cfg = tiny_config();
        for (branch, v) in [(Branch::Both, 6), (Branch::MslOnly, 3), (Branch::MilOnly, 3)] {
            cfg.ablation.branch = branch;
            assert_eq!(cfg.channels(), v);
        }
        cfg.ablation = Ablation { use_spatial: false, ..Ablation::default() };
        assert_eq!(cfg.channels(), 2);
        cfg.ablation = Ablation { use_sequence: false, ..Ablation::default() };
        assert_eq!(cfg.channels(), 4);
        cfg.ablation = Ablation { use_spatial: false, use_sequence: false, ..Ablation::default() };
        assert!(matches!(cfg.validate(), Err(ModelError::NoChannels)));
    }

    #[test]
    fn every_ablation_runs() {
        let variants = [
            Ablation { branch: Branch::MslOnly, ..Ablation::default() },
            Ablation { branch: Branch::MilOnly, ..Ablation::default() },
            Ablation { use_binm: false, ..Ablation::default() },
            Ablation { use_dsm: false, ..Ablation::default() },
            Ablation { use_spatial: false, ..Ablation::default() },
            Ablation { use_sequence: false, ..Ablation::default() },
        ];
        let (x, y) = tiny_inputs(3, 14);
        for a in variants {
            let mut cfg = tiny_config();
            cfg.ablation = a;
            let (store, m) = model(cfg, 15);
            let mut cx = Ctx::eval(&store);
            let (l, out) = m.loss(&mut cx, &x, &y).unwrap();
            assert!(cx.value(l).item().is_finite());
            assert_eq!(cx.shape(out.scores), vec![3, 4]);
        }
    }

    #[test]
    fn load_pretrained_copies_encoder_groups() {
        let cfg = tiny_config();
        let mut r = rng(16);
        let mut pssi_store = ParamStore::new();
        Pssi::new(&mut Builder::new(&mut pssi_store, &mut r), cfg.pssi.clone());
        let mut psei_store = ParamStore::new();
        Psei::new(&mut Builder::new(&mut psei_store, &mut r), cfg.psei.clone());
        let (mut store, _) = model(cfg.clone(), 17);
        let manifest = load_pretrained(&mut store, Some(&pssi_store), Some(&psei_store)).unwrap();
        assert!(manifest.loaded.len() >= 2 && manifest.fresh.len() >= 3);
        for name in &manifest.loaded {
            let src = if name.starts_with("pssi") { &pssi_store } else { &psei_store };
            assert_eq!(store.by_name(name), src.by_name(name));
        }
        assert!(manifest.fresh.iter().all(|n| !n.starts_with("pssi.enc.") && !n.starts_with("psei.enc.")));

        let mut wide = cfg.clone();
        wide.pssi.source_widths = vec![7, 5];
        let mut bad = ParamStore::new();
        Pssi::new(&mut Builder::new(&mut bad, &mut r), wide.pssi);
        let err = load_pretrained(&mut store, Some(&bad), None).unwrap_err();
        assert!(err.to_string().contains("pssi.enc.src0.mlp.fc1.weight"), "{err}");
    }
}
