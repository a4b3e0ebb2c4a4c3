//! Optimization: AdamW, two-stage learning-rate schedules, reconstructive
//! pretraining of both codecs and fine-tuning of the full model with
//! best-checkpoint retention and exact resumption.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{fingerprint, Checkpoint, CheckpointError, RngState};
use crate::codecs::{Psei, PseiConfig, Pssi, PssiConfig};
use crate::data::{ProteinDataset, Split};
use crate::metrics::{EvalReport, MetricError};
use crate::model::{load_pretrained, Dsrpgo, LoadManifest, ModelConfig, ModelError};
use crate::nn::{Builder, Ctx, ParamStore};
use crate::tensor::{Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("gradient of {0} is not finite")]
    NanGradient(String),
    #[error("loss diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub phase: Phase,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub dropout: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
}

impl Schedule {
    /// 100 + 100 epochs at 3e-3 then 3e-4, dropout 0.1.
    pub fn pretrain_default() -> Self {
        Self {
            phase: Phase::Pretrain,
            stage1_epochs: 100,
            stage1_lr: 3e-3,
            stage2_epochs: 100,
            stage2_lr: 3e-4,
            dropout: 0.1,
            batch_size: None,
            weight_decay: 0.0,
            seed: 0,
            max_grad_norm: None,
        }
    }

    /// 50 + 50 epochs at 1e-3 then 1e-4, dropout 0.3.
    pub fn finetune_default() -> Self {
        Self {
            phase: Phase::Finetune,
            stage1_epochs: 50,
            stage1_lr: 1e-3,
            stage2_epochs: 50,
            stage2_lr: 1e-4,
            dropout: 0.3,
            batch_size: None,
            weight_decay: 0.01,
            seed: 0,
            max_grad_norm: None,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// Learning rate of zero-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.stage1_epochs {
            self.stage1_lr
        } else {
            self.stage2_lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(TrainError::Schedule(s));
        if !(self.stage1_lr >= 0.0 && self.stage2_lr >= 0.0) {
            return bad("learning rates must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be nonnegative".into());
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay: `p ← p(1 − lr·λ)` then the
/// bias-corrected moment step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros = |p: &ParamStore| {
            let mut s = ParamStore::new();
            for (name, t) in p.iter() {
                s.add(name.to_string(), Tensor::zeros(t.shape().to_vec()));
            }
            s
        };
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(params), v: zeros(params) }
    }

    /// Updates every parameter that has a gradient. Parameters without one
    /// are left untouched, moments included. Nothing is modified when any
    /// gradient is non-finite.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        for id in params.ids() {
            if grads[id.index()].as_ref().is_some_and(|g| !g.is_finite()) {
                return Err(TrainError::NanGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for id in params.ids() {
            let Some(g) = &grads[id.index()] else { continue };
            let decay = 1.0 - lr * self.weight_decay;
            let p = params.get_mut(id).data_mut();
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *p *= decay;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    fn write_groups(&self, out: &mut ParamStore) {
        for (name, t) in self.params.iter() {
            out.add(name.to_string(), t.clone());
        }
        for (prefix, s) in [("adam.m", &self.opt.m), ("adam.v", &self.opt.v)] {
            for (name, t) in s.iter() {
                out.add(format!("{prefix}.{name}"), t.clone());
            }
        }
    }

    fn fill_header(&self, ckpt: &mut Checkpoint) {
        ckpt.header.epoch = self.epoch;
        ckpt.header.optimizer_step = self.opt.step;
        ckpt.header.rng = Some(RngState::capture(&self.rng));
    }

    /// Restores parameters and moments into stores laid out like `template`.
    fn restore(ckpt: &Checkpoint, mut params: ParamStore, weight_decay: f64) -> Result<Self> {
        let missing = |n: &str| CheckpointError::Header(format!("missing group {n}"));
        let mut opt = AdamW::new(&params, weight_decay);
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let get = |n: &str| ckpt.groups.by_name(n).cloned().ok_or_else(|| missing(n));
            *params.by_name_mut(name).expect("own name") = get(name)?;
            *opt.m.by_name_mut(name).expect("own name") = get(&format!("adam.m.{name}"))?;
            *opt.v.by_name_mut(name).expect("own name") = get(&format!("adam.v.{name}"))?;
        }
        opt.step = ckpt.header.optimizer_step;
        let rng =
            ckpt.header.rng.as_ref().ok_or_else(|| CheckpointError::Header("missing rng state".into()))?.restore()?;
        Ok(Self { params, opt, rng, epoch: ckpt.header.epoch })
    }
}

fn batches(rows: &[usize], schedule: &Schedule, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    match schedule.batch_size {
        Some(b) if b < rows.len() => {
            let mut order = rows.to_vec();
            order.shuffle(rng);
            order.chunks(b).map(<[usize]>::to_vec).collect()
        }
        _ => vec![rows.to_vec()],
    }
}

fn clip(grads: &mut [Option<Tensor>], max_norm: f64) {
    let norm = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = g.map(|v| v * s);
        }
    }
}

/// Parameter magnitude treated as a blown-up run. Far beyond anything a
/// healthy model reaches, well before `exp` overflows in the forward pass.
const RUNAWAY: f64 = 1e100;

type BatchLoss<'f, E> = dyn Fn(&mut Ctx<'_>, &[usize]) -> Result<Var, E> + 'f;

/// One pass over `rows` in (possibly shuffled) batches; returns the mean batch loss.
fn train_epoch<E: From<TensorError> + From<TrainError>>(
    state: &mut TrainState,
    schedule: &Schedule,
    rows: &[usize],
    loss_fn: &BatchLoss<'_, E>,
) -> Result<f64, E> {
    let lr = schedule.lr_at(state.epoch);
    let plan = batches(rows, schedule, &mut state.rng);
    let mut total = 0.0;
    for batch in &plan {
        let (loss, mut grads) = {
            let mut cx = Ctx::train(&state.params, &mut state.rng);
            let l = loss_fn(&mut cx, batch)?;
            let value = cx.value(l).item();
            if !value.is_finite() {
                return Err(TrainError::Divergence { epoch: state.epoch }.into());
            }
            (value, cx.backward(l)?)
        };
        if let Some(max) = schedule.max_grad_norm {
            clip(&mut grads, max);
        }
        state.opt.update(&mut state.params, &grads, lr)?;
        if state.params.iter().any(|(_, t)| t.data().iter().any(|p| !(p.abs() < RUNAWAY))) {
            return Err(TrainError::Divergence { epoch: state.epoch }.into());
        }
        total += loss;
    }
    state.epoch += 1;
    Ok(total / plan.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Evaluation-mode loss over the whole corpus after the epoch.
    pub eval_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Pssi,
    Psei,
}

impl CodecKind {
    pub fn name(self) -> &'static str {
        match self {
            CodecKind::Pssi => "pssi",
            CodecKind::Psei => "psei",
        }
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Codec {
    Pssi(Pssi),
    Psei(Psei),
}

impl Codec {
    fn loss(&self, cx: &mut Ctx<'_>, inputs: &CodecInputs) -> Result<Var, TensorError> {
        match (self, inputs) {
            (Codec::Pssi(m), CodecInputs::Pssi(ppi, attr)) => {
                let a = cx.constant(ppi.clone());
                let b = cx.constant(attr.clone());
                m.loss(cx, &[a, b])
            }
            (Codec::Psei(m), CodecInputs::Psei(seq)) => {
                let s = cx.constant(seq.clone());
                m.loss(cx, s)
            }
            _ => unreachable!("inputs are built for the codec kind"),
        }
    }
}

enum CodecInputs {
    Pssi(Tensor, Tensor),
    Psei(Tensor),
}

fn codec_inputs(kind: CodecKind, ds: &ProteinDataset, rows: &[usize]) -> CodecInputs {
    let x = ds.inputs(rows);
    match kind {
        CodecKind::Pssi => CodecInputs::Pssi(x.ppi, x.attributes),
        CodecKind::Psei => CodecInputs::Psei(x.sequence),
    }
}

/// Configuration of one pretraining run; its fingerprint guards resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub kind: CodecKind,
    pub pssi: PssiConfig,
    pub psei: PseiConfig,
    pub schedule: Schedule,
}

impl PretrainConfig {
    pub fn for_dataset(kind: CodecKind, ds: &ProteinDataset, schedule: Schedule) -> Self {
        let mut pssi = PssiConfig::new(vec![ds.len(), ds.attributes.shape()[1]]);
        let mut psei = PseiConfig::new(ds.seq_raw.shape()[1]);
        pssi.dropout = schedule.dropout;
        psei.dropout = schedule.dropout;
        Self { kind, pssi, psei, schedule }
    }
}

/// Reconstructive pretraining of one codec over every protein.
pub struct Pretrainer<'a> {
    pub cfg: PretrainConfig,
    pub codec: Codec,
    pub state: TrainState,
    pub curve: Vec<LossRow>,
    pub initial_loss: f64,
    ds: &'a ProteinDataset,
    inputs: CodecInputs,
}

impl<'a> Pretrainer<'a> {
    fn build(cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> (ParamStore, Codec) {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, rng);
        let codec = match cfg.kind {
            CodecKind::Pssi => Codec::Pssi(Pssi::new(&mut b, cfg.pssi.clone())),
            CodecKind::Psei => Codec::Psei(Psei::new(&mut b, cfg.psei.clone())),
        };
        (store, codec)
    }

    pub fn new(ds: &'a ProteinDataset, cfg: PretrainConfig) -> Result<Self> {
        cfg.schedule.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed);
        let (params, codec) = Self::build(&cfg, &mut rng);
        let opt = AdamW::new(&params, cfg.schedule.weight_decay);
        let inputs = codec_inputs(cfg.kind, ds, &ds.all_indices());
        let mut p = Self {
            cfg,
            codec,
            state: TrainState { params, opt, rng, epoch: 0 },
            curve: Vec::new(),
            initial_loss: 0.0,
            ds,
            inputs,
        };
        p.initial_loss = p.eval_loss()?;
        Ok(p)
    }

    pub fn resume(ds: &'a ProteinDataset, ckpt: &Checkpoint) -> Result<Self> {
        let cfg: PretrainConfig = ckpt.config()?;
        ckpt.expect_fingerprint(&fingerprint(&cfg))?;
        ckpt.expect_kind(cfg.kind.name())?;
        let mut scratch = ChaCha8Rng::seed_from_u64(cfg.schedule.seed);
        let (template, codec) = Self::build(&cfg, &mut scratch);
        let state = TrainState::restore(ckpt, template, cfg.schedule.weight_decay)?;
        let meta = &ckpt.header.meta;
        let curve =
            serde_json::from_value(meta["curve"].clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let initial_loss =
            meta["initial_loss"].as_f64().ok_or_else(|| CheckpointError::Header("initial_loss".into()))?;
        let inputs = codec_inputs(cfg.kind, ds, &ds.all_indices());
        Ok(Self { cfg, codec, state, curve, initial_loss, ds, inputs })
    }

    pub fn eval_loss(&self) -> Result<f64> {
        let mut cx = Ctx::eval(&self.state.params);
        let l = self.codec.loss(&mut cx, &self.inputs)?;
        Ok(cx.value(l).item())
    }

    pub fn done(&self) -> bool {
        self.state.epoch >= self.cfg.schedule.total_epochs()
    }

    pub fn step_epoch(&mut self) -> Result<&LossRow> {
        let rows = self.ds.all_indices();
        let lr = self.cfg.schedule.lr_at(self.state.epoch);
        let (codec, ds, kind) = (&self.codec, self.ds, self.cfg.kind);
        let full = (self.cfg.schedule.batch_size.is_none_or(|b| b >= rows.len())).then_some(&self.inputs);
        let loss_fn = |cx: &mut Ctx<'_>, batch: &[usize]| -> Result<Var> {
            match full {
                Some(inputs) => Ok(codec.loss(cx, inputs)?),
                None => Ok(codec.loss(cx, &codec_inputs(kind, ds, batch))?),
            }
        };
        let train_loss = train_epoch(&mut self.state, &self.cfg.schedule, &rows, &loss_fn)?;
        let eval_loss = self.eval_loss()?;
        if !eval_loss.is_finite() {
            return Err(TrainError::Divergence { epoch: self.state.epoch - 1 });
        }
        self.curve.push(LossRow { epoch: self.state.epoch - 1, lr, train_loss, eval_loss });
        Ok(self.curve.last().expect("just pushed"))
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.done() {
            self.step_epoch()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut groups = ParamStore::new();
        self.state.write_groups(&mut groups);
        let mut c = Checkpoint::new(self.cfg.kind.name(), &self.cfg, "pretrain", groups);
        self.state.fill_header(&mut c);
        c.header.normalization = Some((self.ds.seq_min.clone(), self.ds.seq_max.clone()));
        c.header.meta = serde_json::json!({ "curve": self.curve, "initial_loss": self.initial_loss });
        c
    }
}

/// The five prediction metrics of one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub fmax: f64,
    pub m_aupr: f64,
    pub macro_aupr: f64,
    pub f1: f64,
    pub acc: f64,
}

impl MetricRow {
    pub fn from_report(r: &EvalReport) -> Self {
        Self { fmax: r.fmax, m_aupr: r.m_aupr, macro_aupr: r.macro_aupr, f1: r.f1, acc: r.acc }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train: MetricRow,
    pub valid: Option<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
}

impl FinetuneConfig {
    pub fn for_dataset(ds: &ProteinDataset, schedule: Schedule) -> Self {
        let mut model = ModelConfig::new(ds.len(), ds.attributes.shape()[1], ds.seq_raw.shape()[1], ds.terms());
        model.dropout = schedule.dropout;
        model.pssi.dropout = schedule.dropout;
        model.psei.dropout = schedule.dropout;
        Self { model, schedule }
    }
}

/// Metrics of `store` on `rows`, or `None` when those rows carry no positive label.
pub fn split_metrics(
    model: &Dsrpgo,
    store: &ParamStore,
    ds: &ProteinDataset,
    rows: &[usize],
) -> Result<Option<MetricRow>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let labels = ds.labels_for(rows);
    if !labels.data().contains(&1.0) {
        return Ok(None);
    }
    let scores = model.predict(store, &ds.inputs(rows))?;
    Ok(Some(MetricRow::from_report(&EvalReport::compute(&scores, &labels)?)))
}

/// Fine-tuning on the train split with per-epoch evaluation and retention of
/// the parameters with the best validation Fmax (train Fmax without a
/// validation split).
pub struct Finetuner<'a> {
    pub cfg: FinetuneConfig,
    pub model: Dsrpgo,
    pub state: TrainState,
    pub curve: Vec<EpochRow>,
    pub best: ParamStore,
    pub best_epoch: Option<usize>,
    pub best_score: f64,
    pub manifest: LoadManifest,
    ds: &'a ProteinDataset,
    train_rows: Vec<usize>,
    valid_rows: Vec<usize>,
}

impl<'a> Finetuner<'a> {
    pub fn new(
        ds: &'a ProteinDataset,
        cfg: FinetuneConfig,
        pretrained: Option<(&ParamStore, &ParamStore)>,
    ) -> Result<Self> {
        cfg.schedule.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed);
        let (mut params, model) = Dsrpgo::init(cfg.model.clone(), &mut rng)?;
        let manifest = match pretrained {
            Some((pssi, psei)) => load_pretrained(&mut params, Some(pssi), Some(psei))?,
            None => load_pretrained(&mut params, None, None)?,
        };
        let opt = AdamW::new(&params, cfg.schedule.weight_decay);
        let best = params.clone();
        Ok(Self {
            train_rows: ds.indices(Split::Train),
            valid_rows: ds.indices(Split::Valid),
            cfg,
            model,
            state: TrainState { params, opt, rng, epoch: 0 },
            curve: Vec::new(),
            best,
            best_epoch: None,
            best_score: f64::NEG_INFINITY,
            manifest,
            ds,
        })
    }

    pub fn resume(ds: &'a ProteinDataset, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("model")?;
        let cfg: FinetuneConfig = ckpt.config()?;
        ckpt.expect_fingerprint(&fingerprint(&cfg))?;
        let (template, model) = Dsrpgo::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.schedule.seed))?;
        let mut best = template.clone();
        for (name, t) in best.iter_mut() {
            *t = ckpt
                .groups
                .by_name(&format!("best.{name}"))
                .cloned()
                .ok_or_else(|| CheckpointError::Header(format!("missing best.{name}")))?;
        }
        let state = TrainState::restore(ckpt, template, cfg.schedule.weight_decay)?;
        let meta = &ckpt.header.meta;
        Ok(Self {
            train_rows: ds.indices(Split::Train),
            valid_rows: ds.indices(Split::Valid),
            curve: meta_field(meta, "curve")?,
            best_epoch: meta_field(meta, "best_epoch")?,
            best_score: meta["best_score"].as_f64().unwrap_or(f64::NEG_INFINITY),
            manifest: meta_field(meta, "manifest")?,
            cfg,
            model,
            state,
            best,
            ds,
        })
    }

    pub fn done(&self) -> bool {
        self.state.epoch >= self.cfg.schedule.total_epochs()
    }

    pub fn step_epoch(&mut self) -> Result<&EpochRow> {
        if self.train_rows.is_empty() {
            return Err(TrainError::Schedule("the train split is empty".into()));
        }
        let lr = self.cfg.schedule.lr_at(self.state.epoch);
        let full_inputs = self.ds.inputs(&self.train_rows);
        let full_labels = self.ds.labels_for(&self.train_rows);
        let full_batch = self.cfg.schedule.batch_size.is_none_or(|b| b >= self.train_rows.len());
        let (model, ds) = (&self.model, self.ds);
        let loss_fn = |cx: &mut Ctx<'_>, batch: &[usize]| -> Result<Var> {
            let (l, _) = if full_batch {
                model.loss(cx, &full_inputs, &full_labels)?
            } else {
                model.loss(cx, &ds.inputs(batch), &ds.labels_for(batch))?
            };
            Ok(l)
        };
        let loss = train_epoch(&mut self.state, &self.cfg.schedule, &self.train_rows, &loss_fn)?;
        let train = split_metrics(&self.model, &self.state.params, self.ds, &self.train_rows)?
            .ok_or_else(|| TrainError::Schedule("the train split has no positive label".into()))?;
        let valid = split_metrics(&self.model, &self.state.params, self.ds, &self.valid_rows)?;
        let score = valid.map_or(train.fmax, |v| v.fmax);
        let epoch = self.state.epoch - 1;
        if score > self.best_score {
            self.best_score = score;
            self.best_epoch = Some(epoch);
            self.best = self.state.params.clone();
        }
        self.curve.push(EpochRow { epoch, lr, loss, train, valid });
        Ok(self.curve.last().expect("just pushed"))
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.done() {
            self.step_epoch()?;
        }
        Ok(())
    }

    /// First epoch whose train-split Fmax reaches `target`.
    pub fn epochs_to(&self, target: f64) -> Option<usize> {
        self.curve.iter().find(|r| r.train.fmax >= target).map(|r| r.epoch + 1)
    }

    /// Full training state for resumption, including the retained best parameters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut groups = ParamStore::new();
        self.state.write_groups(&mut groups);
        for (name, t) in self.best.iter() {
            groups.add(format!("best.{name}"), t.clone());
        }
        let mut c = Checkpoint::new("model", &self.cfg, "finetune", groups);
        self.state.fill_header(&mut c);
        c.header.normalization = Some((self.ds.seq_min.clone(), self.ds.seq_max.clone()));
        c.header.meta = serde_json::json!({
            "curve": self.curve,
            "best_epoch": self.best_epoch,
            "best_score": self.best_score,
            "manifest": self.manifest,
        });
        c
    }

    /// The retained best parameters alone, for evaluation.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("model", &self.cfg, "finetune", self.best.clone());
        c.header.epoch = self.best_epoch.map_or(0, |e| e + 1);
        c.header.normalization = Some((self.ds.seq_min.clone(), self.ds.seq_max.clone()));
        c.header.meta = serde_json::json!({ "best_epoch": self.best_epoch, "best_score": self.best_score, "manifest": self.manifest });
        c
    }
}

fn meta_field<T: for<'de> Deserialize<'de>>(meta: &serde_json::Value, key: &str) -> Result<T> {
    serde_json::from_value(meta[key].clone()).map_err(|e| CheckpointError::Header(format!("{key}: {e}")).into())
}

/// Parameter groups of a model checkpoint without optimizer or best-copy groups.
pub fn model_params(ckpt: &Checkpoint) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in ckpt.groups.iter() {
        if !name.starts_with("adam.") && !name.starts_with("best.") {
            out.add(name.to_string(), t.clone());
        }
    }
    out
}

/// Rebuilds the model described by a checkpoint and loads its parameters.
pub fn load_model(ckpt: &Checkpoint) -> Result<(Dsrpgo, ParamStore)> {
    ckpt.expect_kind("model")?;
    let cfg: FinetuneConfig = ckpt.config()?;
    let (mut store, model) = Dsrpgo::init(cfg.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let saved = model_params(ckpt);
    for (name, t) in store.iter_mut() {
        let src = saved.by_name(name).ok_or_else(|| CheckpointError::Header(format!("missing group {name}")))?;
        if src.shape() != t.shape() {
            return Err(ModelError::Incompatible(vec![name.to_string()]).into());
        }
        *t = src.clone();
    }
    Ok((model, store))
}
