//! Reconstructive encoder-decoders: the spatial codec built from BiMamba
//! blocks over per-source inputs, and the sequence codec built from
//! self-attention blocks over sequence embeddings.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionStack};
use crate::bimamba::{BiMamba, BiMambaConfig};
use crate::nn::{tokenize, Builder, Ctx, LayerNorm, Linear, Mlp};
use crate::tensor::{shape_err, Result, Var};

/// Reconstructions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PssiConfig {
    pub source_widths: Vec<usize>,
    pub latent: usize,
    pub token_width: usize,
    pub state: usize,
    pub conv_width: usize,
    pub dropout: f64,
}

impl PssiConfig {
    pub fn new(source_widths: Vec<usize>) -> Self {
        Self { source_widths, latent: 64, token_width: 16, state: 8, conv_width: 4, dropout: 0.1 }
    }

    pub fn tokens(&self) -> usize {
        self.latent.div_ceil(self.token_width)
    }

    fn block(&self) -> BiMambaConfig {
        BiMambaConfig {
            width: self.token_width,
            inner: 2 * self.token_width,
            state: self.state,
            conv_width: self.conv_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseiConfig {
    pub input_width: usize,
    pub latent: usize,
    pub token_width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub dropout: f64,
}

impl PseiConfig {
    pub fn new(input_width: usize) -> Self {
        Self { input_width, latent: 64, token_width: 16, heads: 2, blocks: 6, dropout: 0.1 }
    }

    pub fn tokens(&self) -> usize {
        self.latent.div_ceil(self.token_width)
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.token_width, self.heads)
    }
}

fn check_width(cx: &Ctx<'_>, x: Var, width: usize, what: &'static str) -> Result<()> {
    let s = cx.shape(x);
    if s.len() != 2 || s[1] != width {
        return Err(shape_err(what, format!("expected [N, {width}] input, got {s:?}")));
    }
    Ok(())
}

/// `[B, L, W] -> Linear(W -> D) -> Norm -> mean over tokens -> [B, D]`.
#[derive(Debug, Clone)]
pub struct TokenPool {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl TokenPool {
    fn new(b: &mut Builder<'_>, width: usize, latent: usize) -> Self {
        Self { proj: Linear::new(b, "pool_proj", width, latent), norm: LayerNorm::new(b, "pool_norm", latent) }
    }

    fn forward(&self, cx: &mut Ctx<'_>, tokens: Var) -> Result<Var> {
        let h = self.proj.forward(cx, tokens)?;
        let h = self.norm.forward(cx, h)?;
        cx.graph.mean(h, 1)
    }
}

/// Encoder for one spatial source: MLP, tokenization, BiMamba, Linear/Norm, pooling.
#[derive(Debug, Clone)]
pub struct SourceEncoder {
    pub input_width: usize,
    pub mlp: Mlp,
    pub mamba: BiMamba,
    pub pool: TokenPool,
}

impl SourceEncoder {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &PssiConfig, input_width: usize) -> Self {
        b.scoped(name, |b| Self {
            input_width,
            mlp: Mlp::new(b, "mlp", input_width, cfg.latent, cfg.latent),
            mamba: BiMamba::new(b, "bimamba", cfg.block()),
            pool: TokenPool::new(b, cfg.token_width, cfg.latent),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, cfg: &PssiConfig) -> Result<Var> {
        check_width(cx, x, self.input_width, "pssi encoder")?;
        let h = self.mlp.forward(cx, x)?;
        let h = cx.dropout(h, cfg.dropout)?;
        let t = tokenize(cx, h, cfg.token_width)?;
        let t = self.mamba.forward(cx, t)?;
        self.pool.forward(cx, t)
    }
}

#[derive(Debug, Clone)]
pub struct SourceDecoder {
    pub expand: Linear,
    pub mamba: BiMamba,
    pub proj: Linear,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl SourceDecoder {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &PssiConfig, output_width: usize) -> Self {
        let flat = cfg.tokens() * cfg.token_width;
        b.scoped(name, |b| Self {
            expand: Linear::new(b, "expand", cfg.latent, flat),
            mamba: BiMamba::new(b, "bimamba", cfg.block()),
            proj: Linear::new(b, "proj", cfg.token_width, cfg.token_width),
            norm: LayerNorm::new(b, "norm", cfg.token_width),
            head: Linear::new(b, "head", flat, output_width),
        })
    }

    fn forward(&self, cx: &mut Ctx<'_>, z: Var, cfg: &PssiConfig) -> Result<Var> {
        check_width(cx, z, cfg.latent, "pssi decoder")?;
        let n = cx.shape(z)[0];
        let h = self.expand.forward(cx, z)?;
        let t = cx.graph.reshape(h, &[n, cfg.tokens(), cfg.token_width])?;
        let t = self.mamba.forward(cx, t)?;
        let t = self.proj.forward(cx, t)?;
        let t = self.norm.forward(cx, t)?;
        let flat = cx.graph.reshape(t, &[n, cfg.tokens() * cfg.token_width])?;
        let logits = self.head.forward(cx, flat)?;
        Ok(cx.graph.sigmoid(logits))
    }
}

#[derive(Debug, Clone)]
pub struct PssiEncoder {
    pub sources: Vec<SourceEncoder>,
}

impl PssiEncoder {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &PssiConfig) -> Self {
        b.scoped(name, |b| Self {
            sources: cfg
                .source_widths
                .iter()
                .enumerate()
                .map(|(k, &w)| SourceEncoder::new(b, &format!("src{k}"), cfg, w))
                .collect(),
        })
    }

    /// One `[N, D]` latent per source.
    pub fn encode(&self, cx: &mut Ctx<'_>, sources: &[Var], cfg: &PssiConfig) -> Result<Vec<Var>> {
        if sources.len() != self.sources.len() {
            return Err(shape_err(
                "pssi encoder",
                format!("expected {} sources, got {}", self.sources.len(), sources.len()),
            ));
        }
        self.sources.iter().zip(sources).map(|(e, &x)| e.forward(cx, x, cfg)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PssiDecoder {
    pub sources: Vec<SourceDecoder>,
}

impl PssiDecoder {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &PssiConfig) -> Self {
        b.scoped(name, |b| Self {
            sources: cfg
                .source_widths
                .iter()
                .enumerate()
                .map(|(k, &w)| SourceDecoder::new(b, &format!("src{k}"), cfg, w))
                .collect(),
        })
    }

    pub fn decode(&self, cx: &mut Ctx<'_>, latents: &[Var], cfg: &PssiConfig) -> Result<Vec<Var>> {
        self.sources.iter().zip(latents).map(|(d, &z)| d.forward(cx, z, cfg)).collect()
    }
}

/// The spatial encoder-decoder. Parameters live under `pssi.enc` and `pssi.dec`.
#[derive(Debug, Clone)]
pub struct Pssi {
    pub cfg: PssiConfig,
    pub encoder: PssiEncoder,
    pub decoder: PssiDecoder,
}

impl Pssi {
    pub fn new(b: &mut Builder<'_>, cfg: PssiConfig) -> Self {
        b.scoped("pssi", |b| Self {
            encoder: PssiEncoder::new(b, "enc", &cfg),
            decoder: PssiDecoder::new(b, "dec", &cfg),
            cfg,
        })
    }

    pub fn reconstruct(&self, cx: &mut Ctx<'_>, sources: &[Var]) -> Result<Vec<Var>> {
        let z = self.encoder.encode(cx, sources, &self.cfg)?;
        self.decoder.decode(cx, &z, &self.cfg)
    }

    /// `(1/N) Σ_i Σ_k Σ_j BCE(x, x̄)`.
    pub fn loss(&self, cx: &mut Ctx<'_>, sources: &[Var]) -> Result<Var> {
        let recon = self.reconstruct(cx, sources)?;
        let mut total: Option<Var> = None;
        for (&r, &x) in recon.iter().zip(sources) {
            let l = bce(cx, r, x)?;
            total = Some(match total {
                Some(t) => cx.graph.add(t, l)?,
                None => l,
            });
        }
        total.ok_or_else(|| shape_err("pssi loss", "no sources"))
    }
}

#[derive(Debug, Clone)]
pub struct PseiEncoder {
    pub mlp: Mlp,
    pub stack: AttentionStack,
    pub pool: TokenPool,
}

impl PseiEncoder {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &PseiConfig) -> Self {
        b.scoped(name, |b| Self {
            mlp: Mlp::new(b, "mlp", cfg.input_width, cfg.latent, cfg.latent),
            stack: AttentionStack::new(b, "attn", cfg.attention(), cfg.blocks),
            pool: TokenPool::new(b, cfg.token_width, cfg.latent),
        })
    }

    pub fn encode(&self, cx: &mut Ctx<'_>, x: Var, cfg: &PseiConfig) -> Result<Var> {
        check_width(cx, x, cfg.input_width, "psei encoder")?;
        let h = self.mlp.forward(cx, x)?;
        let h = cx.dropout(h, cfg.dropout)?;
        let t = tokenize(cx, h, cfg.token_width)?;
        let t = self.stack.forward(cx, t)?;
        self.pool.forward(cx, t)
    }
}

#[derive(Debug, Clone)]
pub struct PseiDecoder {
    pub expand: Linear,
    pub stack: AttentionStack,
    pub mlp: Mlp,
}

impl PseiDecoder {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &PseiConfig) -> Self {
        let flat = cfg.tokens() * cfg.token_width;
        b.scoped(name, |b| Self {
            expand: Linear::new(b, "expand", cfg.latent, flat),
            stack: AttentionStack::new(b, "attn", cfg.attention(), cfg.blocks),
            mlp: Mlp::new(b, "mlp", flat, cfg.latent, cfg.input_width),
        })
    }

    pub fn decode(&self, cx: &mut Ctx<'_>, z: Var, cfg: &PseiConfig) -> Result<Var> {
        check_width(cx, z, cfg.latent, "psei decoder")?;
        let n = cx.shape(z)[0];
        let h = self.expand.forward(cx, z)?;
        let t = cx.graph.reshape(h, &[n, cfg.tokens(), cfg.token_width])?;
        let t = self.stack.forward(cx, t)?;
        let flat = cx.graph.reshape(t, &[n, cfg.tokens() * cfg.token_width])?;
        let logits = self.mlp.forward(cx, flat)?;
        Ok(cx.graph.sigmoid(logits))
    }
}

/// The sequence encoder-decoder. Parameters live under `psei.enc` and `psei.dec`.
#[derive(Debug, Clone)]
pub struct Psei {
    pub cfg: PseiConfig,
    pub encoder: PseiEncoder,
    pub decoder: PseiDecoder,
}

impl Psei {
    pub fn new(b: &mut Builder<'_>, cfg: PseiConfig) -> Self {
        b.scoped("psei", |b| Self {
            encoder: PseiEncoder::new(b, "enc", &cfg),
            decoder: PseiDecoder::new(b, "dec", &cfg),
            cfg,
        })
    }

    pub fn reconstruct(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let z = self.encoder.encode(cx, x, &self.cfg)?;
        self.decoder.decode(cx, z, &self.cfg)
    }

    pub fn loss(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let r = self.reconstruct(cx, x)?;
        bce(cx, r, x)
    }
}

/// Summed binary cross-entropy divided by the row count, with clamped predictions.
pub fn bce(cx: &mut Ctx<'_>, pred: Var, target: Var) -> Result<Var> {
    let ps = cx.shape(pred);
    if ps != cx.shape(target) {
        return Err(shape_err("bce", format!("prediction {ps:?} vs target {:?}", cx.shape(target))));
    }
    let p = cx.graph.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = cx.graph.log(p)?;
    let neg = cx.graph.scale(p, -1.0);
    let one_minus_p = cx.graph.add_scalar(neg, 1.0);
    let log_q = cx.graph.log(one_minus_p)?;
    let neg_t = cx.graph.scale(target, -1.0);
    let one_minus_t = cx.graph.add_scalar(neg_t, 1.0);
    let pos = cx.graph.hadamard(target, log_p)?;
    let negs = cx.graph.hadamard(one_minus_t, log_q)?;
    let sum = cx.graph.add(pos, negs)?;
    let total = cx.graph.sum_all(sum);
    Ok(cx.graph.scale(total, -1.0 / ps[0] as f64))
}
