//! Bidirectional selective-scan block over token sequences.

use crate::nn::{Builder, Ctx, Linear, ParamId, ParamStore};
use crate::ssm::SelectiveSsm;
use crate::tensor::{Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Positional reordering of a `[B, L, D]` sequence along the token axis.
pub fn reorder(cx: &mut Ctx<'_>, x: Var, direction: Direction) -> Result<Var> {
    match direction {
        Direction::Forward => Ok(x),
        Direction::Backward => cx.graph.reverse(x, 1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiMambaConfig {
    pub width: usize,
    pub inner: usize,
    pub state: usize,
    pub conv_width: usize,
}

/// One scan direction: depthwise causal conv, SiLU, selective SSM.
#[derive(Debug, Clone)]
pub struct ScanBranch {
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub ssm: SelectiveSsm,
}

impl ScanBranch {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &BiMambaConfig) -> Self {
        b.scoped(name, |b| Self {
            conv_kernel: b.fan_in_uniform("conv_kernel", vec![cfg.inner, cfg.conv_width], cfg.conv_width),
            conv_bias: b.fan_in_uniform("conv_bias", vec![cfg.inner], cfg.conv_width),
            ssm: SelectiveSsm::new(b, "ssm", cfg.inner, cfg.state),
        })
    }

    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let k = cx.param(self.conv_kernel);
        let h = cx.graph.causal_conv1d(x, k)?;
        let cb = cx.param(self.conv_bias);
        let h = cx.graph.add(h, cb)?;
        let h = cx.graph.silu(h);
        self.ssm.forward(cx, h)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let s = &self.ssm;
        let mut ids = vec![self.conv_kernel, self.conv_bias, s.dt_proj.weight, s.dt_proj.bias.unwrap()];
        ids.extend([s.b_proj.weight, s.c_proj.weight, s.a_log, s.d]);
        ids
    }
}

#[derive(Debug, Clone)]
pub struct BiMamba {
    pub cfg: BiMambaConfig,
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub forward_scan: ScanBranch,
    pub backward_scan: ScanBranch,
    pub out_proj: Linear,
}

impl BiMamba {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: BiMambaConfig) -> Self {
        assert!(cfg.conv_width >= 1, "conv width must be at least 1");
        b.scoped(name, |b| Self {
            cfg,
            in_proj: Linear::new(b, "in_proj", cfg.width, cfg.inner),
            gate_proj: Linear::new(b, "gate_proj", cfg.width, cfg.inner),
            forward_scan: ScanBranch::new(b, "fwd", &cfg),
            backward_scan: ScanBranch::new(b, "bwd", &cfg),
            out_proj: Linear::new(b, "out_proj", cfg.inner, cfg.width),
        })
    }

    /// Intermediate paths of one block evaluation, exposed for inspection.
    pub fn paths(&self, cx: &mut Ctx<'_>, x: Var) -> Result<BiMambaPaths> {
        let gate_pre = self.gate_proj.forward(cx, x)?;
        let gate = cx.graph.silu(gate_pre);
        let projected = self.in_proj.forward(cx, x)?;
        let forward = self.forward_scan.forward(cx, projected)?;
        let reversed = reorder(cx, projected, Direction::Backward)?;
        let scanned = self.backward_scan.forward(cx, reversed)?;
        let backward = reorder(cx, scanned, Direction::Backward)?;
        Ok(BiMambaPaths { gate, forward, backward })
    }

    /// `x + W_out (F_b ⊙ g + F_f ⊙ g + g)` where `g = SiLU(W_g x)` and
    /// `F_f`, `F_b` are the forward and reorder-wrapped backward scans.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let p = self.paths(cx, x)?;
        let fb = cx.graph.hadamard(p.backward, p.gate)?;
        let ff = cx.graph.hadamard(p.forward, p.gate)?;
        let fused = cx.graph.add(fb, ff)?;
        let fused = cx.graph.add(fused, p.gate)?;
        let out = self.out_proj.forward(cx, fused)?;
        cx.graph.add(x, out)
    }

    /// Zeroes the output projection so the block is the identity map.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.out_proj.zero(store);
    }

    /// Copies the forward-direction parameters into the backward direction.
    pub fn tie_directions(&self, store: &mut ParamStore) {
        for (src, dst) in self.forward_scan.param_ids().into_iter().zip(self.backward_scan.param_ids()) {
            let t: Tensor = store.get(src).clone();
            *store.get_mut(dst) = t;
        }
    }
}

pub struct BiMambaPaths {
    pub gate: Var,
    pub forward: Var,
    pub backward: Var,
}
