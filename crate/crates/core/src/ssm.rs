//! Diagonal state-space models: zero-order-hold discretization, the
//! recurrent scan, the equivalent causal-convolution form, and the
//! input-dependent (selective) scan used inside BiMamba blocks.
//!
//! Sequences are row-major `L x C` slices (token-major, one value per channel).

use thiserror::Error;

use crate::nn::{Builder, Ctx, Linear, ParamId};
use crate::tensor::{Result as TensorResult, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SsmError {
    #[error("timescale must be positive, channel {channel} has {value}")]
    NonPositiveTimescale { channel: usize, value: f64 },
    #[error("state matrix entry ({channel}, {state}) = {value} is not strictly negative")]
    UnstableState { channel: usize, state: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Continuous parameters of a linear time-invariant diagonal SSM.
///
/// Per channel `c` and state `s`: `a[c,s] < 0`, input map `b[c,s]`, output
/// map `c[c,s]`, skip `d[c]`, timescale `delta[c] > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub channels: usize,
    pub state: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub delta: Vec<f64>,
}

impl SsmParams {
    /// Builds parameters with `A = -exp(a_log)`, which is negative by construction.
    pub fn from_log_a(
        channels: usize,
        state: usize,
        a_log: &[f64],
        b: Vec<f64>,
        c: Vec<f64>,
        d: Vec<f64>,
        delta: Vec<f64>,
    ) -> Result<Self, SsmError> {
        let a = a_log.iter().map(|v| -v.exp()).collect();
        Self::new(channels, state, a, b, c, d, delta)
    }

    pub fn new(
        channels: usize,
        state: usize,
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        d: Vec<f64>,
        delta: Vec<f64>,
    ) -> Result<Self, SsmError> {
        let cs = channels * state;
        if a.len() != cs || b.len() != cs || c.len() != cs || d.len() != channels || delta.len() != channels {
            return Err(SsmError::Shape(format!("expected {channels} channels x {state} states")));
        }
        if let Some(i) = a.iter().position(|&v| !(v < 0.0)) {
            return Err(SsmError::UnstableState { channel: i / state, state: i % state, value: a[i] });
        }
        if let Some(ch) = delta.iter().position(|&v| !(v > 0.0)) {
            return Err(SsmError::NonPositiveTimescale { channel: ch, value: delta[ch] });
        }
        Ok(Self { channels, state, a, b, c, d, delta })
    }
}

/// Discrete evolution parameters `(Ā, B̄, C̄)`, each `channels x state`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub channels: usize,
    pub state: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c_bar: Vec<f64>,
}

/// Zero-order hold: `Ā = exp(ΔA)`, `B̄ = (ΔA)^-1 (exp(ΔA) - I) ΔB`, `C̄ = C`.
///
/// For `|ΔA| < 1e-6` the series `1 + z/2 + z²/6` replaces `(e^z - 1)/z`.
pub fn discretize(p: &SsmParams) -> Result<Discretized, SsmError> {
    if let Some(ch) = p.delta.iter().position(|&v| !(v > 0.0)) {
        return Err(SsmError::NonPositiveTimescale { channel: ch, value: p.delta[ch] });
    }
    let n = p.channels * p.state;
    let mut a_bar = vec![0.0; n];
    let mut b_bar = vec![0.0; n];
    for ch in 0..p.channels {
        let dt = p.delta[ch];
        for s in 0..p.state {
            let i = ch * p.state + s;
            let z = dt * p.a[i];
            a_bar[i] = z.exp();
            b_bar[i] = crate::tensor::phi(z) * dt * p.b[i];
        }
    }
    Ok(Discretized { channels: p.channels, state: p.state, a_bar, b_bar, c_bar: p.c.clone() })
}

/// Hidden state of a recurrent scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanState {
    pub h: Vec<f64>,
    pub t: usize,
}

impl ScanState {
    pub fn zeros(channels: usize, state: usize) -> Self {
        Self { h: vec![0.0; channels * state], t: 0 }
    }

    /// Advances one token: `h = Ā h + B̄ x_t`, returns `y_t = C̄ h + D x_t`.
    pub fn step(&mut self, disc: &Discretized, d: &[f64], x_t: &[f64]) -> Vec<f64> {
        let ns = disc.state;
        let y = (0..disc.channels)
            .map(|ch| {
                let mut acc = d[ch] * x_t[ch];
                for s in 0..ns {
                    let i = ch * ns + s;
                    self.h[i] = disc.a_bar[i] * self.h[i] + disc.b_bar[i] * x_t[ch];
                    acc += disc.c_bar[i] * self.h[i];
                }
                acc
            })
            .collect();
        self.t += 1;
        y
    }
}

fn check_sequence(x: &[f64], channels: usize) -> Result<usize, SsmError> {
    if x.is_empty() || !x.len().is_multiple_of(channels) {
        return Err(SsmError::Shape(format!(
            "sequence of {} values is not a nonempty multiple of {channels} channels",
            x.len()
        )));
    }
    Ok(x.len() / channels)
}

/// Recurrent scan over already-discretized parameters, zero initial state.
pub fn scan_recurrent_discrete(x: &[f64], disc: &Discretized, d: &[f64]) -> Result<Vec<f64>, SsmError> {
    let len = check_sequence(x, disc.channels)?;
    let mut state = ScanState::zeros(disc.channels, disc.state);
    let mut y = Vec::with_capacity(x.len());
    for t in 0..len {
        y.extend(state.step(disc, d, &x[t * disc.channels..(t + 1) * disc.channels]));
    }
    Ok(y)
}

pub fn scan_recurrent(x: &[f64], p: &SsmParams) -> Result<Vec<f64>, SsmError> {
    scan_recurrent_discrete(x, &discretize(p)?, &p.d)
}

/// Per-channel kernel `K̄[c, j] = Σ_s C̄ Ā^j B̄` for lags `0..len`, row-major `channels x len`.
pub fn convolution_kernel(disc: &Discretized, len: usize) -> Vec<f64> {
    let ns = disc.state;
    let mut k = vec![0.0; disc.channels * len];
    for ch in 0..disc.channels {
        for s in 0..ns {
            let i = ch * ns + s;
            let mut pow = 1.0;
            for j in 0..len {
                k[ch * len + j] += disc.c_bar[i] * pow * disc.b_bar[i];
                pow *= disc.a_bar[i];
            }
        }
    }
    k
}

/// `y = x * K̄ + D x` with the kernel as long as the sequence.
pub fn scan_convolutional_discrete(x: &[f64], disc: &Discretized, d: &[f64]) -> Result<Vec<f64>, SsmError> {
    let len = check_sequence(x, disc.channels)?;
    let nc = disc.channels;
    let k = convolution_kernel(disc, len);
    let mut y = vec![0.0; x.len()];
    for t in 0..len {
        for ch in 0..nc {
            let mut acc = d[ch] * x[t * nc + ch];
            for j in 0..=t {
                acc += k[ch * len + j] * x[(t - j) * nc + ch];
            }
            y[t * nc + ch] = acc;
        }
    }
    Ok(y)
}

pub fn scan_convolutional(x: &[f64], p: &SsmParams) -> Result<Vec<f64>, SsmError> {
    scan_convolutional_discrete(x, &discretize(p)?, &p.d)
}

/// Input-dependent SSM over `[B, L, E]` sequences: `Δ = softplus(x W_Δ + b_Δ)`,
/// `B = x W_B`, `C = x W_C`, diagonal `A = -exp(a_log)`, per-channel skip `D`.
#[derive(Debug, Clone)]
pub struct SelectiveSsm {
    pub dt_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
    pub channels: usize,
    pub state: usize,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SelectiveSsm {
    /// `A` starts at `-1, -2, .., -state` in every channel and the timescale
    /// bias is set so that initial `Δ` is log-uniform in `[1e-3, 0.1]`.
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, state: usize) -> Self {
        b.scoped(name, |b| {
            let dt_proj = Linear::new(b, "dt_proj", channels, channels);
            let bias: Vec<f64> = (0..channels)
                .map(|_| {
                    let u = b.random();
                    let dt = (1e-3f64.ln() + u * (0.1f64.ln() - 1e-3f64.ln())).exp();
                    inverse_softplus(dt)
                })
                .collect();
            *b.store.get_mut(dt_proj.bias.unwrap()) = Tensor::vector(bias);
            let b_proj = Linear::no_bias(b, "b_proj", channels, state);
            let c_proj = Linear::no_bias(b, "c_proj", channels, state);
            let a_log = (0..channels).flat_map(|_| (1..=state).map(|s| (s as f64).ln())).collect();
            let a_log = b.add("a_log", Tensor::new(vec![channels, state], a_log).unwrap());
            let d = b.add("d", Tensor::ones(vec![channels]));
            Self { dt_proj, b_proj, c_proj, a_log, d, channels, state }
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> TensorResult<Var> {
        let dt = self.dt_proj.forward(cx, x)?;
        let delta = cx.graph.softplus(dt);
        let bm = self.b_proj.forward(cx, x)?;
        let cm = self.c_proj.forward(cx, x)?;
        let a_log = cx.param(self.a_log);
        let ea = cx.graph.exp(a_log)?;
        let a = cx.graph.scale(ea, -1.0);
        let d = cx.param(self.d);
        cx.graph.selective_scan(x, delta, a, bm, cm, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_store;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(a: f64, delta: f64, b: f64) -> SsmParams {
        SsmParams::new(1, 1, vec![a], vec![b], vec![1.0], vec![0.0], vec![delta]).unwrap()
    }

    /// Truncated Taylor series of (e^z - 1)/z, an oracle independent of exp_m1.
    fn phi_series(z: f64) -> f64 {
        let (mut term, mut sum) = (1.0, 0.0);
        for n in 1..60 {
            sum += term;
            term *= z / (n as f64 + 1.0);
        }
        sum
    }

    #[test]
    fn discretize_scalar_closed_form() {
        let disc = discretize(&scalar_params(-2.0, 0.5, 1.0)).unwrap();
        assert!((disc.a_bar[0] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((disc.b_bar[0] - 0.316060279414279).abs() < 1e-12);
        assert!((disc.b_bar[0] - phi_series(-1.0) * 0.5).abs() < 1e-12);
    }

    #[test]
    fn discretize_limit_as_a_vanishes() {
        let disc = discretize(&scalar_params(-1e-300, 1.0, 2.5)).unwrap();
        assert_eq!(disc.a_bar[0], 1.0);
        assert_eq!(disc.b_bar[0], 2.5);
    }

    #[test]
    fn discretize_keeps_output_map() {
        let p = SsmParams::new(2, 1, vec![-1.0, -3.0], vec![1.0, 1.0], vec![0.7, -4.0], vec![0.0; 2], vec![0.1, 0.2])
            .unwrap();
        assert_eq!(discretize(&p).unwrap().c_bar, vec![0.7, -4.0]);
    }

    #[test]
    fn nonpositive_timescale_is_rejected() {
        let err = SsmParams::new(1, 1, vec![-1.0], vec![1.0], vec![1.0], vec![0.0], vec![0.0]).unwrap_err();
        assert_eq!(err, SsmError::NonPositiveTimescale { channel: 0, value: 0.0 });
        let mut p = scalar_params(-1.0, 1.0, 1.0);
        p.delta[0] = -0.5;
        assert!(matches!(discretize(&p), Err(SsmError::NonPositiveTimescale { .. })));
    }

    fn half_decay() -> Discretized {
        Discretized { channels: 1, state: 1, a_bar: vec![0.5], b_bar: vec![1.0], c_bar: vec![1.0] }
    }

    #[test]
    fn recurrent_hand_execution() {
        let mut state = ScanState::zeros(1, 1);
        let y1 = state.step(&half_decay(), &[0.0], &[1.0]);
        assert_eq!(state.h, vec![1.0]);
        let y2 = state.step(&half_decay(), &[0.0], &[1.0]);
        assert_eq!(state.h, vec![1.5]);
        assert_eq!((y1, y2, state.t), (vec![1.0], vec![1.5], 2));
        assert_eq!(scan_recurrent_discrete(&[1.0, 1.0], &half_decay(), &[0.0]).unwrap(), vec![1.0, 1.5]);
    }

    #[test]
    fn pure_skip_and_zero_input() {
        let mut disc = half_decay();
        disc.c_bar = vec![0.0];
        let x = [0.3, -1.2, 4.0];
        assert_eq!(scan_recurrent_discrete(&x, &disc, &[1.0]).unwrap(), x.to_vec());
        assert_eq!(scan_convolutional_discrete(&x, &disc, &[1.0]).unwrap(), x.to_vec());
        assert_eq!(scan_recurrent_discrete(&[0.0; 4], &half_decay(), &[1.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn convolution_kernel_hand_case() {
        assert_eq!(convolution_kernel(&half_decay(), 3), vec![1.0, 0.5, 0.25]);
        assert_eq!(scan_convolutional_discrete(&[1.0, 0.0], &half_decay(), &[0.0]).unwrap(), vec![1.0, 0.5]);
    }

    pub(crate) fn random_params(rng: &mut ChaCha8Rng, channels: usize, state: usize) -> SsmParams {
        let cs = channels * state;
        let a_log: Vec<f64> = (0..cs).map(|_| rng.random_range(-2.0..1.5)).collect();
        let v = |rng: &mut ChaCha8Rng, n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (b, c, d) = (v(rng, cs), v(rng, cs), v(rng, channels));
        let delta = (0..channels).map(|_| rng.random_range(1e-3..1.0)).collect();
        SsmParams::from_log_a(channels, state, &a_log, b, c, d, delta).unwrap()
    }

    #[test]
    fn recurrence_matches_convolution_at_length_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let p = random_params(&mut rng, 3, 4);
        let x: Vec<f64> = (0..64 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (r, c) = (scan_recurrent(&x, &p).unwrap(), scan_convolutional(&x, &p).unwrap());
        let diff = r.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn hidden_state_bounded_over_long_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 2, 4);
        let disc = discretize(&p).unwrap();
        let max_a = disc.a_bar.iter().cloned().fold(0.0, f64::max);
        let max_b = disc.b_bar.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let bound = max_b * 1.0 / (1.0 - max_a);
        let mut state = ScanState::zeros(2, 4);
        for _ in 0..10_000 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            state.step(&disc, &p.d, &x);
            assert!(state.h.iter().all(|h| h.is_finite() && h.abs() <= bound * (1.0 + 1e-12)));
        }
    }

    fn selective(seed: u64, channels: usize, state: usize) -> (ParamStore, SelectiveSsm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ssm = SelectiveSsm::new(&mut Builder::new(&mut store, &mut rng), "ssm", channels, state);
        (store, ssm)
    }

    #[test]
    fn initial_timescales_in_range() {
        let (store, ssm) = selective(1, 16, 4);
        for &b in store.get(ssm.dt_proj.bias.unwrap()).data() {
            let dt = b.max(0.0) + (-b.abs()).exp().ln_1p();
            assert!((1e-3 - 1e-12..=0.1 + 1e-12).contains(&dt), "{dt}");
        }
        assert_eq!(&store.get(ssm.a_log).data()[..4], &[0.0, 2f64.ln(), 3f64.ln(), 4f64.ln()]);
    }

    #[test]
    fn selective_zero_input_gives_zero_output() {
        let (store, ssm) = selective(2, 3, 4);
        let mut cx = Ctx::eval(&store);
        let x = cx.constant(Tensor::zeros(vec![2, 5, 3]));
        let y = ssm.forward(&mut cx, x).unwrap();
        assert!(cx.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn selective_single_token_matches_one_step() {
        let (store, ssm) = selective(3, 2, 3);
        let xs = [0.7, -0.4];
        let mut cx = Ctx::eval(&store);
        let x = cx.constant(Tensor::new(vec![1, 1, 2], xs.to_vec()).unwrap());
        let y = ssm.forward(&mut cx, x).unwrap();
        // Recompute the projections by hand and run one discretized step.
        let lin = |w: &Tensor, bias: Option<&Tensor>, out: usize| -> Vec<f64> {
            (0..out)
                .map(|j| (0..2).map(|i| xs[i] * w.data()[i * out + j]).sum::<f64>() + bias.map_or(0.0, |b| b.data()[j]))
                .collect()
        };
        let dt_raw = lin(store.get(ssm.dt_proj.weight), Some(store.get(ssm.dt_proj.bias.unwrap())), 2);
        let delta: Vec<f64> = dt_raw.iter().map(|&v| (1.0 + v.exp()).ln()).collect();
        let bvec = lin(store.get(ssm.b_proj.weight), None, 3);
        let cvec = lin(store.get(ssm.c_proj.weight), None, 3);
        for ch in 0..2 {
            let p = SsmParams::from_log_a(
                1,
                3,
                &store.get(ssm.a_log).data()[ch * 3..ch * 3 + 3],
                bvec.clone(),
                cvec.clone(),
                vec![1.0],
                vec![delta[ch]],
            )
            .unwrap();
            let want = scan_recurrent(&[xs[ch]], &p).unwrap()[0];
            assert!((cx.value(y).data()[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn selective_scan_gradients() {
        let (mut store, ssm) = selective(4, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x = store.add("input", Tensor::randn(vec![1, 4, 2], 1.0, &mut rng));
        let report = grad_check_store(
            &store,
            |cx| {
                let xv = cx.param(x);
                let y = ssm.forward(cx, xv)?;
                crate::nn::weighted_sum(cx, y)
            },
            1e-5,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
