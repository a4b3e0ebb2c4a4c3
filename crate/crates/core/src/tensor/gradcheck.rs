use super::{Graph, Result, Tensor, Var};

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone)]
pub struct InputCheck {
    pub input: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// Fixed weights used to reduce a non-scalar output to a scalar.
fn projection_weight(i: usize) -> f64 {
    1.0 + (i % 3) as f64 / 4.0
}

fn evaluate(
    f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    grad: bool,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| if grad { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
    let out = f(&mut g, &vars)?;
    let loss = if g.value(out).numel() == 1 {
        out
    } else {
        let shape = g.shape(out).to_vec();
        let n = g.value(out).numel();
        let w = g.constant(Tensor::from_parts(shape, (0..n).map(projection_weight).collect()));
        let weighted = g.hadamard(out, w)?;
        g.sum_all(weighted)
    };
    let value = g.value(loss).item();
    if !grad {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value, vars.iter().map(|&v| g.grad(v).cloned()).collect()))
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(x + h) - f(x - h)) / 2h`, for every element of every input.
pub fn grad_check(
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check_with(f, inputs, h, tol, usize::MAX)
}

/// Like [`grad_check`] but probes at most `max_per_input` evenly strided
/// elements of each input.
pub fn grad_check_with(
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    max_per_input: usize,
) -> Result<GradCheckReport> {
    let (_, grads) = evaluate(&f, inputs, true)?;
    let mut report = GradCheckReport { tol, inputs: Vec::new() };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        let analytic = grads[k].clone().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut check = InputCheck { input: k, checked: 0, max_rel_err: 0.0, max_abs_err: 0.0, passed: true };
        for i in (0..n).step_by(stride) {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let (fp, _) = evaluate(&f, &probe, false)?;
            probe[k].data_mut()[i] = x0 - h;
            let (fm, _) = evaluate(&f, &probe, false)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.checked += 1;
        }
        check.passed = check.max_rel_err < tol;
        report.inputs.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_exact_with_dyadic_inputs() {
        let x = Tensor::vector(vec![0.5, -0.25, 1.0, 0.125]);
        let report = grad_check(|_, v| Ok(v[0]), &[x], 2f64.powi(-16), 1e-4).unwrap();
        assert_eq!(report.max_rel_err(), 0.0);
        assert!(report.passed());
    }

    #[test]
    fn softmax_of_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(vec![4, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 4], 1.0, &mut rng);
        let report = grad_check(
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                g.softmax(m, 1)
            },
            &[a, b],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn layer_norm_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(vec![8], 1.0, &mut rng);
        let report = grad_check(|g, v| g.layer_norm(v[0], 0, 1e-5), &[x], 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn detects_wrong_derivative() {
        let x = Tensor::vector(vec![0.3, -0.7, 1.2]);
        let report = grad_check(|g, v| Ok(g.map(v[0], f64::sin, |x| 1.5 * x.cos())), &[x], 1e-5, 1e-4).unwrap();
        assert!(!report.passed());
    }
}
