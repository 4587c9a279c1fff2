use super::{NumericsError, Tape, Tensor, Var};

/// Denominator floor for [`relative_error`]; keeps near-zero gradients from
/// turning rounding noise into huge ratios.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference gradient `(f(x + εe_i) − f(x − εe_i)) / 2ε` of a scalar function.
pub fn finite_difference_gradient(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor, NumericsError> {
    if !(eps > 0.0) {
        return Err(NumericsError::Oracle(format!("step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::Oracle(format!("non-finite function value around element {i}")));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Compares tape gradients with central differences for every input that has
/// `requires_grad` set, returning the largest [`relative_error`].
pub fn check_gradients(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
    eps: f64,
) -> Result<f64, NumericsError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |replaced: usize, probe: &Tensor| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, x)| t.constant(if j == replaced { probe } else { x }))
            .collect();
        match build(&mut t, &vs) {
            Ok(l) => t.value(l)[0],
            Err(_) => f64::NAN,
        }
    };

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        if !x.requires_grad {
            continue;
        }
        let numeric = finite_difference_gradient(|p| eval(i, p), x, eps)?;
        let zeros = vec![0.0; x.numel()];
        let analytic = tape.grad(vars[i]).unwrap_or(&zeros);
        for (a, n) in analytic.iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    Ok(worst)
}
