use super::{NumericsError, Tensor};

/// Plain SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self, NumericsError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(NumericsError::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(NumericsError::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self { learning_rate, momentum, velocity: Vec::new() })
    }
}

/// Applies one update to every parameter holding a gradient.
///
/// Nothing is modified if any gradient is non-finite.
pub fn sgd_step(params: &mut [&mut Tensor], state: &mut SgdState) -> Result<(), NumericsError> {
    for (i, p) in params.iter().enumerate() {
        if let Some(g) = &p.grad {
            if g.len() != p.numel() {
                return Err(NumericsError::Shape(format!(
                    "gradient of parameter {i} has {} values for shape {:?}",
                    g.len(),
                    p.shape()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::Divergence(format!("non-finite gradient in parameter {i}")));
            }
        }
    }
    if state.velocity.len() != params.len() {
        state.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if v.len() != p.numel() {
            return Err(NumericsError::Shape("velocity buffer does not match parameter".into()));
        }
        let Some(g) = p.grad.take() else { continue };
        let data = p.data_mut();
        if mu == 0.0 {
            for (x, gi) in data.iter_mut().zip(&g) {
                *x -= lr * gi;
            }
        } else {
            for ((x, vi), gi) in data.iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = mu * *vi + gi;
                *x -= lr * *vi;
            }
        }
        p.grad = Some(g);
    }
    Ok(())
}
