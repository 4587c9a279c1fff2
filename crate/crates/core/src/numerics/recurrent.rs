use super::{NumericsError, Tape, Var};

/// Parameters of a standard four-gate LSTM cell (gate order: input, forget, cell, output).
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[d_in, 4·d_h]`
    pub input: Var,
    /// `[d_h, 4·d_h]`
    pub hidden: Var,
    /// `[4·d_h]`
    pub bias: Var,
}

/// One LSTM step over a batch: `x` is `[B, d_in]`, `h` and `c` are `[B, d_h]`.
pub fn recurrent_step(
    tape: &mut Tape,
    x: Var,
    (h, c): (Var, Var),
    w: &LstmWeights,
) -> Result<(Var, Var), NumericsError> {
    let d_h = tape.shape(h)[1];
    let (xs, ws, us) = (tape.shape(x), tape.shape(w.input), tape.shape(w.hidden));
    if xs.len() != 2
        || ws != [xs[1], 4 * d_h]
        || us != [d_h, 4 * d_h]
        || tape.value(w.bias).len() != 4 * d_h
        || tape.shape(c) != tape.shape(h)
        || tape.shape(h)[0] != xs[0]
    {
        return Err(NumericsError::Shape(format!(
            "lstm: x {xs:?}, h {:?}, c {:?}, w_in {ws:?}, w_h {us:?}",
            tape.shape(h),
            tape.shape(c)
        )));
    }
    let a = tape.matmul(x, w.input)?;
    let b = tape.matmul(h, w.hidden)?;
    let pre = tape.add(a, b)?;
    let pre = tape.add_row(pre, w.bias)?;
    let i = tape.slice_cols(pre, 0, d_h)?;
    let f = tape.slice_cols(pre, d_h, d_h)?;
    let g = tape.slice_cols(pre, 2 * d_h, d_h)?;
    let o = tape.slice_cols(pre, 3 * d_h, d_h)?;
    let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use approx::assert_abs_diff_eq;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 3], 0.7));
        let h = tape.constant(&Tensor::zeros(&[1, 2]));
        let c = tape.constant(&Tensor::zeros(&[1, 2]));
        let w = LstmWeights {
            input: tape.constant(&Tensor::zeros(&[3, 8])),
            hidden: tape.constant(&Tensor::zeros(&[2, 8])),
            bias: tape.constant(&Tensor::zeros(&[8])),
        };
        let (h2, c2) = recurrent_step(&mut tape, x, (h, c), &w).unwrap();
        assert!(tape.value(h2).iter().all(|&v| v == 0.0));
        assert!(tape.value(c2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_cell_matches_hand_computation() {
        // d_in = d_h = 1, every weight 1, biases 0, x = 0.5, h = 0.2, c = 0.3
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 1], 0.5));
        let h = tape.constant(&Tensor::full(&[1, 1], 0.2));
        let c = tape.constant(&Tensor::full(&[1, 1], 0.3));
        let w = LstmWeights {
            input: tape.constant(&Tensor::full(&[1, 4], 1.0)),
            hidden: tape.constant(&Tensor::full(&[1, 4], 1.0)),
            bias: tape.constant(&Tensor::zeros(&[4])),
        };
        let (h2, c2) = recurrent_step(&mut tape, x, (h, c), &w).unwrap();
        let z: f64 = 0.7;
        let c_ref = sig(z) * 0.3 + sig(z) * z.tanh();
        let h_ref = sig(z) * c_ref.tanh();
        assert_abs_diff_eq!(tape.value(c2)[0], c_ref, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(h2)[0], h_ref, epsilon = 1e-15);
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 3]));
        let h = tape.constant(&Tensor::zeros(&[1, 2]));
        let c = tape.constant(&Tensor::zeros(&[1, 2]));
        let w = LstmWeights {
            input: tape.constant(&Tensor::zeros(&[4, 8])),
            hidden: tape.constant(&Tensor::zeros(&[2, 8])),
            bias: tape.constant(&Tensor::zeros(&[8])),
        };
        assert!(matches!(recurrent_step(&mut tape, x, (h, c), &w), Err(NumericsError::Shape(_))));
    }
}
