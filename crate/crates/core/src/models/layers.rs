//! Building blocks shared by the backbone families.

use rand::Rng;

use crate::numerics::{recurrent_step, LstmWeights, Tape, Tensor, Var};

use super::params::{Bound, ParamStore};
use super::ModelError;

pub fn push_linear<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) {
    store.push_uniform(&format!("{prefix}.w"), &[d_in, d_out], d_in, rng);
    store.push_const(&format!("{prefix}.b"), &[d_out], 0.0);
}

/// `x · W + b` for `x` of shape `[n, d_in]`.
pub fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    Ok(tape.add_row(y, p.get(&format!("{prefix}.b"))?)?)
}

pub fn push_lstm<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, rng: &mut R) {
    store.push_uniform(&format!("{prefix}.w_in"), &[d_in, 4 * hidden], hidden, rng);
    store.push_uniform(&format!("{prefix}.w_h"), &[hidden, 4 * hidden], hidden, rng);
    // forget-gate bias starts at 1
    let bias = Tensor::from_fn(&[4 * hidden], |i| if (hidden..2 * hidden).contains(&i) { 1.0 } else { 0.0 });
    store.push(format!("{prefix}.b"), bias);
}

/// Runs an LSTM over `seq` laid out as `[batch·steps, d_in]` (sample-major) and
/// returns the final hidden state `[batch, hidden]`.
pub fn lstm_last_hidden(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    seq: Var,
    batch: usize,
    steps: usize,
    hidden: usize,
) -> Result<Var, ModelError> {
    let w = LstmWeights {
        input: p.get(&format!("{prefix}.w_in"))?,
        hidden: p.get(&format!("{prefix}.w_h"))?,
        bias: p.get(&format!("{prefix}.b"))?,
    };
    let zeros = Tensor::zeros(&[batch, hidden]);
    let mut h = tape.constant(&zeros);
    let mut c = tape.constant(&zeros);
    for step in 0..steps {
        let rows: Vec<usize> = (0..batch).map(|b| b * steps + step).collect();
        let x = tape.gather_rows(seq, &rows)?;
        (h, c) = recurrent_step(tape, x, (h, c), &w)?;
    }
    Ok(h)
}

pub fn push_transformer_block<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) {
    store.push_const(&format!("{prefix}.ln1.g"), &[dim], 1.0);
    store.push_const(&format!("{prefix}.ln1.b"), &[dim], 0.0);
    for m in ["q", "k", "v", "o"] {
        store.push_uniform(&format!("{prefix}.attn.{m}"), &[dim, dim], dim, rng);
    }
    store.push_const(&format!("{prefix}.ln2.g"), &[dim], 1.0);
    store.push_const(&format!("{prefix}.ln2.b"), &[dim], 0.0);
    push_linear(store, &format!("{prefix}.mlp1"), dim, 2 * dim, rng);
    push_linear(store, &format!("{prefix}.mlp2"), 2 * dim, dim, rng);
}

pub fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let g = p.get(&format!("{prefix}.g"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(tape.layer_norm(x, g, b)?)
}

/// Pre-norm transformer block over `x: [tokens, dim]`; attention is restricted
/// to contiguous token groups of length `group`.
pub fn transformer_block(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, group: usize) -> Result<Var, ModelError> {
    let (tokens, dim) = (tape.shape(x)[0], tape.shape(x)[1]);
    let h = layer_norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let q = tape.matmul(h, p.get(&format!("{prefix}.attn.q"))?)?;
    let k = tape.matmul(h, p.get(&format!("{prefix}.attn.k"))?)?;
    let v = tape.matmul(h, p.get(&format!("{prefix}.attn.v"))?)?;
    let scale = 1.0 / (dim as f64).sqrt();
    let mut outs = Vec::with_capacity(tokens / group);
    for start in (0..tokens).step_by(group) {
        let rows: Vec<usize> = (start..start + group).collect();
        let (qg, kg, vg) = (tape.gather_rows(q, &rows)?, tape.gather_rows(k, &rows)?, tape.gather_rows(v, &rows)?);
        let kt = tape.transpose(kg)?;
        let scores = tape.matmul(qg, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1.0)?;
        outs.push(tape.matmul(attn, vg)?);
    }
    let mixed = tape.concat(&outs)?;
    let mixed = tape.matmul(mixed, p.get(&format!("{prefix}.attn.o"))?)?;
    let x = tape.add(x, mixed)?;
    let h = layer_norm(tape, p, &format!("{prefix}.ln2"), x)?;
    let h = linear(tape, p, &format!("{prefix}.mlp1"), h)?;
    let h = tape.gelu(h);
    let h = linear(tape, p, &format!("{prefix}.mlp2"), h)?;
    Ok(tape.add(x, h)?)
}

/// Mean over contiguous groups of rows: `[groups·len, dim]` to `[groups, dim]`.
pub fn mean_groups(tape: &mut Tape, x: Var, groups: usize) -> Result<Var, ModelError> {
    let (n, dim) = (tape.shape(x)[0], tape.shape(x)[1]);
    let r = tape.reshape(x, &[groups, n / groups, dim])?;
    let r = tape.permute(r, &[0, 2, 1])?;
    Ok(tape.mean_last(r)?)
}
