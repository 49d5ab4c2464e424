//! Affine maps, the two-layer MLP and the bidirectional LSTM encoder.
//!
//! Weights follow the `out×in` convention: an affine map on row-vector
//! inputs is `x · Wᵀ + b`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, inp: usize, out: usize, bias: bool, rng: &mut R) -> Result<()> {
    store.init_affine(&format!("{prefix}.weight"), out, inp, rng)?;
    if bias {
        store.init_bias(&format!("{prefix}.bias"), out, inp, rng)?;
    }
    Ok(())
}

/// `x · Wᵀ (+ b)` using `{prefix}.weight` and, if present, `{prefix}.bias`.
pub fn linear<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let y = tape.matmul_nt(x, w)?;
    let bias = format!("{prefix}.bias");
    if store.contains(&bias) {
        let b = tape.param(store, &bias)?;
        tape.add_row(y, b)
    } else {
        Ok(y)
    }
}

/// Two affine layers with a ReLU between them: `relu(x·W1ᵀ + b1)·W2ᵀ + b2`.
pub fn mlp2(tape: &mut Tape<'_>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.matmul_nt(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let y = tape.matmul_nt(h, w2)?;
    tape.add_row(y, b2)
}

pub fn init_mlp2<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, inp: usize, hidden: usize, out: usize, rng: &mut R) -> Result<()> {
    init_linear(store, &format!("{prefix}.l1"), inp, hidden, true, rng)?;
    init_linear(store, &format!("{prefix}.l2"), hidden, out, true, rng)
}

/// [`mlp2`] with weights `{prefix}.l1.*` and `{prefix}.l2.*`.
pub fn mlp2_named<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let p = |s: &str| format!("{prefix}.{s}");
    let w1 = tape.param(store, &p("l1.weight"))?;
    let b1 = tape.param(store, &p("l1.bias"))?;
    let w2 = tape.param(store, &p("l2.weight"))?;
    let b2 = tape.param(store, &p("l2.bias"))?;
    mlp2(tape, x, w1, b1, w2, b2)
}

/// One LSTM direction: `{prefix}.w_ih` (4h×in), `{prefix}.w_hh` (4h×h) and
/// `{prefix}.bias` (1×4h), gates stacked as input, forget, cell, output.
pub fn init_lstm<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, inp: usize, hidden: usize, rng: &mut R) -> Result<()> {
    store.init_affine(&format!("{prefix}.w_ih"), 4 * hidden, inp, rng)?;
    store.init_affine(&format!("{prefix}.w_hh"), 4 * hidden, hidden, rng)?;
    store.init_bias(&format!("{prefix}.bias"), 4 * hidden, hidden, rng)?;
    let b = store.get_mut(&format!("{prefix}.bias")).expect("just inserted");
    b.data[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    Ok(())
}

/// Input-side gate pre-activations `x · W_ihᵀ + b` of one direction, one row
/// per input row.
pub fn lstm_input_proj<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w_ih = tape.param(store, &format!("{prefix}.w_ih"))?;
    let bias = tape.param(store, &format!("{prefix}.bias"))?;
    let xw = tape.matmul_nt(x, w_ih)?;
    tape.add_row(xw, bias)
}

/// Runs one direction over precomputed input projections and returns the
/// hidden state at every position, in position order.
fn lstm_direction<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, xw: Var, reverse: bool) -> Result<Vec<Var>> {
    let w_hh = tape.param(store, &format!("{prefix}.w_hh"))?;
    let (four_h, hidden) = tape.shape(w_hh);
    if four_h != 4 * hidden {
        return Err(Error::dim(format!("{prefix}.w_hh is {four_h}x{hidden}, expected 4h x h")));
    }
    let (steps, width) = tape.shape(xw);
    if width != four_h {
        return Err(Error::dim(format!("input projection is {steps}x{width}, expected width {four_h}")));
    }

    let mut out = vec![None; steps];
    let mut state: Option<(Var, Var)> = None;
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let mut gates = tape.slice_rows(xw, t, t + 1)?;
        if let Some((h, _)) = state {
            let rec = tape.matmul_nt(h, w_hh)?;
            gates = tape.add(gates, rec)?;
        }
        let i = tape.slice_cols(gates, 0, hidden)?;
        let f = tape.slice_cols(gates, hidden, 2 * hidden)?;
        let g = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
        let o = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
        let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
        let ig = tape.mul(i, g)?;
        let c = match state {
            Some((_, c_prev)) => {
                let fc = tape.mul(f, c_prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        out[t] = Some(h);
        state = Some((h, c));
    }
    Ok(out.into_iter().map(|h| h.expect("every step visited")).collect())
}

/// Bidirectional LSTM from the per-step input projections of the forward
/// (`{prefix}.fwd`) and backward (`{prefix}.bwd`) directions.
pub fn bilstm_from_proj<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, xw_fwd: Var, xw_bwd: Var) -> Result<(Var, Var)> {
    let steps = tape.shape(xw_fwd).0;
    if steps == 0 {
        return Err(Error::EmptySequence);
    }
    let fwd = lstm_direction(tape, store, &format!("{prefix}.fwd"), xw_fwd, false)?;
    let bwd = lstm_direction(tape, store, &format!("{prefix}.bwd"), xw_bwd, true)?;
    let hf = tape.concat_rows(&fwd)?;
    let hb = tape.concat_rows(&bwd)?;
    let q_w = tape.concat_cols(hf, hb)?;
    let q_s = tape.concat_cols(fwd[steps - 1], bwd[0])?;
    Ok((q_w, q_s))
}

/// Bidirectional LSTM over the rows of `e` (`L×in`).
///
/// Returns `(q_w, q_s)`: `q_w` row `t` is `[h_fwd(t), h_bwd(t)]`; `q_s` joins
/// the forward pass's last state (position `L-1`) with the backward pass's
/// last state (position 0).
pub fn bilstm_encode<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, e: Var) -> Result<(Var, Var)> {
    if tape.shape(e).0 == 0 {
        return Err(Error::EmptySequence);
    }
    let xf = lstm_input_proj(tape, store, &format!("{prefix}.fwd"), e)?;
    let xb = lstm_input_proj(tape, store, &format!("{prefix}.bwd"), e)?;
    bilstm_from_proj(tape, store, prefix, xf, xb)
}
