//! Projection of graph outputs into question-word space, question-guided
//! fusion, stream merging, and the three answer heads with their losses.

use rand::Rng;

use crate::config::{Dims, Head};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Low-rank bilinear attention of nodes `x` (`n×C`) onto question words
/// `q_w` (`L×C_w`).
///
/// Logits `(X·U)(Q_w·V)ᵀ` are normalized over the nodes for each word, and
/// word `l` receives the weighted mix of the projected nodes `X·U·P`.
pub fn bilinear_attend(tape: &mut Tape<'_>, x: Var, q_w: Var, u: Var, v: Var, p: Var) -> Result<Var> {
    let xu = tape.matmul(x, u)?;
    let qv = tape.matmul(q_w, v)?;
    let logits = tape.matmul_nt(xu, qv)?;
    let weights = tape.softmax(logits, 0)?;
    let values = tape.matmul(xu, p)?;
    tape.matmul_tn(weights, values)
}

/// [`bilinear_attend`] with `{prefix}.u`, `{prefix}.v`, `{prefix}.p`.
pub fn bilinear_named<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, x: Var, q_w: Var) -> Result<Var> {
    let u = tape.param(store, &format!("{prefix}.u"))?;
    let v = tape.param(store, &format!("{prefix}.v"))?;
    let p = tape.param(store, &format!("{prefix}.p"))?;
    bilinear_attend(tape, x, q_w, u, v, p)
}

/// Additive attention over the rows of `rows` with `q_s` as the query.
/// Returns the `n×1` weights and the `1×c` weighted row.
pub fn additive_attention<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, rows: Var, q_s: Var) -> Result<(Var, Var)> {
    let w_rows = tape.param(store, &format!("{prefix}.w_rows"))?;
    let keys = tape.matmul_nt(rows, w_rows)?;
    let query = nn::linear(tape, store, &format!("{prefix}.query"), q_s)?;
    let hidden = tape.add_row(keys, query)?;
    let hidden = tape.tanh(hidden);
    let score = tape.param(store, &format!("{prefix}.score"))?;
    let logits = tape.matmul_nt(hidden, score)?;
    let alpha = tape.softmax(logits, 0)?;
    let pooled = tape.matmul_tn(alpha, rows)?;
    Ok((alpha, pooled))
}

/// Attends over the stacked spatial and temporal projections and maps the
/// result through `{prefix}.out` and a ReLU.
pub fn fuse<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, spatial_proj: Var, temporal_proj: Var, q_s: Var) -> Result<Var> {
    let (sr, sc) = tape.shape(spatial_proj);
    let (tr, tc) = tape.shape(temporal_proj);
    if (sr, sc) != (tr, tc) {
        return Err(Error::dim(format!("spatial projection {sr}x{sc} vs temporal {tr}x{tc}")));
    }
    let rows = tape.concat_rows(&[spatial_proj, temporal_proj])?;
    let (_, pooled) = additive_attention(tape, store, &format!("{prefix}.attn"), rows, q_s)?;
    let z = nn::linear(tape, store, &format!("{prefix}.out"), pooled)?;
    Ok(tape.relu(z))
}

/// Sums stream vectors and applies `{prefix}` affine + ReLU; a single stream
/// passes through unchanged.
pub fn merge_streams<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, zs: &[Var]) -> Result<Var> {
    match zs {
        [] => Err(Error::config("no streams to merge")),
        [z] => Ok(*z),
        [first, rest @ ..] => {
            let mut sum = *first;
            for &z in rest {
                sum = tape.add(sum, z)?;
            }
            let y = nn::linear(tape, store, prefix, sum)?;
            Ok(tape.relu(y))
        }
    }
}

/// `Σ_{i≠correct} max(0, 1 − (s[correct] − s[i]))` over an `M×1` score column.
pub fn hinge_loss(tape: &mut Tape<'_>, scores: Var, correct: usize) -> Result<Var> {
    let (m, c) = tape.shape(scores);
    if c != 1 || correct >= m {
        return Err(Error::Label { label: correct, classes: m });
    }
    let pos = tape.slice_rows(scores, correct, correct + 1)?;
    let neg_pos = tape.scale(pos, -1.0);
    let margins = tape.add_row(scores, neg_pos)?;
    let margins = tape.add_scalar(margins, 1.0);
    // The correct slot has margin exactly 1; it is masked after the ReLU.
    let hinge = tape.relu(margins);
    let mask = (0..m).map(|i| if i == correct { 0.0 } else { 1.0 }).collect();
    let hinge = tape.mul_const(hinge, mask)?;
    tape.sum_all(hinge)
}

/// Plain-number hinge loss, same definition as [`hinge_loss`].
pub fn hinge_value(scores: &[f64], correct: usize) -> f64 {
    scores.iter().enumerate().filter(|&(i, _)| i != correct).map(|(_, s)| (1.0 - (scores[correct] - s)).max(0.0)).sum()
}

/// `−log softmax(logits)[label]` for a `1×A` logit row.
pub fn cross_entropy(tape: &mut Tape<'_>, logits: Var, label: usize) -> Result<Var> {
    let (r, a) = tape.shape(logits);
    if r != 1 {
        return Err(Error::dim(format!("logits must be one row, got {r}x{a}")));
    }
    if label >= a {
        return Err(Error::Label { label, classes: a });
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.slice_cols(logp, label, label + 1)?;
    Ok(tape.scale(picked, -1.0))
}

/// `(pred − target)²` for a `1×1` prediction.
pub fn mse_loss(tape: &mut Tape<'_>, pred: Var, target: f64) -> Result<Var> {
    if tape.shape(pred) != (1, 1) {
        let (r, c) = tape.shape(pred);
        return Err(Error::dim(format!("count prediction must be 1x1, got {r}x{c}")));
    }
    let diff = tape.add_scalar(pred, -target);
    tape.mul(diff, diff)
}

/// Nearest integer, clamped into `lo..=hi`.
pub fn round_count(pred: f64, lo: i64, hi: i64) -> i64 {
    if pred.is_nan() {
        return lo;
    }
    (pred.round().clamp(lo as f64, hi as f64)) as i64
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Registers bilinear attention and fusion weights for one stream.
pub fn init_fusion<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &Dims, rng: &mut R) -> Result<()> {
    let h = dims.c_w / 2;
    for kind in ["spatial", "temporal"] {
        let p = format!("{prefix}.bilinear.{kind}");
        // Right-multiplied: X·U, Q_w·V, (X·U)·P.
        store.init_uniform(&format!("{p}.u"), dims.c, h, dims.c, rng)?;
        store.init_uniform(&format!("{p}.v"), dims.c_w, h, dims.c_w, rng)?;
        store.init_uniform(&format!("{p}.p"), h, dims.c_w, h, rng)?;
    }
    let a = format!("{prefix}.fusion.attn");
    store.init_affine(&format!("{a}.w_rows"), dims.c_w, dims.c_w, rng)?;
    nn::init_linear(store, &format!("{a}.query"), dims.c_w, dims.c_w, true, rng)?;
    store.init_affine(&format!("{a}.score"), 1, dims.c_w, rng)?;
    nn::init_linear(store, &format!("{prefix}.fusion.out"), dims.c_w, dims.c_w, true, rng)
}

/// Registers the stream merge (only with two streams) and the answer head.
pub fn init_head<R: Rng + ?Sized>(store: &mut ParamStore, dims: &Dims, head: &Head, streams: usize, rng: &mut R) -> Result<()> {
    if streams > 1 {
        nn::init_linear(store, "merge", dims.c_w, dims.c_w, true, rng)?;
    }
    match *head {
        Head::Multichoice { .. } => nn::init_linear(store, "head.score", dims.c_w, 1, true, rng),
        Head::OpenEnded { classes } => nn::init_mlp2(store, "head.cls", dims.c_w, dims.d, classes, rng),
        Head::Count { .. } => nn::init_linear(store, "head.count", dims.c_w, 1, true, rng),
    }
}
