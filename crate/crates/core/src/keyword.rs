//! Keyword attention: word weights pick out the question's keywords, the
//! attended word vector scores every object, and node features are boosted
//! by their score.

use rand::Rng;

use crate::config::Dims;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct KeywordAttentionOut {
    /// `L×1` word weights, absent when word attention is disabled.
    pub a_w: Option<Var>,
    /// `1×embed` attended question feature.
    pub e_hat: Var,
    /// `TK×1` object scores, absent when object attention is disabled.
    pub a_o: Option<Var>,
    /// `TK×C_o` node features.
    pub v: Var,
}

/// `A_w = softmax(logits)` over words and `Ê = A_wᵀ·E`.
pub fn attend_words(tape: &mut Tape<'_>, logits: Var, e: Var) -> Result<(Var, Var)> {
    let (l, c) = tape.shape(logits);
    if l == 0 {
        return Err(Error::EmptySequence);
    }
    if c != 1 {
        return Err(Error::dim(format!("word logits must be a column, got {l}x{c}")));
    }
    let a_w = tape.softmax(logits, 0)?;
    let e_hat = tape.matmul_tn(a_w, e)?;
    Ok((a_w, e_hat))
}

/// Word attention with logits from the MLP at `{prefix}.l1`, `{prefix}.l2`.
pub fn word_attention<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, q_w: Var, e: Var) -> Result<(Var, Var)> {
    let (lq, _) = tape.shape(q_w);
    let (le, _) = tape.shape(e);
    if lq != le {
        return Err(Error::dim(format!("Q_w has {lq} rows but E has {le}")));
    }
    if lq == 0 {
        return Err(Error::EmptySequence);
    }
    let logits = nn::mlp2_named(tape, store, prefix, q_w)?;
    attend_words(tape, logits, e)
}

/// `A_o = σ(Ô · (W_q · Êᵀ))`.
pub fn object_attention(tape: &mut Tape<'_>, o_hat: Var, e_hat: Var, w_q: Var) -> Result<Var> {
    let query = tape.matmul_nt(w_q, e_hat)?;
    let logits = tape.matmul(o_hat, query)?;
    Ok(tape.sigmoid(logits))
}

/// `V = (1 + A_o) ⊙ Ô`, scores broadcast across features.
pub fn augment_nodes(tape: &mut Tape<'_>, o_hat: Var, a_o: Var) -> Result<Var> {
    let gain = tape.add_scalar(a_o, 1.0);
    tape.mul_col(o_hat, gain)
}

pub fn init_keyword<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dims: &Dims,
    word_attention: bool,
    object_attention: bool,
    rng: &mut R,
) -> Result<()> {
    if word_attention {
        nn::init_mlp2(store, &format!("{prefix}.word_mlp"), dims.c_w, dims.c_w, 1, rng)?;
    } else {
        nn::init_linear(store, &format!("{prefix}.sentence_proj"), dims.c_w, dims.embed, true, rng)?;
    }
    if object_attention {
        store.init_affine(&format!("{prefix}.w_q"), dims.c_o, dims.embed, rng)?;
    }
    Ok(())
}

/// Full keyword stage. Disabled word attention replaces `Ê` by an affine
/// image of `Q_s`; disabled object attention leaves `V = Ô`.
#[allow(clippy::too_many_arguments)]
pub fn keyword_attention<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    prefix: &str,
    o_hat: Var,
    q_w: Var,
    q_s: Var,
    e: Var,
    word_attention_on: bool,
    object_attention_on: bool,
) -> Result<KeywordAttentionOut> {
    let (a_w, e_hat) = if word_attention_on {
        let (a, e_hat) = word_attention(tape, store, &format!("{prefix}.word_mlp"), q_w, e)?;
        (Some(a), e_hat)
    } else {
        (None, nn::linear(tape, store, &format!("{prefix}.sentence_proj"), q_s)?)
    };
    if !object_attention_on {
        return Ok(KeywordAttentionOut { a_w, e_hat, a_o: None, v: o_hat });
    }
    let w_q = tape.param(store, &format!("{prefix}.w_q"))?;
    let a_o = object_attention(tape, o_hat, e_hat, w_q)?;
    let v = augment_nodes(tape, o_hat, a_o)?;
    Ok(KeywordAttentionOut { a_w, e_hat, a_o: Some(a_o), v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::stable_sigmoid;

    #[test]
    fn single_word_gets_all_weight() {
        let mut t = Tape::new();
        let logits = t.matrix(1, 1, vec![-3.7]).unwrap();
        let e = t.matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let (a, e_hat) = attend_words(&mut t, logits, e).unwrap();
        assert_eq!(t.value(a), &[1.0]);
        assert_eq!(t.value(e_hat), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn closed_form_three_words() {
        let ln2 = 2f64.ln();
        let mut t = Tape::new();
        let logits = t.matrix(3, 1, vec![0.0, ln2, ln2]).unwrap();
        let e = t.matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let (a, e_hat) = attend_words(&mut t, logits, e).unwrap();
        for (got, want) in t.value(a).iter().zip([0.2, 0.4, 0.4]) {
            assert!((got - want).abs() < 1e-15);
        }
        // 0.2*[1,0] + 0.4*[0,1] + 0.4*[2,3]
        for (got, want) in t.value(e_hat).iter().zip([1.0, 1.6]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_question_feature_scores_one_half() {
        let mut t = Tape::new();
        let o = t.matrix(2, 2, vec![1.0, 2.0, -3.0, 4.0]).unwrap();
        let e = t.zeros(1, 3);
        let w = t.matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let a = object_attention(&mut t, o, e, w).unwrap();
        assert_eq!(t.value(a), &[0.5, 0.5]);
    }

    #[test]
    fn two_objects_match_dot_product_oracle() {
        let o_rows = [[0.3, -0.2], [1.1, 0.4]];
        let w = [[0.5, -1.0, 0.25], [2.0, 0.0, -0.5]];
        let e = [0.2, 0.7, -0.4];
        let mut t = Tape::new();
        let ov = t.matrix(2, 2, o_rows.concat()).unwrap();
        let wv = t.matrix(2, 3, w.concat()).unwrap();
        let ev = t.matrix(1, 3, e.to_vec()).unwrap();
        let a = object_attention(&mut t, ov, ev, wv).unwrap();
        for (i, row) in o_rows.iter().enumerate() {
            let q: Vec<f64> = w.iter().map(|wr| wr.iter().zip(&e).map(|(x, y)| x * y).sum()).collect();
            let logit: f64 = row.iter().zip(&q).map(|(x, y)| x * y).sum();
            assert!((t.value(a)[i] - stable_sigmoid(logit)).abs() < 1e-15);
        }
    }

    #[test]
    fn augmentation_scales_rows() {
        let mut t = Tape::new();
        let o = t.matrix(2, 2, vec![1.0, -2.0, 4.0, 8.0]).unwrap();
        let zero = t.zeros(2, 1);
        let v0 = augment_nodes(&mut t, o, zero).unwrap();
        assert_eq!(t.value(v0), t.value(o));
        let one = t.matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let v1 = augment_nodes(&mut t, o, one).unwrap();
        assert_eq!(t.value(v1), &[2.0, -4.0, 8.0, 16.0]);
        let mixed = t.matrix(2, 1, vec![0.25, 0.75]).unwrap();
        let vm = augment_nodes(&mut t, o, mixed).unwrap();
        assert_eq!(t.value(vm), &[1.25, -2.5, 7.0, 14.0]);
    }

    #[test]
    fn mismatched_rows_are_dimension_errors() {
        let mut t = Tape::new();
        let o = t.zeros(3, 2);
        let a = t.zeros(2, 1);
        assert!(matches!(augment_nodes(&mut t, o, a), Err(Error::Dimension(_))));
        let w = t.zeros(2, 4);
        let e = t.zeros(1, 3);
        assert!(matches!(object_attention(&mut t, o, e, w), Err(Error::Dimension(_))));
    }
}
