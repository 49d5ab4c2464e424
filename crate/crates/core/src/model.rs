//! The full network: per-stream encoding, keyword attention, graph reasoning
//! and fusion, stream merge, then the task head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Head, ModelConfig, Stream};
use crate::encoder::{self, ObjectFeatureBank};
use crate::error::{Error, Result};
use crate::fusion;
use crate::gradcheck::LossEval;
use crate::graph::{self, NeighborIndex};
use crate::keyword;
use crate::nn;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Ground truth for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Target {
    /// Index of the correct candidate or answer class.
    Index(usize),
    Count(f64),
}

/// Raw head output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Output {
    /// One score per candidate.
    Scores(Vec<f64>),
    /// One logit per answer class.
    Logits(Vec<f64>),
    Count(f64),
}

impl Output {
    /// Predicted index (argmax, lowest index on ties) or rounded, clamped
    /// count.
    pub fn predict(&self, head: &Head) -> i64 {
        match (self, head) {
            (Output::Scores(s) | Output::Logits(s), _) => fusion::argmax(s) as i64,
            (Output::Count(c), Head::Count { lo, hi }) => fusion::round_count(*c, *lo, *hi),
            (Output::Count(c), _) => c.round() as i64,
        }
    }
}

/// Attention and neighbor data of one stream for one question sequence.
#[derive(Debug, Clone, Serialize)]
pub struct StreamTrace {
    pub stream: Stream,
    pub word_weights: Option<Vec<f64>>,
    /// One score per object, row `t*K + k`.
    pub object_scores: Option<Vec<f64>>,
    /// Graph input nodes `V`, row-major `TK×C_o`.
    pub nodes: Vec<f64>,
    pub spatial_neighbors: Vec<NeighborIndex>,
    pub temporal_neighbors: Vec<NeighborIndex>,
}

pub struct Forward {
    pub loss: Option<Var>,
    pub output: Output,
    /// Indexed by question sequence, then stream.
    pub traces: Vec<Vec<StreamTrace>>,
}

/// Registers every weight the configuration uses, drawn from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for s in &cfg.streams {
        let p = s.prefix();
        encoder::init_encoder(&mut store, p, &cfg.dims, cfg.vocab_size, &mut rng)?;
        keyword::init_keyword(&mut store, &format!("{p}.keyword"), &cfg.dims, cfg.word_attention, cfg.object_attention, &mut rng)?;
        graph::init_graph(&mut store, &format!("{p}.graph"), &cfg.dims, &cfg.graph, &mut rng)?;
        fusion::init_fusion(&mut store, p, &cfg.dims, &mut rng)?;
    }
    fusion::init_head(&mut store, &cfg.dims, &cfg.head, cfg.streams.len(), &mut rng)?;
    Ok(store)
}

fn check_inputs(cfg: &ModelConfig, banks: &[&ObjectFeatureBank], sequences: &[Vec<usize>]) -> Result<()> {
    if banks.len() != cfg.streams.len() {
        return Err(Error::Dataset(format!("{} feature banks for {} streams", banks.len(), cfg.streams.len())));
    }
    for (bank, stream) in banks.iter().zip(&cfg.streams) {
        if bank.stream != *stream {
            return Err(Error::Dataset(format!("expected {} features, got {}", stream.as_str(), bank.stream.as_str())));
        }
        if (bank.t, bank.k) != (cfg.t, cfg.k) {
            return Err(Error::Dataset(format!("features have T={}, K={} but the model expects T={}, K={}", bank.t, bank.k, cfg.t, cfg.k)));
        }
        if bank.c() != cfg.dims.c || bank.c_s() != cfg.dims.c_s {
            return Err(Error::Dataset(format!(
                "features have C={}, C_s={} but the model expects C={}, C_s={}",
                bank.c(),
                bank.c_s(),
                cfg.dims.c,
                cfg.dims.c_s
            )));
        }
    }
    let want = match cfg.head {
        Head::Multichoice { candidates } => candidates,
        _ => 1,
    };
    if sequences.len() != want {
        return Err(Error::Dataset(format!("{} question sequences, head expects {want}", sequences.len())));
    }
    Ok(())
}

/// Runs one sample. `banks` follow `cfg.streams`; `sequences` holds one
/// token sequence, or one question+answer sequence per candidate for
/// multichoice. Dropout is active iff `dropout_rng` is given.
pub fn forward<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    cfg: &ModelConfig,
    banks: &[&'a ObjectFeatureBank],
    sequences: &[Vec<usize>],
    target: Option<Target>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward> {
    check_inputs(cfg, banks, sequences)?;
    let training = dropout_rng.is_some();
    let mut drop = |tape: &mut Tape<'a>, x: Var| -> Result<Var> {
        match dropout_rng.as_deref_mut() {
            Some(rng) => tape.dropout(x, cfg.dropout, training, rng),
            None => Ok(x),
        }
    };

    let mut o_hats = Vec::with_capacity(banks.len());
    let mut token_proj = Vec::with_capacity(banks.len());
    for bank in banks {
        let p = bank.stream.prefix();
        let o = encoder::encode_video(tape, store, p, bank)?;
        o_hats.push(drop(tape, o)?);
        token_proj.push(encoder::project_tokens(tape, store, &format!("{p}.question"), sequences)?);
    }

    let mut merged = Vec::with_capacity(sequences.len());
    let mut traces = Vec::with_capacity(sequences.len());
    for tokens in sequences {
        let mut zs = Vec::with_capacity(banks.len());
        let mut seq_traces = Vec::with_capacity(banks.len());
        for ((bank, &o_hat), proj) in banks.iter().zip(&o_hats).zip(&token_proj) {
            let p = bank.stream.prefix();
            let q = encoder::encode_projected(tape, store, &format!("{p}.question"), proj, tokens)?;
            let kw = keyword::keyword_attention(
                tape,
                store,
                &format!("{p}.keyword"),
                o_hat,
                q.q_w,
                q.q_s,
                q.e,
                cfg.word_attention,
                cfg.object_attention,
            )?;
            let g = graph::run_graphs(tape, store, &format!("{p}.graph"), kw.v, cfg.t, cfg.k, &cfg.graph)?;
            let sp = fusion::bilinear_named(tape, store, &format!("{p}.bilinear.spatial"), g.spatial, q.q_w)?;
            let tp = fusion::bilinear_named(tape, store, &format!("{p}.bilinear.temporal"), g.temporal, q.q_w)?;
            zs.push(fusion::fuse(tape, store, &format!("{p}.fusion"), sp, tp, q.q_s)?);
            seq_traces.push(StreamTrace {
                stream: bank.stream,
                word_weights: kw.a_w.map(|a| tape.value(a).to_vec()),
                object_scores: kw.a_o.map(|a| tape.value(a).to_vec()),
                nodes: tape.value(kw.v).to_vec(),
                spatial_neighbors: g.spatial_neighbors,
                temporal_neighbors: g.temporal_neighbors,
            });
        }
        let z = fusion::merge_streams(tape, store, "merge", &zs)?;
        merged.push(drop(tape, z)?);
        traces.push(seq_traces);
    }

    let (output, loss) = match cfg.head {
        Head::Multichoice { .. } => {
            let scores = merged.iter().map(|&z| nn::linear(tape, store, "head.score", z)).collect::<Result<Vec<_>>>()?;
            let scores = tape.concat_rows(&scores)?;
            let loss = match target {
                Some(Target::Index(i)) => Some(fusion::hinge_loss(tape, scores, i)?),
                Some(Target::Count(_)) => return Err(Error::Dataset("multichoice target must be an index".into())),
                None => None,
            };
            (Output::Scores(tape.value(scores).to_vec()), loss)
        }
        Head::OpenEnded { .. } => {
            let logits = nn::mlp2_named(tape, store, "head.cls", merged[0])?;
            let loss = match target {
                Some(Target::Index(i)) => Some(fusion::cross_entropy(tape, logits, i)?),
                Some(Target::Count(_)) => return Err(Error::Dataset("open-ended target must be a class".into())),
                None => None,
            };
            (Output::Logits(tape.value(logits).to_vec()), loss)
        }
        Head::Count { .. } => {
            let pred = nn::linear(tape, store, "head.count", merged[0])?;
            let loss = match target {
                Some(Target::Count(c)) => Some(fusion::mse_loss(tape, pred, c)?),
                Some(Target::Index(i)) => Some(fusion::mse_loss(tape, pred, i as f64)?),
                None => None,
            };
            (Output::Count(tape.scalar(pred)), loss)
        }
    };
    Ok(Forward { loss, output, traces })
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_grads(
    store: &ParamStore,
    cfg: &ModelConfig,
    banks: &[&ObjectFeatureBank],
    sequences: &[Vec<usize>],
    target: Target,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossEval, Output)> {
    let mut tape = Tape::new();
    let f = forward(&mut tape, store, cfg, banks, sequences, Some(target), dropout_rng)?;
    let loss = f.loss.expect("target given");
    Ok((LossEval::from_tape(&mut tape, loss)?, f.output))
}

/// Evaluation-mode head output for one sample.
pub fn predict(store: &ParamStore, cfg: &ModelConfig, banks: &[&ObjectFeatureBank], sequences: &[Vec<usize>]) -> Result<Output> {
    let mut tape = Tape::new();
    Ok(forward(&mut tape, store, cfg, banks, sequences, None, None)?.output)
}

/// Random feature bank with valid geometry, for tests and sanity checks.
pub fn random_bank<R: Rng + ?Sized>(stream: Stream, cfg: &ModelConfig, rng: &mut R) -> ObjectFeatureBank {
    use crate::config::BOX_WIDTH;
    use crate::tensor::Tensor;
    let (t, k, c, c_s) = (cfg.t, cfg.k, cfg.dims.c, cfg.dims.c_s);
    let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let video = Tensor::matrix(t, c, r(t * c)).expect("sized");
    let semantic = Tensor::matrix(t * k, c_s, r(t * k * c_s)).expect("sized");
    let boxes: Vec<f64> = r(t * k * 4)
        .chunks(4)
        .flat_map(|v| {
            let (x, y) = (0.5 * (v[0] + 1.0) * 0.7, 0.5 * (v[1] + 1.0) * 0.7);
            let (w, h) = (0.05 + 0.1 * (v[2] + 1.0), 0.05 + 0.1 * (v[3] + 1.0));
            encoder::box_row(x, y, x + w, y + h)
        })
        .collect();
    let boxes = Tensor::matrix(t * k, BOX_WIDTH, boxes).expect("sized");
    ObjectFeatureBank::new(stream, t, k, video, semantic, boxes).expect("valid geometry")
}
