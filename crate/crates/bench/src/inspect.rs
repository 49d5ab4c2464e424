//! Gradient checking through the full network and attention dumps.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use krst_core::config::{Dims, GraphConfig, Head, ModelConfig, Stream};
use krst_core::gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
use krst_core::model::{self, StreamTrace, Target};
use krst_core::tape::Tape;
use krst_core::{checkpoint, Error, Result};

use crate::dataset;
use crate::train::{model_from_meta, target_of};

/// Relative error bound a head must stay under.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct HeadCheck {
    pub head: Head,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub coords: usize,
    pub rejected_points: usize,
    pub pass: bool,
}

/// Small full-pipeline configuration: both streams, T=2, K=3.
pub fn gradcheck_model(dims: Dims, head: Head) -> ModelConfig {
    ModelConfig {
        dims,
        t: 2,
        k: 3,
        vocab_size: 12,
        graph: GraphConfig::default(),
        head,
        streams: vec![Stream::Appearance, Stream::Motion],
        word_attention: true,
        object_attention: true,
        dropout: 0.0,
    }
}

/// Finite-difference check of one head on random features and length-4
/// token sequences (two candidates for multichoice).
pub fn check_head(dims: Dims, head: Head, seed: u64) -> Result<(HeadCheck, GradCheckReport)> {
    let cfg = gradcheck_model(dims, head);
    let store = model::init_params(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let app = model::random_bank(Stream::Appearance, &cfg, &mut rng);
    let mot = model::random_bank(Stream::Motion, &cfg, &mut rng);
    let (sequences, target) = match head {
        Head::Multichoice { candidates } => {
            ((0..candidates).map(|c| vec![1, 4, 2, 5 + c]).collect::<Vec<_>>(), Target::Index(candidates - 1))
        }
        Head::OpenEnded { classes } => (vec![vec![3, 1, 4, 1]], Target::Index(classes / 2)),
        Head::Count { lo, hi } => (vec![vec![2, 7, 1, 8]], Target::Count(((lo + hi) / 2) as f64)),
    };
    let banks = [&app, &mot];
    let loss = |s: &krst_core::ParamStore| model::loss_and_grads(s, &cfg, &banks, &sequences, target, None).map(|(e, _)| e);
    let report = finite_diff_check(loss, &store, &GradCheckConfig { seed, ..GradCheckConfig::default() })?;
    let check = HeadCheck {
        head,
        max_rel_error: report.max_rel_error,
        worst_param: report.worst.as_ref().map(|w| w.param.clone()),
        coords: report.coords_checked,
        rejected_points: report.rejected_points,
        pass: report.max_rel_error < GRADCHECK_TOLERANCE,
    };
    Ok((check, report))
}

/// Runs [`check_head`] for the three answer heads.
pub fn gradcheck_cmd(dims: Dims, seed: u64) -> Result<Vec<HeadCheck>> {
    let heads = [Head::Multichoice { candidates: 2 }, Head::OpenEnded { classes: 8 }, Head::Count { lo: 1, hi: 10 }];
    heads.into_iter().map(|h| check_head(dims, h, seed).map(|(c, _)| c)).collect()
}

/// Neighbors of one object in one spatial layer; entries are
/// `(frame, object, squared distance)`.
#[derive(Debug, Clone, Serialize)]
pub struct ObjectNeighbors {
    pub frame: usize,
    pub object: usize,
    pub neighbors: Vec<(usize, usize, f64)>,
}

/// Neighbors of one frame in one temporal layer: `(frame, squared distance)`.
#[derive(Debug, Clone, Serialize)]
pub struct FrameNeighbors {
    pub frame: usize,
    pub neighbors: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamDump {
    pub stream: Stream,
    pub word_weights: Option<Vec<f64>>,
    /// `[T][K]`.
    pub object_scores: Option<Vec<Vec<f64>>>,
    /// Graph input nodes, `[T·K][C_o]`.
    pub nodes: Vec<Vec<f64>>,
    /// One entry per layer.
    pub spatial: Vec<Vec<ObjectNeighbors>>,
    pub temporal: Vec<Vec<FrameNeighbors>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SequenceTrace {
    pub words: Vec<String>,
    pub streams: Vec<StreamDump>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionDump {
    pub id: String,
    pub question: String,
    pub output: model::Output,
    pub prediction: i64,
    pub sequences: Vec<SequenceTrace>,
}

fn reshape_trace(trace: StreamTrace, t: usize, k: usize) -> StreamDump {
    let width = (trace.nodes.len() / (t * k)).max(1);
    let spatial = trace
        .spatial_neighbors
        .iter()
        .map(|layer| {
            layer
                .lists
                .iter()
                .enumerate()
                .map(|(row, list)| ObjectNeighbors {
                    frame: row / k,
                    object: row % k,
                    neighbors: list.iter().map(|n| (n.index / k, n.index % k, n.dist)).collect(),
                })
                .collect()
        })
        .collect();
    let temporal = trace
        .temporal_neighbors
        .iter()
        .map(|layer| {
            layer
                .lists
                .iter()
                .enumerate()
                .map(|(frame, list)| FrameNeighbors { frame, neighbors: list.iter().map(|n| (n.index, n.dist)).collect() })
                .collect()
        })
        .collect();
    StreamDump {
        stream: trace.stream,
        word_weights: trace.word_weights,
        object_scores: trace.object_scores.map(|s| s.chunks(k).map(<[f64]>::to_vec).collect()),
        nodes: trace.nodes.chunks(width).map(<[f64]>::to_vec).collect(),
        spatial,
        temporal,
    }
}

/// Word weights, object scores and neighbor lists of one sample.
pub fn dump_attn(checkpoint_path: impl AsRef<Path>, data: impl AsRef<Path>, split: &str, id: &str) -> Result<AttentionDump> {
    let (store, meta) = checkpoint::load(checkpoint_path)?;
    let cfg = model_from_meta(&meta)?;
    let vocab = dataset::read_vocab(&data)?;
    let split = dataset::read_split(&data, split)?;
    let i = split.find(id)?;
    let sample = &split.samples[i];
    let [app, mot] = &split.features[i];
    let banks: Vec<_> = cfg
        .streams
        .iter()
        .map(|s| match s {
            Stream::Appearance => app,
            Stream::Motion => mot,
        })
        .collect();
    let sequences = sample.sequences();
    let mut tape = Tape::new();
    let f = model::forward(&mut tape, &store, &cfg, &banks, &sequences, Some(target_of(sample.answer)), None)?;
    let words = |seq: &[usize]| -> Result<Vec<String>> {
        seq.iter()
            .map(|&t| vocab.word(t).map(str::to_string).ok_or_else(|| Error::Lookup(format!("token {t} not in vocabulary"))))
            .collect()
    };
    let traces = sequences
        .iter()
        .zip(f.traces)
        .map(|(seq, streams)| {
            let streams = streams.into_iter().map(|t| reshape_trace(t, cfg.t, cfg.k)).collect();
            Ok(SequenceTrace { words: words(seq)?, streams })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionDump {
        id: sample.id.clone(),
        question: sample.text.clone(),
        prediction: f.output.predict(&cfg.head),
        output: f.output,
        sequences: traces,
    })
}
