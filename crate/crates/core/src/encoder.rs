//! Video-side and question-side representations.
//!
//! Objects are rows: row `t*K + k` of the object tensors is object `k` of
//! frame `t`. The object projection is therefore `[O_s, O_p] · W_oᵀ`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Dims, Stream, BOX_WIDTH};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const GEOMETRY_TOL: f64 = 1e-9;

/// Per-video features of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeatureBank {
    pub stream: Stream,
    pub t: usize,
    pub k: usize,
    /// `T×C` video-level features.
    pub video: Tensor,
    /// `TK×C_s` object semantic features.
    pub semantic: Tensor,
    /// `TK×6` boxes as x1, y1, x2, y2, w, h in normalized frame coordinates.
    pub boxes: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMeta {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "C_s")]
    pub c_s: usize,
    pub stream: Stream,
}

/// Box row `[x1, y1, x2, y2, w, h]`.
pub fn box_row(x1: f64, y1: f64, x2: f64, y2: f64) -> [f64; BOX_WIDTH] {
    [x1, y1, x2, y2, x2 - x1, y2 - y1]
}

impl ObjectFeatureBank {
    pub fn new(stream: Stream, t: usize, k: usize, video: Tensor, semantic: Tensor, boxes: Tensor) -> Result<Self> {
        let bank = Self { stream, t, k, video, semantic, boxes };
        bank.validate()?;
        Ok(bank)
    }

    pub fn c(&self) -> usize {
        self.video.shape.get(1).copied().unwrap_or(0)
    }

    pub fn c_s(&self) -> usize {
        self.semantic.shape.get(1).copied().unwrap_or(0)
    }

    pub fn meta(&self) -> FeatureMeta {
        FeatureMeta { t: self.t, k: self.k, c: self.c(), c_s: self.c_s(), stream: self.stream }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t * self.k;
        if self.t == 0 || self.k == 0 {
            return Err(Error::dim(format!("bank needs T, K >= 1, got T={}, K={}", self.t, self.k)));
        }
        let check = |name: &str, t: &Tensor, rows: usize, cols: Option<usize>| -> Result<()> {
            let ok = t.shape.len() == 2 && t.shape[0] == rows && cols.is_none_or(|c| t.shape[1] == c);
            if ok {
                Ok(())
            } else {
                Err(Error::dim(format!("{name} has shape {:?}, expected {rows} rows", t.shape)))
            }
        };
        check("I", &self.video, self.t, None)?;
        check("O_s", &self.semantic, n, None)?;
        check("O_p", &self.boxes, n, Some(BOX_WIDTH))?;
        for i in 0..n {
            let b = self.boxes.row(i);
            let bad = b.iter().any(|v| !v.is_finite())
                || b[2] < b[0]
                || b[3] < b[1]
                || ((b[2] - b[0]) - b[4]).abs() > GEOMETRY_TOL
                || ((b[3] - b[1]) - b[5]).abs() > GEOMETRY_TOL;
            if bad {
                return Err(Error::Dataset(format!("box {i} ({b:?}) violates x2>=x1, y2>=y1, w=x2-x1, h=y2-y1")));
            }
        }
        Ok(())
    }

    /// Writes `I.bin`, `O_s.bin`, `O_p.bin` and `meta.json` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("I.bin"), encode_tensor(&self.video))?;
        std::fs::write(dir.join("O_s.bin"), encode_tensor(&self.semantic))?;
        std::fs::write(dir.join("O_p.bin"), encode_tensor(&self.boxes))?;
        std::fs::write(dir.join("meta.json"), serde_json::to_vec(&self.meta())?)?;
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: FeatureMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
        let read = |name: &str| -> Result<Tensor> {
            decode_tensor(&std::fs::read(dir.join(name))?).map_err(|e| match e {
                Error::Format { offset, msg } => Error::Format { offset, msg: format!("{name}: {msg}") },
                other => other,
            })
        };
        let bank = Self::new(meta.stream, meta.t, meta.k, read("I.bin")?, read("O_s.bin")?, read("O_p.bin")?)?;
        if bank.c() != meta.c || bank.c_s() != meta.c_s {
            return Err(Error::Dataset(format!(
                "{}: meta.json says C={}, C_s={} but tensors have {}, {}",
                dir.display(),
                meta.c,
                meta.c_s,
                bank.c(),
                bank.c_s()
            )));
        }
        Ok(bank)
    }
}

/// Feature tensor file: `u64` rank, `rank` `u64` extents, then `f64` values,
/// all little-endian.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.shape.len() + t.data.len()));
    out.extend_from_slice(&(t.shape.len() as u64).to_le_bytes());
    for &e in &t.shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let word = |i: usize| -> Result<u64> {
        let at = 8 * i;
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("slice of 8")))
            .ok_or(Error::Format { offset: at as u64, msg: "truncated tensor header".into() })
    };
    let rank = word(0)? as usize;
    if rank > 8 {
        return Err(Error::Format { offset: 0, msg: format!("implausible rank {rank}") });
    }
    let shape = (0..rank).map(|i| word(1 + i).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let data_at = 8 * (1 + rank);
    let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
    let n = n.ok_or(Error::Format { offset: 8, msg: format!("extents {shape:?} overflow") })?;
    let payload = &bytes[data_at.min(bytes.len())..];
    if payload.len() != 8 * n {
        return Err(Error::Format {
            offset: data_at as u64,
            msg: format!("expected {} payload bytes for shape {shape:?}, found {}", 8 * n, payload.len()),
        });
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    Tensor::new(shape, data)
}

/// `[O_s, O_p] · W_oᵀ`: each object row mapped by `W_o` (`C×(C_s+6)`).
pub fn project_objects(tape: &mut Tape<'_>, semantic: Var, boxes: Var, w_o: Var) -> Result<Var> {
    let joined = tape.concat_cols(semantic, boxes)?;
    tape.matmul_nt(joined, w_o)
}

/// Repeats every row of `video` `k` times, so row `t*k + j` is row `t`.
pub fn tile(tape: &mut Tape<'_>, video: Var, k: usize) -> Result<Var> {
    let t = tape.shape(video).0;
    let idx: Vec<usize> = (0..t * k).map(|i| i / k).collect();
    tape.gather_rows(video, &idx)
}

/// `mlp2([O, tile(I)])` with the MLP at `{prefix}.l1`, `{prefix}.l2`.
pub fn fuse_video_object<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, objects: Var, video: Var) -> Result<Var> {
    let (n, _) = tape.shape(objects);
    let (t, _) = tape.shape(video);
    if t == 0 || n % t != 0 {
        return Err(Error::dim(format!("{n} object rows do not split over {t} frames")));
    }
    let tiled = tile(tape, video, n / t)?;
    let joined = tape.concat_cols(objects, tiled)?;
    nn::mlp2_named(tape, store, prefix, joined)
}

/// Question representation on the tape.
#[derive(Debug, Clone)]
pub struct QuestionEncoding {
    pub tokens: Vec<usize>,
    /// `L×embed` word vectors.
    pub e: Var,
    /// `L×C_w` contextual word features.
    pub q_w: Var,
    /// `1×C_w` sentence feature.
    pub q_s: Var,
}

/// LSTM input projections of every distinct token of a sample, shared by
/// all of its question sequences.
#[derive(Debug, Clone)]
pub struct TokenProjections {
    table: Var,
    fwd: Var,
    bwd: Var,
    /// Token id to row of `fwd`/`bwd`.
    rows: std::collections::BTreeMap<usize, usize>,
}

/// Projects the distinct tokens of `sequences` through both LSTM input maps
/// of the encoder at `prefix`.
pub fn project_tokens<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, sequences: &[Vec<usize>]) -> Result<TokenProjections> {
    let table = tape.param(store, &format!("{prefix}.embed"))?;
    let vocab = tape.shape(table).0;
    let mut rows = std::collections::BTreeMap::new();
    for &id in sequences.iter().flatten() {
        if id >= vocab {
            return Err(Error::Vocabulary(id));
        }
        let next = rows.len();
        rows.entry(id).or_insert(next);
    }
    if rows.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut ids = vec![0; rows.len()];
    for (&id, &r) in &rows {
        ids[r] = id;
    }
    let e = tape.gather_rows(table, &ids)?;
    let fwd = nn::lstm_input_proj(tape, store, &format!("{prefix}.lstm.fwd"), e)?;
    let bwd = nn::lstm_input_proj(tape, store, &format!("{prefix}.lstm.bwd"), e)?;
    Ok(TokenProjections { table, fwd, bwd, rows })
}

/// Encodes one token sequence using projections from [`project_tokens`].
pub fn encode_projected<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    prefix: &str,
    proj: &TokenProjections,
    tokens: &[usize],
) -> Result<QuestionEncoding> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let idx = tokens.iter().map(|id| proj.rows.get(id).copied().ok_or(Error::Vocabulary(*id))).collect::<Result<Vec<_>>>()?;
    let e = tape.gather_rows(proj.table, tokens)?;
    let xf = tape.gather_rows(proj.fwd, &idx)?;
    let xb = tape.gather_rows(proj.bwd, &idx)?;
    let (q_w, q_s) = nn::bilstm_from_proj(tape, store, &format!("{prefix}.lstm"), xf, xb)?;
    Ok(QuestionEncoding { tokens: tokens.to_vec(), e, q_w, q_s })
}

/// Looks tokens up in `{prefix}.embed` and runs the BiLSTM `{prefix}.lstm`.
pub fn encode_question<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, tokens: &[usize]) -> Result<QuestionEncoding> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let proj = project_tokens(tape, store, prefix, &[tokens.to_vec()])?;
    encode_projected(tape, store, prefix, &proj, tokens)
}

/// Registers the encoder weights of one stream under `prefix`.
pub fn init_encoder<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &Dims, vocab: usize, rng: &mut R) -> Result<()> {
    store.init_affine(&format!("{prefix}.object_proj.weight"), dims.c, dims.c_s + BOX_WIDTH, rng)?;
    nn::init_mlp2(store, &format!("{prefix}.fuse"), 2 * dims.c, dims.d, dims.c_o, rng)?;
    // Word vectors start near unit scale per coordinate.
    let embed = (0..vocab * dims.embed).map(|_| rng.random_range(-1.0..1.0)).collect();
    store.insert(format!("{prefix}.question.embed"), Tensor::matrix(vocab, dims.embed, embed)?)?;
    let h = dims.c_w / 2;
    nn::init_lstm(store, &format!("{prefix}.question.lstm.fwd"), dims.embed, h, rng)?;
    nn::init_lstm(store, &format!("{prefix}.question.lstm.bwd"), dims.embed, h, rng)?;
    Ok(())
}

/// Fused object features `Ô` of one stream.
pub fn encode_video<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, prefix: &str, bank: &'a ObjectFeatureBank) -> Result<Var> {
    let video = tape.constant_ref(&bank.video)?;
    let semantic = tape.constant_ref(&bank.semantic)?;
    let boxes = tape.constant_ref(&bank.boxes)?;
    let w_o = tape.param(store, &format!("{prefix}.object_proj.weight"))?;
    let objects = project_objects(tape, semantic, boxes, w_o)?;
    fuse_video_object(tape, store, &format!("{prefix}.fuse"), objects, video)
}

/// One stream's encoded inputs.
#[derive(Debug, Clone)]
pub struct StreamInputs {
    pub stream: Stream,
    pub o_hat: Var,
    pub question: QuestionEncoding,
}

/// Encodes the question once per stream with that stream's own weights.
/// Streams must agree on `T` and `K`.
pub fn build_two_stream<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    banks: &[&'a ObjectFeatureBank],
    tokens: &[usize],
) -> Result<Vec<StreamInputs>> {
    if let Some(first) = banks.first() {
        if let Some(b) = banks.iter().find(|b| (b.t, b.k) != (first.t, first.k)) {
            return Err(Error::dim(format!(
                "{} stream has T={}, K={} but {} stream has T={}, K={}",
                b.stream.as_str(),
                b.t,
                b.k,
                first.stream.as_str(),
                first.t,
                first.k
            )));
        }
    }
    banks
        .iter()
        .map(|bank| {
            let p = bank.stream.prefix();
            let o_hat = encode_video(tape, store, p, bank)?;
            let question = encode_question(tape, store, &format!("{p}.question"), tokens)?;
            Ok(StreamInputs { stream: bank.stream, o_hat, question })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(t: usize, k: usize, c: usize, seed: u64) -> ObjectFeatureBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let video = Tensor::matrix(t, c, r(t * c)).unwrap();
        let semantic = Tensor::matrix(t * k, c, r(t * k * c)).unwrap();
        let boxes: Vec<f64> = (0..t * k).flat_map(|i| box_row(0.1, 0.05 * i as f64, 0.3, 0.5)).collect();
        let boxes = Tensor::matrix(t * k, BOX_WIDTH, boxes).unwrap();
        ObjectFeatureBank::new(Stream::Appearance, t, k, video, semantic, boxes).unwrap()
    }

    #[test]
    fn bad_geometry_is_rejected() {
        let b = bank(1, 2, 3, 0);
        let mut boxes = b.boxes.clone();
        boxes.data[4] += 0.1;
        let r = ObjectFeatureBank::new(b.stream, 1, 2, b.video.clone(), b.semantic.clone(), boxes);
        assert!(r.is_err());
    }

    #[test]
    fn tensor_file_round_trip_and_truncation() {
        let t = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len(), 8 * (1 + 2 + 6));
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
        match decode_tensor(&bytes[..bytes.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bank_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = bank(2, 3, 4, 1);
        b.write_dir(dir.path()).unwrap();
        assert_eq!(ObjectFeatureBank::read_dir(dir.path()).unwrap(), b);
    }

    #[test]
    fn projection_with_identity_block_keeps_semantics() {
        let b = bank(1, 2, 3, 2);
        let mut w = vec![0.0; 3 * 9];
        for i in 0..3 {
            w[i * 9 + i] = 1.0;
        }
        let mut t = Tape::new();
        let s = t.constant(&b.semantic).unwrap();
        let p = t.constant(&b.boxes).unwrap();
        let w = t.matrix(3, 9, w).unwrap();
        let o = project_objects(&mut t, s, p, w).unwrap();
        assert_eq!(t.value(o), b.semantic.data.as_slice());
    }

    #[test]
    fn projection_with_geometry_block_reproduces_boxes() {
        let b = bank(1, 2, 3, 3);
        let mut w = vec![0.0; 6 * 9];
        for i in 0..6 {
            w[i * 9 + 3 + i] = 1.0;
        }
        let mut t = Tape::new();
        let s = t.constant(&b.semantic).unwrap();
        let p = t.constant(&b.boxes).unwrap();
        let w = t.matrix(6, 9, w).unwrap();
        let o = project_objects(&mut t, s, p, w).unwrap();
        assert_eq!(t.value(o), b.boxes.data.as_slice());
    }

    #[test]
    fn tile_repeats_frame_rows() {
        let mut t = Tape::new();
        let v = t.matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let once = tile(&mut t, v, 1).unwrap();
        assert_eq!(t.value(once), t.value(v));
        let tiled = tile(&mut t, v, 3).unwrap();
        assert_eq!(t.shape(tiled), (6, 2));
        for i in 0..6 {
            assert_eq!(&t.value(tiled)[2 * i..2 * i + 2], &t.value(v)[2 * (i / 3)..2 * (i / 3) + 2]);
        }
    }

    #[test]
    fn unknown_token_and_empty_question() {
        let mut s = ParamStore::new();
        let dims = Dims { c: 4, c_s: 4, c_o: 4, c_w: 4, d: 4, embed: 5 };
        init_encoder(&mut s, "app", &dims, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut t = Tape::new();
        assert!(matches!(encode_question(&mut t, &s, "app.question", &[0, 3]), Err(Error::Vocabulary(3))));
        assert!(matches!(encode_question(&mut t, &s, "app.question", &[]), Err(Error::EmptySequence)));
    }

    #[test]
    fn mismatched_streams_are_rejected() {
        let a = bank(2, 2, 3, 4);
        let mut m = bank(1, 4, 3, 5);
        m.stream = Stream::Motion;
        let s = ParamStore::new();
        let mut t = Tape::new();
        assert!(matches!(build_two_stream(&mut t, &s, &[&a, &m], &[0]), Err(Error::Dimension(_))));
    }
}
