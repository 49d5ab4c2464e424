//! Model dimensions, graph settings, answer heads and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Pool;

/// Width of the word-embedding space.
pub const EMBED_WIDTH: usize = 300;

/// Box geometry columns: x1, y1, x2, y2, w, h.
pub const BOX_WIDTH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Video-level feature width and projected object width.
    pub c: usize,
    /// Raw object semantic feature width.
    pub c_s: usize,
    /// Fused object width.
    pub c_o: usize,
    /// Question width; each LSTM direction gets half.
    pub c_w: usize,
    /// Hidden width of every two-layer MLP.
    pub d: usize,
    pub embed: usize,
}

impl Dims {
    pub fn desk() -> Self {
        Self { c: 64, c_s: 64, c_o: 64, c_w: 64, d: 64, embed: EMBED_WIDTH }
    }

    pub fn paper() -> Self {
        Self { c: 512, c_s: 512, c_o: 512, c_w: 512, d: 512, embed: EMBED_WIDTH }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.c, self.c_s, self.c_o, self.c_w, self.d, self.embed].contains(&0) {
            return Err(Error::config("all widths must be positive"));
        }
        if !self.c_w.is_multiple_of(2) {
            return Err(Error::config(format!("question width {} must be even", self.c_w)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub alpha_spatial: f64,
    pub alpha_temporal: f64,
    /// Stacked layers per graph.
    pub layers: usize,
    pub pooling_spatial: Pool,
    pub pooling_aggregation: Pool,
    pub pooling_temporal: Pool,
    pub relative_enabled: bool,
    pub absolute_enabled: bool,
    pub disentangled: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            alpha_spatial: 0.6,
            alpha_temporal: 0.8,
            layers: 2,
            pooling_spatial: Pool::Max,
            pooling_aggregation: Pool::Max,
            pooling_temporal: Pool::Sum,
            relative_enabled: true,
            absolute_enabled: true,
            disentangled: true,
        }
    }
}

fn ratio_to_k(alpha: f64, pool: usize) -> usize {
    ((alpha * pool as f64).round() as usize).max(1)
}

impl GraphConfig {
    pub fn k_spatial(&self, k: usize) -> usize {
        ratio_to_k(self.alpha_spatial, k)
    }

    pub fn k_temporal(&self, t: usize) -> usize {
        ratio_to_k(self.alpha_temporal, t)
    }

    /// Neighbor budget of the joint graph used when disentangling is off.
    pub fn k_holistic(&self, t: usize, k: usize) -> usize {
        ratio_to_k(self.alpha_spatial, k * t)
    }

    pub fn validate(&self, t: usize, k: usize) -> Result<()> {
        if !self.relative_enabled && !self.absolute_enabled {
            return Err(Error::config("relative and absolute relations cannot both be disabled"));
        }
        if self.layers == 0 {
            return Err(Error::config("graph needs at least one layer"));
        }
        for (name, a) in [("alpha_spatial", self.alpha_spatial), ("alpha_temporal", self.alpha_temporal)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config(format!("{name} = {a} outside [0, 1]")));
            }
        }
        if t == 0 || k == 0 {
            return Err(Error::config(format!("need at least one frame and one object, got T={t}, K={k}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Head {
    Multichoice {
        candidates: usize,
    },
    OpenEnded {
        classes: usize,
    },
    /// Predictions are rounded and clamped into `lo..=hi` at evaluation.
    Count {
        lo: i64,
        hi: i64,
    },
}

impl Head {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Head::Multichoice { candidates } if candidates < 2 => {
                Err(Error::config(format!("multichoice needs at least 2 candidates, got {candidates}")))
            }
            Head::OpenEnded { classes: 0 } => Err(Error::config("open-ended head needs classes")),
            Head::Count { lo, hi } if lo > hi => Err(Error::config(format!("empty count range [{lo}, {hi}]"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Appearance,
    Motion,
}

impl Stream {
    /// Parameter-name prefix of the stream.
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Appearance => "app",
            Stream::Motion => "mot",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Appearance => "appearance",
            Stream::Motion => "motion",
        }
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appearance" => Ok(Stream::Appearance),
            "motion" => Ok(Stream::Motion),
            other => Err(Error::config(format!("unknown stream `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: Dims,
    /// Frames per video.
    pub t: usize,
    /// Objects per frame.
    pub k: usize,
    pub vocab_size: usize,
    pub graph: GraphConfig,
    pub head: Head,
    pub streams: Vec<Stream>,
    /// Keyword word attention; when off the sentence vector is projected
    /// into the embedding space instead.
    pub word_attention: bool,
    /// Keyword object attention; when off node features are the fused
    /// object features unchanged.
    pub object_attention: bool,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.graph.validate(self.t, self.k)?;
        self.head.validate()?;
        if self.vocab_size == 0 {
            return Err(Error::config("empty vocabulary"));
        }
        if self.streams.is_empty() {
            return Err(Error::config("at least one stream must be enabled"));
        }
        let mut seen = self.streams.clone();
        seen.sort_by_key(|s| *s as u8);
        seen.dedup();
        if seen.len() != self.streams.len() {
            return Err(Error::config("streams listed twice"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout probability {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
