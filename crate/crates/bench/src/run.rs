//! Run configuration: presets, JSON files and command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use krst_core::config::{Dims, GraphConfig, Head, ModelConfig, Stream};
use krst_core::{Error, Result};

use crate::synth::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub dims: Dims,
    pub t: usize,
    pub k: usize,
    pub graph: GraphConfig,
    pub task: Task,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub word_attention: bool,
    pub object_attention: bool,
    pub streams: Vec<Stream>,
    /// Stop after this many epochs without a validation improvement and
    /// keep the best weights. `None` trains for all epochs.
    pub patience: Option<usize>,
    /// Dataset directory.
    pub data: PathBuf,
    /// Output directory for checkpoint, logs and metrics.
    pub out: PathBuf,
}

impl RunConfig {
    pub fn desk(task: Task) -> Self {
        Self {
            preset: Preset::Desk,
            dims: Dims::desk(),
            t: 4,
            k: 4,
            graph: GraphConfig::default(),
            task,
            batch_size: 32,
            epochs: 30,
            lr: 1e-3,
            dropout: 0.1,
            seed: 0,
            word_attention: true,
            object_attention: true,
            streams: vec![Stream::Appearance, Stream::Motion],
            patience: Some(5),
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
        }
    }

    pub fn paper(task: Task) -> Self {
        let batch_size = match task {
            Task::Transition | Task::MultichoiceRelation => 64,
            Task::FrameRelpos | Task::ActionCount => 128,
        };
        Self {
            preset: Preset::Paper,
            dims: Dims::paper(),
            graph: GraphConfig { alpha_spatial: 0.6, alpha_temporal: 0.8, layers: 2, ..GraphConfig::default() },
            batch_size,
            epochs: 30,
            lr: 1e-4,
            dropout: 0.3,
            patience: None,
            ..Self::desk(task)
        }
    }

    pub fn preset(preset: Preset, task: Task) -> Self {
        match preset {
            Preset::Desk => Self::desk(task),
            Preset::Paper => Self::paper(task),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be positive when set".into()));
        }
        self.dims.validate()?;
        self.graph.validate(self.t, self.k)
    }

    pub fn model_config(&self, vocab_size: usize, head: Head) -> Result<ModelConfig> {
        self.validate()?;
        let cfg = ModelConfig {
            dims: self.dims,
            t: self.t,
            k: self.k,
            vocab_size,
            graph: self.graph.clone(),
            head,
            streams: self.streams.clone(),
            word_attention: self.word_attention,
            object_attention: self.object_attention,
            dropout: self.dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one named ablation.
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name {
            "word_attention" => self.word_attention = false,
            "object_attention" => self.object_attention = false,
            "relative" => self.graph.relative_enabled = false,
            "absolute" => self.graph.absolute_enabled = false,
            "disentangle" => self.graph.disentangled = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected word_attention, object_attention, relative, absolute or disentangle)"
                )))
            }
        }
        Ok(())
    }
}

pub const ABLATIONS: [&str; 5] = ["word_attention", "object_attention", "relative", "absolute", "disentangle"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_pins() {
        let p = RunConfig::paper(Task::MultichoiceRelation);
        assert_eq!((p.graph.layers, p.graph.alpha_spatial, p.graph.alpha_temporal), (2, 0.6, 0.8));
        assert_eq!((p.dims.d, p.dropout, p.lr, p.epochs, p.batch_size), (512, 0.3, 1e-4, 30, 64));
        assert_eq!(RunConfig::paper(Task::FrameRelpos).batch_size, 128);
        assert_eq!(RunConfig::paper(Task::ActionCount).batch_size, 128);
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = RunConfig::desk(Task::ActionCount);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
        let mut v: serde_json::Value = serde_json::from_str(&s).unwrap();
        v["bogus"] = 1.into();
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn relative_ablation_touches_only_that_flag() {
        let base = RunConfig::desk(Task::FrameRelpos);
        let mut c = base.clone();
        c.ablate("relative").unwrap();
        assert!(!c.graph.relative_enabled);
        c.graph.relative_enabled = true;
        assert_eq!(c, base);
        assert!(matches!(c.ablate("nope"), Err(Error::Config(_))));
    }
}
