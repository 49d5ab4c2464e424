//! Generated datasets: samples, feature banks and their on-disk layout.
//!
//! ```text
//! <dir>/dataset.json                        generation parameters
//! <dir>/vocab.json                          word list, index = token id
//! <dir>/<split>/samples.jsonl               one sample per line
//! <dir>/<split>/features/<id>/appearance/   encoder feature directory
//! <dir>/<split>/features/<id>/motion/
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use krst_core::encoder::ObjectFeatureBank;
use krst_core::{Error, Result};

use crate::synth::{self, Palette, Question, Scene, SceneParams, Task};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Dataset(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn synthetic() -> Self {
        Self::new(synth::vocabulary()).expect("template words are distinct")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::Lookup(format!("word `{word}` not in vocabulary")))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    /// Answer class (open-ended) or correct candidate position (multichoice).
    Index(usize),
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task: Task,
    pub question: Question,
    pub text: String,
    pub tokens: Vec<usize>,
    /// Answer token sequences, multichoice only.
    pub candidates: Option<Vec<Vec<usize>>>,
    pub answer: Answer,
    pub scene: Scene,
    /// Seed of the feature noise stream.
    pub noise_seed: u64,
}

impl Sample {
    /// Token sequences fed to the model: the question alone, or the question
    /// followed by each candidate answer.
    pub fn sequences(&self) -> Vec<Vec<usize>> {
        match &self.candidates {
            Some(c) => c.iter().map(|a| self.tokens.iter().chain(a).copied().collect()).collect(),
            None => vec![self.tokens.clone()],
        }
    }
}

/// One split held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub samples: Vec<Sample>,
    /// Appearance and motion features, parallel to `samples`.
    pub features: Vec<[ObjectFeatureBank; 2]>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn find(&self, id: &str) -> Result<usize> {
        self.samples.iter().position(|s| s.id == id).ok_or_else(|| Error::Lookup(format!("no sample `{id}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub task: Task,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub scene: SceneParams,
}

impl GenConfig {
    pub fn new(task: Task, seed: u64) -> Self {
        Self { task, n_train: 2000, n_val: 200, n_test: 500, seed, scene: SceneParams::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config(format!(
                "every split needs at least one sample, got {}/{}/{}",
                self.n_train, self.n_val, self.n_test
            )));
        }
        self.scene.validate()
    }

    fn count(&self, split: usize) -> usize {
        [self.n_train, self.n_val, self.n_test][split]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub vocab: Vocab,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Lookup(format!("unknown split `{other}`"))),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` of split `split`; splits draw from disjoint
/// streams.
pub fn sample_seed(seed: u64, split: usize, index: usize) -> u64 {
    mix(mix(mix(seed) ^ (split as u64 + 1)) ^ index as u64)
}

fn palette(config: &GenConfig) -> Palette {
    Palette::new(&config.scene, &mut ChaCha8Rng::seed_from_u64(mix(config.seed ^ 0x0070_616c_6574_7465)))
}

fn make_sample(
    config: &GenConfig,
    vocab: &Vocab,
    palette: &Palette,
    split: usize,
    index: usize,
) -> Result<(Sample, [ObjectFeatureBank; 2])> {
    let seed = sample_seed(config.seed, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = synth::generate(config.task, &config.scene, &mut rng);
    let words = g.question.words();
    let tokens = vocab.encode(&words)?;
    let candidates = match &g.candidates {
        Some(c) => Some(c.iter().map(|&cat| vocab.encode(&[synth::CATEGORIES[cat]])).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let answer = match config.task {
        Task::ActionCount => Answer::Count(g.answer),
        _ => Answer::Index(g.answer),
    };
    let noise_seed = mix(seed);
    let features = synth::realize(&g.scene, palette, &config.scene, &mut ChaCha8Rng::seed_from_u64(noise_seed))?;
    let sample = Sample {
        id: format!("{}-{index:06}", SPLITS[split]),
        task: config.task,
        question: g.question,
        text: words.join(" "),
        tokens,
        candidates,
        answer,
        scene: g.scene,
        noise_seed,
    };
    Ok((sample, features))
}

/// Generates all three splits in memory.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let vocab = Vocab::synthetic();
    let palette = palette(config);
    let mut splits = Vec::with_capacity(3);
    for split in 0..3 {
        let mut samples = Vec::with_capacity(config.count(split));
        let mut features = Vec::with_capacity(config.count(split));
        for i in 0..config.count(split) {
            let (s, f) = make_sample(config, &vocab, &palette, split, i)?;
            samples.push(s);
            features.push(f);
        }
        splits.push(Split { samples, features });
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset { config: config.clone(), vocab, train, val, test })
}

/// Features of one sample recomputed from its scene and noise seed.
pub fn rerealize(config: &GenConfig, sample: &Sample) -> Result<[ObjectFeatureBank; 2]> {
    synth::realize(&sample.scene, &palette(config), &config.scene, &mut ChaCha8Rng::seed_from_u64(sample.noise_seed))
}

pub fn write(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(&ds.config)?)?;
    std::fs::write(dir.join("vocab.json"), serde_json::to_vec(&ds.vocab.words)?)?;
    for name in SPLITS {
        let split = ds.split(name)?;
        let sdir = dir.join(name);
        std::fs::create_dir_all(&sdir)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(sdir.join("samples.jsonl"))?);
        for (s, [app, mot]) in split.samples.iter().zip(&split.features) {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
            let fdir = sdir.join("features").join(&s.id);
            app.write_dir(fdir.join("appearance"))?;
            mot.write_dir(fdir.join("motion"))?;
        }
        out.flush()?;
    }
    Ok(())
}

pub fn read_vocab(dir: impl AsRef<Path>) -> Result<Vocab> {
    let words: Vec<String> = serde_json::from_slice(&std::fs::read(dir.as_ref().join("vocab.json"))?)?;
    Vocab::new(words)
}

pub fn read_split(dir: impl AsRef<Path>, name: &str) -> Result<Split> {
    let sdir = dir.as_ref().join(name);
    let file = std::fs::File::open(sdir.join("samples.jsonl"))
        .map_err(|e| Error::Dataset(format!("{}: {e}", sdir.join("samples.jsonl").display())))?;
    let mut samples = Vec::new();
    let mut features = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("{name}/samples.jsonl line {}: {e}", n + 1)))?;
        let fdir = sdir.join("features").join(&s.id);
        let app = ObjectFeatureBank::read_dir(fdir.join("appearance"))?;
        let mot = ObjectFeatureBank::read_dir(fdir.join("motion"))?;
        samples.push(s);
        features.push([app, mot]);
    }
    Ok(Split { samples, features })
}

pub fn read(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let config: GenConfig = serde_json::from_slice(&std::fs::read(dir.join("dataset.json"))?)?;
    let vocab = read_vocab(dir)?;
    Ok(Dataset { train: read_split(dir, "train")?, val: read_split(dir, "val")?, test: read_split(dir, "test")?, config, vocab })
}
