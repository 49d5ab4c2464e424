//! Mini-batch Adam training, evaluation and the ablation runner.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use krst_core::config::{Head, ModelConfig};
use krst_core::model::{self, Output, Target};
use krst_core::optim::AdamState;
use krst_core::{checkpoint, Error, ParamStore, Result, Tape};

use crate::dataset::{self, mix, Answer, Dataset, Split};
use crate::run::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    Mse,
}

impl MetricKind {
    pub fn for_head(head: &Head) -> Self {
        match head {
            Head::Count { .. } => MetricKind::Mse,
            _ => MetricKind::Accuracy,
        }
    }

    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            MetricKind::Accuracy => a > b,
            MetricKind::Mse => a < b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub class: i64,
    pub n: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task: String,
    pub split: String,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    /// Between rounded, clamped predictions and targets.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse: Option<f64>,
    /// Open-ended only, by target class.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class: Option<Vec<ClassStat>>,
    /// Mean training loss without dropout.
    pub loss: f64,
}

impl Metrics {
    pub fn kind(&self) -> MetricKind {
        if self.mse.is_some() {
            MetricKind::Mse
        } else {
            MetricKind::Accuracy
        }
    }

    pub fn value(&self) -> f64 {
        self.accuracy.or(self.mse).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: i64,
    pub target: i64,
    pub loss: f64,
    pub output: Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean loss of the first mini-batch, before its update.
    pub first_batch_loss: f64,
    pub val: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    /// Weights with the best validation metric (the initialization if no
    /// epoch ran).
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub test: Metrics,
}

pub fn target_of(answer: Answer) -> Target {
    match answer {
        Answer::Index(i) => Target::Index(i),
        Answer::Count(c) => Target::Count(c as f64),
    }
}

fn target_value(answer: Answer) -> i64 {
    match answer {
        Answer::Index(i) => i as i64,
        Answer::Count(c) => c as i64,
    }
}

pub fn model_config(cfg: &RunConfig, ds: &Dataset) -> Result<ModelConfig> {
    if cfg.task != ds.config.task {
        return Err(Error::Dataset(format!("run is for {} but the dataset holds {}", cfg.task, ds.config.task)));
    }
    if (cfg.t, cfg.k) != (ds.config.scene.t, ds.config.scene.k) {
        return Err(Error::Dataset(format!(
            "run expects T={}, K={} but the dataset has T={}, K={}",
            cfg.t, cfg.k, ds.config.scene.t, ds.config.scene.k
        )));
    }
    cfg.model_config(ds.vocab.len(), cfg.task.head(&ds.config.scene))
}

/// Sample order of `epoch` (1-based).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ epoch as u64)));
    order
}

/// Dropout stream of the `position`-th sample visited in `epoch`.
pub fn dropout_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ epoch as u64) ^ !(position as u64)))
}

fn banks(split: &Split, i: usize) -> [&krst_core::encoder::ObjectFeatureBank; 2] {
    let [a, m] = &split.features[i];
    [a, m]
}

/// Mean loss over `batch` (indices into `split`), accumulating the mean
/// gradient into `store`.
pub fn batch_step(
    store: &mut ParamStore,
    model: &ModelConfig,
    split: &Split,
    batch: &[usize],
    seed: u64,
    epoch: usize,
    first_position: usize,
) -> Result<f64> {
    store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (j, &i) in batch.iter().enumerate() {
        let s = &split.samples[i];
        let mut rng = dropout_rng(seed, epoch, first_position + j);
        let streams = select_banks(model, banks(split, i));
        let (eval, _) = model::loss_and_grads(store, model, &streams, &s.sequences(), target_of(s.answer), Some(&mut rng))?;
        if !eval.loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {} on sample {}", eval.loss, s.id)));
        }
        total += eval.loss;
        store.accumulate(&eval.grads, scale)?;
    }
    Ok(total * scale)
}

/// Banks in the order of `model.streams`.
fn select_banks<'a>(
    model: &ModelConfig,
    [app, mot]: [&'a krst_core::encoder::ObjectFeatureBank; 2],
) -> Vec<&'a krst_core::encoder::ObjectFeatureBank> {
    model
        .streams
        .iter()
        .map(|s| match s {
            krst_core::config::Stream::Appearance => app,
            krst_core::config::Stream::Motion => mot,
        })
        .collect()
}

pub fn evaluate_split(store: &ParamStore, model: &ModelConfig, split: &Split, name: &str) -> Result<(Metrics, Vec<Prediction>)> {
    let mut preds = Vec::with_capacity(split.len());
    for (i, s) in split.samples.iter().enumerate() {
        let mut tape = Tape::new();
        let streams = select_banks(model, banks(split, i));
        let f = model::forward(&mut tape, store, model, &streams, &s.sequences(), Some(target_of(s.answer)), None)?;
        let loss = tape.scalar(f.loss.expect("target given"));
        preds.push(Prediction {
            id: s.id.clone(),
            prediction: f.output.predict(&model.head),
            target: target_value(s.answer),
            loss,
            output: f.output,
        });
    }
    let task = split.samples.first().map_or_else(String::new, |s| s.task.to_string());
    Ok((metrics_from(&preds, &model.head, &task, name), preds))
}

/// Metrics of `preds`: accuracy, or mean squared error for counts.
pub fn metrics_from(preds: &[Prediction], head: &Head, task: &str, split: &str) -> Metrics {
    let n = preds.len();
    let denom = n.max(1) as f64;
    let loss = preds.iter().map(|p| p.loss).sum::<f64>() / denom;
    let mut m =
        Metrics { task: task.to_string(), split: split.to_string(), n_samples: n, accuracy: None, mse: None, per_class: None, loss };
    match head {
        Head::Count { .. } => {
            m.mse = Some(preds.iter().map(|p| ((p.prediction - p.target) as f64).powi(2)).sum::<f64>() / denom);
        }
        _ => {
            m.accuracy = Some(preds.iter().filter(|p| p.prediction == p.target).count() as f64 / denom);
        }
    }
    if let Head::OpenEnded { classes } = head {
        let mut stats: Vec<ClassStat> = (0..*classes as i64).map(|class| ClassStat { class, n: 0, correct: 0 }).collect();
        for p in preds {
            if let Some(s) = usize::try_from(p.target).ok().and_then(|t| stats.get_mut(t)) {
                s.n += 1;
                s.correct += usize::from(p.prediction == p.target);
            }
        }
        m.per_class = Some(stats);
    }
    m
}

/// Trains on `ds.train`, selects on `ds.val` and scores `ds.test`.
/// `progress` receives one line per epoch.
pub fn train_on(cfg: &RunConfig, ds: &Dataset, progress: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let model = model_config(cfg, ds)?;
    let mut store = model::init_params(&model, cfg.seed)?;
    let mut adam = AdamState::new(cfg.lr);
    let kind = MetricKind::for_head(&model.head);
    let mut best: Option<(ParamStore, f64, usize)> = None;
    let mut log = Vec::new();
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, ds.train.len());
        let mut sum = 0.0;
        let mut first_batch_loss = f64::NAN;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let loss = batch_step(&mut store, &model, &ds.train, batch, cfg.seed, epoch, b * cfg.batch_size)?;
            if b == 0 {
                first_batch_loss = loss;
            }
            sum += loss * batch.len() as f64;
            adam.step(&mut store)?;
        }
        let (val, _) = evaluate_split(&store, &model, &ds.val, "val")?;
        let improved = best.as_ref().is_none_or(|(_, v, _)| kind.better(val.value(), *v));
        if improved {
            best = Some((store.clone(), val.value(), epoch));
        }
        let entry = EpochLog { epoch, train_loss: sum / ds.train.len() as f64, first_batch_loss, val: val.value(), best: improved };
        progress(&format!(
            "epoch {epoch:>3}  loss {:.4}  val {:?} {:.4}{}  [{:.1}s]",
            entry.train_loss,
            kind,
            entry.val,
            if improved { " *" } else { "" },
            start.elapsed().as_secs_f64()
        ));
        log.push(entry);
        let best_epoch = best.as_ref().map_or(0, |b| b.2);
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            progress(&format!("no validation improvement for {} epochs, stopping", epoch - best_epoch));
            break;
        }
    }

    let (store, best_epoch) = match best {
        Some((s, _, e)) => (s, e),
        None => (store, 0),
    };
    let (test, _) = evaluate_split(&store, &model, &ds.test, "test")?;
    Ok(TrainOutcome { model, store, log, best_epoch, test })
}

/// Checkpoint metadata: everything needed to rebuild the model, nothing
/// that depends on where the run was launched.
pub fn checkpoint_meta(model: &ModelConfig, cfg: &RunConfig, best_epoch: usize) -> serde_json::Value {
    serde_json::json!({
        "model": model,
        "task": cfg.task,
        "seed": cfg.seed,
        "best_epoch": best_epoch,
    })
}

pub fn model_from_meta(meta: &serde_json::Value) -> Result<ModelConfig> {
    let m = meta.get("model").ok_or_else(|| Error::Format { offset: 0, msg: "checkpoint has no model config".into() })?;
    Ok(serde_json::from_value(m.clone())?)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `checkpoint.krst`, `train_log.jsonl` and `metrics.json` into `dir`.
pub fn write_outcome(dir: impl AsRef<Path>, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    checkpoint::save(dir.join("checkpoint.krst"), &outcome.store, &checkpoint_meta(&outcome.model, cfg, outcome.best_epoch))?;
    write_jsonl(dir.join("train_log.jsonl"), &outcome.log)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&outcome.test)?)?;
    Ok(())
}

/// Reads the dataset at `cfg.data`, trains and writes the outputs to
/// `cfg.out`.
pub fn train(cfg: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let ds = dataset::read(&cfg.data)?;
    let outcome = train_on(cfg, &ds, progress)?;
    write_outcome(&cfg.out, cfg, &outcome)?;
    Ok(outcome)
}

/// Evaluates a saved checkpoint on one split of the dataset at `data`.
pub fn evaluate(checkpoint_path: impl AsRef<Path>, data: impl AsRef<Path>, split: &str) -> Result<(Metrics, Vec<Prediction>)> {
    let (store, meta) = checkpoint::load(checkpoint_path)?;
    let model = model_from_meta(&meta)?;
    let vocab = dataset::read_vocab(&data)?;
    if vocab.len() != model.vocab_size {
        return Err(Error::Dataset(format!("vocabulary has {} words, checkpoint expects {}", vocab.len(), model.vocab_size)));
    }
    let s = dataset::read_split(&data, split)?;
    evaluate_split(&store, &model, &s, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub metric: MetricKind,
    pub value: f64,
    /// Full model minus variant for accuracy, variant minus full model for
    /// MSE, so a positive delta means the ablated part helped.
    pub delta: f64,
    pub params: usize,
}

/// Trains the full model and one variant per ablation with the same seed.
pub fn run_ablation(base: &RunConfig, ds: &Dataset, ablations: &[String], progress: &mut dyn FnMut(&str)) -> Result<Vec<AblationRow>> {
    let mut variants = vec![("full".to_string(), base.clone())];
    for name in ablations {
        let mut c = base.clone();
        c.ablate(name)?;
        model_config(&c, ds)?;
        variants.push((format!("w/o {name}"), c));
    }
    let mut rows: Vec<AblationRow> = Vec::with_capacity(variants.len());
    for (variant, c) in variants {
        progress(&format!("== {variant}"));
        let o = train_on(&c, ds, progress)?;
        let value = o.test.value();
        let full = rows.first().map_or(value, |r| r.value);
        let delta = match o.test.kind() {
            MetricKind::Accuracy => full - value,
            MetricKind::Mse => value - full,
        };
        rows.push(AblationRow { variant, metric: o.test.kind(), value, delta, params: o.store.num_scalars() });
    }
    Ok(rows)
}

/// Plain-text table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<24} {:>6} {:>8} {:>10} {:>10}\n", "variant", "metric", "value", "delta", "params");
    for r in rows {
        let name = match r.metric {
            MetricKind::Accuracy => "acc",
            MetricKind::Mse => "mse",
        };
        s.push_str(&format!("{:<24} {:>6} {:>8.4} {:>+10.4} {:>10}\n", r.variant, name, r.value, r.delta, r.params));
    }
    s
}
