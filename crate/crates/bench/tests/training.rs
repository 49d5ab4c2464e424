mod common;

use krst_bench::dataset::{self, Answer, GenConfig};
use krst_bench::run::{RunConfig, ABLATIONS};
use krst_bench::synth::Task;
use krst_bench::train::{self, MetricKind, Prediction};
use krst_core::config::{Head, Stream};
use krst_core::model::{self, Output, Target};
use krst_core::{checkpoint, Tape};

#[test]
fn zero_epochs_keep_the_initialization() {
    let ds = common::tiny_data(Task::FrameRelpos, 1);
    let cfg = common::tiny_run(Task::FrameRelpos, 0);
    let o = train::train_on(&cfg, &ds, &mut common::quiet).unwrap();
    let init = model::init_params(&o.model, cfg.seed).unwrap();
    assert!(o.log.is_empty());
    assert_eq!(o.best_epoch, 0);
    assert_eq!(
        checkpoint::encode(&o.store, &serde_json::Value::Null).unwrap(),
        checkpoint::encode(&init, &serde_json::Value::Null).unwrap()
    );
}

#[test]
fn first_batch_loss_replays_from_the_initialization() {
    let ds = common::tiny_data(Task::MultichoiceRelation, 2);
    let cfg = common::tiny_run(Task::MultichoiceRelation, 1);
    let o = train::train_on(&cfg, &ds, &mut common::quiet).unwrap();

    let init = model::init_params(&o.model, cfg.seed).unwrap();
    let order = train::epoch_order(cfg.seed, 1, ds.train.len());
    let batch = &order[..cfg.batch_size];
    let mut sum = 0.0;
    for (j, &i) in batch.iter().enumerate() {
        let s = &ds.train.samples[i];
        let [app, mot] = &ds.train.features[i];
        let mut rng = train::dropout_rng(cfg.seed, 1, j);
        let Answer::Index(a) = s.answer else { unreachable!() };
        let mut tape = Tape::new();
        let f = model::forward(&mut tape, &init, &o.model, &[app, mot], &s.sequences(), Some(Target::Index(a)), Some(&mut rng)).unwrap();
        sum += tape.scalar(f.loss.unwrap());
    }
    let want = sum / batch.len() as f64;
    let got = o.log[0].first_batch_loss;
    assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
}

#[test]
fn identical_runs_write_identical_bytes() {
    let ds = common::tiny_data(Task::ActionCount, 3);
    let cfg = common::tiny_run(Task::ActionCount, 2);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let o = train::train_on(&cfg, &ds, &mut common::quiet).unwrap();
        train::write_outcome(d.path(), &cfg, &o).unwrap();
    }
    let (a, b) = (common::tree(dirs[0].path()), common::tree(dirs[1].path()));
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
}

#[test]
fn saved_checkpoint_reproduces_test_metrics() {
    let ds = common::tiny_data(Task::FrameRelpos, 4);
    let data = tempfile::tempdir().unwrap();
    dataset::write(&ds, data.path()).unwrap();
    let cfg = RunConfig { data: data.path().into(), out: data.path().join("run"), ..common::tiny_run(Task::FrameRelpos, 2) };
    let o = train::train(&cfg, &mut common::quiet).unwrap();
    let (m, _) = train::evaluate(cfg.out.join("checkpoint.krst"), data.path(), "test").unwrap();
    assert_eq!(serde_json::to_vec(&m).unwrap(), serde_json::to_vec(&o.test).unwrap());
    let on_disk: train::Metrics = serde_json::from_slice(&std::fs::read(cfg.out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(on_disk, o.test);
}

#[test]
fn untrained_multichoice_sits_at_chance() {
    let g = GenConfig { n_train: 1, n_val: 1, n_test: 1500, ..GenConfig::new(Task::MultichoiceRelation, 6) };
    let ds = dataset::generate(&g).unwrap();
    let cfg = RunConfig::desk(Task::MultichoiceRelation);
    let m = train::model_config(&cfg, &ds).unwrap();
    let store = model::init_params(&m, 0).unwrap();
    let (metrics, _) = train::evaluate_split(&store, &m, &ds.test, "test").unwrap();
    let acc = metrics.accuracy.unwrap();
    assert!((acc - 0.2).abs() <= 0.03, "untrained accuracy {acc}");
}

fn argmax(v: &[f64]) -> i64 {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best as i64
}

#[test]
fn metrics_equal_recomputation_from_predictions() {
    for task in [Task::FrameRelpos, Task::MultichoiceRelation, Task::ActionCount] {
        let ds = common::tiny_data(task, 7);
        let cfg = common::tiny_run(task, 0);
        let m = train::model_config(&cfg, &ds).unwrap();
        let store = model::init_params(&m, 3).unwrap();
        let (metrics, preds) = train::evaluate_split(&store, &m, &ds.test, "test").unwrap();
        // Round-trip through the dumped form first.
        let dumped: Vec<Prediction> = preds.iter().map(|p| serde_json::from_str(&serde_json::to_string(p).unwrap()).unwrap()).collect();
        let n = dumped.len() as f64;
        let mut hits = 0usize;
        let mut se = 0.0;
        for (p, s) in dumped.iter().zip(&ds.test.samples) {
            let target = match s.answer {
                Answer::Index(i) => i as i64,
                Answer::Count(c) => c as i64,
            };
            assert_eq!(p.target, target);
            let pred = match (&p.output, &m.head) {
                (Output::Scores(v) | Output::Logits(v), _) => argmax(v),
                (Output::Count(c), Head::Count { lo, hi }) => (c.round() as i64).clamp(*lo, *hi),
                _ => unreachable!(),
            };
            assert_eq!(pred, p.prediction);
            hits += usize::from(pred == target);
            se += ((pred - target) as f64).powi(2);
        }
        match metrics.kind() {
            MetricKind::Accuracy => assert_eq!(metrics.accuracy, Some(hits as f64 / n)),
            MetricKind::Mse => assert_eq!(metrics.mse, Some(se / n)),
        }
        let loss = dumped.iter().map(|p| p.loss).sum::<f64>() / n;
        assert_eq!(metrics.loss, loss);
    }
}

fn fake(prediction: i64, target: i64) -> Prediction {
    Prediction { id: String::new(), prediction, target, loss: 0.0, output: Output::Count(prediction as f64) }
}

#[test]
fn oracle_predictions_score_perfectly() {
    let preds: Vec<_> = [3, 0, 7, 3, 1].iter().map(|&t| fake(t, t)).collect();
    let m = train::metrics_from(&preds, &Head::OpenEnded { classes: 8 }, "frame_relpos", "test");
    assert_eq!(m.accuracy, Some(1.0));
    let per = m.per_class.unwrap();
    assert_eq!(per[3].n, 2);
    assert!(per.iter().all(|c| c.correct == c.n));
    let m = train::metrics_from(&preds, &Head::Count { lo: 0, hi: 10 }, "action_count", "test");
    assert_eq!(m.mse, Some(0.0));
}

#[test]
fn mean_predictor_mse_is_the_target_variance() {
    let g = GenConfig { n_train: 1, n_val: 1, n_test: 300, ..GenConfig::new(Task::ActionCount, 8) };
    let ds = dataset::generate(&g).unwrap();
    let targets: Vec<i64> = ds
        .test
        .samples
        .iter()
        .map(|s| match s.answer {
            Answer::Count(c) => c as i64,
            Answer::Index(_) => unreachable!(),
        })
        .collect();
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<i64>() as f64 / n;
    let var = targets.iter().map(|&t| (t as f64 - mean).powi(2)).sum::<f64>() / n;
    let c = mean.round() as i64;
    let preds: Vec<_> = targets.iter().map(|&t| fake(c, t)).collect();
    let m = train::metrics_from(&preds, &Head::Count { lo: 1, hi: 6 }, "action_count", "test");
    let want = var + (mean - c as f64).powi(2);
    assert!((m.mse.unwrap() - want).abs() < 1e-12, "{:?} vs {want}", m.mse);
}

#[test]
fn ablated_models_carry_only_their_parameters() {
    let ds = common::tiny_data(Task::FrameRelpos, 9);
    let full = common::tiny_run(Task::FrameRelpos, 1);
    let names = |cfg: &RunConfig| -> Vec<String> {
        let m = train::model_config(cfg, &ds).unwrap();
        model::init_params(&m, 0).unwrap().names().map(str::to_string).collect()
    };
    // Matches whole dot-separated segments, so `w_r` does not hit `w_rows`.
    let matches = |name: &str, pat: &str| {
        let want: Vec<&str> = pat.split('.').filter(|s| !s.is_empty()).collect();
        let segs: Vec<&str> = name.split('.').collect();
        segs.windows(want.len()).any(|w| w == want.as_slice())
    };
    let has = |names: &[String], pat: &str| names.iter().any(|n| matches(n, pat));
    let base = names(&full);
    for s in [Stream::Appearance, Stream::Motion] {
        let p = s.prefix();
        for pat in [".keyword.word_mlp", ".keyword.w_q", ".graph.spatial.", ".graph.temporal.", ".w_r", ".w_a"] {
            assert!(base.iter().any(|n| n.starts_with(p) && matches(n, pat)), "full model lacks {pat} under {p}");
        }
    }
    for (ablation, gone, added) in [
        ("word_attention", ".keyword.word_mlp", Some(".keyword.sentence_proj")),
        ("object_attention", ".keyword.w_q", None),
        ("relative", ".w_r", None),
        ("absolute", ".w_a", None),
        ("disentangle", ".graph.spatial.", Some(".graph.joint.")),
    ] {
        let mut c = full.clone();
        c.ablate(ablation).unwrap();
        let n = names(&c);
        assert!(!has(&n, gone), "{ablation} keeps {gone}");
        if ablation == "disentangle" {
            assert!(!has(&n, ".graph.temporal."));
        }
        if let Some(a) = added {
            assert!(has(&n, a), "{ablation} lacks {a}");
        }
    }
}

#[test]
fn ablation_reports_one_row_per_variant() {
    let ds = common::tiny_data(Task::FrameRelpos, 10);
    let base = common::tiny_run(Task::FrameRelpos, 1);
    let names: Vec<String> = ABLATIONS.iter().map(|s| s.to_string()).collect();
    let rows = train::run_ablation(&base, &ds, &names, &mut common::quiet).unwrap();
    assert_eq!(rows.len(), ABLATIONS.len() + 1);
    assert_eq!(rows[0].variant, "full");
    assert_eq!(rows[0].delta, 0.0);
    for (r, name) in rows[1..].iter().zip(ABLATIONS) {
        assert_eq!(r.variant, format!("w/o {name}"));
        assert_eq!(r.delta, rows[0].value - r.value);
        let mut c = base.clone();
        c.ablate(name).unwrap();
        let m = train::model_config(&c, &ds).unwrap();
        assert_eq!(r.params, model::init_params(&m, 0).unwrap().num_scalars());
    }
    let table = train::ablation_table(&rows);
    assert_eq!(table.lines().count(), rows.len() + 1);
}

#[test]
fn mismatched_dataset_is_rejected() {
    let ds = common::tiny_data(Task::Transition, 1);
    let cfg = common::tiny_run(Task::FrameRelpos, 1);
    assert!(matches!(train::train_on(&cfg, &ds, &mut common::quiet), Err(krst_core::Error::Dataset(_))));
}
