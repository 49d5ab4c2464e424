#![allow(dead_code)]

use krst_bench::dataset::{self, Dataset, GenConfig};
use krst_bench::run::RunConfig;
use krst_bench::synth::Task;

pub fn tiny_gen(task: Task, seed: u64) -> GenConfig {
    GenConfig { n_train: 12, n_val: 6, n_test: 6, ..GenConfig::new(task, seed) }
}

pub fn tiny_data(task: Task, seed: u64) -> Dataset {
    dataset::generate(&tiny_gen(task, seed)).unwrap()
}

pub fn tiny_run(task: Task, epochs: usize) -> RunConfig {
    RunConfig { epochs, batch_size: 4, ..RunConfig::desk(task) }
}

pub fn quiet(_: &str) {}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
