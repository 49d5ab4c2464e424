use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use krst_bench::dataset::{self, GenConfig};
use krst_bench::inspect;
use krst_bench::run::{Preset, RunConfig, ABLATIONS};
use krst_bench::synth::Task;
use krst_bench::train;
use krst_core::config::Dims;
use krst_core::{Error, Result};

#[derive(Parser)]
#[command(name = "krst", version, about = "Relational video QA on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write checkpoint, log and test metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train the full model and ablated variants with a shared seed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated ablations; all of them if omitted.
        #[arg(long, value_delimiter = ',')]
        ablations: Option<Vec<String>>,
    },
    /// Finite-difference check of every answer head.
    Gradcheck {
        #[arg(long, default_value = "desk")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print word weights, object scores and neighbor lists of one sample.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        id: String,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenArgs {
    /// JSON generation config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Feature width preset.
    #[arg(long)]
    preset: Option<Preset>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Disable a model component (repeatable).
    #[arg(long)]
    without: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for metrics.json and predictions.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => {
                let task = self.task.ok_or_else(|| Error::Config("--task or --config is required".into()))?;
                RunConfig::preset(self.preset.unwrap_or(Preset::Desk), task)
            }
        };
        if self.config.is_some() {
            if let Some(p) = self.preset {
                let keep = cfg.clone();
                cfg = RunConfig { data: keep.data, out: keep.out, seed: keep.seed, ..RunConfig::preset(p, keep.task) };
            }
            if let Some(t) = self.task {
                cfg.task = t;
            }
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.data {
            cfg.data = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = (v > 0).then_some(v);
        }
        for name in &self.without {
            cfg.ablate(name)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn gen(args: GenArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            serde_json::from_slice::<GenConfig>(&std::fs::read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => {
            let task = args.task.ok_or_else(|| Error::Config("--task or --config is required".into()))?;
            GenConfig::new(task, 0)
        }
    };
    if let Some(t) = args.task {
        cfg.task = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = args.n_val {
        cfg.n_val = n;
    }
    if let Some(n) = args.n_test {
        cfg.n_test = n;
    }
    if let Some(p) = args.preset {
        let dims = match p {
            Preset::Desk => Dims::desk(),
            Preset::Paper => Dims::paper(),
        };
        (cfg.scene.c, cfg.scene.c_s) = (dims.c, dims.c_s);
    }
    let ds = dataset::generate(&cfg)?;
    dataset::write(&ds, &args.out)?;
    eprintln!("wrote {} ({} / {} / {} samples) to {}", cfg.task, cfg.n_train, cfg.n_val, cfg.n_test, args.out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => gen(args),
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let o = train::train(&cfg, &mut progress)?;
            println!("{}", serde_json::to_string(&o.test)?);
            Ok(())
        }
        Command::Eval(args) => {
            let (metrics, preds) = train::evaluate(&args.checkpoint, &args.data, &args.split)?;
            if let Some(dir) = &args.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&metrics)?)?;
                train::write_jsonl(dir.join("predictions.jsonl"), &preds)?;
            }
            println!("{}", serde_json::to_string(&metrics)?);
            Ok(())
        }
        Command::Ablate { run, ablations } => {
            let cfg = run.resolve()?;
            let names = ablations.unwrap_or_else(|| ABLATIONS.iter().map(|s| s.to_string()).collect());
            let ds = dataset::read(&cfg.data)?;
            let rows = train::run_ablation(&cfg, &ds, &names, &mut progress)?;
            std::fs::create_dir_all(&cfg.out)?;
            train::write_jsonl(cfg.out.join("ablation.jsonl"), &rows)?;
            print!("{}", train::ablation_table(&rows));
            Ok(())
        }
        Command::Gradcheck { preset, seed } => {
            let dims = match preset {
                Preset::Desk => Dims::desk(),
                Preset::Paper => Dims::paper(),
            };
            let checks = inspect::gradcheck_cmd(dims, seed)?;
            for c in &checks {
                println!("{}", serde_json::to_string(c)?);
            }
            if checks.iter().all(|c| c.pass) {
                Ok(())
            } else {
                Err(Error::Numeric(format!("relative error above {}", inspect::GRADCHECK_TOLERANCE)))
            }
        }
        Command::DumpAttn { checkpoint, data, split, id, out } => {
            let dump = inspect::dump_attn(&checkpoint, &data, &split, &id)?;
            let json = serde_json::to_string(&dump)?;
            match out {
                Some(path) => std::fs::write(path, json + "\n")?,
                None => println!("{json}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
