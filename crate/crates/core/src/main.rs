use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rationale_forge::harness::{
    self, evaluate_on, preset, run, run_sweep, seed_from_env, sweep_grid, CorpusSource, RunConfig,
};
use rationale_forge::porat::{
    detect_collapse, diagnose, Ablation, AdvantageRecord, CollapseThresholds,
};
use rationale_forge::synthetic::{generate_corpus, CorpusSpec};
use rationale_forge::{Error, Result};

#[derive(Parser)]
#[command(
    name = "rationale-forge",
    version,
    about = "Train and evaluate rationalization models on synthetic corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    GenData {
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Evaluate a checkpoint with deterministic masks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to score: train, dev, test or annotated.
        #[arg(long, default_value = "annotated")]
        split: String,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Run a preset's grid of child runs.
    Sweep {
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Parallel child runs (defaults to the number of CPUs).
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Critic/advantage diagnostics, for one triple or a run directory.
    Diagnose {
        #[arg(long, requires_all = ["value", "q_value"])]
        realized: Option<f64>,
        #[arg(long)]
        value: Option<f64>,
        #[arg(long)]
        q_value: Option<f64>,
        /// Run directory containing advantage.jsonl and metrics.csv.
        #[arg(long, conflicts_with = "realized")]
        run: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct RunOpts {
    /// JSON RunConfig to start from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Read the corpus from a directory instead of generating it.
    #[arg(long)]
    corpus_dir: Option<PathBuf>,
    #[arg(long)]
    corpus_seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    rationale_pool: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    rationale_len: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    bias: Option<f64>,
    #[arg(long)]
    lead_fraction: Option<f64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    dev_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    annotated_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    share_encoder: bool,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    sparsity_weight: Option<f64>,
    #[arg(long)]
    continuity_weight: Option<f64>,
    #[arg(long)]
    interval: Option<usize>,
    /// full, without_generator_phase, without_predictor_phase or baseline_rnp.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Train without the scheduler at all.
    #[arg(long)]
    no_scheduler: bool,
    #[arg(long)]
    fresh_batch_per_phase: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    final_temperature: Option<f64>,
    #[arg(long)]
    skew: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Falls back to RATIONALE_FORGE_SEED, then the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl RunOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let mut c: RunConfig = serde_json::from_str(&text)?;
                if let Some(p) = &self.preset {
                    c.preset = Some(p.clone());
                }
                c
            }
            (None, Some(p)) => preset(p)?,
            (None, None) => RunConfig::default(),
        };
        if let Some(dir) = &self.corpus_dir {
            c.corpus = CorpusSource::Path(dir.clone());
        }
        if let Some(s) = c.corpus_spec_mut() {
            set(&mut s.seed, self.corpus_seed);
            set(&mut s.vocab_size, self.vocab_size);
            set(&mut s.rationale_pool, self.rationale_pool);
            set(&mut s.min_len, self.min_len);
            set(&mut s.max_len, self.max_len);
            set(&mut s.rationale_len, self.rationale_len);
            set(&mut s.classes, self.classes);
            set(&mut s.bias, self.bias);
            set(&mut s.lead_fraction, self.lead_fraction);
            set(&mut s.train_size, self.train_size);
            set(&mut s.dev_size, self.dev_size);
            set(&mut s.test_size, self.test_size);
            set(&mut s.annotated_size, self.annotated_size);
        }
        set(&mut c.embed_dim, self.embed_dim);
        set(&mut c.hidden_dim, self.hidden_dim);
        c.share_encoder |= self.share_encoder;
        set(&mut c.regularizer.target_sparsity, self.sparsity);
        set(&mut c.regularizer.sparsity_weight, self.sparsity_weight);
        set(&mut c.regularizer.continuity_weight, self.continuity_weight);
        if self.no_scheduler {
            c.schedule = None;
        } else if self.interval.is_some() || self.ablation.is_some() || self.fresh_batch_per_phase {
            let mut s = c.schedule.unwrap_or_default();
            set(&mut s.interval, self.interval);
            set(&mut s.ablation, self.ablation);
            s.fresh_batch_per_phase |= self.fresh_batch_per_phase;
            c.schedule = Some(s);
        }
        set(&mut c.optimizer.lr, self.lr);
        set(&mut c.sampler.temperature, self.temperature);
        if self.final_temperature.is_some() {
            c.sampler.final_temperature = self.final_temperature;
        }
        set(&mut c.skew_epochs, self.skew);
        set(&mut c.epochs, self.epochs);
        set(&mut c.batch_size, self.batch_size);
        match self.seed {
            Some(s) => c.seed = s,
            None => set(&mut c.seed, seed_from_env()?),
        }
        if self.out.is_some() {
            c.output_dir = self.out.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn corpus_spec(c: &RunConfig) -> Result<CorpusSpec> {
    c.corpus_spec()
        .cloned()
        .ok_or_else(|| Error::Config("gen-data needs a generated corpus, not --corpus-dir".into()))
}

fn print_row(row: &rationale_forge::metrics::MetricsRow) {
    println!(
        "split={} epoch={} acc={:.4} p={:.4} r={:.4} f1={:.4} sparsity={:.4}",
        row.split, row.epoch, row.acc, row.p, row.r, row.f1, row.sparsity
    );
}

fn read_records(path: &Path) -> Result<Vec<AdvantageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn diagnose_run(dir: &Path) -> Result<()> {
    let records = read_records(&dir.join("advantage.jsonl"))?;
    let summary_path = dir.join("summary.json");
    let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: harness::RunSummary = serde_json::from_str(&text)?;
    let f1: Vec<f64> = summary
        .rows
        .iter()
        .filter(|r| r.split == "annotated")
        .map(|r| r.f1)
        .collect();
    let initial = records.first().map_or(0.0, |r| r.gen_grad_norm);
    let thresholds = CollapseThresholds::from_initial(initial);
    let n = records.len().max(1) as f64;
    let mean_abs_adv = records.iter().map(|r| r.advantage.abs()).sum::<f64>() / n;
    let mean_err = records.iter().map(|r| r.error).sum::<f64>() / n;
    println!(
        "records={} mean|A|={mean_abs_adv:.6} mean_eps={mean_err:.6}",
        records.len()
    );
    if records.len() < thresholds.window {
        println!(
            "collapse=unknown (fewer than {} records)",
            thresholds.window
        );
    } else {
        let collapsed = detect_collapse(&records, &f1, summary.last.acc, &thresholds)?;
        println!("collapse={collapsed}");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { opts } => {
            let c = opts.resolve()?;
            let out = c
                .output_dir
                .clone()
                .ok_or_else(|| Error::Config("gen-data needs --out".into()))?;
            let corpus = generate_corpus(&corpus_spec(&c)?)?;
            corpus.write(&out)?;
            println!("wrote {} ({})", out.display(), corpus.content_hash()?);
        }
        Command::Train { opts } => {
            let summary = run(&opts.resolve()?)?;
            for row in &summary.rows {
                print_row(row);
            }
            println!("selected epoch {}:", summary.best_epoch);
            print_row(&summary.selected);
        }
        Command::Eval {
            checkpoint,
            split,
            opts,
        } => {
            let c = opts.resolve()?;
            let corpus = c.load_corpus()?;
            let data = corpus
                .split(&split)
                .ok_or_else(|| Error::Config(format!("unknown split {split:?}")))?;
            print_row(&evaluate_on(&checkpoint, &c, data, &split)?);
        }
        Command::Sweep { seeds, jobs, opts } => {
            let name = opts
                .preset
                .clone()
                .ok_or_else(|| Error::Config("sweep needs --preset".into()))?;
            let base = opts.resolve()?;
            let cells = sweep_grid(&name, &base, &seeds)?;
            let jobs =
                jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let results = run_sweep(&cells, base.output_dir.as_deref(), jobs)?;
            print!("{}", harness::grid_table(&results));
        }
        Command::Diagnose {
            realized,
            value,
            q_value,
            run,
        } => match (realized, value, q_value, run) {
            (Some(r), Some(v), Some(q), _) => {
                let d = diagnose(r, v, q);
                println!("epsilon={} advantage={}", d.error, d.advantage);
            }
            (_, _, _, Some(dir)) => diagnose_run(&dir)?,
            _ => {
                return Err(Error::Config(
                    "diagnose needs --realized/--value/--q-value or --run".into(),
                ))
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
