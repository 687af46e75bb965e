//! Experiment driver: run configuration, training loop, evaluation,
//! persistence and sweep presets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{metrics_csv, MetricsRow, PooledPrf};
use crate::nn::{GumbelMaskSampler, MaskMode};
use crate::porat::{Ablation, ScheduleConfig, Trainer};
use crate::rationalization::{
    ModelConfig, ModelParams, Rationalizer, RegularizerConfig, TokenSequence,
};
use crate::synthetic::{generate_corpus, skew_pretrain, Corpus, CorpusSpec, SkewSpec};
use crate::tensor::AdamConfig;

pub const SEED_ENV: &str = "RATIONALE_FORGE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Generate in memory from a spec.
    Spec(CorpusSpec),
    /// Read a directory written by `gen-data`.
    Path(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// Linearly anneal towards this temperature by the last epoch.
    #[serde(default)]
    pub final_temperature: Option<f64>,
    pub mode: MaskMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            final_temperature: None,
            mode: MaskMode::HardStraightThrough,
        }
    }
}

impl SamplerConfig {
    pub fn at_epoch(&self, epoch: usize, epochs: usize) -> GumbelMaskSampler {
        let temperature = match self.final_temperature {
            Some(end) if epochs > 1 => {
                let frac = (epoch.saturating_sub(1)) as f64 / (epochs - 1) as f64;
                self.temperature + (end - self.temperature) * frac
            }
            _ => self.temperature,
        };
        GumbelMaskSampler {
            temperature,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    pub corpus: CorpusSource,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub share_encoder: bool,
    pub regularizer: RegularizerConfig,
    /// `None` trains without any scheduler involvement.
    pub schedule: Option<ScheduleConfig>,
    pub optimizer: AdamConfig,
    pub sampler: SamplerConfig,
    /// Predictor pre-training epochs on the degenerate view.
    #[serde(default)]
    pub skew_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            corpus: CorpusSource::Spec(CorpusSpec::default()),
            embed_dim: 16,
            hidden_dim: 16,
            share_encoder: false,
            regularizer: RegularizerConfig {
                sparsity_weight: 5.0,
                continuity_weight: 0.1,
                target_sparsity: 0.2,
            },
            schedule: Some(ScheduleConfig::default()),
            optimizer: AdamConfig::default(),
            sampler: SamplerConfig::default(),
            skew_epochs: 0,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if let CorpusSource::Spec(s) = &self.corpus {
            s.validate()?;
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        self.regularizer.validate()?;
        let t = self.sampler.temperature;
        let t_end = self.sampler.final_temperature.unwrap_or(t);
        if !(t > 0.0 && t_end > 0.0 && t.is_finite() && t_end.is_finite()) {
            return Err(Error::Config(
                "temperatures must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the serialized config with the output directory cleared,
    /// so moving a run does not change its identity.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        Ok(hex(&Sha256::digest(serde_json::to_vec(&c)?)))
    }

    pub fn corpus_spec(&self) -> Option<&CorpusSpec> {
        match &self.corpus {
            CorpusSource::Spec(s) => Some(s),
            CorpusSource::Path(_) => None,
        }
    }

    pub fn corpus_spec_mut(&mut self) -> Option<&mut CorpusSpec> {
        match &mut self.corpus {
            CorpusSource::Spec(s) => Some(s),
            CorpusSource::Path(_) => None,
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.corpus {
            CorpusSource::Spec(s) => generate_corpus(s),
            CorpusSource::Path(p) => Corpus::read(p),
        }
    }

    pub fn model_config(&self, corpus: &CorpusSpec) -> ModelConfig {
        ModelConfig {
            vocab_size: corpus.vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            classes: corpus.classes,
            share_encoder: self.share_encoder,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Seed from the environment fallback, if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Named base configurations.
pub fn preset(name: &str) -> Result<RunConfig> {
    let mut c = RunConfig {
        preset: Some(name.to_string()),
        ..RunConfig::default()
    };
    match name {
        "standard" | "sparsity" | "interval" => {}
        "degeneration-skew" => {
            c.corpus_spec_mut().expect("spec corpus").bias = 0.8;
        }
        "bias-sweep" => {}
        other => return Err(Error::Config(format!("unknown preset {other:?}"))),
    }
    Ok(c)
}

pub const PRESETS: [&str; 5] = [
    "standard",
    "degeneration-skew",
    "bias-sweep",
    "sparsity",
    "interval",
];

/// One child run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    /// Name of the swept knob and its value, e.g. `("skew", 10.0)`.
    pub knob: String,
    pub value: f64,
    pub ablation: String,
    pub config: RunConfig,
}

fn ablation_name(schedule: &Option<ScheduleConfig>) -> String {
    match schedule {
        None => "scheduler_off".into(),
        Some(s) => serde_json::to_value(s.ablation)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
    }
}

fn with_ablation(base: &RunConfig, ablation: Ablation) -> RunConfig {
    let mut c = base.clone();
    let mut s = c.schedule.unwrap_or_default();
    s.ablation = ablation;
    c.schedule = Some(s);
    c
}

/// Expand a preset into its grid of child runs, one per seed in `seeds`.
pub fn sweep_grid(name: &str, base: &RunConfig, seeds: &[u64]) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    let mut push = |knob: &str, value: f64, config: RunConfig| {
        for &seed in seeds {
            let mut c = config.clone();
            c.seed = seed;
            if let Some(s) = c.corpus_spec_mut() {
                s.seed = seed;
            }
            let ablation = ablation_name(&c.schedule);
            cells.push(SweepCell {
                label: format!("{knob}{value}-{ablation}-seed{seed}"),
                knob: knob.to_string(),
                value,
                ablation,
                config: c,
            });
        }
    };
    match name {
        "degeneration-skew" => {
            for k in [10usize, 15, 20] {
                for ablation in [Ablation::BaselineRnp, Ablation::Full] {
                    let mut c = with_ablation(base, ablation);
                    c.skew_epochs = k;
                    push("skew", k as f64, c);
                }
            }
        }
        "bias-sweep" => {
            for i in 1..=9 {
                let b = i as f64 / 10.0;
                for ablation in [
                    Ablation::Full,
                    Ablation::WithoutGeneratorPhase,
                    Ablation::WithoutPredictorPhase,
                ] {
                    let mut c = with_ablation(base, ablation);
                    c.corpus_spec_mut()
                        .ok_or_else(|| Error::Config("bias-sweep needs a generated corpus".into()))?
                        .bias = b;
                    push("bias", b, c);
                }
            }
        }
        "sparsity" => {
            for s in [0.1, 0.2, 0.3] {
                let mut c = base.clone();
                c.regularizer.target_sparsity = s;
                push("sparsity", s, c);
            }
        }
        "interval" => {
            for n in [1usize, 5, 10] {
                let mut c = base.clone();
                let mut s = c.schedule.unwrap_or_default();
                s.interval = n;
                c.schedule = Some(s);
                push("interval", n as f64, c);
            }
        }
        "standard" => push("seed", 0.0, base.clone()),
        other => return Err(Error::Config(format!("unknown preset {other:?}"))),
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub rows: Vec<MetricsRow>,
    pub best_epoch: usize,
    /// Annotated-split metrics of the checkpoint selected on dev accuracy.
    pub selected: MetricsRow,
    /// Annotated-split metrics after the last epoch.
    pub last: MetricsRow,
    pub steps: usize,
    pub interventions: usize,
}

/// Metrics of `params` on `examples` with deterministic masks.
pub fn evaluate_params(
    model: &Rationalizer,
    params: &ModelParams,
    examples: &[TokenSequence],
    split: &str,
    epoch: usize,
) -> Result<MetricsRow> {
    let inferred = model.infer(params, examples, 128)?;
    let mut pooled = PooledPrf::default();
    let mut hits = 0;
    let mut sparsity = 0.0;
    for (e, inf) in examples.iter().zip(&inferred) {
        pooled.add(&inf.mask, &e.gold_mask)?;
        hits += usize::from(inf.predicted == e.label);
        sparsity += inf.mask.iter().map(|&m| m as f64).sum::<f64>() / e.len() as f64;
    }
    let n = examples.len().max(1) as f64;
    let prf = pooled.finish();
    Ok(MetricsRow {
        epoch,
        split: split.to_string(),
        acc: hits as f64 / n,
        p: prf.precision,
        r: prf.recall,
        f1: prf.f1,
        sparsity: sparsity / n,
        gen_grad_norm: 0.0,
        interventions: 0,
    })
}

/// Evaluate a checkpoint file against a configuration's annotated split.
pub fn evaluate(checkpoint: &Path, config: &RunConfig) -> Result<MetricsRow> {
    let corpus = config.load_corpus()?;
    evaluate_on(checkpoint, config, &corpus.annotated, "annotated")
}

pub fn evaluate_on(
    checkpoint: &Path,
    config: &RunConfig,
    examples: &[TokenSequence],
    split: &str,
) -> Result<MetricsRow> {
    let corpus_spec = match &config.corpus {
        CorpusSource::Spec(s) => s.clone(),
        CorpusSource::Path(p) => Corpus::read(p)?.spec,
    };
    let model = Rationalizer::new(config.model_config(&corpus_spec))?;
    let like = model.init(&mut ChaCha8Rng::seed_from_u64(0));
    let ck = Checkpoint::load(checkpoint)?;
    let epoch = ck.epoch;
    let params = ck.into_params(&like)?;
    evaluate_params(&model, &params, examples, split, epoch)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train one model end to end. With `output_dir` set, also writes
/// `config.json`, `metrics.csv`, `phases.jsonl`, `advantage.jsonl`,
/// `checkpoint_final.json`, `checkpoint_best.json` and `summary.json`.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let corpus = config.load_corpus()?;
    run_with_corpus(config, &corpus)
}

pub fn run_with_corpus(config: &RunConfig, corpus: &Corpus) -> Result<RunSummary> {
    config.validate()?;
    let hash = config.hash()?;
    let out = config.output_dir.as_deref();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(
            &dir.join("config.json"),
            &serde_json::to_string_pretty(config)?,
        )?;
    }
    let model = Rationalizer::new(config.model_config(&corpus.spec))?;
    for e in corpus
        .train
        .iter()
        .chain(&corpus.dev)
        .chain(&corpus.annotated)
    {
        e.validate(corpus.spec.vocab_size, corpus.spec.classes)?;
    }
    let mut params = model.init(&mut stream(config.seed, 0));
    skew_pretrain(
        &model,
        &mut params,
        &corpus.spec,
        &corpus.train,
        &SkewSpec {
            epochs: config.skew_epochs,
            batch_size: config.batch_size,
            optimizer: config.optimizer,
            seed: config.seed.wrapping_add(0x5eed),
        },
    )?;
    let mut trainer = Trainer::new(
        model,
        params,
        config.optimizer,
        config.regularizer,
        config.sampler.at_epoch(1, config.epochs),
        config.schedule,
    )?;
    let mut order_rng = stream(config.seed, 1);
    let mut noise_rng = stream(config.seed, 2);
    let mut extra_rng = stream(config.seed, 3);
    let train = &corpus.train;
    let bs = config.batch_size;
    let mut extra = || -> Vec<TokenSequence> {
        (0..bs.min(train.len()))
            .map(|_| train[extra_rng.gen_range(0..train.len())].clone())
            .collect()
    };

    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut interventions = 0;
    let mut phases_text = String::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        trainer.sampler = config.sampler.at_epoch(epoch, config.epochs);
        order.shuffle(&mut order_rng);
        let mut norm_sum = 0.0;
        let mut steps = 0usize;
        for idx in order.chunks(bs) {
            let batch: Vec<TokenSequence> = idx.iter().map(|&i| train[i].clone()).collect();
            let outcome = match trainer.advance(&batch, &mut extra, &mut noise_rng) {
                Ok(o) => o,
                Err(e) => {
                    if let (Error::NonFinite { .. }, Some(dir)) = (&e, out) {
                        let dump = serde_json::json!({
                            "error": e.to_string(),
                            "epoch": epoch,
                            "step": trainer.step_count(),
                            "config_hash": hash,
                            "last_records": trainer.records.iter().rev().take(10).collect::<Vec<_>>(),
                        });
                        write_file(
                            &dir.join("failure.json"),
                            &serde_json::to_string_pretty(&dump)?,
                        )?;
                    }
                    return Err(e);
                }
            };
            norm_sum += outcome.gen_grad_norm;
            steps += 1;
            if outcome.intervened {
                interventions += 1;
            }
        }
        for trace in trainer.traces.drain(..) {
            phases_text.push_str(&serde_json::to_string(&trace)?);
            phases_text.push('\n');
        }
        let mean_norm = norm_sum / steps.max(1) as f64;
        for (split, data) in [("dev", &corpus.dev), ("annotated", &corpus.annotated)] {
            let mut row = evaluate_params(&model, &trainer.params, data, split, epoch)?;
            row.gen_grad_norm = mean_norm;
            row.interventions = interventions;
            rows.push(row);
        }
        let dev_acc = rows[rows.len() - 2].acc;
        // ties go to the later epoch
        if best.as_ref().is_none_or(|(acc, _, _)| dev_acc >= *acc) {
            best = Some((dev_acc, epoch, trainer.params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let mut selected = evaluate_params(
        &model,
        &best_params,
        &corpus.annotated,
        "annotated",
        best_epoch,
    )?;
    let mut last = evaluate_params(
        &model,
        &trainer.params,
        &corpus.annotated,
        "annotated",
        config.epochs,
    )?;
    for r in [&mut selected, &mut last] {
        let same = rows
            .iter()
            .find(|x| x.split == "annotated" && x.epoch == r.epoch)
            .expect("logged");
        r.gen_grad_norm = same.gen_grad_norm;
        r.interventions = same.interventions;
    }
    let summary = RunSummary {
        config_hash: hash.clone(),
        rows,
        best_epoch,
        selected,
        last,
        steps: trainer.step_count(),
        interventions,
    };
    if let Some(dir) = out {
        write_file(&dir.join("metrics.csv"), &metrics_csv(&summary.rows))?;
        write_file(&dir.join("phases.jsonl"), &phases_text)?;
        let mut adv = String::new();
        for r in &trainer.records {
            adv.push_str(&serde_json::to_string(r)?);
            adv.push('\n');
        }
        write_file(&dir.join("advantage.jsonl"), &adv)?;
        Checkpoint::from_params(&trainer.params, &hash, config.epochs)
            .save(&dir.join("checkpoint_final.json"))?;
        Checkpoint::from_params(&best_params, &hash, best_epoch)
            .save(&dir.join("checkpoint_best.json"))?;
        write_file(
            &dir.join("summary.json"),
            &serde_json::to_string_pretty(&summary)?,
        )?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cell: SweepCell,
    pub summary: RunSummary,
}

/// Run every cell, `jobs` at a time. Each cell writes under
/// `root/<label>/` when `root` is given.
pub fn run_sweep(
    cells: &[SweepCell],
    root: Option<&Path>,
    jobs: usize,
) -> Result<Vec<SweepResult>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunSummary>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let mut c = cells[i].config.clone();
                c.output_dir = root.map(|r| r.join(&cells[i].label));
                let result = run(&c);
                slots.lock().expect("no panics while holding the lock")[i] = Some(result);
            });
        }
    });
    let slots = slots.into_inner().expect("workers joined");
    let mut out = Vec::with_capacity(cells.len());
    for (cell, slot) in cells.iter().zip(slots) {
        let summary = slot.expect("every cell ran")?;
        out.push(SweepResult {
            cell: cell.clone(),
            summary,
        });
    }
    if let Some(dir) = root {
        write_file(&dir.join("grid.csv"), &grid_csv(&out))?;
        write_file(&dir.join("table.txt"), &grid_table(&out))?;
    }
    Ok(out)
}

pub const GRID_COLUMNS: &str = "label,knob,value,ablation,seed,acc,p,r,f1,sparsity,last_f1";

/// One row per child run, using the selected checkpoint's metrics.
pub fn grid_csv(results: &[SweepResult]) -> String {
    let mut out = format!("# columns (stable order): {GRID_COLUMNS}\n{GRID_COLUMNS}\n");
    for r in results {
        let s = &r.summary.selected;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.cell.label,
            r.cell.knob,
            r.cell.value,
            r.cell.ablation,
            r.cell.config.seed,
            s.acc,
            s.p,
            s.r,
            s.f1,
            s.sparsity,
            r.summary.last.f1
        );
    }
    out
}

/// Knob values down, ablations across; each cell is `acc / F1` averaged
/// over seeds.
pub fn grid_table(results: &[SweepResult]) -> String {
    let mut knobs: Vec<f64> = Vec::new();
    let mut ablations: Vec<String> = Vec::new();
    for r in results {
        if !knobs.contains(&r.cell.value) {
            knobs.push(r.cell.value);
        }
        if !ablations.contains(&r.cell.ablation) {
            ablations.push(r.cell.ablation.clone());
        }
    }
    let knob = results.first().map_or("knob", |r| r.cell.knob.as_str());
    let mut out = format!("{knob:>10}");
    for a in &ablations {
        let _ = write!(out, " | {a:>24}");
    }
    out.push('\n');
    for &k in &knobs {
        let _ = write!(out, "{k:>10}");
        for a in &ablations {
            let hits: Vec<&RunSummary> = results
                .iter()
                .filter(|r| r.cell.value == k && &r.cell.ablation == a)
                .map(|r| &r.summary)
                .collect();
            let n = hits.len().max(1) as f64;
            let acc = hits.iter().map(|s| s.selected.acc).sum::<f64>() / n;
            let f1 = hits.iter().map(|s| s.selected.f1).sum::<f64>() / n;
            let _ = write!(out, " | {:>11.3} / {:>10.3}", acc, f1);
        }
        out.push('\n');
    }
    out
}
