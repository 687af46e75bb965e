//! Policy-intervention schedule and game diagnostics.
//!
//! Ordinary steps take one joint gradient step on `H(Y, Ŷ) + Ω(M)`. At every
//! step `k·N` the joint step is replaced by a three-phase intervention on the
//! same batch:
//!
//! 1. generator frozen, predictor updated;
//! 2. predictor frozen, generator updated;
//! 3. both updated.
//!
//! Each step also yields an [`AdvantageRecord`]. The predictor acts as the
//! critic: `V` is its loss estimate `H + Ω` on the sampled rationale, `Q` is
//! the same quantity one step later, and the realized loss interpolates the
//! predictor's loss on the gold rationale and on its complement by how much
//! of the sampled mask agrees with gold.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::GumbelMaskSampler;
use crate::rationalization::{Batch, ModelParams, Rationalizer, RegularizerConfig, TokenSequence};
use crate::tensor::{grad_norm, Adam, AdamConfig, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    WithoutGeneratorPhase,
    WithoutPredictorPhase,
    BaselineRnp,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "without_generator_phase" | "wo-g" => Ok(Ablation::WithoutGeneratorPhase),
            "without_predictor_phase" | "wo-p" => Ok(Ablation::WithoutPredictorPhase),
            "baseline_rnp" | "rnp" => Ok(Ablation::BaselineRnp),
            other => Err(Error::Config(format!("unknown ablation {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// N
    pub interval: usize,
    pub ablation: Ablation,
    /// Draw a fresh batch for each phase instead of reusing one.
    #[serde(default)]
    pub fresh_batch_per_phase: bool,
    /// Optimizer steps per phase.
    #[serde(default = "one")]
    pub phase_steps: usize,
}

fn one() -> usize {
    1
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            interval: 5,
            ablation: Ablation::Full,
            fresh_batch_per_phase: false,
            phase_steps: 1,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Config("intervention interval must be >= 1".into()));
        }
        if self.phase_steps == 0 {
            return Err(Error::Config("phase_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether global step `t` (1-based) is an intervention step.
    pub fn intervenes_at(&self, t: usize) -> bool {
        self.ablation != Ablation::BaselineRnp && t > 0 && t.is_multiple_of(self.interval)
    }

    /// `{k·N : k = 1..=⌊T/N⌋}`, or nothing for the baseline.
    pub fn intervention_steps(&self, total: usize) -> Vec<usize> {
        (1..=total).filter(|&t| self.intervenes_at(t)).collect()
    }

    fn runs_phase(&self, phase: Phase) -> bool {
        !matches!(
            (phase, self.ablation),
            (_, Ablation::BaselineRnp)
                | (Phase::PredictorOnly, Ablation::WithoutPredictorPhase)
                | (Phase::GeneratorOnly, Ablation::WithoutGeneratorPhase)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PredictorOnly,
    GeneratorOnly,
    Joint,
}

/// Critic diagnostics for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub step: usize,
    pub realized_loss: f64,
    pub value: f64,
    pub error: f64,
    pub q_value: f64,
    pub advantage: f64,
    pub gen_grad_norm: f64,
}

/// `ε = realized − V`, `A = Q − V`.
pub fn diagnose(realized_loss: f64, value: f64, q_value: f64) -> AdvantageRecord {
    AdvantageRecord {
        step: 0,
        realized_loss,
        value,
        error: realized_loss - value,
        q_value,
        advantage: q_value - value,
        gen_grad_norm: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub loss: f64,
    pub gen_checksum_before: u64,
    pub gen_checksum_after: u64,
    pub pred_checksum_before: u64,
    pub pred_checksum_after: u64,
    pub gen_optimizer_before: u64,
    pub gen_optimizer_after: u64,
    pub pred_optimizer_before: u64,
    pub pred_optimizer_after: u64,
    pub gen_grad_norm: f64,
}

/// What one intervention did, phase by phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrace {
    pub step: usize,
    pub phases: Vec<PhaseRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub total: f64,
    pub ce: f64,
    pub reg: f64,
    pub gen_grad_norm: f64,
    pub intervened: bool,
}

/// Collapse thresholds. `grad_norm` is absolute; [`CollapseThresholds::from_initial`]
/// scales it from the first observed generator gradient norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseThresholds {
    pub window: usize,
    pub grad_norm: f64,
    pub f1_plateau: f64,
    pub min_accuracy: f64,
}

impl CollapseThresholds {
    pub const GRAD_FRACTION: f64 = 1e-3;
    pub const F1_PLATEAU: f64 = 0.02;
    pub const MIN_ACCURACY: f64 = 0.85;
    pub const WINDOW: usize = 20;

    pub fn from_initial(initial_grad_norm: f64) -> Self {
        CollapseThresholds {
            window: Self::WINDOW,
            grad_norm: Self::GRAD_FRACTION * initial_grad_norm,
            f1_plateau: Self::F1_PLATEAU,
            min_accuracy: Self::MIN_ACCURACY,
        }
    }
}

/// Vanishing generator gradient while rationale F1 sits still and the
/// predictor is nevertheless accurate.
///
/// `records` must hold at least `thresholds.window` entries; the last
/// `window` are used. `f1_history` holds eval-time F1 values over the same
/// stretch of training.
pub fn detect_collapse(
    records: &[AdvantageRecord],
    f1_history: &[f64],
    accuracy: f64,
    thresholds: &CollapseThresholds,
) -> Result<bool> {
    let w = thresholds.window.max(1);
    if records.len() < w {
        return Err(Error::InvalidInput(format!(
            "collapse window needs {w} records, got {}",
            records.len()
        )));
    }
    if f1_history.is_empty() {
        return Err(Error::InvalidInput(
            "collapse check needs at least one F1 value".into(),
        ));
    }
    let tail = &records[records.len() - w..];
    let mean_norm = tail.iter().map(|r| r.gen_grad_norm).sum::<f64>() / w as f64;
    let (lo, hi) = f1_history
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    Ok(mean_norm < thresholds.grad_norm
        && hi - lo < thresholds.f1_plateau
        && accuracy >= thresholds.min_accuracy)
}

/// Owns the parameters and optimizer state of a run and is the only thing
/// that mutates them.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Rationalizer,
    pub params: ModelParams,
    pub gen_opt: Adam,
    pub pred_opt: Adam,
    pub regularizer: RegularizerConfig,
    pub sampler: GumbelMaskSampler,
    /// `None` runs plain joint training with no scheduler involvement.
    pub schedule: Option<ScheduleConfig>,
    step: usize,
    pending: Option<AdvantageRecord>,
    pub records: Vec<AdvantageRecord>,
    pub traces: Vec<PhaseTrace>,
}

struct Evaluated {
    total: f64,
    ce: f64,
    reg: f64,
    realized: f64,
    gen_grad_norm: f64,
    masks: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(
        model: Rationalizer,
        params: ModelParams,
        optimizer: AdamConfig,
        regularizer: RegularizerConfig,
        sampler: GumbelMaskSampler,
        schedule: Option<ScheduleConfig>,
    ) -> Result<Self> {
        regularizer.validate()?;
        if let Some(s) = &schedule {
            s.validate()?;
        }
        Ok(Trainer {
            gen_opt: Adam::new(&params.generator, optimizer),
            pred_opt: Adam::new(&params.predictor, optimizer),
            model,
            params,
            regularizer,
            sampler,
            schedule,
            step: 0,
            pending: None,
            records: Vec::new(),
            traces: Vec::new(),
        })
    }

    /// Steps taken so far (joint steps and interventions both count one).
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn next_is_intervention(&self) -> bool {
        self.schedule
            .is_some_and(|s| s.intervenes_at(self.step + 1))
    }

    /// Advance one global step, dispatching to the joint update or the
    /// intervention as the schedule dictates. `extra` supplies fresh batches
    /// when the schedule asks for one per phase.
    pub fn advance<R: Rng>(
        &mut self,
        batch: &[TokenSequence],
        extra: &mut dyn FnMut() -> Vec<TokenSequence>,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if self.next_is_intervention() {
            let trace = self.intervene(batch, extra, rng)?;
            let last = trace.phases.last().expect("joint phase always runs");
            let outcome = StepOutcome {
                total: last.loss,
                ce: f64::NAN,
                reg: f64::NAN,
                gen_grad_norm: last.gen_grad_norm,
                intervened: true,
            };
            self.traces.push(trace);
            Ok(outcome)
        } else {
            self.training_step(batch, rng)
        }
    }

    /// One joint update of both players.
    pub fn training_step<R: Rng>(
        &mut self,
        batch: &[TokenSequence],
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if self.next_is_intervention() {
            return Err(Error::Schedule(format!(
                "step {} is an intervention step",
                self.step + 1
            )));
        }
        self.step += 1;
        let ev = self.update(batch, true, true, rng)?;
        self.log_record(&ev);
        Ok(StepOutcome {
            total: ev.total,
            ce: ev.ce,
            reg: ev.reg,
            gen_grad_norm: ev.gen_grad_norm,
            intervened: false,
        })
    }

    /// The three-phase freeze/update intervention.
    pub fn intervene<R: Rng>(
        &mut self,
        batch: &[TokenSequence],
        extra: &mut dyn FnMut() -> Vec<TokenSequence>,
        rng: &mut R,
    ) -> Result<PhaseTrace> {
        let schedule = self
            .schedule
            .ok_or_else(|| Error::Schedule("no schedule configured".into()))?;
        if !schedule.intervenes_at(self.step + 1) {
            return Err(Error::Schedule(format!(
                "step {} is not a multiple of the interval {}",
                self.step + 1,
                schedule.interval
            )));
        }
        self.step += 1;
        let mut phases = Vec::with_capacity(3);
        let mut first = true;
        for phase in [Phase::PredictorOnly, Phase::GeneratorOnly, Phase::Joint] {
            if !schedule.runs_phase(phase) {
                continue;
            }
            let (train_gen, train_pred) = match phase {
                Phase::PredictorOnly => (false, true),
                Phase::GeneratorOnly => (true, false),
                Phase::Joint => (true, true),
            };
            for _ in 0..schedule.phase_steps {
                let owned;
                let data = if schedule.fresh_batch_per_phase && !first {
                    owned = extra();
                    owned.as_slice()
                } else {
                    batch
                };
                first = false;
                let (gb, pb) = (
                    self.params.generator.checksum(),
                    self.params.predictor.checksum(),
                );
                let (gob, pob) = (self.gen_opt.checksum(), self.pred_opt.checksum());
                let ev = self.update(data, train_gen, train_pred, rng)?;
                if phase == Phase::Joint {
                    self.log_record(&ev);
                }
                phases.push(PhaseRecord {
                    phase,
                    loss: ev.total,
                    gen_checksum_before: gb,
                    gen_checksum_after: self.params.generator.checksum(),
                    pred_checksum_before: pb,
                    pred_checksum_after: self.params.predictor.checksum(),
                    gen_optimizer_before: gob,
                    gen_optimizer_after: self.gen_opt.checksum(),
                    pred_optimizer_before: pob,
                    pred_optimizer_after: self.pred_opt.checksum(),
                    gen_grad_norm: ev.gen_grad_norm,
                });
            }
        }
        Ok(PhaseTrace {
            step: self.step,
            phases,
        })
    }

    fn log_record(&mut self, ev: &Evaluated) {
        if let Some(mut prev) = self.pending.take() {
            prev.q_value = ev.total;
            prev.advantage = prev.q_value - prev.value;
            self.records.push(prev);
        }
        let mut rec = diagnose(ev.realized, ev.total, f64::NAN);
        rec.step = self.step;
        rec.gen_grad_norm = ev.gen_grad_norm;
        self.pending = Some(rec);
    }

    fn update<R: Rng>(
        &mut self,
        data: &[TokenSequence],
        train_gen: bool,
        train_pred: bool,
        rng: &mut R,
    ) -> Result<Evaluated> {
        let refs: Vec<&TokenSequence> = data.iter().collect();
        let batch = Batch::new(&refs)?;
        self.params.generator.set_frozen(!train_gen);
        self.params.predictor.set_frozen(!train_pred);
        let result = self.update_inner(&batch, rng);
        self.params.generator.set_frozen(false);
        self.params.predictor.set_frozen(false);
        let mut ev = result?;
        ev.realized = self.realized_loss(data, &batch, &ev.masks, ev.reg)?;
        Ok(ev)
    }

    fn update_inner<R: Rng>(&mut self, batch: &Batch, rng: &mut R) -> Result<Evaluated> {
        let mut tape = Tape::new();
        let bindings = self.model.bind(&mut tape, &self.params)?;
        let parts = self.model.mmi_loss(
            &mut tape,
            &bindings,
            batch,
            &self.regularizer,
            &self.sampler,
            rng,
        )?;
        tape.backward(parts.total)?;
        let g_grads = tape.grads_of(&bindings.generator);
        let p_grads = tape.grads_of(&bindings.predictor);
        let gen_grad_norm = if self.params.generator.is_frozen() {
            0.0
        } else {
            grad_norm(&g_grads)
        };
        self.gen_opt.step(&mut self.params.generator, &g_grads)?;
        self.pred_opt.step(&mut self.params.predictor, &p_grads)?;
        Ok(Evaluated {
            total: tape.item(parts.total)?,
            ce: tape.item(parts.ce)?,
            reg: tape.item(parts.reg)?,
            realized: f64::NAN,
            gen_grad_norm,
            masks: parts.mask.values(&tape, batch),
        })
    }

    /// `λ·H(gold) + (1−λ)·H(complement of gold) + Ω`, batch-averaged, where λ
    /// is the agreement of the sampled mask with gold. Scored with the
    /// post-update predictor.
    fn realized_loss(
        &self,
        data: &[TokenSequence],
        batch: &Batch,
        masks: &[Vec<f64>],
        reg: f64,
    ) -> Result<f64> {
        let mut frozen = self.params.clone();
        frozen.generator.set_frozen(true);
        frozen.predictor.set_frozen(true);
        let n = data.len();
        let mut tape = Tape::new();
        let bindings = self.model.bind(&mut tape, &frozen)?;
        let mut losses = Vec::with_capacity(2);
        for complement in [false, true] {
            let steps = (0..batch.max_len())
                .map(|t| {
                    let col = data
                        .iter()
                        .map(|e| match e.gold_mask.get(t) {
                            Some(&g) => (if complement { 1 - g } else { g }) as f64,
                            None => 0.0,
                        })
                        .collect();
                    Ok(tape.constant(Tensor::matrix(n, 1, col)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let z = self.model.mask_input(&mut tape, &bindings, batch, &steps)?;
            let lp = self.model.predict(&mut tape, &bindings, &z)?;
            let c = self.model.config.classes;
            let d = tape.data(lp);
            losses.push(
                (0..n)
                    .map(|b| -d[b * c + data[b].label])
                    .collect::<Vec<f64>>(),
            );
        }
        let mut total = 0.0;
        for (b, e) in data.iter().enumerate() {
            let agree = masks[b]
                .iter()
                .zip(&e.gold_mask)
                .filter(|(a, g)| (**a > 0.5) == (**g == 1))
                .count() as f64
                / e.len() as f64;
            total += agree * losses[0][b] + (1.0 - agree) * losses[1][b];
        }
        Ok(total / n as f64 + reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        // (realized, V, Q) -> (ε, A)
        let rows = [
            ((1.0, 10000.0, 9999.4), (-9999.0, -0.6)),
            ((8500.0, 1.0, 1.3), (8499.0, 0.3)),
            ((9000.0, 1.0, 1.1), (8999.0, 0.1)),
            ((10000.0, 1.0, 0.9), (9999.0, -0.1)),
        ];
        for ((r, v, q), (eps, adv)) in rows {
            let rec = diagnose(r, v, q);
            assert!((rec.error - eps).abs() < 1e-9);
            assert!((rec.advantage - adv).abs() < 1e-9);
        }
        let rec = diagnose(2.5, 2.5, 2.5);
        assert_eq!((rec.error, rec.advantage), (0.0, 0.0));
    }

    #[test]
    fn schedule_arithmetic() {
        let s = ScheduleConfig {
            interval: 5,
            ..ScheduleConfig::default()
        };
        assert!((1..5).all(|t| !s.intervenes_at(t)));
        assert!(s.intervenes_at(5));
        assert_eq!(s.intervention_steps(23), vec![5, 10, 15, 20]);
        let base = ScheduleConfig {
            ablation: Ablation::BaselineRnp,
            ..s
        };
        assert!(base.intervention_steps(100).is_empty());
        assert!(ScheduleConfig { interval: 0, ..s }.validate().is_err());
    }

    fn rec(norm: f64) -> AdvantageRecord {
        AdvantageRecord {
            gen_grad_norm: norm,
            ..diagnose(0.0, 0.0, 0.0)
        }
    }

    #[test]
    fn collapse_detection_rules() {
        let th = CollapseThresholds::from_initial(1.0);
        let flat: Vec<AdvantageRecord> = (0..20).map(|_| rec(0.0)).collect();
        assert!(detect_collapse(&flat, &[0.3, 0.3, 0.31], 0.95, &th).unwrap());
        let rising: Vec<AdvantageRecord> = (0..20)
            .map(|i| rec(5e-4 * 10f64.powf(i as f64 / 19.0)))
            .collect();
        assert!(!detect_collapse(&rising, &[0.3, 0.3], 0.95, &th).unwrap());
        assert!(!detect_collapse(&flat, &[0.3, 0.3], 0.5, &th).unwrap());
        assert!(!detect_collapse(&flat, &[0.1, 0.4], 0.95, &th).unwrap());
        assert!(detect_collapse(&flat[..5], &[0.3], 0.95, &th).is_err());
    }
}
