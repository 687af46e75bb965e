//! The generator/predictor game: mask generation, rationale formation,
//! prediction from the rationale alone, the sparsity/continuity penalty and
//! the joint cross-entropy objective.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    lookup, BiRecurrentEncoder, Bound, EmbeddingTable, GumbelMaskSampler, Linear, MaskMode,
};
use crate::tensor::{Axis, ParamSet, Tape, Tensor, Var};

/// One example: token ids, class label and the planted rationale.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub gold_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab_size: usize, classes: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if self.gold_mask.len() != self.tokens.len() {
            return Err(Error::InvalidInput(format!(
                "gold mask length {} differs from sequence length {}",
                self.gold_mask.len(),
                self.tokens.len()
            )));
        }
        if self.label >= classes {
            return Err(Error::InvalidInput(format!(
                "label {} >= classes {classes}",
                self.label
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of vocabulary of size {vocab_size}"
            )));
        }
        Ok(())
    }
}

/// A right-padded batch laid out time-major.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub valid: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn new(examples: &[&TokenSequence]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if examples.iter().any(|e| e.is_empty()) {
            return Err(Error::InvalidInput(
                "cannot encode a zero-length sequence".into(),
            ));
        }
        let max_len = examples.iter().map(|e| e.len()).max().unwrap_or(0);
        let mut ids = vec![vec![0; examples.len()]; max_len];
        let mut valid = vec![vec![false; examples.len()]; max_len];
        for (b, e) in examples.iter().enumerate() {
            for (t, &tok) in e.tokens.iter().enumerate() {
                ids[t][b] = tok;
                valid[t][b] = true;
            }
        }
        Ok(Batch {
            ids,
            valid,
            labels: examples.iter().map(|e| e.label).collect(),
            lengths: examples.iter().map(|e| e.len()).collect(),
        })
    }

    /// `copies` identical rows of one example, for mask enumeration.
    pub fn repeat(example: &TokenSequence, copies: usize) -> Result<Self> {
        let refs = vec![example; copies];
        Self::new(&refs)
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    fn valid_column(&self) -> Vec<f64> {
        // time-major, matching rows stacked step by step
        self.valid
            .iter()
            .flat_map(|row| row.iter().map(|&v| if v { 1.0 } else { 0.0 }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// λ1
    pub sparsity_weight: f64,
    /// λ2
    pub continuity_weight: f64,
    /// s
    pub target_sparsity: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            sparsity_weight: 10.0,
            continuity_weight: 10.0,
            target_sparsity: 0.2,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sparsity_weight < 0.0 || self.continuity_weight < 0.0 {
            return Err(Error::Config(
                "regularizer weights must be non-negative".into(),
            ));
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return Err(Error::Config(format!(
                "target sparsity must lie in (0, 1), got {}",
                self.target_sparsity
            )));
        }
        Ok(())
    }
}

/// Sparsity/continuity penalty of a single mask:
/// `λ1·|Σm/l − s| + λ2·Σ_{t≥2}|m_t − m_{t−1}|`.
pub fn regularizer(mask: &[f64], cfg: &RegularizerConfig) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::InvalidInput("regularizer of an empty mask".into()));
    }
    let l = mask.len() as f64;
    let frac = mask.iter().sum::<f64>() / l;
    let transitions: f64 = mask.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(cfg.sparsity_weight * (frac - cfg.target_sparsity).abs()
        + cfg.continuity_weight * transitions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    /// Predictor reuses the generator's embedding and encoder.
    #[serde(default)]
    pub share_encoder: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Generator (θ_g) and predictor (θ_p) parameters. The two sets never share
/// a tensor; with `share_encoder` the predictor simply has no embedding or
/// encoder of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub generator: ParamSet,
    pub predictor: ParamSet,
}

/// Leaves of both players bound on one tape.
#[derive(Debug, Clone)]
pub struct Bindings {
    pub generator: Bound,
    pub predictor: Bound,
}

/// Keep probabilities and mask values per time step, each `[batch x 1]`.
/// Padded positions are forced to zero.
#[derive(Debug, Clone)]
pub struct MaskSample {
    pub probs: Vec<Var>,
    pub mask: Vec<Var>,
}

impl MaskSample {
    /// Mask values per example over its real positions.
    pub fn values(&self, tape: &Tape, batch: &Batch) -> Vec<Vec<f64>> {
        (0..batch.size())
            .map(|b| {
                (0..batch.lengths[b])
                    .map(|t| tape.data(self.mask[t])[b])
                    .collect()
            })
            .collect()
    }

    pub fn prob_values(&self, tape: &Tape, batch: &Batch) -> Vec<Vec<f64>> {
        (0..batch.size())
            .map(|b| {
                (0..batch.lengths[b])
                    .map(|t| tape.data(self.probs[t])[b])
                    .collect()
            })
            .collect()
    }
}

/// The masked input Ẑ: per step, the predictor-side token embedding scaled
/// by the mask. This, plus which positions are real, is everything the
/// predictor gets to see.
#[derive(Debug, Clone)]
pub struct Rationale {
    pub steps: Vec<Var>,
    pub valid: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub reg: Var,
    pub log_probs: Var,
    pub mask: MaskSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rationalizer {
    pub config: ModelConfig,
}

impl Rationalizer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Rationalizer { config })
    }

    fn embedding(&self) -> EmbeddingTable {
        EmbeddingTable {
            vocab_size: self.config.vocab_size,
            dim: self.config.embed_dim,
        }
    }

    fn encoder(&self) -> BiRecurrentEncoder {
        BiRecurrentEncoder {
            input_dim: self.config.embed_dim,
            hidden_dim: self.config.hidden_dim,
        }
    }

    fn mask_head(&self) -> Linear {
        Linear {
            input: self.encoder().output_dim(),
            output: 2,
        }
    }

    fn classifier(&self) -> Linear {
        Linear {
            input: self.encoder().output_dim(),
            output: self.config.classes,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let mut generator = ParamSet::new();
        self.embedding().init(&mut generator, "emb", rng);
        self.encoder().init(&mut generator, "enc", rng);
        self.mask_head().init(&mut generator, "head", rng);
        let mut predictor = ParamSet::new();
        if !self.config.share_encoder {
            self.embedding().init(&mut predictor, "emb", rng);
            self.encoder().init(&mut predictor, "enc", rng);
        }
        self.classifier().init(&mut predictor, "cls", rng);
        ModelParams {
            config: self.config,
            generator,
            predictor,
        }
    }

    pub fn bind(&self, tape: &mut Tape, params: &ModelParams) -> Result<Bindings> {
        if params.config != self.config {
            return Err(Error::Config(
                "parameters were built for a different model config".into(),
            ));
        }
        Ok(Bindings {
            generator: tape.bind(&params.generator),
            predictor: tape.bind(&params.predictor),
        })
    }

    fn predictor_encoder_side<'a>(&self, b: &'a Bindings) -> &'a Bound {
        if self.config.share_encoder {
            &b.generator
        } else {
            &b.predictor
        }
    }

    fn check_ids(&self, batch: &Batch) -> Result<()> {
        let v = self.config.vocab_size;
        for (t, row) in batch.ids.iter().enumerate() {
            for (b, &id) in row.iter().enumerate() {
                if batch.valid[t][b] && id >= v {
                    return Err(Error::InvalidInput(format!(
                        "token id {id} out of vocabulary of size {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Contextual states `[batch x 2H]` per step, given per-step embeddings.
    pub fn encode(
        &self,
        tape: &mut Tape,
        side: &Bound,
        inputs: &[Var],
        valid: &[Vec<bool>],
    ) -> Result<Vec<Var>> {
        self.encoder().forward(tape, side, "enc", inputs, valid)
    }

    fn embed(&self, tape: &mut Tape, side: &Bound, batch: &Batch) -> Result<Vec<Var>> {
        self.check_ids(batch)?;
        let table = lookup(side, "emb")?;
        let emb = self.embedding();
        batch
            .ids
            .iter()
            .map(|ids| emb.lookup(tape, table, ids))
            .collect()
    }

    /// Generator pass: encode X, score keep/drop per token and sample a
    /// mask. Never reads gold annotations.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bindings: &Bindings,
        batch: &Batch,
        sampler: &GumbelMaskSampler,
        rng: &mut R,
    ) -> Result<MaskSample> {
        let g = &bindings.generator;
        let inputs = self.embed(tape, g, batch)?;
        let states = self.encode(tape, g, &inputs, &batch.valid)?;
        let stacked = tape.concat(&states, Axis::Rows)?;
        let logits = self.mask_head().forward(tape, g, "head", stacked)?;
        let sampled = sampler.sample(tape, logits, rng)?;
        let rows = batch.size();
        let steps = batch.max_len();
        let (probs, mask) = if batch.valid.iter().flatten().all(|&v| v) {
            (sampled.probs, sampled.mask)
        } else {
            let keep = tape.constant(Tensor::matrix(rows * steps, 1, batch.valid_column())?);
            (
                tape.mul(sampled.probs, keep)?,
                tape.mul(sampled.mask, keep)?,
            )
        };
        let split = |tape: &mut Tape, v: Var| -> Result<Vec<Var>> {
            (0..steps)
                .map(|t| tape.slice(v, Axis::Rows, t * rows, (t + 1) * rows))
                .collect()
        };
        Ok(MaskSample {
            probs: split(tape, probs)?,
            mask: split(tape, mask)?,
        })
    }

    /// Ẑ = M ⊙ embedded(X), embedding with the predictor-side table.
    pub fn mask_input(
        &self,
        tape: &mut Tape,
        bindings: &Bindings,
        batch: &Batch,
        mask: &[Var],
    ) -> Result<Rationale> {
        if mask.len() != batch.max_len() {
            return Err(Error::InvalidInput(format!(
                "mask has {} steps, batch has {}",
                mask.len(),
                batch.max_len()
            )));
        }
        let side = self.predictor_encoder_side(bindings);
        let inputs = self.embed(tape, side, batch)?;
        let dim = self.config.embed_dim;
        let steps = inputs
            .iter()
            .zip(mask)
            .map(|(&x, &m)| {
                let m = tape.expand_cols(m, dim)?;
                tape.mul(x, m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Rationale {
            steps,
            valid: batch.valid.clone(),
        })
    }

    /// Class log-probabilities `[batch x c]` computed from Ẑ only.
    pub fn predict(
        &self,
        tape: &mut Tape,
        bindings: &Bindings,
        rationale: &Rationale,
    ) -> Result<Var> {
        for &s in &rationale.steps {
            let (_, width) = tape.value(s).dims2("predict")?;
            if width != self.config.embed_dim {
                return Err(Error::ShapeMismatch {
                    op: "predict",
                    lhs: tape.shape(s).to_vec(),
                    rhs: vec![tape.shape(s)[0], self.config.embed_dim],
                });
            }
        }
        let side = self.predictor_encoder_side(bindings);
        let states = self.encode(tape, side, &rationale.steps, &rationale.valid)?;
        let pooled = tape.masked_max(&states, &rationale.valid)?;
        let logits = self
            .classifier()
            .forward(tape, &bindings.predictor, "cls", pooled)?;
        tape.log_softmax(logits)
    }

    /// Mean negative log-likelihood of `labels`.
    pub fn cross_entropy(&self, tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let picked = tape.gather(log_probs, labels)?;
        let nll = tape.scale(picked, -1.0)?;
        tape.mean(nll)
    }

    /// Batch mean of the per-example sparsity/continuity penalty.
    pub fn regularizer(
        &self,
        tape: &mut Tape,
        mask: &[Var],
        batch: &Batch,
        cfg: &RegularizerConfig,
    ) -> Result<Var> {
        let rows = batch.size();
        let l = batch.max_len();
        let m = tape.concat(mask, Axis::Cols)?;
        let selected = tape.row_sums(m)?;
        let inv_len = batch.lengths.iter().map(|&n| 1.0 / n as f64).collect();
        let inv_len = tape.constant(Tensor::matrix(rows, 1, inv_len)?);
        let frac = tape.mul(selected, inv_len)?;
        let dev = tape.add_scalar(frac, -cfg.target_sparsity)?;
        let dev = tape.abs(dev)?;
        let sparsity = tape.mean(dev)?;
        let sparsity = tape.scale(sparsity, cfg.sparsity_weight)?;
        if l < 2 {
            let zero = tape.constant(Tensor::scalar(0.0));
            return tape.add(sparsity, zero);
        }
        let tail = tape.slice(m, Axis::Cols, 1, l)?;
        let head = tape.slice(m, Axis::Cols, 0, l - 1)?;
        let jumps = tape.sub(tail, head)?;
        let jumps = tape.abs(jumps)?;
        let pair_valid = (0..rows)
            .flat_map(|b| (1..l).map(move |t| (b, t)))
            .map(|(b, t)| {
                if batch.valid[t][b] && batch.valid[t - 1][b] {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let pair_valid = tape.constant(Tensor::matrix(rows, l - 1, pair_valid)?);
        let jumps = tape.mul(jumps, pair_valid)?;
        let per_example = tape.row_sums(jumps)?;
        let continuity = tape.mean(per_example)?;
        let continuity = tape.scale(continuity, cfg.continuity_weight)?;
        tape.add(sparsity, continuity)
    }

    /// `total = H(Y, f_P(f_G(X))) + Ω(M)`.
    pub fn mmi_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bindings: &Bindings,
        batch: &Batch,
        cfg: &RegularizerConfig,
        sampler: &GumbelMaskSampler,
        rng: &mut R,
    ) -> Result<LossParts> {
        let mask = self.generate(tape, bindings, batch, sampler, rng)?;
        let rationale = self.mask_input(tape, bindings, batch, &mask.mask)?;
        let log_probs = self.predict(tape, bindings, &rationale)?;
        let ce = self.cross_entropy(tape, log_probs, &batch.labels)?;
        let reg = self.regularizer(tape, &mask.mask, batch, cfg)?;
        let total = tape.add(ce, reg)?;
        Ok(LossParts {
            total,
            ce,
            reg,
            log_probs,
            mask,
        })
    }

    /// Inference with deterministic masks. Gradients are never tracked.
    pub fn infer(
        &self,
        params: &ModelParams,
        examples: &[TokenSequence],
        batch_size: usize,
    ) -> Result<Vec<Inference>> {
        let mut frozen = params.clone();
        frozen.generator.set_frozen(true);
        frozen.predictor.set_frozen(true);
        let sampler = GumbelMaskSampler {
            temperature: 1.0,
            mode: MaskMode::DeterministicArgmax,
        };
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let batch = Batch::new(&refs)?;
            let mut tape = Tape::new();
            let bindings = self.bind(&mut tape, &frozen)?;
            // deterministic mode draws no noise
            let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
            let mask = self.generate(&mut tape, &bindings, &batch, &sampler, &mut no_rng)?;
            let rationale = self.mask_input(&mut tape, &bindings, &batch, &mask.mask)?;
            let log_probs = self.predict(&mut tape, &bindings, &rationale)?;
            let c = self.config.classes;
            let lp = tape.data(log_probs);
            let masks = mask.values(&tape, &batch);
            for (b, m) in masks.into_iter().enumerate() {
                let row = &lp[b * c..(b + 1) * c];
                let predicted = argmax(row);
                out.push(Inference {
                    mask: m.iter().map(|&v| u8::from(v > 0.5)).collect(),
                    log_probs: row.to_vec(),
                    predicted,
                });
            }
        }
        Ok(out)
    }

    /// Cross-entropy of the predictor for each of `masks` applied to one
    /// example, with all parameters held fixed.
    pub fn masked_losses(
        &self,
        params: &ModelParams,
        example: &TokenSequence,
        masks: &[Vec<u8>],
    ) -> Result<Vec<f64>> {
        example.validate(self.config.vocab_size, self.config.classes)?;
        let mut frozen = params.clone();
        frozen.generator.set_frozen(true);
        frozen.predictor.set_frozen(true);
        let l = example.len();
        let mut losses = Vec::with_capacity(masks.len());
        for chunk in masks.chunks(512) {
            let batch = Batch::repeat(example, chunk.len())?;
            let mut tape = Tape::new();
            let bindings = self.bind(&mut tape, &frozen)?;
            let mut steps = Vec::with_capacity(l);
            for t in 0..l {
                let col = chunk.iter().map(|m| m[t] as f64).collect();
                steps.push(tape.constant(Tensor::matrix(chunk.len(), 1, col)?));
            }
            let rationale = self.mask_input(&mut tape, &bindings, &batch, &steps)?;
            let lp = self.predict(&mut tape, &bindings, &rationale)?;
            let c = self.config.classes;
            let data = tape.data(lp);
            losses.extend((0..chunk.len()).map(|b| -data[b * c + example.label]));
        }
        Ok(losses)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub mask: Vec<u8>,
    pub log_probs: Vec<f64>,
    pub predicted: usize,
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Which masks the oracle enumerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Enumeration {
    /// All `2^l` masks; requires `l <= 14`.
    All,
    /// Exactly `k` selected tokens; requires `C(l, k) <= 10^6`.
    ExactSize(usize),
}

pub const MAX_ALL_MASKS_LEN: usize = 14;
pub const MAX_EXACT_SIZE_MASKS: u128 = 1_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Masks over `l` positions in lexicographic order of their bit patterns.
pub fn enumerate_masks(l: usize, mode: Enumeration) -> Result<Vec<Vec<u8>>> {
    match mode {
        Enumeration::All => {
            if l > MAX_ALL_MASKS_LEN {
                return Err(Error::TooLarge(format!(
                    "2^{l} masks (limit l <= {MAX_ALL_MASKS_LEN})"
                )));
            }
            Ok((0u32..1 << l)
                .map(|bits| (0..l).map(|t| ((bits >> t) & 1) as u8).collect())
                .collect())
        }
        Enumeration::ExactSize(k) => {
            let n = binomial(l, k);
            if k > l || n > MAX_EXACT_SIZE_MASKS {
                return Err(Error::TooLarge(format!("C({l}, {k}) = {n} masks")));
            }
            let mut out = Vec::with_capacity(n as usize);
            let mut idx: Vec<usize> = (0..k).collect();
            loop {
                let mut m = vec![0u8; l];
                idx.iter().for_each(|&i| m[i] = 1);
                out.push(m);
                // next k-combination
                let Some(i) = (0..k).rev().find(|&i| idx[i] != i + l - k) else {
                    return Ok(out);
                };
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
            }
        }
    }
}

/// Result of checking sampled masks against the interpolation bound
/// `L(Z_c) <= L(Z_t) <= L(Z̃_c)`, with λ the fraction of positions where
/// `Z_t` agrees with `Z_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationCheck {
    pub samples: usize,
    pub violations: usize,
    /// `(λ, observed L(Z_t), λ·L(Z_c) + (1−λ)·L(Z̃_c))` per sample.
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub masks_evaluated: usize,
    pub best_mask: Vec<u8>,
    pub best_loss: f64,
    pub complement_mask: Vec<u8>,
    pub complement_loss: f64,
    /// Every enumerated mask with its loss, ascending by loss.
    pub ordering: Vec<(Vec<u8>, f64)>,
    pub interpolation: InterpolationCheck,
}

impl OracleReport {
    /// Strict `L(Z_c) < L(Z̃_c)`.
    pub fn lemma_ordering_holds(&self) -> bool {
        self.best_loss < self.complement_loss
    }
}

/// Enumerate masks, score each with the fixed predictor and report the
/// best one, its complement, and the interpolation check.
pub fn brute_force_oracle(
    model: &Rationalizer,
    params: &ModelParams,
    example: &TokenSequence,
    mode: Enumeration,
) -> Result<OracleReport> {
    let l = example.len();
    let mut masks = enumerate_masks(l, mode)?;
    if mode == Enumeration::All {
        // an all-zero rationale carries no information and is never a candidate
        masks.retain(|m| m.contains(&1));
    }
    let losses = model.masked_losses(params, example, &masks)?;
    let mut ordering: Vec<(Vec<u8>, f64)> = masks.into_iter().zip(losses).collect();
    ordering.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let (best_mask, best_loss) = ordering[0].clone();
    let complement_mask: Vec<u8> = best_mask.iter().map(|&v| 1 - v).collect();
    let complement_loss = if complement_mask.iter().all(|&v| v == 0) {
        model.masked_losses(params, example, std::slice::from_ref(&complement_mask))?[0]
    } else {
        match ordering.iter().find(|(m, _)| *m == complement_mask) {
            Some((_, loss)) => *loss,
            None => {
                model.masked_losses(params, example, std::slice::from_ref(&complement_mask))?[0]
            }
        }
    };

    let mut points = Vec::new();
    let mut violations = 0;
    let stride = (ordering.len() / 64).max(1);
    for (m, loss) in ordering.iter().step_by(stride) {
        if *m == best_mask || *m == complement_mask {
            continue;
        }
        let agree = m.iter().zip(&best_mask).filter(|(a, b)| a == b).count() as f64 / l as f64;
        let interpolated = agree * best_loss + (1.0 - agree) * complement_loss;
        if *loss < best_loss || *loss > complement_loss {
            violations += 1;
        }
        points.push((agree, *loss, interpolated));
    }
    Ok(OracleReport {
        masks_evaluated: ordering.len(),
        best_mask,
        best_loss,
        complement_mask,
        complement_loss,
        ordering,
        interpolation: InterpolationCheck {
            samples: points.len(),
            violations,
            points,
        },
    })
}

/// Per-name map of bound leaves for tests that perturb parameters.
pub fn leaf_ids(b: &Bindings) -> BTreeMap<String, Var> {
    b.generator
        .iter()
        .map(|(k, v)| (format!("g.{k}"), *v))
        .chain(b.predictor.iter().map(|(k, v)| (format!("p.{k}"), *v)))
        .collect()
}
