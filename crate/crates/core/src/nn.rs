//! Embedding table, bidirectional GRU encoder, linear heads and the
//! Gumbel-softmax keep/drop sampler.
//!
//! Layers own no tensors. They know their parameter names and shapes, write
//! initial values into a [`ParamSet`], and read bound [`Var`]s back from the
//! map returned by [`Tape::bind`].

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis, ParamSet, Tape, Tensor, Var};

pub type Bound = BTreeMap<String, Var>;

pub(crate) fn lookup(bound: &Bound, name: &str) -> Result<Var> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("parameter {name} is not bound")))
}

pub fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data built together")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn init<R: Rng + ?Sized>(&self, set: &mut ParamSet, name: &str, rng: &mut R) {
        set.insert(name, uniform_tensor(rng, &[self.vocab_size, self.dim], 0.1));
    }

    /// Embeds time step `t` of every sequence: `[batch x dim]`.
    pub fn lookup(&self, tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Var> {
        tape.embedding(table, ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(&self, set: &mut ParamSet, prefix: &str, rng: &mut R) {
        let k = 1.0 / (self.input as f64).sqrt();
        set.insert(
            format!("{prefix}.w"),
            uniform_tensor(rng, &[self.input, self.output], k),
        );
        set.insert(format!("{prefix}.b"), Tensor::zeros(&[1, self.output]));
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let w = lookup(bound, &format!("{prefix}.w"))?;
        let b = lookup(bound, &format!("{prefix}.b"))?;
        let rows = tape.shape(x)[0];
        let xw = tape.matmul(x, w)?;
        let bb = tape.expand_rows(b, rows)?;
        tape.add(xw, bb)
    }
}

/// Gate parameters of one GRU direction. Input and hidden projections are
/// stored fused as `[in x 3H]` / `[H x 3H]` in reset, update, candidate order.
struct GruVars {
    wi: Var,
    wh: Var,
    bi: Var,
    bh: Var,
}

/// One-layer bidirectional GRU; output width is `2 * hidden_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiRecurrentEncoder {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl BiRecurrentEncoder {
    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, set: &mut ParamSet, prefix: &str, rng: &mut R) {
        let h = self.hidden_dim;
        let k = 1.0 / (h as f64).sqrt();
        for dir in ["fwd", "bwd"] {
            set.insert(
                format!("{prefix}.{dir}.wi"),
                uniform_tensor(rng, &[self.input_dim, 3 * h], k),
            );
            set.insert(
                format!("{prefix}.{dir}.wh"),
                uniform_tensor(rng, &[h, 3 * h], k),
            );
            set.insert(
                format!("{prefix}.{dir}.bi"),
                uniform_tensor(rng, &[1, 3 * h], k),
            );
            set.insert(
                format!("{prefix}.{dir}.bh"),
                uniform_tensor(rng, &[1, 3 * h], k),
            );
        }
    }

    fn vars(bound: &Bound, prefix: &str, dir: &str) -> Result<GruVars> {
        Ok(GruVars {
            wi: lookup(bound, &format!("{prefix}.{dir}.wi"))?,
            wh: lookup(bound, &format!("{prefix}.{dir}.wh"))?,
            bi: lookup(bound, &format!("{prefix}.{dir}.bi"))?,
            bh: lookup(bound, &format!("{prefix}.{dir}.bh"))?,
        })
    }

    /// Encode a batch given per-step inputs `[batch x input_dim]`.
    ///
    /// `valid[t][b]` marks real tokens. At padded positions the hidden state
    /// is carried through unchanged, so padding never changes outputs at
    /// real positions.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        inputs: &[Var],
        valid: &[Vec<bool>],
    ) -> Result<Vec<Var>> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput(
                "cannot encode a zero-length sequence".into(),
            ));
        }
        if valid.len() != inputs.len() {
            return Err(Error::InvalidInput(
                "validity mask length differs from input length".into(),
            ));
        }
        let (batch, width) = tape.value(inputs[0]).dims2("encode")?;
        if width != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![batch, width],
                rhs: vec![batch, self.input_dim],
            });
        }
        let fwd = Self::vars(bound, prefix, "fwd")?;
        let bwd = Self::vars(bound, prefix, "bwd")?;
        let order: Vec<usize> = (0..inputs.len()).collect();
        let ahead = self.run_direction(tape, &fwd, inputs, valid, order.iter().copied(), batch)?;
        let behind = self.run_direction(
            tape,
            &bwd,
            inputs,
            valid,
            order.iter().rev().copied(),
            batch,
        )?;
        ahead
            .iter()
            .zip(&behind)
            .map(|(&f, &b)| tape.concat(&[f, b], Axis::Cols))
            .collect()
    }

    fn run_direction(
        &self,
        tape: &mut Tape,
        p: &GruVars,
        inputs: &[Var],
        valid: &[Vec<bool>],
        order: impl Iterator<Item = usize>,
        batch: usize,
    ) -> Result<Vec<Var>> {
        let h = self.hidden_dim;
        // Input projections for every step in one product.
        let stacked = tape.concat(inputs, Axis::Rows)?;
        let proj = tape.matmul(stacked, p.wi)?;
        let bi = tape.expand_rows(p.bi, batch * inputs.len())?;
        let proj = tape.add(proj, bi)?;
        let bh = tape.expand_rows(p.bh, batch)?;

        let mut state = tape.constant(Tensor::zeros(&[batch, h]));
        let mut out = vec![state; inputs.len()];
        for t in order {
            let gi = tape.slice(proj, Axis::Rows, t * batch, (t + 1) * batch)?;
            let gh = tape.matmul(state, p.wh)?;
            let gh = tape.add(gh, bh)?;
            let (ir, iz, inn) = (
                tape.slice(gi, Axis::Cols, 0, h)?,
                tape.slice(gi, Axis::Cols, h, 2 * h)?,
                tape.slice(gi, Axis::Cols, 2 * h, 3 * h)?,
            );
            let (hr, hz, hn) = (
                tape.slice(gh, Axis::Cols, 0, h)?,
                tape.slice(gh, Axis::Cols, h, 2 * h)?,
                tape.slice(gh, Axis::Cols, 2 * h, 3 * h)?,
            );
            let r = tape.add(ir, hr)?;
            let r = tape.sigmoid(r)?;
            let z = tape.add(iz, hz)?;
            let z = tape.sigmoid(z)?;
            let rn = tape.mul(r, hn)?;
            let n = tape.add(inn, rn)?;
            let n = tape.tanh(n)?;
            // h' = n + z ⊙ (h - n)
            let d = tape.sub(state, n)?;
            let zd = tape.mul(z, d)?;
            let mut next = tape.add(n, zd)?;
            if valid[t].iter().any(|v| !v) {
                let keep: Vec<f64> = valid[t]
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, h))
                    .collect();
                let hold: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
                let keep = tape.constant(Tensor::matrix(batch, h, keep)?);
                let hold = tape.constant(Tensor::matrix(batch, h, hold)?);
                let a = tape.mul(keep, next)?;
                let b = tape.mul(hold, state)?;
                next = tape.add(a, b)?;
            }
            out[t] = next;
            state = next;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Relaxed sample in `[0, 1]`.
    Soft,
    /// Binary forward value, soft-relaxation gradient.
    HardStraightThrough,
    /// Noise-free: keep iff keep-logit > drop-logit; ties drop.
    DeterministicArgmax,
}

/// Column 0 of the logit pair is "keep", column 1 is "drop".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelMaskSampler {
    pub temperature: f64,
    pub mode: MaskMode,
}

impl Default for GumbelMaskSampler {
    fn default() -> Self {
        GumbelMaskSampler {
            temperature: 1.0,
            mode: MaskMode::HardStraightThrough,
        }
    }
}

/// Keep probabilities and mask values for one step of a batch, both `[batch x 1]`.
#[derive(Debug, Clone, Copy)]
pub struct SampledStep {
    pub probs: Var,
    pub mask: Var,
}

pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u in (0, 1): both logs stay finite
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    -(-u.ln()).ln()
}

impl GumbelMaskSampler {
    pub fn with_mode(self, mode: MaskMode) -> Self {
        GumbelMaskSampler { mode, ..self }
    }

    /// Sample keep/drop for a `[batch x 2]` logit block.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        logits: Var,
        rng: &mut R,
    ) -> Result<SampledStep> {
        if self.temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        let (rows, cols) = tape.value(logits).dims2("sample_mask")?;
        if cols != 2 {
            return Err(Error::ShapeMismatch {
                op: "sample_mask",
                lhs: vec![rows, cols],
                rhs: vec![rows, 2],
            });
        }
        let p = tape.softmax(logits)?;
        let probs = tape.slice(p, Axis::Cols, 0, 1)?;
        let mask = match self.mode {
            MaskMode::DeterministicArgmax => {
                let relaxed = if self.temperature == 1.0 {
                    probs
                } else {
                    let s = tape.scale(logits, 1.0 / self.temperature)?;
                    let s = tape.softmax(s)?;
                    tape.slice(s, Axis::Cols, 0, 1)?
                };
                tape.straight_through(relaxed)?
            }
            MaskMode::Soft | MaskMode::HardStraightThrough => {
                let noise: Vec<f64> = (0..rows * 2).map(|_| gumbel(rng)).collect();
                let noise = tape.constant(Tensor::matrix(rows, 2, noise)?);
                let perturbed = tape.add(logits, noise)?;
                let scaled = tape.scale(perturbed, 1.0 / self.temperature)?;
                let soft = tape.softmax(scaled)?;
                let keep = tape.slice(soft, Axis::Cols, 0, 1)?;
                if self.mode == MaskMode::Soft {
                    keep
                } else {
                    tape.straight_through(keep)?
                }
            }
        };
        Ok(SampledStep { probs, mask })
    }
}
