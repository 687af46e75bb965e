//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step and error floor for [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per input (all of them if the input is smaller).
    pub coords_per_input: usize,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as the
    /// denominator so that exact zeros do not divide by zero.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            coords_per_input: 64,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: Vec<Coordinate>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.coordinates.len()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.coordinates
            .iter()
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Coordinate> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.coordinates.extend(other.coordinates);
        self
    }
}

fn evaluate(f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.item(out)
}

/// Compare backward-pass gradients of the scalar `f(inputs)` with central
/// differences on a random subset of input coordinates. `f` must be a pure
/// function of its inputs (re-seed any randomness inside it).
pub fn check_gradients<R: Rng + ?Sized>(
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::InvalidInput(
            "gradient check needs a scalar output".into(),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut coordinates = Vec::new();
    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let picks: Vec<usize> = if n <= cfg.coords_per_input {
            (0..n).collect()
        } else {
            let mut p = sample(rng, n, cfg.coords_per_input).into_vec();
            p.sort_unstable();
            p
        };
        for index in picks {
            let orig = t.data()[index];
            probe[k].data_mut()[index] = orig + cfg.step;
            let up = evaluate(&f, &probe)?;
            probe[k].data_mut()[index] = orig - cfg.step;
            let down = evaluate(&f, &probe)?;
            probe[k].data_mut()[index] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[k][index];
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            coordinates.push(Coordinate {
                input: k,
                index,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    Ok(GradCheckReport { coordinates })
}
