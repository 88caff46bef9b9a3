//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
    /// Coordinates whose first estimate was redone with a smaller step because
    /// the stencil straddled a kink (ReLU / max-pool switch).
    pub refined: usize,
}

const REL_FLOOR: f64 = 1e-8;
/// A coarse estimate this far off triggers step refinement.
const REFINE_THRESHOLD: f64 = 1e-4;
const MAX_REFINEMENTS: usize = 2;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks a scalar function of a single tensor at `point`.
pub fn grad_check<F>(mut function: F, point: &Tensor<f64>, epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_vars(|tape, vars| function(tape, vars[0]), std::slice::from_ref(point), epsilon)
}

/// Checks a scalar function of several tensors, every coordinate of every input.
pub fn grad_check_vars<F>(function: F, points: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(function, points, epsilon, None)
}

/// Like [`grad_check_vars`], but checks at most `max_coords` randomly chosen
/// coordinates per input (chosen by `seed`) when given.
pub fn grad_check_sampled<F>(
    mut function: F,
    points: &[Tensor<f64>],
    epsilon: f64,
    max_coords: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = function(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::Verification(format!(
                "grad_check: function value is not finite ({v})"
            )));
        }
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|&v| grads.get_or_zeros(&tape, v))
            .collect::<Vec<_>>()
    };

    let mut eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = function(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::config("grad_check: function must return a scalar"));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::Verification(format!(
                "grad_check: function value is not finite ({v})"
            )));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: 0,
        refined: 0,
    };
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (input, point) in points.iter().enumerate() {
        let n = point.numel();
        let coords: Vec<usize> = match max_coords {
            Some((k, seed)) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (input as u64).wrapping_mul(0x9E37_79B9));
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let a = analytic[input].data()[j];
            let orig = point.data()[j];
            let mut step = epsilon;
            let mut numeric;
            let mut refinements = 0;
            loop {
                work[input].data_mut()[j] = orig + step;
                let plus = eval(&work)?;
                work[input].data_mut()[j] = orig - step;
                let minus = eval(&work)?;
                work[input].data_mut()[j] = orig;
                numeric = (plus - minus) / (2.0 * step);
                if rel_error(a, numeric) <= REFINE_THRESHOLD || refinements == MAX_REFINEMENTS {
                    break;
                }
                refinements += 1;
                step /= 10.0;
            }
            if refinements > 0 {
                report.refined += 1;
            }
            report.coordinates_checked += 1;
            let err = rel_error(a, numeric);
            if err > report.max_rel_error || report.coordinates_checked == 1 {
                report.max_rel_error = err;
                report.worst_input = input;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
