//! Central finite-difference gradient checking against the tape's analytic
//! backward pass.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{grad_of, Tape, ValueId};
use crate::tensor::Tensor;

/// Relative error above which a coordinate is suspected to sit on a
/// non-differentiable or near-critical point (a relu kink, or a gradient
/// so close to zero that central differences only see rounding noise) and
/// is re-checked after a nudge.
const NUDGE_THRESHOLD: f64 = 1e-4;
/// Offset applied to a suspect coordinate before re-checking.
const NUDGE_DELTA: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all sampled coordinates.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    /// Coordinates that were nudged off a suspected kink, with the error
    /// measured after the nudge.
    pub nudges: Vec<(String, usize, f64)>,
    pub coords_checked: usize,
}

/// Compares analytic gradients with central differences at step `h` on at
/// most `coords_per_tensor` randomly sampled coordinates per parameter.
///
/// `build` must assemble a deterministic scalar loss from the given leaves
/// (same order as `params`); dropout must be disabled inside it.
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    build: F,
    coords_per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let eval = |ps: &[(String, Tensor)]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = ps.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).data()[0])
    };
    let analytic = |ps: &[(String, Tensor)]| -> Result<HashMap<String, Tensor>> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = ps.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids)?;
        let grads = tape.backward(loss)?;
        Ok(ids
            .iter()
            .zip(ps)
            .map(|(id, (name, t))| {
                let g = grad_of(&grads, *id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (name.clone(), g)
            })
            .collect())
    };
    grad_check_fn(params, eval, analytic, coords_per_tensor, h, seed)
}

/// Same check for computations whose forward/backward construction lives
/// elsewhere (e.g. the full fusion model): `eval_loss` returns the scalar
/// loss at the given parameter values, `analytic_grads` the full gradient
/// map at those values.
pub fn grad_check_fn<E, A>(
    params: &[(String, Tensor)],
    eval_loss: E,
    analytic_grads: A,
    coords_per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    E: Fn(&[(String, Tensor)]) -> Result<f64>,
    A: Fn(&[(String, Tensor)]) -> Result<HashMap<String, Tensor>>,
{
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        nudges: Vec::new(),
        coords_checked: 0,
    };

    for pi in 0..work.len() {
        let numel = work[pi].1.numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        coords.shuffle(&mut rng);
        coords.truncate(coords_per_tensor.min(numel));

        let mut analytic = analytic_grads(&work)?;
        for &c in &coords {
            let name = work[pi].0.clone();
            let ga = analytic[&name].data()[c];
            let mut rel = central_diff_error(&mut work, &eval_loss, pi, c, ga, h)?;
            if rel > NUDGE_THRESHOLD {
                // Likely a kink (e.g. relu at zero): move off it and retry.
                work[pi].1.data_mut()[c] += NUDGE_DELTA;
                let nudged = analytic_grads(&work)?;
                let ga = nudged[&name].data()[c];
                rel = central_diff_error(&mut work, &eval_loss, pi, c, ga, h)?;
                work[pi].1.data_mut()[c] -= NUDGE_DELTA;
                report.nudges.push((name.clone(), c, rel));
                analytic = analytic_grads(&work)?;
            }
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name;
                report.worst_coord = c;
            }
        }
    }
    Ok(report)
}

fn central_diff_error<E>(
    work: &mut [(String, Tensor)],
    eval_loss: &E,
    pi: usize,
    c: usize,
    g_analytic: f64,
    h: f64,
) -> Result<f64>
where
    E: Fn(&[(String, Tensor)]) -> Result<f64>,
{
    let orig = work[pi].1.data()[c];
    work[pi].1.data_mut()[c] = orig + h;
    let up = eval_loss(work)?;
    work[pi].1.data_mut()[c] = orig - h;
    let down = eval_loss(work)?;
    work[pi].1.data_mut()[c] = orig;
    let g_numeric = (up - down) / (2.0 * h);
    Ok((g_analytic - g_numeric).abs() / g_analytic.abs().max(g_numeric.abs()).max(1e-8))
}
