//! Central finite-difference gradient checking (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Step of the central difference.
    pub h: f64,
    /// Added to the denominator of the relative error, so the roundoff of a
    /// central difference (about 1e-10 for O(1) losses) does not count as
    /// error where the true gradient is zero.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all of them if smaller).
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            eps: 1e-5,
            samples_per_param: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name, flat index, analytic, numeric at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(f(x + h) - f(x - h)) / 2h` on sampled coordinates of every trainable
/// parameter. Returns the largest `|a - n| / (|a| + |n| + eps)`.
pub fn finite_diff_check<F>(
    store: &ParamStore<f64>,
    loss_fn: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(s);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let n = store.tensor(id).numel();
        let coords: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples_per_param).into_vec()
        };
        for c in coords {
            let orig = store.tensor(id).data()[c];
            work.tensor_mut(id).data_mut()[c] = orig + cfg.h;
            let plus = eval(&work)?;
            work.tensor_mut(id).data_mut()[c] = orig - cfg.h;
            let minus = eval(&work)?;
            work.tensor_mut(id).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.h);
            let analytic = grads.param(id).map_or(0.0, |g| g[c]);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + cfg.eps);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), c, analytic, numeric));
                }
            }
        }
    }
    Ok(report)
}
