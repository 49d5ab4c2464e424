//! Central-difference gradient checking against the tape's gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tape::{Tape, Var};

/// One evaluation of a scalar loss with its autodiff gradients.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub grads: Gradients,
    /// Distance of the evaluation point to the nearest non-differentiable
    /// point (ReLU zero, max tie, neighbor-order swap).
    pub kink_margin: f64,
    /// Fingerprint of the discrete choices taken; see [`Tape::branch_signature`].
    pub branch: u64,
}

impl LossEval {
    /// Runs backward from `loss` and collects parameter gradients.
    pub fn from_tape(tape: &mut Tape<'_>, loss: Var) -> Result<Self> {
        tape.backward(loss)?;
        Ok(Self { loss: tape.scalar(loss), grads: tape.param_grads(), kink_margin: tape.kink_margin(), branch: tape.branch_signature() })
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Lower bound on checked coordinates (all of them if there are fewer).
    pub min_coords: usize,
    /// Coordinates drawn from every parameter before topping up at random.
    pub per_param: usize,
    pub seed: u64,
    /// Points whose kink margin falls below this are rejected and jittered.
    /// Off by default: max ties among ReLU-zeroed values are harmless, and
    /// points where a perturbed evaluation takes a different branch are
    /// rejected regardless.
    pub kink_threshold: f64,
    pub max_resamples: usize,
    pub jitter: f64,
    /// Denominator floor of the relative error, for coordinates whose true
    /// gradient is near zero.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-6, min_coords: 200, per_param: 3, seed: 0, kink_threshold: 0.0, max_resamples: 20, jitter: 1e-2, denom_floor: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub coords_checked: usize,
    /// Tie-adjacent points rejected before a clean point was found.
    pub rejected_points: usize,
    pub loss: f64,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares autodiff gradients of `loss_fn` with central differences on a
/// sampled subset of parameter coordinates and returns the worst relative
/// error.
pub fn finite_diff_check<F>(loss_fn: F, store: &ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<LossEval>,
{
    if !(cfg.eps.is_finite() && cfg.eps > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {}", cfg.eps)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut point = store.clone();
    let mut rejected = 0;
    loop {
        if rejected > cfg.max_resamples {
            return Err(Error::Numeric(format!("no tie-free point found after {} resamples", cfg.max_resamples)));
        }
        if rejected > 0 {
            for (_, t) in point.iter_mut() {
                for v in &mut t.data {
                    *v += cfg.jitter * rng.random_range(-1.0..1.0);
                }
            }
        }
        let base = loss_fn(&point)?;
        if !base.loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {}", base.loss)));
        }
        if base.kink_margin < cfg.kink_threshold {
            rejected += 1;
            continue;
        }
        let coords = pick_coords(&point, cfg, &mut rng);
        match check_point(&loss_fn, &mut point, &base, &coords, cfg)? {
            Some(mut report) => {
                report.rejected_points = rejected;
                return Ok(report);
            }
            None => rejected += 1,
        }
    }
}

/// Central differences at every coordinate; `None` if a perturbation
/// crosses onto another branch.
fn check_point<F>(
    loss_fn: &F,
    point: &mut ParamStore,
    base: &LossEval,
    coords: &[(String, usize)],
    cfg: &GradCheckConfig,
) -> Result<Option<GradCheckReport>>
where
    F: Fn(&ParamStore) -> Result<LossEval>,
{
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: coords.len(), rejected_points: 0, loss: base.loss };
    for (name, index) in coords {
        let index = *index;
        let orig = point.get(name).expect("picked from store").data[index];
        let mut eval_at = |v: f64| -> Result<LossEval> {
            point.get_mut(name).expect("picked from store").data[index] = v;
            let e = loss_fn(point)?;
            if !e.loss.is_finite() {
                return Err(Error::Numeric(format!("loss is {} after perturbing {name}[{index}]", e.loss)));
            }
            Ok(e)
        };
        let plus = eval_at(orig + cfg.eps);
        let minus = eval_at(orig - cfg.eps);
        point.get_mut(name).expect("picked from store").data[index] = orig;
        let (plus, minus) = (plus?, minus?);
        if plus.branch != base.branch || minus.branch != base.branch {
            return Ok(None);
        }

        let numeric = (plus.loss - minus.loss) / (2.0 * cfg.eps);
        let analytic = base.grads.get(name).map_or(0.0, |g| g[index]);
        let rel = relative_error(analytic, numeric, cfg.denom_floor);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(CoordError { param: name.clone(), index, analytic, numeric, rel_error: rel });
        }
    }
    Ok(Some(report))
}

fn pick_coords(store: &ParamStore, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    let all: Vec<(String, usize)> = store.iter().map(|(n, t)| (n.to_string(), t.numel())).collect();
    let total: usize = all.iter().map(|(_, n)| n).sum();
    if total <= cfg.min_coords {
        return all.iter().flat_map(|(n, len)| (0..*len).map(move |i| (n.clone(), i))).collect();
    }
    let mut chosen = std::collections::BTreeSet::new();
    for (name, len) in &all {
        for i in sample(rng, *len, cfg.per_param.min(*len)) {
            chosen.insert((name.clone(), i));
        }
    }
    while chosen.len() < cfg.min_coords {
        let mut flat = rng.random_range(0..total);
        for (name, len) in &all {
            if flat < *len {
                chosen.insert((name.clone(), flat));
                break;
            }
            flat -= len;
        }
    }
    chosen.into_iter().collect()
}
