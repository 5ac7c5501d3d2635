//! Bound-constrained quasi-Newton minimization and the inversion driver
//! built on top of it.
//!
//! The optimizer is a projected-gradient L-BFGS: search directions come from
//! the classic two-loop recursion over a short window of curvature pairs,
//! coordinates pinned at a bound with an outward-pointing gradient are frozen
//! out of the direction, and every trial point is clamped back into the box
//! before it is evaluated.  A backtracking line search enforces the Armijo
//! sufficient-decrease condition, so the sequence of accepted objective
//! values is strictly non-increasing; trials that pass it while failing the
//! weak Wolfe curvature test are lengthened instead of accepted short.
//! Curvature pairs enter the memory only when `s·y` is safely positive,
//! which keeps the inverse-Hessian estimate positive definite.
//!
//! [`invert`] wraps the shot-gradient machinery into an [`Objective`] and
//! runs the optimizer over a speed map, logging misfit, projected-gradient
//! norm, optional model error against a known ground truth, and cumulative
//! wall-clock time per accepted iterate.

use std::collections::VecDeque;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::{total_gradient, ShotDefinition};
use crate::grid::{model_mse, Field2D, SpeedModel};
use crate::misfit::{gather_misfit, MisfitKind, W2Config};
use crate::sim::{simulate_forward, SimConfig};

/// Hard cap on step halvings before the line search gives up.
const MAX_BACKTRACKS: usize = 30;

/// Consecutive near-flat iterations required before stopping on stagnation.
const STALL_LIMIT: usize = 3;

/// Knobs for [`lbfgsb_minimize`].
///
/// The bounds are uniform per coordinate; the defaults are tuned for speed
/// maps in m/s but the optimizer itself is unit-agnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Maximum number of accepted iterations.
    pub max_iterations: usize,
    /// Number of curvature pairs retained for the two-loop recursion.
    pub memory: usize,
    /// Lower bound applied to every coordinate.
    pub lower: f64,
    /// Upper bound applied to every coordinate.
    pub upper: f64,
    /// Armijo sufficient-decrease constant (`c1`).
    pub sufficient_decrease: f64,
    /// Wolfe curvature constant (`c2`): a first trial whose directional
    /// derivative has not recovered to this fraction of its starting value
    /// is doubled in length while sufficient decrease keeps holding.
    pub curvature: f64,
    /// Stop once the projected-gradient infinity norm falls below
    /// `grad_tolerance * max(1, |J|)`.
    pub grad_tolerance: f64,
    /// Stop once the relative misfit decrease stays below this for
    /// three consecutive accepted iterations.
    pub decrease_tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 200,
            memory: 10,
            lower: 1000.0,
            upper: 7000.0,
            sufficient_decrease: 1e-4,
            curvature: 0.9,
            grad_tolerance: 1e-12,
            decrease_tolerance: 1e-9,
        }
    }
}

impl OptimizerConfig {
    /// Checks the internal consistency of the configuration.
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.memory == 0 {
            return Err(Error::Config("memory must be at least 1".into()));
        }
        if !(self.lower.is_finite() && self.upper.is_finite()) || self.lower >= self.upper {
            return Err(Error::Config(format!(
                "bounds must satisfy lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        let c1 = self.sufficient_decrease;
        let c2 = self.curvature;
        if !(c1 > 0.0 && c1 < c2 && c2 < 1.0) {
            return Err(Error::Config(format!(
                "line-search constants must satisfy 0 < sufficient_decrease < curvature < 1, \
                 got c1={c1}, c2={c2}"
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.grad_tolerance) || !positive(self.decrease_tolerance) {
            return Err(Error::Config(
                "stopping tolerances must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One accepted iterate of the minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    /// Accepted-iterate index; the starting point is logged as iteration 0.
    pub iteration: usize,
    /// Objective value at the iterate.
    pub misfit: f64,
    /// Infinity norm of the projected gradient (the box-constrained
    /// stationarity residual; equals the plain gradient norm in the
    /// interior).
    pub grad_inf_norm: f64,
    /// Mean squared error against a known ground-truth model, when one was
    /// supplied.  Purely diagnostic; never used by the optimizer.
    pub model_mse: Option<f64>,
    /// Wall-clock seconds since the start of the minimization.
    pub seconds: f64,
}

/// A differentiable objective over a flat coordinate vector.
///
/// `value` exists so that line-search probes can skip the gradient work;
/// the default implementation simply discards the gradient.
pub trait Objective {
    /// Objective value and gradient at `x`.
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Objective value alone; override when it is cheaper than the pair.
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(x)?.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clamp_into(x: &mut [f64], lower: f64, upper: f64) {
    for v in x.iter_mut() {
        *v = v.clamp(lower, upper);
    }
}

/// Infinity norm of `x - clamp(x - g)`: zero exactly at a box-constrained
/// stationary point, and equal to `|g|_inf` for small gradients at interior
/// points.
fn projected_gradient_norm(x: &[f64], g: &[f64], lower: f64, upper: f64) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| (xi - (xi - gi).clamp(lower, upper)).abs())
        .fold(0.0, f64::max)
}

/// Coordinates sitting on a bound with the gradient pushing outward; these
/// cannot move and are dropped from the search direction.
fn frozen_mask(x: &[f64], g: &[f64], lower: f64, upper: f64) -> Vec<bool> {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| (xi <= lower && gi > 0.0) || (xi >= upper && gi < 0.0))
        .collect()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `H g` where `H` is the L-BFGS inverse-Hessian
/// estimate, scaled by `gamma = s·y / y·y` of the freshest pair.
fn two_loop(pairs: &VecDeque<Pair>, g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for pair in pairs.iter().rev() {
        let a = pair.rho * dot(&pair.s, &q);
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = pairs.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for (pair, &a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = pair.rho * dot(&pair.y, &q);
        for (qi, si) in q.iter_mut().zip(&pair.s) {
            *qi += (a - b) * si;
        }
    }
    q
}

fn ensure_finite_scalar(j: f64) -> Result<f64> {
    if j.is_finite() {
        Ok(j)
    } else {
        Err(Error::Optimizer(format!(
            "objective returned a non-finite value ({j})"
        )))
    }
}

fn ensure_finite_pair(pair: (f64, Vec<f64>)) -> Result<(f64, Vec<f64>)> {
    let (j, g) = pair;
    if !j.is_finite() {
        return Err(Error::Optimizer(format!(
            "objective returned a non-finite value ({j})"
        )));
    }
    if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Optimizer(format!(
            "gradient has a non-finite entry at index {bad}"
        )));
    }
    Ok((j, g))
}

/// Maximum step doublings in the lengthening phase of the line search.
const MAX_EXTENSIONS: usize = 4;

/// Weak-Wolfe lengthening: when the first trial already satisfies the
/// sufficient-decrease test but the directional derivative has barely moved
/// (the curvature test fails), the step is too short — double it while the
/// sufficient-decrease test keeps holding.  Returns the best accepted
/// candidate with its gradient.
#[allow(clippy::too_many_arguments)]
fn extend_step(
    obj: &dyn Objective,
    cfg: &OptimizerConfig,
    x: &[f64],
    j: f64,
    g: &[f64],
    d: &[f64],
    alpha: f64,
    cand: Vec<f64>,
    j_cand: f64,
    g_cand: Vec<f64>,
) -> Result<(Vec<f64>, f64, Option<Vec<f64>>)> {
    let mut best = (cand, j_cand, g_cand);
    let mut alpha = alpha;
    for _ in 0..MAX_EXTENSIONS {
        let dx: Vec<f64> = best.0.iter().zip(x).map(|(c, xi)| c - xi).collect();
        if dot(&best.2, &dx) >= cfg.curvature * dot(g, &dx) {
            break; // enough curvature progress along the step
        }
        alpha *= 2.0;
        let mut longer: Vec<f64> =
            x.iter().zip(d).map(|(&xi, &di)| xi + alpha * di).collect();
        clamp_into(&mut longer, cfg.lower, cfg.upper);
        if longer == best.0 {
            break; // the box stops any further lengthening
        }
        let dx: Vec<f64> = longer.iter().zip(x).map(|(c, xi)| c - xi).collect();
        let gdx = dot(g, &dx);
        if gdx >= 0.0 {
            break;
        }
        let (jl, gl) = ensure_finite_pair(obj.value_and_grad(&longer)?)?;
        if jl <= j + cfg.sufficient_decrease * gdx {
            best = (longer, jl, gl);
        } else {
            break;
        }
    }
    Ok((best.0, best.1, Some(best.2)))
}

/// Minimizes `obj` over the box `[cfg.lower, cfg.upper]^n` starting from
/// `x0`, which must already be feasible.
///
/// Returns the best iterate found together with one [`IterationLog`] per
/// accepted iterate (the starting point is iteration 0).  The run ends at
/// the iteration cap, when the projected-gradient norm drops below
/// `grad_tolerance * max(1, |J|)`, when the relative misfit decrease stays
/// below `decrease_tolerance` for three consecutive iterations, or — without
/// an error — when the line search cannot find an acceptable step.
/// A non-finite objective value or gradient aborts with
/// [`Error::Optimizer`].
pub fn lbfgsb_minimize(
    obj: &dyn Objective,
    x0: &[f64],
    cfg: &OptimizerConfig,
) -> Result<(Vec<f64>, Vec<IterationLog>)> {
    lbfgsb_minimize_with(obj, x0, cfg, |_, _| {})
}

/// [`lbfgsb_minimize`] with an observer invoked on every accepted iterate,
/// after the log entry is filled in but before it is stored.  The observer
/// may enrich the entry (e.g. with a model-error diagnostic) or snapshot the
/// iterate.
pub fn lbfgsb_minimize_with(
    obj: &dyn Objective,
    x0: &[f64],
    cfg: &OptimizerConfig,
    mut observer: impl FnMut(&[f64], &mut IterationLog),
) -> Result<(Vec<f64>, Vec<IterationLog>)> {
    cfg.validate()?;
    if x0.is_empty() {
        return Err(Error::InvalidArgument("empty starting point".into()));
    }
    if let Some(bad) = x0
        .iter()
        .position(|&v| !v.is_finite() || v < cfg.lower || v > cfg.upper)
    {
        return Err(Error::InvalidArgument(format!(
            "starting point leaves the bounds at index {bad}: {} outside [{}, {}]",
            x0[bad], cfg.lower, cfg.upper
        )));
    }

    let start = Instant::now();
    let mut x = x0.to_vec();
    let (mut j, mut g) = ensure_finite_pair(obj.value_and_grad(&x)?)?;
    let mut logs: Vec<IterationLog> = Vec::new();

    let mut record =
        |iter: usize, j: f64, pg: f64, x: &[f64], logs: &mut Vec<IterationLog>| {
            let mut entry = IterationLog {
                iteration: iter,
                misfit: j,
                grad_inf_norm: pg,
                model_mse: None,
                seconds: start.elapsed().as_secs_f64(),
            };
            observer(x, &mut entry);
            logs.push(entry);
        };

    let pg0 = projected_gradient_norm(&x, &g, cfg.lower, cfg.upper);
    record(0, j, pg0, &x, &mut logs);
    if pg0 < cfg.grad_tolerance * j.abs().max(1.0) {
        return Ok((x, logs));
    }

    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut stall = 0usize;
    let mut prev_frozen: Option<Vec<bool>> = None;

    for iter in 1..=cfg.max_iterations {
        let frozen = frozen_mask(&x, &g, cfg.lower, cfg.upper);
        // Pairs gathered under a different active set mix in curvature from
        // coordinates that are now pinned (or vice versa); restart the
        // memory whenever the set changes.
        if let Some(prev) = prev_frozen.as_deref() {
            if prev != frozen.as_slice() {
                pairs.clear();
            }
        }
        prev_frozen = Some(frozen.clone());
        let mut reduced = g.clone();
        for (v, &f) in reduced.iter_mut().zip(&frozen) {
            if f {
                *v = 0.0;
            }
        }

        // Quasi-Newton direction first; plain steepest descent as a fallback
        // when the model direction cannot produce an acceptable step.
        let mut accepted: Option<(Vec<f64>, f64, Option<Vec<f64>>)> = None;
        'attempts: for attempt in 0..2 {
            let mut d = if attempt == 0 && !pairs.is_empty() {
                let mut h = two_loop(&pairs, &reduced);
                for v in h.iter_mut() {
                    *v = -*v;
                }
                h
            } else if attempt == 0 {
                reduced.iter().map(|v| -v).collect()
            } else {
                if pairs.is_empty() {
                    break; // the first attempt was already steepest descent
                }
                reduced.iter().map(|v| -v).collect()
            };
            for (v, &f) in d.iter_mut().zip(&frozen) {
                if f {
                    *v = 0.0;
                }
            }
            let quasi_newton = attempt == 0 && !pairs.is_empty();

            // A bare negative gradient carries no length scale (for wave
            // problems it can be many orders smaller than the model), so
            // aim its first trial at a percent of the box width and let the
            // backtracking shrink from there.  Quasi-Newton directions are
            // already scaled; start those at the unit step.
            let mut alpha = if quasi_newton {
                1.0
            } else {
                let d_inf = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if d_inf == 0.0 {
                    continue;
                }
                0.01 * (cfg.upper - cfg.lower) / d_inf
            };
            for backtrack in 0..=MAX_BACKTRACKS {
                let mut cand: Vec<f64> =
                    x.iter().zip(&d).map(|(&xi, &di)| xi + alpha * di).collect();
                clamp_into(&mut cand, cfg.lower, cfg.upper);
                let dx: Vec<f64> = cand.iter().zip(&x).map(|(c, xi)| c - xi).collect();
                let gdx = dot(&g, &dx);
                if gdx < 0.0 {
                    let threshold = j + cfg.sufficient_decrease * gdx;
                    if backtrack == 0 {
                        // First probe is usually the accepted one, so pay for
                        // the gradient up front and reuse it.
                        let (jc, gc) = ensure_finite_pair(obj.value_and_grad(&cand)?)?;
                        if jc <= threshold {
                            accepted = Some(extend_step(
                                obj, cfg, &x, j, &g, &d, alpha, cand, jc, gc,
                            )?);
                            break 'attempts;
                        }
                    } else {
                        let jc = ensure_finite_scalar(obj.value(&cand)?)?;
                        if jc <= threshold {
                            accepted = Some((cand, jc, None));
                            break 'attempts;
                        }
                    }
                } else if dx.iter().all(|&v| v == 0.0) {
                    break; // the whole direction is blocked by the box
                }
                alpha *= 0.5;
            }
        }

        let Some((x_new, j_new, g_cached)) = accepted else {
            log::info!(
                "line search found no acceptable step at iteration {iter}; \
                 returning the best iterate so far"
            );
            break;
        };
        let g_new = match g_cached {
            Some(g) => g,
            None => ensure_finite_pair(obj.value_and_grad(&x_new)?)?.1,
        };

        // Keep the pair only when its curvature is safely positive, so the
        // two-loop estimate stays positive definite.
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let scale = dot(&s, &s).sqrt() * dot(&y, &y).sqrt();
        if sy > 1e-10 * scale {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            let rho = 1.0 / sy;
            pairs.push_back(Pair { s, y, rho });
        }

        let rel_drop = (j - j_new) / j.abs().max(f64::MIN_POSITIVE);
        stall = if rel_drop < cfg.decrease_tolerance {
            stall + 1
        } else {
            0
        };

        x = x_new;
        j = j_new;
        g = g_new;
        let pg = projected_gradient_norm(&x, &g, cfg.lower, cfg.upper);
        record(iter, j, pg, &x, &mut logs);

        if pg < cfg.grad_tolerance * j.abs().max(1.0) || stall >= STALL_LIMIT {
            break;
        }
    }

    Ok((x, logs))
}

/// Everything [`invert`] needs besides the starting model: the simulation
/// setup, the shot list with observed data, the misfit choice, and an
/// optional ground truth for diagnostics.
pub struct InversionSetup<'a> {
    pub cfg: &'a SimConfig,
    pub shots: &'a [ShotDefinition],
    pub kind: MisfitKind,
    pub w2: W2Config,
    /// Ground-truth speed map; when present, every log entry carries the
    /// mean squared model error against it.
    pub truth: Option<&'a Field2D>,
}

struct FwiObjective<'a> {
    setup: &'a InversionSetup<'a>,
}

impl<'a> FwiObjective<'a> {
    fn model(&self, x: &[f64]) -> Result<SpeedModel> {
        SpeedModel::new(Field2D::from_values(self.setup.cfg.grid, x.to_vec())?)
    }
}

impl<'a> Objective for FwiObjective<'a> {
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let theta = self.model(x)?;
        let result = total_gradient(
            self.setup.cfg,
            &theta,
            self.setup.shots,
            self.setup.kind,
            &self.setup.w2,
        )?;
        Ok((result.misfit, result.gradient.into_values()))
    }

    /// Misfit only: one forward pass per shot, no tape and no adjoint.
    fn value(&self, x: &[f64]) -> Result<f64> {
        let theta = self.model(x)?;
        let setup = self.setup;
        let per_shot: Vec<f64> = setup
            .shots
            .par_iter()
            .map(|shot| {
                shot.validate(setup.cfg)?;
                let (gather, _) = simulate_forward(
                    setup.cfg,
                    &theta,
                    &shot.injection(),
                    &shot.receivers,
                    false,
                )?;
                Ok(gather_misfit(&gather, &shot.observed, setup.kind, &setup.w2)?.0)
            })
            .collect::<Result<_>>()?;
        // Fixed-order reduction keeps the sum identical for any worker count.
        Ok(per_shot.iter().sum())
    }
}

/// Runs the full inversion: minimizes the chosen misfit over the speed map,
/// starting from `initial`, subject to the optimizer's box bounds.
///
/// Returns the final model and the per-iteration history.  Matching observed
/// data (zero residual at the start) terminates immediately at iteration 0
/// with the model unchanged.
pub fn invert(
    setup: &InversionSetup,
    initial: &SpeedModel,
    opt: &OptimizerConfig,
) -> Result<(SpeedModel, Vec<IterationLog>)> {
    invert_with(setup, initial, opt, |_, _| {})
}

/// [`invert`] with a callback invoked on every accepted iterate — useful for
/// writing model snapshots.  The callback receives the iteration index and
/// the current speed map.
pub fn invert_with(
    setup: &InversionSetup,
    initial: &SpeedModel,
    opt: &OptimizerConfig,
    mut on_iterate: impl FnMut(usize, &Field2D),
) -> Result<(SpeedModel, Vec<IterationLog>)> {
    if opt.lower <= 0.0 {
        return Err(Error::Config(
            "speed bounds must be strictly positive".into(),
        ));
    }
    let grid = setup.cfg.grid;
    if initial.field().grid() != grid {
        return Err(Error::InvalidArgument(
            "initial model grid does not match the simulation grid".into(),
        ));
    }
    if let Some(truth) = setup.truth {
        if truth.grid() != grid {
            return Err(Error::InvalidArgument(
                "ground-truth grid does not match the simulation grid".into(),
            ));
        }
    }
    if setup.shots.is_empty() {
        return Err(Error::InvalidArgument(
            "inversion needs at least one shot".into(),
        ));
    }

    let objective = FwiObjective { setup };
    let (values, logs) = lbfgsb_minimize_with(
        &objective,
        initial.field().values(),
        opt,
        |x, entry| {
            let field = Field2D::from_values(grid, x.to_vec())
                .expect("iterate has the grid's cell count");
            if let Some(truth) = setup.truth {
                entry.model_mse =
                    Some(model_mse(&field, truth).expect("grids already checked"));
            }
            on_iterate(entry.iteration, &field);
        },
    )?;
    let model = SpeedModel::new(Field2D::from_values(grid, values)?)?;
    Ok((model, logs))
}
