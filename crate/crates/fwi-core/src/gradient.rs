//! Misfit gradient with respect to the speed map via the adjoint-state
//! method, three simulations per shot and no space-time storage.
//!
//! Per shot:
//!
//! 1. **Forward** — march the source wavefield, recording receiver traces
//!    and the boundary tape.
//! 2. **Misfit** — compare recorded vs observed traces; this yields the
//!    scalar misfit and one adjoint-source trace per receiver.
//! 3. **Lockstep** — replay the forward field backward from its final
//!    state while marching the adjoint field forward from zero, pairing
//!    level `N-1-m` of the direct field with adjoint level `m` and
//!    accumulating their zero-lag correlation against the stencil response
//!    cell by cell.
//!
//! The update `u_next = kappa * S(u) + 2u - u_prev + s` (with `S` the cross
//! stencil and `kappa = (theta * dt / h)^2`) is not symmetric when `kappa`
//! varies: its transpose applies `S(kappa * .)` instead of `kappa * S(.)`.
//! Substituting `mu = kappa * lambda` turns the transposed recursion for the
//! sensitivity field `lambda` back into the *forward* recursion for `mu`
//! with the adjoint sources scaled by `kappa` at their injection cells. The
//! gradient therefore runs the ordinary kernel on scaled sources and divides
//! by `kappa` at the end, which folds the whole prefactor into
//!
//! ```text
//! dJ/dtheta(c) = 2 theta(c) (dt/h)^2 / kappa(c) * gamma~(c) = 2 gamma~(c) / theta(c)
//! ```
//!
//! where `gamma~(c) = sum_k mu_{k+1}(c) * S(u_k)(c)`. On a sealed grid this
//! is the exact derivative of the discrete recursion, not a discretization
//! of a continuous formula; a finite-difference probe agrees to truncation
//! error. With an absorber, damping makes the replay (and the transpose)
//! exact only away from the band, so the gradient is masked to cells whose
//! whole stencil support lies in the physical region.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::absorber::edge_distance;
use crate::error::{Error, Result};
use crate::grid::{Cell, Field2D, SpeedModel};
use crate::kernel::Stepper;
use crate::misfit::{gather_misfit, AdjointSourceGather, MisfitKind, W2Config};
use crate::sim::{
    simulate_forward, MarchingSim, ReverseReplay, ShotGather, SimConfig, SourceInjection,
};
use crate::signal::Trace;

/// One emission: where the pulse enters, what it looks like, who listens,
/// and what they actually heard.
#[derive(Debug, Clone)]
pub struct ShotDefinition {
    pub emitter: Cell,
    pub source: Trace,
    pub receivers: Vec<Cell>,
    pub observed: ShotGather,
}

impl ShotDefinition {
    /// Checks the observed gather against the configuration's geometry and
    /// time axis. Cell positions are validated by the simulations themselves.
    pub fn validate(&self, cfg: &SimConfig) -> Result<()> {
        if self.receivers.is_empty() {
            return Err(Error::InvalidArgument(
                "shot has no receivers".into(),
            ));
        }
        if self.observed.n_receivers() != self.receivers.len() {
            return Err(Error::ShapeMismatch(format!(
                "observed gather has {} traces for {} receivers",
                self.observed.n_receivers(),
                self.receivers.len()
            )));
        }
        if self.observed.n_steps() != cfg.time.n_steps {
            return Err(Error::ShapeMismatch(format!(
                "observed gather has {} samples, time axis has {} steps",
                self.observed.n_steps(),
                cfg.time.n_steps
            )));
        }
        let dt = cfg.time.dt;
        if (self.observed.dt - dt).abs() > 1e-9 * dt {
            return Err(Error::ShapeMismatch(format!(
                "observed gather dt {} does not match the time axis dt {}",
                self.observed.dt, dt
            )));
        }
        Ok(())
    }

    pub(crate) fn injection(&self) -> SourceInjection {
        SourceInjection::single(self.emitter, self.source.clone())
    }
}

/// Wall-clock seconds spent in each pass.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PassTimings {
    pub forward_s: f64,
    pub misfit_s: f64,
    pub lockstep_s: f64,
}

impl PassTimings {
    fn accumulate(&mut self, other: &PassTimings) {
        self.forward_s += other.forward_s;
        self.misfit_s += other.misfit_s;
        self.lockstep_s += other.lockstep_s;
    }

    pub fn total_s(&self) -> f64 {
        self.forward_s + self.misfit_s + self.lockstep_s
    }
}

/// Total misfit and its derivative with respect to every speed cell.
#[derive(Debug, Clone)]
pub struct GradientResult {
    pub misfit: f64,
    pub gradient: Field2D,
    /// Misfit contribution of each shot, in input order.
    pub shot_misfits: Vec<f64>,
    pub timings: PassTimings,
}

/// Builds the time-reversed injection for the adjoint march: receiver `r`
/// plays back its adjoint-source trace last-sample-first. With
/// `kappa_weighted`, each trace is additionally scaled by `kappa` at its
/// cell — the substitution that makes the plain kernel compute the exact
/// transpose of the heterogeneous update (see the module docs).
fn reversed_injection(
    cfg: &SimConfig,
    theta: &SpeedModel,
    receivers: &[Cell],
    adjoint: &AdjointSourceGather,
    kappa_weighted: bool,
) -> Result<SourceInjection> {
    if adjoint.n_receivers() != receivers.len() {
        return Err(Error::ShapeMismatch(format!(
            "adjoint gather has {} traces for {} receivers",
            adjoint.n_receivers(),
            receivers.len()
        )));
    }
    let n = cfg.time.n_steps;
    let dt = cfg.time.dt;
    if (adjoint.dt - dt).abs() > 1e-9 * dt {
        return Err(Error::ShapeMismatch(format!(
            "adjoint gather dt {} does not match the time axis dt {}",
            adjoint.dt, dt
        )));
    }
    let r = dt / cfg.grid.h;
    let mut entries = Vec::with_capacity(receivers.len());
    for (cell, trace) in receivers.iter().zip(&adjoint.traces) {
        if trace.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "adjoint trace has {} samples, time axis has {} steps",
                trace.len(),
                n
            )));
        }
        let scale = if kappa_weighted {
            let c = theta.field().at(cell.i, cell.j);
            (c * r) * (c * r)
        } else {
            1.0
        };
        let reversed: Vec<f64> = trace.iter().rev().map(|&v| scale * v).collect();
        entries.push((*cell, Trace::new(reversed, dt, 0.0)?));
    }
    Ok(SourceInjection::new(entries))
}

/// Back-propagates adjoint sources as a wave field: the same step kernel,
/// fed the time-reversed traces at the receiver cells, starting from rest.
/// Level `m` of the returned march is the sensitivity field at forward time
/// `N - m` (so the first advance lands on the final observation time).
pub fn adjoint_simulate(
    cfg: &SimConfig,
    theta: &SpeedModel,
    receivers: &[Cell],
    adjoint: &AdjointSourceGather,
) -> Result<MarchingSim> {
    let injection = reversed_injection(cfg, theta, receivers, adjoint, false)?;
    MarchingSim::new(cfg, theta, &injection, true)
}

/// Cells where the accumulated correlation is trustworthy: everywhere on a
/// sealed grid (replay and transpose are exact); outside the absorber band
/// plus one stencil-radius ring otherwise, because stencils reaching into
/// the band read field values the backward replay does not reconstruct.
fn support_mask(cfg: &SimConfig) -> Vec<bool> {
    let keep_from = if cfg.absorber.width == 0 {
        0
    } else {
        cfg.absorber.width + cfg.stencil.radius()
    };
    let mut mask = Vec::with_capacity(cfg.grid.n_cells());
    for j in 0..cfg.grid.ny {
        for i in 0..cfg.grid.nx {
            mask.push(edge_distance(&cfg.grid, i, j) >= keep_from);
        }
    }
    mask
}

/// `gamma[c] += mu[c] * S(u)[c]` over supported cells, one row per task so
/// the result does not depend on the worker count.
fn accumulate_correlation(
    gamma: &mut [f64],
    mu: &[f64],
    u: &[f64],
    stepper: &Stepper,
    nx: usize,
    support: &[bool],
) {
    gamma
        .par_chunks_mut(nx)
        .enumerate()
        .for_each(|(j, row)| {
            let base = j * nx;
            for (i, slot) in row.iter_mut().enumerate() {
                if support[base + i] {
                    let m = mu[base + i];
                    if m != 0.0 {
                        *slot += m * stepper.raw_stencil_sum(u, i, j);
                    }
                }
            }
        });
}

/// Gradient of the chosen misfit for a single emission, by the three-pass
/// scheme described in the module docs. At most four full-size field
/// buffers exist at any moment: two in the backward replay and two in the
/// adjoint march (the forward pass holds two, retired into the tape).
pub fn shot_gradient(
    cfg: &SimConfig,
    theta: &SpeedModel,
    shot: &ShotDefinition,
    kind: MisfitKind,
    w2cfg: &W2Config,
) -> Result<GradientResult> {
    shot.validate(cfg)?;
    let injection = shot.injection();

    let t_forward = Instant::now();
    let (recorded, tape) = simulate_forward(cfg, theta, &injection, &shot.receivers, true)?;
    let tape = tape.expect("forward pass was asked to record its tape");
    let forward_s = t_forward.elapsed().as_secs_f64();

    let t_misfit = Instant::now();
    let (misfit, adjoint_sources) = gather_misfit(&recorded, &shot.observed, kind, w2cfg)?;
    let misfit_s = t_misfit.elapsed().as_secs_f64();

    let t_lockstep = Instant::now();
    let scaled = reversed_injection(cfg, theta, &shot.receivers, &adjoint_sources, true)?;
    let mut adjoint = MarchingSim::new(cfg, theta, &scaled, true)?;
    let mut replay = ReverseReplay::new(cfg, theta, tape, &injection)?;
    let support = support_mask(cfg);
    let mut gamma = vec![0.0; cfg.grid.n_cells()];
    loop {
        // Adjoint level m pairs with direct level N-1-m, which is exactly
        // where the replay's lower field sits after m-1 backward steps.
        adjoint.advance()?;
        accumulate_correlation(
            &mut gamma,
            adjoint.current(),
            replay.bottom(),
            replay.stepper(),
            cfg.grid.nx,
            &support,
        );
        if !replay.step_back()? {
            break;
        }
    }
    let theta_values = theta.field().values();
    let values: Vec<f64> = gamma
        .iter()
        .zip(theta_values)
        .zip(&support)
        .map(|((g, th), keep)| if *keep { 2.0 * g / th } else { 0.0 })
        .collect();
    let gradient = Field2D::from_values(cfg.grid, values)?;
    let lockstep_s = t_lockstep.elapsed().as_secs_f64();

    if !gradient.all_finite() {
        return Err(Error::Instability(
            "gradient accumulation produced a non-finite value".into(),
        ));
    }
    Ok(GradientResult {
        misfit,
        gradient,
        shot_misfits: vec![misfit],
        timings: PassTimings {
            forward_s,
            misfit_s,
            lockstep_s,
        },
    })
}

/// Sum of [`shot_gradient`] over all shots. Shots run in parallel with
/// private buffers; the reduction walks the results in input order, so the
/// total is bitwise independent of the worker count.
pub fn total_gradient(
    cfg: &SimConfig,
    theta: &SpeedModel,
    shots: &[ShotDefinition],
    kind: MisfitKind,
    w2cfg: &W2Config,
) -> Result<GradientResult> {
    if shots.is_empty() {
        return Err(Error::InvalidArgument(
            "gradient needs at least one shot".into(),
        ));
    }
    let per_shot: Result<Vec<GradientResult>> = shots
        .par_iter()
        .map(|shot| shot_gradient(cfg, theta, shot, kind, w2cfg))
        .collect();
    let mut per_shot = per_shot?.into_iter();
    let mut total = per_shot.next().expect("at least one shot");
    for result in per_shot {
        total.misfit += result.misfit;
        for (acc, v) in total
            .gradient
            .values_mut()
            .iter_mut()
            .zip(result.gradient.values())
        {
            *acc += v;
        }
        total.shot_misfits.extend(result.shot_misfits);
        total.timings.accumulate(&result.timings);
    }
    Ok(total)
}
