//! Misfit functionals between simulated and observed gathers, with the
//! adjoint source of each: classical least squares on residual traces, and
//! the squared 1-D Wasserstein distance on positivity-transformed traces,
//! which trades amplitude sensitivity for a convex response to arrival-time
//! shifts (no cycle skipping).
//!
//! Every trace of `n` samples is mapped onto the unit interval by
//! `x_k = k / (n-1)`, so Wasserstein values are dimensionless and O(1)
//! regardless of the physical sampling rate. The transport problem is 1-D,
//! where the optimal plan is the monotone rearrangement and the distance
//! has a closed form through the CDFs:
//!
//! ```text
//! W2²(f, g) = ∫₀¹ (x − G⁻¹(F(x)))² f(x) dx
//! ```
//!
//! discretized with trapezoid quadrature throughout. A brute-force
//! north-west-corner transport solver over discrete atoms serves as an
//! independent verification oracle.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sim::ShotGather;

/// Which misfit functional drives an inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MisfitKind {
    L2,
    W2,
}

/// How the positivity offset `c` is chosen when transforming a trace pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetRule {
    /// `c = 1.1 * |min g|` from the observed trace only.
    ObservedOnly,
    /// `c = 1.1 * max(|min f|, |min g|)`: guards against simulated traces
    /// that dip below the observed minimum early in an inversion.
    PairMax,
}

/// Knobs of the Wasserstein misfit.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct W2Config {
    /// When on (default), the adjoint source is the exact gradient of the
    /// implemented functional, i.e. the derivative is propagated through
    /// the normalization of the positivity transform. When off, the source
    /// is the textbook tail integral `-2 ∫ₓ¹ (x − G⁻¹(F(x))) dx`, whose
    /// terminal sample is structurally zero.
    pub chain_rule_through_normalization: bool,
    /// Smallest admissible post-transform density (the mean density is 1 by
    /// construction). Values below it are floored and the density is
    /// renormalized, with a logged warning.
    pub epsilon_floor: f64,
    pub offset_rule: OffsetRule,
}

impl Default for W2Config {
    fn default() -> Self {
        W2Config {
            chain_rule_through_normalization: true,
            epsilon_floor: 1e-12,
            offset_rule: OffsetRule::ObservedOnly,
        }
    }
}

impl W2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_floor.is_finite() && self.epsilon_floor > 0.0) {
            return Err(Error::Config(format!(
                "epsilon_floor must be positive, got {}",
                self.epsilon_floor
            )));
        }
        Ok(())
    }
}

/// Per-receiver adjoint source traces, aligned with the gather they came
/// from. Receivers are the only nonzero injection sites of the adjoint
/// simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSourceGather {
    pub dt: f64,
    pub traces: Vec<Vec<f64>>,
}

impl AdjointSourceGather {
    pub fn n_receivers(&self) -> usize {
        self.traces.len()
    }

    pub fn max_abs(&self) -> f64 {
        self.traces
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[inline]
fn trap_weight(k: usize, n: usize) -> f64 {
    if k == 0 || k + 1 == n {
        0.5
    } else {
        1.0
    }
}

fn check_trace_lengths(sim: &ShotGather, obs: &ShotGather) -> Result<()> {
    sim.check_aligned(obs)?;
    if sim.n_steps() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "misfits need at least 2 samples per trace, got {}",
            sim.n_steps()
        )));
    }
    Ok(())
}

// --- Least squares ----------------------------------------------------------------

/// `J = ½ Σ_r ∫ (sim − obs)² dt`, trapezoid in time.
pub fn l2_misfit(sim: &ShotGather, obs: &ShotGather) -> Result<f64> {
    check_trace_lengths(sim, obs)?;
    let n = sim.n_steps();
    let mut total = 0.0;
    for (s, o) in sim.traces.iter().zip(&obs.traces) {
        let mut acc = 0.0;
        for k in 0..n {
            let r = s[k] - o[k];
            acc += trap_weight(k, n) * r * r;
        }
        total += acc;
    }
    Ok(0.5 * total * sim.dt)
}

/// Residual traces scaled so that `⟨source, δ⟩` (plain dot product over
/// samples) equals the directional derivative of [`l2_misfit`] — i.e. the
/// trapezoid weights and `dt` of the quadrature are folded in.
pub fn l2_adjoint_source(sim: &ShotGather, obs: &ShotGather) -> Result<AdjointSourceGather> {
    check_trace_lengths(sim, obs)?;
    let n = sim.n_steps();
    let traces = sim
        .traces
        .iter()
        .zip(&obs.traces)
        .map(|(s, o)| {
            (0..n)
                .map(|k| trap_weight(k, n) * (s[k] - o[k]) * sim.dt)
                .collect()
        })
        .collect();
    Ok(AdjointSourceGather { dt: sim.dt, traces })
}

// --- Positivity transform and densities -------------------------------------------

/// A strictly positive density on the `x_k = k/(n-1)` grid of `[0, 1]`,
/// with unit trapezoid mass and its cumulative distribution cached.
#[derive(Debug, Clone, PartialEq)]
pub struct PdfTrace {
    density: Vec<f64>,
    cdf: Vec<f64>,
}

impl PdfTrace {
    /// Normalizes a positive sample vector to unit trapezoid mass and
    /// accumulates its CDF. Rejects non-finite, non-positive, or too-short
    /// input.
    pub fn from_density(mut density: Vec<f64>) -> Result<Self> {
        if density.len() < 2 {
            return Err(Error::Transform(format!(
                "a density needs at least 2 samples, got {}",
                density.len()
            )));
        }
        if !density.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::Transform(
                "density samples must be finite and strictly positive".into(),
            ));
        }
        let n = density.len();
        let dx = 1.0 / (n - 1) as f64;
        let mass: f64 = (0..n).map(|k| trap_weight(k, n) * density[k]).sum::<f64>() * dx;
        for v in &mut density {
            *v /= mass;
        }
        let mut cdf = vec![0.0; n];
        for k in 1..n {
            cdf[k] = cdf[k - 1] + 0.5 * dx * (density[k - 1] + density[k]);
        }
        // Divide out the rounding residue so the endpoint is exactly 1.
        let end = cdf[n - 1];
        for v in &mut cdf {
            *v /= end;
        }
        Ok(PdfTrace { density, cdf })
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// CDF values at the grid nodes; the distribution is treated as
    /// piecewise linear between them.
    pub fn cdf_values(&self) -> &[f64] {
        &self.cdf
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn dx(&self) -> f64 {
        1.0 / (self.density.len() - 1) as f64
    }
}

/// The positivity offset for a trace pair under `rule`.
fn offset_constant(f: &[f64], g: &[f64], rule: OffsetRule) -> f64 {
    let min_of = |t: &[f64]| t.iter().cloned().fold(f64::INFINITY, f64::min);
    match rule {
        OffsetRule::ObservedOnly => 1.1 * min_of(g).abs(),
        OffsetRule::PairMax => 1.1 * min_of(f).abs().max(min_of(g).abs()),
    }
}

/// Offsets, normalizes, and floors one trace with a fixed offset `c`:
/// `p = (t + c) / ⟨t + c⟩`. Returns the density and the trapezoid mass
/// `⟨t + c⟩` (the normalizer the chain rule differentiates through).
/// Offsets, floors, and normalizes one trace. Besides the density, returns
/// the effective normalizer `norm` (every un-floored sample satisfies
/// `density_k = (t_k + c) / norm`) and the mask of floored samples — those
/// are pinned at the floor value, so the density there no longer responds
/// to the input and the adjoint source must treat them as frozen.
fn transform_with_offset(
    t: &[f64],
    c: f64,
    cfg: &W2Config,
) -> Result<(PdfTrace, f64, Vec<bool>)> {
    let n = t.len();
    if n < 2 {
        return Err(Error::Transform(format!(
            "a trace needs at least 2 samples to transform, got {n}"
        )));
    }
    let dx = 1.0 / (n - 1) as f64;
    let mass: f64 = (0..n).map(|k| trap_weight(k, n) * (t[k] + c)).sum::<f64>() * dx;
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::Transform(format!(
            "offset trace has non-positive mass {mass:e}; the offset rule cannot \
             make this pair positive"
        )));
    }
    let mut density: Vec<f64> = t.iter().map(|&v| (v + c) / mass).collect();
    let pinned: Vec<bool> = density.iter().map(|&v| v < cfg.epsilon_floor).collect();
    let floored = pinned.iter().filter(|&&p| p).count();
    if floored > 0 {
        log::warn!(
            "positivity transform floored {floored} of {n} samples at {:e}; \
             the adjoint source freezes them",
            cfg.epsilon_floor
        );
        for v in &mut density {
            *v = v.max(cfg.epsilon_floor);
        }
    }
    // Flooring adds mass, so the final normalization divides it back out;
    // fold both stages into one input-to-density factor.
    let refit: f64 = (0..n).map(|k| trap_weight(k, n) * density[k]).sum::<f64>() * dx;
    let pdf = PdfTrace::from_density(density)?;
    Ok((pdf, mass * refit, pinned))
}

/// Maps a trace to a strictly positive unit-mass density:
/// `P(f) = (f + c) / ⟨f + c⟩`, with `c` chosen from the reference trace by
/// `cfg.offset_rule`. Sub-floor values are floored and renormalized with a
/// logged warning.
pub fn pdf_transform(f: &[f64], g_reference: &[f64], cfg: &W2Config) -> Result<PdfTrace> {
    cfg.validate()?;
    let c = offset_constant(f, g_reference, cfg.offset_rule);
    Ok(transform_with_offset(f, c, cfg)?.0)
}

// --- Quantiles and the closed-form distance ----------------------------------------

/// Inverse of a piecewise-linear CDF at probability `p`, with the index of
/// the bracketing segment.
fn quantile_with_segment(cdf: &[f64], p: f64) -> Result<(f64, usize)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "quantile probability must lie in [0, 1], got {p}"
        )));
    }
    let n = cdf.len();
    let dx = 1.0 / (n - 1) as f64;
    // Last node with value <= p (cdf[0] = 0 <= p always), clipped so the
    // segment [j, j+1] exists.
    let j = cdf.partition_point(|&v| v <= p).saturating_sub(1).min(n - 2);
    let seg = cdf[j + 1] - cdf[j];
    let t = if seg > 0.0 { (p - cdf[j]) / seg } else { 0.0 };
    Ok(((j as f64 + t) * dx, j))
}

/// Inverse of a piecewise-linear CDF: the `x` with `F(x) = p`.
pub fn quantile(cdf: &[f64], p: f64) -> Result<f64> {
    quantile_with_segment(cdf, p).map(|(x, _)| x)
}

/// `x_k − G⁻¹(F(x_k))` at every node, along with the mean density of `g`
/// on the segment of `G` that brackets each `F(x_k)` (the local slope the
/// adjoint source divides by).
fn transport_gap(f: &PdfTrace, g: &PdfTrace) -> Result<(Vec<f64>, Vec<f64>)> {
    if f.len() != g.len() {
        return Err(Error::ShapeMismatch(format!(
            "density grids differ: {} vs {} samples",
            f.len(),
            g.len()
        )));
    }
    let n = f.len();
    let dx = f.dx();
    let gc = g.cdf_values();
    let mut q = vec![0.0; n];
    let mut seg_density = vec![0.0; n];
    for k in 0..n {
        let (y, j) = quantile_with_segment(gc, f.cdf_values()[k])?;
        q[k] = k as f64 * dx - y;
        seg_density[k] = (gc[j + 1] - gc[j]) / dx;
    }
    Ok((q, seg_density))
}

/// Squared 1-D Wasserstein distance between two densities on the same grid,
/// by trapezoid quadrature of `(x − G⁻¹(F(x)))² f(x)` over `[0, 1]`.
pub fn w2_distance(f: &PdfTrace, g: &PdfTrace) -> Result<f64> {
    let (q, _) = transport_gap(f, g)?;
    let n = f.len();
    let dx = f.dx();
    let p = f.density();
    let mut acc = 0.0;
    for k in 0..n {
        acc += trap_weight(k, n) * q[k] * q[k] * p[k];
    }
    Ok(acc * dx)
}

// --- Transport oracle ---------------------------------------------------------------

/// Squared-distance transport cost between two atom lists `(position, mass)`
/// by the monotone (north-west-corner) coupling over sorted support — the
/// optimal plan in 1-D for convex costs. Independent of [`w2_distance`]'s
/// code path; used to cross-check it.
pub fn discrete_ot_oracle(f: &[(f64, f64)], g: &[(f64, f64)]) -> Result<f64> {
    let total = |atoms: &[(f64, f64)]| atoms.iter().map(|a| a.1).sum::<f64>();
    let (mf, mg) = (total(f), total(g));
    let scale = mf.abs().max(mg.abs()).max(1e-300);
    if ((mf - mg) / scale).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "transport needs equal total mass: {mf} vs {mg}"
        )));
    }
    if f.iter().chain(g).any(|a| a.1 < 0.0) {
        return Err(Error::InvalidArgument("atom masses must be non-negative".into()));
    }
    let sorted = |atoms: &[(f64, f64)]| {
        let mut v = atoms.to_vec();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (fa, ga) = (sorted(f), sorted(g));
    let tiny = 1e-15 * scale;
    let (mut i, mut j) = (0, 0);
    let (mut left_f, mut left_g) = (0.0, 0.0);
    let mut cost = 0.0;
    while i < fa.len() && j < ga.len() {
        if left_f <= tiny {
            left_f = fa[i].1;
            if left_f <= tiny {
                i += 1;
                left_f = 0.0;
                continue;
            }
        }
        if left_g <= tiny {
            left_g = ga[j].1;
            if left_g <= tiny {
                j += 1;
                left_g = 0.0;
                continue;
            }
        }
        let m = left_f.min(left_g);
        let d = fa[i].0 - ga[j].0;
        cost += m * d * d;
        left_f -= m;
        left_g -= m;
        if left_f <= tiny {
            i += 1;
            left_f = 0.0;
        }
        if left_g <= tiny {
            j += 1;
            left_g = 0.0;
        }
    }
    Ok(cost)
}

// --- Wasserstein adjoint source ------------------------------------------------------

/// Distance and adjoint source of one transformed trace pair, sharing the
/// transform work. The offset `c` is computed once for the pair so both
/// traces live on the same affine map.
fn w2_trace(f: &[f64], g: &[f64], cfg: &W2Config) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    if f.len() != g.len() {
        return Err(Error::ShapeMismatch(format!(
            "trace lengths differ: {} vs {}",
            f.len(),
            g.len()
        )));
    }
    let c = offset_constant(f, g, cfg.offset_rule);
    let (pf, norm, pinned) = transform_with_offset(f, c, cfg)?;
    let (pg, _, _) = transform_with_offset(g, c, cfg)?;
    let (q, seg_density) = transport_gap(&pf, &pg)?;

    let n = pf.len();
    let dx = pf.dx();
    let p = pf.density();
    let mut distance = 0.0;
    for k in 0..n {
        distance += trap_weight(k, n) * q[k] * q[k] * p[k];
    }
    distance *= dx;

    let source = if cfg.chain_rule_through_normalization {
        // Exact gradient of J(f) = W2²(P(f), P(g)) with fixed offset c.
        //
        // Density-space first: with F the trapezoid CDF of p, each node's
        // quantile gap q_k reacts to a density change through F_k at rate
        // -1/seg_density, and F_k sees p_m with trapezoid coefficients, so
        //   ∂J/∂p_m = dx·w_m·q_m² − dx²·S_m,
        //   S_m = Σ_{k>m} e_k + e_m/2 (m ≥ 1),  S_0 = ½ Σ_k e_k,
        //   e_k = 2·w_k·q_k·p_k / seg_density_k.
        // Then through the normalization p = (f+c)/norm:
        //   dJ/df_m = (∂J/∂p_m − w_m·dx·T) / norm,  T = Σ_k (∂J/∂p_k)·p_k,
        // except at floored samples, whose density is pinned and therefore
        // contributes nothing to the derivative.
        let mut e = vec![0.0; n];
        for k in 0..n {
            e[k] = 2.0 * trap_weight(k, n) * q[k] * p[k] / seg_density[k];
        }
        let mut tail = vec![0.0; n]; // tail[m] = Σ_{k>=m} e_k
        tail[n - 1] = e[n - 1];
        for m in (0..n - 1).rev() {
            tail[m] = tail[m + 1] + e[m];
        }
        let mut density_grad = vec![0.0; n];
        for m in 0..n {
            let s = if m == 0 { 0.5 * tail[0] } else { tail[m] - 0.5 * e[m] };
            density_grad[m] = dx * trap_weight(m, n) * q[m] * q[m] - dx * dx * s;
        }
        let t: f64 = density_grad.iter().zip(p).map(|(d, pk)| d * pk).sum();
        (0..n)
            .map(|m| {
                if pinned[m] {
                    0.0
                } else {
                    (density_grad[m] - trap_weight(m, n) * dx * t) / norm
                }
            })
            .collect()
    } else {
        // Textbook tail integral −2 ∫ₓ¹ q dx by reverse trapezoid
        // accumulation; the terminal sample is structurally zero.
        let mut src = vec![0.0; n];
        for m in (0..n - 1).rev() {
            src[m] = src[m + 1] - dx * (q[m] + q[m + 1]);
        }
        src
    };
    Ok((distance, source))
}

/// Adjoint source of the Wasserstein misfit for one trace pair. With the
/// chain rule on (default), `⟨source, δ⟩` is the directional derivative of
/// the implemented functional; with it off, the source is the textbook tail
/// integral whose terminal sample is exactly zero.
pub fn w2_adjoint_source(f: &[f64], g: &[f64], cfg: &W2Config) -> Result<Vec<f64>> {
    w2_trace(f, g, cfg).map(|(_, source)| source)
}

// --- Gather-level dispatch ------------------------------------------------------------

/// Total misfit and the full adjoint gather for one shot, under either
/// functional. Wasserstein values are computed per receiver trace and
/// summed in receiver order (the per-trace work runs in parallel).
pub fn gather_misfit(
    sim: &ShotGather,
    obs: &ShotGather,
    kind: MisfitKind,
    cfg: &W2Config,
) -> Result<(f64, AdjointSourceGather)> {
    check_trace_lengths(sim, obs)?;
    match kind {
        MisfitKind::L2 => Ok((l2_misfit(sim, obs)?, l2_adjoint_source(sim, obs)?)),
        MisfitKind::W2 => {
            let per_trace: Vec<(f64, Vec<f64>)> = sim
                .traces
                .par_iter()
                .zip(&obs.traces)
                .map(|(s, o)| w2_trace(s, o, cfg))
                .collect::<Result<_>>()?;
            let mut total = 0.0;
            let mut traces = Vec::with_capacity(per_trace.len());
            for (j, source) in per_trace {
                total += j;
                traces.push(source);
            }
            Ok((total, AdjointSourceGather { dt: sim.dt, traces }))
        }
    }
}
