//! Release gate: twelve numbered acceptance checks, from operator-level
//! exactness up to full desk-scale inversions. Each check prints one
//! `criterion NN (...): PASS/FAIL` line (visible with `--nocapture`) and
//! asserts its pinned tolerances. The heavyweight inversion checks share a
//! single test function (criteria 10, 11, 12) so the expensive twin runs
//! happen exactly once.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use fwi_core::grid::field_axpy;
use fwi_core::signal::ricker_trace;
use fwi_core::{
    build_scene, capped_optimizer, count_strict_minima, dataset_shots, discrete_ot_oracle,
    gather_misfit, invert_with, lbfgsb_minimize, misfit_shift_scan, quantile,
    run_forward_experiment, run_inversion_on_dataset, simulate_forward, stencil_coefficients,
    total_gradient, w2_adjoint_source, w2_distance, AbsorberSpec, ArrayParams, Cell,
    ExperimentConfig, Field2D, GridSpec, InversionSetup, MarchingSim, MisfitKind, Objective,
    OffsetRule, OptimizerConfig, PdfTrace, PulseParams, ReverseReplay, RickerParams,
    ShotDefinition, ShotGather, SimConfig, SourceInjection, SpecimenKind, SpeedModel, TimeAxis,
    W2Config,
};

/// Prints the verdict line for one numbered check and returns `pass` so the
/// caller can assert once all of its lines are out.
fn verdict(number: &str, label: &str, pass: bool, detail: &str) -> bool {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("criterion {number} ({label}): {word} - {detail}");
    pass
}

fn trap(k: usize, n: usize) -> f64 {
    if k == 0 || k + 1 == n {
        0.5
    } else {
        1.0
    }
}

// --- 1: stencil exactness ---------------------------------------------------------

#[test]
fn criterion_01_stencil_exact_on_monomials() {
    // The radius-4 second-derivative weights must reproduce (x^p)'' without
    // discretization error for p <= 9 when sampled on integer nodes, and sum
    // to zero so constants are annihilated exactly.
    let s = stencil_coefficients(4).unwrap();
    let mut worst = 0.0_f64;
    for p in 0..=9_i32 {
        let applied: f64 = s
            .coefficients()
            .iter()
            .enumerate()
            .map(|(t, c)| c * (t as f64 - 4.0).powi(p))
            .sum();
        let exact = if p == 2 { 2.0 } else { 0.0 };
        worst = worst.max((applied - exact).abs());
    }
    let sum: f64 = s.coefficients().iter().sum();
    let pass = worst <= 1.0e-10 && sum.abs() <= 1.0e-12;
    assert!(verdict(
        "01",
        "stencil exactness",
        pass,
        &format!(
            "max |stencil(x^p) - (x^p)''| = {worst:.2e} for p <= 9 (tol 1e-10), |sum c| = {:.2e} (tol 1e-12)",
            sum.abs()
        ),
    ));
}

// --- 2: transport quadrature vs coupling oracle -----------------------------------

/// Smooth strictly positive test density: a constant floor plus a few
/// Gaussian bumps, normalized to unit trapezoid mass.
fn bumpy_density(rng: &mut StdRng, n: usize) -> PdfTrace {
    let mut d = vec![0.3; n];
    for _ in 0..rng.gen_range(3..6) {
        let a = rng.gen_range(0.2..1.0);
        let mu = rng.gen_range(0.1..0.9);
        let s = rng.gen_range(0.05..0.15);
        for (k, v) in d.iter_mut().enumerate() {
            let x = k as f64 / (n - 1) as f64;
            *v += a * (-(x - mu) * (x - mu) / (2.0 * s * s)).exp();
        }
    }
    PdfTrace::from_density(d).unwrap()
}

/// One atom per grid node carrying its trapezoid mass.
fn node_atoms(p: &PdfTrace) -> Vec<(f64, f64)> {
    let n = p.len();
    let dx = p.dx();
    (0..n)
        .map(|k| (k as f64 * dx, trap(k, n) * p.density()[k] * dx))
        .collect()
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for slot in 0..k {
            let mut q: Vec<usize> = p.iter().map(|&v| v + usize::from(v >= slot)).collect();
            q.push(slot);
            out.push(q);
        }
    }
    out
}

#[test]
fn criterion_02_transport_quadrature_matches_the_coupling_oracle() {
    // The closed-form quantile quadrature must equal the transport cost of
    // the monotone coupling it implies, recomputed independently by the
    // north-west-corner oracle on the node atoms and their mapped positions.
    let mut rng = StdRng::seed_from_u64(20);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let f = bumpy_density(&mut rng, 256);
        let g = bumpy_density(&mut rng, 256);
        let closed = w2_distance(&f, &g).unwrap();
        let fa = node_atoms(&f);
        let mapped: Vec<(f64, f64)> = fa
            .iter()
            .zip(f.cdf_values())
            .map(|(&(_, m), &fk)| (quantile(g.cdf_values(), fk).unwrap(), m))
            .collect();
        let oracle = discrete_ot_oracle(&fa, &mapped).unwrap();
        worst = worst.max((closed - oracle).abs() / closed.abs().max(1e-300));
    }

    // The oracle itself against brute-force optimal assignment: with equal
    // unit masses the optimal plan is a permutation, found by trying all.
    let mut worst_small = 0.0_f64;
    for k in 2..=6 {
        for _ in 0..20 {
            let xs: Vec<(f64, f64)> = (0..k).map(|_| (rng.gen_range(-1.0..1.0), 1.0)).collect();
            let ys: Vec<(f64, f64)> = (0..k).map(|_| (rng.gen_range(-1.0..1.0), 1.0)).collect();
            let best = permutations(k)
                .into_iter()
                .map(|perm| {
                    perm.iter()
                        .enumerate()
                        .map(|(i, &j)| (xs[i].0 - ys[j].0) * (xs[i].0 - ys[j].0))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            let nw = discrete_ot_oracle(&xs, &ys).unwrap();
            worst_small = worst_small.max((nw - best).abs());
        }
    }

    let pass = worst <= 1.0e-6 && worst_small <= 1.0e-10;
    assert!(verdict(
        "02",
        "transport oracle equivalence",
        pass,
        &format!(
            "quadrature vs coupling oracle rel <= {worst:.2e} on 100 pairs of 256-sample \
             densities (tol 1e-6); oracle vs exhaustive assignment abs <= {worst_small:.2e} \
             on <= 6 atoms (tol 1e-10)"
        ),
    ));
}

// --- 3: adjoint-source terminal zero ----------------------------------------------

#[test]
fn criterion_03_transport_adjoint_source_ends_at_zero() {
    // The tail-integral form of the transport adjoint source accumulates
    // from the final sample backwards, so that sample must vanish.
    let mut rng = StdRng::seed_from_u64(30);
    let cfg = W2Config {
        chain_rule_through_normalization: false,
        offset_rule: OffsetRule::PairMax,
        ..W2Config::default()
    };
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let f: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let src = w2_adjoint_source(&f, &g, &cfg).unwrap();
        let scale = src.iter().cloned().map(f64::abs).fold(0.0, f64::max);
        assert!(scale > 0.0, "adjoint source of distinct random traces is zero");
        worst = worst.max(src.last().unwrap().abs() / scale);
    }
    let pass = worst <= 1.0e-12;
    assert!(verdict(
        "03",
        "adjoint-source terminal zero",
        pass,
        &format!("max |final sample| / max |source| = {worst:.2e} over 100 random pairs (tol 1e-12)"),
    ));
}

// --- 4: trace-level functional-gradient consistency -------------------------------

#[test]
fn criterion_04_adjoint_sources_are_trace_level_derivatives() {
    // For both functionals, <adjoint source, delta> must match a central
    // finite difference of the trace-level misfit along random directions.
    let p = RickerParams::new(1.0e6, 0.9).unwrap();
    let axis = TimeAxis::new(25e-9, 400).unwrap();
    let center = 200.0 * 25e-9;
    let g = ricker_trace(p, axis, center).unwrap().samples().to_vec();
    let f = ricker_trace(p, axis, center + 32.0 * 25e-9)
        .unwrap()
        .samples()
        .to_vec();
    let w2cfg = W2Config::default();
    let gather = |t: &[f64]| ShotGather {
        dt: 25e-9,
        traces: vec![t.to_vec()],
    };
    let obs = gather(&g);

    let mut rng = StdRng::seed_from_u64(40);
    let mut rel = [0.0_f64; 2];
    let kinds = [(MisfitKind::W2, 1.0e-3), (MisfitKind::L2, 1.0e-4)];
    for (slot, &(kind, _)) in kinds.iter().enumerate() {
        let (_, source) = gather_misfit(&gather(&f), &obs, kind, &w2cfg).unwrap();
        let src = &source.traces[0];
        for _ in 0..10 {
            let delta: Vec<f64> = (0..f.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps = 1e-6;
            let up: Vec<f64> = f.iter().zip(&delta).map(|(v, d)| v + eps * d).collect();
            let dn: Vec<f64> = f.iter().zip(&delta).map(|(v, d)| v - eps * d).collect();
            let j_up = gather_misfit(&gather(&up), &obs, kind, &w2cfg).unwrap().0;
            let j_dn = gather_misfit(&gather(&dn), &obs, kind, &w2cfg).unwrap().0;
            let fd = (j_up - j_dn) / (2.0 * eps);
            let dot: f64 = src.iter().zip(&delta).map(|(s, d)| s * d).sum();
            rel[slot] = rel[slot].max((fd - dot).abs() / fd.abs().max(dot.abs()));
        }
    }
    let pass = rel[0] <= kinds[0].1 && rel[1] <= kinds[1].1;
    assert!(verdict(
        "04",
        "trace-level gradient consistency",
        pass,
        &format!(
            "10 random directions each: W2 rel <= {:.2e} (tol 1e-3), L2 rel <= {:.2e} (tol 1e-4)",
            rel[0], rel[1]
        ),
    ));
}

// --- 5: PDE-gradient consistency ---------------------------------------------------

/// Smooth heterogeneous map: background plus three seeded Gaussian blobs.
fn blob_model(grid: GridSpec, seed: u64, background: f64, max_amp: f64) -> SpeedModel {
    let mut rng = StdRng::seed_from_u64(seed);
    let (nx, ny) = (grid.nx as f64, grid.ny as f64);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-max_amp..max_amp),
                rng.gen_range(0.25..0.75) * nx,
                rng.gen_range(0.25..0.75) * ny,
                rng.gen_range(4.0..9.0),
            )
        })
        .collect();
    let field = Field2D::from_fn(grid, |i, j| {
        let mut c = background;
        for &(amp, cx, cy, s) in &blobs {
            let d2 = (i as f64 - cx).powi(2) + (j as f64 - cy).powi(2);
            c += amp * (-d2 / (2.0 * s * s)).exp();
        }
        c
    });
    SpeedModel::new(field).unwrap()
}

/// Sealed 60x60 transmission scene with one emitter, four receivers, and
/// smooth distinct start/true models; used by criteria 5 and 12.
fn fd_scene() -> (SimConfig, SpeedModel, ShotDefinition) {
    let h = 3.0e-4;
    let stencil = stencil_coefficients(4).unwrap();
    let dt = 0.9 * (h / 1700.0) * 2.0 / (2.0 * stencil.abs_sum()).sqrt();
    let grid = GridSpec::new(60, 60, h).unwrap();
    let cfg = SimConfig {
        grid,
        time: TimeAxis::new(dt, 600).unwrap(),
        stencil,
        absorber: AbsorberSpec::sealed(),
    };
    let theta0 = blob_model(grid, 7, 1500.0, 60.0);
    let theta_true = blob_model(grid, 108, 1500.0, 60.0);
    let p = RickerParams::new(1.0e6, 0.9).unwrap();
    let source = ricker_trace(p, cfg.time, p.half_support()).unwrap();
    let receivers = vec![
        Cell::new(10, 30),
        Cell::new(50, 10),
        Cell::new(30, 50),
        Cell::new(48, 48),
    ];
    let emitter = Cell::new(12, 12);
    let injection = SourceInjection::single(emitter, source.clone());
    let (observed, _) = simulate_forward(&cfg, &theta_true, &injection, &receivers, false).unwrap();
    (
        cfg,
        theta0,
        ShotDefinition {
            emitter,
            source,
            receivers,
            observed,
        },
    )
}

fn shot_misfit(
    cfg: &SimConfig,
    theta: &SpeedModel,
    shot: &ShotDefinition,
    kind: MisfitKind,
    w2: &W2Config,
) -> f64 {
    let injection = SourceInjection::single(shot.emitter, shot.source.clone());
    let (sim, _) = simulate_forward(cfg, theta, &injection, &shot.receivers, false).unwrap();
    gather_misfit(&sim, &shot.observed, kind, w2).unwrap().0
}

#[test]
fn criterion_05_adjoint_gradient_matches_finite_differences() {
    let (cfg, theta0, shot) = fd_scene();
    let w2cfg = W2Config::default();
    let shots = [shot];
    let mut rng = StdRng::seed_from_u64(50);
    let kinds = [(MisfitKind::L2, 1.0e-2), (MisfitKind::W2, 3.0e-2)];
    let mut rel = [0.0_f64; 2];
    for (slot, &(kind, _)) in kinds.iter().enumerate() {
        let result = total_gradient(&cfg, &theta0, &shots, kind, &w2cfg).unwrap();
        for _ in 0..3 {
            let mut d = Field2D::from_fn(cfg.grid, |_, _| rng.gen_range(-1.0..1.0));
            let sup = d.max_abs();
            d.values_mut().iter_mut().for_each(|v| *v /= sup);
            let eps = 0.5; // m/s: resolvable by the misfit, stable for the fixed dt
            let up = SpeedModel::new(field_axpy(eps, &d, theta0.field()).unwrap()).unwrap();
            let dn = SpeedModel::new(field_axpy(-eps, &d, theta0.field()).unwrap()).unwrap();
            let j_up = shot_misfit(&cfg, &up, &shots[0], kind, &w2cfg);
            let j_dn = shot_misfit(&cfg, &dn, &shots[0], kind, &w2cfg);
            let fd = (j_up - j_dn) / (2.0 * eps);
            let analytic: f64 = result
                .gradient
                .values()
                .iter()
                .zip(d.values())
                .map(|(g, dv)| g * dv)
                .sum();
            rel[slot] = rel[slot].max((fd - analytic).abs() / fd.abs().max(analytic.abs()));
        }
    }
    let pass = rel[0] <= kinds[0].1 && rel[1] <= kinds[1].1;
    assert!(verdict(
        "05",
        "pde-gradient consistency",
        pass,
        &format!(
            "60x60, 600 steps, 1 shot, 4 receivers, 3 directions: L2 rel <= {:.2e} (tol 1e-2), \
             W2 rel <= {:.2e} (tol 3e-2)",
            rel[0], rel[1]
        ),
    ));
}

// --- 6: cycle-skipping contrast ----------------------------------------------------

#[test]
fn criterion_06_shift_scan_shows_the_convexity_contrast() {
    let rows = misfit_shift_scan(&PulseParams::default(), &W2Config::default(), 25.0e-9, 3.0e-6)
        .unwrap();
    let l2: Vec<f64> = rows.iter().map(|r| r.l2).collect();
    let w2: Vec<f64> = rows.iter().map(|r| r.w2).collect();
    // Curves are max-normalized; wiggles below this depth are scan noise,
    // while genuine side lobes of the least-squares curve are ~1e-2 deep.
    let tol = 1.0e-6;
    let l2_wells = count_strict_minima(&l2, tol);
    let w2_wells = count_strict_minima(&w2, tol);
    let (imin, _) = w2
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let at_zero = rows[imin].shift.abs() < 12.5e-9;
    let pass = l2_wells >= 3 && w2_wells == 1 && at_zero;
    assert!(verdict(
        "06",
        "cycle-skipping contrast",
        pass,
        &format!(
            "1 MHz pulse shifted over +-3 us in 25 ns steps: L2 has {l2_wells} local minima \
             (need >= 3), W2 has {w2_wells} (need exactly 1) at shift {:.2e} s (need 0)",
            rows[imin].shift
        ),
    ));
}

// --- 7: replay fidelity --------------------------------------------------------------

/// Worst interior mismatch between backward replay and stored forward
/// snapshots, relative to the largest field value of the run.
fn replay_rel_error(cfg: &SimConfig, theta: &SpeedModel, src: &SourceInjection) -> f64 {
    let n = cfg.time.n_steps;
    let mut sim = MarchingSim::new(cfg, theta, src, true).unwrap();
    let mut stored = Vec::with_capacity(n);
    stored.push(sim.current().to_vec());
    for _ in 0..n - 1 {
        sim.advance().unwrap();
        stored.push(sim.current().to_vec());
    }
    let max_u = stored
        .iter()
        .flatten()
        .cloned()
        .map(f64::abs)
        .fold(0.0, f64::max);

    let (_, tape) = simulate_forward(cfg, theta, src, &[], true).unwrap();
    let mut replay = ReverseReplay::new(cfg, theta, tape.unwrap(), src).unwrap();
    let interior: Vec<usize> = (0..cfg.grid.ny)
        .flat_map(|j| (0..cfg.grid.nx).map(move |i| (i, j)))
        .filter(|&(i, j)| cfg.is_physical(Cell::new(i, j)))
        .map(|(i, j)| cfg.grid.idx(i, j))
        .collect();
    let diff = |a: &[f64], b: &[f64]| {
        interior
            .iter()
            .map(|&ix| (a[ix] - b[ix]).abs())
            .fold(0.0, f64::max)
    };

    let mut worst = diff(replay.top(), &stored[n - 1]);
    worst = worst.max(diff(replay.bottom(), &stored[n - 2]));
    while replay.step_back().unwrap() {
        worst = worst.max(diff(replay.bottom(), &stored[replay.pos()]));
    }
    worst / max_u
}

#[test]
fn criterion_07_reverse_replay_matches_stored_snapshots() {
    let h = 3.0e-4;
    let stencil = stencil_coefficients(4).unwrap();
    let dt = 0.9 * (h / 1500.0) * 2.0 / (2.0 * stencil.abs_sum()).sqrt();
    let grid = GridSpec::new(120, 120, h).unwrap();
    let absorbing = SimConfig {
        grid,
        time: TimeAxis::new(dt, 800).unwrap(),
        stencil: stencil.clone(),
        absorber: AbsorberSpec {
            width: 20,
            ..AbsorberSpec::default()
        },
    };
    let theta = SpeedModel::uniform(grid, 1500.0).unwrap();
    let p = RickerParams::new(1.0e6, 0.9).unwrap();
    let src = SourceInjection::single(
        Cell::new(60, 60),
        ricker_trace(p, absorbing.time, p.half_support()).unwrap(),
    );
    let rel_absorbing = replay_rel_error(&absorbing, &theta, &src);

    let sealed = SimConfig {
        absorber: AbsorberSpec::sealed(),
        ..absorbing
    };
    let rel_sealed = replay_rel_error(&sealed, &theta, &src);

    let pass = rel_absorbing <= 1.0e-5 && rel_sealed <= 1.0e-10;
    assert!(verdict(
        "07",
        "replay fidelity",
        pass,
        &format!(
            "120x120, 800 steps: interior replay error {rel_absorbing:.2e} of max |u| with the \
             20-cell absorber (tol 1e-5), {rel_sealed:.2e} sealed (tol 1e-10)"
        ),
    ));
}

// --- 8: absorber quality -------------------------------------------------------------

#[test]
fn criterion_08_absorber_reflects_under_one_percent() {
    // Two-run subtraction: the same pulse is recorded on the absorbing
    // domain and on a domain large enough that no edge is ever reached, so
    // the difference at the receiver is exactly the reflected energy. The
    // record ends before reflections from any non-facing edge can arrive,
    // which keeps the measurement at normal incidence.
    let c = 1500.0;
    let h = 3.0e-4;
    let stencil = stencil_coefficients(4).unwrap();
    let dt = 0.9 * (h / c) * 2.0 / (2.0 * stencil.abs_sum()).sqrt();
    let n_steps = 400; // ~200 cell crossing times; nearest side path needs ~229
    let p = RickerParams::new(1.0e6, 0.9).unwrap();

    let absorbing = SimConfig {
        grid: GridSpec::new(260, 200, h).unwrap(),
        time: TimeAxis::new(dt, n_steps).unwrap(),
        stencil: stencil.clone(),
        absorber: AbsorberSpec::default(), // 20 cells
    };
    let src_a = SourceInjection::single(
        Cell::new(130, 90),
        ricker_trace(p, absorbing.time, p.half_support()).unwrap(),
    );
    let theta_a = SpeedModel::uniform(absorbing.grid, c).unwrap();
    let (with_boundary, _) =
        simulate_forward(&absorbing, &theta_a, &src_a, &[Cell::new(130, 40)], false).unwrap();

    let open = SimConfig {
        grid: GridSpec::new(460, 460, h).unwrap(),
        time: TimeAxis::new(dt, n_steps).unwrap(),
        stencil,
        absorber: AbsorberSpec::sealed(),
    };
    let src_b = SourceInjection::single(
        Cell::new(230, 270),
        ricker_trace(p, open.time, p.half_support()).unwrap(),
    );
    let theta_b = SpeedModel::uniform(open.grid, c).unwrap();
    let (free_field, _) =
        simulate_forward(&open, &theta_b, &src_b, &[Cell::new(230, 220)], false).unwrap();

    let incident = free_field.traces[0]
        .iter()
        .cloned()
        .map(f64::abs)
        .fold(0.0, f64::max);
    let reflected = with_boundary.traces[0]
        .iter()
        .zip(&free_field.traces[0])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let ratio = reflected / incident;
    let pass = incident > 0.0 && ratio <= 0.01;
    assert!(verdict(
        "08",
        "absorber quality",
        pass,
        &format!("normal-incidence reflected amplitude = {ratio:.2e} of the incident peak (tol 1e-2)"),
    ));
}

// --- 9: optimizer oracle -------------------------------------------------------------

struct SeparableQuadratic {
    curvatures: Vec<f64>,
    targets: Vec<f64>,
}

impl Objective for SeparableQuadratic {
    fn value_and_grad(&self, x: &[f64]) -> fwi_core::Result<(f64, Vec<f64>)> {
        let mut j = 0.0;
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let r = x[i] - self.targets[i];
            j += 0.5 * self.curvatures[i] * r * r;
            g[i] = self.curvatures[i] * r;
        }
        Ok((j, g))
    }
}

#[test]
fn criterion_09_projected_quasi_newton_recovers_clamped_targets() {
    // On a separable quadratic over a box, the exact minimizer is the
    // coordinate-wise clamp of the unconstrained targets.
    let dim = 10_000;
    let cfg = OptimizerConfig {
        max_iterations: 100,
        lower: -1.0,
        upper: 1.0,
        grad_tolerance: 1e-15,
        decrease_tolerance: 1e-15,
        ..OptimizerConfig::default()
    };
    let mut worst = 0.0_f64;
    let mut most_iterations = 0;
    for seed in [90, 91, 92] {
        let mut rng = StdRng::seed_from_u64(seed);
        let curvatures: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.5..5.0)).collect();
        let targets: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let obj = SeparableQuadratic {
            curvatures,
            targets: targets.clone(),
        };
        let (x, logs) = lbfgsb_minimize(&obj, &vec![0.0; dim], &cfg).unwrap();
        let gap = x
            .iter()
            .zip(&targets)
            .map(|(xi, ti)| (xi - ti.clamp(-1.0, 1.0)).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap);
        most_iterations = most_iterations.max(logs.last().unwrap().iteration);
    }
    let pass = worst <= 1.0e-6 && most_iterations <= 100;
    assert!(verdict(
        "09",
        "optimizer oracle",
        pass,
        &format!(
            "3 random dim-10000 box-constrained quadratics: worst coordinate gap to the \
             clamped target = {worst:.2e} (tol 1e-6) after <= {most_iterations} iterations \
             (cap 100)"
        ),
    ));
}

// --- 10, 11, 12: desk-scale inversions, overhead, determinism ------------------------

fn desk_config(specimen: SpecimenKind, kind: MisfitKind, dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        specimen,
        scale: 0.3,
        misfit: kind,
        array: ArrayParams {
            emitter_elements: vec![16, 48],
            ..ArrayParams::default()
        },
        optimizer: OptimizerConfig {
            max_iterations: 60,
            // Effectively disable the early-stopping rules so the runs use
            // their full iteration budget.
            grad_tolerance: 1e-16,
            decrease_tolerance: 1e-16,
            ..OptimizerConfig::default()
        },
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn criteria_10_to_12_desk_inversions_overhead_and_determinism() {
    let dir = tempfile::tempdir().unwrap();

    // --- criterion 10: twin runs (same observed data) on two specimens ---
    let mut pass10 = true;
    let mut detail10 = String::new();
    let mut camembert_dataset = None;
    for specimen in [SpecimenKind::Camembert, SpecimenKind::AcrylicSdh2] {
        let cfg_l2 = desk_config(specimen, MisfitKind::L2, dir.path());
        let (scene_l2, dataset) = run_forward_experiment(&cfg_l2).unwrap();
        let out_l2 = run_inversion_on_dataset(&cfg_l2, scene_l2, &dataset).unwrap();
        let cfg_w2 = desk_config(specimen, MisfitKind::W2, dir.path());
        let scene_w2 = build_scene(&cfg_w2).unwrap();
        let out_w2 = run_inversion_on_dataset(&cfg_w2, scene_w2, &dataset).unwrap();

        let (rl, rw) = (&out_l2.report, &out_w2.report);
        let improvement = rw.mse_initial / rw.mse_final;
        pass10 &= rw.mse_final <= rl.mse_final && improvement >= 5.0;
        detail10.push_str(&format!(
            "{}: mse W2 {:.1} vs L2 {:.1} (init {:.1}, W2 x{:.1} down, {} / {} iters); ",
            specimen.label(),
            rw.mse_final,
            rl.mse_final,
            rw.mse_initial,
            improvement,
            rw.iterations,
            rl.iterations,
        ));
        if specimen == SpecimenKind::Camembert {
            camembert_dataset = Some(dataset);
        }
    }
    detail10.push_str("need mse(W2) <= mse(L2) and W2 down >= 5x");
    let pass10 = verdict("10", "desk-scale inversion trend", pass10, &detail10);

    // --- criterion 11: per-iteration gradient cost of W2 vs L2 ---
    // Timed on the same scene, shots, and model, alternating the functionals
    // so slow machine drift cancels out of the means.
    let cfg_t = desk_config(SpecimenKind::Camembert, MisfitKind::L2, dir.path());
    let scene_t = build_scene(&cfg_t).unwrap();
    let dataset = camembert_dataset.expect("camembert runs come first");
    let shots_t = dataset_shots(&scene_t, &dataset).unwrap();
    let time_one = |kind: MisfitKind| {
        let started = Instant::now();
        total_gradient(&scene_t.sim, &scene_t.initial, &shots_t, kind, &cfg_t.w2).unwrap();
        started.elapsed().as_secs_f64()
    };
    let repeats = 5;
    let (mut l2_total, mut w2_total) = (0.0, 0.0);
    for _ in 0..repeats {
        l2_total += time_one(MisfitKind::L2);
        w2_total += time_one(MisfitKind::W2);
    }
    let (l2_mean, w2_mean) = (l2_total / repeats as f64, w2_total / repeats as f64);
    let overhead = w2_mean / l2_mean - 1.0;
    let pass11 = verdict(
        "11",
        "transport gradient overhead",
        overhead <= 0.05,
        &format!(
            "mean gradient time over {repeats} alternating calls: W2 {w2_mean:.2}s vs \
             L2 {l2_mean:.2}s, overhead {:.1}% (tol 5%)",
            overhead * 100.0
        ),
    );

    // --- criterion 12: bitwise determinism across worker counts ---
    // (a) single-shot gradients on the finite-difference scene.
    let (cfg5, theta5, shot5) = fd_scene();
    let shots5 = [shot5];
    let w2cfg = W2Config::default();
    let grad_bits = |threads: usize, kind: MisfitKind| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let g = pool.install(|| total_gradient(&cfg5, &theta5, &shots5, kind, &w2cfg).unwrap());
        bits(g.gradient.values())
    };
    let grads_match = [MisfitKind::L2, MisfitKind::W2]
        .iter()
        .all(|&k| grad_bits(1, k) == grad_bits(4, k));

    // (b) iterate sequence of the desk-scale transport run. Every accepted
    // iterate is a pure function of the previous one, so a bitwise-equal
    // prefix pins the whole trajectory; eight iterations cover the bare
    // gradient start, step lengthening, and quasi-Newton directions.
    let mut cfg12 = desk_config(SpecimenKind::Camembert, MisfitKind::W2, dir.path());
    cfg12.optimizer.max_iterations = 8;
    let run_prefix = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let scene = build_scene(&cfg12).unwrap();
            let shots = dataset_shots(&scene, &dataset).unwrap();
            let opt = capped_optimizer(&cfg12, &scene).unwrap();
            let setup = InversionSetup {
                cfg: &scene.sim,
                shots: &shots,
                kind: cfg12.misfit,
                w2: cfg12.w2,
                truth: Some(scene.truth.field()),
            };
            let mut iterates: Vec<Vec<u64>> = Vec::new();
            let (model, logs) = invert_with(&setup, &scene.initial, &opt, |_, field| {
                iterates.push(bits(field.values()));
            })
            .unwrap();
            let log_bits: Vec<(usize, u64, u64, Option<u64>)> = logs
                .iter()
                .map(|l| {
                    (
                        l.iteration,
                        l.misfit.to_bits(),
                        l.grad_inf_norm.to_bits(),
                        l.model_mse.map(f64::to_bits),
                    )
                })
                .collect();
            (iterates, log_bits, bits(model.field().values()))
        })
    };
    let one_worker = run_prefix(1);
    let two_workers = run_prefix(2);
    let prefix_match = one_worker == two_workers;
    let pass12 = verdict(
        "12",
        "worker-count determinism",
        grads_match && prefix_match,
        &format!(
            "single-shot gradients bitwise equal for 1 vs 4 workers (both functionals): \
             {grads_match}; 8-iteration desk-run prefix (iterates, logs, final model) \
             bitwise equal for 1 vs 2 workers: {prefix_match}"
        ),
    );

    assert!(
        pass10 && pass11 && pass12,
        "desk-scale criteria failed (10: {pass10}, 11: {pass11}, 12: {pass12})"
    );
}
