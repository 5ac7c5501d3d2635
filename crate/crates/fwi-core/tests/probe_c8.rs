//! Scratch sweep for the absorber defaults; not part of the suite.

use fwi_core::signal::ricker_trace;
use fwi_core::{
    simulate_forward, stencil_coefficients, AbsorberSpec, Cell, GridSpec, RickerParams,
    SimConfig, SourceInjection, SpeedModel, TimeAxis,
};

#[test]
#[ignore]
fn sweep_plane_wave_reflection() {
    let c = 1500.0;
    let h = 3.0e-4;
    let stencil = stencil_coefficients(4).unwrap();
    let dt = 0.9 * (h / c) * 2.0 / (2.0 * stencil.abs_sum()).sqrt();
    let n_steps = 300;
    let p = RickerParams::new(1.0e6, 0.9).unwrap();
    let nx = 360;

    let row_source = |cfg: &SimConfig, y: usize| {
        let trace = ricker_trace(p, cfg.time, p.half_support()).unwrap();
        SourceInjection::new((20..340).map(|i| (Cell::new(i, y), trace.clone())).collect())
    };

    let open = SimConfig {
        grid: GridSpec::new(nx, 460, h).unwrap(),
        time: TimeAxis::new(dt, n_steps).unwrap(),
        stencil: stencil.clone(),
        absorber: AbsorberSpec::sealed(),
    };
    let src_b = row_source(&open, 270);
    let theta_b = SpeedModel::uniform(open.grid, c).unwrap();
    let (free_field, _) =
        simulate_forward(&open, &theta_b, &src_b, &[Cell::new(180, 220)], false).unwrap();
    let incident = free_field.traces[0]
        .iter()
        .cloned()
        .map(f64::abs)
        .fold(0.0, f64::max);

    let grid_a = GridSpec::new(nx, 200, h).unwrap();
    let theta_a = SpeedModel::uniform(grid_a, c).unwrap();
    for exponent in [1u32, 2, 3, 4] {
        for target in [1e-1, 3e-2, 1e-2, 3e-3, 1e-3] {
            let absorbing = SimConfig {
                grid: grid_a,
                time: TimeAxis::new(dt, n_steps).unwrap(),
                stencil: stencil.clone(),
                absorber: AbsorberSpec {
                    width: 20,
                    exponent,
                    target_reflection: target,
                },
            };
            let src_a = row_source(&absorbing, 90);
            let (with_boundary, _) =
                simulate_forward(&absorbing, &theta_a, &src_a, &[Cell::new(180, 40)], false)
                    .unwrap();
            let reflected = with_boundary.traces[0]
                .iter()
                .zip(&free_field.traces[0])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            println!(
                "plane p={exponent} R={target:.0e}: reflection = {:.3e}",
                reflected / incident
            );
        }
    }
}

#[test]
#[ignore]
fn sweep_absorber_reflection() {
    let c = 1500.0;
    let h = 3.0e-4;
    let stencil = stencil_coefficients(4).unwrap();
    let dt = 0.9 * (h / c) * 2.0 / (2.0 * stencil.abs_sum()).sqrt();
    let n_steps = 400;
    let p = RickerParams::new(1.0e6, 0.9).unwrap();

    let open = SimConfig {
        grid: GridSpec::new(460, 460, h).unwrap(),
        time: TimeAxis::new(dt, n_steps).unwrap(),
        stencil: stencil.clone(),
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

    let grid_a = GridSpec::new(260, 200, h).unwrap();
    let theta_a = SpeedModel::uniform(grid_a, c).unwrap();
    for exponent in [2u32, 3, 4, 5, 6] {
        for target in [3e-2, 1e-2, 3e-3, 1e-3, 1e-4] {
            let absorbing = SimConfig {
                grid: grid_a,
                time: TimeAxis::new(dt, n_steps).unwrap(),
                stencil: stencil.clone(),
                absorber: AbsorberSpec {
                    width: 20,
                    exponent,
                    target_reflection: target,
                },
            };
            let src_a = SourceInjection::single(
                Cell::new(130, 90),
                ricker_trace(p, absorbing.time, p.half_support()).unwrap(),
            );
            let (with_boundary, _) =
                simulate_forward(&absorbing, &theta_a, &src_a, &[Cell::new(180, 40)], false)
                    .unwrap();
            let reflected = with_boundary.traces[0]
                .iter()
                .zip(&free_field.traces[0])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            println!(
                "p={exponent} R={target:.0e}: reflection = {:.3e}",
                reflected / incident
            );
        }
    }
}
