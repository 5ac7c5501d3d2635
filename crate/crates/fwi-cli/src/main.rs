//! `fwi` — command-line driver for the ultrasound full-waveform inversion
//! toolkit.
//!
//! Every run is described by an [`ExperimentConfig`]: start from defaults or
//! a `--config` JSON file, then override individual fields with flags. On
//! success the command prints a JSON summary to stdout and exits 0; on
//! failure it prints a one-line JSON error object to stderr and exits 1.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use fwi_core::experiment::{
    stem_with_suffix, write_field_raw, write_gradient_check_csv, write_json,
    write_shift_scan_csv,
};
use fwi_core::{
    build_scene, count_strict_minima, gradient_check, misfit_shift_scan,
    run_forward_experiment, run_inversion_on_dataset, Error, ExperimentConfig, MisfitKind,
    Result, ShotDataset, SpecimenKind,
};

#[derive(Parser)]
#[command(
    name = "fwi",
    version,
    about = "2-D ultrasound full-waveform inversion: forward modelling, \
             transport-based misfits, adjoint gradients, bounded inversion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Base experiment config (JSON); flags below override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Specimen to image (camembert, acrylic_sdh2, steel_square, steel_hole,
    /// steel_sdh2, acrylic_star).
    #[arg(long, global = true)]
    specimen: Option<SpecimenKind>,

    /// Scene shrink factor in (0, 1]; 1 is the full-size rig.
    #[arg(long, global = true)]
    scale: Option<f64>,

    /// Misfit functional: l2 or w2.
    #[arg(long, global = true, value_parser = parse_misfit)]
    misfit: Option<MisfitKind>,

    /// Directory for run products.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    /// Rayon worker threads (default: one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Seed for randomized diagnostics.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize the true specimen and write it as a raw speed map.
    Specimen,
    /// Synthesize the observed dataset by forward simulation.
    Forward,
    /// Reconstruct the speed map from (freshly synthesized or stored) data.
    Invert {
        /// Load observed data from this dataset stem (as written by
        /// `forward`) instead of simulating it in-run.
        #[arg(long, value_name = "STEM")]
        dataset: Option<PathBuf>,
        /// Cap on optimizer iterations (overrides the config).
        #[arg(long)]
        iterations: Option<usize>,
        /// Write a model snapshot every N accepted iterations.
        #[arg(long, value_name = "N")]
        snapshot_every: Option<usize>,
    },
    /// Validate the adjoint gradient against central finite differences.
    GradientCheck {
        /// Number of random probe directions.
        #[arg(long, default_value_t = 3)]
        directions: usize,
    },
    /// Scan both misfits against a time-shifted copy of the pulse.
    MisfitScan {
        /// Largest shift in seconds (scan runs symmetric about zero).
        #[arg(long, default_value_t = 3.0e-6)]
        max_shift: f64,
        /// Shift increment in seconds (defaults to the solver time step).
        #[arg(long)]
        step: Option<f64>,
    },
}

fn parse_misfit(s: &str) -> Result<MisfitKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "l2" => Ok(MisfitKind::L2),
        "w2" => Ok(MisfitKind::W2),
        other => Err(Error::InvalidArgument(format!(
            "unknown misfit '{other}' (expected l2 or w2)"
        ))),
    }
}

fn assemble_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.specimen {
        cfg.specimen = s;
    }
    if let Some(s) = cli.scale {
        cfg.scale = s;
    }
    if let Some(m) = cli.misfit {
        cfg.misfit = m;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch(_) => "shape_mismatch",
        Error::Config(_) => "config",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Format(_) => "format",
        Error::Instability(_) => "instability",
        Error::Transform(_) => "transform",
        Error::TapeMismatch(_) => "tape_mismatch",
        Error::Optimizer(_) => "optimizer",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn dataset_stem(cfg: &ExperimentConfig) -> PathBuf {
    // Observed data is misfit-independent, so its stem drops that part.
    cfg.output_dir
        .join(format!("{}_s{:.2}_dataset", cfg.specimen.label(), cfg.scale))
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::InvalidArgument("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))?;
    }
    let mut cfg = assemble_config(cli)?;

    match &cli.command {
        Command::Specimen => {
            let scene = build_scene(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let stem = cfg
                .output_dir
                .join(format!("{}_s{:.2}_model_true", cfg.specimen.label(), cfg.scale));
            write_field_raw(&stem, scene.truth.field())?;
            println!(
                "{}",
                json!({
                    "specimen": cfg.specimen.label(),
                    "scale": cfg.scale,
                    "nx": scene.sim.grid.nx,
                    "ny": scene.sim.grid.ny,
                    "h": scene.sim.grid.h,
                    "model": stem_with_suffix(&stem, ".f64"),
                })
            );
        }
        Command::Forward => {
            let (scene, dataset) = run_forward_experiment(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let stem = dataset_stem(&cfg);
            dataset.save(&stem)?;
            println!(
                "{}",
                json!({
                    "specimen": cfg.specimen.label(),
                    "scale": cfg.scale,
                    "emitters": dataset.gathers.len(),
                    "receivers": scene.acquisition.n_receivers(),
                    "steps": scene.sim.time.n_steps,
                    "dt": scene.sim.time.dt,
                    "dataset": stem_with_suffix(&stem, ".f32"),
                })
            );
        }
        Command::Invert { dataset, iterations, snapshot_every } => {
            if let Some(n) = iterations {
                cfg.optimizer.max_iterations = *n;
            }
            if let Some(k) = snapshot_every {
                cfg.snapshot_every = *k;
            }
            let scene = build_scene(&cfg)?;
            let data = match dataset {
                Some(stem) => ShotDataset::load(stem)?,
                None => fwi_core::simulate_dataset(&cfg, &scene)?,
            };
            let outcome = run_inversion_on_dataset(&cfg, scene, &data)?;
            println!("{}", serde_json::to_string_pretty(&outcome.report)?);
        }
        Command::GradientCheck { directions } => {
            let report = gradient_check(cfg.misfit, &cfg.w2, cfg.seed, *directions)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let csv = cfg.output_dir.join(format!(
                "gradient_check_{}_seed{}.csv",
                fwi_core::experiment::misfit_label(cfg.misfit),
                cfg.seed
            ));
            write_gradient_check_csv(&csv, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.pass {
                return Err(Error::Optimizer(format!(
                    "gradient check failed: worst relative error {:.3e} exceeds {:.1e}",
                    report
                        .rows
                        .iter()
                        .map(|r| r.rel_error)
                        .fold(0.0, f64::max),
                    report.tolerance
                )));
            }
        }
        Command::MisfitScan { max_shift, step } => {
            let scene = build_scene(&cfg)?;
            let dt = step.unwrap_or(scene.sim.time.dt);
            let rows = misfit_shift_scan(&cfg.pulse, &cfg.w2, dt, *max_shift)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let csv = cfg.output_dir.join("misfit_shift_scan.csv");
            write_shift_scan_csv(&csv, &rows)?;
            let l2: Vec<f64> = rows.iter().map(|r| r.l2).collect();
            let w2: Vec<f64> = rows.iter().map(|r| r.w2).collect();
            let summary = json!({
                "samples": rows.len(),
                "step": dt,
                "max_shift": max_shift,
                "l2_minima": count_strict_minima(&l2, 1e-6),
                "w2_minima": count_strict_minima(&w2, 1e-6),
                "csv": csv,
            });
            write_json(&cfg.output_dir.join("misfit_shift_scan.json"), &summary)?;
            println!("{summary}");
        }
    }
    Ok(())
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("{}", json!({ "error": e.to_string(), "kind": error_kind(&e) }));
        std::process::exit(1);
    }
}
