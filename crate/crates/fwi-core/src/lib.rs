//! Core algorithms for 2-D acoustic full-waveform inversion: finite
//! difference wave simulation, misfit functionals with adjoint sources,
//! low-memory adjoint-state gradients, and bound-constrained quasi-Newton
//! model updates.

pub mod absorber;
pub mod acquisition;
pub mod error;
pub mod experiment;
pub mod gradient;
pub mod grid;
pub mod kernel;
pub mod misfit;
pub mod optim;
pub mod signal;
pub mod sim;
pub mod specimen;
pub mod stencil;

pub use absorber::AbsorberSpec;
pub use acquisition::{build_acquisition, AcquisitionGeometry, ArrayParams};
pub use error::{Error, Result};
pub use experiment::{
    build_scene, capped_optimizer, count_strict_minima, dataset_shots, gradient_check,
    misfit_shift_scan, run_forward_experiment, run_inversion_experiment,
    run_inversion_on_dataset, simulate_dataset, DatasetMeta, ExperimentConfig,
    GradientCheckReport, InversionOutcome, InversionReport, PulseParams, Scene, ShiftScanRow,
    ShotDataset,
};
pub use gradient::{
    adjoint_simulate, shot_gradient, total_gradient, GradientResult, PassTimings, ShotDefinition,
};
pub use grid::{Cell, Field2D, GridSpec, SpeedModel, TimeAxis};
pub use misfit::{
    discrete_ot_oracle, gather_misfit, l2_adjoint_source, l2_misfit, pdf_transform, quantile,
    w2_adjoint_source, w2_distance, AdjointSourceGather, MisfitKind, OffsetRule, PdfTrace,
    W2Config,
};
pub use optim::{
    invert, invert_with, lbfgsb_minimize, lbfgsb_minimize_with, InversionSetup, IterationLog,
    Objective, OptimizerConfig,
};
pub use signal::{RickerParams, Trace};
pub use specimen::{build_specimen, MaterialTable, SpecimenGeometry, SpecimenKind};
pub use sim::{
    max_stable_dt, simulate_forward, BoundaryTape, MarchingSim, ReverseReplay, ShotGather,
    SimConfig, SourceInjection,
};
pub use stencil::{laplacian, stencil_coefficients, StencilSpec};
