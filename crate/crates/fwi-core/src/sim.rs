//! Forward time-marching of the 2-D acoustic wave equation and its exact
//! backward replay.
//!
//! The scheme is the classic explicit two-step update
//!
//! ```text
//! u_next = kappa * lap(u) + 2 u - u_prev        (interior)
//! ```
//!
//! with `kappa = (theta * dt / h)^2`, damped inside the absorber band, and
//! source samples added directly to `u_next` at the source cells. Any `dt^2`
//! factor on the source is regarded as absorbed into the source amplitude:
//! the field responds linearly, so this choice only rescales traces and
//! keeps typical field magnitudes near the source amplitude.
//!
//! Backward replay inverts the same recursion. The interior update is
//! time-symmetric, so running it with the roles of "previous" and "next"
//! exchanged recovers earlier fields exactly — except near the absorber,
//! whose damping is not reversible. During the forward pass the solver
//! therefore records the field on a halo band (width = stencil radius) just
//! inside the physical region at every step; overwriting those cells while
//! stepping backward seals the interior recursion off from the absorber and
//! makes the replay exact there.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::absorber::{edge_distance, AbsorberSpec};
use crate::error::{Error, Result};
use crate::grid::{Cell, Field2D, GridSpec, SpeedModel, TimeAxis};
use crate::kernel::buffers::FieldBuf;
use crate::kernel::Stepper;
use crate::signal::Trace;
use crate::stencil::StencilSpec;

/// Everything a simulation run needs besides the model and the sources.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub grid: GridSpec,
    pub time: TimeAxis,
    pub stencil: StencilSpec,
    pub absorber: AbsorberSpec,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.absorber.validate()?;
        let r = self.stencil.radius();
        let w = self.absorber.width;
        if w != 0 && w < r {
            return Err(Error::Config(format!(
                "absorber width {w} is smaller than the stencil radius {r} \
                 (use width 0 for a sealed domain)"
            )));
        }
        let support = 2 * r + 1;
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        if nx < 2 * w + support || ny < 2 * w + support {
            return Err(Error::Config(format!(
                "physical region of a {nx}x{ny} grid with a {w}-cell absorber \
                 cannot hold the stencil support ({support} cells per axis)"
            )));
        }
        Ok(())
    }

    /// True when the cell lies outside the absorber band.
    pub fn is_physical(&self, cell: Cell) -> bool {
        cell.i < self.grid.nx
            && cell.j < self.grid.ny
            && edge_distance(&self.grid, cell.i, cell.j) >= self.absorber.width
    }

    /// True when the cell is a physical cell whose whole stencil support also
    /// lies in the physical region (i.e. not on the replay halo band).
    pub fn is_strict_interior(&self, cell: Cell) -> bool {
        cell.i < self.grid.nx
            && cell.j < self.grid.ny
            && edge_distance(&self.grid, cell.i, cell.j)
                >= self.absorber.width + self.stencil.radius()
    }

    /// Flat indices of the halo band — the outermost `radius` rings of the
    /// physical region — in a fixed row-major order.
    pub fn halo_cells(&self) -> Vec<usize> {
        let w = self.absorber.width;
        let r = self.stencil.radius();
        let mut cells = Vec::new();
        for j in 0..self.grid.ny {
            for i in 0..self.grid.nx {
                let d = edge_distance(&self.grid, i, j);
                if d >= w && d < w + r {
                    cells.push(self.grid.idx(i, j));
                }
            }
        }
        cells
    }

    fn check_cell(&self, cell: Cell, role: &str) -> Result<()> {
        if cell.i >= self.grid.nx || cell.j >= self.grid.ny {
            return Err(Error::InvalidArgument(format!(
                "{role} cell ({}, {}) is outside the {}x{} grid",
                cell.i, cell.j, self.grid.nx, self.grid.ny
            )));
        }
        if !self.is_physical(cell) {
            return Err(Error::InvalidArgument(format!(
                "{role} cell ({}, {}) lies inside the absorber band",
                cell.i, cell.j
            )));
        }
        Ok(())
    }
}

/// Additive point sources: one excitation trace per cell.
#[derive(Debug, Clone)]
pub struct SourceInjection {
    entries: Vec<(Cell, Trace)>,
}

impl SourceInjection {
    pub fn new(entries: Vec<(Cell, Trace)>) -> Self {
        SourceInjection { entries }
    }

    pub fn single(cell: Cell, trace: Trace) -> Self {
        SourceInjection {
            entries: vec![(cell, trace)],
        }
    }

    pub fn entries(&self) -> &[(Cell, Trace)] {
        &self.entries
    }

    fn validate(&self, cfg: &SimConfig) -> Result<()> {
        for (cell, trace) in &self.entries {
            cfg.check_cell(*cell, "source")?;
            if trace.len() != cfg.time.n_steps {
                return Err(Error::InvalidArgument(format!(
                    "source trace has {} samples, time axis has {} steps",
                    trace.len(),
                    cfg.time.n_steps
                )));
            }
            let dt = cfg.time.dt;
            if (trace.dt() - dt).abs() > 1e-9 * dt {
                return Err(Error::InvalidArgument(format!(
                    "source trace dt {} does not match the time axis dt {}",
                    trace.dt(),
                    dt
                )));
            }
        }
        Ok(())
    }
}

/// Recorded receiver traces for one emission: `traces[r][k]` is the field at
/// receiver `r` and time level `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotGather {
    pub dt: f64,
    pub traces: Vec<Vec<f64>>,
}

impl ShotGather {
    pub fn n_receivers(&self) -> usize {
        self.traces.len()
    }

    pub fn n_steps(&self) -> usize {
        self.traces.first().map_or(0, Vec::len)
    }

    pub fn check_aligned(&self, other: &ShotGather) -> Result<()> {
        if self.n_receivers() != other.n_receivers()
            || self.n_steps() != other.n_steps()
            || (self.dt - other.dt).abs() > 1e-9 * self.dt.abs()
        {
            return Err(Error::ShapeMismatch(format!(
                "gathers are misaligned: {}x{} @ {} vs {}x{} @ {}",
                self.n_receivers(),
                self.n_steps(),
                self.dt,
                other.n_receivers(),
                other.n_steps(),
                other.dt
            )));
        }
        Ok(())
    }
}

/// Largest `dt` for which the explicit scheme stays non-growing on a
/// homogeneous worst-case medium: `dt <= (h / c_max) * 2 / sqrt(2 * sum|c_i|)`
/// (von Neumann bound for the 2-D cross stencil; the worst mode alternates
/// sign at every node along both axes).
pub fn max_stable_dt(theta: &SpeedModel, h: f64, stencil: &StencilSpec) -> f64 {
    (h / theta.max_speed()) * 2.0 / (2.0 * stencil.abs_sum()).sqrt()
}

fn build_stepper(cfg: &SimConfig, theta: &SpeedModel, damped: bool) -> Result<Stepper> {
    if theta.grid() != cfg.grid {
        return Err(Error::ShapeMismatch(format!(
            "speed model grid {}x{} does not match the simulation grid {}x{}",
            theta.grid().nx,
            theta.grid().ny,
            cfg.grid.nx,
            cfg.grid.ny
        )));
    }
    let sigma = if damped && cfg.absorber.width > 0 {
        Some(cfg.absorber.sigma_field(&cfg.grid, theta.max_speed()))
    } else {
        None
    };
    Stepper::new(
        cfg.grid.nx,
        cfg.grid.ny,
        cfg.grid.h,
        cfg.time.dt,
        &cfg.stencil,
        theta.field().values(),
        sigma.as_deref(),
    )
}

/// Single update of the scheme as a standalone operation: advances
/// `(u_prev, u_curr)` one level and adds the source field to the result.
pub fn step(
    u_prev: &Field2D,
    u_curr: &Field2D,
    theta: &SpeedModel,
    src: &Field2D,
    cfg: &SimConfig,
) -> Result<Field2D> {
    cfg.validate()?;
    u_prev.check_same_grid(u_curr, "step")?;
    u_prev.check_same_grid(src, "step source")?;
    let stepper = build_stepper(cfg, theta, true)?;
    let mut next = u_prev.values().to_vec();
    let stats = stepper.step_into(&mut next, u_curr.values());
    for (n, s) in next.iter_mut().zip(src.values()) {
        *n += *s;
    }
    if !stats.all_finite {
        return Err(stepper.instability_error(0));
    }
    Field2D::from_values(cfg.grid, next)
}

/// Step-by-step marching engine. `current()` is the field at level `k()`,
/// starting from `u_0 = u_{-1} = 0`; `advance()` moves one level forward,
/// adding the source samples of the level being left.
#[derive(Debug)]
pub struct MarchingSim {
    stepper: Stepper,
    prev: FieldBuf,
    curr: FieldBuf,
    k: usize,
    n_steps: usize,
    sources: Vec<(usize, Vec<f64>)>,
}

impl MarchingSim {
    pub fn new(
        cfg: &SimConfig,
        theta: &SpeedModel,
        sources: &SourceInjection,
        damped: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        sources.validate(cfg)?;
        let stepper = build_stepper(cfg, theta, damped)?;
        let n = cfg.grid.n_cells();
        let sources = sources
            .entries
            .iter()
            .map(|(cell, trace)| (cfg.grid.idx(cell.i, cell.j), trace.samples().to_vec()))
            .collect();
        Ok(MarchingSim {
            stepper,
            prev: FieldBuf::zeroed(n),
            curr: FieldBuf::zeroed(n),
            k: 0,
            n_steps: cfg.time.n_steps,
            sources,
        })
    }

    /// Time level of `current()`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Field at level `k`.
    pub fn current(&self) -> &[f64] {
        &self.curr
    }

    /// Field at level `k - 1` (zeros at the start).
    pub fn previous(&self) -> &[f64] {
        &self.prev
    }

    /// Advances to level `k + 1`. Must not be called past the last level.
    pub fn advance(&mut self) -> Result<()> {
        debug_assert!(self.k + 1 < self.n_steps, "marched past the time axis");
        let stats = self.stepper.step_into(&mut self.prev, &self.curr);
        if !stats.all_finite {
            return Err(self.stepper.instability_error(self.k + 1));
        }
        for (idx, samples) in &self.sources {
            self.prev[*idx] += samples[self.k];
        }
        std::mem::swap(&mut self.prev, &mut self.curr);
        self.k += 1;
        Ok(())
    }

    /// Hands back the final two fields as `(u_{n-2}, u_{n-1})`, releasing
    /// them from the live-buffer count.
    fn into_final_pair(self) -> (Vec<f64>, Vec<f64>) {
        (self.prev.into_vec(), self.curr.into_vec())
    }
}

/// Per-step record of the halo band plus the final two snapshots — everything
/// backward replay needs, at a memory cost of `perimeter * radius` cells per
/// step instead of the full space-time volume.
#[derive(Debug, Clone)]
pub struct BoundaryTape {
    grid: GridSpec,
    radius: usize,
    absorber_width: usize,
    n_steps: usize,
    halo: Vec<usize>,
    /// Frame-major: `frames[k * halo.len() + m]` is `u_k` at `halo[m]`.
    frames: Vec<f64>,
    final_prev: Vec<f64>,
    final_curr: Vec<f64>,
    fingerprint: u64,
}

impl BoundaryTape {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn halo_cell_count(&self) -> usize {
        self.halo.len()
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    #[cfg(test)]
    fn frame(&self, k: usize) -> &[f64] {
        let n = self.halo.len();
        &self.frames[k * n..(k + 1) * n]
    }
}

fn fnv1a_u64(state: u64, word: u64) -> u64 {
    let mut s = state;
    for byte in word.to_le_bytes() {
        s ^= byte as u64;
        s = s.wrapping_mul(0x100_0000_01b3);
    }
    s
}

/// Order-sensitive digest binding a tape to (config, model, sources).
fn run_fingerprint(cfg: &SimConfig, theta: &SpeedModel, sources: &SourceInjection) -> u64 {
    let mut s = 0xcbf2_9ce4_8422_2325;
    s = fnv1a_u64(s, cfg.grid.nx as u64);
    s = fnv1a_u64(s, cfg.grid.ny as u64);
    s = fnv1a_u64(s, cfg.grid.h.to_bits());
    s = fnv1a_u64(s, cfg.time.dt.to_bits());
    s = fnv1a_u64(s, cfg.time.n_steps as u64);
    s = fnv1a_u64(s, cfg.stencil.radius() as u64);
    s = fnv1a_u64(s, cfg.absorber.width as u64);
    s = fnv1a_u64(s, cfg.absorber.exponent as u64);
    s = fnv1a_u64(s, cfg.absorber.target_reflection.to_bits());
    for &v in theta.field().values() {
        s = fnv1a_u64(s, v.to_bits());
    }
    for (cell, trace) in sources.entries() {
        s = fnv1a_u64(s, cell.i as u64);
        s = fnv1a_u64(s, cell.j as u64);
        for &v in trace.samples() {
            s = fnv1a_u64(s, v.to_bits());
        }
    }
    s
}

/// Runs a full forward simulation, sampling every receiver at every time
/// level. With `record_tape`, also returns the boundary tape needed for
/// backward replay. Only two full-field buffers are live while marching.
pub fn simulate_forward(
    cfg: &SimConfig,
    theta: &SpeedModel,
    sources: &SourceInjection,
    receivers: &[Cell],
    record_tape: bool,
) -> Result<(ShotGather, Option<BoundaryTape>)> {
    cfg.validate()?;
    for &r in receivers {
        cfg.check_cell(r, "receiver")?;
    }
    let rec_idx: Vec<usize> = receivers.iter().map(|c| cfg.grid.idx(c.i, c.j)).collect();
    let n_steps = cfg.time.n_steps;

    let mut sim = MarchingSim::new(cfg, theta, sources, true)?;
    let halo = record_tape.then(|| cfg.halo_cells());
    let mut frames = halo
        .as_ref()
        .map(|h| Vec::with_capacity(h.len() * n_steps));
    let mut traces = vec![Vec::with_capacity(n_steps); rec_idx.len()];

    for k in 0..n_steps {
        let u = sim.current();
        for (trace, &idx) in traces.iter_mut().zip(&rec_idx) {
            trace.push(u[idx]);
        }
        if let (Some(frames), Some(halo)) = (frames.as_mut(), halo.as_ref()) {
            frames.extend(halo.iter().map(|&idx| u[idx]));
        }
        if k + 1 < n_steps {
            sim.advance()?;
        }
    }

    let gather = ShotGather {
        dt: cfg.time.dt,
        traces,
    };
    let tape = if record_tape {
        let fingerprint = run_fingerprint(cfg, theta, sources);
        let (final_prev, final_curr) = sim.into_final_pair();
        Some(BoundaryTape {
            grid: cfg.grid,
            radius: cfg.stencil.radius(),
            absorber_width: cfg.absorber.width,
            n_steps,
            halo: halo.unwrap(),
            frames: frames.unwrap(),
            final_prev,
            final_curr,
            fingerprint,
        })
    } else {
        None
    };
    Ok((gather, tape))
}

/// Backward replay of a recorded forward run. After construction `top()` is
/// `u(T)` and `bottom()` is `u(T - dt)`; each `step_back()` recovers one
/// earlier level until `bottom()` is `u(0)`.
#[derive(Debug)]
pub struct ReverseReplay {
    stepper: Stepper,
    /// Field at level `pos + 1`.
    top: FieldBuf,
    /// Field at level `pos`.
    bottom: FieldBuf,
    pos: usize,
    sources: Vec<(usize, Vec<f64>)>,
    halo: Vec<usize>,
    frames: Vec<f64>,
}

impl ReverseReplay {
    pub fn new(
        cfg: &SimConfig,
        theta: &SpeedModel,
        tape: BoundaryTape,
        sources: &SourceInjection,
    ) -> Result<Self> {
        cfg.validate()?;
        sources.validate(cfg)?;
        if tape.fingerprint != run_fingerprint(cfg, theta, sources) {
            return Err(Error::TapeMismatch(
                "boundary tape was recorded for a different configuration, model, or sources"
                    .into(),
            ));
        }
        // The reverse recursion inverts the *undamped* interior update; the
        // absorber cells are reconstructed from the tape instead.
        let stepper = build_stepper(cfg, theta, false)?;
        let sources = sources
            .entries
            .iter()
            .map(|(cell, trace)| (cfg.grid.idx(cell.i, cell.j), trace.samples().to_vec()))
            .collect();
        Ok(ReverseReplay {
            stepper,
            top: FieldBuf::from_vec(tape.final_curr),
            bottom: FieldBuf::from_vec(tape.final_prev),
            pos: tape.n_steps - 2,
            sources,
            halo: tape.halo,
            frames: tape.frames,
        })
    }

    /// Field at level `pos() + 1`.
    pub fn top(&self) -> &[f64] {
        &self.top
    }

    /// Field at level `pos()`.
    pub fn bottom(&self) -> &[f64] {
        &self.bottom
    }

    /// Time level of `bottom()`.
    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Recovers level `pos - 1`; returns `false` once `bottom()` is `u(0)`.
    pub fn step_back(&mut self) -> Result<bool> {
        if self.pos == 0 {
            return Ok(false);
        }
        // Inverting u_{m+1} = kappa lap(u_m) + 2 u_m - u_{m-1} + s_m for
        // u_{m-1} gives the same kernel with top playing the "previous"
        // role, plus the very source samples the forward step consumed.
        let stats = self.stepper.step_into(&mut self.top, &self.bottom);
        if !stats.all_finite {
            return Err(self.stepper.instability_error(self.pos - 1));
        }
        for (idx, samples) in &self.sources {
            self.top[*idx] += samples[self.pos];
        }
        let n = self.halo.len();
        let frame = &self.frames[(self.pos - 1) * n..self.pos * n];
        for (&idx, &v) in self.halo.iter().zip(frame) {
            self.top[idx] = v;
        }
        std::mem::swap(&mut self.top, &mut self.bottom);
        self.pos -= 1;
        Ok(true)
    }

    pub(crate) fn stepper(&self) -> &Stepper {
        &self.stepper
    }
}

#[derive(Serialize, Deserialize)]
struct TapeSidecar {
    n_steps: usize,
    halo_cell_count: usize,
    radius: usize,
    nx: usize,
    ny: usize,
    h_m: f64,
    absorber_width: usize,
    fingerprint: u64,
    dtype: String,
}

/// Writes `base.json` + `base.bin` (f32le: all frames, then the final two
/// snapshots). Storage rounds to f32; the in-memory tape stays f64.
pub fn save_tape(base: &Path, tape: &BoundaryTape) -> Result<()> {
    let sidecar = TapeSidecar {
        n_steps: tape.n_steps,
        halo_cell_count: tape.halo.len(),
        radius: tape.radius,
        nx: tape.grid.nx,
        ny: tape.grid.ny,
        h_m: tape.grid.h,
        absorber_width: tape.absorber_width,
        fingerprint: tape.fingerprint,
        dtype: "f32le".into(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(base.with_extension("json"), json)?;
    let mut payload = Vec::with_capacity(
        4 * (tape.frames.len() + tape.final_prev.len() + tape.final_curr.len()),
    );
    for v in tape
        .frames
        .iter()
        .chain(&tape.final_prev)
        .chain(&tape.final_curr)
    {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(base.with_extension("bin"))?;
    f.write_all(&payload)?;
    Ok(())
}

/// Reads a tape written by [`save_tape`]. The halo geometry is recomputed
/// from the stored grid, absorber width, and radius.
pub fn load_tape(base: &Path) -> Result<BoundaryTape> {
    let json = std::fs::read_to_string(base.with_extension("json"))?;
    let sidecar: TapeSidecar = serde_json::from_str(&json)?;
    if sidecar.dtype != "f32le" {
        return Err(Error::Format(format!(
            "unsupported tape dtype {:?}",
            sidecar.dtype
        )));
    }
    let grid = GridSpec::new(sidecar.nx, sidecar.ny, sidecar.h_m)?;
    let cfg_like = SimConfig {
        grid,
        time: TimeAxis::new(1.0, sidecar.n_steps.max(2))?,
        stencil: crate::stencil::stencil_coefficients(sidecar.radius)?,
        absorber: AbsorberSpec {
            width: sidecar.absorber_width,
            ..AbsorberSpec::default()
        },
    };
    let halo = cfg_like.halo_cells();
    if halo.len() != sidecar.halo_cell_count {
        return Err(Error::Format(format!(
            "tape sidecar claims {} halo cells, geometry gives {}",
            sidecar.halo_cell_count,
            halo.len()
        )));
    }
    let n_cells = grid.n_cells();
    let expected = sidecar.n_steps * halo.len() + 2 * n_cells;
    let mut payload = Vec::new();
    std::fs::File::open(base.with_extension("bin"))?.read_to_end(&mut payload)?;
    if payload.len() != 4 * expected {
        return Err(Error::Format(format!(
            "tape payload holds {} bytes, expected {}",
            payload.len(),
            4 * expected
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let frames: Vec<f64> = values.by_ref().take(sidecar.n_steps * halo.len()).collect();
    let final_prev: Vec<f64> = values.by_ref().take(n_cells).collect();
    let final_curr: Vec<f64> = values.collect();
    Ok(BoundaryTape {
        grid,
        radius: sidecar.radius,
        absorber_width: sidecar.absorber_width,
        n_steps: sidecar.n_steps,
        halo,
        frames,
        final_prev,
        final_curr,
        fingerprint: sidecar.fingerprint,
    })
}
