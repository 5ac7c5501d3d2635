//! Tiled, band-parallel update kernel for the explicit two-step wave scheme.
//!
//! One call to [`Stepper::step_into`] advances the field a single time level:
//!
//! ```text
//! next = (kappa * lap(curr) + 2 * curr - (1 - sigma*dt) * prev) / (1 + sigma*dt)
//! ```
//!
//! where `kappa = (theta * dt / h)^2` per cell and `lap` is the cross-stencil
//! sum (the raw coefficient sum, the `h^-2` factor being folded into `kappa`).
//! The result is written in place over `prev`, so a simulation only ever owns
//! two full-field buffers and rotates them.
//!
//! The grid is cut into 32-row bands processed in parallel; each band is cut
//! into 32-column tiles, and each tile copies its `(tile + 2 * radius)^2`
//! input patch into tile-local storage once before computing, so every input
//! value is read from the shared buffer exactly once per tile. Cells outside
//! the grid read as zero. Band results are combined in band order, which
//! keeps the outcome bitwise independent of the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stencil::StencilSpec;

/// Edge length of the square compute tiles.
pub const TILE: usize = 32;
const MAX_RADIUS: usize = 8;
const PATCH_CAP: usize = (TILE + 2 * MAX_RADIUS) * (TILE + 2 * MAX_RADIUS);

/// Live-buffer bookkeeping for the low-memory contract: every full-field
/// state buffer owned by a running simulation is wrapped in a [`FieldBuf`],
/// and the peak number alive on the current thread can be asserted in tests.
pub mod buffers {
    use std::cell::Cell;

    thread_local! {
        static CURRENT: Cell<usize> = const { Cell::new(0) };
        static PEAK: Cell<usize> = const { Cell::new(0) };
    }

    /// Resets the recorded peak (the current count is left untouched).
    pub fn reset_peak() {
        PEAK.with(|p| p.set(CURRENT.with(Cell::get)));
    }

    /// Highest number of simulation state buffers alive on this thread since
    /// the last [`reset_peak`].
    pub fn peak() -> usize {
        PEAK.with(Cell::get)
    }

    fn acquire() {
        CURRENT.with(|c| {
            let n = c.get() + 1;
            c.set(n);
            PEAK.with(|p| p.set(p.get().max(n)));
        });
    }

    fn release() {
        CURRENT.with(|c| c.set(c.get().saturating_sub(1)));
    }

    /// A counted full-field state buffer. Creation and destruction must
    /// happen on the same thread (simulations own their buffers for their
    /// whole lifetime, so this holds by construction).
    #[derive(Debug)]
    pub struct FieldBuf {
        data: Vec<f64>,
    }

    impl FieldBuf {
        pub fn zeroed(len: usize) -> Self {
            acquire();
            FieldBuf {
                data: vec![0.0; len],
            }
        }

        pub fn from_vec(data: Vec<f64>) -> Self {
            acquire();
            FieldBuf { data }
        }

        /// Releases the buffer from the count and hands the storage back.
        pub fn into_vec(mut self) -> Vec<f64> {
            std::mem::take(&mut self.data)
            // Drop of the now-empty wrapper performs the release.
        }
    }

    impl Drop for FieldBuf {
        fn drop(&mut self) {
            release();
        }
    }

    impl std::ops::Deref for FieldBuf {
        type Target = [f64];
        fn deref(&self) -> &[f64] {
            &self.data
        }
    }

    impl std::ops::DerefMut for FieldBuf {
        fn deref_mut(&mut self) -> &mut [f64] {
            &mut self.data
        }
    }
}

/// Outcome of one kernel application: the largest magnitude written and
/// whether every written value was finite.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub max_abs: f64,
    pub all_finite: bool,
}

/// Precomputed per-cell update coefficients for one (grid, model, dt) triple.
#[derive(Debug)]
pub struct Stepper {
    nx: usize,
    ny: usize,
    radius: usize,
    center: f64,
    side: [f64; MAX_RADIUS],
    /// (theta * dt / h)^2 per cell.
    kappa: Vec<f64>,
    /// (1 - sigma * dt) per cell.
    damp_prev: Vec<f64>,
    /// 1 / (1 + sigma * dt) per cell.
    damp_next: Vec<f64>,
    /// Worst-case Courant number theta_max * dt / h, kept for diagnostics.
    courant: f64,
    courant_limit: f64,
}

impl Stepper {
    /// Builds a stepper. `sigma` is the per-cell damping coefficient (1/s);
    /// pass `None` for an undamped scheme. Fails when the Courant number of
    /// the fastest cell exceeds the stencil's stability limit.
    pub fn new(
        nx: usize,
        ny: usize,
        h: f64,
        dt: f64,
        stencil: &StencilSpec,
        theta: &[f64],
        sigma: Option<&[f64]>,
    ) -> Result<Self> {
        let n_cells = nx * ny;
        if theta.len() != n_cells {
            return Err(Error::ShapeMismatch(format!(
                "speed model has {} cells, grid needs {}",
                theta.len(),
                n_cells
            )));
        }
        if let Some(s) = sigma {
            if s.len() != n_cells {
                return Err(Error::ShapeMismatch(format!(
                    "damping field has {} cells, grid needs {}",
                    s.len(),
                    n_cells
                )));
            }
        }
        let radius = stencil.radius();
        if nx < 2 * radius + 1 || ny < 2 * radius + 1 {
            return Err(Error::ShapeMismatch(format!(
                "grid {nx}x{ny} is smaller than the stencil support ({} per axis)",
                2 * radius + 1
            )));
        }

        let theta_max = theta.iter().cloned().fold(0.0_f64, f64::max);
        let courant = theta_max * dt / h;
        let courant_limit = 2.0 / (2.0 * stencil.abs_sum()).sqrt();
        if courant > courant_limit {
            return Err(Error::Instability(format!(
                "Courant number {courant:.6} exceeds the stable limit {courant_limit:.6} \
                 (theta_max = {theta_max} m/s, dt = {dt} s, h = {h} m)"
            )));
        }

        let mut side = [0.0; MAX_RADIUS];
        side[..radius].copy_from_slice(&stencil.coefficients()[radius + 1..2 * radius + 1]);
        // Cross stencil: the center tap contributes once per axis.
        let center = 2.0 * stencil.center();
        let r = dt / h;
        let kappa = theta.iter().map(|&c| (c * r) * (c * r)).collect();
        let (damp_prev, damp_next) = match sigma {
            Some(s) => (
                s.iter().map(|&v| 1.0 - v * dt).collect(),
                s.iter().map(|&v| 1.0 / (1.0 + v * dt)).collect(),
            ),
            None => (vec![1.0; n_cells], vec![1.0; n_cells]),
        };

        Ok(Stepper {
            nx,
            ny,
            radius,
            center,
            side,
            kappa,
            damp_prev,
            damp_next,
            courant,
            courant_limit,
        })
    }

    pub fn courant(&self) -> f64 {
        self.courant
    }

    pub fn courant_limit(&self) -> f64 {
        self.courant_limit
    }

    /// Formats the standard instability diagnostic for this configuration.
    pub fn instability_error(&self, step: usize) -> Error {
        Error::Instability(format!(
            "field became non-finite at step {step}; Courant number {:.6} (stable limit {:.6})",
            self.courant, self.courant_limit
        ))
    }

    /// Advances one time level, writing the new field over `prev_then_next`
    /// while reading `curr` as the newest field. Each output cell reads its
    /// own previous value before overwriting it, so the rotation is safe.
    pub fn step_into(&self, prev_then_next: &mut [f64], curr: &[f64]) -> StepStats {
        debug_assert_eq!(prev_then_next.len(), self.nx * self.ny);
        debug_assert_eq!(curr.len(), self.nx * self.ny);
        let band_stats: Vec<StepStats> = prev_then_next
            .par_chunks_mut(TILE * self.nx)
            .enumerate()
            .map(|(band, out)| self.step_band(band * TILE, out, curr))
            .collect();
        // Fixed-order fold keeps the reduction independent of scheduling.
        band_stats.iter().fold(
            StepStats {
                max_abs: 0.0,
                all_finite: true,
            },
            |acc, s| StepStats {
                max_abs: acc.max_abs.max(s.max_abs),
                all_finite: acc.all_finite && s.all_finite,
            },
        )
    }

    fn step_band(&self, j0: usize, out: &mut [f64], curr: &[f64]) -> StepStats {
        match self.radius {
            1 => self.step_band_r::<1>(j0, out, curr),
            2 => self.step_band_r::<2>(j0, out, curr),
            3 => self.step_band_r::<3>(j0, out, curr),
            4 => self.step_band_r::<4>(j0, out, curr),
            5 => self.step_band_r::<5>(j0, out, curr),
            6 => self.step_band_r::<6>(j0, out, curr),
            7 => self.step_band_r::<7>(j0, out, curr),
            8 => self.step_band_r::<8>(j0, out, curr),
            _ => unreachable!("stencil radius is validated to 1..=8"),
        }
    }

    fn step_band_r<const R: usize>(&self, j0: usize, out: &mut [f64], curr: &[f64]) -> StepStats {
        let nx = self.nx;
        let rows = out.len() / nx;
        let c0 = self.center;
        let mut cs = [0.0; MAX_RADIUS];
        cs[..R].copy_from_slice(&self.side[..R]);

        let mut patch = [0.0_f64; PATCH_CAP];
        let mut max_abs = 0.0_f64;
        let mut all_finite = true;

        let mut i0 = 0;
        while i0 < nx {
            let tw = TILE.min(nx - i0);
            let pw = tw + 2 * R;
            let ph = rows + 2 * R;

            // Copy the input patch, zero-padding outside the grid.
            for prow in 0..ph {
                let dst = &mut patch[prow * pw..prow * pw + pw];
                let j = (j0 + prow) as isize - R as isize;
                if j < 0 || j as usize >= self.ny {
                    dst.fill(0.0);
                    continue;
                }
                let row = &curr[j as usize * nx..j as usize * nx + nx];
                let lo = i0 as isize - R as isize;
                let hi = (i0 + tw + R).min(nx);
                let src_lo = lo.max(0) as usize;
                let pad_left = (src_lo as isize - lo) as usize;
                dst[..pad_left].fill(0.0);
                dst[pad_left..pad_left + (hi - src_lo)].copy_from_slice(&row[src_lo..hi]);
                dst[pad_left + (hi - src_lo)..].fill(0.0);
            }

            for jr in 0..rows {
                let pbase = (jr + R) * pw + R;
                let obase = jr * nx + i0;
                let gbase = (j0 + jr) * nx + i0;
                for c in 0..tw {
                    let uc = patch[pbase + c];
                    let mut lap = c0 * uc;
                    for t in 1..=R {
                        lap += cs[t - 1]
                            * (patch[pbase + c - t]
                                + patch[pbase + c + t]
                                + patch[pbase + c - t * pw]
                                + patch[pbase + c + t * pw]);
                    }
                    let g = gbase + c;
                    let next = self.damp_next[g]
                        * (self.kappa[g] * lap + 2.0 * uc - self.damp_prev[g] * out[obase + c]);
                    out[obase + c] = next;
                    max_abs = max_abs.max(next.abs());
                    all_finite &= next.is_finite();
                }
            }
            i0 += tw;
        }
        StepStats {
            max_abs,
            all_finite,
        }
    }

    /// Cross-stencil coefficient sum at one cell of `u` (no `h^-2` factor),
    /// reading out-of-grid neighbors as zero. Used by gradient accumulation,
    /// which needs the stencil response of a replayed field cell by cell.
    #[inline]
    pub fn raw_stencil_sum(&self, u: &[f64], i: usize, j: usize) -> f64 {
        let nx = self.nx;
        let ny = self.ny;
        let idx = j * nx + i;
        let mut acc = self.center * u[idx];
        for t in 1..=self.radius {
            let c = self.side[t - 1];
            let mut s = 0.0;
            if i >= t {
                s += u[idx - t];
            }
            if i + t < nx {
                s += u[idx + t];
            }
            if j >= t {
                s += u[idx - t * nx];
            }
            if j + t < ny {
                s += u[idx + t * nx];
            }
            acc += c * s;
        }
        acc
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }
}
