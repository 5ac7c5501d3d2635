//! Uniform 2-D grids, scalar fields, speed models, and the field file format.
//!
//! Fields are stored row-major with `y` as the slow axis: the flat index of
//! cell `(i, j)` is `j * nx + i`. In memory everything is `f64`; the on-disk
//! payload is little-endian `f32` beside a small JSON sidecar.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// --- Grid -------------------------------------------------------------------

/// Uniform grid: `nx` by `ny` cells with square spacing `h` in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Cell spacing in metres, identical along both axes.
    pub h: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, h: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Config(format!("grid must be at least 1x1, got {nx}x{ny}")));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Config(format!("grid spacing must be positive and finite, got {h}")));
        }
        Ok(Self { nx, ny, h })
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Flat index of cell `(i, j)`; `i` runs along x (fast), `j` along y (slow).
    #[inline(always)]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }
}

/// A single cell address on a [`GridSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
}

impl Cell {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }
}

// --- Fields -----------------------------------------------------------------

/// Scalar field sampled at every cell of a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Field2D {
    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, values: vec![0.0; grid.n_cells()] }
    }

    pub fn filled(grid: GridSpec, value: f64) -> Self {
        Self { grid, values: vec![value; grid.n_cells()] }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "field needs {} values for a {}x{} grid, got {}",
                grid.n_cells(),
                grid.nx,
                grid.ny,
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Builds a field by evaluating `f(i, j)` at every cell.
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.n_cells());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                values.push(f(i, j));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    #[inline(always)]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    #[inline(always)]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.grid.idx(i, j);
        self.values[idx] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_grid(&self, other: &Field2D, what: &str) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::ShapeMismatch(format!(
                "{what}: grids differ ({}x{} h={} vs {}x{} h={})",
                self.grid.nx, self.grid.ny, self.grid.h, other.grid.nx, other.grid.ny, other.grid.h
            )));
        }
        Ok(())
    }
}

/// `a * x + y`, elementwise over two same-shaped fields.
pub fn field_axpy(a: f64, x: &Field2D, y: &Field2D) -> Result<Field2D> {
    if !a.is_finite() {
        return Err(Error::InvalidArgument(format!("axpy scalar must be finite, got {a}")));
    }
    x.check_same_grid(y, "field_axpy")?;
    let values = x.values.iter().zip(&y.values).map(|(xv, yv)| a * xv + yv).collect();
    Ok(Field2D { grid: x.grid, values })
}

/// Mean squared difference between two same-shaped fields.
pub fn model_mse(a: &Field2D, b: &Field2D) -> Result<f64> {
    a.check_same_grid(b, "model_mse")?;
    let n = a.values.len() as f64;
    let sum: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / n)
}

// --- Speed models -----------------------------------------------------------

/// Sound-speed map in m/s; every value strictly positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedModel {
    field: Field2D,
}

impl SpeedModel {
    pub fn new(field: Field2D) -> Result<Self> {
        if let Some(v) = field.values().iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "speed model values must be positive and finite, found {v}"
            )));
        }
        Ok(Self { field })
    }

    pub fn uniform(grid: GridSpec, speed: f64) -> Result<Self> {
        Self::new(Field2D::filled(grid, speed))
    }

    pub fn field(&self) -> &Field2D {
        &self.field
    }

    pub fn grid(&self) -> GridSpec {
        self.field.grid()
    }

    pub fn max_speed(&self) -> f64 {
        self.field.values().iter().fold(f64::MIN, |m, v| m.max(*v))
    }

    pub fn into_field(self) -> Field2D {
        self.field
    }
}

// --- Time axis ---------------------------------------------------------------

/// Uniform time sampling: `n_steps` samples `dt` seconds apart, starting at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeAxis {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive and finite, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::Config("time axis needs at least one sample".into()));
        }
        Ok(Self { dt, n_steps })
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Time of the last sample, `(n_steps - 1) * dt`.
    pub fn duration(&self) -> f64 {
        (self.n_steps - 1) as f64 * self.dt
    }
}

// --- Field file format --------------------------------------------------------

/// Sidecar describing a field payload. The payload itself is the cell values
/// as little-endian `f32` in storage order, `nx * ny * 4` bytes.
#[derive(Debug, Serialize, Deserialize)]
struct FieldSidecar {
    nx: usize,
    ny: usize,
    h_m: f64,
    dtype: String,
    order: String,
}

const FIELD_DTYPE: &str = "f32le";
const FIELD_ORDER: &str = "row-major-y-slow";

fn sidecar_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Writes `<base>.json` (sidecar) and `<base>.bin` (f32le payload).
pub fn save_field(base: &Path, field: &Field2D) -> Result<()> {
    let (json_path, bin_path) = sidecar_paths(base);
    let grid = field.grid();
    let sidecar = FieldSidecar {
        nx: grid.nx,
        ny: grid.ny,
        h_m: grid.h,
        dtype: FIELD_DTYPE.into(),
        order: FIELD_ORDER.into(),
    };
    fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?)?;
    let mut payload = Vec::with_capacity(field.values().len() * 4);
    for v in field.values() {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(&bin_path)?;
    f.write_all(&payload)?;
    Ok(())
}

/// Loads a field written by [`save_field`]. Values come back as the `f32`
/// payload widened to `f64`.
pub fn load_field(base: &Path) -> Result<Field2D> {
    let (json_path, bin_path) = sidecar_paths(base);
    let sidecar: FieldSidecar = serde_json::from_slice(&fs::read(&json_path)?)?;
    if sidecar.dtype != FIELD_DTYPE {
        return Err(Error::Format(format!(
            "unsupported dtype {:?}, expected {FIELD_DTYPE:?}",
            sidecar.dtype
        )));
    }
    if sidecar.order != FIELD_ORDER {
        return Err(Error::Format(format!(
            "unsupported order {:?}, expected {FIELD_ORDER:?}",
            sidecar.order
        )));
    }
    let grid = GridSpec::new(sidecar.nx, sidecar.ny, sidecar.h_m)?;
    let mut payload = Vec::new();
    fs::File::open(&bin_path)?.read_to_end(&mut payload)?;
    let expect = grid.n_cells() * 4;
    if payload.len() != expect {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {} for a {}x{} grid",
            payload.len(),
            expect,
            grid.nx,
            grid.ny
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Field2D::from_values(grid, values)
}
