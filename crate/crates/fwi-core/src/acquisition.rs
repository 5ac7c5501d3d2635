//! Transducer-array placement: where the emitting and receiving elements sit
//! on the grid.
//!
//! The rig is two identical linear arrays facing each other across the
//! specimen — one near the bottom edge, one mirrored near the top — centred
//! horizontally. Element positions are laid out in physical units and snapped
//! to the nearest grid node (`x = i*h`), so the same rig scales down with the
//! scene. Every element of both arrays records; only a sparse subset emits.

use serde::{Deserialize, Serialize};

use crate::absorber::edge_distance;
use crate::error::{Error, Result};
use crate::grid::{Cell, GridSpec};

/// Physical description of the two facing arrays (metres at full scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArrayParams {
    /// Elements per array.
    pub n_elements: usize,
    /// Centre-to-centre element spacing.
    pub pitch: f64,
    /// Distance from the bottom domain edge to the bottom array.
    pub standoff: f64,
    /// Face-to-face distance between the two arrays.
    pub separation: f64,
    /// 1-based element numbers (within each array) that fire; both arrays
    /// use the same emitter pattern.
    pub emitter_elements: Vec<usize>,
}

impl Default for ArrayParams {
    fn default() -> Self {
        ArrayParams {
            n_elements: 64,
            pitch: 1.59e-3,
            standoff: 20.0e-3,
            separation: 110.0e-3,
            emitter_elements: vec![1, 16, 32, 48, 64],
        }
    }
}

impl ArrayParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_elements == 0 {
            return Err(Error::Config("arrays need at least one element".into()));
        }
        for (name, v) in [
            ("pitch", self.pitch),
            ("standoff", self.standoff),
            ("separation", self.separation),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "array parameter '{name}' must be positive and finite, got {v}"
                )));
            }
        }
        if self.emitter_elements.is_empty() {
            return Err(Error::Config("at least one emitter element is required".into()));
        }
        for &e in &self.emitter_elements {
            if e == 0 || e > self.n_elements {
                return Err(Error::Config(format!(
                    "emitter element {e} is out of range 1..={}",
                    self.n_elements
                )));
            }
        }
        Ok(())
    }
}

/// Snapped element positions for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    /// Bottom-array elements, left to right.
    pub bottom: Vec<Cell>,
    /// Top-array elements, left to right (same columns as `bottom`).
    pub top: Vec<Cell>,
    /// Firing elements: the chosen bottom elements first, then the same
    /// element numbers of the top array.
    pub emitters: Vec<Cell>,
    /// For each emitter, its index in [`AcquisitionGeometry::receivers`].
    pub emitter_receiver_index: Vec<usize>,
}

impl AcquisitionGeometry {
    /// All recording channels: the whole bottom array followed by the whole
    /// top array.
    pub fn receivers(&self) -> Vec<Cell> {
        let mut all = self.bottom.clone();
        all.extend_from_slice(&self.top);
        all
    }

    pub fn n_receivers(&self) -> usize {
        self.bottom.len() + self.top.len()
    }
}

/// Places both arrays on `grid` at the given scene scale.
///
/// The bottom row index comes from the scaled standoff; the top row is its
/// mirror image (`ny-1 - j_bottom`), which keeps the rig exactly symmetric
/// regardless of rounding. Element columns are shared by both arrays. Every
/// element must sit at least `min_edge_cells` cells away from each domain
/// edge (pass the absorbing-band width so no transducer sits inside the
/// boundary layer).
pub fn build_acquisition(
    grid: GridSpec,
    params: &ArrayParams,
    scale: f64,
    min_edge_cells: usize,
) -> Result<AcquisitionGeometry> {
    params.validate()?;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("scene scale must be positive, got {scale}")));
    }

    let h = grid.h;
    let j_bottom = (params.standoff * scale / h).round() as usize;
    if j_bottom >= grid.ny {
        return Err(Error::Config(format!(
            "bottom array row {j_bottom} falls outside a grid of height {}",
            grid.ny
        )));
    }
    let j_top = grid.ny - 1 - j_bottom;
    if j_top <= j_bottom {
        return Err(Error::Config(format!(
            "arrays overlap: standoff {} m puts both at rows {j_bottom} and {j_top}",
            params.standoff * scale
        )));
    }
    // The snapped face-to-face distance must agree with the requested one to
    // within a cell per face, otherwise the scene description is inconsistent
    // (e.g. standoff + separation exceeding the domain).
    let achieved = (j_top - j_bottom) as f64 * h;
    if (achieved - params.separation * scale).abs() > 2.0 * h {
        return Err(Error::Config(format!(
            "array separation snapped to {achieved:.5} m but {:.5} m was requested; \
             standoff, separation and domain size disagree",
            params.separation * scale
        )));
    }

    let aperture = (params.n_elements - 1) as f64 * params.pitch * scale;
    let extent = (grid.nx - 1) as f64 * h;
    if aperture >= extent {
        return Err(Error::Config(format!(
            "array aperture {aperture:.5} m does not fit a domain {extent:.5} m wide"
        )));
    }
    let x_left = (extent - aperture) / 2.0;
    let columns: Vec<usize> = (0..params.n_elements)
        .map(|k| ((x_left + k as f64 * params.pitch * scale) / h).round() as usize)
        .collect();

    let bottom: Vec<Cell> = columns.iter().map(|&i| Cell::new(i, j_bottom)).collect();
    let top: Vec<Cell> = columns.iter().map(|&i| Cell::new(i, j_top)).collect();

    for cell in bottom.iter().chain(&top) {
        if cell.i >= grid.nx || cell.j >= grid.ny {
            return Err(Error::Config(format!(
                "element at ({}, {}) falls outside the {}x{} grid",
                cell.i, cell.j, grid.nx, grid.ny
            )));
        }
        if edge_distance(&grid, cell.i, cell.j) < min_edge_cells {
            return Err(Error::Config(format!(
                "element at ({}, {}) sits within {min_edge_cells} cells of a domain edge, \
                 inside the absorbing band",
                cell.i, cell.j
            )));
        }
    }

    let mut emitters = Vec::with_capacity(2 * params.emitter_elements.len());
    let mut emitter_receiver_index = Vec::with_capacity(emitters.capacity());
    for &e in &params.emitter_elements {
        emitters.push(bottom[e - 1]);
        emitter_receiver_index.push(e - 1);
    }
    for &e in &params.emitter_elements {
        emitters.push(top[e - 1]);
        emitter_receiver_index.push(params.n_elements + e - 1);
    }

    Ok(AcquisitionGeometry { bottom, top, emitters, emitter_receiver_index })
}
