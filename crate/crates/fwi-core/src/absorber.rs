//! Sponge boundary layer: a band of cells along the domain edge where the
//! wave update gains a damping term, so outgoing energy decays instead of
//! reflecting off the hard grid boundary.
//!
//! The damping coefficient rises from zero at the inner edge of the band to
//! its maximum at the domain edge following a polynomial profile
//! `sigma(d) = sigma_max * d^p` in normalized depth `d in [0, 1]`.
//! `sigma_max` is chosen so that a plane wave crossing the layer, reflecting
//! off the hard edge, and crossing back is attenuated to a configured target
//! amplitude ratio: integrating the profile gives
//! `sigma_max = (p + 1) * c_ref * ln(1 / R) / (2 * L)` for a layer of
//! physical thickness `L = width * h`.

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Configuration of the absorbing boundary band.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorberSpec {
    /// Band thickness in cells along every domain edge. Zero means a sealed
    /// (perfectly reflecting) domain with no damping anywhere.
    pub width: usize,
    /// Exponent of the polynomial depth profile.
    pub exponent: u32,
    /// Desired round-trip amplitude ratio for a normally incident wave at
    /// the reference speed. Must lie in (0, 1).
    pub target_reflection: f64,
}

impl Default for AbsorberSpec {
    fn default() -> Self {
        AbsorberSpec {
            width: 20,
            exponent: 3,
            target_reflection: 1e-3,
        }
    }
}

impl AbsorberSpec {
    /// A zero-width spec: no damping, hard reflecting edges.
    pub fn sealed() -> Self {
        AbsorberSpec {
            width: 0,
            ..AbsorberSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.exponent == 0 {
            return Err(Error::Config(
                "absorber profile exponent must be at least 1".into(),
            ));
        }
        if !(self.target_reflection > 0.0 && self.target_reflection < 1.0) {
            return Err(Error::Config(format!(
                "absorber target reflection must lie in (0, 1), got {}",
                self.target_reflection
            )));
        }
        Ok(())
    }

    /// Peak damping coefficient (1/s) for a layer tuned to `target_reflection`
    /// at reference speed `c_ref` on spacing `h`.
    pub fn sigma_max(&self, c_ref: f64, h: f64) -> f64 {
        if self.width == 0 {
            return 0.0;
        }
        let thickness = self.width as f64 * h;
        (self.exponent as f64 + 1.0) * c_ref * (-self.target_reflection.ln()) / (2.0 * thickness)
    }

    /// Damping coefficient for a cell whose distance to the nearest domain
    /// edge is `edge_dist` cells. Cells at or beyond `width` are undamped.
    pub fn sigma_at(&self, edge_dist: usize, c_ref: f64, h: f64) -> f64 {
        if self.width == 0 || edge_dist >= self.width {
            return 0.0;
        }
        // Depth grows toward the domain edge: the innermost band cell has
        // the shallowest depth, the edge cell the deepest (d = 1).
        let depth = (self.width - edge_dist) as f64 / self.width as f64;
        self.sigma_max(c_ref, h) * depth.powi(self.exponent as i32)
    }

    /// Per-cell damping coefficients for a whole grid, row-major.
    pub fn sigma_field(&self, grid: &GridSpec, c_ref: f64) -> Vec<f64> {
        let mut sigma = vec![0.0; grid.n_cells()];
        if self.width == 0 {
            return sigma;
        }
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let edge = edge_distance(grid, i, j);
                sigma[grid.idx(i, j)] = self.sigma_at(edge, c_ref, grid.h);
            }
        }
        sigma
    }
}

/// Distance in cells from (i, j) to the nearest domain edge.
pub fn edge_distance(grid: &GridSpec, i: usize, j: usize) -> usize {
    i.min(j).min(grid.nx - 1 - i).min(grid.ny - 1 - j)
}
