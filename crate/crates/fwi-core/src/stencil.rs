//! High-order central-difference stencils for the Laplacian.
//!
//! For radius `n` the coefficients are the unique symmetric second-derivative
//! weights of maximal order (exact on monomials up to degree `2n+1` on
//! integer nodes). The closed form for the one-sided weights is
//!
//! ```text
//! c_k = 2 * (-1)^(k+1) * (n!)^2 / (k^2 * (n-k)! * (n+k)!),   k = 1..n
//! c_0 = -2 * sum(c_k)
//! ```
//!
//! whose factorials stay below 2^53 for `n <= 8`, so the evaluation is exact
//! in `f64`.

use crate::error::{Error, Result};
use crate::grid::Field2D;

/// Symmetric second-derivative stencil of radius `n`.
///
/// `coefficients[n + k]` holds `c_k` for `k = -n..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilSpec {
    radius: usize,
    coefficients: Vec<f64>,
}

impl StencilSpec {
    pub fn radius(&self) -> usize {
        self.radius
    }

    /// All `2n+1` coefficients, `c_{-n}` first.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Center coefficient `c_0`.
    pub fn center(&self) -> f64 {
        self.coefficients[self.radius]
    }

    /// One-sided coefficients `c_1..c_n`.
    pub fn side(&self) -> &[f64] {
        &self.coefficients[self.radius + 1..]
    }

    /// `sum(|c_i|)` over the whole stencil; drives the stability bound.
    pub fn abs_sum(&self) -> f64 {
        self.coefficients.iter().map(|c| c.abs()).sum()
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Maximal-order symmetric second-derivative coefficients for `1 <= radius <= 8`.
pub fn stencil_coefficients(radius: usize) -> Result<StencilSpec> {
    if !(1..=8).contains(&radius) {
        return Err(Error::InvalidArgument(format!(
            "stencil radius must lie in 1..=8, got {radius}"
        )));
    }
    let n = radius;
    let nfact2 = factorial(n) * factorial(n);
    let mut side = Vec::with_capacity(n);
    for k in 1..=n {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        let c = 2.0 * sign * nfact2 / ((k * k) as f64 * factorial(n - k) * factorial(n + k));
        side.push(c);
    }
    let c0 = -2.0 * side.iter().sum::<f64>();
    let mut coefficients = Vec::with_capacity(2 * n + 1);
    coefficients.extend(side.iter().rev());
    coefficients.push(c0);
    coefficients.extend(side.iter());
    Ok(StencilSpec { radius: n, coefficients })
}

/// Cross-stencil Laplacian: per-axis second differences summed and divided by
/// `h^2`. Cells within `radius` of the array edge read zero for the missing
/// neighbors (they sit inside the absorber band in any real simulation).
pub fn laplacian(u: &Field2D, stencil: &StencilSpec, h: f64) -> Result<Field2D> {
    let grid = u.grid();
    let n = stencil.radius;
    if grid.nx < 2 * n + 1 || grid.ny < 2 * n + 1 {
        return Err(Error::ShapeMismatch(format!(
            "laplacian needs at least {0}x{0} cells for radius {n}, got {1}x{2}",
            2 * n + 1,
            grid.nx,
            grid.ny
        )));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {h}")));
    }
    let inv_h2 = 1.0 / (h * h);
    let c = &stencil.coefficients;
    let vals = u.values();
    let (nx, ny) = (grid.nx, grid.ny);
    let mut out = Field2D::zeros(grid);
    let out_vals = out.values_mut();
    for j in 0..ny {
        for i in 0..nx {
            let mut acc = 0.0;
            for (t, ck) in c.iter().enumerate() {
                let dx = t as isize - n as isize;
                let ii = i as isize + dx;
                if (0..nx as isize).contains(&ii) {
                    acc += ck * vals[j * nx + ii as usize];
                }
                let jj = j as isize + dx;
                if (0..ny as isize).contains(&jj) {
                    acc += ck * vals[jj as usize * nx + i];
                }
            }
            out_vals[j * nx + i] = acc * inv_h2;
        }
    }
    Ok(out)
}
