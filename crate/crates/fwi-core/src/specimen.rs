//! Synthetic test specimens: parametric sound-speed maps for the imaging
//! experiments.
//!
//! Every specimen is a simple geometric figure (disc, square, star) made of
//! one material, immersed in water, possibly with water-filled holes drilled
//! through it. Shapes are described in physical units at full size and scale
//! down uniformly with the `scale` factor, so the same figure can be reproduced
//! on a desk-sized grid for quick runs. Cells are classified by where their
//! node sits (`x = i*h`, `y = j*h`): no anti-aliasing, each cell gets exactly
//! one speed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field2D, GridSpec, SpeedModel};

/// The six stock specimens, in catalogue order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecimenKind {
    /// Disc of a faster medium inside a slower background (no water at all);
    /// the classic smooth-inclusion benchmark.
    Camembert,
    /// Acrylic square with two side-drilled holes.
    AcrylicSdh2,
    /// Solid steel square.
    SteelSquare,
    /// Steel square with one large central hole.
    SteelHole,
    /// Steel square with two side-drilled holes.
    SteelSdh2,
    /// Five-pointed acrylic star.
    AcrylicStar,
}

impl SpecimenKind {
    pub const ALL: [SpecimenKind; 6] = [
        SpecimenKind::Camembert,
        SpecimenKind::AcrylicSdh2,
        SpecimenKind::SteelSquare,
        SpecimenKind::SteelHole,
        SpecimenKind::SteelSdh2,
        SpecimenKind::AcrylicStar,
    ];

    /// Short lowercase label used in file names and on the command line.
    pub fn label(self) -> &'static str {
        match self {
            SpecimenKind::Camembert => "camembert",
            SpecimenKind::AcrylicSdh2 => "acrylic_sdh2",
            SpecimenKind::SteelSquare => "steel_square",
            SpecimenKind::SteelHole => "steel_hole",
            SpecimenKind::SteelSdh2 => "steel_sdh2",
            SpecimenKind::AcrylicStar => "acrylic_star",
        }
    }
}

impl fmt::Display for SpecimenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SpecimenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        SpecimenKind::ALL
            .into_iter()
            .find(|k| k.label() == norm)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown specimen '{s}' (expected one of: camembert, acrylic_sdh2, \
                     steel_square, steel_hole, steel_sdh2, acrylic_star)"
                ))
            })
    }
}

/// Sound speeds (m/s) assigned to the materials a specimen can be made of.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaterialTable {
    /// Immersion medium and hole filling.
    pub water: f64,
    pub steel: f64,
    pub acrylic: f64,
    /// Background medium of the disc benchmark (it is not immersed in water).
    pub camembert_background: f64,
    /// Disc inclusion speed of the disc benchmark.
    pub camembert_inclusion: f64,
}

impl Default for MaterialTable {
    fn default() -> Self {
        MaterialTable {
            water: 1450.0,
            steel: 5900.0,
            acrylic: 2730.0,
            camembert_background: 3000.0,
            camembert_inclusion: 3600.0,
        }
    }
}

impl MaterialTable {
    /// Fastest speed in the table; sets the stability limit of the solver.
    pub fn max_speed(&self) -> f64 {
        [
            self.water,
            self.steel,
            self.acrylic,
            self.camembert_background,
            self.camembert_inclusion,
        ]
        .into_iter()
        .fold(f64::MIN, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("water", self.water),
            ("steel", self.steel),
            ("acrylic", self.acrylic),
            ("camembert_background", self.camembert_background),
            ("camembert_inclusion", self.camembert_inclusion),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "material speed '{name}' must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Dimensions (metres, at full scale) of the stock figures. All shapes are
/// centred on the domain midpoint and shrink uniformly with the scene scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecimenGeometry {
    /// Radius of the disc inclusion.
    pub camembert_radius: f64,
    /// Side length of the square specimens.
    pub square_side: f64,
    /// Radius of a side-drilled hole.
    pub sdh_radius: f64,
    /// Centre-to-centre distance of the side-drilled hole pair (placed on a
    /// horizontal line through the domain centre, symmetric about it).
    pub sdh_spacing: f64,
    /// Radius of the large central hole.
    pub hole_radius: f64,
    /// Outer vertex radius of the five-pointed star.
    pub star_outer_radius: f64,
    /// Inner (notch) vertex radius of the five-pointed star.
    pub star_inner_radius: f64,
}

impl Default for SpecimenGeometry {
    fn default() -> Self {
        SpecimenGeometry {
            camembert_radius: 30.0e-3,
            square_side: 60.0e-3,
            sdh_radius: 2.0e-3,
            sdh_spacing: 20.0e-3,
            hole_radius: 10.0e-3,
            star_outer_radius: 35.0e-3,
            star_inner_radius: 14.0e-3,
        }
    }
}

impl SpecimenGeometry {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("camembert_radius", self.camembert_radius),
            ("square_side", self.square_side),
            ("sdh_radius", self.sdh_radius),
            ("sdh_spacing", self.sdh_spacing),
            ("hole_radius", self.hole_radius),
            ("star_outer_radius", self.star_outer_radius),
            ("star_inner_radius", self.star_inner_radius),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "specimen dimension '{name}' must be positive and finite, got {v}"
                )));
            }
        }
        if self.star_inner_radius >= self.star_outer_radius {
            return Err(Error::Config(format!(
                "star inner radius {} must be smaller than the outer radius {}",
                self.star_inner_radius, self.star_outer_radius
            )));
        }
        Ok(())
    }

    /// Half-extent of `kind`'s bounding box (metres at full scale): the
    /// largest |offset| from the domain centre that belongs to the figure.
    fn half_extent(&self, kind: SpecimenKind) -> f64 {
        match kind {
            SpecimenKind::Camembert => self.camembert_radius,
            SpecimenKind::AcrylicSdh2 | SpecimenKind::SteelSquare | SpecimenKind::SteelHole
            | SpecimenKind::SteelSdh2 => self.square_side / 2.0,
            SpecimenKind::AcrylicStar => self.star_outer_radius,
        }
    }

    /// Crude upper bound on the figure's outline length (metres at full
    /// scale), used to budget rasterization error in consistency checks.
    pub fn perimeter_bound(&self, kind: SpecimenKind) -> f64 {
        let tau = std::f64::consts::TAU;
        match kind {
            SpecimenKind::Camembert => tau * self.camembert_radius,
            SpecimenKind::SteelSquare => 4.0 * self.square_side,
            SpecimenKind::SteelHole => 4.0 * self.square_side + tau * self.hole_radius,
            SpecimenKind::AcrylicSdh2 | SpecimenKind::SteelSdh2 => {
                4.0 * self.square_side + 2.0 * tau * self.sdh_radius
            }
            // Ten edges, each shorter than the outer radius.
            SpecimenKind::AcrylicStar => 10.0 * self.star_outer_radius,
        }
    }
}

/// Point-in-polygon by even-odd ray crossing; `poly` lists vertices in order.
fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for a in 0..n {
        let (xa, ya) = poly[a];
        let (xb, yb) = poly[(a + 1) % n];
        if (ya > y) != (yb > y) {
            let x_cross = xa + (y - ya) / (yb - ya) * (xb - xa);
            if x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// Vertices of a five-pointed star, one point straight up, alternating outer
/// and inner radii.
fn star_vertices(outer: f64, inner: f64) -> Vec<(f64, f64)> {
    (0..10)
        .map(|k| {
            let r = if k % 2 == 0 { outer } else { inner };
            let angle = std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
            (r * angle.cos(), r * angle.sin())
        })
        .collect()
}

/// Rasterizes a specimen onto `grid` as a sound-speed map.
///
/// `scale` shrinks every dimension uniformly (1.0 = full size). `clearance`
/// is a margin in metres that the figure's bounding box must keep from every
/// domain edge — pass the absorbing-band depth so that no specimen material
/// pokes into the boundary layer; pass 0.0 to allow the full domain.
pub fn build_specimen(
    kind: SpecimenKind,
    grid: GridSpec,
    materials: &MaterialTable,
    geometry: &SpecimenGeometry,
    scale: f64,
    clearance: f64,
) -> Result<SpeedModel> {
    materials.validate()?;
    geometry.validate()?;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("scene scale must be positive, got {scale}")));
    }
    if !(clearance.is_finite() && clearance >= 0.0) {
        return Err(Error::Config(format!("clearance must be non-negative, got {clearance}")));
    }

    let h = grid.h;
    let extent_x = (grid.nx - 1) as f64 * h;
    let extent_y = (grid.ny - 1) as f64 * h;
    let cx = extent_x / 2.0;
    let cy = extent_y / 2.0;

    let half = geometry.half_extent(kind) * scale;
    let fits = half + clearance <= cx + 1e-12 && half + clearance <= cy + 1e-12;
    if !fits {
        return Err(Error::Config(format!(
            "specimen '{}' needs a half-extent of {:.4} m plus {:.4} m clearance, but the \
             domain only offers {:.4} x {:.4} m from centre to edge",
            kind.label(),
            half,
            clearance,
            cx,
            cy
        )));
    }

    let background = if kind == SpecimenKind::Camembert {
        materials.camembert_background
    } else {
        materials.water
    };
    let bulk = match kind {
        SpecimenKind::Camembert => materials.camembert_inclusion,
        SpecimenKind::AcrylicSdh2 | SpecimenKind::AcrylicStar => materials.acrylic,
        SpecimenKind::SteelSquare | SpecimenKind::SteelHole | SpecimenKind::SteelSdh2 => {
            materials.steel
        }
    };
    let hole_fill = materials.water;

    let star = match kind {
        SpecimenKind::AcrylicStar => Some(star_vertices(
            geometry.star_outer_radius * scale,
            geometry.star_inner_radius * scale,
        )),
        _ => None,
    };
    let half_side = geometry.square_side * scale / 2.0;
    let sdh_off = geometry.sdh_spacing * scale / 2.0;
    let sdh_r2 = (geometry.sdh_radius * scale).powi(2);
    let hole_r2 = (geometry.hole_radius * scale).powi(2);
    let disc_r2 = (geometry.camembert_radius * scale).powi(2);

    let field = Field2D::from_fn(grid, |i, j| {
        // Offsets of this cell's node from the domain centre.
        let x = i as f64 * h - cx;
        let y = j as f64 * h - cy;
        let in_bulk = match kind {
            SpecimenKind::Camembert => x * x + y * y <= disc_r2,
            SpecimenKind::AcrylicStar => inside_polygon(star.as_ref().unwrap(), x, y),
            _ => x.abs() <= half_side && y.abs() <= half_side,
        };
        if !in_bulk {
            return background;
        }
        let in_hole = match kind {
            SpecimenKind::SteelHole => x * x + y * y <= hole_r2,
            SpecimenKind::AcrylicSdh2 | SpecimenKind::SteelSdh2 => {
                let left = (x + sdh_off).powi(2) + y * y <= sdh_r2;
                let right = (x - sdh_off).powi(2) + y * y <= sdh_r2;
                left || right
            }
            _ => false,
        };
        if in_hole {
            hole_fill
        } else {
            bulk
        }
    });
    SpeedModel::new(field)
}
