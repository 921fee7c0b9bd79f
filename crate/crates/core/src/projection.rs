//! Parallel-beam mean projections of volumes onto the three anatomical planes.
//!
//! The DRR is the coronal projection: a ray mean through the depth
//! (anterior-posterior) axis, which keeps rendered images in the same
//! `[0, 1]` range as the volume.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{kernels, Real, Tape, Var};
use crate::volume::{StyleTag, Volume, XrayImage};

/// Projection plane, named by the anatomical view it produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    /// Collapses height (superior-inferior).
    Axial,
    /// Collapses depth (anterior-posterior); the frontal chest view.
    Coronal,
    /// Collapses width (left-right).
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Index of the collapsed axis in `(D, H, W)`.
    pub fn axis(self) -> usize {
        match self {
            Plane::Coronal => 0,
            Plane::Axial => 1,
            Plane::Sagittal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

impl std::str::FromStr for Plane {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(format!("unknown plane {other:?} (axial|coronal|sagittal)")),
        }
    }
}

/// Mean of voxels along the plane's collapsed axis, accumulated in 64-bit.
pub fn project_mean(v: &Volume, plane: Plane) -> XrayImage {
    let dims = v.dims();
    let axis = plane.axis();
    let (outer, len, inner) = kernels::axis_split(&dims, axis);
    let wide: Vec<f64> = v.voxels().iter().map(|&x| x as f64).collect();
    let mean = kernels::mean_axis(&wide, outer, len, inner);
    let rest: Vec<usize> = (0..3).filter(|&a| a != axis).map(|a| dims[a]).collect();
    let pixels = mean.iter().map(|&m| (m as f32).clamp(0.0, 1.0)).collect();
    XrayImage::new([rest[0], rest[1]], pixels, StyleTag::Drr)
        .expect("projection of a valid volume is a valid image")
}

/// Digitally reconstructed radiograph: the coronal mean projection.
pub fn drr(v: &Volume) -> XrayImage {
    project_mean(v, Plane::Coronal)
}

/// Differentiable projection of a `[b, c, D, H, W]` node to `[b, c, ., .]`.
pub fn project_node<E: Real>(tape: &mut Tape<E>, v: Var, plane: Plane) -> Result<Var> {
    let shape = tape.shape(v)?;
    contract!(
        shape.len() == 5,
        "project_node expects [batch, channels, D, H, W], got {:?}",
        shape
    );
    tape.mean_along_axis(v, 2 + plane.axis())
}
