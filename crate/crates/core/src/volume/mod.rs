//! CT volumes, X-ray images and the datasets built from them.
//!
//! Axis convention for volumes is `(depth, height, width)`: depth runs
//! anterior to posterior, height superior to inferior, width patient left to
//! right. All intensities are normalized attenuation in `[0, 1]`; the
//! Hounsfield mapping `hu = 2000 * v - 1000` is the assumed correspondence
//! but nothing in the pipeline consumes it.

mod dataset;
mod export;
pub(crate) mod format;

pub use dataset::{PairedDataset, PairedSample, UnpairedXraySet};
pub use export::export_slices;
pub use format::{
    load_volume, load_xray, save_volume, save_xray, volume_from_bytes, volume_to_bytes,
    xray_from_bytes, xray_to_bytes, FORMAT_VERSION, VOLUME_MAGIC, XRAY_MAGIC,
};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::phantom::PhantomSpec;
use crate::tensor::{Real, Tensor};

fn check_unit_range(values: &[f32], what: &str) -> Result<()> {
    if let Some((i, v)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(crate::Error::Contract(format!(
            "{what} {i} has value {v}, outside [0, 1]"
        )));
    }
    Ok(())
}

/// Dense `(D, H, W)` voxel grid.
#[derive(Clone, Debug)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f32>,
    meta: Option<Box<PhantomSpec>>,
}

/// Equality compares geometry and voxel values; provenance is ignored.
impl PartialEq for Volume {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.voxels == other.voxels
    }
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        contract!(
            dims.iter().all(|&d| d >= 2),
            "volume dims must all be >= 2, got {:?}",
            dims
        );
        contract!(
            voxels.len() == dims.iter().product::<usize>(),
            "volume dims {:?} need {} voxels, got {}",
            dims,
            dims.iter().product::<usize>(),
            voxels.len()
        );
        check_unit_range(&voxels, "voxel")?;
        Ok(Self {
            dims,
            voxels,
            meta: None,
        })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self> {
        Self::new(dims, vec![value; dims.iter().product()])
    }

    pub fn cube(side: usize, voxels: Vec<f32>) -> Result<Self> {
        Self::new([side; 3], voxels)
    }

    pub fn with_meta(mut self, spec: PhantomSpec) -> Self {
        self.meta = Some(Box::new(spec));
        self
    }

    pub fn meta(&self) -> Option<&PhantomSpec> {
        self.meta.as_deref()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[self.index(d, h, w)]
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum::<f64>() / self.voxels.len() as f64
    }

    /// Per-voxel mean squared difference.
    pub fn mse(&self, other: &Volume) -> Result<f64> {
        contract!(
            self.dims == other.dims,
            "volume dims differ: {:?} vs {:?}",
            self.dims,
            other.dims
        );
        let s: f64 = self
            .voxels
            .iter()
            .zip(&other.voxels)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(s / self.voxels.len() as f64)
    }

    /// `[1, 1, D, H, W]` tensor of the voxels.
    pub fn to_tensor<E: Real>(&self) -> Tensor<E> {
        let [d, h, w] = self.dims;
        Tensor::new(
            vec![1, 1, d, h, w],
            self.voxels.iter().map(|&v| E::lit(v as f64)).collect(),
        )
        .expect("volume length matches dims")
    }

    /// Reads batch element `index` of a `[b, 1, D, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<E: Real>(t: &Tensor<E>, index: usize) -> Result<Self> {
        let s = t.shape();
        contract!(
            s.len() == 5 && s[1] == 1,
            "expected [b, 1, D, H, W], got {:?}",
            s
        );
        contract!(index < s[0], "batch index {} out of range", index);
        let per = s[2] * s[3] * s[4];
        let voxels = t.data()[index * per..(index + 1) * per]
            .iter()
            .map(|&v| (v.as_f64() as f32).clamp(0.0, 1.0))
            .collect();
        Self::new([s[2], s[3], s[4]], voxels)
    }
}

/// Which distribution an X-ray was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleTag {
    /// Rendered by the DRR mapping from a CT volume.
    Drr,
    /// DRR followed by a style shift, standing in for real radiographs.
    Shifted,
}

impl StyleTag {
    pub fn code(self) -> u8 {
        match self {
            StyleTag::Drr => 0,
            StyleTag::Shifted => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(StyleTag::Drr),
            1 => Some(StyleTag::Shifted),
            _ => None,
        }
    }
}

/// Dense `(H, W)` image.
#[derive(Clone, Debug, PartialEq)]
pub struct XrayImage {
    dims: [usize; 2],
    pixels: Vec<f32>,
    style: StyleTag,
}

impl XrayImage {
    pub fn new(dims: [usize; 2], pixels: Vec<f32>, style: StyleTag) -> Result<Self> {
        contract!(
            dims.iter().all(|&d| d >= 1),
            "image dims must be positive, got {:?}",
            dims
        );
        contract!(
            pixels.len() == dims[0] * dims[1],
            "image dims {:?} need {} pixels, got {}",
            dims,
            dims[0] * dims[1],
            pixels.len()
        );
        check_unit_range(&pixels, "pixel")?;
        Ok(Self {
            dims,
            pixels,
            style,
        })
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn style(&self) -> StyleTag {
        self.style
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.dims[1] + col]
    }

    pub fn mse(&self, other: &XrayImage) -> Result<f64> {
        contract!(
            self.dims == other.dims,
            "image dims differ: {:?} vs {:?}",
            self.dims,
            other.dims
        );
        let s: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(s / self.pixels.len() as f64)
    }

    /// `[1, 1, H, W]` tensor of the pixels.
    pub fn to_tensor<E: Real>(&self) -> Tensor<E> {
        Tensor::new(
            vec![1, 1, self.dims[0], self.dims[1]],
            self.pixels.iter().map(|&v| E::lit(v as f64)).collect(),
        )
        .expect("image length matches dims")
    }
}

/// Stacks volumes into a `[b, 1, D, H, W]` tensor.
pub fn stack_volumes<E: Real>(vols: &[&Volume]) -> Result<Tensor<E>> {
    let items: Vec<Tensor<E>> = vols.iter().map(|v| v.to_tensor()).collect();
    Tensor::stack_batch(&items)
}

/// Stacks images into a `[b, 1, H, W]` tensor.
pub fn stack_xrays<E: Real>(imgs: &[&XrayImage]) -> Result<Tensor<E>> {
    let items: Vec<Tensor<E>> = imgs.iter().map(|x| x.to_tensor()).collect();
    Tensor::stack_batch(&items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_rejects_out_of_range_and_small_dims() {
        assert!(Volume::new([2, 2, 2], vec![0.5; 8]).is_ok());
        assert!(Volume::new([1, 2, 2], vec![0.5; 4]).is_err());
        let mut v = vec![0.5; 8];
        v[3] = 1.5;
        assert!(Volume::new([2, 2, 2], v).is_err());
        assert!(Volume::new([2, 2, 2], vec![0.5; 7]).is_err());
    }

    #[test]
    fn tensor_roundtrip() {
        let v = Volume::new([2, 3, 4], (0..24).map(|i| i as f32 / 24.0).collect()).unwrap();
        let t: Tensor<f32> = stack_volumes(&[&v, &v]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 3, 4]);
        assert_eq!(Volume::from_tensor(&t, 1).unwrap(), v);
    }

    #[test]
    fn style_codes() {
        for s in [StyleTag::Drr, StyleTag::Shifted] {
            assert_eq!(StyleTag::from_code(s.code()), Some(s));
        }
        assert_eq!(StyleTag::from_code(7), None);
    }
}
