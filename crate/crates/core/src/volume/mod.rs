//! Voxel volumes, binary masks and slice annotations.
//!
//! All volumes are stored slice-contiguous: the linear index of voxel
//! `(x, y, z)` is `x + nx * (y + ny * z)`.

mod io;

pub use io::{
    load_annotations, load_mask, load_mask_2d, load_stack, save_annotations, save_mask,
    save_mask_2d_png, save_volume, AnnotationEntry, AnnotationManifest, Sidecar, SampleType,
};

use crate::error::{Error, Result};

/// Default isotropic voxel edge length in micrometers.
pub const DEFAULT_SPACING_UM: f64 = 3.0;

/// Dense grayscale intensity grid with isotropic spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    nx: usize,
    ny: usize,
    nz: usize,
    spacing_um: f64,
    data: Vec<f32>,
}

impl VoxelVolume {
    /// Wraps intensities that are already in `[0, 1]`.
    pub fn new(nx: usize, ny: usize, nz: usize, spacing_um: f64, data: Vec<f32>) -> Result<Self> {
        check_dims(nx, ny, nz)?;
        check_spacing(spacing_um)?;
        if data.len() != nx * ny * nz {
            return Err(Error::VoxelCountMismatch {
                declared: nx * ny * nz,
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            nx,
            ny,
            nz,
            spacing_um,
            data,
        })
    }

    /// Min-max normalizes arbitrary samples over the whole stack. A constant
    /// stack maps to all zeros.
    pub fn from_raw_samples(
        nx: usize,
        ny: usize,
        nz: usize,
        spacing_um: f64,
        samples: &[f64],
    ) -> Result<Self> {
        check_dims(nx, ny, nz)?;
        check_spacing(spacing_um)?;
        if samples.len() != nx * ny * nz {
            return Err(Error::VoxelCountMismatch {
                declared: nx * ny * nz,
                actual: samples.len(),
            });
        }
        Ok(Self {
            nx,
            ny,
            nz,
            spacing_um,
            data: normalize_min_max(samples),
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn spacing_um(&self) -> f64 {
        self.spacing_um
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.nx * self.ny;
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }
}

/// Per-voxel boolean labeling of a volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    nx: usize,
    ny: usize,
    nz: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(nx: usize, ny: usize, nz: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(nx, ny, nz)?;
        if bits.len() != nx * ny * nz {
            return Err(Error::VoxelCountMismatch {
                declared: nx * ny * nz,
                actual: bits.len(),
            });
        }
        Ok(Self { nx, ny, nz, bits })
    }

    /// All-false mask. Dimensions are not validated so callers can build
    /// scratch masks before filling them.
    pub fn empty(nx: usize, ny: usize, nz: usize) -> Self {
        Self {
            nx,
            ny,
            nz,
            bits: vec![false; nx * ny * nz],
        }
    }

    pub fn like(volume: &VoxelVolume) -> Self {
        Self::empty(volume.nx, volume.ny, volume.nz)
    }

    /// Builds a mask from per-slice 2D masks in z order.
    pub fn from_slices(nx: usize, ny: usize, slices: &[Mask2d]) -> Result<Self> {
        let mut bits = Vec::with_capacity(nx * ny * slices.len());
        for (z, s) in slices.iter().enumerate() {
            if s.nx != nx || s.ny != ny {
                return Err(Error::DimensionMismatch(format!(
                    "slice {z} is {}x{}, expected {nx}x{ny}",
                    s.nx, s.ny
                )));
            }
            bits.extend_from_slice(&s.bits);
        }
        Self::new(nx, ny, slices.len(), bits)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn slice(&self, z: usize) -> Mask2d {
        let n = self.nx * self.ny;
        Mask2d {
            nx: self.nx,
            ny: self.ny,
            bits: self.bits[z * n..(z + 1) * n].to_vec(),
        }
    }

    pub fn slice_bits(&self, z: usize) -> &[bool] {
        let n = self.nx * self.ny;
        &self.bits[z * n..(z + 1) * n]
    }

    pub fn set_slice(&mut self, z: usize, slice: &Mask2d) -> Result<()> {
        if slice.nx != self.nx || slice.ny != self.ny {
            return Err(Error::DimensionMismatch(format!(
                "slice is {}x{}, mask is {}x{}",
                slice.nx, slice.ny, self.nx, self.ny
            )));
        }
        let n = self.nx * self.ny;
        self.bits[z * n..(z + 1) * n].copy_from_slice(&slice.bits);
        Ok(())
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims()
    }

    pub fn matches_volume(&self, volume: &VoxelVolume) -> bool {
        self.dims() == volume.dims()
    }

    /// True when every set voxel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_dims(other)
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(&a, &b)| !a || b)
    }
}

/// Boolean grid for one slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2d {
    pub nx: usize,
    pub ny: usize,
    pub bits: Vec<bool>,
}

impl Mask2d {
    pub fn new(nx: usize, ny: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != nx * ny {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {nx}x{ny} slice",
                bits.len()
            )));
        }
        Ok(Self { nx, ny, bits })
    }

    pub fn empty(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            bits: vec![false; nx * ny],
        }
    }

    pub fn filled(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            bits: vec![true; nx * ny],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[x + self.nx * y]
    }

    pub fn is_subset_of(&self, other: &Mask2d) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Sets every background pixel that is not 4-connected to the slice border.
    pub fn fill_holes(&self) -> Mask2d {
        let (nx, ny) = (self.nx, self.ny);
        let mut outside = vec![false; nx * ny];
        let mut stack = Vec::new();
        let seed = |i: usize, outside: &mut Vec<bool>, stack: &mut Vec<usize>| {
            if !self.bits[i] && !outside[i] {
                outside[i] = true;
                stack.push(i);
            }
        };
        for x in 0..nx {
            seed(x, &mut outside, &mut stack);
            seed(x + nx * (ny - 1), &mut outside, &mut stack);
        }
        for y in 0..ny {
            seed(nx * y, &mut outside, &mut stack);
            seed(nx - 1 + nx * y, &mut outside, &mut stack);
        }
        while let Some(i) = stack.pop() {
            let (x, y) = (i % nx, i / nx);
            let mut visit = |j: usize| {
                if !self.bits[j] && !outside[j] {
                    outside[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
        }
        Mask2d {
            nx,
            ny,
            bits: outside.into_iter().map(|o| !o).collect(),
        }
    }
}

/// Expert marking of one slice: the sample region and the lipid pool inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceAnnotation {
    pub z: usize,
    pub sample: Mask2d,
    pub lipid: Mask2d,
}

impl SliceAnnotation {
    pub fn new(z: usize, sample: Mask2d, lipid: Mask2d) -> Result<Self> {
        if sample.nx != lipid.nx || sample.ny != lipid.ny {
            return Err(Error::DimensionMismatch(format!(
                "annotation at z={z}: sample {}x{} vs lipid {}x{}",
                sample.nx, sample.ny, lipid.nx, lipid.ny
            )));
        }
        if !lipid.is_subset_of(&sample) {
            return Err(Error::InvalidParameter(format!(
                "annotation at z={z}: lipid pixels outside the sample region"
            )));
        }
        Ok(Self { z, sample, lipid })
    }

    /// Checks the annotation against a volume's geometry.
    pub fn validate_for(&self, volume: &VoxelVolume) -> Result<()> {
        if self.z >= volume.nz() {
            return Err(Error::InvalidParameter(format!(
                "annotation z={} outside a stack of {} slices",
                self.z,
                volume.nz()
            )));
        }
        if self.sample.nx != volume.nx() || self.sample.ny != volume.ny() {
            return Err(Error::DimensionMismatch(format!(
                "annotation at z={} is {}x{}, stack slices are {}x{}",
                self.z,
                self.sample.nx,
                self.sample.ny,
                volume.nx(),
                volume.ny()
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_dims(nx: usize, ny: usize, nz: usize) -> Result<()> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::DegenerateDimensions { nx, ny, nz });
    }
    Ok(())
}

fn check_spacing(spacing_um: f64) -> Result<()> {
    if !(spacing_um.is_finite() && spacing_um > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "spacing_um must be positive, got {spacing_um}"
        )));
    }
    Ok(())
}

/// Global min-max normalization to `[0, 1]`; constant input maps to zeros.
pub fn normalize_min_max(samples: &[f64]) -> Vec<f32> {
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if samples.is_empty() || hi <= lo {
        return vec![0.0; samples.len()];
    }
    let range = hi - lo;
    samples
        .iter()
        .map(|&v| ((v - lo) / range) as f32)
        .collect()
}
