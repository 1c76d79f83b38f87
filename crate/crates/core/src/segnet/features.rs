use ndarray::Array2;

use super::conv::ConvExtractor;
use crate::error::{Error, Result};
use crate::volume::{Mask2d, VoxelVolume};

/// Features per pixel: conv probability, threshold bit, x/nx, y/ny, z/nz,
/// intensity.
pub const N_FEATURES: usize = 6;

/// Feature rows for the (restricted) pixels of one slice.
#[derive(Debug, Clone)]
pub struct PixelFeatures {
    pub z: usize,
    /// Pixel indices within the slice, ascending.
    pub pixels: Vec<usize>,
    pub rows: Array2<f64>,
}

impl PixelFeatures {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Otsu threshold over intensities in `[0, 1]` using a 256-bin histogram.
/// Values strictly above the returned threshold form the upper class.
pub fn otsu_threshold<I: IntoIterator<Item = f32>>(values: I) -> f64 {
    const BINS: usize = 256;
    let mut hist = [0u64; BINS];
    let mut n = 0u64;
    for v in values {
        let b = ((v.clamp(0.0, 1.0) as f64) * BINS as f64) as usize;
        hist[b.min(BINS - 1)] += 1;
        n += 1;
    }
    if n == 0 {
        return 0.5;
    }
    let total: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = n as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (total - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    (best_k + 1) as f64 / BINS as f64
}

/// Builds feature rows from a precomputed probability map.
pub fn features_from_prob(
    volume: &VoxelVolume,
    z: usize,
    prob: &[f64],
    threshold: f64,
    restrict: Option<&Mask2d>,
) -> Result<PixelFeatures> {
    let (nx, ny, nz) = volume.dims();
    if z >= nz {
        return Err(Error::InvalidParameter(format!("slice {z} outside a stack of {nz}")));
    }
    if prob.len() != nx * ny {
        return Err(Error::DimensionMismatch(format!(
            "probability map of {} pixels for {nx}x{ny} slices",
            prob.len()
        )));
    }
    let pixels: Vec<usize> = match restrict {
        Some(m) => {
            if m.nx != nx || m.ny != ny {
                return Err(Error::DimensionMismatch(format!(
                    "restriction mask {}x{} vs slice {nx}x{ny}",
                    m.nx, m.ny
                )));
            }
            (0..nx * ny).filter(|&i| m.bits[i]).collect()
        }
        None => (0..nx * ny).collect(),
    };
    let slice = volume.slice(z);
    let zn = z as f64 / nz as f64;
    let mut rows = Array2::zeros((pixels.len(), N_FEATURES));
    for (mut row, &i) in rows.rows_mut().into_iter().zip(&pixels) {
        let v = slice[i] as f64;
        row[0] = prob[i];
        row[1] = if v > threshold { 1.0 } else { 0.0 };
        row[2] = (i % nx) as f64 / nx as f64;
        row[3] = (i / nx) as f64 / ny as f64;
        row[4] = zn;
        row[5] = v;
    }
    Ok(PixelFeatures { z, pixels, rows })
}

/// Feature rows of slice `z`, optionally restricted to the pixels of a mask.
pub fn extract_features(
    volume: &VoxelVolume,
    extractor: &ConvExtractor,
    threshold: f64,
    z: usize,
    restrict: Option<&Mask2d>,
) -> Result<PixelFeatures> {
    if z >= volume.nz() {
        return Err(Error::InvalidParameter(format!(
            "slice {z} outside a stack of {}",
            volume.nz()
        )));
    }
    if let Some(m) = restrict {
        if m.count() == 0 && m.nx == volume.nx() && m.ny == volume.ny() {
            return features_from_prob(volume, z, &vec![0.0; m.bits.len()], threshold, restrict);
        }
    }
    let prob = extractor.predict_slice(volume, z);
    features_from_prob(volume, z, &prob, threshold, restrict)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_coordinates() {
        let v = VoxelVolume::new(4, 3, 2, 1.0, vec![0.5; 24]).unwrap();
        let e = ConvExtractor::init(0);
        let f = extract_features(&v, &e, 0.4, 0, None).unwrap();
        assert_eq!(f.rows.nrows(), 12);
        assert_eq!((f.rows[[0, 2]], f.rows[[0, 3]], f.rows[[0, 4]]), (0.0, 0.0, 0.0));
        let last = extract_features(&v, &e, 0.4, 1, None).unwrap();
        let r = last.rows.row(11);
        assert_eq!((r[2], r[3], r[4]), (3.0 / 4.0, 2.0 / 3.0, 1.0 / 2.0));
        assert_eq!(r[1], 1.0);
        assert!(f.rows.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn empty_restriction_gives_no_rows() {
        let v = VoxelVolume::new(4, 3, 1, 1.0, vec![0.5; 12]).unwrap();
        let e = ConvExtractor::init(0);
        let f = extract_features(&v, &e, 0.4, 0, Some(&Mask2d::empty(4, 3))).unwrap();
        assert!(f.is_empty());
        assert!(extract_features(&v, &e, 0.4, 0, Some(&Mask2d::empty(3, 3))).is_err());
    }

    #[test]
    fn otsu_separates_two_modes() {
        let vals = [0.1f32; 50].into_iter().chain([0.8f32; 50]);
        let t = otsu_threshold(vals);
        assert!(t > 0.1 && t <= 0.8, "{t}");
    }
}
