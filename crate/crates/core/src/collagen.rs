//! Coupling between collagen density and calcification distribution density.
//!
//! A collagen mask is reduced to windowed volume fractions, split into a low
//! and a high density class, and every particle gets a collagen label (C1 low,
//! C2 high). Particles are also labeled by distribution density (D1 isolated,
//! D2 clustered) for a grid of clustering radii; the radius with the best
//! agreement between the two labelings is reported.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::ParticleSet;
use crate::phenotype::{dbscan, ClusterParams};
use crate::volume::BinaryMask;

pub const DEFAULT_WINDOW_UM: f64 = 60.0;
pub const CONVERGENCE_AGREEMENT: f64 = 0.8;

/// Collagen volume fraction per cubic window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    /// Window edge in voxels.
    pub window: usize,
    /// Cell grid dimensions, `ceil(volume dims / window)`.
    pub dims: (usize, usize, usize),
    /// Dimensions of the source volume.
    pub source_dims: (usize, usize, usize),
    pub cells: Vec<f64>,
}

impl DensityField {
    pub fn cell_of_voxel(&self, x: usize, y: usize, z: usize) -> usize {
        let w = self.window;
        (x / w) + self.dims.0 * ((y / w) + self.dims.1 * (z / w))
    }
}

/// Windowed true-voxel fractions. Edge windows divide by their actual
/// (smaller) voxel count.
pub fn local_density(mask: &BinaryMask, window_um: f64, spacing_um: f64) -> Result<DensityField> {
    let w = (window_um / spacing_um).round();
    if !(w >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "window of {window_um} um is below one voxel at {spacing_um} um spacing"
        )));
    }
    let w = w as usize;
    let (nx, ny, nz) = mask.dims();
    let dims = (nx.div_ceil(w), ny.div_ceil(w), nz.div_ceil(w));
    let n = dims.0 * dims.1 * dims.2;
    let mut hits = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let bits = mask.bits();
    for z in 0..nz {
        for y in 0..ny {
            let row = nx * (y + ny * z);
            let crow = dims.0 * ((y / w) + dims.1 * (z / w));
            for x in 0..nx {
                let c = crow + x / w;
                totals[c] += 1;
                hits[c] += bits[row + x] as usize;
            }
        }
    }
    Ok(DensityField {
        window: w,
        dims,
        source_dims: (nx, ny, nz),
        cells: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| h as f64 / t as f64)
            .collect(),
    })
}

/// Low/high assignment of every density cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySplit {
    pub field: DensityField,
    pub high: Vec<bool>,
    /// Cells with value above this are high.
    pub threshold: f64,
    pub low_mean: f64,
    pub high_mean: f64,
    /// Set when the field is constant and everything falls in one class.
    pub degenerate: bool,
}

impl DensitySplit {
    pub fn is_high_voxel(&self, x: usize, y: usize, z: usize) -> bool {
        self.high[self.field.cell_of_voxel(x, y, z)]
    }

    /// High-density region upsampled to voxel resolution.
    pub fn to_mask(&self) -> BinaryMask {
        let (nx, ny, nz) = self.field.source_dims;
        let mut m = BinaryMask::empty(nx, ny, nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if self.is_high_voxel(x, y, z) {
                        m.set(x, y, z, true);
                    }
                }
            }
        }
        m
    }
}

/// Optimal 1-D two-class split: the threshold between consecutive sorted
/// values that minimizes the total within-class squared deviation. Returns
/// `(threshold, low_mean, high_mean)`, or `None` for fewer than two distinct
/// values.
pub fn two_means_1d(values: &[f64]) -> Option<(f64, f64, f64)> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n < 2 || v[0] == v[n - 1] {
        return None;
    }
    let mut prefix = vec![0.0; n + 1];
    let mut prefix2 = vec![0.0; n + 1];
    for (i, x) in v.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
        prefix2[i + 1] = prefix2[i] + x * x;
    }
    let sse = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let s = prefix[b] - prefix[a];
        (prefix2[b] - prefix2[a]) - s * s / m
    };
    let mut best: Option<(f64, usize)> = None;
    for k in 1..n {
        // only split between distinct values
        if v[k - 1] == v[k] {
            continue;
        }
        let cost = sse(0, k) + sse(k, n);
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, k));
        }
    }
    let (_, k) = best?;
    let low_mean = prefix[k] / k as f64;
    let high_mean = (prefix[n] - prefix[k]) / (n - k) as f64;
    Some((0.5 * (v[k - 1] + v[k]), low_mean, high_mean))
}

/// Two-class split of the density cells.
pub fn split_two_level(field: &DensityField) -> DensitySplit {
    match two_means_1d(&field.cells) {
        Some((threshold, low_mean, high_mean)) => DensitySplit {
            high: field.cells.iter().map(|&c| c > threshold).collect(),
            field: field.clone(),
            threshold,
            low_mean,
            high_mean,
            degenerate: false,
        },
        None => {
            let m = field.cells.first().copied().unwrap_or(0.0);
            DensitySplit {
                high: vec![false; field.cells.len()],
                field: field.clone(),
                threshold: m,
                low_mean: m,
                high_mean: m,
                degenerate: true,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollagenLabel {
    /// Centroid in a low-density collagen region.
    C1,
    /// Centroid in a high-density collagen region.
    C2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DensityLabel {
    /// Isolated particle.
    D1,
    /// Member of a cluster.
    D2,
}

impl DensityLabel {
    /// Collagen label expected under an inverse relation between the two
    /// densities: clustered particles sit in low collagen.
    pub fn expected(self) -> CollagenLabel {
        match self {
            DensityLabel::D1 => CollagenLabel::C2,
            DensityLabel::D2 => CollagenLabel::C1,
        }
    }
}

pub fn label_by_collagen(set: &ParticleSet, split: &DensitySplit) -> Result<Vec<CollagenLabel>> {
    if set.dims != split.field.source_dims {
        return Err(Error::DimensionMismatch(format!(
            "particles on {:?}, collagen on {:?}",
            set.dims, split.field.source_dims
        )));
    }
    let (nx, ny, nz) = set.dims;
    set.particles
        .iter()
        .map(|p| {
            let v: Vec<f64> = p.centroid_um.iter().map(|c| (c / set.spacing_um).floor()).collect();
            if v.iter().zip([nx, ny, nz]).any(|(&c, n)| c < 0.0 || c >= n as f64) {
                return Err(Error::InvalidParameter(format!(
                    "centroid of particle {} lies outside the grid",
                    p.id
                )));
            }
            Ok(if split.is_high_voxel(v[0] as usize, v[1] as usize, v[2] as usize) {
                CollagenLabel::C2
            } else {
                CollagenLabel::C1
            })
        })
        .collect()
}

/// Which particles enter the agreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementScope {
    #[default]
    AllParticles,
    MicrosOnly,
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    }
}

/// Twenty radii from 10 um to 1 mm.
pub fn default_eps_grid() -> Vec<f64> {
    log_spaced(10.0, 1000.0, 20)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleCoupling {
    pub id: u32,
    pub c_label: CollagenLabel,
    pub d_label: DensityLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingResult {
    pub best_eps_um: f64,
    pub agreement: f64,
    pub converged: bool,
    /// Agreement at every grid radius, in grid order.
    pub grid: Vec<(f64, f64)>,
    /// Labels at the best radius for the particles in scope.
    pub particles: Vec<ParticleCoupling>,
}

/// Fraction of particles whose density label matches its expected collagen
/// label.
pub fn agreement(c: &[CollagenLabel], d: &[DensityLabel]) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let hits = c.iter().zip(d).filter(|(c, d)| d.expected() == **c).count();
    hits as f64 / c.len() as f64
}

fn density_labels(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Result<Vec<DensityLabel>> {
    let labels = dbscan(points, &ClusterParams { eps_um: eps, min_pts })?;
    Ok(labels
        .into_iter()
        .map(|l| if l.is_some() { DensityLabel::D2 } else { DensityLabel::D1 })
        .collect())
}

/// Exhaustive search over `eps_grid` for the clustering radius whose density
/// labels best agree with `c_labels` (ties go to the smaller radius).
pub fn search_density_threshold(
    set: &ParticleSet,
    c_labels: &[CollagenLabel],
    eps_grid: &[f64],
    min_pts: usize,
    scope: AgreementScope,
) -> Result<CouplingResult> {
    if c_labels.len() != set.particles.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} collagen labels for {} particles",
            c_labels.len(),
            set.particles.len()
        )));
    }
    if eps_grid.is_empty() {
        return Err(Error::InvalidParameter("empty eps grid".into()));
    }
    let keep: Vec<usize> = (0..set.particles.len())
        .filter(|&i| scope == AgreementScope::AllParticles || set.particles[i].is_micro())
        .collect();
    if keep.len() < 2 {
        return Err(Error::InvalidParameter("at least two particles are required".into()));
    }
    let points: Vec<[f64; 3]> = keep.iter().map(|&i| set.particles[i].centroid_um).collect();
    let c: Vec<CollagenLabel> = keep.iter().map(|&i| c_labels[i]).collect();
    let per_eps: Vec<(f64, f64, Vec<DensityLabel>)> = eps_grid
        .par_iter()
        .map(|&eps| {
            let d = density_labels(&points, eps, min_pts)?;
            Ok((eps, agreement(&c, &d), d))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (k, e) in per_eps.iter().enumerate() {
        let b = &per_eps[best];
        if e.1 > b.1 || (e.1 == b.1 && e.0 < b.0) {
            best = k;
        }
    }
    let (best_eps, best_agreement, d) = &per_eps[best];
    Ok(CouplingResult {
        best_eps_um: *best_eps,
        agreement: *best_agreement,
        converged: *best_agreement >= CONVERGENCE_AGREEMENT,
        grid: per_eps.iter().map(|(e, a, _)| (*e, *a)).collect(),
        particles: keep
            .iter()
            .zip(&c)
            .zip(d)
            .map(|((&i, &c_label), &d_label)| ParticleCoupling {
                id: set.particles[i].id,
                c_label,
                d_label,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_of_full_and_empty_masks() {
        let full = BinaryMask::new(7, 5, 3, vec![true; 105]).unwrap();
        let f = local_density(&full, 2.0, 1.0).unwrap();
        assert_eq!(f.dims, (4, 3, 2));
        assert!(f.cells.iter().all(|&c| c == 1.0));
        let empty = BinaryMask::empty(7, 5, 3);
        assert!(local_density(&empty, 2.0, 1.0).unwrap().cells.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn checkerboard_window_is_half() {
        let mut m = BinaryMask::empty(4, 4, 4);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    m.set(x, y, z, (x + y + z) % 2 == 0);
                }
            }
        }
        let f = local_density(&m, 4.0, 1.0).unwrap();
        assert_eq!(f.cells, vec![0.5]);
        assert!(local_density(&m, 0.3, 1.0).is_err());
    }

    #[test]
    fn two_means_small_example() {
        let (t, lo, hi) = two_means_1d(&[0.85, 0.2, 0.8, 0.25]).unwrap();
        assert!(t > 0.25 && t < 0.8);
        assert!((lo - 0.225).abs() < 1e-12 && (hi - 0.825).abs() < 1e-12);
        assert!(two_means_1d(&[0.3; 5]).is_none());
    }

    #[test]
    fn constant_field_is_degenerate() {
        let f = DensityField {
            window: 1,
            dims: (2, 1, 1),
            source_dims: (2, 1, 1),
            cells: vec![0.4, 0.4],
        };
        let s = split_two_level(&f);
        assert!(s.degenerate);
        assert!(s.high.iter().all(|h| !h));
    }

    #[test]
    fn log_grid() {
        let g = default_eps_grid();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 10.0).abs() < 1e-9 && (g[19] - 1000.0).abs() < 1e-9);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
