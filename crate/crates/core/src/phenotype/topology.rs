use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{open_ball, Grid3};
use crate::particles::{ParticleSet, Topology};
use crate::volume::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyParams {
    /// Radius of the spherical structuring element.
    pub opening_radius_um: f64,
    /// Fill enclosed cavities smaller than the structuring ball before the
    /// opening, so isolated voids inside a solid core leave it dense.
    pub fill_cavities: bool,
}

impl Default for TopologyParams {
    fn default() -> Self {
        Self {
            opening_radius_um: 150.0,
            fill_cavities: true,
        }
    }
}

impl TopologyParams {
    /// Structuring-element radius in voxels.
    pub fn radius_voxels(&self, spacing_um: f64) -> Result<f64> {
        if !(self.opening_radius_um > 0.0) {
            return Err(Error::InvalidParameter("opening_radius_um must be > 0".into()));
        }
        let r = self.opening_radius_um / spacing_um;
        if r < 1.0 {
            return Err(Error::RadiusBelowResolution {
                radius_um: self.opening_radius_um,
                spacing_um,
            });
        }
        Ok(r)
    }
}

/// Per-voxel dense labels of one macro (aligned with its voxel list) and the
/// resulting fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroTopology {
    pub dense: Vec<bool>,
    pub topology: Topology,
}

fn summarize(dense: Vec<bool>) -> MacroTopology {
    let n = dense.len();
    let d = dense.iter().filter(|&&b| b).count();
    let (sparse_fraction, dense_fraction) = if n == 0 {
        (0.0, 0.0)
    } else {
        let df = d as f64 / n as f64;
        (1.0 - df, df)
    };
    MacroTopology {
        dense,
        topology: Topology {
            sparse_voxels: n - d,
            dense_voxels: d,
            sparse_fraction,
            dense_fraction,
        },
    }
}

/// Sparse/dense split of one particle given by its linear voxel indices in a
/// grid of `dims`. Voxels that survive a morphological opening with a ball of
/// the configured radius are dense; the rest are sparse.
pub fn classify_macro_topology(
    voxels: &[usize],
    dims: (usize, usize, usize),
    spacing_um: f64,
    params: &TopologyParams,
) -> Result<MacroTopology> {
    let r = params.radius_voxels(spacing_um)?;
    if voxels.is_empty() {
        return Ok(summarize(Vec::new()));
    }
    let (nx, ny, _) = dims;
    let coord = |i: usize| (i % nx, (i / nx) % ny, i / (nx * ny));
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &i in voxels {
        let (x, y, z) = coord(i);
        for (a, c) in [x, y, z].into_iter().enumerate() {
            lo[a] = lo[a].min(c);
            hi[a] = hi[a].max(c);
        }
    }
    let mut g = Grid3::new(hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1);
    let (gx, gy) = (g.nx, g.ny);
    let local = |i: usize| {
        let (x, y, z) = coord(i);
        (x - lo[0]) + gx * ((y - lo[1]) + gy * (z - lo[2]))
    };
    let locals: Vec<usize> = voxels.iter().map(|&i| local(i)).collect();
    for &l in &locals {
        g.bits[l] = true;
    }
    if params.fill_cavities {
        let ball = (4.0 / 3.0 * std::f64::consts::PI * r.powi(3)) as usize;
        g = fill_small_cavities(&g, ball);
    }
    let opened = open_ball(&g, r);
    Ok(summarize(locals.iter().map(|&l| opened.bits[l]).collect()))
}

/// Sets every 6-connected background component that does not reach the grid
/// border and holds fewer than `max_voxels` voxels.
pub fn fill_small_cavities(g: &Grid3, max_voxels: usize) -> Grid3 {
    let (nx, ny, nz) = (g.nx, g.ny, g.nz);
    let mut out = g.clone();
    let mut seen = vec![false; g.bits.len()];
    let mut stack = Vec::new();
    for start in 0..g.bits.len() {
        if g.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        let mut border = false;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            if x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz {
                border = true;
            }
            let mut visit = |j: usize| {
                if !g.bits[j] && !seen[j] {
                    seen[j] = true;
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
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        if !border && comp.len() < max_voxels {
            for i in comp {
                out.bits[i] = true;
            }
        }
    }
    out
}

/// Same split for a mask holding a single particle; returns the dense mask.
pub fn classify_macro_mask(
    mask: &BinaryMask,
    spacing_um: f64,
    params: &TopologyParams,
) -> Result<(BinaryMask, Topology)> {
    let voxels: Vec<usize> = (0..mask.len()).filter(|&i| mask.bits()[i]).collect();
    let t = classify_macro_topology(&voxels, mask.dims(), spacing_um, params)?;
    let mut dense = BinaryMask::empty(mask.nx(), mask.ny(), mask.nz());
    for (&i, &d) in voxels.iter().zip(&t.dense) {
        dense.bits_mut()[i] = d;
    }
    Ok((dense, t.topology))
}

/// Fills the topology of every macro in the set (micros are left unset).
pub fn classify_topology(mut set: ParticleSet, params: &TopologyParams) -> Result<ParticleSet> {
    params.radius_voxels(set.spacing_um)?;
    let (dims, spacing) = (set.dims, set.spacing_um);
    let results: Vec<Option<Topology>> = set
        .particles
        .par_iter()
        .map(|p| {
            if p.is_macro() {
                classify_macro_topology(&p.voxels, dims, spacing, params).map(|t| Some(t.topology))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    for (p, t) in set.particles.iter_mut().zip(results) {
        p.topology = t;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(n: usize, c: f64, r: f64) -> BinaryMask {
        let mut m = BinaryMask::empty(n, n, n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                    if d2 <= r * r {
                        m.set(x, y, z, true);
                    }
                }
            }
        }
        m
    }

    #[test]
    fn solid_ball_is_mostly_dense() {
        // digitized balls lose a thin boundary layer under a digitized opening
        let m = ball(21, 10.0, 9.0);
        let p = TopologyParams {
            opening_radius_um: 3.0,
            ..Default::default()
        };
        let (dense, t) = classify_macro_mask(&m, 1.0, &p).unwrap();
        assert!(dense.is_subset_of(&m));
        assert!(t.dense_fraction > 0.9, "{t:?}");
        assert_eq!(t.sparse_voxels + t.dense_voxels, m.count());
        // the interior, one structuring radius in, is untouched
        for z in 0..21 {
            for y in 0..21 {
                for x in 0..21 {
                    let d2 = (x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2) + (z as f64 - 10.0).powi(2);
                    if d2 <= 36.0 {
                        assert!(dense.get(x, y, z));
                    }
                }
            }
        }
    }

    #[test]
    fn pinholes_do_not_break_a_dense_core() {
        let mut m = ball(31, 15.0, 13.0);
        // scattered single-voxel voids inside the ball
        for k in 0..40usize {
            let (x, y, z) = (8 + (k * 7) % 15, 8 + (k * 11) % 15, 8 + (k * 5) % 15);
            m.set(x, y, z, false);
        }
        let p = TopologyParams {
            opening_radius_um: 5.0,
            ..Default::default()
        };
        let (_, filled) = classify_macro_mask(&m, 1.0, &p).unwrap();
        assert!(filled.dense_fraction > 0.9, "{filled:?}");
        let raw = TopologyParams {
            fill_cavities: false,
            ..p
        };
        let (_, holes) = classify_macro_mask(&m, 1.0, &raw).unwrap();
        assert!(holes.dense_fraction < filled.dense_fraction);
    }

    #[test]
    fn large_enclosed_gap_is_not_filled() {
        let mut g = Grid3::new(9, 9, 9);
        for z in 0..9 {
            for y in 0..9 {
                for x in 0..9 {
                    let edge = [x, y, z].iter().any(|&c| c == 1 || c == 7);
                    let inside = [x, y, z].iter().all(|&c| (1..=7).contains(&c));
                    let i = g.index(x, y, z);
                    g.bits[i] = edge && inside;
                }
            }
        }
        // a closed hollow cube with a 5^3 cavity
        assert_eq!(fill_small_cavities(&g, 125).count(), g.count());
        assert_eq!(fill_small_cavities(&g, 126).count(), g.count() + 125);
    }

    #[test]
    fn thin_rod_is_sparse() {
        let mut m = BinaryMask::empty(30, 5, 5);
        for x in 2..28 {
            for (y, z) in [(2, 2), (1, 2), (2, 1), (3, 2), (2, 3)] {
                m.set(x, y, z, true);
            }
        }
        let p = TopologyParams {
            opening_radius_um: 2.0,
            ..Default::default()
        };
        let (dense, t) = classify_macro_mask(&m, 1.0, &p).unwrap();
        assert_eq!(dense.count(), 0);
        assert_eq!(t.sparse_fraction, 1.0);
    }

    #[test]
    fn sub_voxel_radius_rejected() {
        let m = ball(5, 2.0, 1.0);
        let p = TopologyParams {
            opening_radius_um: 2.0,
            ..Default::default()
        };
        assert!(matches!(
            classify_macro_mask(&m, 3.0, &p),
            Err(Error::RadiusBelowResolution { .. })
        ));
    }
}
