//! Synthetic vessel-wall volumes with planted tissue, lipid pools,
//! calcifications, collagen and CT-style artifacts, plus their analytic truth.
//!
//! Geometry is given in voxel units; voxel `(i, j, k)` has its center at
//! `(i, j, k)`.

mod render;
mod templates;

pub use render::{generate, Phantom};
pub use templates::{annotated_slices, PhantomTemplate};

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phenotype::{Phenotype, Ratios};

/// Annular tissue cross-section whose center may drift linearly along z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub center: [f64; 2],
    /// Center displacement from the first to the last slice.
    #[serde(default)]
    pub drift: [f64; 2],
    pub inner_radius: f64,
    pub outer_radius: f64,
}

impl Tube {
    pub fn center_at(&self, z: f64, nz: usize) -> [f64; 2] {
        let t = if nz > 1 { z / (nz - 1) as f64 - 0.5 } else { 0.0 };
        [self.center[0] + self.drift[0] * t, self.center[1] + self.drift[1] * t]
    }

    pub fn contains(&self, p: [f64; 3], nz: usize) -> bool {
        let c = self.center_at(p[2], nz);
        let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        r2 >= self.inner_radius.powi(2) && r2 <= self.outer_radius.powi(2)
    }
}

/// Axis-aligned rectangle in every slice (a sample holder).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Holder {
    pub x: [usize; 2],
    pub y: [usize; 2],
}

/// Ellipsoid rotated by `angle` (radians) about the z axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    #[serde(default)]
    pub angle: f64,
}

impl Ellipsoid {
    /// Normalized radius: below 1 inside, 1 on the surface.
    pub fn rho(&self, p: [f64; 3]) -> f64 {
        let (dx, dy, dz) = (p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.semi_axes[0]).powi(2) + (v / self.semi_axes[1]).powi(2) + (dz / self.semi_axes[2]).powi(2)).sqrt()
    }

    /// Volume of the part with `z0 <= z <= z1`.
    pub fn volume_between(&self, z0: f64, z1: f64) -> f64 {
        let [a, b, c] = self.semi_axes;
        let lo = (z0 - self.center[2]).max(-c);
        let hi = (z1 - self.center[2]).min(c);
        if hi <= lo {
            return 0.0;
        }
        let prim = |t: f64| t - t.powi(3) / (3.0 * c * c);
        PI * a * b * (prim(hi) - prim(lo))
    }

    fn surface_points(&self, n: usize) -> Vec<[f64; 3]> {
        let mut pts = Vec::new();
        let (s, c) = self.angle.sin_cos();
        for i in 0..=n {
            let theta = PI * i as f64 / n as f64;
            for j in 0..2 * n {
                let phi = PI * j as f64 / n as f64;
                let u = self.semi_axes[0] * theta.sin() * phi.cos();
                let v = self.semi_axes[1] * theta.sin() * phi.sin();
                let w = self.semi_axes[2] * theta.cos();
                pts.push([
                    self.center[0] + c * u - s * v,
                    self.center[1] + s * u + c * v,
                    self.center[2] + w,
                ]);
            }
        }
        pts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Micro {
    pub center: [f64; 3],
    pub radius: f64,
    /// Planted cluster membership; `None` for isolated micros.
    #[serde(default)]
    pub cluster: Option<usize>,
}

/// Thin cylinder leaving the core center along `direction`, reaching
/// `length` beyond the core surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub direction: [f64; 3],
    pub length: f64,
    pub radius: f64,
}

/// Perforated spherical shell around the core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shell {
    /// Gap between core surface and shell.
    pub gap: f64,
    pub thickness: f64,
    /// Share of shell voxels left empty.
    pub porosity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Macro {
    pub center: [f64; 3],
    pub core_radius: f64,
    #[serde(default)]
    pub spikes: Vec<Spike>,
    #[serde(default)]
    pub shell: Option<Shell>,
}

pub(crate) fn unit(d: [f64; 3]) -> [f64; 3] {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    [d[0] / n, d[1] / n, d[2] / n]
}

impl Macro {
    /// Analytic volume of each spike outside the core.
    fn spike_volume(&self, s: &Spike) -> f64 {
        let (r, rho) = (self.core_radius, s.radius.min(self.core_radius));
        PI * rho * rho * (r + s.length) - 2.0 * PI / 3.0 * (r.powi(3) - (r * r - rho * rho).powf(1.5))
    }

    fn shell_volume(&self) -> f64 {
        self.shell.as_ref().map_or(0.0, |sh| {
            let r0 = self.core_radius + sh.gap;
            4.0 / 3.0 * PI * ((r0 + sh.thickness).powi(3) - r0.powi(3)) * (1.0 - sh.porosity)
        })
    }

    pub fn dense_volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.core_radius.powi(3)
    }

    pub fn sparse_volume(&self) -> f64 {
        self.spikes.iter().map(|s| self.spike_volume(s)).sum::<f64>() + self.shell_volume()
    }

    /// Radius of a ball around the center that holds the whole macro.
    pub fn extent(&self) -> f64 {
        let spikes = self.spikes.iter().map(|s| self.core_radius + s.length + s.radius);
        let shell = self
            .shell
            .as_ref()
            .map_or(0.0, |sh| self.core_radius + sh.gap + sh.thickness);
        spikes.fold(self.core_radius.max(shell), f64::max)
    }

    fn surface_points(&self) -> Vec<[f64; 3]> {
        let outer = self
            .shell
            .as_ref()
            .map_or(self.core_radius, |sh| self.core_radius + sh.gap + sh.thickness);
        let mut pts = sphere_points(self.center, outer, 24);
        for s in &self.spikes {
            let u = unit(s.direction);
            // an orthonormal frame around the spike axis
            let a = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let v = unit(cross(u, a));
            let w = cross(u, v);
            let end = self.core_radius + s.length;
            for k in 0..=8 {
                let t = end * k as f64 / 8.0;
                for j in 0..16 {
                    let phi = 2.0 * PI * j as f64 / 16.0;
                    let (c, sn) = (phi.cos() * s.radius, phi.sin() * s.radius);
                    pts.push([
                        self.center[0] + u[0] * t + v[0] * c + w[0] * sn,
                        self.center[1] + u[1] * t + v[1] * c + w[1] * sn,
                        self.center[2] + u[2] * t + v[2] * c + w[2] * sn,
                    ]);
                }
            }
        }
        pts
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn sphere_points(c: [f64; 3], r: f64, n: usize) -> Vec<[f64; 3]> {
    let mut pts = Vec::new();
    for i in 0..=n {
        let theta = PI * i as f64 / n as f64;
        for j in 0..2 * n {
            let phi = PI * j as f64 / n as f64;
            pts.push([
                c[0] + r * theta.sin() * phi.cos(),
                c[1] + r * theta.sin() * phi.sin(),
                c[2] + r * theta.cos(),
            ]);
        }
    }
    pts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingArtifact {
    pub amplitude: f64,
    /// Ring center in the slice plane.
    pub center: [f64; 2],
    /// Radial period in voxels.
    pub period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreakArtifact {
    /// Rays per macro, alternating bright and dark.
    pub count: usize,
    pub intensity: f64,
    /// Gaussian half-width of a ray in voxels.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Artifacts {
    pub noise_sigma: f64,
    pub ring: Option<RingArtifact>,
    pub streaks: Option<StreakArtifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Intensities {
    pub background: f64,
    pub tissue: f64,
    pub lipid: f64,
    pub calcification: f64,
    pub holder: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Self {
            background: 0.05,
            tissue: 0.45,
            lipid: 0.30,
            calcification: 0.95,
            holder: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowZone {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Binary collagen field: each voxel is fiber with probability `low_fraction`
/// inside a low-density zone and `high_fraction` elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollagenSpec {
    pub high_fraction: f64,
    pub low_fraction: f64,
    pub low_zones: Vec<LowZone>,
}

impl CollagenSpec {
    pub fn in_low_zone(&self, p: [f64; 3]) -> bool {
        self.low_zones.iter().any(|z| {
            (p[0] - z.center[0]).powi(2) + (p[1] - z.center[1]).powi(2) + (p[2] - z.center[2]).powi(2)
                <= z.radius * z.radius
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_um: f64,
    pub tube: Tube,
    #[serde(default)]
    pub holder: Option<Holder>,
    #[serde(default)]
    pub lipid_pools: Vec<Ellipsoid>,
    /// Width of the tissue-to-lipid intensity transition, in voxels.
    #[serde(default)]
    pub lipid_blur_sigma: f64,
    #[serde(default)]
    pub micros: Vec<Micro>,
    #[serde(default)]
    pub macros: Vec<Macro>,
    #[serde(default)]
    pub artifacts: Artifacts,
    #[serde(default)]
    pub collagen: Option<CollagenSpec>,
    #[serde(default)]
    pub intensities: Intensities,
    #[serde(default)]
    pub seed: u64,
}

/// Truth derived from the geometry of a spec, never from a rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub tissue_um3: f64,
    pub lipid_um3: f64,
    pub calcification_um3: f64,
    pub ratios: Ratios,
    pub n_micro: usize,
    pub n_macro: usize,
    pub n_clusters: usize,
    pub counts: BTreeMap<String, usize>,
    /// Analytic sparse share of every macro, in spec order.
    pub macro_sparse_fractions: Vec<f64>,
    /// Collagen label of every calcification (micros then macros), `true` for
    /// a low-density zone. Empty without a collagen field.
    pub low_collagen: Vec<bool>,
}

impl PhantomSpec {
    fn fail(msg: String) -> Error {
        Error::Phantom(msg)
    }

    fn inside_volume(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= -0.5 && p[a] <= self.dims[a] as f64 - 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        let [nx, ny, nz] = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::DegenerateDimensions { nx, ny, nz });
        }
        if !(self.spacing_um > 0.0) {
            return Err(Self::fail("spacing_um must be > 0".into()));
        }
        let t = &self.tube;
        if !(t.inner_radius >= 0.0 && t.outer_radius > t.inner_radius) {
            return Err(Self::fail("tube radii must satisfy 0 <= inner < outer".into()));
        }
        let in_tissue = |p: [f64; 3]| t.contains(p, nz);
        for (k, pool) in self.lipid_pools.iter().enumerate() {
            let pts = pool.surface_points(24);
            // only the part within the stack has to lie in tissue
            if pts
                .iter()
                .filter(|p| p[2] >= -0.5 && p[2] <= nz as f64 - 0.5)
                .any(|&p| !in_tissue(p))
            {
                return Err(Self::fail(format!("lipid pool {k} extends outside the tissue")));
            }
        }
        for (k, m) in self.micros.iter().enumerate() {
            if !(m.radius > 0.0) {
                return Err(Self::fail(format!("micro {k} needs a positive radius")));
            }
            let d_eq = 2.0 * m.radius * self.spacing_um;
            if d_eq >= crate::particles::DEFAULT_SIZE_THRESHOLD_UM {
                return Err(Self::fail(format!("micro {k} is not below the size threshold")));
            }
            for p in sphere_points(m.center, m.radius, 12) {
                if !in_tissue(p) || !self.inside_volume(p) {
                    return Err(Self::fail(format!("micro {k} lies outside the tissue")));
                }
            }
        }
        for (k, m) in self.macros.iter().enumerate() {
            let v = m.dense_volume() + m.sparse_volume();
            let d_eq = (6.0 * v / PI).cbrt() * self.spacing_um;
            if d_eq < crate::particles::DEFAULT_SIZE_THRESHOLD_UM {
                return Err(Self::fail(format!("macro {k} is below the size threshold")));
            }
            for p in m.surface_points() {
                if !in_tissue(p) || !self.inside_volume(p) {
                    return Err(Self::fail(format!("macro {k} lies outside the tissue")));
                }
            }
        }
        if let Some(c) = &self.collagen {
            for f in [c.high_fraction, c.low_fraction] {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Self::fail("collagen fractions must lie in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    /// Tissue volume in voxels: the annulus area per slice while the tube fits
    /// in the slice, a count of covered pixel centers otherwise.
    fn tissue_voxels(&self) -> f64 {
        let [nx, ny, nz] = self.dims;
        let t = &self.tube;
        let fits = (0..nz).all(|z| {
            let c = t.center_at(z as f64, nz);
            c[0] - t.outer_radius >= -0.5
                && c[0] + t.outer_radius <= nx as f64 - 0.5
                && c[1] - t.outer_radius >= -0.5
                && c[1] + t.outer_radius <= ny as f64 - 0.5
        });
        if fits {
            return PI * (t.outer_radius.powi(2) - t.inner_radius.powi(2)) * nz as f64;
        }
        let mut n = 0usize;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    n += t.contains([x as f64, y as f64, z as f64], nz) as usize;
                }
            }
        }
        n as f64
    }

    fn micro_in_pool(&self, m: &Micro) -> bool {
        self.lipid_pools.iter().any(|p| p.rho(m.center) <= 1.0)
    }

    /// Analytic truth report of the planted geometry.
    pub fn truth(&self) -> Result<PhantomTruth> {
        self.validate()?;
        let nz = self.dims[2];
        let v3 = self.spacing_um.powi(3);
        let tissue = self.tissue_voxels();
        let (z0, z1) = (-0.5, nz as f64 - 0.5);
        let mut lipid: f64 = self.lipid_pools.iter().map(|p| p.volume_between(z0, z1)).sum();
        let sphere = |r: f64| 4.0 / 3.0 * PI * r.powi(3);

        let mut counts: BTreeMap<String, usize> =
            Phenotype::ALL.iter().map(|p| (p.as_str().to_string(), 0)).collect();
        let (mut calc, mut athero, mut macro_v, mut clustered) = (0.0, 0.0, 0.0, 0.0);
        let mut clusters = std::collections::BTreeSet::new();
        for m in &self.micros {
            let v = sphere(m.radius);
            calc += v;
            let inside = self.micro_in_pool(m);
            if inside {
                athero += v;
                lipid -= v;
            }
            if let Some(c) = m.cluster {
                clustered += v;
                clusters.insert(c);
            }
            let ph = match (inside, m.cluster.is_some()) {
                (true, true) => Phenotype::AtheroClusteredMicro,
                (true, false) => Phenotype::AtheroIsolatedMicro,
                (false, true) => Phenotype::NonAtheroClusteredMicro,
                (false, false) => Phenotype::NonAtheroIsolatedMicro,
            };
            *counts.get_mut(ph.as_str()).expect("label") += 1;
        }
        let mut sparse_fractions = Vec::new();
        for m in &self.macros {
            let (d, s) = (m.dense_volume(), m.sparse_volume());
            calc += d + s;
            macro_v += d + s;
            sparse_fractions.push(s / (d + s));
            let inside = self.lipid_pools.iter().any(|p| p.rho(m.center) <= 1.0);
            if inside {
                athero += d + s;
            }
            let ph = match (inside, s > d) {
                (true, true) => Phenotype::AtheroSparseMacro,
                (true, false) => Phenotype::AtheroDenseMacro,
                (false, true) => Phenotype::NonAtheroSparseMacro,
                (false, false) => Phenotype::NonAtheroDenseMacro,
            };
            *counts.get_mut(ph.as_str()).expect("label") += 1;
        }
        let low_collagen = match &self.collagen {
            Some(c) => self
                .micros
                .iter()
                .map(|m| m.center)
                .chain(self.macros.iter().map(|m| m.center))
                .map(|p| c.in_low_zone(p))
                .collect(),
            None => Vec::new(),
        };
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        Ok(PhantomTruth {
            tissue_um3: tissue * v3,
            lipid_um3: lipid * v3,
            calcification_um3: calc * v3,
            ratios: Ratios {
                lipid_to_tissue: ratio(lipid, tissue),
                calc_to_tissue: ratio(calc, tissue),
                athero_calc_to_calc: ratio(athero, calc),
                macro_to_calc: ratio(macro_v, calc),
                clustered_micro_to_calc: ratio(clustered, calc),
            },
            n_micro: self.micros.len(),
            n_macro: self.macros.len(),
            n_clusters: clusters.len(),
            counts,
            macro_sparse_fractions: sparse_fractions,
            low_collagen,
        })
    }
}
