//! Calcification particles: 3D connected components of a calcification mask,
//! their volumes, equivalent diameters and micro/macro size classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::BinaryMask;

/// Particles below this equivalent diameter are microcalcifications.
pub const DEFAULT_SIZE_THRESHOLD_UM: f64 = 500.0;
pub const DEFAULT_MIN_VOLUME_VOXELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbors only.
    #[serde(rename = "6")]
    Six,
    /// Face, edge and corner neighbors.
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    /// Neighbor offsets that precede a voxel in z-major scan order.
    fn backward_offsets(self) -> Vec<(i64, i64, i64)> {
        let mut out = Vec::new();
        for dz in -1..=0i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                    if !before {
                        continue;
                    }
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    if self == Connectivity::Six && manhattan != 1 {
                        continue;
                    }
                    out.push((dx, dy, dz));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Micro,
    Macro,
}

/// Volume shares of the thin/porous (sparse) and surviving (dense) parts of a
/// macrocalcification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub sparse_voxels: usize,
    pub dense_voxels: usize,
    pub sparse_fraction: f64,
    pub dense_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParticleParams {
    pub size_threshold_um: f64,
    pub min_volume_voxels: usize,
    pub connectivity: Connectivity,
}

impl Default for ParticleParams {
    fn default() -> Self {
        Self {
            size_threshold_um: DEFAULT_SIZE_THRESHOLD_UM,
            min_volume_voxels: DEFAULT_MIN_VOLUME_VOXELS,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl ParticleParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_volume_voxels < 1 {
            return Err(Error::InvalidParameter("min_volume_voxels must be >= 1".into()));
        }
        if !(self.size_threshold_um > 0.0) {
            return Err(Error::InvalidParameter("size_threshold_um must be > 0".into()));
        }
        Ok(())
    }
}

/// One connected calcification component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub id: u32,
    pub voxel_count: usize,
    pub volume_um3: f64,
    /// Mean voxel-center position.
    pub centroid_um: [f64; 3],
    pub d_eq_um: f64,
    pub size_class: Option<SizeClass>,
    pub athero: Option<bool>,
    pub cluster_id: Option<usize>,
    pub topology: Option<Topology>,
    /// Inclusive voxel bounding box `[min, max]` per axis.
    pub bbox: [[usize; 2]; 3],
    /// Linear voxel indices in scan order.
    #[serde(skip)]
    pub voxels: Vec<usize>,
}

impl Particle {
    pub fn is_micro(&self) -> bool {
        self.size_class == Some(SizeClass::Micro)
    }

    pub fn is_macro(&self) -> bool {
        self.size_class == Some(SizeClass::Macro)
    }

    pub fn sparse_fraction(&self) -> f64 {
        self.topology.map_or(0.0, |t| t.sparse_fraction)
    }

    pub fn dense_fraction(&self) -> f64 {
        self.topology.map_or(0.0, |t| t.dense_fraction)
    }
}

/// Equivalent-sphere diameter `(6 V / pi)^(1/3)`.
pub fn equivalent_diameter(volume_um3: f64) -> f64 {
    (6.0 * volume_um3 / std::f64::consts::PI).cbrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    pub spacing_um: f64,
    pub dims: (usize, usize, usize),
    pub size_threshold_um: f64,
    pub min_volume_voxels: usize,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn voxel_volume_um3(&self) -> f64 {
        self.spacing_um.powi(3)
    }

    pub fn total_voxels(&self) -> usize {
        self.particles.iter().map(|p| p.voxel_count).sum()
    }
}

/// Per-voxel component labels; 0 is background, particles are numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: (usize, usize, usize),
    pub labels: Vec<u32>,
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        let p = parent[a as usize];
        parent[a as usize] = parent[p as usize];
        a = p;
    }
    a
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // keep the older (smaller) provisional label as root
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labeling. Labels are dense from 1 and ordered by each
/// component's first voxel in scan order.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> LabelVolume {
    let (nx, ny, nz) = mask.dims();
    let bits = mask.bits();
    let offsets = connectivity.backward_offsets();
    let mut prov = vec![0u32; bits.len()];
    let mut parent: Vec<u32> = vec![0];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !bits[i] {
                    continue;
                }
                let mut current = 0u32;
                for &(dx, dy, dz) in &offsets {
                    let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 {
                        continue;
                    }
                    let j = xx as usize + nx * (yy as usize + ny * zz as usize);
                    let l = prov[j];
                    if l == 0 {
                        continue;
                    }
                    if current == 0 {
                        current = l;
                    } else if l != current {
                        union(&mut parent, current, l);
                    }
                }
                if current == 0 {
                    current = parent.len() as u32;
                    parent.push(current);
                }
                prov[i] = current;
            }
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut next = 0u32;
    for l in prov.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if remap[root] == 0 {
            next += 1;
            remap[root] = next;
        }
        *l = remap[root];
    }
    LabelVolume {
        dims: (nx, ny, nz),
        labels: prov,
    }
}

/// Labels the mask and gathers per-particle statistics (before any filtering).
pub fn connected_components(
    mask: &BinaryMask,
    spacing_um: f64,
    params: &ParticleParams,
) -> Result<(LabelVolume, ParticleSet)> {
    params.validate()?;
    if !(spacing_um > 0.0) {
        return Err(Error::InvalidParameter("spacing_um must be > 0".into()));
    }
    let labels = label_components(mask, params.connectivity);
    let (nx, ny, _) = mask.dims();
    let n = labels.labels.iter().copied().max().unwrap_or(0) as usize;
    let voxel_volume = spacing_um.powi(3);
    let mut particles: Vec<Particle> = (1..=n)
        .map(|id| Particle {
            id: id as u32,
            voxel_count: 0,
            volume_um3: 0.0,
            centroid_um: [0.0; 3],
            d_eq_um: 0.0,
            size_class: None,
            athero: None,
            cluster_id: None,
            topology: None,
            bbox: [[usize::MAX, 0]; 3],
            voxels: Vec::new(),
        })
        .collect();
    let mut sums = vec![[0u64; 3]; n];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let k = l as usize - 1;
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        let p = &mut particles[k];
        p.voxels.push(i);
        for (axis, c) in [x, y, z].into_iter().enumerate() {
            sums[k][axis] += c as u64;
            p.bbox[axis][0] = p.bbox[axis][0].min(c);
            p.bbox[axis][1] = p.bbox[axis][1].max(c);
        }
    }
    for (p, s) in particles.iter_mut().zip(&sums) {
        p.voxel_count = p.voxels.len();
        p.volume_um3 = p.voxel_count as f64 * voxel_volume;
        p.d_eq_um = equivalent_diameter(p.volume_um3);
        for axis in 0..3 {
            p.centroid_um[axis] = (s[axis] as f64 / p.voxel_count as f64 + 0.5) * spacing_um;
        }
    }
    let set = ParticleSet {
        particles,
        spacing_um,
        dims: mask.dims(),
        size_threshold_um: params.size_threshold_um,
        min_volume_voxels: params.min_volume_voxels,
    };
    Ok((labels, set))
}

/// Drops particles smaller than `min_volume_voxels`; survivors keep their ids.
pub fn filter_min_volume(mut set: ParticleSet) -> ParticleSet {
    let min = set.min_volume_voxels.max(1);
    set.particles.retain(|p| p.voxel_count >= min);
    set
}

/// Assigns micro (strictly below the threshold diameter) or macro.
pub fn classify_size(mut set: ParticleSet) -> ParticleSet {
    let threshold = set.size_threshold_um;
    for p in &mut set.particles {
        p.size_class = Some(if p.d_eq_um < threshold {
            SizeClass::Micro
        } else {
            SizeClass::Macro
        });
    }
    set
}

/// Components, volume filter and size classes in one call.
pub fn extract_particles(
    mask: &BinaryMask,
    spacing_um: f64,
    params: &ParticleParams,
) -> Result<ParticleSet> {
    let (_, set) = connected_components(mask, spacing_um, params)?;
    Ok(classify_size(filter_min_volume(set)))
}
