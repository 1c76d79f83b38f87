//! Phenotype axes of calcification particles (micro distribution, macro
//! topology, lipid co-localization) and the volumetric report built from them.

mod dbscan;
mod report;
mod topology;

pub use dbscan::{cluster_count, dbscan, ClusterParams};
pub use report::{
    build_report, particle_csv, phenotype_codes, MacroSplit, MicroSplit, PhenotypeReport, Ratios,
    VolumeSummary,
};
pub use topology::{
    classify_macro_mask, classify_macro_topology, classify_topology, fill_small_cavities, MacroTopology,
    TopologyParams,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::{extract_particles, ParticleParams, ParticleSet};
use crate::volume::BinaryMask;

/// Clustered/isolated labels for micros; macros keep `cluster_id = None`.
pub fn classify_micro_distribution(mut set: ParticleSet, params: &ClusterParams) -> Result<ParticleSet> {
    params.validate()?;
    let idx: Vec<usize> = (0..set.particles.len())
        .filter(|&i| set.particles[i].is_micro())
        .collect();
    let points: Vec<[f64; 3]> = idx.iter().map(|&i| set.particles[i].centroid_um).collect();
    let labels = dbscan(&points, params)?;
    for p in &mut set.particles {
        p.cluster_id = None;
    }
    for (&i, l) in idx.iter().zip(labels) {
        set.particles[i].cluster_id = l;
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Colocalization {
    /// Athero when at least this share of the particle's voxels is lipid.
    Overlap { fraction: f64 },
    /// Athero when the voxel holding the centroid is lipid.
    Centroid,
}

impl Default for Colocalization {
    fn default() -> Self {
        Colocalization::Overlap { fraction: 0.5 }
    }
}

pub fn colocalize(mut set: ParticleSet, lipid: &BinaryMask, mode: Colocalization) -> Result<ParticleSet> {
    if lipid.dims() != set.dims {
        return Err(Error::DimensionMismatch(format!(
            "lipid mask {:?} vs particle grid {:?}",
            lipid.dims(),
            set.dims
        )));
    }
    let bits = lipid.bits();
    match mode {
        Colocalization::Overlap { fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::InvalidParameter("overlap fraction must lie in [0, 1]".into()));
            }
            for p in &mut set.particles {
                let inside = p.voxels.iter().filter(|&&i| bits[i]).count();
                p.athero = Some(inside as f64 >= fraction * p.voxel_count as f64);
            }
        }
        Colocalization::Centroid => {
            let s = set.spacing_um;
            let (nx, ny, nz) = set.dims;
            for p in &mut set.particles {
                let c = |a: usize, n: usize| ((p.centroid_um[a] / s).floor().max(0.0) as usize).min(n - 1);
                p.athero = Some(lipid.get(c(0, nx), c(1, ny), c(2, nz)));
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phenotype {
    #[serde(rename = "athero-isolated-micro")]
    AtheroIsolatedMicro,
    #[serde(rename = "athero-clustered-micro")]
    AtheroClusteredMicro,
    #[serde(rename = "athero-sparse-macro")]
    AtheroSparseMacro,
    #[serde(rename = "athero-dense-macro")]
    AtheroDenseMacro,
    #[serde(rename = "non-athero-isolated-micro")]
    NonAtheroIsolatedMicro,
    #[serde(rename = "non-athero-clustered-micro")]
    NonAtheroClusteredMicro,
    #[serde(rename = "non-athero-sparse-macro")]
    NonAtheroSparseMacro,
    #[serde(rename = "non-athero-dense-macro")]
    NonAtheroDenseMacro,
}

impl Phenotype {
    pub const ALL: [Phenotype; 8] = [
        Phenotype::AtheroIsolatedMicro,
        Phenotype::AtheroClusteredMicro,
        Phenotype::AtheroSparseMacro,
        Phenotype::AtheroDenseMacro,
        Phenotype::NonAtheroIsolatedMicro,
        Phenotype::NonAtheroClusteredMicro,
        Phenotype::NonAtheroSparseMacro,
        Phenotype::NonAtheroDenseMacro,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phenotype::AtheroIsolatedMicro => "athero-isolated-micro",
            Phenotype::AtheroClusteredMicro => "athero-clustered-micro",
            Phenotype::AtheroSparseMacro => "athero-sparse-macro",
            Phenotype::AtheroDenseMacro => "athero-dense-macro",
            Phenotype::NonAtheroIsolatedMicro => "non-athero-isolated-micro",
            Phenotype::NonAtheroClusteredMicro => "non-athero-clustered-micro",
            Phenotype::NonAtheroSparseMacro => "non-athero-sparse-macro",
            Phenotype::NonAtheroDenseMacro => "non-athero-dense-macro",
        }
    }

    /// Byte code used in phenotype label volumes (0 is background).
    pub fn code(self) -> u8 {
        Phenotype::ALL.iter().position(|&p| p == self).unwrap() as u8 + 1
    }
}

impl std::fmt::Display for Phenotype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn assign_phenotype(p: &crate::particles::Particle) -> Result<Phenotype> {
    use crate::particles::SizeClass;
    let athero = p.athero.ok_or(Error::UnsetAxis {
        id: p.id,
        axis: "co-localization",
    })?;
    let size = p.size_class.ok_or(Error::UnsetAxis { id: p.id, axis: "size" })?;
    Ok(match (athero, size) {
        (true, SizeClass::Micro) if p.cluster_id.is_some() => Phenotype::AtheroClusteredMicro,
        (true, SizeClass::Micro) => Phenotype::AtheroIsolatedMicro,
        (false, SizeClass::Micro) if p.cluster_id.is_some() => Phenotype::NonAtheroClusteredMicro,
        (false, SizeClass::Micro) => Phenotype::NonAtheroIsolatedMicro,
        (_, SizeClass::Macro) => {
            let t = p.topology.ok_or(Error::UnsetAxis {
                id: p.id,
                axis: "topology",
            })?;
            // ties go to dense
            let sparse = t.sparse_voxels > t.dense_voxels;
            match (athero, sparse) {
                (true, true) => Phenotype::AtheroSparseMacro,
                (true, false) => Phenotype::AtheroDenseMacro,
                (false, true) => Phenotype::NonAtheroSparseMacro,
                (false, false) => Phenotype::NonAtheroDenseMacro,
            }
        }
    })
}

/// Every parameter block of the particle and phenotype stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhenotypeParams {
    pub particles: ParticleParams,
    pub cluster: ClusterParams,
    pub topology: TopologyParams,
    pub colocalization: Colocalization,
    /// Fill enclosed holes of the lipid mask slice by slice before
    /// co-localization, so bright inclusions inside a pool count as inside.
    pub fill_lipid_holes: bool,
}

impl Default for PhenotypeParams {
    fn default() -> Self {
        Self {
            particles: ParticleParams::default(),
            cluster: ClusterParams::default(),
            topology: TopologyParams::default(),
            colocalization: Colocalization::default(),
            fill_lipid_holes: true,
        }
    }
}

impl PhenotypeParams {
    pub fn validate(&self) -> Result<()> {
        self.particles.validate()?;
        self.cluster.validate()?;
        if !(self.topology.opening_radius_um > 0.0) {
            return Err(Error::InvalidParameter("opening_radius_um must be > 0".into()));
        }
        Ok(())
    }
}

/// Slice-wise hole filling of a mask.
pub fn fill_holes_per_slice(mask: &BinaryMask) -> BinaryMask {
    let mut out = mask.clone();
    for z in 0..mask.nz() {
        out.set_slice(z, &mask.slice(z).fill_holes())
            .expect("slice dims match");
    }
    out
}

/// Particles through all four phenotype axes.
pub fn phenotype_particles(
    calcification: &BinaryMask,
    lipid: &BinaryMask,
    spacing_um: f64,
    params: &PhenotypeParams,
) -> Result<ParticleSet> {
    params.validate()?;
    let set = extract_particles(calcification, spacing_um, &params.particles)?;
    let set = classify_micro_distribution(set, &params.cluster)?;
    let set = classify_topology(set, &params.topology)?;
    if params.fill_lipid_holes {
        colocalize(set, &fill_holes_per_slice(lipid), params.colocalization)
    } else {
        colocalize(set, lipid, params.colocalization)
    }
}
