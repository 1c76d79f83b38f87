use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{assign_phenotype, Phenotype};
use crate::error::{Error, Result};
use crate::metrics::TimingReport;
use crate::particles::ParticleSet;
use crate::volume::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSummary {
    pub tissue_voxels: usize,
    pub lipid_voxels: usize,
    pub calcification_voxels: usize,
    pub tissue_um3: f64,
    pub lipid_um3: f64,
    pub calcification_um3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub lipid_to_tissue: f64,
    pub calc_to_tissue: f64,
    pub athero_calc_to_calc: f64,
    pub macro_to_calc: f64,
    pub clustered_micro_to_calc: f64,
}

/// Sparse and dense volume shares within one group of macros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroSplit {
    pub volume_voxels: usize,
    pub sparse_fraction: f64,
    pub dense_fraction: f64,
    /// The group holds no macro volume; both fractions are then 0.
    pub empty: bool,
}

/// Isolated and clustered volume shares within one group of micros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroSplit {
    pub volume_voxels: usize,
    pub isolated_fraction: f64,
    pub clustered_fraction: f64,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeReport {
    pub spacing_um: f64,
    pub volumes: VolumeSummary,
    pub ratios: Ratios,
    pub athero_macros: MacroSplit,
    pub non_athero_macros: MacroSplit,
    pub athero_micros: MicroSplit,
    pub non_athero_micros: MicroSplit,
    /// Particle count per phenotype label, all eight labels present.
    pub counts: BTreeMap<String, usize>,
    pub n_particles: usize,
    pub n_micro: usize,
    pub n_macro: usize,
    pub n_clusters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<TimingReport>,
}

impl PhenotypeReport {
    pub fn count(&self, p: Phenotype) -> usize {
        self.counts.get(p.as_str()).copied().unwrap_or(0)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn macro_split(sparse: usize, dense: usize) -> MacroSplit {
    let total = sparse + dense;
    MacroSplit {
        volume_voxels: total,
        sparse_fraction: ratio(sparse, total),
        dense_fraction: ratio(dense, total),
        empty: total == 0,
    }
}

fn micro_split(isolated: usize, clustered: usize) -> MicroSplit {
    let total = isolated + clustered;
    MicroSplit {
        volume_voxels: total,
        isolated_fraction: ratio(isolated, total),
        clustered_fraction: ratio(clustered, total),
        empty: total == 0,
    }
}

/// Volumetric ratios and phenotype counts. Calcification volume is the total
/// volume of the (filtered) particles.
pub fn build_report(tissue: &BinaryMask, lipid: &BinaryMask, set: &ParticleSet) -> Result<PhenotypeReport> {
    if !tissue.same_dims(lipid) {
        return Err(Error::DimensionMismatch(format!(
            "tissue {:?} vs lipid {:?}",
            tissue.dims(),
            lipid.dims()
        )));
    }
    let tissue_voxels = tissue.count();
    if tissue_voxels == 0 {
        return Err(Error::EmptyTissue);
    }
    let lipid_voxels = lipid.count();
    let mut counts: BTreeMap<String, usize> =
        Phenotype::ALL.iter().map(|p| (p.as_str().to_string(), 0)).collect();
    let (mut calc, mut athero, mut macro_v, mut clustered) = (0usize, 0usize, 0usize, 0usize);
    // [athero, non-athero] x [sparse, dense] and [isolated, clustered]
    let mut mac = [[0usize; 2]; 2];
    let mut mic = [[0usize; 2]; 2];
    let (mut n_micro, mut n_macro) = (0, 0);
    let mut clusters = std::collections::BTreeSet::new();
    for p in &set.particles {
        let ph = assign_phenotype(p)?;
        *counts.get_mut(ph.as_str()).expect("all labels present") += 1;
        let v = p.voxel_count;
        let g = if p.athero == Some(true) { 0 } else { 1 };
        calc += v;
        if g == 0 {
            athero += v;
        }
        if p.is_macro() {
            n_macro += 1;
            macro_v += v;
            let t = p.topology.expect("checked by assign_phenotype");
            mac[g][0] += t.sparse_voxels;
            mac[g][1] += t.dense_voxels;
        } else {
            n_micro += 1;
            match p.cluster_id {
                Some(c) => {
                    clustered += v;
                    mic[g][1] += v;
                    clusters.insert(c);
                }
                None => mic[g][0] += v,
            }
        }
    }
    let vv = set.voxel_volume_um3();
    Ok(PhenotypeReport {
        spacing_um: set.spacing_um,
        volumes: VolumeSummary {
            tissue_voxels,
            lipid_voxels,
            calcification_voxels: calc,
            tissue_um3: tissue_voxels as f64 * vv,
            lipid_um3: lipid_voxels as f64 * vv,
            calcification_um3: calc as f64 * vv,
        },
        ratios: Ratios {
            lipid_to_tissue: ratio(lipid_voxels, tissue_voxels),
            calc_to_tissue: ratio(calc, tissue_voxels),
            athero_calc_to_calc: ratio(athero, calc),
            macro_to_calc: ratio(macro_v, calc),
            clustered_micro_to_calc: ratio(clustered, calc),
        },
        athero_macros: macro_split(mac[0][0], mac[0][1]),
        non_athero_macros: macro_split(mac[1][0], mac[1][1]),
        athero_micros: micro_split(mic[0][0], mic[0][1]),
        non_athero_micros: micro_split(mic[1][0], mic[1][1]),
        counts,
        n_particles: set.particles.len(),
        n_micro,
        n_macro,
        n_clusters: clusters.len(),
        timings: None,
    })
}

/// One CSV row per particle, in id order.
pub fn particle_csv(set: &ParticleSet) -> Result<String> {
    let mut out = String::from(
        "id,voxel_count,volume_um3,d_eq_um,centroid_x_um,centroid_y_um,centroid_z_um,size_class,cluster_id,sparse_fraction,dense_fraction,athero,phenotype\n",
    );
    let mut ps: Vec<_> = set.particles.iter().collect();
    ps.sort_by_key(|p| p.id);
    for p in ps {
        let ph = assign_phenotype(p)?;
        let size = if p.is_micro() { "micro" } else { "macro" };
        let cluster = p.cluster_id.map(|c| c.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{:.6},{:.6},{},{}",
            p.id,
            p.voxel_count,
            p.volume_um3,
            p.d_eq_um,
            p.centroid_um[0],
            p.centroid_um[1],
            p.centroid_um[2],
            size,
            cluster,
            p.sparse_fraction(),
            p.dense_fraction(),
            p.athero == Some(true),
            ph
        )
        .expect("writing to a String");
    }
    Ok(out)
}

/// Per-voxel phenotype byte codes (0 outside particles).
pub fn phenotype_codes(set: &ParticleSet) -> Result<Vec<u8>> {
    let (nx, ny, nz) = set.dims;
    let mut codes = vec![0u8; nx * ny * nz];
    for p in &set.particles {
        let c = assign_phenotype(p)?.code();
        for &i in &p.voxels {
            codes[i] = c;
        }
    }
    Ok(codes)
}
