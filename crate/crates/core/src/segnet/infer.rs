use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::ConvExtractor;
use super::features::{features_from_prob, otsu_threshold};
use crate::error::{Error, Result};
use crate::optim::{mlp_predict, MlpParams};
use crate::volume::{BinaryMask, Mask2d, VoxelVolume};

/// Extractor, classifier and feature threshold of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModel {
    pub extractor: ConvExtractor,
    pub mlp: MlpParams,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub sample: StageModel,
    /// Absent while only the sample stage is trained.
    pub lipid: Option<StageModel>,
    /// Union of the training-slice sample annotations.
    pub training_region: Mask2d,
    pub min_component_fraction: f64,
}

/// Pixels of a slice that pass the sample prediction.
pub fn apply_foreground_filter(slice: &[f32], prediction: &Mask2d) -> Result<Vec<usize>> {
    if slice.len() != prediction.bits.len() {
        return Err(Error::DimensionMismatch(format!(
            "slice of {} pixels vs prediction of {}",
            slice.len(),
            prediction.bits.len()
        )));
    }
    Ok((0..slice.len()).filter(|&i| prediction.bits[i]).collect())
}

/// 8-connected components of a 2D mask as lists of pixel indices.
fn components_2d(m: &Mask2d) -> Vec<Vec<usize>> {
    let (nx, ny) = (m.nx, m.ny);
    let mut seen = vec![false; m.bits.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..m.bits.len() {
        if !m.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y) = ((i % nx) as i64, (i / nx) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (a, b) = (x + dx, y + dy);
                    if a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 {
                        continue;
                    }
                    let j = b as usize * nx + a as usize;
                    if m.bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Drops predicted sample components that touch no training sample region and
/// cover at most `min_fraction` of the slice.
pub fn clean_sample_prediction(pred: &Mask2d, region: &Mask2d, min_fraction: f64) -> Mask2d {
    let area = (pred.bits.len() as f64 * min_fraction).floor() as usize;
    let mut out = Mask2d::empty(pred.nx, pred.ny);
    for comp in components_2d(pred) {
        let keep = comp.len() > area || comp.iter().any(|&i| region.bits[i]);
        if keep {
            for i in comp {
                out.bits[i] = true;
            }
        }
    }
    out
}

fn classify(
    volume: &VoxelVolume,
    stage: &StageModel,
    z: usize,
    restrict: Option<&Mask2d>,
) -> Result<Mask2d> {
    let (nx, ny) = (volume.nx(), volume.ny());
    let mut out = Mask2d::empty(nx, ny);
    if restrict.is_some_and(|r| r.count() == 0) {
        return Ok(out);
    }
    let prob = stage.extractor.predict_slice(volume, z);
    let f = features_from_prob(volume, z, &prob, stage.threshold, restrict)?;
    let pred = mlp_predict(&stage.mlp, f.rows.view())?;
    for (&i, &c) in f.pixels.iter().zip(&pred) {
        out.bits[i] = c == 1;
    }
    Ok(out)
}

/// Sample and lipid masks of one slice.
pub fn segment_slice(volume: &VoxelVolume, model: &SegmentationModel, z: usize) -> Result<(Mask2d, Mask2d)> {
    let raw = classify(volume, &model.sample, z, None)?;
    let sample = clean_sample_prediction(&raw, &model.training_region, model.min_component_fraction);
    let lipid = match &model.lipid {
        Some(stage) => classify(volume, stage, z, Some(&sample))?,
        None => Mask2d::empty(volume.nx(), volume.ny()),
    };
    Ok((sample, lipid))
}

fn check_dims(volume: &VoxelVolume, model: &SegmentationModel) -> Result<()> {
    let (nx, ny, _) = volume.dims();
    if model.training_region.nx != nx || model.training_region.ny != ny {
        return Err(Error::DimensionMismatch(format!(
            "model trained on {}x{} slices, stack has {nx}x{ny}",
            model.training_region.nx, model.training_region.ny
        )));
    }
    Ok(())
}

/// Slice-parallel sample segmentation with component cleanup.
pub fn segment_sample_stack(volume: &VoxelVolume, model: &SegmentationModel) -> Result<BinaryMask> {
    check_dims(volume, model)?;
    let (nx, ny, nz) = volume.dims();
    let slices: Vec<Mask2d> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let raw = classify(volume, &model.sample, z, None)?;
            Ok(clean_sample_prediction(&raw, &model.training_region, model.min_component_fraction))
        })
        .collect::<Result<_>>()?;
    BinaryMask::from_slices(nx, ny, &slices)
}

/// Slice-parallel lipid segmentation restricted to a sample mask. Empty when
/// the model has no lipid stage.
pub fn segment_lipid_stack(
    volume: &VoxelVolume,
    model: &SegmentationModel,
    sample: &BinaryMask,
) -> Result<BinaryMask> {
    check_dims(volume, model)?;
    if !sample.matches_volume(volume) {
        return Err(Error::DimensionMismatch(format!(
            "sample mask {:?} vs stack {:?}",
            sample.dims(),
            volume.dims()
        )));
    }
    let Some(stage) = &model.lipid else {
        return Ok(BinaryMask::like(volume));
    };
    let (nx, ny, nz) = volume.dims();
    let slices: Vec<Mask2d> = (0..nz)
        .into_par_iter()
        .map(|z| classify(volume, stage, z, Some(&sample.slice(z))))
        .collect::<Result<_>>()?;
    BinaryMask::from_slices(nx, ny, &slices)
}

/// Slice-parallel segmentation of the whole stack. The lipid mask is always a
/// subset of the sample mask.
pub fn segment_stack(volume: &VoxelVolume, model: &SegmentationModel) -> Result<(BinaryMask, BinaryMask)> {
    let sample = segment_sample_stack(volume, model)?;
    let lipid = segment_lipid_stack(volume, model, &sample)?;
    Ok((sample, lipid))
}

/// Voxels strictly brighter than `tau`.
pub fn threshold_segment(volume: &VoxelVolume, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidParameter(format!("tau must lie in [0, 1], got {tau}")));
    }
    let (nx, ny, nz) = volume.dims();
    let bits: Vec<bool> = volume.data().par_iter().map(|&v| v as f64 > tau).collect();
    BinaryMask::new(nx, ny, nz, bits)
}

/// Global-threshold segmentation of sample and lipid without any training.
///
/// Sample: intensities above the Otsu threshold of the whole stack, holes
/// filled per slice. Lipid: sample voxels not brighter than the Otsu
/// threshold computed over sample intensities at or below `tau` (which
/// excludes calcification).
pub fn threshold_baseline(volume: &VoxelVolume, tau: f64) -> Result<(BinaryMask, BinaryMask)> {
    let t0 = otsu_threshold(volume.data().iter().copied());
    let above = threshold_segment(volume, t0)?;
    let (nx, ny, nz) = volume.dims();
    let mut sample = BinaryMask::empty(nx, ny, nz);
    for z in 0..nz {
        sample.set_slice(z, &above.slice(z).fill_holes())?;
    }
    let data = volume.data();
    let t1 = otsu_threshold(
        sample
            .bits()
            .iter()
            .zip(data)
            .filter(|(&s, &v)| s && (v as f64) <= tau)
            .map(|(_, &v)| v),
    );
    let lipid_bits: Vec<bool> = sample
        .bits()
        .iter()
        .zip(data)
        .map(|(&s, &v)| s && (v as f64) <= t1)
        .collect();
    Ok((sample, BinaryMask::new(nx, ny, nz, lipid_bits)?))
}

/// Training-region and cleanup settings stored next to the parameter files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct ModelMeta {
    pub nx: usize,
    pub ny: usize,
    pub min_component_fraction: f64,
    pub sample_threshold: f64,
    pub lipid_threshold: Option<f64>,
    pub feature_schema_version: u32,
}
