//! Two-stage semi-automatic segmentation of sample and lipid regions, plus
//! the global-threshold calcification segmenter.
//!
//! Each stage pairs a small convolutional extractor (probability map) with a
//! one-hidden-layer classifier over six per-pixel features. The lipid stage
//! only sees pixels that the sample stage accepted.

mod conv;
mod features;
mod infer;
mod train;

pub use conv::{
    sample_patches, train_conv_extractor, ConvExtractor, ExtractorConfig, ExtractorReport, Patch,
    CONV_PARAM_COUNT,
};
pub use features::{extract_features, features_from_prob, otsu_threshold, PixelFeatures, N_FEATURES};
pub use infer::{
    apply_foreground_filter, clean_sample_prediction, segment_lipid_stack, segment_sample_stack,
    segment_slice, segment_stack,
    threshold_baseline, threshold_segment, SegmentationModel, StageModel,
};
pub use train::{split_train_val, train_model, train_stage, Stage, StageReport, TrainConfig, TrainingSummary};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{read_params, write_params, MlpParams, ParamHeader, FEATURE_SCHEMA_VERSION};
use crate::volume::{load_mask_2d, save_mask_2d_png};
use infer::ModelMeta;

fn header(kind: &str, dims: Vec<usize>, count: usize) -> ParamHeader {
    ParamHeader {
        kind: kind.to_string(),
        dims,
        seed: 0,
        feature_schema_version: FEATURE_SCHEMA_VERSION,
        count,
        extra: Default::default(),
    }
}

fn save_stage(dir: &Path, name: &str, stage: &StageModel) -> Result<()> {
    let e = &stage.extractor.params;
    write_params(
        &dir.join(format!("{name}_extractor.bin")),
        &header("conv_extractor", vec![e.len()], e.len()),
        e,
    )?;
    let m = &stage.mlp;
    write_params(
        &dir.join(format!("{name}_mlp.bin")),
        &header("mlp", vec![m.n_in, m.n_hidden, m.n_out], m.data.len()),
        &m.data,
    )
}

fn load_stage(dir: &Path, name: &str, threshold: f64) -> Result<StageModel> {
    let (_, e) = read_params(&dir.join(format!("{name}_extractor.bin")))?;
    let path = dir.join(format!("{name}_mlp.bin"));
    let (h, m) = read_params(&path)?;
    if h.kind != "mlp" || h.dims.len() != 3 {
        return Err(Error::Descriptor {
            path,
            message: "not a classifier parameter file".into(),
        });
    }
    if h.feature_schema_version != FEATURE_SCHEMA_VERSION {
        return Err(Error::Descriptor {
            path,
            message: format!("feature schema {} is not supported", h.feature_schema_version),
        });
    }
    Ok(StageModel {
        extractor: ConvExtractor::from_params(e)?,
        mlp: MlpParams::from_flat(h.dims[0], h.dims[1], h.dims[2], m)?,
        threshold,
    })
}

/// Writes a trained model into `dir` (parameter files, training region PNG
/// and `model.json`).
pub fn save_model(model: &SegmentationModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_stage(dir, "sample", &model.sample)?;
    if let Some(l) = &model.lipid {
        save_stage(dir, "lipid", l)?;
    }
    save_mask_2d_png(&model.training_region, &dir.join("training_region.png"))?;
    let meta = ModelMeta {
        nx: model.training_region.nx,
        ny: model.training_region.ny,
        min_component_fraction: model.min_component_fraction,
        sample_threshold: model.sample.threshold,
        lipid_threshold: model.lipid.as_ref().map(|l| l.threshold),
        feature_schema_version: FEATURE_SCHEMA_VERSION,
    };
    let path = dir.join("model.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Serialization(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: &Path) -> Result<SegmentationModel> {
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| Error::Descriptor {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let sample = load_stage(dir, "sample", meta.sample_threshold)?;
    let lipid = match meta.lipid_threshold {
        Some(t) => Some(load_stage(dir, "lipid", t)?),
        None => None,
    };
    Ok(SegmentationModel {
        sample,
        lipid,
        training_region: load_mask_2d(&dir.join("training_region.png"), meta.nx, meta.ny)?,
        min_component_fraction: meta.min_component_fraction,
    })
}
