use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{train_conv_extractor, ConvExtractor, ExtractorConfig, ExtractorReport};
use super::features::{features_from_prob, otsu_threshold, N_FEATURES};
use super::infer::{segment_slice, SegmentationModel, StageModel};
use crate::error::{Error, Result};
use crate::optim::{
    lbfgs_minimize, loss_grad_flat, mlp_predict, Control, LbfgsConfig, MlpParams, StopReason,
    TrainingBatch, DEFAULT_HIDDEN,
};
use crate::volume::{BinaryMask, Mask2d, SliceAnnotation, VoxelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sample,
    Lipid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Epochs without validation improvement before the sample stage stops.
    pub patience_sample: usize,
    pub patience_lipid: usize,
    /// Upper bound on epochs (full-batch LBFGS iterations) per stage.
    pub max_epochs_sample: usize,
    pub max_epochs_lipid: usize,
    /// Training pixels kept per class (seeded subsample).
    pub pixel_cap: usize,
    /// Validation pixels scored per epoch (seeded uniform subsample).
    pub val_pixel_cap: usize,
    pub hidden: usize,
    /// Threshold for the thresholded-intensity feature; Otsu when unset.
    pub sample_threshold: Option<f64>,
    pub lipid_threshold: Option<f64>,
    pub extractor: ExtractorConfig,
    pub lbfgs: LbfgsConfig,
    /// Predicted sample components away from every training sample region
    /// are dropped unless they exceed this share of the slice area.
    pub min_component_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patience_sample: 45,
            patience_lipid: 15,
            max_epochs_sample: 500,
            max_epochs_lipid: 500,
            pixel_cap: 200_000,
            val_pixel_cap: 100_000,
            hidden: DEFAULT_HIDDEN,
            sample_threshold: None,
            lipid_threshold: None,
            extractor: ExtractorConfig::default(),
            lbfgs: LbfgsConfig {
                grad_tol: 1e-9,
                ..Default::default()
            },
            min_component_fraction: 0.001,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pixel_cap == 0 || self.val_pixel_cap == 0 || self.hidden == 0 {
            return Err(Error::InvalidParameter(
                "pixel_cap, val_pixel_cap and hidden must be >= 1".into(),
            ));
        }
        if self.max_epochs_sample == 0 || self.max_epochs_lipid == 0 {
            return Err(Error::InvalidParameter("max epochs must be >= 1".into()));
        }
        for t in [self.sample_threshold, self.lipid_threshold].into_iter().flatten() {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidParameter("feature thresholds must lie in [0, 1]".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.min_component_fraction) {
            return Err(Error::InvalidParameter("min_component_fraction must lie in [0, 1]".into()));
        }
        self.lbfgs.validate()
    }

    fn patience(&self, stage: Stage) -> usize {
        match stage {
            Stage::Sample => self.patience_sample,
            Stage::Lipid => self.patience_lipid,
        }
    }

    fn max_epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Sample => self.max_epochs_sample,
            Stage::Lipid => self.max_epochs_lipid,
        }
    }
}

/// Alternating split in z order: first slice to training, second to
/// validation, and so on.
pub fn split_train_val(annotated: &[SliceAnnotation]) -> Result<(Vec<SliceAnnotation>, Vec<SliceAnnotation>)> {
    if annotated.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "at least 2 annotated slices are required, got {}",
            annotated.len()
        )));
    }
    let mut sorted = annotated.to_vec();
    sorted.sort_by_key(|a| a.z);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, a) in sorted.into_iter().enumerate() {
        if i % 2 == 0 {
            train.push(a);
        } else {
            val.push(a);
        }
    }
    Ok((train, val))
}

/// Result of training one stage classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub val_accuracy: Vec<f64>,
    pub train_pixels: [usize; 2],
    pub val_pixels: usize,
    pub threshold: f64,
    pub stop: StopReason,
}

fn stage_label(stage: Stage, a: &SliceAnnotation) -> &Mask2d {
    match stage {
        Stage::Sample => &a.sample,
        Stage::Lipid => &a.lipid,
    }
}

/// Feature rows and labels for annotated slices, restricted to the
/// foreground for the lipid stage.
fn gather(
    volume: &VoxelVolume,
    slices: &[SliceAnnotation],
    stage: Stage,
    extractor: &ConvExtractor,
    threshold: f64,
    foreground: Option<&BinaryMask>,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut blocks = Vec::with_capacity(slices.len());
    let mut labels = Vec::new();
    for a in slices {
        let restrict = foreground.map(|f| f.slice(a.z));
        if restrict.as_ref().is_some_and(|r| r.count() == 0) {
            continue;
        }
        let prob = extractor.predict_slice(volume, a.z);
        let f = features_from_prob(volume, a.z, &prob, threshold, restrict.as_ref())?;
        let truth = stage_label(stage, a);
        labels.extend(f.pixels.iter().map(|&i| truth.bits[i] as usize));
        blocks.push(f.rows);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let rows = if views.is_empty() {
        Array2::zeros((0, N_FEATURES))
    } else {
        ndarray::concatenate(Axis(0), &views).expect("equal column counts")
    };
    Ok((rows, labels))
}

/// Keeps at most `cap` rows per class, chosen with a seeded generator and
/// kept in their original order.
fn subsample_per_class(labels: &[usize], cap: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for class in 0..2 {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() <= cap {
            keep.extend(idx);
        } else {
            let mut pick: Vec<usize> = rand::seq::index::sample(&mut rng, idx.len(), cap)
                .into_iter()
                .map(|k| idx[k])
                .collect();
            pick.sort_unstable();
            keep.extend(pick);
        }
    }
    keep.sort_unstable();
    keep
}

/// Trains one stage classifier with early stopping on validation pixel
/// accuracy; returns the best-validation parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    volume: &VoxelVolume,
    train: &[SliceAnnotation],
    val: &[SliceAnnotation],
    stage: Stage,
    extractor: &ConvExtractor,
    threshold: f64,
    foreground: Option<&BinaryMask>,
    cfg: &TrainConfig,
) -> Result<(MlpParams, StageReport)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidParameter("both splits need at least one slice".into()));
    }
    if stage == Stage::Lipid && foreground.is_none() {
        return Err(Error::InvalidParameter("the lipid stage needs a foreground mask".into()));
    }
    if let Some(f) = foreground {
        if !f.matches_volume(volume) {
            return Err(Error::DimensionMismatch("foreground mask vs volume".into()));
        }
    }
    let (x_all, y_all) = gather(volume, train, stage, extractor, threshold, foreground)?;
    if x_all.nrows() == 0 {
        return Err(Error::NoForeground);
    }
    let seed = cfg.seed.wrapping_add(match stage {
        Stage::Sample => 101,
        Stage::Lipid => 202,
    });
    let keep = subsample_per_class(&y_all, cfg.pixel_cap, seed);
    let x = x_all.select(Axis(0), &keep);
    let y: Vec<usize> = keep.iter().map(|&i| y_all[i]).collect();
    let counts = [y.iter().filter(|&&c| c == 0).count(), y.iter().filter(|&&c| c == 1).count()];
    if counts.contains(&0) {
        return Err(Error::Training(format!(
            "{stage:?} stage: a class is absent from the training pixels ({} / {})",
            counts[0], counts[1]
        )));
    }
    let batch = TrainingBatch::from_labels(x, &y, 2)?;
    let (xv, yv) = gather(volume, val, stage, extractor, threshold, foreground)?;
    if xv.nrows() == 0 {
        return Err(Error::NoForeground);
    }
    let (xv, yv) = if yv.len() > cfg.val_pixel_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a1);
        let mut pick = rand::seq::index::sample(&mut rng, yv.len(), cfg.val_pixel_cap).into_vec();
        pick.sort_unstable();
        let labels = pick.iter().map(|&i| yv[i]).collect::<Vec<_>>();
        (xv.select(Axis(0), &pick), labels)
    } else {
        (xv, yv)
    };

    let h = cfg.hidden;
    let init = MlpParams::init(N_FEATURES, h, 2, seed);
    let lcfg = LbfgsConfig {
        max_iters: cfg.max_epochs(stage),
        ..cfg.lbfgs.clone()
    };
    let patience = cfg.patience(stage);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut eval_error = None;
    let out = lbfgs_minimize(
        |p| loss_grad_flat(N_FEATURES, h, 2, p, &batch),
        &init.data,
        &lcfg,
        |state| {
            let params = MlpParams {
                n_in: N_FEATURES,
                n_hidden: h,
                n_out: 2,
                data: state.x.to_vec(),
            };
            let acc = match mlp_predict(&params, xv.view()) {
                Ok(pred) => pred.iter().zip(&yv).filter(|(a, b)| a == b).count() as f64 / yv.len() as f64,
                Err(e) => {
                    eval_error = Some(e);
                    return Control::Stop;
                }
            };
            history.push(acc);
            if best.as_ref().is_none_or(|b| acc > b.1) {
                best = Some((state.iteration, acc, params.data));
            }
            let best_epoch = best.as_ref().map_or(0, |b| b.0);
            if state.iteration - best_epoch >= patience {
                Control::Stop
            } else {
                Control::Continue
            }
        },
    )?;
    if let Some(e) = eval_error {
        return Err(e);
    }
    // no epoch completed (immediate convergence or stall): keep the start point
    let (best_epoch, best_acc, data) = match best {
        Some(b) => b,
        None => {
            let acc = crate::optim::accuracy(&init, xv.view(), &yv)?;
            (0, acc, out.x.clone())
        }
    };
    let report = StageReport {
        stage,
        epochs_run: out.iterations,
        best_epoch,
        best_val_accuracy: best_acc,
        val_accuracy: history,
        train_pixels: counts,
        val_pixels: yv.len(),
        threshold,
        stop: out.stop,
    };
    Ok((MlpParams::from_flat(N_FEATURES, h, 2, data)?, report))
}

/// Training diagnostics of a full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub train_slices: Vec<usize>,
    pub val_slices: Vec<usize>,
    pub sample_extractor: ExtractorReport,
    pub lipid_extractor: ExtractorReport,
    pub sample: StageReport,
    pub lipid: StageReport,
    /// Wall-clock training time of each stage; kept out of serialized output.
    #[serde(skip)]
    pub sample_seconds: f64,
    #[serde(skip)]
    pub lipid_seconds: f64,
}

/// Trains both stages from annotated slices: sample extractor and classifier,
/// then the lipid extractor and classifier on the predicted sample region.
pub fn train_model(
    volume: &VoxelVolume,
    annotated: &[SliceAnnotation],
    cfg: &TrainConfig,
) -> Result<(SegmentationModel, TrainingSummary)> {
    cfg.validate()?;
    for a in annotated {
        a.validate_for(volume)?;
    }
    let (train, val) = split_train_val(annotated)?;
    let (nx, ny) = (volume.nx(), volume.ny());
    let clock = Instant::now();

    let mut region = Mask2d::empty(nx, ny);
    for a in &train {
        for (r, &s) in region.bits.iter_mut().zip(&a.sample.bits) {
            *r |= s;
        }
    }

    let sample_threshold = cfg
        .sample_threshold
        .unwrap_or_else(|| otsu_threshold(train.iter().flat_map(|a| volume.slice(a.z).iter().copied())));
    let targets: Vec<(usize, &Mask2d)> = train.iter().map(|a| (a.z, &a.sample)).collect();
    let (sample_ex, sample_ex_report) = train_conv_extractor(volume, &targets, &cfg.extractor, cfg.seed)?;
    let (sample_mlp, sample_report) =
        train_stage(volume, &train, &val, Stage::Sample, &sample_ex, sample_threshold, None, cfg)?;
    let sample = StageModel {
        extractor: sample_ex,
        mlp: sample_mlp,
        threshold: sample_threshold,
    };

    let sample_seconds = clock.elapsed().as_secs_f64();
    let clock = Instant::now();

    // the lipid stage sees only the predicted sample region
    let mut model = SegmentationModel {
        sample,
        lipid: None,
        training_region: region,
        min_component_fraction: cfg.min_component_fraction,
    };
    let mut foreground = BinaryMask::like(volume);
    for a in train.iter().chain(&val) {
        let (s, _) = segment_slice(volume, &model, a.z)?;
        foreground.set_slice(a.z, &s)?;
    }

    let lipid_threshold = cfg.lipid_threshold.unwrap_or_else(|| {
        otsu_threshold(train.iter().flat_map(|a| {
            let s = volume.slice(a.z);
            a.sample
                .bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(move |(i, _)| s[i])
        }))
    });
    let targets: Vec<(usize, &Mask2d)> = train.iter().map(|a| (a.z, &a.lipid)).collect();
    let (lipid_ex, lipid_ex_report) =
        train_conv_extractor(volume, &targets, &cfg.extractor, cfg.seed.wrapping_add(1))?;
    let (lipid_mlp, lipid_report) = train_stage(
        volume,
        &train,
        &val,
        Stage::Lipid,
        &lipid_ex,
        lipid_threshold,
        Some(&foreground),
        cfg,
    )?;
    model.lipid = Some(StageModel {
        extractor: lipid_ex,
        mlp: lipid_mlp,
        threshold: lipid_threshold,
    });
    let summary = TrainingSummary {
        train_slices: train.iter().map(|a| a.z).collect(),
        val_slices: val.iter().map(|a| a.z).collect(),
        sample_extractor: sample_ex_report,
        lipid_extractor: lipid_ex_report,
        sample: sample_report,
        lipid: lipid_report,
        sample_seconds,
        lipid_seconds: clock.elapsed().as_secs_f64(),
    };
    Ok((model, summary))
}
