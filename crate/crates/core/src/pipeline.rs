//! End-to-end orchestration: segmentation (trained or loaded), calcification
//! thresholding, particles, phenotypes and the report, written into one run
//! directory with a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collagen::{
    label_by_collagen, local_density, search_density_threshold, split_two_level, AgreementScope,
    CouplingResult, DEFAULT_WINDOW_UM,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_scores, confusion_bits, report_timings, ScoreSummary, StageTimings, TimingReport};
use crate::particles::{extract_particles, ParticleParams, ParticleSet};
use crate::phantom::{annotated_slices, generate, PhantomSpec};
use crate::phenotype::{
    build_report, classify_micro_distribution, classify_topology, colocalize, fill_holes_per_slice,
    particle_csv, PhenotypeParams, PhenotypeReport,
};
use crate::segnet::{
    load_model, save_model, segment_lipid_stack, segment_sample_stack, threshold_segment, train_model,
    SegmentationModel, TrainConfig, TrainingSummary,
};
use crate::volume::{load_annotations, load_stack, save_mask, BinaryMask, SliceAnnotation, VoxelVolume};

/// Global threshold separating calcification from every other material.
pub const DEFAULT_CALCIFICATION_TAU: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Raw volume (with sidecar) or directory of slice images.
    pub stack: Option<PathBuf>,
    /// Sidecar overriding the default next to `stack`.
    pub stack_meta: Option<PathBuf>,
    /// Annotation manifest used for training.
    pub annotations: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Directory of saved models; training is skipped when set.
    pub models: Option<PathBuf>,
    pub calcification_tau: f64,
    pub train: TrainConfig,
    pub phenotype: PhenotypeParams,
    /// Renders this spec when no stack is given; its truth masks then supply
    /// the annotations of `phantom_slices`.
    pub phantom: Option<PhantomSpec>,
    /// Annotated phantom slices; defaults to every other of 25 uniform slices.
    pub phantom_slices: Option<Vec<usize>>,
    pub seed: u64,
    /// Worker threads; all available cores when unset.
    pub threads: Option<usize>,
    pub save_models: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stack: None,
            stack_meta: None,
            annotations: None,
            output_dir: PathBuf::from("run"),
            models: None,
            calcification_tau: DEFAULT_CALCIFICATION_TAU,
            train: TrainConfig::default(),
            phenotype: PhenotypeParams::default(),
            phantom: None,
            phantom_slices: None,
            seed: 0,
            threads: None,
            save_models: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Error,
    },
}

impl PipelineError {
    /// Process exit status: 2 for configuration errors, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }

    fn stage(stage: &str) -> impl FnOnce(Error) -> PipelineError + '_ {
        move |source| PipelineError::Stage {
            stage: stage.to_string(),
            source,
        }
    }
}

/// Every other slice of 25 uniformly spaced slices (13 of them).
pub fn default_training_slices(nz: usize) -> Vec<usize> {
    annotated_slices(nz, 25).into_iter().step_by(2).collect()
}

impl PipelineConfig {
    /// Checks paths and parameters before any compute.
    pub fn validate(&self) -> std::result::Result<(), PipelineError> {
        let cfg = |m: String| Err(PipelineError::Config(m));
        if self.output_dir.as_os_str().is_empty() {
            return cfg("output_dir is empty".into());
        }
        match (&self.stack, &self.phantom) {
            (Some(p), _) if !p.exists() => return cfg(format!("stack {} does not exist", p.display())),
            (None, None) => return cfg("either a stack or a phantom spec is required".into()),
            _ => {}
        }
        if let Some(m) = &self.stack_meta {
            if !m.exists() {
                return cfg(format!("stack sidecar {} does not exist", m.display()));
            }
        }
        if let Some(a) = &self.annotations {
            if !a.is_file() {
                return cfg(format!("annotation manifest {} does not exist", a.display()));
            }
        }
        if let Some(m) = &self.models {
            if !m.join("model.json").is_file() {
                return cfg(format!("{} holds no saved model", m.display()));
            }
        }
        let trainable = self.annotations.is_some() || (self.stack.is_none() && self.phantom.is_some());
        if self.models.is_none() && !trainable {
            return cfg("training needs an annotation manifest (or pass saved models)".into());
        }
        if !(0.0..=1.0).contains(&self.calcification_tau) {
            return cfg(format!("calcification_tau must lie in [0, 1], got {}", self.calcification_tau));
        }
        if self.threads == Some(0) {
            return cfg("threads must be >= 1".into());
        }
        let wrap = |e: Error| PipelineError::Config(e.to_string());
        self.train.validate().map_err(wrap)?;
        self.phenotype.validate().map_err(wrap)?;
        if let Some(spec) = &self.phantom {
            spec.validate().map_err(wrap)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// "complete" or "failed".
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub config_hash: String,
    pub completed_stages: Vec<String>,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

/// In-memory results of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub sample: BinaryMask,
    pub lipid: BinaryMask,
    pub calcification: BinaryMask,
    pub particles: ParticleSet,
    pub report: PhenotypeReport,
    pub timings: TimingReport,
    pub training: Option<TrainingSummary>,
    pub manifest: RunManifest,
}

/// Inputs after loading: a stack plus either annotations or a model.
pub struct PipelineInputs {
    pub volume: VoxelVolume,
    pub annotations: Vec<SliceAnnotation>,
    pub model: Option<SegmentationModel>,
}

struct Run<'a> {
    dir: &'a Path,
    manifest: RunManifest,
}

impl Run<'_> {
    fn done(&mut self, stage: &str) {
        self.manifest.completed_stages.push(stage.to_string());
    }

    fn artifact(&mut self, name: &str, file: &str) -> PathBuf {
        self.manifest.artifacts.insert(name.to_string(), file.to_string());
        self.dir.join(file)
    }

    fn write_manifest(&self) -> Result<()> {
        write_json(&self.dir.join("manifest.json"), &self.manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads the stack and the annotations or model named by `cfg`.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<PipelineInputs> {
    let volume;
    let mut annotations = Vec::new();
    match (&cfg.stack, &cfg.phantom) {
        (Some(stack), _) => {
            volume = load_stack(stack, cfg.stack_meta.as_deref())?;
        }
        (None, Some(spec)) => {
            let phantom = generate(spec)?;
            if cfg.annotations.is_none() && cfg.models.is_none() {
                let zs = cfg
                    .phantom_slices
                    .clone()
                    .unwrap_or_else(|| default_training_slices(phantom.volume.nz()));
                annotations = phantom.annotations(&zs)?;
            }
            volume = phantom.volume;
        }
        (None, None) => return Err(Error::InvalidParameter("no input stack".into())),
    }
    if let Some(a) = &cfg.annotations {
        annotations = load_annotations(a)?;
    }
    let model = match &cfg.models {
        Some(dir) => Some(load_model(dir)?),
        None => None,
    };
    Ok(PipelineInputs {
        volume,
        annotations,
        model,
    })
}

/// Validates, loads and runs the whole pipeline inside a worker pool of
/// `cfg.threads` threads.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let pool = build_pool(cfg.threads).map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| {
        fs::create_dir_all(&cfg.output_dir)
            .map_err(|e| PipelineError::stage("load")(Error::io(&cfg.output_dir, e)))?;
        let mut run = Run {
            dir: &cfg.output_dir,
            manifest: new_manifest(cfg),
        };
        let inputs = match load_inputs(cfg) {
            Ok(i) => i,
            Err(e) => return Err(fail(&mut run, "load", e)),
        };
        run.done("load");
        execute(&mut run, cfg, inputs)
    })
}

/// Runs the pipeline on already loaded inputs, writing into `cfg.output_dir`.
pub fn run_with_inputs(
    cfg: &PipelineConfig,
    inputs: PipelineInputs,
) -> std::result::Result<RunOutcome, PipelineError> {
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| PipelineError::stage("load")(Error::io(&cfg.output_dir, e)))?;
    let mut run = Run {
        dir: &cfg.output_dir,
        manifest: new_manifest(cfg),
    };
    execute(&mut run, cfg, inputs)
}

pub fn build_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

fn new_manifest(cfg: &PipelineConfig) -> RunManifest {
    RunManifest {
        status: "running".into(),
        failed_stage: None,
        error: None,
        config_hash: cfg.hash(),
        completed_stages: Vec::new(),
        artifacts: BTreeMap::new(),
    }
}

/// Records the failure in the manifest and converts it to a stage error.
fn fail(run: &mut Run, stage: &str, e: Error) -> PipelineError {
    run.manifest.status = "failed".into();
    run.manifest.failed_stage = Some(stage.to_string());
    run.manifest.error = Some(e.to_string());
    // the stage error is what matters to the caller
    let _ = run.write_manifest();
    PipelineError::stage(stage)(e)
}

fn execute(
    run: &mut Run,
    cfg: &PipelineConfig,
    inputs: PipelineInputs,
) -> std::result::Result<RunOutcome, PipelineError> {
    macro_rules! stage {
        ($name:expr, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => return Err(fail(run, $name, e)),
            }
        };
    }
    let PipelineInputs {
        volume,
        annotations,
        model,
    } = inputs;
    let spacing = volume.spacing_um();
    let mut timings = StageTimings::default();

    let (model, training) = match model {
        Some(m) => (m, None),
        None => {
            let mut tc = cfg.train.clone();
            tc.seed = cfg.seed;
            let (m, summary) = stage!("segmentation_sample", train_model(&volume, &annotations, &tc));
            timings.record("segmentation_sample", summary.sample_seconds);
            timings.record("segmentation_lipid", summary.lipid_seconds);
            if cfg.save_models {
                let dir = run.artifact("models", "models");
                stage!("segmentation_sample", save_model(&m, &dir));
                stage!(
                    "segmentation_sample",
                    write_json(&run.artifact("training", "training.json"), &summary)
                );
            }
            (m, Some(summary))
        }
    };

    let clock = Instant::now();
    let sample = stage!("segmentation_sample", segment_sample_stack(&volume, &model));
    timings.record("segmentation_sample", clock.elapsed().as_secs_f64());
    run.done("segmentation_sample");

    let clock = Instant::now();
    let lipid = stage!("segmentation_lipid", segment_lipid_stack(&volume, &model, &sample));
    timings.record("segmentation_lipid", clock.elapsed().as_secs_f64());
    run.done("segmentation_lipid");

    let clock = Instant::now();
    let calcification = stage!(
        "segmentation_calcification",
        threshold_segment(&volume, cfg.calcification_tau)
    );
    timings.record("segmentation_calcification", clock.elapsed().as_secs_f64());
    run.done("segmentation_calcification");

    let p = &cfg.phenotype;
    stage!("particle_identification", p.validate());
    let clock = Instant::now();
    let set = stage!(
        "particle_identification",
        extract_particles(&calcification, spacing, &p.particles)
    );
    timings.record("particle_identification", clock.elapsed().as_secs_f64());
    run.done("particle_identification");

    let clock = Instant::now();
    let set = stage!("clustering", classify_micro_distribution(set, &p.cluster));
    timings.record("clustering", clock.elapsed().as_secs_f64());
    run.done("clustering");

    let clock = Instant::now();
    let set = stage!("topology", classify_topology(set, &p.topology));
    timings.record("topology", clock.elapsed().as_secs_f64());
    run.done("topology");

    let clock = Instant::now();
    let set = if p.fill_lipid_holes {
        stage!("colocalization", colocalize(set, &fill_holes_per_slice(&lipid), p.colocalization))
    } else {
        stage!("colocalization", colocalize(set, &lipid, p.colocalization))
    };
    timings.record("colocalization", clock.elapsed().as_secs_f64());
    run.done("colocalization");

    let clock = Instant::now();
    let report = stage!("report", build_report(&sample, &lipid, &set));
    let csv = stage!("report", particle_csv(&set));
    for (name, mask) in [("sample", &sample), ("lipid", &lipid), ("calcification", &calcification)] {
        let path = run.artifact(&format!("{name}_mask"), &format!("{name}_mask.raw"));
        stage!("report", save_mask(mask, spacing, &path));
    }
    let path = run.artifact("particles", "particles.csv");
    stage!("report", fs::write(&path, csv).map_err(|e| Error::io(&path, e)));
    stage!("report", write_json(&run.artifact("report", "report.json"), &report));
    timings.record("report", clock.elapsed().as_secs_f64());
    run.done("report");

    let timing_report = report_timings(&timings);
    stage!("report", write_json(&run.artifact("timings", "timings.json"), &timing_report));
    run.manifest.status = "complete".into();
    stage!("report", run.write_manifest());
    Ok(RunOutcome {
        sample,
        lipid,
        calcification,
        particles: set,
        report,
        timings: timing_report,
        training,
        manifest: run.manifest.clone(),
    })
}

/// Scores of one annotated slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub z: usize,
    pub sample_dsc: f64,
    pub sample_jsc: f64,
    pub lipid_dsc: f64,
    pub lipid_jsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub slices: Vec<SliceScore>,
    pub sample_dsc: ScoreSummary,
    pub sample_jsc: ScoreSummary,
    pub lipid_dsc: ScoreSummary,
    pub lipid_jsc: ScoreSummary,
}

/// Scores predicted masks against the reference annotations slice by slice.
pub fn evaluate_masks(
    sample: &BinaryMask,
    lipid: &BinaryMask,
    reference: &[SliceAnnotation],
) -> Result<EvaluationReport> {
    if !sample.same_dims(lipid) {
        return Err(Error::DimensionMismatch(format!(
            "sample {:?} vs lipid {:?}",
            sample.dims(),
            lipid.dims()
        )));
    }
    let mut slices = Vec::with_capacity(reference.len());
    for a in reference {
        if a.z >= sample.nz() || a.sample.nx != sample.nx() || a.sample.ny != sample.ny() {
            return Err(Error::DimensionMismatch(format!(
                "annotation of slice {} does not fit a {:?} mask",
                a.z,
                sample.dims()
            )));
        }
        let s = confusion_bits(sample.slice_bits(a.z), &a.sample.bits)?;
        let l = confusion_bits(lipid.slice_bits(a.z), &a.lipid.bits)?;
        slices.push(SliceScore {
            z: a.z,
            sample_dsc: s.dsc(),
            sample_jsc: s.jsc(),
            lipid_dsc: l.dsc(),
            lipid_jsc: l.jsc(),
        });
    }
    let summary = |f: fn(&SliceScore) -> f64| aggregate_scores(&slices.iter().map(f).collect::<Vec<_>>());
    Ok(EvaluationReport {
        sample_dsc: summary(|s| s.sample_dsc)?,
        sample_jsc: summary(|s| s.sample_jsc)?,
        lipid_dsc: summary(|s| s.lipid_dsc)?,
        lipid_jsc: summary(|s| s.lipid_jsc)?,
        slices,
    })
}

/// Parameters of the collagen coupling analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CouplingConfig {
    pub window_um: f64,
    pub eps_grid_um: Vec<f64>,
    pub min_pts: usize,
    pub scope: AgreementScope,
    pub particles: ParticleParams,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            window_um: DEFAULT_WINDOW_UM,
            eps_grid_um: crate::collagen::default_eps_grid(),
            min_pts: crate::phenotype::ClusterParams::default().min_pts,
            scope: AgreementScope::AllParticles,
            particles: ParticleParams::default(),
        }
    }
}

/// Labels calcifications by collagen density and searches the clustering
/// radius whose density labels agree best.
pub fn collagen_coupling(
    calcification: &BinaryMask,
    collagen: &BinaryMask,
    spacing_um: f64,
    cfg: &CouplingConfig,
) -> Result<CouplingResult> {
    if !calcification.same_dims(collagen) {
        return Err(Error::DimensionMismatch(format!(
            "calcification {:?} vs collagen {:?}",
            calcification.dims(),
            collagen.dims()
        )));
    }
    let set = extract_particles(calcification, spacing_um, &cfg.particles)?;
    let field = local_density(collagen, cfg.window_um, spacing_um)?;
    let split = split_two_level(&field);
    let c = label_by_collagen(&set, &split)?;
    search_density_threshold(&set, &c, &cfg.eps_grid_um, cfg.min_pts, cfg.scope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_inputs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig {
            output_dir: dir.path().join("out"),
            ..Default::default()
        };
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        cfg.stack = Some(dir.path().join("absent.raw"));
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let stack = dir.path().join("s.raw");
        fs::write(&stack, b"").unwrap();
        cfg.stack = Some(stack);
        cfg.annotations = Some(dir.path().join("annotations.json"));
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("annotation manifest"), "{err}");
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn hash_tracks_config() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn evaluation_of_perfect_masks() {
        let mut s = BinaryMask::empty(4, 4, 2);
        s.set(1, 1, 0, true);
        let l = BinaryMask::empty(4, 4, 2);
        let anns = vec![SliceAnnotation::new(0, s.slice(0), l.slice(0)).unwrap()];
        let r = evaluate_masks(&s, &l, &anns).unwrap();
        assert_eq!(r.sample_dsc.mean, 1.0);
        assert_eq!(r.lipid_dsc.mean, 1.0);
        assert!(r.sample_dsc.single);
    }
}
