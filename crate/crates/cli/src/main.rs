use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use calcscope::particles::extract_particles;
use calcscope::phantom::{annotated_slices, generate, PhantomSpec, PhantomTemplate};
use calcscope::phenotype::{
    build_report, classify_micro_distribution, classify_topology, colocalize, fill_holes_per_slice,
    particle_csv, PhenotypeParams,
};
use calcscope::pipeline::{
    build_pool, collagen_coupling, evaluate_masks, run_pipeline, CouplingConfig, PipelineConfig, PipelineError,
};
use calcscope::segnet::{load_model, save_model, segment_stack, threshold_segment, train_model, TrainConfig};
use calcscope::volume::{load_annotations, load_mask, load_stack, save_annotations, save_mask, save_volume};

#[derive(Parser)]
#[command(name = "calcscope", version, about = "Calcification phenotyping for volumetric stacks")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic stack with truth masks, truth report and annotations.
    Phantom {
        /// Built-in layout: standard, compact or collagen.
        #[arg(long, default_value = "compact", conflicts_with = "spec")]
        template: String,
        /// Spec JSON instead of a template.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Uniformly spaced annotated slices; even ones go to training.
        #[arg(long, default_value_t = 25)]
        annotated: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both segmentation stages from annotated slices.
    Train {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// TrainConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Model directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment sample and lipid with a saved model.
    Segment {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Also write the thresholded calcification mask.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score sample and lipid masks against annotated slices.
    Evaluate {
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        lipid: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Write the per-slice report here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract particles, assign phenotypes and build the report.
    Phenotype {
        #[arg(long)]
        calcification: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        lipid: PathBuf,
        /// PhenotypeParams JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collagen coupling search over clustering radii.
    Collagen {
        #[arg(long)]
        calcification: PathBuf,
        #[arg(long)]
        collagen: PathBuf,
        /// CouplingConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline from a PipelineConfig JSON, with flag overrides.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stack: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Render this built-in phantom instead of reading a stack.
        #[arg(long)]
        phantom: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Invalid invocation or configuration (exit status 2).
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(config_err(format!("{what} {} does not exist", path.display())))
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn read_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn phantom_cmd(template: &str, spec: Option<&Path>, seed: u64, annotated: usize, out: &Path) -> Result<()> {
    let spec: PhantomSpec = match spec {
        Some(p) => read_json(p)?,
        None => template
            .parse::<PhantomTemplate>()
            .map_err(|e| config_err(e.to_string()))?
            .spec(seed)?,
    };
    spec.validate().map_err(|e| config_err(e.to_string()))?;
    let p = generate(&spec)?;
    create_dir(out)?;
    let spacing = spec.spacing_um;
    save_volume(&p.volume, &out.join("volume.raw"))?;
    save_mask(&p.tissue, spacing, &out.join("tissue_mask.raw"))?;
    save_mask(&p.lipid, spacing, &out.join("lipid_mask.raw"))?;
    save_mask(&p.calcification, spacing, &out.join("calcification_mask.raw"))?;
    if let Some(c) = &p.collagen {
        save_mask(c, spacing, &out.join("collagen_mask.raw"))?;
    }
    write_json(&out.join("spec.json"), &spec)?;
    write_json(&out.join("truth.json"), &p.truth)?;
    if annotated > 0 {
        let zs = annotated_slices(p.volume.nz(), annotated);
        let train: Vec<usize> = zs.iter().step_by(2).copied().collect();
        let test: Vec<usize> = zs.iter().skip(1).step_by(2).copied().collect();
        save_annotations(&out.join("annotations_train"), &p.annotations(&train)?)?;
        if !test.is_empty() {
            save_annotations(&out.join("annotations_test"), &p.annotations(&test)?)?;
        }
    }
    println!("wrote phantom to {}", out.display());
    Ok(())
}

fn train_cmd(stack: &Path, annotations: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    require(stack, "stack")?;
    require(annotations, "annotation manifest")?;
    let mut cfg: TrainConfig = read_or_default(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    let volume = load_stack(stack, None)?;
    let anns = load_annotations(annotations)?;
    let (model, summary) = train_model(&volume, &anns, &cfg)?;
    save_model(&model, out)?;
    write_json(&out.join("training.json"), &summary)?;
    println!(
        "sample: {} epochs, val accuracy {:.4}; lipid: {} epochs, val accuracy {:.4}",
        summary.sample.epochs_run,
        summary.sample.best_val_accuracy,
        summary.lipid.epochs_run,
        summary.lipid.best_val_accuracy
    );
    Ok(())
}

fn segment_cmd(stack: &Path, models: &Path, tau: Option<f64>, out: &Path) -> Result<()> {
    require(stack, "stack")?;
    require(models, "model directory")?;
    if let Some(t) = tau {
        if !(0.0..=1.0).contains(&t) {
            return Err(config_err(format!("tau must lie in [0, 1], got {t}")));
        }
    }
    let volume = load_stack(stack, None)?;
    let model = load_model(models)?;
    let (sample, lipid) = segment_stack(&volume, &model)?;
    create_dir(out)?;
    let spacing = volume.spacing_um();
    save_mask(&sample, spacing, &out.join("sample_mask.raw"))?;
    save_mask(&lipid, spacing, &out.join("lipid_mask.raw"))?;
    if let Some(t) = tau {
        save_mask(&threshold_segment(&volume, t)?, spacing, &out.join("calcification_mask.raw"))?;
    }
    println!("sample {} voxels, lipid {} voxels", sample.count(), lipid.count());
    Ok(())
}

fn evaluate_cmd(sample: &Path, lipid: &Path, annotations: &Path, out: Option<&Path>) -> Result<()> {
    for (p, what) in [(sample, "sample mask"), (lipid, "lipid mask"), (annotations, "annotation manifest")] {
        require(p, what)?;
    }
    let (s, _) = load_mask(sample)?;
    let (l, _) = load_mask(lipid)?;
    let anns = load_annotations(annotations)?;
    let r = evaluate_masks(&s, &l, &anns)?;
    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "z", "sample_dsc", "sample_jsc", "lipid_dsc", "lipid_jsc");
    for s in &r.slices {
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            s.z, s.sample_dsc, s.sample_jsc, s.lipid_dsc, s.lipid_jsc
        );
    }
    println!(
        "mean sample DSC {:.4} ± {:.4}, lipid DSC {:.4} ± {:.4}",
        r.sample_dsc.mean, r.sample_dsc.std, r.lipid_dsc.mean, r.lipid_dsc.std
    );
    if let Some(o) = out {
        write_json(o, &r)?;
    }
    Ok(())
}

fn phenotype_cmd(calcification: &Path, sample: &Path, lipid: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    for (p, what) in [(calcification, "calcification mask"), (sample, "sample mask"), (lipid, "lipid mask")] {
        require(p, what)?;
    }
    let params: PhenotypeParams = read_or_default(config)?;
    params.validate().map_err(|e| config_err(e.to_string()))?;
    let (calc, spacing) = load_mask(calcification)?;
    let (tissue, _) = load_mask(sample)?;
    let (lip, _) = load_mask(lipid)?;
    let set = extract_particles(&calc, spacing, &params.particles)?;
    let set = classify_micro_distribution(set, &params.cluster)?;
    let set = classify_topology(set, &params.topology)?;
    let set = if params.fill_lipid_holes {
        colocalize(set, &fill_holes_per_slice(&lip), params.colocalization)?
    } else {
        colocalize(set, &lip, params.colocalization)?
    };
    let report = build_report(&tissue, &lip, &set)?;
    create_dir(out)?;
    fs::write(out.join("particles.csv"), particle_csv(&set)?)?;
    write_json(&out.join("report.json"), &report)?;
    for (label, n) in &report.counts {
        println!("{label:<28}{n:>6}");
    }
    Ok(())
}

fn collagen_cmd(calcification: &Path, collagen: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    require(calcification, "calcification mask")?;
    require(collagen, "collagen mask")?;
    let cfg: CouplingConfig = read_or_default(config)?;
    let (calc, spacing) = load_mask(calcification)?;
    let (coll, _) = load_mask(collagen)?;
    let r = collagen_coupling(&calc, &coll, spacing, &cfg)?;
    println!(
        "best eps {:.1} um, agreement {:.3}, converged {}",
        r.best_eps_um, r.agreement, r.converged
    );
    if let Some(o) = out {
        write_json(o, &r)?;
    }
    Ok(())
}

struct RunArgs {
    config: Option<PathBuf>,
    stack: Option<PathBuf>,
    annotations: Option<PathBuf>,
    models: Option<PathBuf>,
    phantom: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn run_cmd(a: RunArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg: PipelineConfig = read_or_default(a.config.as_deref())?;
    if let Some(s) = a.stack {
        cfg.stack = Some(s);
    }
    if let Some(p) = a.annotations {
        cfg.annotations = Some(p);
    }
    if let Some(m) = a.models {
        cfg.models = Some(m);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.phantom {
        let template = t.parse::<PhantomTemplate>().map_err(|e| config_err(e.to_string()))?;
        cfg.phantom = Some(template.spec(cfg.seed)?);
    }
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    let outcome = run_pipeline(&cfg)?;
    print!("{}", outcome.timings.table());
    for (label, n) in &outcome.report.counts {
        println!("{label:<28}{n:>6}");
    }
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    if threads == Some(0) {
        return Err(config_err("--threads must be >= 1"));
    }
    if let Command::Run {
        config,
        stack,
        annotations,
        models,
        phantom,
        seed,
        out,
    } = cli.command
    {
        // the pipeline builds its own pool from the config
        return run_cmd(
            RunArgs {
                config,
                stack,
                annotations,
                models,
                phantom,
                seed,
                out,
            },
            threads,
        );
    }
    let pool = build_pool(threads)?;
    pool.install(|| match cli.command {
        Command::Phantom {
            template,
            spec,
            seed,
            annotated,
            out,
        } => phantom_cmd(&template, spec.as_deref(), seed, annotated, &out),
        Command::Train {
            stack,
            annotations,
            config,
            seed,
            out,
        } => train_cmd(&stack, &annotations, config.as_deref(), seed, &out),
        Command::Segment { stack, models, tau, out } => segment_cmd(&stack, &models, tau, &out),
        Command::Evaluate {
            sample,
            lipid,
            annotations,
            out,
        } => evaluate_cmd(&sample, &lipid, &annotations, out.as_deref()),
        Command::Phenotype {
            calcification,
            sample,
            lipid,
            config,
            out,
        } => phenotype_cmd(&calcification, &sample, &lipid, config.as_deref(), &out),
        Command::Collagen {
            calcification,
            collagen,
            config,
            out,
        } => collagen_cmd(&calcification, &collagen, config.as_deref(), out.as_deref()),
        Command::Run { .. } => unreachable!("handled above"),
    })
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        return p.exit_code() as u8;
    }
    if e.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
