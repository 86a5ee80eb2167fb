use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use brain3d_core::align::retrieval_accuracy;
use brain3d_core::config::PipelineConfig;
use brain3d_core::dataset::{load_manifest, synth_dataset, EegTrial, Split};
use brain3d_core::geometry::{load_obj, Mode};
use brain3d_core::image::RgbImage;
use brain3d_core::pipeline::{
    run_ablation, run_pipeline, train_models, Pipeline, Providers, RunReport, ALIGN_CHECKPOINT, DENOISER_CHECKPOINT,
};
use brain3d_core::renderer::{canonical_views, export_camera_config, render_all, ViewLabel};
use brain3d_core::report::{ablation_block, render_table, report_values, Layout, ReportTable};

#[derive(Parser)]
#[command(name = "brain3d", version, about = "EEG to 3D reconstruction pipeline and evaluation harness")]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Direct,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => Mode::Full,
            ModeArg::Direct => Mode::Direct,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Gt,
    Intermediate,
    Ablation,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config with every setting spelled out.
    DefaultConfig,
    /// Validate a dataset manifest and summarize it.
    Ingest {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write the synthetic dataset described by the config's [synth] section.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the alignment encoders and the conditional denoiser on the train split.
    TrainAlign {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint directory; defaults to the config's models_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pipeline over the selected trials.
    Run {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        trials: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run full and direct modes on the same trials and write the ablation table.
    Ablate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        trials: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the canonical views of an OBJ mesh.
    RenderViews {
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a directory of rendered views against a reference image.
    Evaluate {
        /// Directory holding <label>.ppm for every canonical view.
        views: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Decoded image for the second evaluation target; defaults to the reference.
        #[arg(long)]
        intermediate: Option<PathBuf>,
    },
    /// Render a results table from run reports.
    Report {
        #[arg(long, value_enum)]
        layout: LayoutArg,
        /// report.json of the run; the full-mode run for the ablation layout.
        report: PathBuf,
        /// report.json of the direct-mode run (ablation layout only).
        direct: Option<PathBuf>,
    },
    /// Write the canonical camera rig as JSON lines.
    ExportCameras {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.cache_dir {
        config.cache_dir = dir.clone();
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    if let Some(m) = cli.mode {
        config.mode = m.into();
    }
    config.apply_env_overrides(|k| std::env::var(k).ok());
    config.validate()?;
    Ok(config)
}

fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn train_align(config: &PipelineConfig, manifest: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest)?;
    let mut trials = Vec::new();
    let mut images = HashMap::new();
    for e in &manifest.entries {
        let t = manifest.load_trial(e)?;
        images.insert(t.trial_id().to_string(), manifest.load_image(e)?.image);
        trials.push(t);
    }
    let train: Vec<&EegTrial> = trials.iter().filter(|t| t.split() == Split::Train).collect();
    if train.is_empty() {
        bail!("manifest has no train-split trials");
    }
    let image_of = |t: &EegTrial| images[t.trial_id()].clone();
    let (aligned, denoiser) = train_models(&train, image_of, &config.align, &config.diffusion)?;
    fs::create_dir_all(out)?;
    aligned.params.save(&out.join(ALIGN_CHECKPOINT))?;
    denoiser.params.save(&out.join(DENOISER_CHECKPOINT))?;
    fs::write(out.join("align_loss.txt"), aligned.loss_curve_text())?;
    let curve: String = denoiser.loss_curve.iter().map(|(s, l)| format!("{s} {l:.9e}\n")).collect();
    fs::write(out.join("denoiser_loss.txt"), curve)?;

    let mut class_images = vec![None; manifest.num_classes()];
    for t in &trials {
        class_images[t.class_label()].get_or_insert_with(|| images[t.trial_id()].clone());
    }
    let held_out: Vec<&EegTrial> = trials.iter().filter(|t| t.split() == Split::Test).collect();
    if !held_out.is_empty() && class_images.iter().all(Option::is_some) {
        let class_images: Vec<RgbImage> = class_images.into_iter().flatten().collect();
        let two = retrieval_accuracy(&aligned.params, &held_out, &class_images, true)?;
        let top1 = retrieval_accuracy(&aligned.params, &held_out, &class_images, false)?;
        println!("held-out 2-way retrieval {two:.3}, {}-way top-1 {top1:.3}", class_images.len());
    }
    println!("checkpoints written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::DefaultConfig => print!("{}", PipelineConfig::default_toml()),
        Command::Ingest { manifest } => {
            let path = manifest.unwrap_or(config.dataset.manifest);
            let m = load_manifest(&path)?;
            for e in &m.entries {
                m.load_trial(e)?;
            }
            println!("{} trials, {} classes", m.entries.len(), m.num_classes());
            for split in [Split::Train, Split::Val, Split::Test] {
                println!("{}: {}", split.as_str(), m.entries_in(split).count());
            }
        }
        Command::Synth { out } => {
            let ds = synth_dataset(&config.synth)?;
            let path = ds.write_to(&out)?;
            println!("{}", path.display());
        }
        Command::TrainAlign { manifest, out } => {
            let manifest = manifest.unwrap_or_else(|| config.dataset.manifest.clone());
            let out = out.unwrap_or_else(|| config.models_dir.clone());
            train_align(&config, &manifest, &out)?;
        }
        Command::Run { manifest, trials, out } => {
            if let Some(m) = manifest {
                config.dataset.manifest = m;
            }
            if !trials.is_empty() {
                config.dataset.trials = trials;
            }
            if let Some(o) = out {
                config.output_dir = o;
            }
            let providers = Providers::from_config(&config)?;
            let outcome = run_pipeline(&config, providers)?;
            let r = &outcome.report;
            println!("{} mode: {} succeeded, {} failed", r.mode.as_str(), r.succeeded.len(), r.failures.len());
            for f in &r.failures {
                println!("failed {} at {}: {}", f.trial_id, f.stage, f.message);
            }
            return Ok(outcome.exit_code());
        }
        Command::Ablate { manifest, trials, out } => {
            if let Some(m) = manifest {
                config.dataset.manifest = m;
            }
            if !trials.is_empty() {
                config.dataset.trials = trials;
            }
            if let Some(o) = out {
                config.output_dir = o;
            }
            let providers = Providers::from_config(&config)?;
            let outcome = run_ablation(&config, providers)?;
            if let Ok(text) = outcome.table().and_then(|t| render_table(&t)) {
                print!("{text}");
            }
            return Ok(outcome.exit_code());
        }
        Command::RenderViews { mesh, out } => {
            let mesh = load_obj(&mesh)?.normalized_to_unit_sphere();
            let views = canonical_views(&config.views)?;
            fs::create_dir_all(&out)?;
            for r in render_all(&mesh, &views, "mesh")? {
                r.pixels.write_ppm(&out.join(format!("{}.ppm", r.view.label)))?;
            }
        }
        Command::Evaluate { views, reference, intermediate } => {
            let labels = ViewLabel::ALL.to_vec();
            let imgs = labels
                .iter()
                .map(|l| RgbImage::read_ppm(&views.join(format!("{l}.ppm"))))
                .collect::<Result<Vec<_>, _>>()?;
            let reference = RgbImage::read_ppm(&reference)?;
            let intermediate = match intermediate {
                Some(p) => RgbImage::read_ppm(&p)?,
                None => reference.clone(),
            };
            let seed = config.seed;
            let pipeline = Pipeline::new(config.clone(), Providers::from_config(&config)?);
            let art = pipeline.evaluate_views(&imgs, &labels, &reference, &intermediate, seed)?;
            let out = serde_json::json!({
                "vs_ground_truth": art.vs_ground_truth,
                "vs_intermediate": art.vs_intermediate,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Report { layout, report, direct } => {
            let r = read_report(&report)?;
            let table = match layout {
                LayoutArg::Gt => r.gt_table()?,
                LayoutArg::Intermediate => r.intermediate_table()?,
                LayoutArg::Ablation => {
                    let Some(direct) = direct else { bail!("the ablation layout needs the direct-mode report") };
                    let d = read_report(&direct)?;
                    let full = report_values("full", &r.vs_ground_truth)?;
                    let direct = report_values("direct", &d.vs_ground_truth)?;
                    ReportTable { layout: Layout::Ablation, blocks: vec![ablation_block(&r.backbone, full, direct)?] }
                }
            };
            print!("{}", render_table(&table)?);
        }
        Command::ExportCameras { out } => {
            export_camera_config(&canonical_views(&config.views)?, &out)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
