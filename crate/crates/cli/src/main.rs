use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use groundtraj::annotation::{annotate_clip, default_labelers, write_jsonl, AnnotateParams, Clip, DatasetRecord};
use groundtraj::dit::{full_model_grad_check, load_checkpoint, save_checkpoint, DitModel, StepReport};
use groundtraj::evaluation::MetricsReport;
use groundtraj::guidance::{guidance_registry, sample, GuidanceSpec, SamplerConfig};
use groundtraj::harness::{
    condition_for, default_trackers, derive_seed, evaluate, generate_world, load_frames, load_masks, prepare_data,
    run_experiment, save_frame_grid, to_pixels, train_stage, ExperimentConfig, Progress,
};
use groundtraj::trajectory::VideoDims;
use groundtraj::{Error, Result};

#[derive(Parser)]
#[command(name = "groundtraj", version, about = "Trajectory-grounded toy video generation")]
struct Cli {
    /// Root that relative output directories resolve against.
    #[arg(long, global = true, env = "GROUNDTRAJ_OUTPUT", default_value = ".")]
    output_root: PathBuf,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config file plus the overrides most often changed from the command line.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory, relative to the output root.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Number of training clips.
    #[arg(long)]
    train_samples: Option<usize>,
    /// Number of test prompts.
    #[arg(long)]
    test_samples: Option<usize>,
    /// Optimizer steps for the dense stage.
    #[arg(long)]
    stage1_steps: Option<usize>,
    /// Optimizer steps for the sparse stage.
    #[arg(long)]
    stage2_steps: Option<usize>,
    /// Blend weight of the location-aware branch.
    #[arg(long)]
    lambda: Option<f64>,
    /// Guidance scheme: none, single_global, single_local, combined or dual.
    #[arg(long)]
    scheme: Option<String>,
    /// Euler steps per sample.
    #[arg(long)]
    sampler_steps: Option<usize>,
    /// Skip the ablation runs.
    #[arg(long)]
    no_ablation: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.train_samples {
            cfg.data.train_samples = v;
        }
        if let Some(v) = self.test_samples {
            cfg.data.test_samples = v;
        }
        if let Some(v) = self.stage1_steps {
            cfg.stage1.steps = v;
        }
        if let (Some(v), Some(s2)) = (self.stage2_steps, cfg.stage2.as_mut()) {
            s2.steps = v;
        }
        if let Some(v) = self.lambda {
            cfg.model.lambda = v;
        }
        if let Some(v) = &self.scheme {
            cfg.guidance.scheme = v.clone();
        }
        if let Some(v) = self.sampler_steps {
            cfg.sampler.steps = v;
        }
        if self.no_ablation {
            cfg.ablation.enabled = false;
        }
        cfg.check()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render blob-world samples and write their records as JSONL.
    GenerateWorld {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Samples to generate.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Also draw the first N samples as PNG frame grids.
        #[arg(long, default_value_t = 0)]
        grids: usize,
    },
    /// Turn frame and mask directories into dataset records.
    ///
    /// Each clip is a directory of frame PNGs (sorted by name) with a matching
    /// directory of first-frame entity masks, one PNG per entity. When the
    /// given directories contain subdirectories instead of PNGs, every
    /// subdirectory is a clip. An optional `caption.txt` beside the frames
    /// overrides `--caption`.
    Annotate {
        /// Frame directory, or a directory of clip directories.
        #[arg(long)]
        frames: PathBuf,
        /// Mask directory laid out like --frames.
        #[arg(long)]
        masks: PathBuf,
        /// Output JSONL file.
        #[arg(long, short)]
        out: PathBuf,
        /// Caption used when a clip has no caption.txt.
        #[arg(long, default_value = "")]
        caption: String,
        /// Point tracker.
        #[arg(long, default_value = "centroid")]
        tracker: String,
        /// Entity labeler that turns masks into phrases.
        #[arg(long, default_value = "color")]
        labeler: String,
        /// Minimum pixel distance between representative points.
        #[arg(long, default_value_t = 32.0)]
        nms_radius: f64,
        /// Below this fraction of the frame area an entity gets one point.
        #[arg(long, default_value_t = 0.01)]
        threshold_frac: f64,
        /// Track cap per clip.
        #[arg(long, default_value_t = 40)]
        max_tracks: usize,
        /// Seed for stochastic trackers.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train both stages on a generated world and save checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sample one test prompt and draw it next to its ground truth.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model checkpoint JSON.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test prompt index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output PNG.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test prompts under the configured schemes.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model checkpoint JSON.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate, train, evaluate and report in one go.
    RunExperiment {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print a saved metrics report as a table.
    Report {
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

struct Stderr {
    quiet: bool,
}

impl Progress for Stderr {
    fn message(&mut self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn step(&mut self, stage: &str, step: usize, r: &StepReport) {
        if !self.quiet && step % 100 == 0 {
            eprintln!("{stage} step {step}: loss {:.5} grad norm {:.4}", r.loss, r.grad_norm);
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut progress = Stderr { quiet: cli.quiet };
    match &cli.cmd {
        Cmd::GenerateWorld { cfg, count, grids } => {
            let cfg = cfg.load()?;
            let out = cfg.output_path(&cli.output_root);
            let world = generate_world(&cfg.world, *count, derive_seed(cfg.seed, "world/train"))?;
            let records: Vec<DatasetRecord> = world.iter().map(|s| s.record.clone()).collect();
            fs::create_dir_all(&out)?;
            let path = out.join("world.jsonl");
            write_jsonl(BufWriter::new(File::create(&path)?), &records)?;
            for (i, s) in world.iter().take(*grids).enumerate() {
                save_frame_grid(&out.join(format!("world_{i:03}.png")), &[&s.video], 8)?;
            }
            println!("{}", path.display());
        }
        Cmd::Annotate {
            frames,
            masks,
            out,
            caption,
            tracker,
            labeler,
            nms_radius,
            threshold_frac,
            max_tracks,
            seed,
        } => {
            let trackers = default_trackers();
            let labelers = default_labelers();
            let tracker = trackers.get(tracker)?;
            let labeler = labelers.get(labeler)?;
            let params = AnnotateParams {
                nms_radius: *nms_radius,
                threshold_frac: *threshold_frac,
                max_tracks: *max_tracks,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut records = Vec::new();
            for (fdir, mdir) in clip_dirs(frames, masks)? {
                let video = load_frames(&fdir)?;
                let (t, h, w, _) = video.dim();
                let dims = VideoDims::new(t, h, w, 1, 1)?;
                let caption = fs::read_to_string(fdir.join("caption.txt"))
                    .map(|s| s.trim().to_string())
                    .unwrap_or_else(|_| caption.clone());
                let clip = Clip {
                    frames: video,
                    truth: None,
                };
                let record = annotate_clip(&clip, &load_masks(&mdir)?, &caption, &dims, tracker, labeler, &params, &mut rng)?;
                records.push(record);
            }
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            write_jsonl(BufWriter::new(File::create(out)?), &records)?;
            println!("{} records -> {}", records.len(), out.display());
        }
        Cmd::Train { cfg } => {
            let cfg = cfg.load()?;
            let out = cfg.output_path(&cli.output_root);
            let data = prepare_data(&cfg).map_err(|e| e.in_stage("world"))?;
            let mut model = DitModel::new(cfg.model.clone(), derive_seed(cfg.seed, "init"))?;
            let stages = std::iter::once(("stage1", &cfg.stage1)).chain(cfg.stage2.as_ref().map(|s| ("stage2", s)));
            for (name, stage) in stages {
                progress.message(&format!("training {name}"));
                train_stage(&cfg, &mut model, &data, stage, derive_seed(cfg.seed, name), &mut |s, r| {
                    progress.step(name, s, r)
                })
                .map_err(|e| e.in_stage("train"))?;
                save_checkpoint(&model, &out.join(format!("checkpoints/{name}.json")))?;
            }
            save_checkpoint(&model, &out.join("checkpoints/main.json"))?;
            println!("{}", out.join("checkpoints/main.json").display());
        }
        Cmd::Sample {
            cfg,
            checkpoint,
            index,
            out,
        } => {
            let cfg = cfg.load()?;
            let model = load_model(&cfg, checkpoint)?;
            let data = prepare_data(&cfg)?;
            let record = data
                .test_records
                .get(*index)
                .ok_or_else(|| Error::InvalidParam(format!("prompt {index} of {}", data.test_records.len())))?;
            let cond = condition_for(record, &cfg.dims()?, model.config(), &main_grounding(&cfg), &cfg.text_embedder())?;
            let sc = SamplerConfig {
                steps: cfg.sampler.steps,
                seed: cfg.sampler.seed.wrapping_add(*index as u64),
            };
            let x = sample(&model, &cond, &cfg.guidance, &sc, &guidance_registry())?;
            save_frame_grid(out, &[&data.test[*index].video, &to_pixels(&x)], 8)?;
            println!("{}: {}", out.display(), record.caption);
        }
        Cmd::Evaluate { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            let model = load_model(&cfg, checkpoint)?;
            let data = prepare_data(&cfg)?;
            let mut runs = Vec::new();
            for scheme in &cfg.eval.schemes {
                progress.message(&format!("evaluating {scheme}"));
                let spec = GuidanceSpec {
                    scheme: scheme.clone(),
                    ..cfg.guidance.clone()
                };
                let (run, _) = evaluate(&cfg, &model, &data, &main_grounding(&cfg), &spec, scheme, 0)
                    .map_err(|e| e.in_stage("evaluate"))?;
                runs.push(run);
            }
            let report = MetricsReport { seed: cfg.seed, runs };
            let out = cfg.output_path(&cli.output_root);
            fs::create_dir_all(&out)?;
            fs::write(out.join("eval_report.json"), report.to_json()?)?;
            print!("{}", report.to_table());
        }
        Cmd::RunExperiment { cfg } => {
            let cfg = cfg.load()?;
            let outcome = run_experiment(&cfg, &cli.output_root, &mut progress)?;
            print!("{}", outcome.report.to_table());
            println!("report: {}", outcome.out_dir.join("report.json").display());
        }
        Cmd::GradCheck { seed, depth, tolerance } => {
            let err = full_model_grad_check(*seed, *depth)?;
            println!("max relative error {err:.3e} (tolerance {tolerance:.1e})");
            if !(err < *tolerance) {
                return Err(Error::InvalidParam(format!(
                    "gradient check failed: {err:.3e} >= {tolerance:.1e}"
                )));
            }
        }
        Cmd::Report { input, json } => {
            let report = MetricsReport::from_json(&fs::read_to_string(input)?)?;
            if *json {
                print!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_table());
            }
        }
    }
    Ok(())
}

fn main_grounding(cfg: &ExperimentConfig) -> groundtraj::grounding::GroundingParams {
    cfg.stage2.as_ref().unwrap_or(&cfg.stage1).grounding
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<DitModel> {
    let model = load_checkpoint(path)?;
    let (a, b) = (model.config(), &cfg.model);
    if a.grid() != b.grid() || a.channels != b.channels || a.dim != b.dim {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the configured model",
            path.display()
        )));
    }
    Ok(model)
}

fn clip_dirs(frames: &Path, masks: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let has_png = fs::read_dir(frames)?
        .filter_map(|e| e.ok())
        .any(|e| e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png")));
    if has_png {
        return Ok(vec![(frames.to_path_buf(), masks.to_path_buf())]);
    }
    let mut names: Vec<_> = fs::read_dir(frames)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidParam(format!("no clips under {}", frames.display())));
    }
    Ok(names.into_iter().map(|n| (frames.join(&n), masks.join(&n))).collect())
}
