use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::centroid::CentroidTracker;
use super::frames::save_frame_grid;
use super::text::HashTextEmbedder;
use super::world::{generate_world, BlobWorldConfig, WorldSample};
use crate::annotation::{write_jsonl, AnnotateParams, Clip, DatasetRecord, Tracker};
use crate::dit::{
    save_checkpoint, AdamW, ConditionBundle, DitModel, LocalCondition, ModelConfig, StepReport, TrainExample,
    TrainHyper, Volume,
};
use crate::error::{Error, Result};
use crate::evaluation::{default_embedders, epe, local_alignment, mean, MetricsReport, RunMetrics, VideoMetrics, DEFAULT_TAUS};
use crate::grounding::{build_assignment, to_token_lattice, GroundingParams};
use crate::guidance::{guidance_registry, sample, GuidanceSpec, SamplerConfig};
use crate::trajectory::{to_latent, LocalText, Trajectory, VideoDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackDensity {
    /// Many representative points per entity.
    Dense,
    /// One center track per entity, capped.
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub tracks: TrackDensity,
    pub grounding: GroundingParams,
    pub hyper: TrainHyper,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            tracks: TrackDensity::Sparse,
            grounding: GroundingParams::default(),
            hyper: TrainHyper::default(),
        }
    }
}

impl StageConfig {
    fn dense_default() -> Self {
        Self {
            tracks: TrackDensity::Dense,
            grounding: GroundingParams::point_only(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub dense: AnnotateParams,
    pub sparse_max_tracks: usize,
    /// Write the generated records as JSONL next to the report.
    pub write_datasets: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 2000,
            test_samples: 50,
            dense: AnnotateParams {
                nms_radius: 1.5,
                threshold_frac: 0.01,
                max_tracks: 40,
            },
            sparse_max_tracks: 5,
            write_datasets: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Guidance schemes evaluated on the final model.
    pub schemes: Vec<String>,
    pub embedder: String,
    pub taus: Vec<f64>,
    pub tracker: CentroidTracker,
    /// Number of test prompts drawn as PNG frame grids.
    pub frame_grids: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            schemes: vec!["none".into(), "dual".into()],
            embedder: "color".into(),
            taus: DEFAULT_TAUS.to_vec(),
            tracker: CentroidTracker::default(),
            frame_grids: 4,
        }
    }
}

/// Dense-only, +sparse, +Gaussian progression, evaluated under one scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub enabled: bool,
    pub scheme: String,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            scheme: "dual".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub world: BlobWorldConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage1: StageConfig,
    pub stage2: Option<StageConfig>,
    pub guidance: GuidanceSpec,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            world: BlobWorldConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            stage1: StageConfig::dense_default(),
            stage2: Some(StageConfig::default()),
            guidance: GuidanceSpec::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn check(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.world.check()?;
        self.model.check().map_err(cfg_err)?;
        let m = &self.model;
        let w = &self.world;
        if (m.frames, m.height, m.width, m.channels) != (w.frames, w.height, w.width, w.channels) {
            return Err(Error::Config(format!(
                "model volume {:?} does not match world video {:?}",
                m.volume_shape(),
                w.video_shape()
            )));
        }
        if m.patch[1] != m.patch[2] {
            return Err(Error::Config("spatial patch must be square".into()));
        }
        for s in std::iter::once(&self.stage1).chain(self.stage2.as_ref()) {
            if s.batch_size == 0 {
                return Err(Error::Config("batch size must be positive".into()));
            }
            s.hyper.check().map_err(cfg_err)?;
            s.grounding.check().map_err(cfg_err)?;
        }
        if self.data.sparse_max_tracks > self.data.dense.max_tracks {
            return Err(Error::Config(format!(
                "sparse track cap {} exceeds dense track count {}",
                self.data.sparse_max_tracks, self.data.dense.max_tracks
            )));
        }
        if self.data.train_samples == 0 || self.data.test_samples == 0 {
            return Err(Error::Config("train and test sets must be nonempty".into()));
        }
        self.guidance.check().map_err(cfg_err)?;
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        let reg = guidance_registry();
        for s in self.eval.schemes.iter().chain([&self.guidance.scheme, &self.ablation.scheme]) {
            reg.get(s)?;
        }
        default_embedders().get(&self.eval.embedder)?;
        if self.ablation.enabled && self.stage2.is_none() {
            return Err(Error::Config("the ablation needs a stage 2".into()));
        }
        Ok(())
    }

    /// Pixel/latent mapping implied by the model's patch size.
    pub fn dims(&self) -> Result<VideoDims> {
        VideoDims::new(
            self.world.frames,
            self.world.height,
            self.world.width,
            self.model.patch[1],
            self.model.patch[0],
        )
    }

    pub fn text_embedder(&self) -> HashTextEmbedder {
        HashTextEmbedder::new(self.model.dim)
    }

    /// Resolves `output_dir` against `root` unless it is absolute.
    pub fn output_path(&self, root: &Path) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            root.join(&self.output_dir)
        }
    }
}

/// Independent seed for one named use of the experiment seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Pixels in `[0, 1]` to model space `[-1, 1]`.
pub fn to_model_space(video: &Volume) -> Volume {
    video.mapv(|v| 2.0 * v - 1.0)
}

pub fn to_pixels(x: &Volume) -> Volume {
    x.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Caption as the global condition and every track as a local one, routed
/// through the assignment field built on the token lattice. A record without tracks has no local
/// component.
pub fn condition_for(
    record: &DatasetRecord,
    dims: &VideoDims,
    model: &ModelConfig,
    grounding: &GroundingParams,
    text: &HashTextEmbedder,
) -> Result<ConditionBundle> {
    let global = Some(text.encode(&record.caption));
    if record.tracks.is_empty() {
        return Ok(ConditionBundle { global, locals: None });
    }
    let (trajs, texts) = record.trajectories();
    let grid = model.grid();
    let latents = trajs
        .iter()
        .map(|t| to_latent(t, dims).map(|l| to_token_lattice(&l, grid)))
        .collect::<Result<Vec<_>>>()?;
    let field = build_assignment(&latents, grid, grounding)?;
    let texts: Vec<LocalText> = texts
        .into_iter()
        .map(|l| {
            let f = text.encode(&l.text);
            l.with_feature(f)
        })
        .collect();
    Ok(ConditionBundle {
        global,
        locals: Some(LocalCondition { texts, field }),
    })
}

/// Generated world plus the per-stage records.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<WorldSample>,
    pub test: Vec<WorldSample>,
    pub dense: Vec<DatasetRecord>,
    pub sparse: Vec<DatasetRecord>,
    pub test_records: Vec<DatasetRecord>,
}

impl PreparedData {
    pub fn records(&self, density: TrackDensity) -> &[DatasetRecord] {
        match density {
            TrackDensity::Dense => &self.dense,
            TrackDensity::Sparse => &self.sparse,
        }
    }
}

fn cap_tracks(r: &DatasetRecord, n: usize) -> DatasetRecord {
    let mut r = r.clone();
    r.tracks.truncate(n);
    r
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let train = generate_world(&cfg.world, cfg.data.train_samples, derive_seed(cfg.seed, "world/train"))?;
    let test = generate_world(&cfg.world, cfg.data.test_samples, derive_seed(cfg.seed, "world/test"))?;
    let dims = cfg.dims()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "annotate"));
    let dense = train
        .iter()
        .map(|s| s.dense_record(&dims, &cfg.data.dense, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let cap = cfg.data.sparse_max_tracks;
    let sparse = train.iter().map(|s| cap_tracks(&s.record, cap)).collect();
    let test_records = test.iter().map(|s| cap_tracks(&s.record, cap)).collect();
    Ok(PreparedData {
        train,
        test,
        dense,
        sparse,
        test_records,
    })
}

/// Trains `model` for one stage. `on_step` sees every step report.
pub fn train_stage(
    cfg: &ExperimentConfig,
    model: &mut DitModel,
    data: &PreparedData,
    stage: &StageConfig,
    seed: u64,
    on_step: &mut dyn FnMut(usize, &StepReport),
) -> Result<Vec<f64>> {
    let dims = cfg.dims()?;
    let text = cfg.text_embedder();
    let records = data.records(stage.tracks);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(&model.params, stage.hyper.clone())?;
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(stage.steps);
    for step in 0..stage.steps {
        let mut batch = Vec::with_capacity(stage.batch_size);
        for _ in 0..stage.batch_size {
            if order.is_empty() {
                order = (0..data.train.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled");
            batch.push(TrainExample {
                x1: to_model_space(&data.train[i].video),
                cond: condition_for(&records[i], &dims, model.config(), &stage.grounding, &text)?,
            });
        }
        let report = opt.train_step(model, &batch, &mut rng)?;
        on_step(step, &report);
        losses.push(report.loss);
    }
    Ok(losses)
}

/// Metrics of one model/scheme pair over the test prompts, plus the first
/// `keep` generated videos in pixel space.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &DitModel,
    data: &PreparedData,
    grounding: &GroundingParams,
    spec: &GuidanceSpec,
    name: &str,
    keep: usize,
) -> Result<(RunMetrics, Vec<Volume>)> {
    let dims = cfg.dims()?;
    let text = cfg.text_embedder();
    let registry = guidance_registry();
    let embedders = default_embedders();
    let embedder = embedders.get(&cfg.eval.embedder)?;
    let mut videos = Vec::with_capacity(data.test_records.len());
    let mut kept = Vec::new();
    for (i, record) in data.test_records.iter().enumerate() {
        let cond = condition_for(record, &dims, model.config(), grounding, &text)?;
        let sc = SamplerConfig {
            steps: cfg.sampler.steps,
            seed: cfg.sampler.seed.wrapping_add(i as u64),
        };
        let x = sample(model, &cond, spec, &sc, &registry)?;
        let pixels = to_pixels(&x);
        videos.push(score_video(i, &pixels, record, &cfg.eval.tracker, embedder, &cfg.eval.taus)?);
        if i < keep {
            kept.push(pixels);
        }
    }
    Ok((RunMetrics::from_videos(name, &spec.scheme, model.config().lambda, videos), kept))
}

/// EPE and local alignment of one generated video against the record's
/// condition tracks. The tracker is seeded at each track's first visible
/// point.
pub fn score_video(
    index: usize,
    pixels: &Volume,
    record: &DatasetRecord,
    tracker: &dyn Tracker,
    embedder: &dyn crate::evaluation::Embedder,
    taus: &[f64],
) -> Result<VideoMetrics> {
    let (trajs, texts) = record.trajectories();
    let clip = Clip {
        frames: pixels.clone(),
        truth: None,
    };
    let usable: Vec<(&Trajectory, &LocalText)> = trajs
        .iter()
        .zip(&texts)
        .filter(|(t, _)| t.first_visible().is_some())
        .collect();
    let seeds: Vec<(f64, f64)> = usable
        .iter()
        .map(|(t, _)| {
            let (_, p) = t.first_visible().expect("filtered");
            (p.x, p.y)
        })
        .collect();
    let estimates = tracker.track(&clip, &seeds);
    let mut epes = Vec::new();
    let mut las = Vec::new();
    for ((traj, lt), est) in usable.iter().zip(estimates) {
        let Ok(points) = est else { continue };
        let est = Trajectory::new(points, traj.local_text_id.clone());
        if let Ok(e) = epe(traj, &est) {
            epes.push(e);
        }
        if let Ok(a) = local_alignment(pixels, traj, &lt.text, embedder, taus) {
            las.push(a);
        }
    }
    Ok(VideoMetrics {
        video: index,
        epe: mean(&epes),
        local_alignment: mean(&las),
        tracks: usable.len(),
        visible_frames: usable.iter().map(|(t, _)| t.visible_count()).sum(),
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub out_dir: PathBuf,
    pub model: DitModel,
}

/// Observer for long-running stages.
pub trait Progress {
    fn message(&mut self, _msg: &str) {}
    fn step(&mut self, _stage: &str, _step: usize, _report: &StepReport) {}
}

/// Discards all progress.
pub struct Quiet;

impl Progress for Quiet {}

/// Generates data, trains both stages, samples the test prompts under every
/// configured scheme (and the ablation variants when enabled), and writes
/// the report, checkpoints and frame grids under the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path, progress: &mut dyn Progress) -> Result<ExperimentOutcome> {
    cfg.check()?;
    let out = cfg.output_path(out_root);
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    progress.message("generating world");
    let data = prepare_data(cfg).map_err(|e| e.in_stage("world"))?;
    if cfg.data.write_datasets {
        write_datasets(&out, &data).map_err(|e| e.in_stage("world"))?;
    }

    let mut stage1_model = DitModel::new(cfg.model.clone(), derive_seed(cfg.seed, "init")).map_err(|e| e.in_stage("train"))?;
    progress.message("training stage 1");
    train_stage(cfg, &mut stage1_model, &data, &cfg.stage1, derive_seed(cfg.seed, "stage1"), &mut |s, r| {
        progress.step("stage1", s, r)
    })
    .map_err(|e| e.in_stage("train"))?;
    save_checkpoint(&stage1_model, &out.join("checkpoints/stage1.json")).map_err(|e| e.in_stage("train"))?;

    let stage2_seed = derive_seed(cfg.seed, "stage2");
    let (main_model, main_grounding) = match &cfg.stage2 {
        Some(stage2) => {
            let mut m = stage1_model.clone();
            progress.message("training stage 2");
            train_stage(cfg, &mut m, &data, stage2, stage2_seed, &mut |s, r| progress.step("stage2", s, r))
                .map_err(|e| e.in_stage("train"))?;
            (m, stage2.grounding)
        }
        None => (stage1_model.clone(), cfg.stage1.grounding),
    };
    save_checkpoint(&main_model, &out.join("checkpoints/main.json")).map_err(|e| e.in_stage("train"))?;

    let keep = cfg.eval.frame_grids.min(data.test.len());
    let mut runs = Vec::new();
    let mut main_frames: Vec<Vec<Volume>> = Vec::new();
    for scheme in &cfg.eval.schemes {
        progress.message(&format!("evaluating main/{scheme}"));
        let spec = GuidanceSpec {
            scheme: scheme.clone(),
            ..cfg.guidance.clone()
        };
        let (run, frames) = evaluate(cfg, &main_model, &data, &main_grounding, &spec, &format!("main/{scheme}"), keep)
            .map_err(|e| e.in_stage("evaluate"))?;
        runs.push(run);
        main_frames.push(frames);
    }

    let mut ablation_frames: Vec<Vec<Volume>> = Vec::new();
    if cfg.ablation.enabled {
        let stage2 = cfg.stage2.as_ref().expect("checked");
        let spec = GuidanceSpec {
            scheme: cfg.ablation.scheme.clone(),
            ..cfg.guidance.clone()
        };
        let point = GroundingParams::point_only();
        let gaussian = if stage2.grounding.gaussian_enabled && stage2.grounding.neighborhood_enabled {
            stage2.grounding
        } else {
            GroundingParams::default()
        };
        let mut variants: Vec<(&str, DitModel, GroundingParams)> =
            vec![("ablation/dense_only", stage1_model.clone(), cfg.stage1.grounding)];
        for (name, grounding) in [("ablation/sparse_point", point), ("ablation/sparse_gaussian", gaussian)] {
            let model = if grounding == main_grounding {
                main_model.clone()
            } else {
                progress.message(&format!("training {name}"));
                let mut m = stage1_model.clone();
                let stage = StageConfig {
                    grounding,
                    ..stage2.clone()
                };
                train_stage(cfg, &mut m, &data, &stage, stage2_seed, &mut |s, r| progress.step(name, s, r))
                    .map_err(|e| e.in_stage("train"))?;
                m
            };
            variants.push((name, model, grounding));
        }
        for (name, model, grounding) in &variants {
            progress.message(&format!("evaluating {name}"));
            let (mut run, frames) = evaluate(cfg, model, &data, grounding, &spec, name, keep).map_err(|e| e.in_stage("evaluate"))?;
            run.notes.push(format!(
                "grounding={}",
                if grounding.gaussian_enabled { "gaussian" } else { "point" }
            ));
            runs.push(run);
            ablation_frames.push(frames);
        }
    }

    let report = MetricsReport { seed: cfg.seed, runs };
    fs::write(out.join("report.json"), report.to_json()?)?;
    fs::write(out.join("report.txt"), report.to_table())?;

    for i in 0..keep {
        let truth = &data.test[i].video;
        for (tag, set) in [("main", &main_frames), ("ablation", &ablation_frames)] {
            if set.is_empty() {
                continue;
            }
            let mut rows = vec![truth];
            rows.extend(set.iter().map(|f| &f[i]));
            save_frame_grid(&out.join(format!("frames/{tag}_{i:03}.png")), &rows, 8)?;
        }
    }
    Ok(ExperimentOutcome {
        report,
        out_dir: out,
        model: main_model,
    })
}

fn write_datasets(out: &Path, data: &PreparedData) -> Result<()> {
    let dir = out.join("data");
    fs::create_dir_all(&dir)?;
    for (name, recs) in [
        ("train_dense.jsonl", &data.dense),
        ("train_sparse.jsonl", &data.sparse),
        ("test.jsonl", &data.test_records),
    ] {
        let f = fs::File::create(dir.join(name))?;
        write_jsonl(BufWriter::new(f), recs)?;
    }
    Ok(())
}
