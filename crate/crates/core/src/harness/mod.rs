//! Synthetic moving-blob world and the end-to-end experiment driver.

pub mod centroid;
pub mod experiment;
pub mod frames;
pub mod text;
pub mod world;

pub use centroid::{default_trackers, CentroidTracker};
pub use experiment::{
    condition_for, derive_seed, evaluate, prepare_data, run_experiment, score_video, to_model_space, to_pixels,
    train_stage, AblationConfig, DataConfig, EvalConfig, ExperimentConfig, ExperimentOutcome, PreparedData, Progress,
    Quiet, StageConfig, TrackDensity,
};
pub use frames::{load_frames, load_masks, save_frame_grid};
pub use text::HashTextEmbedder;
pub use world::{generate_sample, generate_world, BlobSpec, BlobWorldConfig, Motion, Shape, WorldSample};
