//! Experiment orchestration: layered configuration, the collect / train /
//! adapt / eval / ablate commands, report files, and the teleoperation
//! session service.

mod commands;
mod config;
pub mod report;
pub mod session;

use std::path::{Path, PathBuf};

pub use commands::{
    cmd_ablate, cmd_adapt, cmd_collect, cmd_eval, cmd_train, cmd_train_baseline, evaluate, AblationReport, AdaptSummary,
    BaselineFactory, CollectSummary, EpisodeRecord, EvalReport, PolicyFactory, PolicyKind, ProgressiveFactory, SceneRow,
    FeatureAblationRow, AdaptationRow, TrainSummary,
};
pub use config::{
    deep_merge, AblationSection, BaselineSection, CoarseSection, CollectConfig, DiscretizationSection, EvalSection,
    ExperimentConfig, SceneSets, DEFAULT_CONFIG,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    /// Required input is absent; the message says how to produce it.
    #[error("missing {what}: {hint}")]
    Missing { what: String, hint: String },
    #[error("{phase} phase failed: {message}")]
    Phase { phase: &'static str, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    fn phase<E: std::fmt::Display>(phase: &'static str) -> impl Fn(E) -> PipelineError {
        move |e| PipelineError::Phase { phase, message: e.to_string() }
    }
}

/// Fixed directory structure under the experiment's output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn train_db(&self) -> PathBuf {
        self.root.join("data/train")
    }

    pub fn test_db(&self) -> PathBuf {
        self.root.join("data/test")
    }

    pub fn oneshot_db(&self) -> PathBuf {
        self.root.join("data/oneshot")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn translators(&self) -> PathBuf {
        self.root.join("translators")
    }

    pub fn adapted(&self, scene_id: &str) -> PathBuf {
        self.root.join("adapt").join(scene_id)
    }

    pub fn eval(&self, label: &str) -> PathBuf {
        self.root.join("eval").join(label)
    }

    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }
}

/// First epoch (1-based) whose loss is within `tol` (relative) of the
/// minimum over the whole curve. `None` for an empty curve.
pub fn epochs_to_near_min(losses: &[f32], tol: f32) -> Option<usize> {
    let min = losses.iter().copied().fold(f32::INFINITY, f32::min);
    losses.iter().position(|&l| l <= min + tol * min.abs()).map(|i| i + 1)
}

fn exists(dir: &Path, name: &str) -> bool {
    dir.join(format!("{name}.manifest.json")).is_file()
}
