//! Demonstration trajectories, databases and their on-disk archive.

mod archive;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sim::{demo_oracle, resolve_scene, ActionVector, Observation, OracleConfig, Pose, SceneConfig, SimError, Simulator};
use pour_nn::Parallelism;

pub use archive::{
    load_database, load_trajectory, save_database, save_trajectory, trajectory_dir_name, write_index, DatabaseManifest,
    TrajectoryManifest, SCHEMA_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("recording: {0}")]
    Recording(String),
    #[error("build: {0}")]
    Build(String),
    #[error("archive {path}: {reason}")]
    Archive { path: String, reason: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    HumanTeleop,
    Oracle,
    Synthetic,
    Policy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainTag {
    SourceH,
    TargetR,
    SyntheticR,
}

/// One recorded frame and the command issued while it was shown.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub action: ActionVector,
    /// Measured wrist tilt at the frame.
    pub theta: f64,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub scene_id: String,
    pub source_tag: SourceTag,
    pub steps: Vec<Step>,
    /// First frame driven by a human after a takeover.
    pub intervention_frame: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.steps.first().map_or(0, |s| s.observation.size)
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionVector> + '_ {
        self.steps.iter().map(|s| s.action)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.steps.len() < 2 {
            return Err(DatasetError::Recording(format!("{}: trajectory needs at least 2 steps", self.scene_id)));
        }
        let size = self.image_size();
        for (t, s) in self.steps.iter().enumerate() {
            if s.observation.size != size || s.observation.image.len() != size * size * 3 {
                return Err(DatasetError::Recording(format!("{}: frame {t} has mismatched dimensions", self.scene_id)));
            }
            if !s.action.is_finite() {
                return Err(DatasetError::Recording(format!("{}: frame {t} has a non-finite action", self.scene_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Database {
    pub name: String,
    pub domain_tag: DomainTag,
    pub trajectories: Vec<Trajectory>,
}

impl Database {
    pub fn new(name: impl Into<String>, domain_tag: DomainTag, trajectories: Vec<Trajectory>) -> Self {
        Database { name: name.into(), domain_tag, trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn scene_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for t in &self.trajectories {
            if !ids.contains(&t.scene_id) {
                ids.push(t.scene_id.clone());
            }
        }
        ids
    }

    /// Union keeping `self`'s name and tag.
    pub fn merged(&self, other: &Database) -> Database {
        let mut trajectories = self.trajectories.clone();
        trajectories.extend(other.trajectories.iter().cloned());
        Database { name: self.name.clone(), domain_tag: self.domain_tag, trajectories }
    }
}

/// Concept-feature view of a trajectory; `features[t]` pairs with `actions[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrajectory {
    pub scene_id: String,
    pub features: Vec<Vec<f32>>,
    pub actions: Vec<ActionVector>,
}

impl FeatureTrajectory {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Pairs each rendered frame with the command issued at that frame.
#[derive(Debug)]
pub struct Recorder {
    trajectory: Trajectory,
    next_frame: Option<u64>,
}

impl Recorder {
    pub fn new(scene_id: impl Into<String>, source_tag: SourceTag) -> Self {
        Recorder {
            trajectory: Trajectory { scene_id: scene_id.into(), source_tag, steps: Vec::new(), intervention_frame: None },
            next_frame: None,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectory.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.steps.is_empty()
    }

    pub fn push(&mut self, observation: Observation, action: ActionVector, theta: f64, pose: Pose) -> Result<(), DatasetError> {
        if let Some(expected) = self.next_frame {
            if observation.frame_index != expected {
                return Err(DatasetError::Recording(format!(
                    "stream gap: expected frame {expected}, got {}",
                    observation.frame_index
                )));
            }
        }
        if let Some(first) = self.trajectory.steps.first() {
            if first.observation.size != observation.size {
                return Err(DatasetError::Recording(format!(
                    "image size changed from {} to {}",
                    first.observation.size, observation.size
                )));
            }
        }
        if observation.image.len() != observation.size * observation.size * 3 {
            return Err(DatasetError::Recording("image buffer does not match its size".into()));
        }
        if !action.is_finite() {
            return Err(DatasetError::Recording("non-finite action".into()));
        }
        self.next_frame = Some(observation.frame_index + 1);
        self.trajectory.steps.push(Step { observation, action, theta, pose });
        Ok(())
    }

    pub fn mark_intervention(&mut self) {
        if self.trajectory.intervention_frame.is_none() {
            self.trajectory.intervention_frame = Some(self.trajectory.steps.len());
        }
    }

    pub fn finish(self) -> Result<Trajectory, DatasetError> {
        self.trajectory.validate()?;
        Ok(self.trajectory)
    }
}

/// Maximum oracle attempts per (scene, trial) before the build fails.
pub const ORACLE_RETRIES: u64 = 4;

/// Seed for trial `k` of the `i`-th scene; keeps trials independent of the
/// scene list order for a given scene id.
pub fn trial_seed(base: u64, scene_id: &str, trial: usize, attempt: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for b in scene_id.bytes().chain((trial as u64).to_le_bytes()).chain(attempt.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Runs the scripted demonstrator `trials` times per scene, retrying failed
/// episodes with fresh seeds.
pub fn build_training_db(
    name: &str,
    scenes: &[SceneConfig],
    trials: usize,
    base_seed: u64,
    oracle: &OracleConfig,
    par: Parallelism,
) -> Result<Database, DatasetError> {
    if scenes.is_empty() {
        return Err(DatasetError::Build("no scenes given".into()));
    }
    if trials == 0 {
        return Err(DatasetError::Build("trials per scene must be >= 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..scenes.len()).flat_map(|s| (0..trials).map(move |k| (s, k))).collect();
    let results = par.map(jobs.len(), |j| {
        let (s, k) = jobs[j];
        collect_one(&scenes[s], k, base_seed, oracle)
    });
    let trajectories = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Database::new(name, DomainTag::SourceH, trajectories))
}

pub fn collect_one(scene: &SceneConfig, trial: usize, base_seed: u64, oracle: &OracleConfig) -> Result<Trajectory, DatasetError> {
    let sim = Simulator::new(scene.clone())?;
    let mut last = String::new();
    for attempt in 0..ORACLE_RETRIES {
        match demo_oracle(&sim, trial_seed(base_seed, &scene.scene_id, trial, attempt), oracle) {
            Ok(t) => return Ok(t),
            Err(e) => last = e.to_string(),
        }
    }
    Err(DatasetError::Build(format!("scene {} trial {trial}: oracle failed {ORACLE_RETRIES} times ({last})", scene.scene_id)))
}

/// Keeps `ceil(fraction · n)` whole trajectories chosen by `seed`, in their
/// original order.
pub fn subsample_db(db: &Database, fraction: f64, seed: u64) -> Database {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must be in (0, 1]");
    let n = db.len();
    let keep = ((fraction * n as f64).ceil() as usize).clamp(1.min(n), n);
    if keep == n {
        return db.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    Database {
        name: format!("{}@{fraction}", db.name),
        domain_tag: db.domain_tag,
        trajectories: idx.into_iter().map(|i| db.trajectories[i].clone()).collect(),
    }
}

/// Checks every trajectory's scene id resolves.
pub fn check_scenes(db: &Database, extra: &[SceneConfig]) -> Result<(), DatasetError> {
    for id in db.scene_ids() {
        resolve_scene(&id, extra)?;
    }
    Ok(())
}
