//! Coarse learning: self-supervised concept labels from logged actions, the
//! multi-head image classifier, and concept-feature extraction.

mod backbone;
mod model;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Database, Trajectory};
use crate::sim::DT;

pub use backbone::{images_to_tensor, Backbone};
pub use model::{
    featurize_db, featurize_trajectory, CoarseArch, CoarseHyper, CoarseLog, CoarseModel, EpochStats, FeatureMode,
    HEAD_ORDER,
};

#[derive(Debug, thiserror::Error)]
pub enum CoarseError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f32 },
    #[error("no task characteristics for scene {0}")]
    UnknownScene(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] pour_nn::NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Thresholds and class counts for turning continuous actions into classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationConfig {
    pub theta_s: f64,
    pub theta_m: f64,
    pub n_tilt: usize,
    pub v_s: f64,
    pub m_vel: usize,
}

impl DiscretizationConfig {
    pub fn validate(&self) -> Result<(), CoarseError> {
        let ok = self.theta_s.is_finite()
            && self.theta_m.is_finite()
            && self.theta_m > self.theta_s
            && self.v_s > 0.0
            && self.v_s.is_finite()
            && self.n_tilt >= 3
            && self.m_vel >= 3;
        if ok {
            Ok(())
        } else {
            Err(CoarseError::Validation(format!("invalid discretization {self:?}")))
        }
    }

    /// Width of one middle tilt stage.
    pub fn theta_r(&self) -> f64 {
        (self.theta_m - self.theta_s) / (self.n_tilt - 2) as f64
    }

    /// Width of one middle velocity band.
    pub fn vel_step(&self) -> f64 {
        2.0 * self.v_s / (self.m_vel - 2) as f64
    }
}

/// Tilt stage: 0 before onset, N−1 past the maximum, middle stages of width
/// `theta_r` in between. A tilt exactly at onset is stage 1.
pub fn discretize_tilt(theta: f64, cfg: &DiscretizationConfig) -> Result<usize, CoarseError> {
    if !theta.is_finite() {
        return Err(CoarseError::Validation(format!("non-finite tilt {theta}")));
    }
    cfg.validate()?;
    if theta < cfg.theta_s {
        Ok(0)
    } else if theta > cfg.theta_m {
        Ok(cfg.n_tilt - 1)
    } else {
        let k = ((theta - cfg.theta_s) / cfg.theta_r()).ceil();
        let k = (k.max(1.0) as usize).min(cfg.n_tilt - 2);
        Ok(snap(theta, k, cfg.n_tilt - 2, |j| cfg.theta_s + j as f64 * cfg.theta_r()))
    }
}

/// Velocity band: 0 for deliberate positive motion, M−1 for deliberate
/// negative motion, middle bands of width `2 v_s / (M−2)` in between.
pub fn discretize_velocity(v: f64, cfg: &DiscretizationConfig) -> Result<usize, CoarseError> {
    if !v.is_finite() {
        return Err(CoarseError::Validation(format!("non-finite velocity {v}")));
    }
    cfg.validate()?;
    if v >= cfg.v_s {
        Ok(0)
    } else if v <= -cfg.v_s {
        Ok(cfg.m_vel - 1)
    } else {
        let k = ((v + cfg.v_s) / cfg.vel_step()).ceil();
        let k = (k.max(1.0) as usize).min(cfg.m_vel - 2);
        Ok(snap(v, k, cfg.m_vel - 2, |j| -cfg.v_s + j as f64 * cfg.vel_step()))
    }
}

/// Moves a ceil-derived middle class `k` in `1..=top` so that
/// `upper(k - 1) < x <= upper(k)` holds for the boundaries as computed in f64;
/// the quotient can round across a boundary.
fn snap(x: f64, mut k: usize, top: usize, upper: impl Fn(usize) -> f64) -> usize {
    while k > 1 && x <= upper(k - 1) {
        k -= 1;
    }
    while k < top && x > upper(k) {
        k += 1;
    }
    k
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptLabels {
    pub tilt: usize,
    pub vx: usize,
    pub vy: usize,
    pub vz: usize,
}

/// Labels for every step, from the logged actions only.
pub fn label_trajectory(traj: &Trajectory, cfg: &DiscretizationConfig) -> Result<Vec<ConceptLabels>, CoarseError> {
    traj.actions()
        .map(|a| {
            Ok(ConceptLabels {
                tilt: discretize_tilt(a.theta, cfg)?,
                vx: discretize_velocity(a.vx, cfg)?,
                vy: discretize_velocity(a.vy, cfg)?,
                vz: discretize_velocity(a.vz, cfg)?,
            })
        })
        .collect()
}

/// Head weights in `(θ, v_x, v_y, v_z)` order.
pub const LOSS_WEIGHTS: [f32; 4] = [0.4, 0.2, 0.2, 0.2];

/// Weighted sum of per-head cross-entropies ordered `(θ, v_x, v_y, v_z)`.
pub fn coarse_loss(head_losses: [f32; 4]) -> f32 {
    head_losses.iter().zip(LOSS_WEIGHTS).map(|(l, w)| l * w).sum()
}

/// Onset and maximum tilt for one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltRange {
    pub theta_s: f64,
    pub theta_m: f64,
}

/// Class counts plus per-scene tilt thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub n_tilt: usize,
    pub m_vel: usize,
    pub v_s: f64,
    pub reference: TiltRange,
    pub per_scene: BTreeMap<String, TiltRange>,
}

/// Margin below the smallest demonstrated peak so every demonstration reaches
/// the last stage.
const PEAK_MARGIN: f64 = 0.02;

/// Tilt at the end of the fast tilt-up: the first frame after the tilt rate
/// first peaks where the rate falls below half of that peak.
pub fn onset_from_actions(traj: &Trajectory) -> Option<f64> {
    let theta: Vec<f64> = traj.actions().map(|a| a.theta).collect();
    let omega: Vec<f64> = theta.windows(2).map(|w| (w[1] - w[0]) / DT).collect();
    let peak = omega.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak <= 0.0 {
        return None;
    }
    let start = omega.iter().position(|&w| w >= 0.8 * peak)?;
    let end = (start..omega.len()).find(|&i| omega[i] < 0.5 * peak)?;
    Some(theta[end])
}

impl Discretization {
    /// Estimates per-scene thresholds from demonstrations.
    pub fn estimate(db: &Database, n_tilt: usize, m_vel: usize, v_s: f64) -> Result<Self, CoarseError> {
        let mut per_scene = BTreeMap::new();
        for id in db.scene_ids() {
            let trajs: Vec<&Trajectory> = db.trajectories.iter().filter(|t| t.scene_id == id).collect();
            let onsets: Vec<f64> = trajs.iter().filter_map(|t| onset_from_actions(t)).collect();
            let peaks: Vec<f64> =
                trajs.iter().map(|t| t.actions().map(|a| a.theta).fold(f64::NEG_INFINITY, f64::max)).collect();
            if onsets.is_empty() {
                return Err(CoarseError::Validation(format!("scene {id}: no tilt-up found in demonstrations")));
            }
            let theta_s = onsets.iter().sum::<f64>() / onsets.len() as f64;
            let theta_m = peaks.iter().cloned().fold(f64::INFINITY, f64::min) - PEAK_MARGIN;
            if theta_m <= theta_s {
                return Err(CoarseError::Validation(format!("scene {id}: max tilt {theta_m} not above onset {theta_s}")));
            }
            per_scene.insert(id, TiltRange { theta_s, theta_m });
        }
        if per_scene.is_empty() {
            return Err(CoarseError::Validation("empty database".into()));
        }
        let n = per_scene.len() as f64;
        let reference = TiltRange {
            theta_s: per_scene.values().map(|r| r.theta_s).sum::<f64>() / n,
            theta_m: per_scene.values().map(|r| r.theta_m).sum::<f64>() / n,
        };
        let d = Discretization { n_tilt, m_vel, v_s, reference, per_scene };
        d.config_for("").validate()?;
        Ok(d)
    }

    /// Adds thresholds for scenes not yet covered.
    pub fn extend_from(&mut self, db: &Database) -> Result<(), CoarseError> {
        let other = Discretization::estimate(db, self.n_tilt, self.m_vel, self.v_s)?;
        for (id, r) in other.per_scene {
            self.per_scene.entry(id).or_insert(r);
        }
        Ok(())
    }

    fn with_range(&self, r: TiltRange) -> DiscretizationConfig {
        DiscretizationConfig { theta_s: r.theta_s, theta_m: r.theta_m, n_tilt: self.n_tilt, v_s: self.v_s, m_vel: self.m_vel }
    }

    pub fn reference_config(&self) -> DiscretizationConfig {
        self.with_range(self.reference)
    }

    /// Scene thresholds, or the cross-scene reference for unknown scenes.
    pub fn config_for(&self, scene_id: &str) -> DiscretizationConfig {
        self.with_range(self.per_scene.get(scene_id).copied().unwrap_or(self.reference))
    }

    pub fn feature_len(&self) -> usize {
        3 * self.m_vel + self.n_tilt + 2
    }
}

/// Majority-class accuracy per head `(θ, v_x, v_y, v_z)`.
pub fn majority_baseline(labels: &[ConceptLabels], n_tilt: usize, m_vel: usize) -> [f32; 4] {
    let mut counts = [vec![0usize; n_tilt], vec![0; m_vel], vec![0; m_vel], vec![0; m_vel]];
    for l in labels {
        counts[0][l.tilt] += 1;
        counts[1][l.vx] += 1;
        counts[2][l.vy] += 1;
        counts[3][l.vz] += 1;
    }
    let n = labels.len().max(1) as f32;
    counts.map(|c| *c.iter().max().unwrap_or(&0) as f32 / n)
}
