//! Fine learning: windowed recurrent regression from concept features to
//! actions, the angular-velocity safety clamp, and closed-loop rollouts.

mod baseline;
mod model;
mod rollout;

use serde::{Deserialize, Serialize};

use crate::coarse::{discretize_tilt, Discretization};
use crate::dataset::{Database, FeatureTrajectory};
use crate::sim::{ActionVector, DT};

pub use baseline::{BaselineHyper, BaselineLog, BaselineModel};
pub use model::{ActionNorm, FineEpoch, FineHyper, FineLog, FineModel};
pub use rollout::{rollout, BaselinePolicy, Policy, ProgressivePolicy, RolloutConfig, RolloutOutcome};

#[derive(Debug, thiserror::Error)]
pub enum FineError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Coarse(#[from] crate::coarse::CoarseError),
    #[error(transparent)]
    Nn(#[from] pour_nn::NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `w` consecutive concept features ending at the paired action's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureWindow {
    pub features: Vec<Vec<f32>>,
}

/// One sample per `t` in `w..=T`: features `t-w .. t-1` (0-based) paired with
/// the action at `t-1`.
pub fn build_windows(ftraj: &FeatureTrajectory, w: usize) -> Vec<(FeatureWindow, ActionVector)> {
    assert!(w >= 1, "window length must be >= 1");
    let n = ftraj.len();
    if n < w {
        log::warn!("{}: trajectory of {n} steps is shorter than the window {w}", ftraj.scene_id);
        return Vec::new();
    }
    (w..=n)
        .map(|end| (FeatureWindow { features: ftraj.features[end - w..end].to_vec() }, ftraj.actions[end - 1]))
        .collect()
}

/// Sum over the four action components of the squared error.
pub fn fine_loss(pred: &ActionVector, target: &ActionVector) -> f64 {
    pred.to_array().iter().zip(target.to_array()).map(|(p, t)| (p - t) * (p - t)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: usize,
    pub count: usize,
    pub mean: f64,
    pub var: f64,
}

/// Demonstrated wrist angular-velocity range (rad/s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyBounds {
    pub omega_min: f64,
    pub omega_max: f64,
    pub stages: Vec<StageStats>,
}

impl SafetyBounds {
    pub fn new(omega_min: f64, omega_max: f64) -> Self {
        assert!(omega_min <= omega_max, "empty angular velocity range");
        SafetyBounds { omega_min, omega_max, stages: Vec::new() }
    }
}

/// Angular velocity per step from the commanded tilt, tabulated by tilt stage.
pub fn estimate_safety_bounds(db: &Database, disc: &Discretization) -> Result<SafetyBounds, FineError> {
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::new(); disc.n_tilt];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for traj in &db.trajectories {
        if traj.len() < 2 {
            log::warn!("{}: single-step trajectory skipped for safety bounds", traj.scene_id);
            continue;
        }
        let cfg = disc.config_for(&traj.scene_id);
        let theta: Vec<f64> = traj.actions().map(|a| a.theta).collect();
        for w in theta.windows(2) {
            let omega = (w[1] - w[0]) / DT;
            lo = lo.min(omega);
            hi = hi.max(omega);
            per_stage[discretize_tilt(w[0], &cfg)?].push(omega);
        }
    }
    if lo > hi {
        return Err(FineError::Validation("no trajectory with at least two steps".into()));
    }
    let stages = per_stage
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(stage, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            StageStats { stage, count: v.len(), mean, var }
        })
        .collect();
    Ok(SafetyBounds { omega_min: lo, omega_max: hi, stages })
}

/// Limits the tilt change implied by `raw` to the demonstrated range and
/// re-integrates the tilt. Non-finite components are treated as "no change".
pub fn clamp_action(raw: ActionVector, prev_theta: f64, bounds: &SafetyBounds, dt: f64) -> ActionVector {
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    let omega = if raw.theta.is_finite() { (raw.theta - prev_theta) / dt } else { 0.0 };
    let omega = if omega.is_finite() { omega } else { 0.0 };
    let clamped = omega.clamp(bounds.omega_min, bounds.omega_max);
    let mut theta = prev_theta + clamped * dt;
    // rounding in the re-integration can step just outside the range
    for _ in 0..64 {
        let implied = (theta - prev_theta) / dt;
        if implied > bounds.omega_max {
            theta = theta.next_down();
        } else if implied < bounds.omega_min {
            theta = theta.next_up();
        } else {
            break;
        }
    }
    ActionVector::new(finite(raw.vx), finite(raw.vy), finite(raw.vz), theta)
}

/// Predicts the next action from a feature window and applies the clamp.
pub fn safe_act(model: &FineModel, window: &FeatureWindow, prev_theta: f64, bounds: &SafetyBounds, dt: f64) -> ActionVector {
    let raw = model.predict(&[&window.features])[0];
    clamp_action(raw, prev_theta, bounds, dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ftraj(n: usize) -> FeatureTrajectory {
        FeatureTrajectory {
            scene_id: "S1".into(),
            features: (0..n).map(|t| vec![t as f32; 3]).collect(),
            actions: (0..n).map(|t| ActionVector::new(t as f64, 0.0, 0.0, 0.0)).collect(),
        }
    }

    #[test]
    fn window_counts_and_alignment() {
        let w = build_windows(&ftraj(100), 8);
        assert_eq!(w.len(), 93);
        for (win, a) in &w {
            assert_eq!(win.features.len(), 8);
            assert_eq!(win.features[7][0] as f64, a.vx);
        }
        assert_eq!(build_windows(&ftraj(10), 1).len(), 10);
        assert!(build_windows(&ftraj(5), 8).is_empty());
    }

    #[test]
    fn loss_examples() {
        let a = ActionVector::new(1.0, 0.0, 0.0, 0.0);
        let z = ActionVector::default();
        assert_eq!(fine_loss(&a, &a), 0.0);
        assert_eq!(fine_loss(&a, &z), 1.0);
        let b = ActionVector::new(0.3, -0.2, 0.1, 1.5);
        assert_eq!(fine_loss(&a, &b), fine_loss(&b, &a));
    }

    #[test]
    fn clamp_examples() {
        let b = SafetyBounds::new(-0.5, 0.8);
        let dt = 0.1;
        let out = |omega: f64| {
            let a = clamp_action(ActionVector::new(0.0, 0.0, 0.0, 1.0 + omega * dt), 1.0, &b, dt);
            (a.theta - 1.0) / dt
        };
        assert!((out(1.2) - 0.8).abs() < 1e-9);
        assert!((out(0.3) - 0.3).abs() < 1e-9);
        assert!((out(-0.9) + 0.5).abs() < 1e-9);
        let nan = clamp_action(ActionVector::new(f64::NAN, 0.0, 0.0, f64::NAN), 0.4, &b, dt);
        assert!(nan.is_finite());
    }
}
