use std::collections::VecDeque;

use super::{clamp_action, FeatureWindow, FineError, FineModel, SafetyBounds};
use super::baseline::BaselineModel;
use crate::coarse::{discretize_tilt, CoarseModel, DiscretizationConfig, FeatureMode};
use crate::dataset::{SourceTag, Step, Trajectory};
use crate::sim::{render, score_episode, ActionVector, EpisodeScore, Observation, SimState, Simulator, DT};

/// Closed-loop controller. `reset` is called before every episode.
pub trait Policy {
    fn reset(&mut self) {}
    fn act(&mut self, obs: &Observation, state: &SimState) -> Result<ActionVector, FineError>;
}

#[derive(Clone, Debug)]
pub struct RolloutConfig {
    pub max_steps: usize,
    /// The episode ends once the commanded tilt class has reached the top
    /// class and dropped back to 0.
    pub termination: DiscretizationConfig,
}

#[derive(Clone, Debug)]
pub struct RolloutOutcome {
    pub trajectory: Trajectory,
    pub score: EpisodeScore,
    /// After in-flight granules have landed.
    pub final_state: SimState,
}

pub fn rollout(policy: &mut dyn Policy, sim: &Simulator, seed: u64, cfg: &RolloutConfig) -> Result<RolloutOutcome, FineError> {
    let scene = sim.scene();
    policy.reset();
    let mut state = sim.reset(seed);
    let mut steps = Vec::new();
    let mut reached_top = false;
    for _ in 0..cfg.max_steps {
        let obs = render(&state, scene);
        let action = policy.act(&obs, &state)?;
        let class = discretize_tilt(action.theta, &cfg.termination)?;
        steps.push(Step { observation: obs, action, theta: state.pose.theta, pose: state.pose });
        state = sim
            .step(&state, &action, DT)
            .map_err(|e| FineError::Validation(format!("policy produced an invalid action: {e}")))?;
        reached_top |= class + 1 == cfg.termination.n_tilt;
        if reached_top && class == 0 {
            break;
        }
    }
    let final_state = sim.land_in_flight(&state);
    let score = score_episode(&final_state, scene);
    let trajectory = Trajectory { scene_id: scene.scene_id.clone(), source_tag: SourceTag::Policy, steps, intervention_frame: None };
    Ok(RolloutOutcome { trajectory, score, final_state })
}

/// Coarse features into a sliding window, fine prediction, optional clamp.
pub struct ProgressivePolicy<'a> {
    pub coarse: &'a CoarseModel,
    pub fine: &'a FineModel,
    pub bounds: Option<&'a SafetyBounds>,
    pub z: [f32; 2],
    pub mode: FeatureMode,
    buf: VecDeque<Vec<f32>>,
}

impl<'a> ProgressivePolicy<'a> {
    pub fn new(coarse: &'a CoarseModel, fine: &'a FineModel, bounds: Option<&'a SafetyBounds>, z: [f32; 2], mode: FeatureMode) -> Self {
        ProgressivePolicy { coarse, fine, bounds, z, mode, buf: VecDeque::new() }
    }
}

impl Policy for ProgressivePolicy<'_> {
    fn reset(&mut self) {
        self.buf.clear();
    }

    fn act(&mut self, obs: &Observation, state: &SimState) -> Result<ActionVector, FineError> {
        let f = self.coarse.features(&[obs], self.z, self.mode)?.remove(0);
        let w = self.fine.window();
        if self.buf.is_empty() {
            // before `w` frames exist the first feature stands in for the missing ones
            self.buf.extend(std::iter::repeat_n(f, w));
        } else {
            self.buf.pop_front();
            self.buf.push_back(f);
        }
        let window = FeatureWindow { features: self.buf.iter().cloned().collect() };
        let raw = self.fine.predict(&[&window.features])[0];
        Ok(match self.bounds {
            Some(b) => clamp_action(raw, state.pose.theta, b, DT),
            None => raw,
        })
    }
}

pub struct BaselinePolicy<'a> {
    pub model: &'a BaselineModel,
    pub bounds: Option<&'a SafetyBounds>,
    pub z: [f32; 2],
}

impl Policy for BaselinePolicy<'_> {
    fn act(&mut self, obs: &Observation, state: &SimState) -> Result<ActionVector, FineError> {
        if obs.size != self.model.image_size {
            return Err(FineError::Validation(format!("frame is {}px, model expects {}px", obs.size, self.model.image_size)));
        }
        let raw = self.model.predict(&[obs], self.z)[0];
        Ok(match self.bounds {
            Some(b) => clamp_action(raw, state.pose.theta, b, DT),
            None => raw,
        })
    }
}
