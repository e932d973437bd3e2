//! Scripted demonstrator standing in for a human teleoperator.
//!
//! Three stages: move over the target while tilting quickly to just below the
//! onset angle; tilt slowly so the tilt tracks the (rising) onset angle plus a
//! margin while granules flow; tilt back down to rest. The script reads the
//! privileged particle counts to decide when to stop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{render, score_episode, ActionVector, SimError, SimState, Simulator, DT, WORKSPACE};
use crate::dataset::{Recorder, SourceTag, Trajectory};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    /// Scales per-demonstration style variation and per-step jitter.
    pub noise: f64,
    pub max_steps: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { noise: 1.0, max_steps: 300 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Approach,
    Pour,
    Restore,
    Settle,
}

struct Style {
    clearance: f64,
    omega_fast: f64,
    margin: f64,
    omega_pour: f64,
    omega_restore: f64,
    v_max: f64,
    gain: f64,
    tremor: f64,
}

impl Style {
    fn sample(rng: &mut ChaCha8Rng, noise: f64) -> Self {
        let mut vary = |base: f64, rel: f64| base * (1.0 + noise * rng.random_range(-rel..=rel));
        Style {
            clearance: vary(0.075, 0.12),
            omega_fast: vary(1.8, 0.15),
            margin: vary(0.16, 0.15),
            omega_pour: vary(0.9, 0.15),
            omega_restore: vary(2.4, 0.12),
            v_max: vary(0.22, 0.1),
            gain: vary(5.0, 0.1),
            tremor: 0.004 * noise,
        }
    }
}

/// Horizontal distance a granule travels from the lip to the rim plane.
fn drift(sim: &Simulator, state: &SimState, theta: f64) -> f64 {
    let mut pose = state.pose;
    pose.theta = theta;
    let (_, lz) = Simulator::lip(&pose);
    let h = (lz - sim.scene().container.rim_height).max(0.0);
    let u = sim.scene().granule.kind.exit_speed();
    let (s, c) = theta.sin_cos();
    let down = u * s;
    let t = (-down + (down * down + 2.0 * super::GRAVITY * h).sqrt()) / super::GRAVITY;
    u * c * t
}

/// Vessel-centre position that puts the pour stream over the target centre.
fn pour_position(sim: &Simulator, state: &SimState, theta: f64, clearance: f64) -> [f64; 3] {
    let c = &sim.scene().container;
    let mut pose = state.pose;
    pose.theta = theta;
    let (lx, lz) = Simulator::lip(&pose);
    let x = c.x - drift(sim, state, theta) - (lx - pose.x);
    let z = c.rim_height + clearance - (lz - pose.z);
    [
        x.clamp(WORKSPACE[0][0], WORKSPACE[0][1]),
        c.y.clamp(WORKSPACE[1][0], WORKSPACE[1][1]),
        z.clamp(WORKSPACE[2][0], WORKSPACE[2][1]),
    ]
}

/// Generates one demonstration; fails if the episode does not score as a
/// success.
pub fn demo_oracle(sim: &Simulator, seed: u64, cfg: &OracleConfig) -> Result<Trajectory, SimError> {
    let scene = sim.scene();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f72_6163_6c65);
    let style = Style::sample(&mut rng, cfg.noise);
    let total = scene.granule.count;
    let cap = scene.container.capacity;
    // stop early enough that the tail of the stream still fits
    let stop_at = if cap < total { (0.95 * cap as f64).floor() as u32 - 4 } else { u32::MAX };

    let mut state = sim.reset(seed);
    let mut rec = Recorder::new(scene.scene_id.clone(), SourceTag::Oracle);
    let mut phase = Phase::Approach;
    let mut settle = 0;
    for _ in 0..cfg.max_steps {
        let theta = state.pose.theta;
        let onset = sim.onset_angle(&state);
        let pos = [state.pose.x, state.pose.y, state.pose.z];
        let goal = pour_position(sim, &state, theta.max(onset + style.margin * 0.5), style.clearance);
        let err = [goal[0] - pos[0], goal[1] - pos[1], goal[2] - pos[2]];
        let mut v = err.map(|e| (style.gain * e).clamp(-style.v_max, style.v_max));

        let poured = state.granules_in_target + state.in_flight.len() as u32;
        let theta_cmd = match phase {
            Phase::Approach => {
                let ready = err[0].abs() < 0.008 && err[2].abs() < 0.01 && err[1].abs() < 0.006;
                if ready && theta >= onset - 0.08 {
                    phase = Phase::Pour;
                }
                (theta + style.omega_fast * DT).min(onset - 0.06).max(theta)
            }
            Phase::Pour => {
                if state.granules_in_source == 0 || poured >= stop_at {
                    phase = Phase::Restore;
                    (theta - style.omega_restore * DT).max(0.0)
                } else {
                    (onset + style.margin).min(theta + style.omega_pour * DT).max(theta)
                }
            }
            Phase::Restore | Phase::Settle => (theta - style.omega_restore * DT).max(0.0),
        };
        if matches!(phase, Phase::Restore | Phase::Settle) {
            v = [-0.03, 0.0, 0.04];
            if theta_cmd == 0.0 {
                phase = Phase::Settle;
                v = [0.0; 3];
            }
        }
        for vi in &mut v {
            if style.tremor > 0.0 {
                *vi += rng.random_range(-style.tremor..=style.tremor);
            }
        }
        let action = ActionVector::new(v[0], v[1], v[2], theta_cmd);
        rec.push(render(&state, scene), action, theta, state.pose)
            .map_err(|e| SimError::OracleFailed { scene: scene.scene_id.clone(), reason: e.to_string() })?;
        state = sim.step(&state, &action, DT)?;
        if phase == Phase::Settle && state.pose.theta == 0.0 {
            settle += 1;
            if state.in_flight.is_empty() && settle >= 3 {
                break;
            }
        }
    }
    let state = sim.land_in_flight(&state);
    let score = score_episode(&state, scene);
    if phase != Phase::Settle || !score.success {
        return Err(SimError::OracleFailed {
            scene: scene.scene_id.clone(),
            reason: format!(
                "phase {phase:?}, in target {} spilled {} left {} (fraction {:.3})",
                state.granules_in_target, state.granules_spilled, state.granules_in_source, score.in_target_fraction
            ),
        });
    }
    rec.finish().map_err(|e| SimError::OracleFailed { scene: scene.scene_id.clone(), reason: e.to_string() })
}
