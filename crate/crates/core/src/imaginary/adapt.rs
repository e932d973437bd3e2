use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ImaginaryError;
use crate::coarse::{featurize_trajectory, CoarseHyper, CoarseLog, CoarseModel, FeatureMode};
use crate::dataset::{Database, FeatureTrajectory};
use crate::fine::{estimate_safety_bounds, FineHyper, FineLog, FineModel, SafetyBounds};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptHyper {
    pub coarse: CoarseHyper,
    pub fine: FineHyper,
    /// Parameter-name prefixes of the coarse model left trainable.
    pub trainable: Vec<String>,
    pub mode: FeatureMode,
}

impl Default for AdaptHyper {
    fn default() -> Self {
        AdaptHyper {
            coarse: CoarseHyper { epochs: 2, lr: 5e-4, ..Default::default() },
            fine: FineHyper { epochs: 4, lr: 2e-4, ..Default::default() },
            trainable: vec!["layer4".into(), "head_".into()],
            mode: FeatureMode::Soft,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adapted {
    pub coarse: CoarseModel,
    pub fine: FineModel,
    pub bounds: SafetyBounds,
    pub coarse_log: CoarseLog,
    pub fine_log: FineLog,
}

/// Fine-tunes copies of the models on `real ∪ synthetic`. `real` holds the
/// one-shot demonstration(s) of the novel scene and is featurised with
/// `z_prime`; synthetic trajectories keep their own scene's vector from `z`.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    coarse: &CoarseModel,
    fine: &FineModel,
    synthetic: &Database,
    real: &Database,
    z: &BTreeMap<String, [f32; 2]>,
    z_prime: [f32; 2],
    hyper: &AdaptHyper,
) -> Result<Adapted, ImaginaryError> {
    if real.is_empty() {
        return Err(ImaginaryError::Precondition("no one-shot demonstration for the novel scene".into()));
    }
    let combined = real.merged(synthetic);
    let mut new_coarse = coarse.clone();
    new_coarse.disc.extend_from(real)?;
    let trainable: Vec<&str> = hyper.trainable.iter().map(String::as_str).collect();
    let coarse_log = new_coarse.fine_tune(&combined, Some(real), &hyper.coarse, &trainable)?;

    let real_ids = real.scene_ids();
    let feats = combined
        .trajectories
        .iter()
        .map(|t| {
            let zt = if real_ids.contains(&t.scene_id) {
                z_prime
            } else {
                *z.get(&t.scene_id).ok_or_else(|| ImaginaryError::Validation(format!("no task vector for {}", t.scene_id)))?
            };
            Ok(featurize_trajectory(&new_coarse, t, zt, hyper.mode)?)
        })
        .collect::<Result<Vec<FeatureTrajectory>, ImaginaryError>>()?;
    let held: Vec<FeatureTrajectory> = feats[..real.len()].to_vec();
    let mut new_fine = fine.clone();
    let fine_log = new_fine.fine_tune(&feats, Some(&held), &hyper.fine)?;
    let bounds = estimate_safety_bounds(&combined, &new_coarse.disc)?;
    Ok(Adapted { coarse: new_coarse, fine: new_fine, bounds, coarse_log, fine_log })
}
