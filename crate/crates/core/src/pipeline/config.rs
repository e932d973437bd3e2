use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pour_nn::Parallelism;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::coarse::{CoarseArch, CoarseHyper};
use crate::fine::FineHyper;
use crate::imaginary::{AdaptHyper, TranslatorHyper};
use crate::sim::{resolve_scene, OracleConfig, SceneConfig};

pub const DEFAULT_CONFIG: &str = include_str!("../../configs/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSets {
    pub train: Vec<String>,
    pub eval: Vec<String>,
    /// Novel scenes grouped by the characteristic that is new.
    pub novel: BTreeMap<String, Vec<String>>,
    pub extra_dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    pub trials: usize,
    pub test_trials: usize,
    pub seed: u64,
    pub test_seed: u64,
    pub oneshot_seed: u64,
    pub noise: f64,
    pub max_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationSection {
    pub n_tilt: usize,
    pub m_vel: usize,
    pub v_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseSection {
    pub width: usize,
    #[serde(flatten)]
    pub hyper: CoarseHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    /// 0 selects the coarse stage's epoch count.
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Episodes per seen scene.
    pub seeds: usize,
    /// First episode seed; episode `i` uses `seed + i`.
    pub seed: u64,
    pub max_steps: usize,
    /// Episodes per novel scene.
    pub novel_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub fractions: Vec<f64>,
    pub subsample_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub render_size: usize,
    pub parallel: bool,
    pub scenes: SceneSets,
    pub collect: CollectConfig,
    pub discretization: DiscretizationSection,
    pub coarse: CoarseSection,
    pub fine: FineHyper,
    pub baseline: BaselineSection,
    pub translator: TranslatorHyper,
    pub adapt: AdaptHyper,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

/// Recursively overlays `top` onto `base`; tables merge, everything else is
/// replaced.
pub fn deep_merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// First key of `given` that did not survive deserialisation into `known`.
fn unknown_key(given: &toml::Value, known: &toml::Value, path: &str) -> Option<String> {
    let (toml::Value::Table(g), toml::Value::Table(k)) = (given, known) else { return None };
    g.iter().find_map(|(key, v)| {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match k.get(key) {
            None => Some(full),
            Some(kv) => unknown_key(v, kv, &full),
        }
    })
}

impl ExperimentConfig {
    /// Built-in defaults overlaid with each text layer in order.
    pub fn from_layers(layers: &[&str]) -> Result<Self, PipelineError> {
        let mut value: toml::Value = toml::from_str(DEFAULT_CONFIG).map_err(|e| PipelineError::Config(e.to_string()))?;
        for layer in layers {
            let top: toml::Value = toml::from_str(layer).map_err(|e| PipelineError::Config(e.to_string()))?;
            deep_merge(&mut value, top);
        }
        let cfg: ExperimentConfig =
            value.clone().try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        let known = toml::Value::try_from(&cfg).map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(key) = unknown_key(&value, &known, "") {
            return Err(PipelineError::Config(format!("unknown key {key}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_files(paths: &[PathBuf]) -> Result<Self, PipelineError> {
        let texts = paths
            .iter()
            .map(|p| fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_layers(&texts.iter().map(String::as_str).collect::<Vec<_>>())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.render_size < 8 || !self.render_size.is_multiple_of(2) {
            return bad(format!("render_size must be even and >= 8, got {}", self.render_size));
        }
        if self.scenes.train.is_empty() {
            return bad("scenes.train is empty".into());
        }
        if self.collect.trials == 0 || self.collect.test_trials == 0 {
            return bad("collect.trials and collect.test_trials must be >= 1".into());
        }
        if self.ablation.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("ablation fractions must be in (0, 1]".into());
        }
        if self.translator.lambda <= 0.0 {
            return bad("translator.lambda must be positive".into());
        }
        let extra = self.extra_scenes()?;
        for id in self.all_scene_ids() {
            resolve_scene(&id, &extra).map_err(|e| PipelineError::Config(format!("scene {id}: {e}")))?;
        }
        Ok(())
    }

    pub fn all_scene_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        let novel = self.scenes.novel.values().flatten();
        for id in self.scenes.train.iter().chain(&self.scenes.eval).chain(novel) {
            if !ids.contains(id) {
                ids.push(id.clone());
            }
        }
        ids
    }

    pub fn extra_scenes(&self) -> Result<Vec<SceneConfig>, PipelineError> {
        if self.scenes.extra_dir.is_empty() {
            return Ok(Vec::new());
        }
        let dir = Path::new(&self.scenes.extra_dir);
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p)?;
                SceneConfig::from_toml(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))
            })
            .collect()
    }

    /// Scene configuration at the experiment's render size.
    pub fn scene(&self, id: &str) -> Result<SceneConfig, PipelineError> {
        let extra = self.extra_scenes()?;
        Ok(resolve_scene(id, &extra).map_err(|e| PipelineError::Config(e.to_string()))?.with_render_size(self.render_size))
    }

    pub fn scenes(&self, ids: &[String]) -> Result<Vec<SceneConfig>, PipelineError> {
        ids.iter().map(|id| self.scene(id)).collect()
    }

    /// Task vectors for every scene the experiment mentions.
    pub fn task_vectors(&self) -> Result<BTreeMap<String, [f32; 2]>, PipelineError> {
        self.all_scene_ids().into_iter().map(|id| Ok((id.clone(), self.scene(&id)?.task_z()))).collect()
    }

    pub fn parallelism(&self) -> Parallelism {
        if self.parallel {
            Parallelism::default()
        } else {
            Parallelism::Sequential
        }
    }

    pub fn oracle(&self) -> OracleConfig {
        OracleConfig { noise: self.collect.noise, max_steps: self.collect.max_steps }
    }

    pub fn coarse_arch(&self) -> CoarseArch {
        CoarseArch {
            width: self.coarse.width,
            image_size: self.render_size,
            n_tilt: self.discretization.n_tilt,
            m_vel: self.discretization.m_vel,
        }
    }

    pub fn baseline_epochs(&self) -> usize {
        if self.baseline.epochs == 0 {
            self.coarse.hyper.epochs
        } else {
            self.baseline.epochs
        }
    }

    /// Novel category of `scene_id`, if any.
    pub fn category_of(&self, scene_id: &str) -> Option<&str> {
        self.scenes.novel.iter().find(|(_, ids)| ids.iter().any(|s| s == scene_id)).map(|(c, _)| c.as_str())
    }
}
