use std::collections::BTreeMap;
use std::path::Path;

use pour_nn::Parallelism;
use serde::{Deserialize, Serialize};

use super::report::{markdown_table, percent, svg_line_plot, write_file, write_json, write_jsonl};
use super::{epochs_to_near_min, exists, ExperimentConfig, Layout, PipelineError};
use crate::coarse::{featurize_db, CoarseHyper, CoarseModel, Discretization, DiscretizationConfig, EpochStats, FeatureMode};
use crate::dataset::{
    collect_one, load_database, load_trajectory, save_trajectory, subsample_db, trajectory_dir_name, write_index, Database,
    DomainTag,
};
use crate::fine::{
    estimate_safety_bounds, rollout, ActionNorm, BaselineLog, BaselineModel, BaselinePolicy, FineEpoch, FineModel, Policy, ProgressivePolicy,
    RolloutConfig, SafetyBounds,
};
use crate::imaginary::{
    adapt, image_grid_png, observations_to_tensor, synthesize_db, tensor_to_observation, train_translator, Adapted, ImageFn,
    TranslatorLog, TranslatorPair,
};
use crate::sim::{Observation, SceneConfig, Simulator};

// ---------------------------------------------------------------- collect

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectSummary {
    pub train: usize,
    pub test: usize,
    pub oneshot: usize,
    /// Trajectories found on disk and kept.
    pub reused: usize,
}

fn collect_into(
    dir: &Path,
    name: &str,
    tag: DomainTag,
    scenes: &[SceneConfig],
    trials: usize,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<(usize, usize), PipelineError> {
    let oracle = cfg.oracle();
    let jobs: Vec<(usize, usize)> = (0..scenes.len()).flat_map(|s| (0..trials).map(move |k| (s, k))).collect();
    let results = cfg.parallelism().map(jobs.len(), |j| -> Result<(String, bool), PipelineError> {
        let (s, k) = jobs[j];
        let scene = &scenes[s];
        let dir_name = trajectory_dir_name(&scene.scene_id, k);
        let path = dir.join(&dir_name);
        if let Ok(t) = load_trajectory(&path) {
            if t.scene_id == scene.scene_id && t.image_size() == scene.camera.render_size {
                return Ok((dir_name, true));
            }
        }
        let traj = collect_one(scene, k, seed, &oracle).map_err(|e| PipelineError::Phase { phase: "collect", message: e.to_string() })?;
        save_trajectory(&path, &traj).map_err(|e| PipelineError::Phase { phase: "collect", message: e.to_string() })?;
        Ok((dir_name, false))
    });
    let mut names = Vec::with_capacity(results.len());
    let mut reused = 0;
    for r in results {
        let (n, r) = r?;
        reused += r as usize;
        names.push(n);
    }
    write_index(dir, name, tag, &names).map_err(PipelineError::phase("collect"))?;
    Ok((names.len(), reused))
}

/// Builds the training, held-out and one-shot databases. Trajectories already
/// on disk are kept, so an interrupted run can simply be repeated.
pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<CollectSummary, PipelineError> {
    let layout = Layout::new(&cfg.output_dir);
    let c = &cfg.collect;
    let train_scenes = cfg.scenes(&cfg.scenes.train)?;
    let novel: Vec<String> = cfg.scenes.novel.values().flatten().cloned().collect();
    let (train, r1) = collect_into(&layout.train_db(), "train", DomainTag::SourceH, &train_scenes, c.trials, c.seed, cfg)?;
    let (test, r2) = collect_into(&layout.test_db(), "test", DomainTag::SourceH, &train_scenes, c.test_trials, c.test_seed, cfg)?;
    let (oneshot, r3) = if novel.is_empty() {
        (0, 0)
    } else {
        collect_into(&layout.oneshot_db(), "oneshot", DomainTag::TargetR, &cfg.scenes(&novel)?, 1, c.oneshot_seed, cfg)?
    };
    let summary = CollectSummary { train, test, oneshot, reused: r1 + r2 + r3 };
    write_json(&layout.reports().join("collect.json"), &summary)?;
    Ok(summary)
}

fn load_db(dir: &Path, what: &str) -> Result<Database, PipelineError> {
    load_database(dir).map_err(|e| PipelineError::Missing {
        what: format!("{what} database at {}", dir.display()),
        hint: format!("run `pour collect` with the same config first ({e})"),
    })
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub coarse_epochs: Vec<EpochStats>,
    pub majority_baseline: [f32; 4],
    pub fine_epochs: Vec<FineEpoch>,
    pub fine_mean_baseline_mse: f32,
    pub bounds: SafetyBounds,
    pub discretization: Discretization,
    /// First epoch whose held-out loss is within 10 % of the curve minimum.
    pub coarse_near_min_epoch: Option<usize>,
    pub fine_near_min_epoch: Option<usize>,
    /// Epochs whose weights were saved (lowest held-out loss).
    pub coarse_kept_epoch: usize,
    pub fine_kept_epoch: usize,
    pub warnings: Vec<String>,
}

/// Coarse training, featurisation, safety bounds and fine training.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary, PipelineError> {
    let layout = Layout::new(&cfg.output_dir);
    let par = cfg.parallelism();
    let train = load_db(&layout.train_db(), "training")?;
    let test = load_db(&layout.test_db(), "held-out")?;
    let d = &cfg.discretization;
    let disc = Discretization::estimate(&train, d.n_tilt, d.m_vel, d.v_s).map_err(PipelineError::phase("coarse"))?;
    let (coarse, clog) = CoarseModel::train(&train, Some(&test), cfg.coarse_arch(), disc, &cfg.coarse.hyper, par)
        .map_err(PipelineError::phase("coarse"))?;
    let z = cfg.task_vectors()?;
    let ftr = featurize_db(&coarse, &train, &z, FeatureMode::Soft).map_err(PipelineError::phase("featurize"))?;
    let fte = featurize_db(&coarse, &test, &z, FeatureMode::Soft).map_err(PipelineError::phase("featurize"))?;
    let bounds = estimate_safety_bounds(&train, &coarse.disc).map_err(PipelineError::phase("safety-bounds"))?;
    let (fine, flog) = FineModel::train(&ftr, Some(&fte), &cfg.fine, par).map_err(PipelineError::phase("fine"))?;

    let models = layout.models();
    coarse.save(&models, "coarse").map_err(PipelineError::phase("coarse"))?;
    fine.save(&models, "fine", Some(&bounds)).map_err(PipelineError::phase("fine"))?;

    let reports = layout.reports();
    write_jsonl(&reports.join("coarse_loss.jsonl"), &clog.epochs)?;
    write_jsonl(&reports.join("fine_loss.jsonl"), &flog.epochs)?;
    let curve = |v: Vec<(usize, f32)>| v.into_iter().map(|(e, l)| (e as f64, l as f64)).collect::<Vec<_>>();
    let svg = svg_line_plot(
        "Coarse model loss",
        "epoch",
        "weighted cross-entropy",
        &[
            ("train", curve(clog.epochs.iter().map(|e| (e.epoch, e.train_loss)).collect())),
            ("held-out", curve(clog.epochs.iter().map(|e| (e.epoch, e.val_loss)).collect())),
        ],
    );
    write_file(&reports.join("coarse_loss.svg"), &svg)?;
    let svg = svg_line_plot(
        "Fine model loss",
        "epoch",
        "MSE (normalised actions)",
        &[
            ("train", curve(flog.epochs.iter().map(|e| (e.epoch, e.train_loss)).collect())),
            ("held-out", curve(flog.epochs.iter().map(|e| (e.epoch, e.val_mse)).collect())),
        ],
    );
    write_file(&reports.join("fine_loss.svg"), &svg)?;

    let coarse_val: Vec<f32> = clog.epochs.iter().map(|e| e.val_loss).collect();
    let fine_val: Vec<f32> = flog.epochs.iter().map(|e| e.val_mse).collect();
    let summary = TrainSummary {
        majority_baseline: clog.majority_baseline,
        coarse_near_min_epoch: epochs_to_near_min(&coarse_val, 0.1),
        fine_near_min_epoch: epochs_to_near_min(&fine_val, 0.1),
        coarse_kept_epoch: clog.kept_epoch,
        fine_kept_epoch: flog.kept_epoch,
        coarse_epochs: clog.epochs,
        fine_epochs: flog.epochs,
        fine_mean_baseline_mse: flog.mean_baseline_mse,
        bounds,
        discretization: coarse.disc.clone(),
        warnings: clog.warnings.into_iter().chain(flog.warnings).collect(),
    };
    write_json(&reports.join("train_metrics.json"), &summary)?;
    Ok(summary)
}

/// Trains the end-to-end regressor with the coarse stage's image budget.
pub fn cmd_train_baseline(cfg: &ExperimentConfig) -> Result<BaselineLog, PipelineError> {
    let layout = Layout::new(&cfg.output_dir);
    let train = load_db(&layout.train_db(), "training")?;
    let test = load_db(&layout.test_db(), "held-out")?;
    let hyper = CoarseHyper { epochs: cfg.baseline_epochs(), ..cfg.coarse.hyper.clone() };
    let z = cfg.task_vectors()?;
    let (model, log) = BaselineModel::train(&train, Some(&test), &z, cfg.coarse.width, cfg.render_size, &hyper, cfg.parallelism())
        .map_err(PipelineError::phase("baseline"))?;
    model.save(&layout.models(), "baseline").map_err(PipelineError::phase("baseline"))?;
    write_jsonl(&layout.reports().join("baseline_loss.jsonl"), &log.epochs)?;
    Ok(log)
}

// ---------------------------------------------------------------- eval

/// Builds a fresh policy for one episode in `scene`.
pub trait PolicyFactory: Sync {
    fn make<'a>(&'a self, scene: &SceneConfig) -> Result<Box<dyn Policy + 'a>, PipelineError>;
}

#[derive(Clone, Debug)]
pub struct ProgressiveFactory {
    pub coarse: CoarseModel,
    pub fine: FineModel,
    pub bounds: Option<SafetyBounds>,
    pub mode: FeatureMode,
}

impl PolicyFactory for ProgressiveFactory {
    fn make<'a>(&'a self, scene: &SceneConfig) -> Result<Box<dyn Policy + 'a>, PipelineError> {
        Ok(Box::new(ProgressivePolicy::new(&self.coarse, &self.fine, self.bounds.as_ref(), scene.task_z(), self.mode)))
    }
}

#[derive(Clone, Debug)]
pub struct BaselineFactory {
    pub model: BaselineModel,
    pub bounds: Option<SafetyBounds>,
}

impl PolicyFactory for BaselineFactory {
    fn make<'a>(&'a self, scene: &SceneConfig) -> Result<Box<dyn Policy + 'a>, PipelineError> {
        Ok(Box::new(BaselinePolicy { model: &self.model, bounds: self.bounds.as_ref(), z: scene.task_z() }))
    }
}

/// A separately adapted policy per scene.
struct PerScene(BTreeMap<String, ProgressiveFactory>);

impl PolicyFactory for PerScene {
    fn make<'a>(&'a self, scene: &SceneConfig) -> Result<Box<dyn Policy + 'a>, PipelineError> {
        self.0
            .get(&scene.scene_id)
            .ok_or_else(|| PipelineError::Missing {
                what: format!("adapted policy for {}", scene.scene_id),
                hint: format!("run `pour adapt --scene {}`", scene.scene_id),
            })?
            .make(scene)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub policy: String,
    pub scene_id: String,
    pub seed: u64,
    pub steps: usize,
    pub success: bool,
    pub in_target_fraction: f64,
    pub in_target: u32,
    pub spilled: u32,
    pub left_in_source: u32,
    pub peak_tilt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene_id: String,
    pub successes: usize,
    pub trials: usize,
}

impl SceneRow {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub rows: Vec<SceneRow>,
    /// Arithmetic mean of the per-scene rates.
    pub mean_rate: f64,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    fn from_episodes(label: &str, scene_ids: &[String], episodes: Vec<EpisodeRecord>) -> Self {
        let rows: Vec<SceneRow> = scene_ids
            .iter()
            .map(|id| {
                let eps: Vec<_> = episodes.iter().filter(|e| &e.scene_id == id).collect();
                SceneRow { scene_id: id.clone(), successes: eps.iter().filter(|e| e.success).count(), trials: eps.len() }
            })
            .collect();
        let mean_rate = if rows.is_empty() { 0.0 } else { rows.iter().map(SceneRow::rate).sum::<f64>() / rows.len() as f64 };
        EvalReport { label: label.into(), rows, mean_rate, episodes }
    }

    pub fn total_successes(&self) -> usize {
        self.rows.iter().map(|r| r.successes).sum()
    }
}

/// Rows are policies, columns are scenes (`x/n`) and the mean rate.
pub fn success_table(reports: &[&EvalReport]) -> String {
    let Some(first) = reports.first() else { return String::new() };
    let mut header = vec!["Policy".to_string()];
    header.extend(first.rows.iter().map(|r| r.scene_id.clone()));
    header.push("Mean".into());
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend(r.rows.iter().map(|s| format!("{}/{}", s.successes, s.trials)));
            row.push(percent(r.mean_rate));
            row
        })
        .collect();
    markdown_table(&header, &rows)
}

/// Runs `seeds.len()` episodes per scene with identical seeds for every
/// policy.
pub fn evaluate(
    label: &str,
    factory: &dyn PolicyFactory,
    scenes: &[SceneConfig],
    seeds: &[u64],
    termination: &DiscretizationConfig,
    max_steps: usize,
    par: Parallelism,
) -> Result<EvalReport, PipelineError> {
    let jobs: Vec<(usize, u64)> = (0..scenes.len()).flat_map(|s| seeds.iter().map(move |&k| (s, k))).collect();
    let rcfg = RolloutConfig { max_steps, termination: *termination };
    let results = par.map(jobs.len(), |j| -> Result<EpisodeRecord, PipelineError> {
        let (s, seed) = jobs[j];
        let scene = &scenes[s];
        let sim = Simulator::new(scene.clone()).map_err(PipelineError::phase("eval"))?;
        let mut policy = factory.make(scene)?;
        let out = rollout(policy.as_mut(), &sim, seed, &rcfg).map_err(PipelineError::phase("eval"))?;
        let st = &out.final_state;
        Ok(EpisodeRecord {
            policy: label.into(),
            scene_id: scene.scene_id.clone(),
            seed,
            steps: out.trajectory.len(),
            success: out.score.success,
            in_target_fraction: out.score.in_target_fraction,
            in_target: st.granules_in_target,
            spilled: st.granules_spilled,
            left_in_source: st.granules_in_source,
            peak_tilt: out.trajectory.steps.iter().map(|s| s.theta).fold(0.0, f64::max),
        })
    });
    let episodes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<String> = scenes.iter().map(|s| s.scene_id.clone()).collect();
    Ok(EvalReport::from_episodes(label, &ids, episodes))
}

fn write_eval(dir: &Path, reports: &[&EvalReport]) -> Result<(), PipelineError> {
    let episodes: Vec<&EpisodeRecord> = reports.iter().flat_map(|r| r.episodes.iter()).collect();
    write_jsonl(&dir.join("episodes.jsonl"), &episodes)?;
    let summary: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| serde_json::json!({ "label": r.label, "rows": r.rows, "mean_rate": r.mean_rate }))
        .collect();
    write_json(&dir.join("summary.json"), &summary)?;
    write_file(&dir.join("table.md"), &success_table(reports))?;
    Ok(())
}

fn load_base(cfg: &ExperimentConfig, layout: &Layout) -> Result<ProgressiveFactory, PipelineError> {
    let dir = layout.models();
    if !exists(&dir, "coarse") || !exists(&dir, "fine") {
        return Err(PipelineError::Missing {
            what: format!("trained models in {}", dir.display()),
            hint: "run `pour train` with the same config first".into(),
        });
    }
    let par = cfg.parallelism();
    let coarse = CoarseModel::load(&dir, "coarse", par).map_err(PipelineError::phase("load"))?;
    let (fine, bounds) = FineModel::load(&dir, "fine", par).map_err(PipelineError::phase("load"))?;
    Ok(ProgressiveFactory { coarse, fine, bounds, mode: FeatureMode::Soft })
}

fn load_adapted(cfg: &ExperimentConfig, layout: &Layout, scene_id: &str) -> Result<ProgressiveFactory, PipelineError> {
    let dir = layout.adapted(scene_id);
    if !exists(&dir, "coarse") || !exists(&dir, "fine") {
        return Err(PipelineError::Missing {
            what: format!("adapted models for {scene_id}"),
            hint: format!("run `pour adapt --scene {scene_id}` first"),
        });
    }
    let par = cfg.parallelism();
    let coarse = CoarseModel::load(&dir, "coarse", par).map_err(PipelineError::phase("load"))?;
    let (fine, bounds) = FineModel::load(&dir, "fine", par).map_err(PipelineError::phase("load"))?;
    Ok(ProgressiveFactory { coarse, fine, bounds, mode: cfg.adapt.mode })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Coarse + fine models from `cmd_train`.
    Progressive,
    /// End-to-end regressor from `cmd_train_baseline`.
    Baseline,
    /// Per-scene models from `cmd_adapt`.
    Adapted,
}

impl PolicyKind {
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Progressive => "progressive",
            PolicyKind::Baseline => "baseline",
            PolicyKind::Adapted => "adapted",
        }
    }
}

/// Evaluates a stored policy. Scenes default to the seen evaluation scenes
/// (novel scenes for adapted policies); `seeds` defaults to the config.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    kind: PolicyKind,
    scene_ids: Option<&[String]>,
    seeds: Option<usize>,
) -> Result<EvalReport, PipelineError> {
    let layout = Layout::new(&cfg.output_dir);
    let novel: Vec<String> = cfg.scenes.novel.values().flatten().cloned().collect();
    let ids: Vec<String> = match (scene_ids, kind) {
        (Some(ids), _) => ids.to_vec(),
        (None, PolicyKind::Adapted) => novel,
        (None, _) => cfg.scenes.eval.clone(),
    };
    let n = seeds.unwrap_or(if kind == PolicyKind::Adapted { cfg.eval.novel_seeds } else { cfg.eval.seeds });
    let seed_list: Vec<u64> = (0..n as u64).map(|i| cfg.eval.seed + i).collect();
    let scenes = cfg.scenes(&ids)?;
    let base = load_base(cfg, &layout)?;
    let termination = base.coarse.disc.reference_config();
    let par = cfg.parallelism();
    let report = match kind {
        PolicyKind::Progressive => evaluate(kind.label(), &base, &scenes, &seed_list, &termination, cfg.eval.max_steps, par)?,
        PolicyKind::Baseline => {
            let model = BaselineModel::load(&layout.models(), "baseline", par).map_err(|e| PipelineError::Missing {
                what: "baseline model".into(),
                hint: format!("run `pour train --baseline` first ({e})"),
            })?;
            let f = BaselineFactory { model, bounds: None };
            evaluate(kind.label(), &f, &scenes, &seed_list, &termination, cfg.eval.max_steps, par)?
        }
        PolicyKind::Adapted => {
            let per = ids.iter().map(|id| Ok((id.clone(), load_adapted(cfg, &layout, id)?))).collect::<Result<_, PipelineError>>()?;
            evaluate(kind.label(), &PerScene(per), &scenes, &seed_list, &termination, cfg.eval.max_steps, par)?
        }
    };
    write_eval(&layout.eval(kind.label()), &[&report])?;
    Ok(report)
}

// ---------------------------------------------------------------- adapt

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub scene_id: String,
    pub category: String,
    pub translator_trained: bool,
    pub translator_log: Option<TranslatorLog>,
    pub coarse_epochs: Vec<EpochStats>,
    pub fine_epochs: Vec<FineEpoch>,
    pub fine_kept_epoch: usize,
    pub bounds: SafetyBounds,
}

fn frames_of(db: &Database) -> Vec<&Observation> {
    db.trajectories.iter().flat_map(|t| t.steps.iter().map(|s| &s.observation)).collect()
}

fn grid_sample(frames: &[&Observation], n: usize) -> Vec<Observation> {
    let step = (frames.len() / n.max(1)).max(1);
    frames.iter().step_by(step).take(n).map(|o| (*o).clone()).collect()
}

/// Loads the category's translator, or trains and stores it.
fn translator_for(
    cfg: &ExperimentConfig,
    layout: &Layout,
    category: &str,
    train: &Database,
    oneshot: &Database,
) -> Result<(TranslatorPair, Option<TranslatorLog>), PipelineError> {
    let dir = layout.translators();
    if exists(&dir, category) {
        let pair = TranslatorPair::load(&dir, category, cfg.parallelism()).map_err(PipelineError::phase("translator"))?;
        return Ok((pair, None));
    }
    let members: Vec<String> = cfg.scenes.novel.get(category).cloned().unwrap_or_else(|| vec![category.to_string()]);
    let target: Vec<&Observation> = oneshot
        .trajectories
        .iter()
        .filter(|t| members.contains(&t.scene_id))
        .flat_map(|t| t.steps.iter().map(|s| &s.observation))
        .collect();
    if target.is_empty() {
        return Err(PipelineError::Missing {
            what: format!("one-shot demonstrations for category {category}"),
            hint: "run `pour collect` so the novel scenes get their single demonstration".into(),
        });
    }
    let source = frames_of(train);
    let (pair, log) = train_translator(&source, &target, &cfg.translator, ("source-h", category), cfg.parallelism())
        .map_err(PipelineError::phase("translator"))?;
    pair.save(&dir, category).map_err(PipelineError::phase("translator"))?;
    write_json(&dir.join(format!("{category}.log.json")), &log)?;
    let originals = grid_sample(&source, 8);
    let refs: Vec<&Observation> = originals.iter().collect();
    let translated = pair.translate(&refs);
    image_grid_png(&originals, &translated, &layout.reports().join(format!("translator_{category}.png")))
        .map_err(PipelineError::phase("translator"))?;
    Ok((pair, Some(log)))
}

fn adapt_scene(
    cfg: &ExperimentConfig,
    layout: &Layout,
    scene_id: &str,
    base: &ProgressiveFactory,
    pair: &TranslatorPair,
    synthetic: &Database,
    oneshot: &Database,
) -> Result<Adapted, PipelineError> {
    let real = Database::new(
        format!("oneshot-{scene_id}"),
        DomainTag::TargetR,
        oneshot.trajectories.iter().filter(|t| t.scene_id == scene_id).cloned().collect(),
    );
    if real.is_empty() {
        return Err(PipelineError::Missing {
            what: format!("one-shot demonstration for {scene_id}"),
            hint: "run `pour collect` with this scene listed under [scenes.novel]".into(),
        });
    }
    let z = cfg.task_vectors()?;
    let z_prime = cfg.scene(scene_id)?.task_z();
    let adapted = adapt(&base.coarse, &base.fine, synthetic, &real, &z, z_prime, &cfg.adapt).map_err(PipelineError::phase("adapt"))?;
    let dir = layout.adapted(scene_id);
    adapted.coarse.save(&dir, "coarse").map_err(PipelineError::phase("adapt"))?;
    adapted.fine.save(&dir, "fine", Some(&adapted.bounds)).map_err(PipelineError::phase("adapt"))?;
    let frames = frames_of(&real);
    let originals = grid_sample(&frames, 6);
    let refs: Vec<&Observation> = originals.iter().collect();
    // real frames mapped to the source domain and back show what the
    // translator preserves
    let y = pair.g_fn().apply(&pair.g_prime_fn().apply(&observations_to_tensor(&refs)));
    let back: Vec<Observation> = refs.iter().enumerate().map(|(b, o)| tensor_to_observation(&y, b, o.frame_index)).collect();
    image_grid_png(&originals, &back, &dir.join("roundtrip.png")).map_err(PipelineError::phase("adapt"))?;
    Ok(adapted)
}

/// Trains (or reuses) the category translator, synthesises the imaginary
/// database and adapts copies of the trained models to `scene_id`.
pub fn cmd_adapt(cfg: &ExperimentConfig, scene_id: &str) -> Result<AdaptSummary, PipelineError> {
    let layout = Layout::new(&cfg.output_dir);
    let category = cfg.category_of(scene_id).unwrap_or(scene_id).to_string();
    let train = load_db(&layout.train_db(), "training")?;
    let oneshot = load_db(&layout.oneshot_db(), "one-shot")?;
    if !oneshot.trajectories.iter().any(|t| t.scene_id == scene_id) {
        return Err(PipelineError::Missing {
            what: format!("one-shot demonstration for {scene_id}"),
            hint: "add the scene under [scenes.novel] and run `pour collect`".into(),
        });
    }
    let base = load_base(cfg, &layout)?;
    let (pair, tlog) = translator_for(cfg, &layout, &category, &train, &oneshot)?;
    let synthetic = synthesize_db(&pair.g_fn(), &train, &format!("synthetic-{category}")).map_err(PipelineError::phase("synthesize"))?;
    write_grid(&layout.adapted(scene_id).join("grid.png"), &train, &synthetic)?;
    let adapted = adapt_scene(cfg, &layout, scene_id, &base, &pair, &synthetic, &oneshot)?;
    let summary = AdaptSummary {
        scene_id: scene_id.into(),
        category,
        translator_trained: tlog.is_some(),
        translator_log: tlog,
        coarse_epochs: adapted.coarse_log.epochs,
        fine_epochs: adapted.fine_log.epochs,
        fine_kept_epoch: adapted.fine_log.kept_epoch,
        bounds: adapted.bounds,
    };
    write_json(&layout.adapted(scene_id).join("adapt_log.json"), &summary)?;
    Ok(summary)
}

/// Original and synthetic frames side by side.
fn write_grid(path: &Path, original: &Database, synthetic: &Database) -> Result<(), PipelineError> {
    let a = grid_sample(&frames_of(original), 8);
    let b = grid_sample(&frames_of(synthetic), 8);
    image_grid_png(&a, &b, path).map_err(PipelineError::phase("report"))
}

// ---------------------------------------------------------------- ablate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAblationRow {
    pub label: String,
    pub mode: FeatureMode,
    pub fraction: f64,
    pub trajectories: usize,
    /// Final-epoch training loss (normalised actions). Rows are compared at
    /// equal epochs, so this is not the kept epoch.
    pub train_mse: f32,
    /// Final-epoch held-out loss (normalised actions).
    pub test_mse: f32,
    pub mean_baseline_mse: f32,
    pub epochs: Vec<FineEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRow {
    pub category: String,
    pub scenes: Vec<String>,
    pub without: (usize, usize),
    pub with: (usize, usize),
}

impl AdaptationRow {
    pub fn rates(&self) -> (f64, f64) {
        let r = |(s, n): (usize, usize)| s as f64 / n.max(1) as f64;
        (r(self.without), r(self.with))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTable {
    pub rows: Vec<AdaptationRow>,
    /// Means of the per-category rates.
    pub mean_without: f64,
    pub mean_with: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub features: Result<Vec<FeatureAblationRow>, String>,
    /// `(progressive, baseline)`.
    pub policies: Result<(EvalReport, EvalReport), String>,
    pub adaptation: Result<AdaptationTable, String>,
}

fn ablate_features(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<FeatureAblationRow>, PipelineError> {
    let base = load_base(cfg, layout)?;
    let train = load_db(&layout.train_db(), "training")?;
    let test = load_db(&layout.test_db(), "held-out")?;
    let z = cfg.task_vectors()?;
    let par = cfg.parallelism();
    // one normalisation for every run keeps the MSE columns comparable
    let norm = ActionNorm::fit(train.trajectories.iter().flat_map(|t| t.steps.iter().map(|s| &s.action)));
    let mut runs = vec![("Without", FeatureMode::OneHot, 1.0)];
    runs.extend(cfg.ablation.fractions.iter().map(|&f| ("With", FeatureMode::Soft, f)));
    let mut rows = Vec::new();
    for (label, mode, fraction) in runs {
        let sub = subsample_db(&train, fraction, cfg.ablation.subsample_seed);
        let ftr = featurize_db(&base.coarse, &sub, &z, mode).map_err(PipelineError::phase("featurize"))?;
        let fte = featurize_db(&base.coarse, &test, &z, mode).map_err(PipelineError::phase("featurize"))?;
        let (_, log) =
            FineModel::train_with_norm(&ftr, Some(&fte), norm.clone(), &cfg.fine, par).map_err(PipelineError::phase("fine"))?;
        let last = log.epochs.last().cloned().unwrap_or(FineEpoch { epoch: 0, train_loss: f32::NAN, val_mse: f32::NAN });
        rows.push(FeatureAblationRow {
            label: format!("{label} + {}%", (fraction * 100.0).round()),
            mode,
            fraction,
            trajectories: sub.len(),
            train_mse: last.train_loss,
            test_mse: last.val_mse,
            mean_baseline_mse: log.mean_baseline_mse,
            epochs: log.epochs,
        });
    }
    let dir = layout.ablate();
    write_jsonl(&dir.join("features.jsonl"), &rows)?;
    let header = ["Model & Data", "Trajectories", "Training MSE", "Testing MSE", "Mean-action MSE"].map(String::from);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.trajectories.to_string(),
                format!("{:.4}", r.train_mse),
                format!("{:.4}", r.test_mse),
                format!("{:.4}", r.mean_baseline_mse),
            ]
        })
        .collect();
    write_file(&dir.join("features.md"), &markdown_table(&header, &body))?;
    Ok(rows)
}

fn compare_policies(cfg: &ExperimentConfig, layout: &Layout) -> Result<(EvalReport, EvalReport), PipelineError> {
    let base = load_base(cfg, layout)?;
    let par = cfg.parallelism();
    if !exists(&layout.models(), "baseline") {
        cmd_train_baseline(cfg)?;
    }
    let model = BaselineModel::load(&layout.models(), "baseline", par).map_err(PipelineError::phase("load"))?;
    let baseline = BaselineFactory { model, bounds: None };
    let scenes = cfg.scenes(&cfg.scenes.eval)?;
    let seeds: Vec<u64> = (0..cfg.eval.seeds as u64).map(|i| cfg.eval.seed + i).collect();
    let term = base.coarse.disc.reference_config();
    let p = evaluate("progressive", &base, &scenes, &seeds, &term, cfg.eval.max_steps, par)?;
    let b = evaluate("end-to-end", &baseline, &scenes, &seeds, &term, cfg.eval.max_steps, par)?;
    let dir = layout.ablate();
    write_jsonl(&dir.join("policies_episodes.jsonl"), &p.episodes.iter().chain(&b.episodes).collect::<Vec<_>>())?;
    write_file(&dir.join("policies.md"), &success_table(&[&p, &b]))?;
    Ok((p, b))
}

const CATEGORY_ORDER: [(&str, &str); 3] =
    [("background", "New Background"), ("granule", "New Granules"), ("container", "New Target Container")];

fn ablate_adaptation(cfg: &ExperimentConfig, layout: &Layout) -> Result<AdaptationTable, PipelineError> {
    let base = load_base(cfg, layout)?;
    let train = load_db(&layout.train_db(), "training")?;
    let oneshot = load_db(&layout.oneshot_db(), "one-shot")?;
    let par = cfg.parallelism();
    let seeds: Vec<u64> = (0..cfg.eval.novel_seeds as u64).map(|i| cfg.eval.seed + i).collect();
    let term = base.coarse.disc.reference_config();
    let mut categories: Vec<&String> = cfg.scenes.novel.keys().collect();
    categories.sort_by_key(|c| CATEGORY_ORDER.iter().position(|(k, _)| k == c).unwrap_or(usize::MAX));
    let (mut rows, mut episodes) = (Vec::new(), Vec::new());
    for category in categories {
        let ids = &cfg.scenes.novel[category];
        if ids.is_empty() {
            continue;
        }
        let (pair, _) = translator_for(cfg, layout, category, &train, &oneshot)?;
        let synthetic = synthesize_db(&pair.g_fn(), &train, &format!("synthetic-{category}")).map_err(PipelineError::phase("synthesize"))?;
        write_grid(&layout.ablate().join(format!("grid_{category}.png")), &train, &synthetic)?;
        let mut per = BTreeMap::new();
        for id in ids {
            let a = adapt_scene(cfg, layout, id, &base, &pair, &synthetic, &oneshot)?;
            per.insert(id.clone(), ProgressiveFactory { coarse: a.coarse, fine: a.fine, bounds: Some(a.bounds), mode: cfg.adapt.mode });
        }
        let scenes = cfg.scenes(ids)?;
        let without = evaluate("without-adaptation", &base, &scenes, &seeds, &term, cfg.eval.max_steps, par)?;
        let with = evaluate("with-adaptation", &PerScene(per), &scenes, &seeds, &term, cfg.eval.max_steps, par)?;
        let n = ids.len() * seeds.len();
        rows.push(AdaptationRow {
            category: category.clone(),
            scenes: ids.clone(),
            without: (without.total_successes(), n),
            with: (with.total_successes(), n),
        });
        episodes.extend(without.episodes);
        episodes.extend(with.episodes);
    }
    let k = rows.len().max(1) as f64;
    let t = AdaptationTable {
        mean_without: rows.iter().map(|r| r.rates().0).sum::<f64>() / k,
        mean_with: rows.iter().map(|r| r.rates().1).sum::<f64>() / k,
        rows,
    };
    let dir = layout.ablate();
    write_jsonl(&dir.join("adaptation_episodes.jsonl"), &episodes)?;
    let header = ["Type of Experiment", "Without", "With"].map(String::from);
    let mut body: Vec<Vec<String>> = t
        .rows
        .iter()
        .map(|r| {
            let name = CATEGORY_ORDER.iter().find(|(k, _)| *k == r.category).map_or(r.category.as_str(), |(_, v)| v);
            vec![name.to_string(), format!("{}/{}", r.without.0, r.without.1), format!("{}/{}", r.with.0, r.with.1)]
        })
        .collect();
    body.push(vec!["Mean".into(), percent(t.mean_without), percent(t.mean_with)]);
    write_file(&dir.join("adaptation.md"), &markdown_table(&header, &body))?;
    Ok(t)
}

/// Runs the three ablations independently; a failing one is reported and
/// does not stop the others.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationReport, PipelineError> {
    let layout = Layout::new(&cfg.output_dir);
    let report = AblationReport {
        features: ablate_features(cfg, &layout).map_err(|e| e.to_string()),
        policies: compare_policies(cfg, &layout).map_err(|e| e.to_string()),
        adaptation: ablate_adaptation(cfg, &layout).map_err(|e| e.to_string()),
    };
    for (name, err) in [
        ("features", report.features.as_ref().err()),
        ("policies", report.policies.as_ref().err()),
        ("adaptation", report.adaptation.as_ref().err()),
    ] {
        if let Some(e) = err {
            log::error!("ablation {name} failed: {e}");
        }
    }
    write_json(&layout.ablate().join("report.json"), &report)?;
    Ok(report)
}
