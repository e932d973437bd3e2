use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pour_nn::{softmax_rows, Adam, AdamConfig, ForwardCtx, Graph, Linear, Parallelism, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{images_to_tensor, Backbone};
use super::{coarse_loss, label_trajectory, CoarseError, ConceptLabels, Discretization};
use crate::dataset::{Database, FeatureTrajectory, Trajectory};
use crate::sim::Observation;

/// Order of the softmax blocks inside a concept feature.
pub const HEAD_ORDER: [&str; 4] = ["vx", "vy", "vz", "theta"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseArch {
    pub width: usize,
    pub image_size: usize,
    pub n_tilt: usize,
    pub m_vel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoarseHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Train on every `frame_stride`-th frame, rotating the offset each epoch.
    pub frame_stride: usize,
    pub bn_momentum: f32,
}

impl Default for CoarseHyper {
    fn default() -> Self {
        CoarseHyper { epochs: 30, batch_size: 32, lr: 2e-3, weight_decay: 0.0, seed: 0, frame_stride: 2, bn_momentum: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    /// Held-out accuracy per head, `(θ, v_x, v_y, v_z)`.
    pub val_accuracy: [f32; 4],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoarseLog {
    pub epochs: Vec<EpochStats>,
    /// Majority-class accuracy on the held-out labels, `(θ, v_x, v_y, v_z)`.
    pub majority_baseline: [f32; 4],
    /// Epoch whose weights were kept: the lowest held-out loss, or the last
    /// epoch when there is no held-out set.
    pub kept_epoch: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Softmax probabilities.
    Soft,
    /// Arg-max of each head as a one-hot block.
    OneHot,
}

#[derive(Clone, Debug)]
pub struct CoarseModel {
    pub arch: CoarseArch,
    pub disc: Discretization,
    pub store: ParamStore,
    backbone: Backbone,
    /// In [`HEAD_ORDER`].
    heads: [Linear; 4],
    pub par: Parallelism,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    arch: CoarseArch,
    discretization: Discretization,
    head_order: Vec<String>,
    feature_len: usize,
    loss_weights: [f32; 4],
    weights_file: String,
}

struct Sample<'a> {
    obs: &'a Observation,
    labels: ConceptLabels,
}

fn collect_samples<'a>(db: &'a Database, disc: &Discretization) -> Result<Vec<(usize, Sample<'a>)>, CoarseError> {
    let mut out = Vec::with_capacity(db.num_frames());
    for traj in &db.trajectories {
        let labels = label_trajectory(traj, &disc.config_for(&traj.scene_id))?;
        for (t, (step, l)) in traj.steps.iter().zip(labels).enumerate() {
            out.push((t, Sample { obs: &step.observation, labels: l }));
        }
    }
    Ok(out)
}

impl CoarseModel {
    pub fn new(arch: CoarseArch, disc: Discretization, seed: u64, par: Parallelism) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, arch.width, arch.image_size, &mut rng);
        let e = backbone.embed_dim;
        let heads = [
            Linear::new(&mut store, "head_vx", e, arch.m_vel, &mut rng),
            Linear::new(&mut store, "head_vy", e, arch.m_vel, &mut rng),
            Linear::new(&mut store, "head_vz", e, arch.m_vel, &mut rng),
            Linear::new(&mut store, "head_theta", e, arch.n_tilt, &mut rng),
        ];
        CoarseModel { arch, disc, store, backbone, heads, par }
    }

    pub fn feature_len(&self) -> usize {
        3 * self.arch.m_vel + self.arch.n_tilt + 2
    }

    /// Head logits in [`HEAD_ORDER`].
    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>, ctx: &mut ForwardCtx) -> [Var<'g>; 4] {
        let e = self.backbone.forward(g, &self.store, x, ctx);
        [0, 1, 2, 3].map(|i| self.heads[i].forward(g, &self.store, e))
    }

    fn check_frames(&self, frames: &[&Observation]) -> Result<(), CoarseError> {
        for f in frames {
            if f.size != self.arch.image_size || f.image.len() != f.size * f.size * 3 {
                return Err(CoarseError::Validation(format!(
                    "frame is {}px, model expects {}px",
                    f.size, self.arch.image_size
                )));
            }
        }
        Ok(())
    }

    /// Concatenated softmax blocks (length `3M + N`) per frame.
    pub fn predict_probs(&self, frames: &[&Observation]) -> Result<Vec<Vec<f32>>, CoarseError> {
        self.check_frames(frames)?;
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(64) {
            let g = Graph::new(self.par);
            let mut ctx = ForwardCtx::eval();
            let heads = self.logits(&g, g.input(images_to_tensor(chunk)), &mut ctx);
            let probs: Vec<_> = heads.iter().map(|h| softmax_rows(&h.value())).collect();
            for b in 0..chunk.len() {
                let mut f = Vec::with_capacity(self.feature_len());
                for p in &probs {
                    f.extend_from_slice(p.row(b));
                }
                out.push(f);
            }
        }
        Ok(out)
    }

    /// Concept feature `[f_p, z]` for each frame.
    pub fn features(&self, frames: &[&Observation], z: [f32; 2], mode: FeatureMode) -> Result<Vec<Vec<f32>>, CoarseError> {
        let blocks = [self.arch.m_vel, self.arch.m_vel, self.arch.m_vel, self.arch.n_tilt];
        let mut probs = self.predict_probs(frames)?;
        for f in &mut probs {
            if mode == FeatureMode::OneHot {
                let mut start = 0;
                for len in blocks {
                    let block = &mut f[start..start + len];
                    let arg = argmax(block);
                    block.iter_mut().enumerate().for_each(|(i, v)| *v = if i == arg { 1.0 } else { 0.0 });
                    start += len;
                }
            }
            f.extend_from_slice(&z);
        }
        Ok(probs)
    }

    pub fn extract_feature(&self, obs: &Observation, z: [f32; 2]) -> Result<Vec<f32>, CoarseError> {
        Ok(self.features(&[obs], z, FeatureMode::Soft)?.remove(0))
    }

    /// Trains from scratch. Held-out statistics use `val` when given.
    pub fn train(
        train: &Database,
        val: Option<&Database>,
        arch: CoarseArch,
        disc: Discretization,
        hyper: &CoarseHyper,
        par: Parallelism,
    ) -> Result<(CoarseModel, CoarseLog), CoarseError> {
        let mut model = CoarseModel::new(arch, disc, hyper.seed, par);
        let log = model.fit(train, val, hyper)?;
        Ok((model, log))
    }

    /// Continues training only parameters whose names start with one of
    /// `trainable`; everything else is frozen.
    pub fn fine_tune(
        &mut self,
        train: &Database,
        val: Option<&Database>,
        hyper: &CoarseHyper,
        trainable: &[&str],
    ) -> Result<CoarseLog, CoarseError> {
        self.store.set_all_trainable(false);
        for p in trainable {
            self.store.set_trainable_prefix(p, true);
        }
        let log = self.fit(train, val, hyper);
        self.store.set_all_trainable(true);
        log
    }

    fn fit(&mut self, train: &Database, val: Option<&Database>, hyper: &CoarseHyper) -> Result<CoarseLog, CoarseError> {
        if train.is_empty() {
            return Err(CoarseError::Validation("empty training database".into()));
        }
        let samples = collect_samples(train, &self.disc)?;
        let frames: Vec<&Observation> = samples.iter().map(|(_, s)| s.obs).collect();
        self.check_frames(&frames)?;
        let val_samples = match val {
            Some(v) => collect_samples(v, &self.disc)?,
            None => collect_samples(train, &self.disc)?,
        };
        let mut log = CoarseLog::default();
        let val_labels: Vec<ConceptLabels> = val_samples.iter().map(|(_, s)| s.labels).collect();
        log.majority_baseline = super::majority_baseline(&val_labels, self.arch.n_tilt, self.arch.m_vel);
        if val.is_none() {
            log.warnings.push("no held-out set; statistics are on training data".into());
        }
        let stride = hyper.frame_stride.max(1);
        if samples.len() / stride < 2 * hyper.batch_size {
            let msg = format!("only {} training frames: expect overfitting", samples.len());
            log::warn!("{msg}");
            log.warnings.push(msg);
        }
        let mut opt = Adam::new(AdamConfig { lr: hyper.lr, weight_decay: hyper.weight_decay, clip_norm: Some(5.0), ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xc0a4_5e00);
        let mut best: Option<(f32, usize, ParamStore)> = None;
        for epoch in 0..hyper.epochs {
            let mut idx: Vec<usize> =
                samples.iter().enumerate().filter(|(_, (t, _))| t % stride == epoch % stride).map(|(i, _)| i).collect();
            idx.shuffle(&mut rng);
            let (mut total, mut count) = (0.0f64, 0usize);
            for (b, batch) in idx.chunks(hyper.batch_size.max(1)).enumerate() {
                if batch.len() < 2 {
                    continue;
                }
                let obs: Vec<&Observation> = batch.iter().map(|&i| samples[i].1.obs).collect();
                let labels: Vec<ConceptLabels> = batch.iter().map(|&i| samples[i].1.labels).collect();
                let g = Graph::new(self.par);
                let mut ctx = ForwardCtx::train();
                let heads = self.logits(&g, g.input(images_to_tensor(&obs)), &mut ctx);
                let loss = weighted_ce(&heads, &labels);
                let value = loss.item();
                if !value.is_finite() {
                    return Err(CoarseError::Diverged { epoch, batch: b, loss: value });
                }
                let grads = g.backward(loss);
                opt.step(&mut self.store, &grads);
                ctx.apply_running_stats(&mut self.store, hyper.bn_momentum);
                total += value as f64 * batch.len() as f64;
                count += batch.len();
            }
            let (val_loss, val_accuracy) = self.evaluate(&val_samples);
            let stats = EpochStats { epoch: epoch + 1, train_loss: (total / count.max(1) as f64) as f32, val_loss, val_accuracy };
            log::info!("coarse epoch {}: train {:.4} val {:.4} acc {:?}", stats.epoch, stats.train_loss, val_loss, val_accuracy);
            log.epochs.push(stats);
            log.kept_epoch = epoch + 1;
            if val.is_some() && best.as_ref().is_none_or(|b| val_loss < b.0) {
                best = Some((val_loss, epoch + 1, self.store.clone()));
            }
        }
        if let Some((_, epoch, store)) = best {
            self.store.copy_values_from(&store);
            log.kept_epoch = epoch;
        }
        if !self.store.all_finite() {
            return Err(CoarseError::Diverged { epoch: hyper.epochs, batch: 0, loss: f32::NAN });
        }
        Ok(log)
    }

    fn evaluate(&self, samples: &[(usize, Sample)]) -> (f32, [f32; 4]) {
        let mut loss = 0.0f64;
        let mut correct = [0usize; 4];
        for chunk in samples.chunks(64) {
            let obs: Vec<&Observation> = chunk.iter().map(|(_, s)| s.obs).collect();
            let labels: Vec<ConceptLabels> = chunk.iter().map(|(_, s)| s.labels).collect();
            let g = Graph::new(self.par);
            let mut ctx = ForwardCtx::eval();
            let heads = self.logits(&g, g.input(images_to_tensor(&obs)), &mut ctx);
            loss += weighted_ce(&heads, &labels).item() as f64 * chunk.len() as f64;
            // heads are (vx, vy, vz, θ); accuracy is reported as (θ, vx, vy, vz)
            for (b, l) in labels.iter().enumerate() {
                let truth = [l.tilt, l.vx, l.vy, l.vz];
                let pred = [3, 0, 1, 2].map(|h| argmax(heads[h].value().row(b)));
                for k in 0..4 {
                    correct[k] += (pred[k] == truth[k]) as usize;
                }
            }
        }
        let n = samples.len().max(1) as f32;
        ((loss / n as f64) as f32, correct.map(|c| c as f32 / n))
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<(), CoarseError> {
        fs::create_dir_all(dir)?;
        let weights_file = format!("{name}.pnnw");
        self.store.save(std::io::BufWriter::new(fs::File::create(dir.join(&weights_file))?))?;
        let m = Manifest {
            kind: "coarse".into(),
            arch: self.arch.clone(),
            discretization: self.disc.clone(),
            head_order: HEAD_ORDER.iter().map(|s| s.to_string()).collect(),
            feature_len: self.feature_len(),
            loss_weights: super::LOSS_WEIGHTS,
            weights_file,
        };
        fs::write(dir.join(format!("{name}.manifest.json")), serde_json::to_string_pretty(&m).expect("manifest"))?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &str, par: Parallelism) -> Result<Self, CoarseError> {
        let text = fs::read_to_string(dir.join(format!("{name}.manifest.json")))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CoarseError::Checkpoint(e.to_string()))?;
        if m.kind != "coarse" || m.head_order != HEAD_ORDER {
            return Err(CoarseError::Checkpoint(format!("{name}: not a coarse checkpoint")));
        }
        let mut model = CoarseModel::new(m.arch, m.discretization, 0, par);
        if model.feature_len() != m.feature_len {
            return Err(CoarseError::Checkpoint("feature length mismatch".into()));
        }
        model.store.load_into(std::io::BufReader::new(fs::File::open(dir.join(&m.weights_file))?))?;
        Ok(model)
    }
}

fn weighted_ce<'g>(heads: &[Var<'g>; 4], labels: &[ConceptLabels]) -> Var<'g> {
    let pick = |f: fn(&ConceptLabels) -> usize| labels.iter().map(f).collect::<Vec<_>>();
    let ce_theta = heads[3].cross_entropy(&pick(|l| l.tilt));
    let ce_vx = heads[0].cross_entropy(&pick(|l| l.vx));
    let ce_vy = heads[1].cross_entropy(&pick(|l| l.vy));
    let ce_vz = heads[2].cross_entropy(&pick(|l| l.vz));
    let w = super::LOSS_WEIGHTS;
    let loss = ce_theta.scale(w[0]).add(ce_vx.scale(w[1])).add(ce_vy.scale(w[2])).add(ce_vz.scale(w[3]));
    debug_assert!({
        let parts = [ce_theta.item(), ce_vx.item(), ce_vy.item(), ce_vz.item()];
        (coarse_loss(parts) - loss.item()).abs() <= 1e-4 * (1.0 + loss.item().abs())
    });
    loss
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn featurize_trajectory(
    model: &CoarseModel,
    traj: &Trajectory,
    z: [f32; 2],
    mode: FeatureMode,
) -> Result<FeatureTrajectory, CoarseError> {
    let frames: Vec<&Observation> = traj.steps.iter().map(|s| &s.observation).collect();
    Ok(FeatureTrajectory {
        scene_id: traj.scene_id.clone(),
        features: model.features(&frames, z, mode)?,
        actions: traj.actions().collect(),
    })
}

/// Replaces every frame with its concept feature.
pub fn featurize_db(
    model: &CoarseModel,
    db: &Database,
    z: &BTreeMap<String, [f32; 2]>,
    mode: FeatureMode,
) -> Result<Vec<FeatureTrajectory>, CoarseError> {
    db.trajectories
        .iter()
        .map(|t| {
            let zt = *z.get(&t.scene_id).ok_or_else(|| CoarseError::UnknownScene(t.scene_id.clone()))?;
            featurize_trajectory(model, t, zt, mode)
        })
        .collect()
}
