//! End-to-end regressor: the coarse backbone with a single linear head mapping
//! `[embedding, z]` straight to the normalised action.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pour_nn::{concat_cols, Adam, AdamConfig, ForwardCtx, Graph, Linear, Parallelism, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionNorm, FineEpoch, FineError};
use crate::coarse::{images_to_tensor, Backbone, CoarseHyper};
use crate::dataset::Database;
use crate::sim::{ActionVector, Observation};

/// Same knobs as the coarse stage so budgets can be matched.
pub type BaselineHyper = CoarseHyper;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineLog {
    pub epochs: Vec<FineEpoch>,
    /// Epoch whose weights were kept.
    pub kept_epoch: usize,
}

/// `(time step, frame, z, action)`.
type Frame<'a> = (usize, &'a Observation, [f32; 2], ActionVector);

fn frames_of<'a>(db: &'a Database, z: &BTreeMap<String, [f32; 2]>, image_size: usize) -> Result<Vec<Frame<'a>>, FineError> {
    let mut out = Vec::with_capacity(db.num_frames());
    for traj in &db.trajectories {
        let zt = *z.get(&traj.scene_id).ok_or_else(|| FineError::Validation(format!("no task vector for {}", traj.scene_id)))?;
        for (t, step) in traj.steps.iter().enumerate() {
            if step.observation.size != image_size {
                return Err(FineError::Validation(format!("frame is {}px, expected {image_size}px", step.observation.size)));
            }
            out.push((t, &step.observation, zt, step.action));
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    width: usize,
    image_size: usize,
    norm: ActionNorm,
    weights_file: String,
}

#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub width: usize,
    pub image_size: usize,
    pub norm: ActionNorm,
    pub store: ParamStore,
    backbone: Backbone,
    head: Linear,
    pub par: Parallelism,
}

impl BaselineModel {
    pub fn new(width: usize, image_size: usize, seed: u64, par: Parallelism) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, width, image_size, &mut rng);
        let head = Linear::new(&mut store, "head_action", backbone.embed_dim + 2, 4, &mut rng);
        BaselineModel { width, image_size, norm: ActionNorm::identity(), store, backbone, head, par }
    }

    fn forward<'g>(&self, g: &'g Graph, frames: &[&Observation], z: &[[f32; 2]], ctx: &mut ForwardCtx) -> Var<'g> {
        let e = self.backbone.forward(g, &self.store, g.input(images_to_tensor(frames)), ctx);
        let zt = g.input(Tensor::from_vec(&[z.len(), 2], z.iter().flatten().copied().collect()));
        self.head.forward(g, &self.store, concat_cols(&[e, zt]))
    }

    pub fn predict(&self, frames: &[&Observation], z: [f32; 2]) -> Vec<ActionVector> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(64) {
            let g = Graph::new(self.par);
            let y = self.forward(&g, chunk, &vec![z; chunk.len()], &mut ForwardCtx::eval()).value();
            out.extend((0..chunk.len()).map(|b| self.norm.denormalize(y.row(b))));
        }
        out
    }

    /// Trains on `db`, keeping the weights of the epoch with the lowest
    /// held-out MSE when `val` is given.
    pub fn train(
        db: &Database,
        val: Option<&Database>,
        z: &BTreeMap<String, [f32; 2]>,
        width: usize,
        image_size: usize,
        hyper: &BaselineHyper,
        par: Parallelism,
    ) -> Result<(BaselineModel, BaselineLog), FineError> {
        let mut model = BaselineModel::new(width, image_size, hyper.seed, par);
        let samples = frames_of(db, z, image_size)?;
        if samples.is_empty() {
            return Err(FineError::Validation("empty training database".into()));
        }
        let val_samples = match val {
            Some(v) => frames_of(v, z, image_size)?,
            None => Vec::new(),
        };
        model.norm = ActionNorm::fit(samples.iter().map(|s| &s.3));
        let mut opt = Adam::new(AdamConfig { lr: hyper.lr, weight_decay: hyper.weight_decay, clip_norm: Some(5.0), ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xba5f);
        let stride = hyper.frame_stride.max(1);
        let mut log = BaselineLog::default();
        let mut best: Option<(f32, usize, ParamStore)> = None;
        for epoch in 0..hyper.epochs {
            let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].0 % stride == epoch % stride).collect();
            idx.shuffle(&mut rng);
            let (mut total, mut count) = (0.0f64, 0usize);
            for batch in idx.chunks(hyper.batch_size.max(1)) {
                if batch.len() < 2 {
                    continue;
                }
                let refs: Vec<&Frame> = batch.iter().map(|&i| &samples[i]).collect();
                let g = Graph::new(par);
                let mut ctx = ForwardCtx::train();
                let loss = model.mse(&g, &refs, &mut ctx);
                let value = loss.item();
                if !value.is_finite() {
                    return Err(FineError::Diverged { epoch, loss: value });
                }
                let grads = g.backward(loss);
                opt.step(&mut model.store, &grads);
                ctx.apply_running_stats(&mut model.store, hyper.bn_momentum);
                total += value as f64 * batch.len() as f64;
                count += batch.len();
            }
            let train_loss = (total / count.max(1) as f64) as f32;
            let val_mse = if val_samples.is_empty() { f32::NAN } else { model.evaluate(&val_samples) };
            log::info!("baseline epoch {}: train {train_loss:.4} val {val_mse:.4}", epoch + 1);
            log.epochs.push(FineEpoch { epoch: epoch + 1, train_loss, val_mse });
            log.kept_epoch = epoch + 1;
            if !val_samples.is_empty() && best.as_ref().is_none_or(|b| val_mse < b.0) {
                best = Some((val_mse, epoch + 1, model.store.clone()));
            }
        }
        if let Some((_, epoch, store)) = best {
            model.store.copy_values_from(&store);
            log.kept_epoch = epoch;
        }
        Ok((model, log))
    }

    /// Summed per-component MSE on normalised actions.
    fn mse<'g>(&self, g: &'g Graph, batch: &[&Frame], ctx: &mut ForwardCtx) -> Var<'g> {
        let frames: Vec<&Observation> = batch.iter().map(|s| s.1).collect();
        let zs: Vec<[f32; 2]> = batch.iter().map(|s| s.2).collect();
        let target: Vec<f32> = batch.iter().flat_map(|s| self.norm.normalize(&s.3)).collect();
        let pred = self.forward(g, &frames, &zs, ctx);
        pred.sub(g.input(Tensor::from_vec(&[batch.len(), 4], target))).square().mean().scale(4.0)
    }

    fn evaluate(&self, samples: &[Frame]) -> f32 {
        let mut total = 0.0f64;
        for chunk in samples.chunks(64) {
            let refs: Vec<&Frame> = chunk.iter().collect();
            let g = Graph::new(self.par);
            total += self.mse(&g, &refs, &mut ForwardCtx::eval()).item() as f64 * chunk.len() as f64;
        }
        (total / samples.len().max(1) as f64) as f32
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<(), FineError> {
        fs::create_dir_all(dir)?;
        let weights_file = format!("{name}.pnnw");
        self.store.save(std::io::BufWriter::new(fs::File::create(dir.join(&weights_file))?))?;
        let m = Manifest { kind: "baseline".into(), width: self.width, image_size: self.image_size, norm: self.norm.clone(), weights_file };
        fs::write(dir.join(format!("{name}.manifest.json")), serde_json::to_string_pretty(&m).expect("manifest"))?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &str, par: Parallelism) -> Result<Self, FineError> {
        let text = fs::read_to_string(dir.join(format!("{name}.manifest.json")))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| FineError::Checkpoint(e.to_string()))?;
        if m.kind != "baseline" {
            return Err(FineError::Checkpoint(format!("{name}: not a baseline checkpoint")));
        }
        let mut model = BaselineModel::new(m.width, m.image_size, 0, par);
        model.norm = m.norm;
        model.store.load_into(std::io::BufReader::new(fs::File::open(dir.join(&m.weights_file))?))?;
        Ok(model)
    }
}
