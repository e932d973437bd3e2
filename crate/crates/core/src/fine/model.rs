use std::fs;
use std::path::Path;

use pour_nn::{concat_cols, Adam, AdamConfig, AdditiveAttention, Graph, Linear, Lstm, Parallelism, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_windows, FineError, SafetyBounds};
use crate::dataset::FeatureTrajectory;
use crate::sim::ActionVector;

/// Per-component affine normalisation of action targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionNorm {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl ActionNorm {
    pub fn identity() -> Self {
        ActionNorm { mean: [0.0; 4], std: [1.0; 4] }
    }

    pub fn fit<'a>(actions: impl IntoIterator<Item = &'a ActionVector>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, [0.0f64; 4], [0.0f64; 4]);
        for a in actions {
            let v = a.to_array();
            for k in 0..4 {
                sum[k] += v[k];
                sq[k] += v[k] * v[k];
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity();
        }
        let mean = sum.map(|s| s / n as f64);
        let std = [0, 1, 2, 3].map(|k| (sq[k] / n as f64 - mean[k] * mean[k]).max(0.0).sqrt().max(1e-3));
        ActionNorm { mean, std }
    }

    pub fn normalize(&self, a: &ActionVector) -> [f32; 4] {
        let v = a.to_array();
        [0, 1, 2, 3].map(|k| ((v[k] - self.mean[k]) / self.std[k]) as f32)
    }

    pub fn denormalize(&self, v: &[f32]) -> ActionVector {
        ActionVector::from_array([0, 1, 2, 3].map(|k| v[k] as f64 * self.std[k] + self.mean[k]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub window: usize,
    pub lstm1: usize,
    pub lstm2: usize,
    pub attn_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for FineHyper {
    fn default() -> Self {
        FineHyper {
            epochs: 30,
            batch_size: 64,
            lr: 2e-3,
            weight_decay: 0.0,
            seed: 0,
            window: 8,
            lstm1: 128,
            lstm2: 64,
            attn_dim: 32,
            mlp_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineEpoch {
    pub epoch: usize,
    pub train_loss: f32,
    /// Held-out summed per-component MSE on normalised actions.
    pub val_mse: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FineLog {
    pub epochs: Vec<FineEpoch>,
    /// Same metric for always predicting the training mean action.
    pub mean_baseline_mse: f32,
    /// Epoch whose weights were kept: the lowest held-out MSE, or the last
    /// epoch when there is no held-out set.
    pub kept_epoch: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FineArch {
    feature_len: usize,
    window: usize,
    lstm1: usize,
    lstm2: usize,
    attn_dim: usize,
    mlp_hidden: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    arch: FineArch,
    norm: ActionNorm,
    bounds: Option<SafetyBounds>,
    weights_file: String,
}

/// Two stacked LSTMs, additive attention over the second one's states, and
/// an MLP on `[context, last state]` predicting `(v_x, v_y, v_z, θ)`.
#[derive(Clone, Debug)]
pub struct FineModel {
    arch: FineArch,
    pub norm: ActionNorm,
    pub store: ParamStore,
    lstm1: Lstm,
    lstm2: Lstm,
    attn: AdditiveAttention,
    mlp1: Linear,
    mlp2: Linear,
    pub par: Parallelism,
}

type Sample = (Vec<Vec<f32>>, [f32; 4]);

fn windows_of(data: &[FeatureTrajectory], w: usize, norm: &ActionNorm) -> Vec<Sample> {
    data.iter()
        .flat_map(|t| build_windows(t, w))
        .map(|(win, a)| (win.features, norm.normalize(&a)))
        .collect()
}

impl FineModel {
    fn build(arch: FineArch, norm: ActionNorm, seed: u64, par: Parallelism) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1e0);
        let mut store = ParamStore::new();
        let lstm1 = Lstm::new(&mut store, "lstm1", arch.feature_len, arch.lstm1, &mut rng);
        let lstm2 = Lstm::new(&mut store, "lstm2", arch.lstm1, arch.lstm2, &mut rng);
        let attn = AdditiveAttention::new(&mut store, "attn", arch.lstm2, arch.attn_dim, &mut rng);
        let mlp1 = Linear::new(&mut store, "mlp1", 2 * arch.lstm2, arch.mlp_hidden, &mut rng);
        let mlp2 = Linear::new(&mut store, "mlp2", arch.mlp_hidden, 4, &mut rng);
        FineModel { arch, norm, store, lstm1, lstm2, attn, mlp1, mlp2, par }
    }

    /// Untrained model with identity action normalisation.
    pub fn new(feature_len: usize, hyper: &FineHyper, par: Parallelism) -> Self {
        let arch = FineArch {
            feature_len,
            window: hyper.window,
            lstm1: hyper.lstm1,
            lstm2: hyper.lstm2,
            attn_dim: hyper.attn_dim,
            mlp_hidden: hyper.mlp_hidden,
        };
        Self::build(arch, ActionNorm::identity(), hyper.seed, par)
    }

    pub fn window(&self) -> usize {
        self.arch.window
    }

    pub fn feature_len(&self) -> usize {
        self.arch.feature_len
    }

    fn forward<'g>(&self, g: &'g Graph, windows: &[&[Vec<f32>]]) -> Var<'g> {
        let s = &self.store;
        let xs: Vec<Var<'g>> = (0..self.arch.window)
            .map(|t| {
                let rows: Vec<f32> = windows.iter().flat_map(|w| w[t].iter().copied()).collect();
                g.input(Tensor::from_vec(&[windows.len(), self.arch.feature_len], rows))
            })
            .collect();
        let h1 = self.lstm1.forward(g, s, &xs);
        let h2 = self.lstm2.forward(g, s, &h1);
        let (ctx, _) = self.attn.forward(g, s, &h2);
        let last = *h2.last().expect("non-empty window");
        let hidden = self.mlp1.forward(g, s, concat_cols(&[ctx, last])).relu();
        self.mlp2.forward(g, s, hidden)
    }

    fn check(&self, windows: &[&[Vec<f32>]]) -> Result<(), FineError> {
        for w in windows {
            if w.len() != self.arch.window || w.iter().any(|f| f.len() != self.arch.feature_len) {
                return Err(FineError::Validation(format!(
                    "expected windows of {} features of length {}",
                    self.arch.window, self.arch.feature_len
                )));
            }
        }
        Ok(())
    }

    /// De-normalised action per window. Panics on malformed windows.
    pub fn predict(&self, windows: &[&[Vec<f32>]]) -> Vec<ActionVector> {
        self.check(windows).expect("malformed feature window");
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let g = Graph::new(self.par);
            let y = self.forward(&g, chunk).value();
            out.extend((0..chunk.len()).map(|b| self.norm.denormalize(y.row(b))));
        }
        out
    }

    fn mse<'g>(&self, g: &'g Graph, batch: &[&Sample]) -> Var<'g> {
        let wins: Vec<&[Vec<f32>]> = batch.iter().map(|s| s.0.as_slice()).collect();
        let pred = self.forward(g, &wins);
        let target: Vec<f32> = batch.iter().flat_map(|s| s.1).collect();
        let target = g.input(Tensor::from_vec(&[batch.len(), 4], target));
        // mean over batch and components, times 4 = sum of per-component MSE
        pred.sub(target).square().mean().scale(4.0)
    }

    fn evaluate(&self, samples: &[Sample]) -> f32 {
        let mut total = 0.0f64;
        for chunk in samples.chunks(256) {
            let g = Graph::new(self.par);
            let refs: Vec<&Sample> = chunk.iter().collect();
            total += self.mse(&g, &refs).item() as f64 * chunk.len() as f64;
        }
        (total / samples.len().max(1) as f64) as f32
    }

    /// Trains from scratch; action normalisation is fitted on `train`.
    pub fn train(
        train: &[FeatureTrajectory],
        val: Option<&[FeatureTrajectory]>,
        hyper: &FineHyper,
        par: Parallelism,
    ) -> Result<(FineModel, FineLog), FineError> {
        let norm = ActionNorm::fit(train.iter().flat_map(|t| t.actions.iter()));
        Self::train_with_norm(train, val, norm, hyper, par)
    }

    /// Trains from scratch with a given action normalisation, so that losses
    /// of runs on different subsets share units.
    pub fn train_with_norm(
        train: &[FeatureTrajectory],
        val: Option<&[FeatureTrajectory]>,
        norm: ActionNorm,
        hyper: &FineHyper,
        par: Parallelism,
    ) -> Result<(FineModel, FineLog), FineError> {
        let feature_len = train
            .iter()
            .find_map(|t| t.features.first().map(Vec::len))
            .ok_or_else(|| FineError::Validation("empty training set".into()))?;
        let mut model = FineModel::new(feature_len, hyper, par);
        model.norm = norm;
        let log = model.fit(train, val, hyper)?;
        Ok((model, log))
    }

    /// Continues training with the current normalisation.
    pub fn fine_tune(
        &mut self,
        train: &[FeatureTrajectory],
        val: Option<&[FeatureTrajectory]>,
        hyper: &FineHyper,
    ) -> Result<FineLog, FineError> {
        self.fit(train, val, hyper)
    }

    fn fit(&mut self, train: &[FeatureTrajectory], val: Option<&[FeatureTrajectory]>, hyper: &FineHyper) -> Result<FineLog, FineError> {
        let w = self.arch.window;
        let samples = windows_of(train, w, &self.norm);
        if samples.is_empty() {
            return Err(FineError::Validation(format!("no trajectory is at least {w} steps long")));
        }
        if let Some(f) = samples.iter().flat_map(|s| s.0.iter()).find(|f| f.len() != self.arch.feature_len) {
            return Err(FineError::Validation(format!("feature of length {} (expected {})", f.len(), self.arch.feature_len)));
        }
        let mut log = FineLog::default();
        let val_samples = match val {
            Some(v) => windows_of(v, w, &self.norm),
            None => {
                log.warnings.push("no held-out set; statistics are on training data".into());
                samples.clone()
            }
        };
        // the training mean is zero after normalisation
        let train_mean = {
            let n = samples.len() as f64;
            [0, 1, 2, 3].map(|k| samples.iter().map(|s| s.1[k] as f64).sum::<f64>() / n)
        };
        log.mean_baseline_mse = (val_samples
            .iter()
            .map(|s| (0..4).map(|k| (s.1[k] as f64 - train_mean[k]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / val_samples.len().max(1) as f64) as f32;

        let mut opt = Adam::new(AdamConfig { lr: hyper.lr, weight_decay: hyper.weight_decay, clip_norm: Some(5.0), ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xf1e1);
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        let mut best: Option<(f32, usize, ParamStore)> = None;
        for epoch in 0..hyper.epochs {
            idx.shuffle(&mut rng);
            let (mut total, mut count) = (0.0f64, 0usize);
            for batch in idx.chunks(hyper.batch_size.max(1)) {
                let refs: Vec<&Sample> = batch.iter().map(|&i| &samples[i]).collect();
                let g = Graph::new(self.par);
                let loss = self.mse(&g, &refs);
                let value = loss.item();
                if !value.is_finite() {
                    return Err(FineError::Diverged { epoch, loss: value });
                }
                let grads = g.backward(loss);
                opt.step(&mut self.store, &grads);
                total += value as f64 * batch.len() as f64;
                count += batch.len();
            }
            let stats = FineEpoch { epoch: epoch + 1, train_loss: (total / count as f64) as f32, val_mse: self.evaluate(&val_samples) };
            log::info!("fine epoch {}: train {:.4} val {:.4}", stats.epoch, stats.train_loss, stats.val_mse);
            log.kept_epoch = epoch + 1;
            if val.is_some() && best.as_ref().is_none_or(|b| stats.val_mse < b.0) {
                best = Some((stats.val_mse, epoch + 1, self.store.clone()));
            }
            log.epochs.push(stats);
        }
        if let Some((_, epoch, store)) = best {
            self.store.copy_values_from(&store);
            log.kept_epoch = epoch;
        }
        Ok(log)
    }

    pub fn save(&self, dir: &Path, name: &str, bounds: Option<&SafetyBounds>) -> Result<(), FineError> {
        fs::create_dir_all(dir)?;
        let weights_file = format!("{name}.pnnw");
        self.store.save(std::io::BufWriter::new(fs::File::create(dir.join(&weights_file))?))?;
        let m = Manifest { kind: "fine".into(), arch: self.arch.clone(), norm: self.norm.clone(), bounds: bounds.cloned(), weights_file };
        fs::write(dir.join(format!("{name}.manifest.json")), serde_json::to_string_pretty(&m).expect("manifest"))?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &str, par: Parallelism) -> Result<(Self, Option<SafetyBounds>), FineError> {
        let text = fs::read_to_string(dir.join(format!("{name}.manifest.json")))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| FineError::Checkpoint(e.to_string()))?;
        if m.kind != "fine" {
            return Err(FineError::Checkpoint(format!("{name}: not a fine checkpoint")));
        }
        let mut model = Self::build(m.arch, m.norm, 0, par);
        model.store.load_into(std::io::BufReader::new(fs::File::open(dir.join(&m.weights_file))?))?;
        Ok((model, m.bounds))
    }
}
