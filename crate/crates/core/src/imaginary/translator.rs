use std::fs;
use std::path::Path;

use pour_nn::{Adam, AdamConfig, Graph, Parallelism, ParamStore, Tensor, Var};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nets::{Discriminator, Generator};
use super::{cycle_loss, Critic, CriticFn, ImageFn, ImaginaryError, LossParts};
use crate::dataset::{Database, DomainTag, SourceTag, Step, Trajectory};
use crate::sim::Observation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lambda: f64,
    pub gen_width: usize,
    pub disc_width: usize,
    pub seed: u64,
    /// Source frames kept out of training for the held-out cycle loss.
    pub heldout: usize,
    pub eval_every: usize,
    /// Mean per-pixel variance across a generated batch below which a
    /// mode-collapse warning is raised.
    pub collapse_threshold: f64,
}

impl Default for TranslatorHyper {
    fn default() -> Self {
        TranslatorHyper {
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            lambda: 10.0,
            gen_width: 8,
            disc_width: 8,
            seed: 0,
            heldout: 8,
            eval_every: 250,
            collapse_threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TranslatorLog {
    /// `(step, generator loss, discriminator loss)`.
    pub train: Vec<(usize, f32, f32)>,
    /// `(step, held-out cycle loss)`, starting at step 0.
    pub heldout_cycle: Vec<(usize, f64)>,
    pub warnings: Vec<String>,
}

/// Dual generators `G: H -> R`, `G': R -> H` and per-domain discriminators.
#[derive(Clone, Debug)]
pub struct TranslatorPair {
    pub image_size: usize,
    pub lambda: f64,
    pub source_domain: String,
    pub target_domain: String,
    /// Holds `G` and `G'`.
    pub gen_store: ParamStore,
    /// Holds `D_H` and `D_R`.
    pub disc_store: ParamStore,
    g: Generator,
    g_prime: Generator,
    d_h: Discriminator,
    d_r: Discriminator,
    gen_width: usize,
    disc_width: usize,
    pub par: Parallelism,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    source_domain: String,
    target_domain: String,
    lambda: f64,
    image_size: usize,
    gen_width: usize,
    disc_width: usize,
    generator_file: String,
    discriminator_file: String,
}

/// `[B, 3, S, S]` in `[-1, 1]`.
pub fn observations_to_tensor(frames: &[&Observation]) -> Tensor {
    let size = frames.first().map_or(0, |o| o.size);
    let plane = size * size;
    let mut data = vec![0.0f32; frames.len() * 3 * plane];
    for (b, obs) in frames.iter().enumerate() {
        assert_eq!(obs.size, size, "mixed frame sizes in one batch");
        for (p, px) in obs.image.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * plane + p] = px[c] as f32 / 127.5 - 1.0;
            }
        }
    }
    Tensor::from_vec(&[frames.len(), 3, size, size], data)
}

pub fn tensor_to_observation(t: &Tensor, b: usize, frame_index: u64) -> Observation {
    let size = t.dim(2);
    let plane = size * size;
    let img = t.index0(b);
    let d = img.data();
    let mut image = vec![0u8; plane * 3];
    for p in 0..plane {
        for c in 0..3 {
            image[p * 3 + c] = ((d[c * plane + p] as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
    }
    Observation { image, size, frame_index }
}

fn sq_to(v: Var<'_>, t: f32) -> Var<'_> {
    v.add_scalar(-t).square().mean()
}

fn batch_variance(t: &Tensor) -> f64 {
    let n = t.dim(0);
    if n < 2 {
        return f64::INFINITY;
    }
    let per = t.len() / n;
    let d = t.data();
    (0..per)
        .map(|i| {
            let mean = (0..n).map(|b| d[b * per + i] as f64).sum::<f64>() / n as f64;
            (0..n).map(|b| (d[b * per + i] as f64 - mean).powi(2)).sum::<f64>() / n as f64
        })
        .sum::<f64>()
        / per as f64
}

impl TranslatorPair {
    pub fn new(image_size: usize, hyper: &TranslatorHyper, source: &str, target: &str, par: Parallelism) -> Self {
        assert!(hyper.lambda > 0.0, "cycle weight must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x6a11);
        let mut gen_store = ParamStore::new();
        let mut disc_store = ParamStore::new();
        TranslatorPair {
            image_size,
            lambda: hyper.lambda,
            source_domain: source.into(),
            target_domain: target.into(),
            g: Generator::new(&mut gen_store, "g", hyper.gen_width, &mut rng),
            g_prime: Generator::new(&mut gen_store, "g_prime", hyper.gen_width, &mut rng),
            d_h: Discriminator::new(&mut disc_store, "d_h", hyper.disc_width, &mut rng),
            d_r: Discriminator::new(&mut disc_store, "d_r", hyper.disc_width, &mut rng),
            gen_store,
            disc_store,
            gen_width: hyper.gen_width,
            disc_width: hyper.disc_width,
            par,
        }
    }

    fn run_gen(&self, net: &Generator, x: &Tensor) -> Tensor {
        let g = Graph::new(self.par);
        let y = net.forward(&g, &self.gen_store, g.input(x.clone())).value();
        (*y).clone()
    }

    fn run_disc(&self, net: &Discriminator, x: &Tensor) -> Vec<f64> {
        let g = Graph::new(self.par);
        let y = net.forward(&g, &self.disc_store, g.input(x.clone())).value();
        y.data().iter().map(|&v| v as f64).collect()
    }

    pub fn g_fn(&self) -> impl ImageFn + '_ {
        move |x: &Tensor| self.run_gen(&self.g, x)
    }

    pub fn g_prime_fn(&self) -> impl ImageFn + '_ {
        move |x: &Tensor| self.run_gen(&self.g_prime, x)
    }

    pub fn d_h_fn(&self) -> impl Critic + '_ {
        CriticFn(move |x: &Tensor| self.run_disc(&self.d_h, x))
    }

    pub fn d_r_fn(&self) -> impl Critic + '_ {
        CriticFn(move |x: &Tensor| self.run_disc(&self.d_r, x))
    }

    pub fn total_loss(&self, x_h: &Tensor, x_r: &Tensor) -> LossParts {
        super::total_loss(&self.g_fn(), &self.g_prime_fn(), &self.d_h_fn(), &self.d_r_fn(), self.lambda, x_h, x_r)
    }

    /// Translates source-domain frames into the target domain.
    pub fn translate(&self, frames: &[&Observation]) -> Vec<Observation> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(32) {
            let y = self.run_gen(&self.g, &observations_to_tensor(chunk));
            out.extend(chunk.iter().enumerate().map(|(b, o)| tensor_to_observation(&y, b, o.frame_index)));
        }
        out
    }

    /// Least-squares generator objective with the cycle term (as per-element
    /// mean L1). Updates only `gen_store`.
    pub fn generator_step(&mut self, opt: &mut Adam, x_h: &Tensor, x_r: &Tensor) -> f32 {
        self.disc_store.set_all_trainable(false);
        let g = Graph::new(self.par);
        let (xh, xr) = (g.input(x_h.clone()), g.input(x_r.clone()));
        let fake_r = self.g.forward(&g, &self.gen_store, xh);
        let fake_h = self.g_prime.forward(&g, &self.gen_store, xr);
        let adv = sq_to(self.d_r.forward(&g, &self.disc_store, fake_r), 1.0)
            .add(sq_to(self.d_h.forward(&g, &self.disc_store, fake_h), 1.0));
        let rec_h = self.g_prime.forward(&g, &self.gen_store, fake_r);
        let rec_r = self.g.forward(&g, &self.gen_store, fake_h);
        let cyc = rec_h.sub(xh).abs().mean().add(rec_r.sub(xr).abs().mean());
        let loss = adv.add(cyc.scale(self.lambda as f32));
        let value = loss.item();
        let grads = g.backward(loss);
        opt.step(&mut self.gen_store, &grads);
        self.disc_store.set_all_trainable(true);
        value
    }

    /// Minimises the two adversarial losses with generated images held fixed.
    /// Updates only `disc_store`.
    pub fn discriminator_step(&mut self, opt: &mut Adam, x_h: &Tensor, x_r: &Tensor) -> f32 {
        let fake_r = self.run_gen(&self.g, x_h);
        let fake_h = self.run_gen(&self.g_prime, x_r);
        let g = Graph::new(self.par);
        let d = &self.disc_store;
        let adv_r = sq_to(self.d_r.forward(&g, d, g.input(x_r.clone())), 1.0)
            .add(sq_to(self.d_r.forward(&g, d, g.input(fake_r)), 0.0));
        let adv_h = sq_to(self.d_h.forward(&g, d, g.input(x_h.clone())), 1.0)
            .add(sq_to(self.d_h.forward(&g, d, g.input(fake_h)), 0.0));
        let loss = adv_r.add(adv_h);
        let value = loss.item();
        let grads = g.backward(loss);
        opt.step(&mut self.disc_store, &grads);
        value
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<(), ImaginaryError> {
        fs::create_dir_all(dir)?;
        let generator_file = format!("{name}.gen.pnnw");
        let discriminator_file = format!("{name}.disc.pnnw");
        self.gen_store.save(std::io::BufWriter::new(fs::File::create(dir.join(&generator_file))?))?;
        self.disc_store.save(std::io::BufWriter::new(fs::File::create(dir.join(&discriminator_file))?))?;
        let m = Manifest {
            kind: "translator".into(),
            source_domain: self.source_domain.clone(),
            target_domain: self.target_domain.clone(),
            lambda: self.lambda,
            image_size: self.image_size,
            gen_width: self.gen_width,
            disc_width: self.disc_width,
            generator_file,
            discriminator_file,
        };
        fs::write(dir.join(format!("{name}.manifest.json")), serde_json::to_string_pretty(&m).expect("manifest"))?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &str, par: Parallelism) -> Result<Self, ImaginaryError> {
        let text = fs::read_to_string(dir.join(format!("{name}.manifest.json")))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| ImaginaryError::Checkpoint(e.to_string()))?;
        if m.kind != "translator" {
            return Err(ImaginaryError::Checkpoint(format!("{name}: not a translator checkpoint")));
        }
        let hyper = TranslatorHyper { lambda: m.lambda, gen_width: m.gen_width, disc_width: m.disc_width, ..Default::default() };
        let mut pair = TranslatorPair::new(m.image_size, &hyper, &m.source_domain, &m.target_domain, par);
        pair.gen_store.load_into(std::io::BufReader::new(fs::File::open(dir.join(&m.generator_file))?))?;
        pair.disc_store.load_into(std::io::BufReader::new(fs::File::open(dir.join(&m.discriminator_file))?))?;
        Ok(pair)
    }
}

/// Alternating generator / discriminator updates on unpaired frame sets.
pub fn train_translator(
    source: &[&Observation],
    target: &[&Observation],
    hyper: &TranslatorHyper,
    names: (&str, &str),
    par: Parallelism,
) -> Result<(TranslatorPair, TranslatorLog), ImaginaryError> {
    if source.is_empty() || target.is_empty() {
        return Err(ImaginaryError::Precondition("both image sets must be non-empty".into()));
    }
    let size = source[0].size;
    if !size.is_multiple_of(2) || source.iter().chain(target).any(|o| o.size != size) {
        return Err(ImaginaryError::Validation("all frames must share one even side length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x6a12);
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut rng);
    let k = hyper.heldout.min(source.len().saturating_sub(1)).max(1).min(source.len());
    let held: Vec<&Observation> = order[..k].iter().map(|&i| source[i]).collect();
    let train_src: Vec<&Observation> = if source.len() > k { order[k..].iter().map(|&i| source[i]).collect() } else { held.clone() };
    let held_r: Vec<&Observation> = target.choose_multiple(&mut rng, k.min(target.len())).copied().collect();
    let (held_h, held_r) = (observations_to_tensor(&held), observations_to_tensor(&held_r));

    let mut pair = TranslatorPair::new(size, hyper, names.0, names.1, par);
    let cfg = AdamConfig { lr: hyper.lr, beta1: 0.5, clip_norm: Some(10.0), ..Default::default() };
    let (mut opt_g, mut opt_d) = (Adam::new(cfg.clone()), Adam::new(cfg));
    let mut log = TranslatorLog::default();
    let eval = |pair: &TranslatorPair, step: usize, log: &mut TranslatorLog| {
        let c = cycle_loss(&pair.g_fn(), &pair.g_prime_fn(), &held_h, &held_r);
        log.heldout_cycle.push((step, c));
        let var = batch_variance(&pair.g_fn().apply(&held_h));
        if var < hyper.collapse_threshold {
            let msg = format!("possible mode collapse at step {step}: generated batch variance {var:.2e}");
            log::warn!("{msg}");
            log.warnings.push(msg);
        }
    };
    eval(&pair, 0, &mut log);
    let n = hyper.batch_size.max(1);
    for step in 1..=hyper.steps {
        let xh: Vec<&Observation> = (0..n).map(|_| *train_src.choose(&mut rng).expect("non-empty")).collect();
        let xr: Vec<&Observation> = (0..n).map(|_| *target.choose(&mut rng).expect("non-empty")).collect();
        let (xh, xr) = (observations_to_tensor(&xh), observations_to_tensor(&xr));
        let lg = pair.generator_step(&mut opt_g, &xh, &xr);
        let ld = pair.discriminator_step(&mut opt_d, &xh, &xr);
        if !lg.is_finite() || !ld.is_finite() {
            return Err(ImaginaryError::Validation(format!("translator diverged at step {step}")));
        }
        log.train.push((step, lg, ld));
        if step % hyper.eval_every.max(1) == 0 || step == hyper.steps {
            eval(&pair, step, &mut log);
            log::info!("translator step {step}: g {lg:.4} d {ld:.4} held-out cycle {:.2}", log.heldout_cycle.last().unwrap().1);
        }
    }
    Ok((pair, log))
}

/// Replaces every observation with its translation; actions, lengths and
/// ordering are kept.
pub fn synthesize_db(translate: &dyn ImageFn, db: &Database, name: &str) -> Result<Database, ImaginaryError> {
    let mut out = Database::new(name, DomainTag::SyntheticR, Vec::new());
    for traj in &db.trajectories {
        let frames: Vec<&Observation> = traj.steps.iter().map(|s| &s.observation).collect();
        let mut steps = Vec::with_capacity(frames.len());
        for (chunk, src) in frames.chunks(32).zip(traj.steps.chunks(32)) {
            let x = observations_to_tensor(chunk);
            let y = translate.apply(&x);
            if y.shape() != x.shape() {
                return Err(ImaginaryError::Validation(format!("translator maps {:?} to {:?}", x.shape(), y.shape())));
            }
            for (b, s) in src.iter().enumerate() {
                steps.push(Step { observation: tensor_to_observation(&y, b, s.observation.frame_index), ..s.clone() });
            }
        }
        out.trajectories.push(Trajectory {
            scene_id: traj.scene_id.clone(),
            source_tag: SourceTag::Synthetic,
            steps,
            intervention_frame: traj.intervention_frame,
        });
    }
    Ok(out)
}

/// Two-column PNG: originals on the left, translations on the right, one pair
/// per row.
pub fn image_grid_png(originals: &[Observation], translated: &[Observation], path: &Path) -> Result<(), ImaginaryError> {
    if originals.len() != translated.len() || originals.is_empty() {
        return Err(ImaginaryError::Validation("grid needs equal, non-zero counts".into()));
    }
    let s = originals[0].size;
    let gap = 2;
    let (w, h) = (2 * s + 3 * gap, originals.len() * (s + gap) + gap);
    let mut buf = vec![255u8; w * h * 3];
    for (row, (a, b)) in originals.iter().zip(translated).enumerate() {
        for (col, img) in [a, b].into_iter().enumerate() {
            let (x0, y0) = (gap + col * (s + gap), gap + row * (s + gap));
            for y in 0..s {
                let dst = ((y0 + y) * w + x0) * 3;
                buf[dst..dst + s * 3].copy_from_slice(&img.image[y * s * 3..(y + 1) * s * 3]);
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| ImaginaryError::Io(std::io::Error::other(e)))?;
    writer.write_image_data(&buf).map_err(|e| ImaginaryError::Io(std::io::Error::other(e)))?;
    Ok(())
}
