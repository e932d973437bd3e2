use std::collections::BTreeMap;

use pour_core::coarse::{CoarseArch, CoarseHyper, CoarseModel, Discretization};
use pour_core::dataset::{build_training_db, Database, DomainTag, SourceTag};
use pour_core::fine::{FineHyper, FineModel};
use pour_core::imaginary::{
    adapt, combine_losses, cycle_loss, observations_to_tensor, synthesize_db, tensor_to_observation, total_loss,
    train_translator, AdaptHyper, CriticFn, ImaginaryError, TranslatorHyper, TranslatorPair,
};
use pour_core::sim::{bundled_scene, OracleConfig, SceneConfig};
use pour_nn::{Adam, AdamConfig, Parallelism, Tensor};
use proptest::prelude::*;

fn db(ids: &[&str], trials: usize, size: usize) -> Database {
    let scenes: Vec<SceneConfig> = ids.iter().map(|id| bundled_scene(id).unwrap().with_render_size(size)).collect();
    build_training_db("d", &scenes, trials, 9, &OracleConfig::default(), Parallelism::default()).unwrap()
}

fn batch(values: &[f32], size: usize) -> Tensor {
    let per = 3 * size * size;
    Tensor::from_vec(&[values.len(), 3, size, size], values.iter().flat_map(|&v| vec![v; per]).collect())
}

fn small_translator() -> TranslatorHyper {
    TranslatorHyper { steps: 3, batch_size: 2, heldout: 2, eval_every: 1, ..TranslatorHyper::default() }
}

proptest! {
    #[test]
    fn cycle_loss_is_zero_for_inverse_pairs(h in prop::collection::vec(-1.0f32..1.0, 1..4), r in prop::collection::vec(-1.0f32..1.0, 1..4), shift in -0.5f32..0.5) {
        let (x_h, x_r) = (batch(&h, 2), batch(&r, 2));
        let id = |x: &Tensor| x.clone();
        prop_assert_eq!(cycle_loss(&id, &id, &x_h, &x_r), 0.0);
        let up = |x: &Tensor| x.map(|v| v + shift);
        let down = |x: &Tensor| x.map(|v| v - shift);
        prop_assert!(cycle_loss(&up, &down, &x_h, &x_r) <= 1e-4);
        // a one-sided shift costs |shift| per element in both directions
        let c = cycle_loss(&up, &id, &x_h, &x_r);
        prop_assert!((c - 2.0 * 12.0 * shift.abs() as f64).abs() <= 1e-3);
    }

    #[test]
    fn total_is_the_weighted_sum(h in prop::collection::vec(-1.0f32..1.0, 1..4), r in prop::collection::vec(-1.0f32..1.0, 1..4), lambda in 0.0f64..20.0) {
        let (x_h, x_r) = (batch(&h, 2), batch(&r, 2));
        let g = |x: &Tensor| x.map(|v| 0.5 * v);
        let gp = |x: &Tensor| x.map(|v| v - 0.1);
        let mean = |x: &Tensor| {
            let per = x.len() / x.dim(0);
            x.data().chunks(per).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / per as f64).collect::<Vec<f64>>()
        };
        let d = CriticFn(mean);
        let parts = total_loss(&g, &gp, &d, &d, lambda, &x_h, &x_r);
        let again = combine_losses(parts.adv_r, parts.adv_h, parts.cycle, lambda);
        prop_assert_eq!(parts, again);
        prop_assert!(parts.adv_r >= 0.0 && parts.adv_h >= 0.0 && parts.cycle >= 0.0);
    }
}

#[test]
fn frames_survive_tensor_conversion() {
    let d = db(&["S1"], 1, 16);
    let frames: Vec<_> = d.trajectories[0].steps.iter().take(5).map(|s| &s.observation).collect();
    let t = observations_to_tensor(&frames);
    assert_eq!(t.shape(), &[5, 3, 16, 16]);
    for (b, o) in frames.iter().enumerate() {
        assert_eq!(&tensor_to_observation(&t, b, o.frame_index), *o);
    }
}

#[test]
fn each_update_touches_only_its_own_networks() {
    let d = db(&["S1"], 1, 16);
    let frames: Vec<_> = d.trajectories[0].steps.iter().take(4).map(|s| &s.observation).collect();
    let x_h = observations_to_tensor(&frames[..2]);
    let x_r = observations_to_tensor(&frames[2..]);
    let mut pair = TranslatorPair::new(16, &small_translator(), "h", "r", Parallelism::Sequential);
    let mut opt_g = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() });
    let mut opt_d = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() });

    let (g0, d0) = (pair.gen_store.fingerprint(), pair.disc_store.fingerprint());
    pair.generator_step(&mut opt_g, &x_h, &x_r);
    let g1 = pair.gen_store.fingerprint();
    assert_ne!(g1, g0);
    assert_eq!(pair.disc_store.fingerprint(), d0);
    pair.discriminator_step(&mut opt_d, &x_h, &x_r);
    assert_ne!(pair.disc_store.fingerprint(), d0);
    assert_eq!(pair.gen_store.fingerprint(), g1);
}

#[test]
fn translator_training_logs_and_roundtrips() {
    let (h, r) = (db(&["S1"], 1, 16), db(&["S13"], 1, 16));
    let src: Vec<_> = h.trajectories[0].steps.iter().map(|s| &s.observation).collect();
    let tgt: Vec<_> = r.trajectories[0].steps.iter().map(|s| &s.observation).collect();
    let (pair, log) = train_translator(&src, &tgt, &small_translator(), ("S1", "S13"), Parallelism::default()).unwrap();
    assert_eq!(log.train.len(), 3);
    assert_eq!(log.heldout_cycle.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);

    let dir = tempfile::tempdir().unwrap();
    pair.save(dir.path(), "tr").unwrap();
    let back = TranslatorPair::load(dir.path(), "tr", Parallelism::Sequential).unwrap();
    assert_eq!(back.translate(&src[..3]), pair.translate(&src[..3]));
    assert_eq!((back.source_domain.as_str(), back.target_domain.as_str()), ("S1", "S13"));

    assert!(matches!(train_translator(&[], &tgt, &small_translator(), ("a", "b"), Parallelism::Sequential), Err(ImaginaryError::Precondition(_))));
    let odd = db(&["S1"], 1, 15);
    let odd: Vec<_> = odd.trajectories[0].steps.iter().map(|s| &s.observation).collect();
    assert!(train_translator(&odd, &odd, &small_translator(), ("a", "b"), Parallelism::Sequential).is_err());
}

#[test]
fn held_out_cycle_loss_falls_during_training() {
    let (h, r) = (db(&["S1"], 1, 16), db(&["S13"], 1, 16));
    let src: Vec<_> = h.trajectories[0].steps.iter().map(|s| &s.observation).collect();
    let tgt: Vec<_> = r.trajectories[0].steps.iter().map(|s| &s.observation).collect();
    let hyper = TranslatorHyper { steps: 60, eval_every: 60, ..small_translator() };
    let (_, log) = train_translator(&src, &tgt, &hyper, ("S1", "S13"), Parallelism::default()).unwrap();
    let (first, last) = (log.heldout_cycle[0].1, log.heldout_cycle.last().unwrap().1);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn synthesis_keeps_everything_but_the_pixels() {
    let source = db(&["S2", "S5"], 1, 16);
    let snapshot = source.clone();
    let identity = |x: &Tensor| x.clone();
    let same = synthesize_db(&identity, &source, "syn").unwrap();
    assert_eq!(same.domain_tag, DomainTag::SyntheticR);
    for (a, b) in same.trajectories.iter().zip(&source.trajectories) {
        assert_eq!(a.source_tag, SourceTag::Synthetic);
        assert_eq!((a.scene_id.as_str(), a.len()), (b.scene_id.as_str(), b.len()));
        assert_eq!(a.steps, b.steps);
    }
    let darker = |x: &Tensor| x.map(|v| (v - 0.5).max(-1.0));
    let dark = synthesize_db(&darker, &source, "syn").unwrap();
    for (a, b) in dark.trajectories.iter().zip(&source.trajectories) {
        assert_eq!(a.actions().collect::<Vec<_>>(), b.actions().collect::<Vec<_>>());
        assert!(a.steps.iter().zip(&b.steps).all(|(x, y)| x.pose == y.pose && x.observation.frame_index == y.observation.frame_index));
        assert_ne!(a.steps[0].observation, b.steps[0].observation);
    }
    assert_eq!(source, snapshot);
    let shrink = |x: &Tensor| x.index0(0);
    assert!(synthesize_db(&shrink, &source, "bad").is_err());
}

fn trained(train: &Database) -> (CoarseModel, FineModel, BTreeMap<String, [f32; 2]>) {
    let disc = Discretization::estimate(train, 8, 5, 0.01).unwrap();
    let arch = CoarseArch { width: 8, image_size: 16, n_tilt: 8, m_vel: 5 };
    let coarse = CoarseModel::new(arch, disc, 0, Parallelism::default());
    let fine = FineModel::new(coarse.feature_len(), &FineHyper { window: 4, lstm1: 8, lstm2: 8, attn_dim: 4, mlp_hidden: 8, ..FineHyper::default() }, Parallelism::default());
    let z = train.scene_ids().into_iter().map(|id| {
        let zt = bundled_scene(&id).unwrap().task_z();
        (id, zt)
    });
    (coarse, fine, z.collect())
}

#[test]
fn adaptation_needs_a_real_demonstration() {
    let train = db(&["S1"], 1, 16);
    let (coarse, fine, z) = trained(&train);
    let empty = Database::new("real", DomainTag::TargetR, Vec::new());
    let err = adapt(&coarse, &fine, &train, &empty, &z, [0.0, 0.0], &AdaptHyper::default()).unwrap_err();
    assert!(matches!(err, ImaginaryError::Precondition(_)));
}

#[test]
fn adaptation_tunes_copies_and_learns_the_new_scene() {
    let train = db(&["S1", "S3"], 1, 16);
    let real = db(&["S16"], 1, 16);
    let (coarse, fine, z) = trained(&train);
    let (cf, ff) = (coarse.store.fingerprint(), fine.store.fingerprint());
    let hyper = AdaptHyper {
        coarse: CoarseHyper { epochs: 1, frame_stride: 4, ..CoarseHyper::default() },
        fine: FineHyper { epochs: 1, ..FineHyper::default() },
        ..AdaptHyper::default()
    };
    let z_prime = bundled_scene("S16").unwrap().task_z();
    let out = adapt(&coarse, &fine, &train, &real, &z, z_prime, &hyper).unwrap();
    assert_eq!((coarse.store.fingerprint(), fine.store.fingerprint()), (cf, ff));
    assert_ne!(out.coarse.store.fingerprint(), cf);
    assert_ne!(out.fine.store.fingerprint(), ff);
    assert!(out.coarse.disc.per_scene.contains_key("S16"));
    assert!(!coarse.disc.per_scene.contains_key("S16"));
    assert_eq!(out.coarse_log.epochs.len(), 1);
    assert_eq!(out.fine_log.epochs.len(), 1);
    assert!(out.bounds.omega_min < out.bounds.omega_max);
}
