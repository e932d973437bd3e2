use std::collections::BTreeMap;

use pour_core::coarse::{
    discretize_tilt, discretize_velocity, featurize_db, label_trajectory, CoarseArch, CoarseHyper, CoarseModel,
    Discretization, DiscretizationConfig, FeatureMode,
};
use pour_core::dataset::{build_training_db, Database};
use pour_core::sim::{bundled_scene, OracleConfig, SceneConfig};
use pour_nn::Parallelism;
use proptest::prelude::*;

fn config() -> impl Strategy<Value = DiscretizationConfig> {
    (0.05f64..1.0, 0.05f64..1.2, 3usize..14, 0.001f64..0.3, 3usize..14).prop_map(|(theta_s, span, n_tilt, v_s, m_vel)| {
        DiscretizationConfig { theta_s, theta_m: theta_s + span, n_tilt, v_s, m_vel }
    })
}

proptest! {
    #[test]
    fn tilt_class_is_in_range_and_monotone(cfg in config(), a in -1.0f64..3.0, b in -1.0f64..3.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (cl, ch) = (discretize_tilt(lo, &cfg).unwrap(), discretize_tilt(hi, &cfg).unwrap());
        prop_assert!(ch < cfg.n_tilt);
        prop_assert!(cl <= ch);
    }

    #[test]
    fn tilt_extremes_take_the_outer_classes(cfg in config(), d in 1e-9f64..1.0) {
        prop_assert_eq!(discretize_tilt(cfg.theta_s - d, &cfg).unwrap(), 0);
        prop_assert_eq!(discretize_tilt(cfg.theta_m + d, &cfg).unwrap(), cfg.n_tilt - 1);
        prop_assert_eq!(discretize_tilt(cfg.theta_s, &cfg).unwrap(), 1);
        prop_assert_eq!(discretize_tilt(cfg.theta_m, &cfg).unwrap(), cfg.n_tilt - 2);
    }

    #[test]
    fn velocity_class_is_in_range_and_ordered_inside_the_band(cfg in config(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (cl, ch) = (discretize_velocity(lo, &cfg).unwrap(), discretize_velocity(hi, &cfg).unwrap());
        prop_assert!(cl < cfg.m_vel && ch < cfg.m_vel);
        if -cfg.v_s < lo && hi < cfg.v_s {
            prop_assert!(cl <= ch);
            prop_assert!((1..=cfg.m_vel - 2).contains(&cl));
        }
        if hi >= cfg.v_s {
            prop_assert_eq!(ch, 0);
        }
        if lo <= -cfg.v_s {
            prop_assert_eq!(cl, cfg.m_vel - 1);
        }
    }
}

#[test]
fn rejects_non_finite_inputs_and_bad_configs() {
    let cfg = DiscretizationConfig { theta_s: 0.5, theta_m: 1.2, n_tilt: 8, v_s: 0.01, m_vel: 5 };
    assert!(discretize_tilt(f64::NAN, &cfg).is_err());
    assert!(discretize_velocity(f64::NAN, &cfg).is_err());
    for bad in [
        DiscretizationConfig { n_tilt: 2, ..cfg },
        DiscretizationConfig { m_vel: 2, ..cfg },
        DiscretizationConfig { theta_m: 0.4, ..cfg },
        DiscretizationConfig { v_s: 0.0, ..cfg },
    ] {
        assert!(discretize_tilt(0.7, &bad).is_err() || discretize_velocity(0.0, &bad).is_err(), "{bad:?}");
    }
}

fn scenes() -> Vec<SceneConfig> {
    ["S1", "S3", "S9"].iter().map(|id| bundled_scene(id).unwrap().with_render_size(32)).collect()
}

fn demos() -> Database {
    build_training_db("t", &scenes(), 2, 11, &OracleConfig::default(), Parallelism::default()).unwrap()
}

#[test]
fn labels_depend_on_actions_only() {
    let db = demos();
    let disc = Discretization::estimate(&db, 8, 5, 0.01).unwrap();
    let t = &db.trajectories[0];
    let cfg = disc.config_for(&t.scene_id);
    let labels = label_trajectory(t, &cfg).unwrap();
    let mut scrambled = t.clone();
    for s in &mut scrambled.steps {
        s.observation.image.iter_mut().for_each(|p| *p = 255 - *p);
        s.pose.x += 1.0;
        s.theta = -s.theta;
    }
    assert_eq!(label_trajectory(&scrambled, &cfg).unwrap(), labels);
    // a demonstration walks through every tilt stage
    let tilts: Vec<usize> = labels.iter().map(|l| l.tilt).collect();
    assert_eq!(tilts.iter().max(), Some(&7));
    assert_eq!(tilts[0], 0);
}

#[test]
fn estimated_thresholds_are_ordered_per_scene() {
    let db = demos();
    let mut disc = Discretization::estimate(&db, 8, 5, 0.01).unwrap();
    assert_eq!(disc.per_scene.keys().cloned().collect::<Vec<_>>(), vec!["S1", "S3", "S9"]);
    for r in disc.per_scene.values() {
        assert!(0.0 < r.theta_s && r.theta_s < r.theta_m);
    }
    assert_eq!(disc.config_for("unseen"), disc.reference_config());
    let before = disc.per_scene.clone();
    disc.extend_from(&db).unwrap();
    assert_eq!(disc.per_scene, before);
    assert_eq!(disc.feature_len(), 3 * 5 + 8 + 2);
}

#[test]
fn one_hot_features_have_one_hot_blocks() {
    let db = demos();
    let disc = Discretization::estimate(&db, 6, 4, 0.01).unwrap();
    let arch = CoarseArch { width: 8, image_size: 32, n_tilt: 6, m_vel: 4 };
    let model = CoarseModel::new(arch, disc, 1, Parallelism::Sequential);
    let frames: Vec<_> = db.trajectories[0].steps.iter().take(10).map(|s| &s.observation).collect();
    let soft = model.features(&frames, [0.5, 1.0], FeatureMode::Soft).unwrap();
    let hard = model.features(&frames, [0.5, 1.0], FeatureMode::OneHot).unwrap();
    for (s, h) in soft.iter().zip(&hard) {
        let mut start = 0;
        for len in [4, 4, 4, 6] {
            let block = &h[start..start + len];
            assert_eq!(block.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(block.iter().filter(|&&v| v == 0.0).count(), len - 1);
            // one-hot marks the arg-max of the soft block
            let sb = &s[start..start + len];
            let arg = (0..len).max_by(|&a, &b| sb[a].total_cmp(&sb[b])).unwrap();
            assert_eq!(block[arg], 1.0);
            start += len;
        }
        assert_eq!(&h[start..], &[0.5, 1.0]);
        assert_eq!(&s[start..], &[0.5, 1.0]);
    }
}

#[test]
fn wrong_image_size_is_rejected() {
    let db = demos();
    let disc = Discretization::estimate(&db, 8, 5, 0.01).unwrap();
    let model = CoarseModel::new(CoarseArch { width: 8, image_size: 16, n_tilt: 8, m_vel: 5 }, disc, 1, Parallelism::Sequential);
    let frames = [&db.trajectories[0].steps[0].observation];
    assert!(model.features(&frames, [0.0, 0.0], FeatureMode::Soft).is_err());
}

#[test]
fn training_logs_epochs_and_roundtrips_through_disk() {
    let db = demos();
    let disc = Discretization::estimate(&db, 8, 5, 0.01).unwrap();
    let arch = CoarseArch { width: 8, image_size: 32, n_tilt: 8, m_vel: 5 };
    let hyper = CoarseHyper { epochs: 2, frame_stride: 4, ..CoarseHyper::default() };
    let (model, log) = CoarseModel::train(&db, Some(&db), arch, disc, &hyper, Parallelism::default()).unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert!(log.epochs.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite()));
    assert!(log.epochs.iter().flat_map(|e| e.val_accuracy).all(|a| (0.0..=1.0).contains(&a)));
    let best = log.epochs.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap();
    assert_eq!(log.kept_epoch, best.epoch);

    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), "coarse").unwrap();
    let back = CoarseModel::load(dir.path(), "coarse", Parallelism::Sequential).unwrap();
    let z: BTreeMap<String, [f32; 2]> = scenes().iter().map(|s| (s.scene_id.clone(), s.task_z())).collect();
    let a = featurize_db(&model, &db, &z, FeatureMode::Soft).unwrap();
    let b = featurize_db(&back, &db, &z, FeatureMode::Soft).unwrap();
    assert_eq!(a.len(), db.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.features, y.features);
        assert_eq!(x.actions, y.actions);
    }
    let missing: BTreeMap<String, [f32; 2]> = BTreeMap::new();
    assert!(featurize_db(&model, &db, &missing, FeatureMode::Soft).is_err());
}

#[test]
fn training_is_identical_with_and_without_threads() {
    let db = demos();
    let disc = Discretization::estimate(&db, 8, 5, 0.01).unwrap();
    let arch = CoarseArch { width: 8, image_size: 32, n_tilt: 8, m_vel: 5 };
    let hyper = CoarseHyper { epochs: 1, frame_stride: 6, ..CoarseHyper::default() };
    let (_, a) = CoarseModel::train(&db, None, arch.clone(), disc.clone(), &hyper, Parallelism::Sequential).unwrap();
    let (_, b) = CoarseModel::train(&db, None, arch, disc, &hyper, Parallelism::default()).unwrap();
    assert_eq!(a, b);
}
