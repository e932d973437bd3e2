use pour_core::dataset::{
    build_training_db, load_database, save_database, subsample_db, trial_seed, Database, DomainTag, Recorder, SourceTag,
};
use pour_core::sim::{bundled_scene, render, ActionVector, OracleConfig, SceneConfig, Simulator, DT};
use pour_nn::Parallelism;
use proptest::prelude::*;

fn small_scenes() -> Vec<SceneConfig> {
    ["S1", "S4", "S7"].iter().map(|id| bundled_scene(id).unwrap().with_render_size(12)).collect()
}

fn fake_db(n: usize) -> Database {
    let sim = Simulator::new(bundled_scene("S2").unwrap().with_render_size(8)).unwrap();
    let trajectories = (0..n)
        .map(|k| {
            let mut rec = Recorder::new(format!("S{}", k % 4 + 1), SourceTag::Oracle);
            let mut s = sim.reset(k as u64);
            for _ in 0..3 {
                let a = ActionVector::new(k as f64, 0.0, 0.0, 0.1);
                rec.push(render(&s, sim.scene()), a, s.pose.theta, s.pose).unwrap();
                s = sim.step(&s, &a, DT).unwrap();
            }
            rec.finish().unwrap()
        })
        .collect();
    Database::new("fake", DomainTag::SourceH, trajectories)
}

#[test]
fn training_db_has_trials_per_scene_and_ignores_thread_count() {
    let scenes = small_scenes();
    let seq = build_training_db("d", &scenes, 2, 3, &OracleConfig::default(), Parallelism::Sequential).unwrap();
    assert_eq!(seq.len(), 6);
    assert_eq!(seq.scene_ids(), vec!["S1", "S4", "S7"]);
    assert!(seq.trajectories.iter().all(|t| t.source_tag == SourceTag::Oracle && t.validate().is_ok()));
    let par = build_training_db("d", &scenes, 2, 3, &OracleConfig::default(), Parallelism::default()).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn training_db_rejects_empty_requests() {
    let scenes = small_scenes();
    assert!(build_training_db("d", &[], 2, 0, &OracleConfig::default(), Parallelism::Sequential).is_err());
    assert!(build_training_db("d", &scenes, 0, 0, &OracleConfig::default(), Parallelism::Sequential).is_err());
}

#[test]
fn trial_seeds_differ_by_scene_trial_and_attempt() {
    let s = trial_seed(1, "S3", 0, 0);
    assert_ne!(s, trial_seed(1, "S4", 0, 0));
    assert_ne!(s, trial_seed(1, "S3", 1, 0));
    assert_ne!(s, trial_seed(1, "S3", 0, 1));
    assert_ne!(s, trial_seed(2, "S3", 0, 0));
    assert_eq!(s, trial_seed(1, "S3", 0, 0));
}

proptest! {
    #[test]
    fn subsample_keeps_ceil_fraction_in_order(n in 1usize..40, fraction in 0.01f64..=1.0, seed in any::<u64>()) {
        let db = fake_db(n);
        let sub = subsample_db(&db, fraction, seed);
        prop_assert_eq!(sub.len(), ((fraction * n as f64).ceil() as usize).clamp(1, n));
        // order preserved: the first action component is the original index
        let idx: Vec<f64> = sub.trajectories.iter().map(|t| t.steps[0].action.vx).collect();
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(subsample_db(&db, fraction, seed), sub);
    }
}

#[test]
fn recorder_rejects_gaps_and_size_changes() {
    let sim = Simulator::new(bundled_scene("S2").unwrap().with_render_size(8)).unwrap();
    let s0 = sim.reset(0);
    let s1 = sim.step(&s0, &ActionVector::default(), DT).unwrap();
    let s2 = sim.step(&s1, &ActionVector::default(), DT).unwrap();
    let mut rec = Recorder::new("S2", SourceTag::HumanTeleop);
    rec.push(render(&s0, sim.scene()), ActionVector::default(), 0.0, s0.pose).unwrap();
    assert!(rec.push(render(&s2, sim.scene()), ActionVector::default(), 0.0, s2.pose).is_err());
    let big = sim.scene().clone().with_render_size(10);
    assert!(rec.push(render(&s1, &big), ActionVector::default(), 0.0, s1.pose).is_err());
    let nan = ActionVector::new(f64::NAN, 0.0, 0.0, 0.0);
    assert!(rec.push(render(&s1, sim.scene()), nan, 0.0, s1.pose).is_err());
    // a single frame is not a trajectory
    assert!(Recorder::new("S2", SourceTag::Oracle).finish().is_err());
    rec.push(render(&s1, sim.scene()), ActionVector::default(), 0.0, s1.pose).unwrap();
    rec.mark_intervention();
    rec.mark_intervention();
    let t = rec.finish().unwrap();
    assert_eq!((t.len(), t.intervention_frame), (2, Some(2)));
}

#[test]
fn database_archive_roundtrip_and_schema_check() {
    let dir = tempfile::tempdir().unwrap();
    let db = fake_db(5);
    save_database(dir.path(), &db).unwrap();
    assert_eq!(load_database(dir.path()).unwrap(), db);
    let manifest = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 99");
    std::fs::write(&manifest, text).unwrap();
    assert!(load_database(dir.path()).is_err());
}

#[test]
fn merged_keeps_both_sides() {
    let (a, b) = (fake_db(2), fake_db(3));
    let m = a.merged(&b);
    assert_eq!(m.len(), 5);
    assert_eq!(m.num_frames(), 15);
}
