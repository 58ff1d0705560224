use nalgebra::DVector;
use proptest::prelude::*;

use stabdyn::demo::{build_dataset, DemoConfig};
use stabdyn::harness::{train_models, ModelKind};
use stabdyn::io::*;
use stabdyn::plant::PvtolParams;
use stabdyn::system::ControlAffine;
use stabdyn::{ControlVec, Dataset, Error, StateVec, TrainerConfig, TrainingTuple};

fn tuple_strategy() -> impl Strategy<Value = TrainingTuple> {
    (prop::array::uniform6(-1e3f64..1e3), prop::array::uniform2(-50.0f64..50.0), prop::array::uniform6(-1e3f64..1e3)).prop_map(
        |(x, u, xd)| TrainingTuple {
            t: 0.0,
            x: StateVec::from_column_slice(&x),
            u: ControlVec::from_column_slice(&u),
            xdot: StateVec::from_column_slice(&xd),
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_csv_round_trips_bit_for_bit(
        tuples in prop::collection::vec(tuple_strategy(), 2..30),
        split in 1usize..29,
        dt in 0.01f64..0.5,
    ) {
        let split = split.min(tuples.len() - 1);
        let mut tuples = tuples;
        let mut ids = Vec::new();
        for (k, t) in tuples.iter_mut().enumerate() {
            let (id, local) = if k < split { (0, k) } else { (3, k - split) };
            t.t = local as f64 * dt;
            ids.push(id);
        }
        let data = Dataset::new(tuples, ids, dt).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset_csv(&path, &data).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        prop_assert_eq!(&back.tuples, &data.tuples);
        prop_assert_eq!(&back.traj_ids, &data.traj_ids);
    }
}

#[test]
fn generated_dataset_round_trips_with_its_sample_period() {
    let demo = DemoConfig {
        n_waypoint_paths: 1,
        splines_per_path: 2,
        ..DemoConfig::default()
    };
    let data = build_dataset(&demo, &PvtolParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_dataset_csv(&path, &data).unwrap();
    let back = read_dataset_csv(&path).unwrap();
    assert_eq!(back.tuples, data.tuples);
    assert_eq!(back.traj_ids, data.traj_ids);
    // rollouts step slightly under the nominal period to end on the spline's final time
    assert!((back.sample_dt - data.sample_dt).abs() < 0.01 * data.sample_dt);
}

#[test]
fn malformed_rows_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut text = DATASET_HEADER.join(",");
    text.push_str("\n0,0,1,2,3,4,5,6,7,8,9,10,11,oops,13,14\n");
    std::fs::write(&path, text).unwrap();
    match read_dataset_csv(&path) {
        Err(Error::Parse { field, .. }) => assert_eq!(field, "dvx"),
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, "a,b\n1,2\n").unwrap();
    assert!(matches!(read_dataset_csv(&path), Err(Error::Parse { .. })));
}

#[test]
fn saved_models_reload_with_identical_predictions() {
    let demo = DemoConfig {
        n_waypoint_paths: 3,
        splines_per_path: 2,
        seed: 4,
        ..DemoConfig::default()
    };
    let pool = build_dataset(&demo, &PvtolParams::default()).unwrap();
    let cfg = TrainerConfig {
        n_max: 2,
        seed: 4,
        ..TrainerConfig::default()
    };
    let (models, _) = train_models(&pool, 100, 150, &cfg, &ModelKind::ALL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for m in &models {
        let path = dir.path().join(model_file_name(m.kind, m.n_train));
        save_model(&path, m).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(&back, m);
        let x = DVector::from_vec(vec![0.3, -1.2, 0.1, 0.4, -0.2, 0.05]);
        let u = DVector::from_vec(vec![4.0, 5.0]);
        assert_eq!(ControlAffine::eval(&back.dynamics, &x, &u), ControlAffine::eval(&m.dynamics, &x, &u));
    }
    let loaded = load_models(dir.path(), &ModelKind::ALL, 100).unwrap();
    assert_eq!(loaded, models);
    assert!(models[2].certificate.is_some());
}

#[test]
fn config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let cfg = ExperimentConfig::default().with_seed(17);
    cfg.save(&path).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
}
