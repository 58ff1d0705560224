use nalgebra::DVector;
use proptest::prelude::*;

use stabdyn::demo::{build_dataset, DemoConfig};
use stabdyn::harness::*;
use stabdyn::plant::PvtolParams;
use stabdyn::trajopt::{cheb_grid, NominalTrajectory, TrajoptStatus};
use stabdyn::{TrainerConfig, Trajectory};

/// Type-7 quantile as the piecewise-linear interpolant through
/// `(k / (n - 1), x_k)`, found by scanning segments.
fn quantile_oracle(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    for k in 0..n - 1 {
        let (a, b) = (k as f64 / (n - 1) as f64, (k + 1) as f64 / (n - 1) as f64);
        if p >= a && p <= b {
            return sorted[k] + (p - a) / (b - a) * (sorted[k + 1] - sorted[k]);
        }
    }
    sorted[n - 1]
}

proptest! {
    #[test]
    fn quantiles_match_segment_scan(mut v in prop::collection::vec(0.0f64..50.0, 1..40), p in 0.0f64..=1.0) {
        v.sort_by(f64::total_cmp);
        prop_assert!((quantile(&v, p) - quantile_oracle(&v, p)).abs() < 1e-9);
    }

    #[test]
    fn fences_split_values_exactly(v in prop::collection::vec(0.0f64..10.0, 1..40), spike in 0.0f64..500.0) {
        let mut v = v;
        v.push(spike);
        let (q1, med, q3, wl, wh, outliers) = summarize(&v).unwrap();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        prop_assert!((med - quantile_oracle(&s, 0.5)).abs() < 1e-9);
        let iqr = q3 - q1;
        let out: Vec<f64> = s.iter().copied().filter(|x| *x < q1 - 1.5 * iqr || *x > q3 + 1.5 * iqr).collect();
        prop_assert_eq!(&outliers, &out);
        let inside: Vec<f64> = s.iter().copied().filter(|x| !out.contains(x)).collect();
        prop_assert_eq!(wl, inside[0]);
        prop_assert_eq!(wh, *inside.last().unwrap());
    }
}

#[test]
fn single_value_summary_collapses() {
    let (q1, med, q3, wl, wh, out) = summarize(&[2.5]).unwrap();
    assert_eq!([q1, med, q3, wl, wh], [2.5; 5]);
    assert!(out.is_empty());
}

fn nominal_line(times: Vec<f64>) -> NominalTrajectory {
    let grid = cheb_grid(8).unwrap();
    let h = *times.last().unwrap();
    let mut nom = NominalTrajectory::constant(DVector::zeros(6), DVector::zeros(2), h, &grid);
    nom.status = TrajoptStatus::Converged;
    nom
}

#[test]
fn sinusoidal_error_has_rms_amplitude_over_root_two() {
    let nom = nominal_line(vec![0.0, 2.0]);
    let a = 0.7;
    let n = 20_000;
    let times: Vec<f64> = (0..=n).map(|k| 2.0 * k as f64 / n as f64).collect();
    let states = times
        .iter()
        .map(|t| {
            let mut x = DVector::zeros(6);
            x[3] = a * (2.0 * std::f64::consts::PI * t).sin();
            x
        })
        .collect();
    let tr = Trajectory {
        times: times.clone(),
        states,
        controls: vec![DVector::zeros(2); n],
        diverged_at: None,
    };
    let rms = rms_error(&tr, &nom).unwrap();
    assert!((rms - a / 2f64.sqrt()).abs() < 0.01 * a / 2f64.sqrt());
}

#[test]
fn error_crossing_threshold_and_returning_counts_as_diverged() {
    let nom = nominal_line(vec![0.0, 5.0]);
    let times: Vec<f64> = (0..=50).map(|k| 0.1 * k as f64).collect();
    let states = times
        .iter()
        .map(|t| {
            let mut x = DVector::zeros(6);
            x[0] = if (2.9..3.1).contains(t) { 11.0 } else { 0.5 };
            x
        })
        .collect();
    let tr = Trajectory {
        times,
        states,
        controls: vec![DVector::zeros(2); 50],
        diverged_at: None,
    };
    assert!(classify_stability(&tr, &nom, 10.0));
    let cut = truncate_at_exit(&tr, &nom, 10.0);
    assert!((cut.times.last().unwrap() - 2.9).abs() < 1e-9);
    assert!(!classify_stability(&tr, &nom, 12.0));
}

fn small_models(kinds: &[ModelKind]) -> Vec<TrainedModel> {
    let demo = DemoConfig {
        n_waypoint_paths: 3,
        splines_per_path: 2,
        seed: 4,
        ..DemoConfig::default()
    };
    let pool = build_dataset(&demo, &PvtolParams::default()).unwrap();
    let cfg = TrainerConfig {
        n_max: 3,
        seed: 4,
        ..TrainerConfig::default()
    };
    train_models(&pool, 100, 150, &cfg, kinds).unwrap().0
}

fn small_bench(n_ic: usize) -> BenchConfig {
    BenchConfig {
        n_ic,
        radius_min: 4.0,
        radius_max: 5.0,
        nodes: 12,
        seed: 9,
        ..BenchConfig::default()
    }
}

#[test]
fn table_has_one_row_per_model_and_ic_with_shared_horizons() {
    let models = small_models(&ModelKind::ALL);
    let cfg = small_bench(2);
    let rows = run_benchmark(&models, &PvtolParams::default(), &cfg).unwrap();
    assert_eq!(rows.len(), 3 * cfg.n_ic);
    for ic in 0..cfg.n_ic {
        let hs: Vec<f64> = rows.iter().filter(|r| r.ic == ic).map(|r| r.horizon).collect();
        assert_eq!(hs.len(), 3);
        assert!(hs.iter().all(|h| *h == hs[0]));
    }
    for r in &rows {
        assert!(r.rms >= 0.0 && r.rms.is_finite());
    }
    let again = run_benchmark(&models, &PvtolParams::default(), &cfg).unwrap();
    assert_eq!(rows, again);
}

#[test]
fn start_at_goal_is_tracked_with_small_error() {
    let models = small_models(&[ModelKind::NR, ModelKind::RR]);
    let cfg = BenchConfig {
        n_ic: 1,
        radius_min: 0.0,
        radius_max: 0.0,
        roll_spread: 0.0,
        velocity_spread: 0.0,
        roll_rate_spread: 0.0,
        nodes: 12,
        ..BenchConfig::default()
    };
    let rows = run_benchmark(&models, &PvtolParams::default(), &cfg).unwrap();
    // the residual error is the learned hover input's mismatch with the plant
    for r in &rows {
        assert!(!r.diverged);
        assert!(r.rms < 0.5, "{} rms {}", r.model.label(), r.rms);
        assert!(r.rms < 0.1 * r.open_loop_rms.max(1.0));
    }
}

#[test]
fn initial_conditions_are_fixed_by_seed() {
    let cfg = small_bench(7);
    let a = initial_conditions(&cfg);
    assert_eq!(a, initial_conditions(&cfg));
    for x in &a {
        let r = x.rows(0, 2).norm();
        assert!((4.0 - 1e-12..=5.0 + 1e-12).contains(&r));
    }
    let other = initial_conditions(&BenchConfig { seed: 10, ..cfg });
    assert_ne!(a, other);
}
