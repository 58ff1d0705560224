mod common;

use common::SmallProblem;
use std::time::Instant;

use stabdyn::conic::{solve_conic, SolveStatus, SolverOptions};

#[test]
fn random_small_problems_match_brute_force() {
    for seed in 0..20 {
        let sp = SmallProblem::random(seed);
        let start = Instant::now();
        let sol = solve_conic(&sp.to_conic(), &SolverOptions::default()).unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0, "seed {seed} too slow");
        assert_eq!(sol.status, SolveStatus::Optimal, "seed {seed}");
        assert!(sol.primal_residual <= 1e-7, "seed {seed}");
        let oracle = sp.oracle();
        assert!((sol.objective - oracle).abs() <= 1e-4, "seed {seed}: solver {} oracle {oracle}", sol.objective);
    }
}
