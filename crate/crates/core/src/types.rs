//! Shared state/control/trajectory/config types and seeded random streams.

use nalgebra::{DVector, Vector2, Vector6};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// PVTOL state dimension.
pub const STATE_DIM: usize = 6;
/// PVTOL control dimension.
pub const CONTROL_DIM: usize = 2;

/// `(p_x, p_z, phi, v_x, v_z, phi_dot)`: positions in m, roll in rad, body
/// velocities in m/s, roll rate in rad/s.
pub type StateVec = Vector6<f64>;
/// Thrusts `(u1, u2)` in N.
pub type ControlVec = Vector2<f64>;

/// One demonstration sample `(x, u, xdot)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingTuple {
    /// Time within the source demonstration, s.
    pub t: f64,
    pub x: StateVec,
    pub u: ControlVec,
    pub xdot: StateVec,
}

impl TrainingTuple {
    pub fn is_finite(&self) -> bool {
        std::iter::once(&self.t).chain(self.x.iter()).chain(self.u.iter()).chain(self.xdot.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tuples: Vec<TrainingTuple>,
    /// Source demonstration of each tuple.
    pub traj_ids: Vec<usize>,
    /// Sub-sampling period in s.
    pub sample_dt: f64,
}

impl Dataset {
    pub fn new(tuples: Vec<TrainingTuple>, traj_ids: Vec<usize>, sample_dt: f64) -> Result<Self> {
        if tuples.len() != traj_ids.len() {
            return Err(Error::Dimension(format!(
                "{} tuples but {} trajectory ids",
                tuples.len(),
                traj_ids.len()
            )));
        }
        if let Some(i) = tuples.iter().position(|t| !t.is_finite()) {
            return Err(Error::Domain(format!("tuple {i} has non-finite entries")));
        }
        Ok(Self {
            tuples,
            traj_ids,
            sample_dt,
        })
    }

    pub fn empty(sample_dt: f64) -> Self {
        Self {
            tuples: Vec::new(),
            traj_ids: Vec::new(),
            sample_dt,
        }
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &StateVec> {
        self.tuples.iter().map(|t| &t.x)
    }

    /// Random subset of `n` tuples without replacement, kept in original order.
    pub fn subsample(&self, n: usize, rng: &mut ChaCha20Rng) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut picks = index::sample(rng, self.len(), n).into_vec();
        picks.sort_unstable();
        Dataset {
            tuples: picks.iter().map(|&i| self.tuples[i]).collect(),
            traj_ids: picks.iter().map(|&i| self.traj_ids[i]).collect(),
            sample_dt: self.sample_dt,
        }
    }
}

/// A simulated state/control history. Controls follow a zero-order hold:
/// `controls[k]` acts on `[times[k], times[k + 1])`, so there is one fewer
/// control than states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    /// First time the state left the admissible envelope, if it did.
    pub diverged_at: Option<f64>,
}

impl Trajectory {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0) - self.times.first().copied().unwrap_or(0.0)
    }

    /// Checks the ordering and length invariants.
    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.times.len() {
            return Err(Error::Dimension("states and times differ in length".into()));
        }
        if !self.states.is_empty() && self.controls.len() + 1 != self.states.len() {
            return Err(Error::Dimension("controls must be one shorter than states".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("times must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Hyper-parameters of the alternating CCM-regularized fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub mu_f: f64,
    pub mu_b: f64,
    pub mu_w: f64,
    /// Slack weight: `mu_s` in the dynamics step, `1 / mu_s` in the metric step.
    pub mu_s: f64,
    pub delta_lambda: f64,
    pub eps_lambda: f64,
    pub delta_wlow: f64,
    pub eps_wlow: f64,
    /// Active points with violation at or below `-delta_discard` are dropped.
    pub delta_discard: f64,
    /// Maximum number of violators added to the active set per iteration.
    pub k_max_add: usize,
    pub n_max: usize,
    pub eps_converge: f64,
    /// Size of the initial random active set.
    pub nc0: usize,
    pub seed: u64,
    /// Tolerance handed to the conic solver.
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    /// Per-iteration wall-clock guard in s.
    pub iteration_time_limit: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mu_f: 1e-3,
            mu_b: 1e-6,
            mu_w: 1e-3,
            mu_s: 0.01,
            delta_lambda: 0.01,
            eps_lambda: 0.01,
            delta_wlow: 0.01,
            eps_wlow: 0.01,
            delta_discard: 0.05,
            k_max_add: 50,
            n_max: 30,
            eps_converge: 0.01,
            nc0: 100,
            seed: 0,
            solver_tol: 1e-7,
            solver_max_iter: 200,
            iteration_time_limit: 120.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mu_f", self.mu_f),
            ("mu_b", self.mu_b),
            ("mu_w", self.mu_w),
            ("mu_s", self.mu_s),
            ("delta_lambda", self.delta_lambda),
            ("eps_lambda", self.eps_lambda),
            ("delta_wlow", self.delta_wlow),
            ("eps_wlow", self.eps_wlow),
            ("delta_discard", self.delta_discard),
            ("eps_converge", self.eps_converge),
            ("solver_tol", self.solver_tol),
            ("iteration_time_limit", self.iteration_time_limit),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.k_max_add < 1 {
            return Err(Error::Config("k_max_add must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent purposes that draw random numbers. Each gets its own ChaCha
/// stream off the same root seed so that changing the draw count of one
/// purpose never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    DynamicsFeatures = 1,
    MetricFeatures = 2,
    MetricReducedFeatures = 3,
    Waypoints = 4,
    InitialConditions = 5,
    ConstraintPoints = 6,
    ActiveSet = 7,
    Subsample = 8,
    BenchmarkInitialConditions = 9,
    LabelNoise = 10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStreams {
    pub root: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn rng(&self, stream: Stream) -> ChaCha20Rng {
        self.indexed(stream, 0)
    }

    /// Stream for the `index`-th member of a family, e.g. one per demonstration.
    pub fn indexed(&self, stream: Stream, index: u32) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.root);
        rng.set_stream(((stream as u64) << 32) | u64::from(index));
        rng
    }
}
