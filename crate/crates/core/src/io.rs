//! Artifact files: dataset and trajectory CSVs, versioned JSON documents for
//! models and experiment configs.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::demo::DemoConfig;
use crate::error::{Error, Result};
use crate::harness::{BenchConfig, ModelKind, TrainedModel};
use crate::plant::PvtolParams;
use crate::trajopt::NominalTrajectory;
use crate::types::{ControlVec, Dataset, StateVec, Trajectory, TrainerConfig, TrainingTuple};

pub const SCHEMA_VERSION: u32 = 1;

pub const DATASET_HEADER: [&str; 16] = [
    "traj_id", "t", "px", "pz", "phi", "vx", "vz", "phidot", "u1", "u2", "dpx", "dpz", "dphi", "dvx", "dvz", "dphidot",
];

/// Used when a file holds no two samples of one demonstration.
const FALLBACK_SAMPLE_DT: f64 = 0.1;

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, e.into())
}

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
    w.write_record(DATASET_HEADER).map_err(csv_io(path))?;
    for (t, id) in data.tuples.iter().zip(&data.traj_ids) {
        let mut rec = vec![id.to_string(), t.t.to_string()];
        rec.extend(t.x.iter().chain(t.u.iter()).chain(t.xdot.iter()).map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_io(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The sampling period is not stored; it is recovered as the smallest time
/// step between consecutive rows of one demonstration.
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_io(path))?;
    let headers = rd.headers().map_err(csv_io(path))?.clone();
    if headers.iter().collect::<Vec<_>>() != DATASET_HEADER {
        return Err(Error::parse(path, "header", format!("expected {}", DATASET_HEADER.join(","))));
    }
    let mut tuples = Vec::new();
    let mut ids = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, "row", e))?;
        if rec.len() != DATASET_HEADER.len() {
            return Err(Error::parse(path, "row", format!("row {row}: {} fields", rec.len())));
        }
        let id: usize = rec[0]
            .parse()
            .map_err(|_| Error::parse(path, "traj_id", format!("row {row}: not a non-negative integer")))?;
        let mut v = [0.0; 15];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = rec[k + 1]
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, DATASET_HEADER[k + 1], format!("row {row}: not a number")))?;
        }
        tuples.push(TrainingTuple {
            t: v[0],
            x: StateVec::from_column_slice(&v[1..7]),
            u: ControlVec::from_column_slice(&v[7..9]),
            xdot: StateVec::from_column_slice(&v[9..15]),
        });
        ids.push(id);
    }
    let dt = tuples
        .windows(2)
        .zip(ids.windows(2))
        .filter(|(_, id)| id[0] == id[1])
        .map(|(t, _)| t[1].t - t[0].t)
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let dt = if dt.is_finite() { dt } else { FALLBACK_SAMPLE_DT };
    Dataset::new(tuples, ids, dt).map_err(|e| Error::parse(path, "row", e))
}

/// `t, x..., u...` per node, times ascending.
pub fn write_nominal_csv(path: &Path, nom: &NominalTrajectory) -> Result<()> {
    let n = nom.x_nodes[0].len();
    let m = nom.u_nodes[0].len();
    let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    w.write_record(&header).map_err(csv_io(path))?;
    for ((t, x), u) in nom.times.iter().zip(&nom.x_nodes).zip(&nom.u_nodes) {
        let mut rec = vec![t.to_string()];
        rec.extend(x.iter().chain(u.iter()).map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_io(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `t, x..., u...`; the last row has empty control fields.
pub fn write_trajectory_csv(path: &Path, tr: &Trajectory) -> Result<()> {
    let n = tr.states.first().map_or(0, |x| x.len());
    let m = tr.controls.first().map_or(0, |u| u.len());
    let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    w.write_record(&header).map_err(csv_io(path))?;
    for (k, (t, x)) in tr.times.iter().zip(&tr.states).enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(x.iter().map(|v| v.to_string()));
        match tr.controls.get(k) {
            Some(u) => rec.extend(u.iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), m)),
        }
        w.write_record(&rec).map_err(csv_io(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Versioned<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

pub fn write_versioned<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let doc = Versioned {
        schema_version: SCHEMA_VERSION,
        body,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::parse(path, "document", e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, "document", e))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::parse(path, "document", "expected a JSON object"))?;
    let found = obj
        .remove("schema_version")
        .ok_or_else(|| Error::parse(path, "schema_version", "missing"))?;
    let found = found
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| Error::parse(path, "schema_version", "expected a non-negative integer"))?;
    if found != SCHEMA_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found,
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::parse(path, "document", e))
}

pub fn model_file_name(kind: ModelKind, n_train: usize) -> String {
    format!("model_{}_N{n_train}.json", kind.label())
}

pub fn save_model(path: &Path, model: &TrainedModel) -> Result<()> {
    write_versioned(path, model)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    if !path.exists() {
        return Err(Error::MissingModel(path.into()));
    }
    read_versioned(path)
}

/// Every model of `kinds` trained on `n_train` samples, from `dir`.
pub fn load_models(dir: &Path, kinds: &[ModelKind], n_train: usize) -> Result<Vec<TrainedModel>> {
    kinds.iter().map(|&k| load_model(&dir.join(model_file_name(k, n_train)))).collect()
}

/// Everything one experiment needs. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub plant: PvtolParams,
    pub demo: DemoConfig,
    pub trainer: TrainerConfig,
    pub bench: BenchConfig,
    /// Training tuples per model.
    pub n_train: usize,
    /// Constraint points (training states plus box samples).
    pub n_constraint: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            plant: PvtolParams::default(),
            demo: DemoConfig::default(),
            trainer: TrainerConfig::default(),
            bench: BenchConfig::default(),
            n_train: 100,
            n_constraint: 400,
        }
    }
}

impl ExperimentConfig {
    /// Copies the root seed into every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.demo.seed = seed;
        self.trainer.seed = seed;
        self.bench.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.demo.validate()?;
        self.trainer.validate()?;
        self.bench.validate()?;
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_versioned(path)?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_versioned(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"schema_version": 7, "seed": 1}"#).unwrap();
        match ExperimentConfig::load(&path) {
            Err(Error::Version { found: 7, expected: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, r#"{"seed": 1}"#).unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(Error::Parse { ref field, .. }) if field == "schema_version"));
    }

    #[test]
    fn partial_config_takes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"schema_version": 1, "seed": 5, "n_train": 40, "trainer": {"n_max": 3}}"#).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.n_train, 40);
        assert_eq!(cfg.trainer.n_max, 3);
        assert_eq!(cfg.trainer.seed, 5);
        assert_eq!(cfg.trainer.mu_w, TrainerConfig::default().mu_w);
    }

    #[test]
    fn missing_model_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        match load_models(dir.path(), &[ModelKind::RR], 100) {
            Err(Error::MissingModel(p)) => assert!(p.ends_with("model_R-R_N100.json")),
            other => panic!("{other:?}"),
        }
    }
}
