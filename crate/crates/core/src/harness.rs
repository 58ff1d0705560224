//! The model comparison: train N-R / R-R / CCM-R models, plan transfers to
//! hover with each, track them on the true plant and summarize.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::info;
use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ccm::ConstraintSet;
use crate::error::{Error, Result};
use crate::learned::{CertifiedModel, DynamicsModel};
use crate::plant::{Pvtol, PvtolParams};
use crate::trainer::{ridge_fit, sndl_fit, Bases, IterationRecord};
use crate::tracking::{track_closed_loop, tvlqr_gains, GainSchedule, LqrWeights};
use crate::trajopt::{cheb_grid, solve_trajopt_from, transfer_time, NlpConfig, NominalTrajectory, TrajoptStatus};
use crate::types::{Dataset, SeedStreams, Stream, Trajectory, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "N-R")]
    NR,
    #[serde(rename = "R-R")]
    RR,
    #[serde(rename = "CCM-R")]
    CCMR,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::NR, ModelKind::RR, ModelKind::CCMR];

    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::NR => "N-R",
            ModelKind::RR => "R-R",
            ModelKind::CCMR => "CCM-R",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.label().eq_ignore_ascii_case(s))
    }

    /// `(mu_f, mu_b)`.
    pub fn regularization(&self) -> (f64, f64) {
        match self {
            ModelKind::NR => (0.0, 1e-6),
            ModelKind::RR => (1e-6, 1e-6),
            ModelKind::CCMR => (1e-3, 1e-6),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub n_train: usize,
    pub dynamics: DynamicsModel,
    /// Present for CCM-R.
    pub certificate: Option<CertifiedModel>,
}

/// Trains one model of each kind on the first `n_train` tuples drawn from
/// `pool`; all kinds share the subsample and the feature bases.
pub fn train_models(
    pool: &Dataset,
    n_train: usize,
    n_constraint: usize,
    cfg: &TrainerConfig,
    kinds: &[ModelKind],
) -> Result<(Vec<TrainedModel>, Vec<IterationRecord>)> {
    let streams = SeedStreams::new(cfg.seed);
    let data = pool.subsample(n_train, &mut streams.rng(Stream::Subsample));
    let n = crate::types::STATE_DIM;
    let m = crate::types::CONTROL_DIM;
    let bases = Bases::sample(&streams, n, m)?;
    let mut out = Vec::new();
    let mut history = Vec::new();
    for &kind in kinds {
        let (mu_f, mu_b) = kind.regularization();
        let started = Instant::now();
        let model = match kind {
            ModelKind::NR | ModelKind::RR => TrainedModel {
                kind,
                n_train,
                dynamics: ridge_fit(&data, mu_f, mu_b, &bases.f)?,
                certificate: None,
            },
            ModelKind::CCMR => {
                let cs = ConstraintSet::build(data.states(), n_constraint, &mut streams.rng(Stream::ConstraintPoints));
                let tcfg = TrainerConfig { mu_f, mu_b, ..cfg.clone() };
                let (cm, hist) = sndl_fit(&data, cs.all_points, &bases, &tcfg)?;
                history = hist;
                TrainedModel {
                    kind,
                    n_train,
                    dynamics: cm.dynamics.clone(),
                    certificate: Some(cm),
                }
            }
        };
        info!("trained {} (N = {n_train}) in {:.1} s", kind.label(), started.elapsed().as_secs_f64());
        out.push(model);
    }
    Ok((out, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_ic: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Half-widths of the uniform draws for roll, body velocities and roll rate.
    pub roll_spread: f64,
    pub velocity_spread: f64,
    pub roll_rate_spread: f64,
    pub nodes: usize,
    pub sim_dt: f64,
    /// Mixed-unit error norm above which a run counts as diverged.
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_ic: 20,
            radius_min: 4.0,
            radius_max: 12.0,
            roll_spread: 0.3,
            velocity_spread: 0.5,
            roll_rate_spread: 0.3,
            nodes: crate::trajopt::DEFAULT_NODES,
            sim_dt: 0.01,
            divergence_threshold: 10.0,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ic == 0 {
            return Err(Error::Config("n_ic must be at least 1".into()));
        }
        if !(0.0 <= self.radius_min && self.radius_min <= self.radius_max) {
            return Err(Error::Config("need 0 <= radius_min <= radius_max".into()));
        }
        if !(self.sim_dt > 0.0) || !(self.divergence_threshold > 0.0) || self.nodes < 2 {
            return Err(Error::Config("sim_dt and divergence_threshold must be positive, nodes >= 2".into()));
        }
        Ok(())
    }
}

/// Start states: radii evenly spaced over `[radius_min, radius_max]`,
/// bearings on a golden-angle spiral, remaining states uniform draws.
pub fn initial_conditions(cfg: &BenchConfig) -> Vec<DVector<f64>> {
    let mut rng = SeedStreams::new(cfg.seed).rng(Stream::BenchmarkInitialConditions);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..cfg.n_ic)
        .map(|i| {
            let r = if cfg.n_ic == 1 {
                cfg.radius_min
            } else {
                cfg.radius_min + (cfg.radius_max - cfg.radius_min) * i as f64 / (cfg.n_ic - 1) as f64
            };
            let a = golden * i as f64;
            let mut draw = |h: f64| if h > 0.0 { rng.random_range(-h..h) } else { 0.0 };
            DVector::from_vec(vec![
                r * a.cos(),
                r * a.sin(),
                draw(cfg.roll_spread),
                draw(cfg.velocity_spread),
                draw(cfg.velocity_spread),
                draw(cfg.roll_rate_spread),
            ])
        })
        .collect()
}

/// RMS over the realized samples of `|x(t) - x*(t)|`.
pub fn rms_error(realized: &Trajectory, nominal: &NominalTrajectory) -> Result<f64> {
    let horizon = nominal.horizon();
    let errs: Vec<f64> = realized
        .times
        .iter()
        .zip(&realized.states)
        .filter(|(t, _)| **t >= -1e-12 && **t <= horizon + 1e-9)
        .map(|(t, x)| (x - nominal.state_at(*t)).norm_squared())
        .collect();
    if errs.is_empty() {
        return Err(Error::Domain("realized and nominal trajectories do not overlap in time".into()));
    }
    Ok((errs.iter().sum::<f64>() / errs.len() as f64).sqrt())
}

/// Index of the first sample whose error norm exceeds `threshold`.
pub fn first_exit(realized: &Trajectory, nominal: &NominalTrajectory, threshold: f64) -> Option<usize> {
    realized
        .times
        .iter()
        .zip(&realized.states)
        .position(|(t, x)| (x - nominal.state_at(*t)).norm() > threshold)
}

/// Diverged iff the simulator flagged a blow-up or the error norm ever
/// exceeds `threshold`.
pub fn classify_stability(realized: &Trajectory, nominal: &NominalTrajectory, threshold: f64) -> bool {
    realized.diverged() || first_exit(realized, nominal, threshold).is_some()
}

/// Realized run cut after its first exit sample, so a diverged run's RMS
/// covers the time up to the exit only.
pub fn truncate_at_exit(realized: &Trajectory, nominal: &NominalTrajectory, threshold: f64) -> Trajectory {
    match first_exit(realized, nominal, threshold) {
        None => realized.clone(),
        Some(k) => Trajectory {
            times: realized.times[..=k].to_vec(),
            states: realized.states[..=k].to_vec(),
            controls: realized.controls[..k.min(realized.controls.len())].to_vec(),
            diverged_at: realized.diverged_at,
        },
    }
}

fn case_metrics(realized: &Trajectory, nominal: &NominalTrajectory, threshold: f64) -> Result<(f64, bool, f64)> {
    let diverged = classify_stability(realized, nominal, threshold);
    let rms = rms_error(&truncate_at_exit(realized, nominal, threshold), nominal)?;
    Ok((rms, diverged, final_error(realized, nominal)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub model: ModelKind,
    pub n_train: usize,
    pub ic: usize,
    pub rms: f64,
    pub diverged: bool,
    pub trajopt_status: TrajoptStatus,
    pub final_err: f64,
    pub horizon: f64,
    /// Same case with zero feedback gain.
    pub open_loop_rms: f64,
    pub open_loop_diverged: bool,
}

fn final_error(realized: &Trajectory, nominal: &NominalTrajectory) -> f64 {
    let t = *realized.times.last().expect("nonempty");
    (realized.final_state() - nominal.state_at(t)).norm()
}

/// Cubic Hermite from `x0` to rest at the origin, per world-frame position
/// axis and for roll, with body velocities rotated to match.
pub fn hover_transfer_guess(x0: &DVector<f64>, horizon: f64) -> impl Fn(f64) -> DVector<f64> {
    let (s0, c0) = x0[2].sin_cos();
    let pdot0 = [x0[3] * c0 - x0[4] * s0, x0[3] * s0 + x0[4] * c0];
    let (p0, phi0, w0) = ([x0[0], x0[1]], x0[2], x0[5]);
    move |t: f64| {
        let s = (t / horizon).clamp(0.0, 1.0);
        // value and time derivative of a Hermite cubic ending at rest at 0
        let herm = |v0: f64, d0: f64| {
            let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
            let h10 = s.powi(3) - 2.0 * s * s + s;
            let dh00 = (6.0 * s * s - 6.0 * s) / horizon;
            let dh10 = (3.0 * s * s - 4.0 * s + 1.0) / horizon;
            (h00 * v0 + h10 * horizon * d0, dh00 * v0 + dh10 * horizon * d0)
        };
        let (px, vx) = herm(p0[0], pdot0[0]);
        let (pz, vz) = herm(p0[1], pdot0[1]);
        let (phi, w) = herm(phi0, w0);
        let (sn, cs) = phi.sin_cos();
        DVector::from_vec(vec![px, pz, phi, vx * cs + vz * sn, -vx * sn + vz * cs, w])
    }
}

/// Runs every model on every initial condition; rows are ordered by model
/// then IC.
pub fn run_benchmark(models: &[TrainedModel], params: &PvtolParams, cfg: &BenchConfig) -> Result<Vec<ResultsRow>> {
    cfg.validate()?;
    let ics = initial_conditions(cfg);
    let grid = cheb_grid(cfg.nodes)?;
    let plant = Pvtol::new(*params);
    let weights = LqrWeights::pvtol();
    let hover = DVector::zeros(6);
    let mut rows = Vec::new();
    for tm in models {
        for (i, x0) in ics.iter().enumerate() {
            let dist = (x0[0].powi(2) + x0[1].powi(2)).sqrt();
            let horizon = transfer_time(dist);
            let guess = hover_transfer_guess(x0, horizon);
            let nominal = solve_trajopt_from(&tm.dynamics, x0, &hover, horizon, &grid, &NlpConfig::default(), &guess)?;
            let gains = match tvlqr_gains(&tm.dynamics, &nominal, &weights) {
                Ok(g) => g,
                Err(e) => {
                    log::warn!("{} IC {i}: {e}; tracking open loop", tm.kind.label());
                    GainSchedule::zero(nominal.times.clone(), 6, 2)
                }
            };
            let realized = track_closed_loop(&plant, &nominal, &gains, x0, cfg.sim_dt)?;
            let open = GainSchedule::zero(gains.times.clone(), 6, 2);
            let open_run = track_closed_loop(&plant, &nominal, &open, x0, cfg.sim_dt)?;
            let (rms, diverged, final_err) = case_metrics(&realized, &nominal, cfg.divergence_threshold)?;
            let (open_loop_rms, open_loop_diverged, _) = case_metrics(&open_run, &nominal, cfg.divergence_threshold)?;
            let row = ResultsRow {
                model: tm.kind,
                n_train: tm.n_train,
                ic: i,
                rms,
                diverged,
                trajopt_status: nominal.status,
                final_err,
                horizon,
                open_loop_rms,
                open_loop_diverged,
            };
            info!(
                "{} IC {i}: rms {:.3} diverged {} trajopt {}",
                tm.kind.label(),
                row.rms,
                row.diverged,
                row.trajopt_status.label()
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

pub const RESULTS_HEADER: [&str; 8] = ["model", "N", "ic", "rms", "diverged", "trajopt_status", "final_err", "T"];

pub fn write_results_csv(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(RESULTS_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.model.label().to_string(),
            r.n_train.to_string(),
            r.ic.to_string(),
            format!("{:.6e}", r.rms),
            r.diverged.to_string(),
            r.trajopt_status.label().to_string(),
            format!("{:.6e}", r.final_err),
            format!("{:.4}", r.horizon),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The zero-gain counterpart of every row.
pub fn write_open_loop_csv(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["model", "N", "ic", "rms", "diverged", "closed_loop_rms"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.model.label().to_string(),
            r.n_train.to_string(),
            r.ic.to_string(),
            format!("{:.6e}", r.open_loop_rms),
            r.open_loop_diverged.to_string(),
            format!("{:.6e}", r.rms),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultsRow>> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut rd = csv::Reader::from_path(path).map_err(io)?;
    let headers = rd.headers().map_err(io)?.clone();
    if headers.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(Error::parse(path, "header", format!("expected {RESULTS_HEADER:?}")));
    }
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, "row", e))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i).parse().map_err(|_| Error::parse(path, RESULTS_HEADER[i], format!("row {line}: not a number")))
        };
        let int = |i: usize| -> Result<usize> {
            field(i).parse().map_err(|_| Error::parse(path, RESULTS_HEADER[i], format!("row {line}: not an integer")))
        };
        let model = ModelKind::parse(field(0)).ok_or_else(|| Error::parse(path, "model", format!("row {line}: unknown model")))?;
        let status = match field(5) {
            "ok" => TrajoptStatus::Converged,
            "max_iter" => TrajoptStatus::MaxIter,
            "failed" => TrajoptStatus::Failed,
            other => return Err(Error::parse(path, "trajopt_status", format!("row {line}: unknown status {other}"))),
        };
        rows.push(ResultsRow {
            model,
            n_train: int(1)?,
            ic: int(2)?,
            rms: num(3)?,
            diverged: field(4) == "true",
            trajopt_status: status,
            final_err: num(6)?,
            horizon: num(7)?,
            open_loop_rms: f64::NAN,
            open_loop_diverged: false,
        });
    }
    Ok(rows)
}

/// Quantile by linear interpolation between order statistics:
/// `h = (n - 1) p`, `q = x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h])`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub model: ModelKind,
    pub n_train: usize,
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Most extreme data within 1.5 IQR of the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
    pub diverged: usize,
}

pub fn summarize(values: &[f64]) -> Option<(f64, f64, f64, f64, f64, Vec<f64>)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|x| *x >= lo_fence && *x <= hi_fence).collect();
    let outliers = v.iter().copied().filter(|x| *x < lo_fence || *x > hi_fence).collect();
    Some((q1, med, q3, inside[0], inside[inside.len() - 1], outliers))
}

pub fn box_summaries(rows: &[ResultsRow]) -> Vec<BoxSummary> {
    let mut keys: Vec<(ModelKind, usize)> = rows.iter().map(|r| (r.model, r.n_train)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter_map(|(model, n_train)| {
            let group: Vec<&ResultsRow> = rows.iter().filter(|r| r.model == model && r.n_train == n_train).collect();
            let vals: Vec<f64> = group.iter().map(|r| r.rms).collect();
            let (q1, median, q3, whisker_low, whisker_high, outliers) = summarize(&vals)?;
            Some(BoxSummary {
                model,
                n_train,
                count: vals.len(),
                q1,
                median,
                q3,
                whisker_low,
                whisker_high,
                outliers,
                diverged: group.iter().filter(|r| r.diverged).count(),
            })
        })
        .collect()
}

/// `results.csv`, `summary.csv` and `rms_boxplot.svg` in `out_dir`.
pub fn emit_report(rows: &[ResultsRow], out_dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Domain("no benchmark rows to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_results_csv(&out_dir.join("results.csv"), rows)?;
    let sums = box_summaries(rows);
    let path = out_dir.join("summary.csv");
    let mut text = String::from(
        "# quartiles by linear interpolation between order statistics, h = (n-1)p; whiskers at the last data within 1.5 IQR\n",
    );
    text.push_str("model,N,count,q1,median,q3,whisker_low,whisker_high,outliers,diverged\n");
    for s in &sums {
        let _ = writeln!(
            text,
            "{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{}",
            s.model.label(),
            s.n_train,
            s.count,
            s.q1,
            s.median,
            s.q3,
            s.whisker_low,
            s.whisker_high,
            s.outliers.len(),
            s.diverged
        );
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let svg_path = out_dir.join("rms_boxplot.svg");
    std::fs::write(&svg_path, boxplot_svg(&sums)).map_err(|e| Error::io(&svg_path, e))
}

/// Box plot on a log10 RMS axis, one box per (model, N).
pub fn boxplot_svg(sums: &[BoxSummary]) -> String {
    let (w, h) = (120.0 + 110.0 * sums.len() as f64, 420.0);
    let (top, bottom, left) = (30.0, 360.0, 70.0);
    let all: Vec<f64> = sums
        .iter()
        .flat_map(|s| [s.whisker_low, s.whisker_high].into_iter().chain(s.outliers.iter().copied()))
        .filter(|v| *v > 0.0)
        .collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).max(1e-6).log10().floor();
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(1e-5).log10().ceil().max(lo + 1.0);
    let y = |v: f64| {
        let l = v.max(10f64.powf(lo)).log10();
        bottom - (l - lo) / (hi - lo) * (bottom - top)
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="black"/>"#, w - 20.0);
    for e in (lo as i32)..=(hi as i32) {
        let yy = y(10f64.powi(e));
        let _ = writeln!(s, r#"<line x1="{}" y1="{yy:.1}" x2="{left}" y2="{yy:.1}" stroke="black"/>"#, left - 5.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">1e{e}</text>"#, left - 8.0, yy + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">RMS tracking error</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0
    );
    for (i, b) in sums.iter().enumerate() {
        let cx = left + 60.0 + 110.0 * i as f64;
        let half = 25.0;
        let _ = writeln!(s, r#"<g class="box">"#);
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="lightsteelblue" stroke="black"/>"#,
            cx - half,
            y(b.q3),
            2.0 * half,
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#, cx - half, y(b.median), cx + half, y(b.median));
        for (a, c) in [(b.q3, b.whisker_high), (b.q1, b.whisker_low)] {
            let _ = writeln!(s, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, y(a), y(c));
            let _ = writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, cx - 10.0, y(c), cx + 10.0, y(c));
        }
        for o in &b.outliers {
            let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{:.1}" r="3" fill="none" stroke="red"/>"#, y(*o));
        }
        let _ = writeln!(s, "</g>");
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{} N={} ({} unstable)</text>"#,
            bottom + 20.0,
            b.model.label(),
            b.n_train,
            b.diverged
        );
    }
    s.push_str("</svg>\n");
    s
}
