//! Metrics, benchmark sweeps and the raw-pixel localization benchmark.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::correlation::{emit_heatmap, fill_outside, locate};
use crate::error::{Error, Result};
use crate::geometry::{angle_diff, Pose3DoF};
use crate::model::{search_geometry, Model};
use crate::optimizer::{refine, RefineOutput, RefineSchedule};
use crate::synthdata::{make_dataset, plan_dataset, render_row, visible_wedge, NoiseSpec, SampleRecord};
use crate::synthesis::gp_project_image;
use crate::training::{train, TrainOutput};

/// Distance thresholds in meters.
pub const DIST_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];
/// Azimuth thresholds in degrees.
pub const ANGLE_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

/// Errors of one estimate. Lateral and longitudinal are measured across and
/// along the ground-truth heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub index: usize,
    pub lateral_m: f64,
    pub longitudinal_m: f64,
    pub distance_m: f64,
    pub azimuth_deg: f64,
}

pub fn sample_error(index: usize, est: &Pose3DoF, gt: &Pose3DoF) -> ErrorRow {
    let (ex, ez) = (est.t_x - gt.t_x, est.t_z - gt.t_z);
    let (s, c) = gt.theta().sin_cos();
    ErrorRow {
        index,
        lateral_m: ex * c - ez * s,
        longitudinal_m: ex * s + ez * c,
        distance_m: ex.hypot(ez),
        azimuth_deg: angle_diff(est.theta(), gt.theta()).to_degrees(),
    }
}

/// Percentage of `errors` with magnitude at most `d`.
pub fn recall(errors: &[f64], d: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    100.0 * errors.iter().filter(|e| e.abs() <= d).count() as f64 / errors.len() as f64
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    /// Recall (%) at each of `DIST_THRESHOLDS`.
    pub lateral: [f64; 3],
    pub longitudinal: [f64; 3],
    /// Recall (%) at each of `ANGLE_THRESHOLDS`.
    pub azimuth: [f64; 3],
    pub mean_m: f64,
    pub median_m: f64,
    pub median_azimuth_deg: f64,
    pub rows: Vec<ErrorRow>,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<ErrorRow>) -> Self {
        let col = |f: fn(&ErrorRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let (lat, lon, dist, az) = (
            col(|r| r.lateral_m),
            col(|r| r.longitudinal_m),
            col(|r| r.distance_m),
            col(|r| r.azimuth_deg.abs()),
        );
        let at = |e: &[f64], th: [f64; 3]| th.map(|d| recall(e, d));
        Self {
            n: rows.len(),
            lateral: at(&lat, DIST_THRESHOLDS),
            longitudinal: at(&lon, DIST_THRESHOLDS),
            azimuth: at(&az, ANGLE_THRESHOLDS),
            mean_m: if dist.is_empty() {
                f64::NAN
            } else {
                dist.iter().sum::<f64>() / dist.len() as f64
            },
            median_m: median(&dist),
            median_azimuth_deg: median(&az),
            rows,
        }
    }
}

pub fn compute_metrics(estimates: &[Pose3DoF], gts: &[Pose3DoF]) -> Result<MetricsReport> {
    if estimates.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} estimates for {} ground truths",
            estimates.len(),
            gts.len()
        )));
    }
    let rows = estimates
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (e, g))| sample_error(i, e, g))
        .collect();
    Ok(MetricsReport::from_rows(rows))
}

pub fn write_errors(path: impl AsRef<Path>, rows: &[ErrorRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_errors(path: impl AsRef<Path>) -> Result<Vec<ErrorRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|t| t.map_err(Error::from)).collect()
}

/// One line of a sweep CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub setting: String,
    pub value: f64,
    pub n: usize,
    pub lat_1m: f64,
    pub lat_3m: f64,
    pub lat_5m: f64,
    pub lon_1m: f64,
    pub lon_3m: f64,
    pub lon_5m: f64,
    pub az_1deg: f64,
    pub az_3deg: f64,
    pub az_5deg: f64,
    pub mean_m: f64,
    pub median_m: f64,
    pub median_az_deg: f64,
}

impl SummaryRow {
    pub fn new(setting: &str, value: f64, m: &MetricsReport) -> Self {
        Self {
            setting: setting.to_string(),
            value,
            n: m.n,
            lat_1m: m.lateral[0],
            lat_3m: m.lateral[1],
            lat_5m: m.lateral[2],
            lon_1m: m.longitudinal[0],
            lon_3m: m.longitudinal[1],
            lon_5m: m.longitudinal[2],
            az_1deg: m.azimuth[0],
            az_3deg: m.azimuth[1],
            az_5deg: m.azimuth[2],
            mean_m: m.mean_m,
            median_m: m.median_m,
            median_az_deg: m.median_azimuth_deg,
        }
    }
}

pub fn write_summary(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|t| t.map_err(Error::from)).collect()
}

/// Refines every sample; parallel over samples unless the config asks for
/// determinism (results are identical either way).
pub fn evaluate(model: &Model, data: &[SampleRecord]) -> Result<(MetricsReport, Vec<RefineOutput>)> {
    let schedule = RefineSchedule::from_config(&model.cfg);
    let run = |r: &SampleRecord| refine(model, &r.ground, &r.satellite, &r.prior, &schedule);
    let outs: Vec<RefineOutput> = if model.cfg.deterministic {
        data.iter().map(run).collect::<Result<_>>()?
    } else {
        data.par_iter().map(run).collect::<Result<_>>()?
    };
    let est: Vec<Pose3DoF> = outs.iter().map(|o| o.pose).collect();
    let gts: Vec<Pose3DoF> = data.iter().map(|r| r.gt).collect();
    Ok((compute_metrics(&est, &gts)?, outs))
}

/// Benchmark sweeps over one config knob.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    /// Rotation noise of the prior, degrees.
    Noise,
    /// Side of the translation search window, meters.
    Range,
    /// Optimizer iterations per level.
    Iterations,
}

impl Sweep {
    pub const ALL: [Sweep; 3] = [Sweep::Noise, Sweep::Range, Sweep::Iterations];

    pub fn name(self) -> &'static str {
        match self {
            Sweep::Noise => "noise_deg",
            Sweep::Range => "search_range_m",
            Sweep::Iterations => "iterations",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Sweep::Noise => (1..=9).map(|k| 20.0 * k as f64).collect(),
            Sweep::Range => (1..=10).map(|k| 10.0 * k as f64).collect(),
            Sweep::Iterations => (1..=5).map(f64::from).collect(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|w| w.name() == s || w.short() == s)
    }

    fn short(self) -> &'static str {
        match self {
            Sweep::Noise => "noise",
            Sweep::Range => "range",
            Sweep::Iterations => "iterations",
        }
    }

    fn apply(self, cfg: &mut Config, v: f64) {
        match self {
            Sweep::Noise => cfg.noise_theta_deg = v,
            Sweep::Range => cfg.search_range_m = v,
            Sweep::Iterations => cfg.iterations = v.round().max(1.0) as usize,
        }
    }
}

/// Runs `sweep` over `values` on `n` fresh samples per setting and writes
/// `sweep_<name>.csv` plus one heatmap per setting into `out` when given.
pub fn run_sweep(
    model: &mut Model,
    sweep: Sweep,
    values: &[f64],
    n: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<Vec<SummaryRow>> {
    let base = model.cfg.clone();
    let mut rows = Vec::with_capacity(values.len());
    let result = (|| -> Result<()> {
        for (i, &v) in values.iter().enumerate() {
            let mut cfg = base.clone();
            sweep.apply(&mut cfg, v);
            cfg.validate()?;
            model.cfg = cfg.clone();
            let (data, _) = make_dataset(&cfg, n, NoiseSpec::from_config(&cfg), seed)?;
            let (m, outs) = evaluate(model, &data)?;
            if let (Some(dir), Some(o)) = (out, outs.first()) {
                std::fs::create_dir_all(dir)?;
                emit_heatmap(&o.prob, dir.join(format!("{}_{i:02}.pgm", sweep.name())))?;
            }
            rows.push(SummaryRow::new(sweep.name(), v, &m));
        }
        Ok(())
    })();
    model.cfg = base;
    result?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_summary(dir.join(format!("sweep_{}.csv", sweep.name())), &rows)?;
    }
    Ok(rows)
}

/// Training-time ablations: each trains one model per setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Uncertainty,
    TranslationSupervision,
}

impl Ablation {
    pub const ALL: [Ablation; 2] = [Ablation::Uncertainty, Ablation::TranslationSupervision];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Uncertainty => "uncertainty",
            Ablation::TranslationSupervision => "translation_supervision",
        }
    }

    fn apply(self, cfg: &mut Config, on: bool) {
        match self {
            Ablation::Uncertainty => cfg.use_uncertainty = on,
            Ablation::TranslationSupervision => cfg.translation_supervision = on,
        }
    }
}

/// Trains with the switch on and off on `cfg.train_samples` samples and
/// evaluates on the training set. Writes `ablation_<name>.csv` into `out`.
pub fn run_ablation(cfg: &Config, ablation: Ablation, out: Option<&Path>) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::with_capacity(2);
    for on in [true, false] {
        let mut c = cfg.clone();
        ablation.apply(&mut c, on);
        let (data, _) = make_dataset(&c, c.train_samples, NoiseSpec::from_config(&c), c.seed)?;
        let mut model = Model::new(&c)?;
        train(&mut model, &data, &TrainOutput::default(), |_| {})?;
        let (m, _) = evaluate(&model, &data)?;
        rows.push(SummaryRow::new(ablation.name(), f64::from(u8::from(on)), &m));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_summary(dir.join(format!("ablation_{}.csv", ablation.name())), &rows)?;
    }
    Ok(rows)
}

/// Ground distance kept clear of the fog boundary, meters.
pub const WEDGE_MARGIN_M: f64 = 2.0;

/// One raw-pixel localization trial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityTrial {
    pub index: usize,
    pub gt_tx_m: f64,
    pub gt_tz_m: f64,
    pub est_tx_m: f64,
    pub est_tz_m: f64,
    /// Euclidean error in satellite pixels.
    pub error_px: f64,
}

#[derive(Clone, Debug)]
pub struct IdentityReport {
    pub trials: Vec<IdentityTrial>,
    /// Share of trials within one satellite pixel, in `[0, 1]`.
    pub hit_rate: f64,
}

/// Localizes rendered ground images against their satellite patch using raw
/// pixels as features. The orientation is the ground truth, the prior sits
/// at the patch center and the ground truth is drawn inside the search
/// window.
pub fn identity_benchmark(cfg: &Config, trials: usize, seed: u64) -> Result<IdentityReport> {
    let cam = cfg.camera()?;
    let sat = cfg.satellite()?;
    let half = cfg.search_range_m / 2.0 - sat.alpha;
    let noise = NoiseSpec {
        theta_deg: 0.0,
        t_m: cfg.noise_t_m.min(half).max(0.0),
    };
    let rows = plan_dataset(trials, noise, seed);
    let run = |row: &crate::synthdata::ManifestRow| -> Result<IdentityTrial> {
        let rec = render_row(cfg, row)?;
        let pose = Pose3DoF::new(rec.gt.theta(), 0.0, 0.0);
        let mut synth = gp_project_image(&rec.ground, &pose, &cam, &sat);
        fill_outside(&mut synth.data, &visible_wedge(&pose, &cam, &sat, cfg.render_range_m - WEDGE_MARGIN_M));
        let geom = search_geometry(cfg, 0, &rec.prior)?;
        let (_, (tx, tz)) = locate(&rec.satellite, &synth, None, &geom, cfg.subpixel_peak)?;
        Ok(IdentityTrial {
            index: row.index,
            gt_tx_m: rec.gt.t_x,
            gt_tz_m: rec.gt.t_z,
            est_tx_m: tx,
            est_tz_m: tz,
            error_px: (tx - rec.gt.t_x).hypot(tz - rec.gt.t_z) / sat.alpha,
        })
    };
    let out: Vec<IdentityTrial> = if cfg.deterministic {
        rows.iter().map(run).collect::<Result<_>>()?
    } else {
        rows.par_iter().map(run).collect::<Result<_>>()?
    };
    let hits = out.iter().filter(|t| t.error_px <= 1.0).count();
    Ok(IdentityReport {
        hit_rate: if out.is_empty() { 0.0 } else { hits as f64 / out.len() as f64 },
        trials: out,
    })
}

pub fn write_identity(path: impl AsRef<Path>, trials: &[IdentityTrial]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in trials {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_example() {
        let r = recall(&[0.5, 1.5, 0.9], 1.0);
        assert!((r - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_estimates() {
        let p = vec![Pose3DoF::from_degrees(30.0, 1.0, -2.0); 4];
        let m = compute_metrics(&p, &p).unwrap();
        assert_eq!(m.lateral, [100.0; 3]);
        assert_eq!(m.longitudinal, [100.0; 3]);
        assert_eq!(m.azimuth, [100.0; 3]);
        assert_eq!((m.mean_m, m.median_m), (0.0, 0.0));
    }

    #[test]
    fn length_mismatch_fails() {
        assert!(compute_metrics(&[Pose3DoF::identity()], &[]).is_err());
    }

    #[test]
    fn decomposition_follows_heading() {
        // Heading zero: forward is +t_z, lateral is +t_x.
        let gt = Pose3DoF::identity();
        let e = sample_error(0, &Pose3DoF::new(0.0, 2.0, 0.0), &gt);
        assert!((e.lateral_m - 2.0).abs() < 1e-12 && e.longitudinal_m.abs() < 1e-12);
        let gt = Pose3DoF::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        let e = sample_error(0, &Pose3DoF::new(std::f64::consts::FRAC_PI_2, 2.0, 0.0), &gt);
        assert!(e.lateral_m.abs() < 1e-12 && (e.longitudinal_m - 2.0).abs() < 1e-12);
        assert!((e.distance_m - 2.0).abs() < 1e-12);
    }

    #[test]
    fn azimuth_error_wraps() {
        let e = sample_error(0, &Pose3DoF::from_degrees(179.0, 0.0, 0.0), &Pose3DoF::from_degrees(-179.0, 0.0, 0.0));
        assert!((e.azimuth_deg.abs() - 2.0).abs() < 1e-9);
    }
}
