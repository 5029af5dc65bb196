use std::path::Path;
use std::process::ExitCode;

use skyalign_core::correlation::emit_heatmap;
use skyalign_core::eval::{
    evaluate, identity_benchmark, run_ablation, run_sweep, write_errors, write_identity, write_summary, Ablation, SummaryRow, Sweep,
};
use skyalign_core::imageio::{normalize_to_bytes, read_pgm, write_gray};
use skyalign_core::model::Model;
use skyalign_core::optimizer::{refine, write_trace, RefineSchedule, TraceEntry};
use skyalign_core::synthdata::{load_dataset, make_dataset, save_dataset, ManifestRow, NoiseSpec, SampleRecord};
use skyalign_core::training::{train, TrainOutput};
use skyalign_core::{gradsuite, Config, Error, Pose3DoF, Result};
use skyalign_tensor::io::{load_tensor, save_tensor};

use crate::{Cli, Command};

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Angle as written to files and printed: counterclockwise unless the
/// config asks for clockwise azimuths.
fn deg_out(cfg: &Config, deg: f64) -> f64 {
    if cfg.azimuth_clockwise {
        -deg
    } else {
        deg
    }
}

fn model(cfg: &Config, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(dir) => Model::load(cfg, dir),
        None => Model::new(cfg),
    }
}

fn dataset(cfg: &Config, data: Option<&Path>, n: usize, seed: u64) -> Result<(Vec<SampleRecord>, Vec<ManifestRow>)> {
    match data {
        Some(dir) => {
            let (mut records, mut rows) = load_dataset(dir, cfg)?;
            if cfg.azimuth_clockwise {
                for (r, row) in records.iter_mut().zip(rows.iter_mut()) {
                    row.gt_theta_deg = -row.gt_theta_deg;
                    row.prior_theta_deg = -row.prior_theta_deg;
                    r.gt = row.gt();
                    r.prior = row.prior();
                }
            }
            Ok((records, rows))
        }
        None => make_dataset(cfg, n, NoiseSpec::from_config(cfg), seed),
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    if cfg.deterministic {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match &cli.command {
        Command::Synth { out, n, seed } => {
            let n = n.unwrap_or(cfg.train_samples);
            let (records, mut rows) = make_dataset(&cfg, n, NoiseSpec::from_config(&cfg), seed.unwrap_or(cfg.seed))?;
            for row in &mut rows {
                row.gt_theta_deg = deg_out(&cfg, row.gt_theta_deg);
                row.prior_theta_deg = deg_out(&cfg, row.prior_theta_deg);
            }
            save_dataset(out, &records, &rows)?;
            log::info!("wrote {n} pairs to {}", out.display());
        }
        Command::Train { data, out } => {
            let (records, _) = dataset(&cfg, data.as_deref(), cfg.train_samples, cfg.seed)?;
            let mut m = Model::new(&cfg)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
            log::info!("training {} parameters on {} pairs", m.store.numel(), records.len());
            let report = train(&mut m, &records, &TrainOutput { dir: Some(out.clone()) }, |r| {
                if r.step % 10 == 0 {
                    log::info!(
                        "step {} L1 {:.3} L2 {:.4} lambda ({:.3}, {:.3}) total {:.3}",
                        r.step,
                        r.l1,
                        r.l2,
                        r.lambda1,
                        r.lambda2,
                        r.total
                    );
                }
            })?;
            log::info!("{} steps; checkpoint in {}", report.steps, out.join("final").display());
        }
        Command::Refine {
            checkpoint,
            ground,
            satellite,
            prior_theta_deg,
            prior_tx_m,
            prior_tz_m,
            out,
            format,
        } => {
            let m = model(&cfg, checkpoint.as_deref())?;
            let ground = read_pgm(ground)?;
            let satellite = read_pgm(satellite)?;
            let prior = Pose3DoF::from_degrees(deg_out(&cfg, *prior_theta_deg), *prior_tx_m, *prior_tz_m);
            let r = refine(&m, &ground, &satellite, &prior, &RefineSchedule::from_config(&cfg))?;
            let p = &r.pose;
            if !(p.theta().is_finite() && p.t_x.is_finite() && p.t_z.is_finite()) {
                return Err(Error::Numeric("refined pose is not finite".into()));
            }
            std::fs::create_dir_all(out)?;
            let trace: Vec<TraceEntry> = r
                .trace
                .iter()
                .map(|t| TraceEntry {
                    theta_deg: deg_out(&cfg, t.theta_deg),
                    ..*t
                })
                .collect();
            write_trace(out.join("trace.csv"), &trace)?;
            save_tensor(out.join("prob.cvt"), &r.prob.to_tensor())?;
            emit_heatmap(&r.prob, out.join(format!("heatmap.{format}")))?;
            println!(
                "theta_deg {:.4} tx_m {:.4} tz_m {:.4}",
                deg_out(&cfg, p.theta_deg()),
                p.t_x,
                p.t_z
            );
        }
        Command::Eval { checkpoint, data, n, out } => {
            let m = model(&cfg, checkpoint.as_deref())?;
            let (records, _) = dataset(&cfg, data.as_deref(), *n, cfg.seed.wrapping_add(1))?;
            let (report, outs) = evaluate(&m, &records)?;
            std::fs::create_dir_all(out)?;
            write_errors(out.join("errors.csv"), &report.rows)?;
            write_summary(out.join("summary.csv"), &[SummaryRow::new("eval", 0.0, &report)])?;
            if let Some(o) = outs.first() {
                emit_heatmap(&o.prob, out.join("heatmap_0000.pgm"))?;
            }
            println!(
                "n {} lateral {:?} longitudinal {:?} azimuth {:?} mean {:.3} m median {:.3} m",
                report.n, report.lateral, report.longitudinal, report.azimuth, report.mean_m, report.median_m
            );
        }
        Command::Bench {
            checkpoint,
            sweep,
            ablations,
            identity,
            n,
            out,
        } => {
            let sweeps: Vec<Sweep> = if sweep.iter().any(|s| s == "all") {
                vec![Sweep::Noise, Sweep::Range, Sweep::Iterations]
            } else {
                sweep
                    .iter()
                    .map(|s| Sweep::parse(s).ok_or_else(|| Error::Config(format!("unknown sweep `{s}`"))))
                    .collect::<Result<_>>()?
            };
            std::fs::create_dir_all(out)?;
            if !sweeps.is_empty() {
                let mut m = model(&cfg, checkpoint.as_deref())?;
                for s in sweeps {
                    let rows = run_sweep(&mut m, s, &s.default_values(), *n, cfg.seed.wrapping_add(2), Some(out))?;
                    log::info!("sweep {}: {} rows", s.name(), rows.len());
                }
            }
            if *ablations {
                for a in Ablation::ALL {
                    run_ablation(&cfg, a, Some(out))?;
                    log::info!("ablation {} done", a.name());
                }
            }
            if let Some(trials) = identity {
                let mut c = cfg.clone();
                c.identity_encoder = true;
                let r = identity_benchmark(&c, *trials, cfg.seed)?;
                write_identity(out.join("identity.csv"), &r.trials)?;
                println!("identity search: {:.1}% within 1 satellite pixel", 100.0 * r.hit_rate);
            }
        }
        Command::Gradcheck { seeds } => {
            let rows = gradsuite::run(seeds)?;
            let mut failed = 0;
            for r in &rows {
                println!("{} {} seed {} rel {:.3e}", if r.passed() { "ok  " } else { "FAIL" }, r.name, r.seed, r.rel_error);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                eprintln!("{failed} checks exceed relative error {:e}", gradsuite::TOLERANCE);
                return Ok(ExitCode::from(1));
            }
        }
        Command::Heatmap { input, out } => {
            let t = load_tensor(input)?;
            let (h, w) = match t.shape() {
                [h, w] => (*h, *w),
                [1, h, w] => (*h, *w),
                s => return Err(Error::Invalid(format!("expected a [H, W] map, got shape {s:?}"))),
            };
            if !t.all_finite() {
                return Err(Error::Numeric("probability map contains non-finite values".into()));
            }
            write_gray(out, w, h, &normalize_to_bytes(t.data()))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
