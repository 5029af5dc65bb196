//! One PASS/FAIL line per acceptance criterion. Runs every criterion even
//! when an earlier one fails, then exits non-zero if any line failed. Built
//! without the libtest harness so the lines are always printed.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skyalign_core::correlation::{ncc_direct, ncc_fft};
use skyalign_core::eval::{evaluate, identity_benchmark, run_ablation, run_sweep, Ablation, Sweep};
use skyalign_core::model::Model;
use skyalign_core::optimizer::{refine, RefineSchedule};
use skyalign_core::synthdata::{make_dataset, NoiseSpec};
use skyalign_core::training::{loss_location_value, loss_total_value, train, TrainOutput};
use skyalign_core::{gradsuite, Result};
use skyalign_tensor::FeatureMap;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(name: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let t = Instant::now();
    let o = f().unwrap_or_else(|e| Outcome {
        pass: false,
        detail: format!("error: {e}"),
    });
    println!(
        "{} {name}: {} [{:.1} s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        t.elapsed().as_secs_f64()
    );
    o.pass
}

fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap {
        channels: c,
        height: h,
        width: w,
        data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        level: 0,
    }
}

fn geometry_oracle() -> Result<Outcome> {
    let t = Instant::now();
    let s = common::geometry_oracle_run(10_000, 2024);
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: s.max_abs_in_image < 1e-9 && s.max_rel < 1e-9 && s.max_du_over_h == 0.0 && secs < 5.0,
        detail: format!(
            "10^4 configs, max abs {:.2e} px, max rel {:.2e}, max |du/dh| {:.1e}, {secs:.2} s (< 1e-9, 0, 5 s)",
            s.max_abs_in_image, s.max_rel, s.max_du_over_h
        ),
    })
}

fn round_trip() -> Result<Outcome> {
    let t = Instant::now();
    let worst = common::round_trip_run(100, 99);
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: worst > 0.99 && secs < 60.0,
        detail: format!("100 planar scenes, worst wedge NCC {worst:.4}, {secs:.1} s (> 0.99, 60 s)"),
    })
}

fn identity_search() -> Result<Outcome> {
    let t = Instant::now();
    let r = identity_benchmark(&common::identity_config(), 500, 31)?;
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: r.hit_rate >= 0.99 && secs < 300.0,
        detail: format!(
            "500 trials, {:.1}% within 1 sat px, {secs:.1} s (>= 99%, 300 s)",
            100.0 * r.hit_rate
        ),
    })
}

fn ncc_paths() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let map = random_map(4, 128, 128, &mut rng);
        let tpl = random_map(4, 64, 64, &mut rng);
        let (d, f) = (ncc_direct(&map, &tpl)?, ncc_fft(&map, &tpl)?);
        worst = worst.max(d.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let map = random_map(4, 512, 512, &mut rng);
    let tpl = random_map(4, 128, 128, &mut rng);
    let time = |f: &dyn Fn() -> Result<Vec<f64>>| -> Result<Duration> {
        let t = Instant::now();
        f()?;
        Ok(t.elapsed())
    };
    let direct = time(&|| ncc_direct(&map, &tpl))?;
    let fft = time(&|| ncc_fft(&map, &tpl))?;
    let speedup = direct.as_secs_f64() / fft.as_secs_f64();
    Ok(Outcome {
        pass: worst < 1e-4 && speedup >= 5.0,
        detail: format!(
            "max |fft - direct| {worst:.2e} over 10 seeds (< 1e-4); 512/128 direct {:.2} s, fft {:.3} s, speedup {speedup:.0}x (>= 5x)",
            direct.as_secs_f64(),
            fft.as_secs_f64()
        ),
    })
}

fn gradients() -> Result<Outcome> {
    let t = Instant::now();
    let rows = gradsuite::run(&[1, 2, 3, 4, 5])?;
    let secs = t.elapsed().as_secs_f64();
    let worst = rows.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).expect("rows");
    Ok(Outcome {
        pass: rows.iter().all(|r| r.passed()) && secs < 120.0,
        detail: format!(
            "{} checks over 5 seeds, worst {} {:.2e}, {secs:.1} s (< 1e-4, 120 s)",
            rows.len(),
            worst.name,
            worst.rel_error
        ),
    })
}

fn analytic_values() -> Result<Outcome> {
    let ln2 = loss_location_value(&[0.5; 81], 40, 10.0, false)?;
    let total = loss_total_value(0.0, 0.0, -5.0, -3.0);
    let cfg = common::tiny_config();
    let model = Model::new(&cfg)?;
    let (data, _) = make_dataset(&cfg, 1, NoiseSpec::from_config(&cfg), 1)?;
    let r = &data[0];
    let out = refine(&model, &r.ground, &r.satellite, &r.prior, &RefineSchedule::from_config(&cfg))?;
    Ok(Outcome {
        pass: (ln2 - std::f64::consts::LN_2).abs() <= 1e-12 && total == -8.0 && out.trace.len() == 6,
        detail: format!(
            "constant map {ln2:.15} (ln 2 ± 1e-12), total(0,0,-5,-3) = {total}, {} updates per refine (6)",
            out.trace.len()
        ),
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn overfit() -> Result<Outcome> {
    let t = Instant::now();
    let cfg = common::overfit_config();
    let (data, _) = make_dataset(&cfg, cfg.train_samples, NoiseSpec::from_config(&cfg), cfg.seed)?;
    let mut model = Model::new(&cfg)?;
    let before = evaluate(&model, &data)?.0;
    let report = train(&mut model, &data, &TrainOutput::default(), |_| {})?;
    let (m, _) = evaluate(&model, &data)?;
    let secs = t.elapsed().as_secs_f64();
    let rot = median(m.rows.iter().map(|r| r.azimuth_deg.abs()).collect());
    let loc = median(m.rows.iter().map(|r| r.distance_m / cfg.sat_alpha).collect());
    let rot0 = median(before.rows.iter().map(|r| r.azimuth_deg.abs()).collect());
    let loc0 = median(before.rows.iter().map(|r| r.distance_m / cfg.sat_alpha).collect());
    Ok(Outcome {
        pass: rot < 1.0 && loc < 2.0 && report.steps <= 2000 && secs < 1800.0,
        detail: format!(
            "16 pairs, {} steps: median rotation {rot0:.2} -> {rot:.2} deg (< 1), median location {loc0:.2} -> {loc:.2} sat px (< 2), {:.0} s (1800 s)",
            report.steps, secs
        ),
    })
}

fn ablations() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut cfg = common::tiny_config();
    cfg.max_steps = 2;
    cfg.train_samples = 3;
    let mut files = Vec::new();
    for a in Ablation::ALL {
        run_ablation(&cfg, a, Some(dir.path()))?;
        files.push(format!("ablation_{}.csv", a.name()));
    }
    let mut model = Model::new(&cfg)?;
    let mut rows = 0;
    for s in [Sweep::Iterations, Sweep::Noise, Sweep::Range] {
        rows += run_sweep(&mut model, s, &s.default_values(), 2, 3, Some(dir.path()))?.len();
        files.push(format!("sweep_{}.csv", s.name()));
    }
    let missing: Vec<&String> = files.iter().filter(|f| !dir.path().join(f).is_file()).collect();
    Ok(Outcome {
        pass: missing.is_empty() && rows == 5 + 9 + 10,
        detail: format!("{} CSVs written, {rows} sweep rows (24), missing {missing:?}", files.len() - missing.len()),
    })
}

fn main() {
    let results = [
        report("geometry oracle", geometry_oracle),
        report("ground-plane round trip", round_trip),
        report("identity dense search", identity_search),
        report("NCC direct vs FFT", ncc_paths),
        report("gradient suite", gradients),
        report("analytic loss values", analytic_values),
        report("overfit", overfit),
        report("ablations and sweeps", ablations),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
