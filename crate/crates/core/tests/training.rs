mod common;

use skyalign_core::model::Model;
use skyalign_core::optimizer::{read_trace, refine, write_trace, RefineSchedule};
use skyalign_core::synthdata::{make_dataset, NoiseSpec};
use skyalign_core::training::{loss_location_value, loss_total_value, read_losses, train, TrainOutput};

#[test]
fn analytic_loss_values() {
    for gamma in [1.0, 10.0] {
        let v = loss_location_value(&[0.42; 121], 60, gamma, false).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }
    assert_eq!(loss_total_value(0.0, 0.0, -5.0, -3.0), -8.0);
}

#[test]
fn refine_records_six_updates_and_round_trips_trace() {
    let cfg = common::tiny_config();
    let model = Model::new(&cfg).unwrap();
    let (data, _) = make_dataset(&cfg, 1, NoiseSpec::from_config(&cfg), 3).unwrap();
    let sched = RefineSchedule::from_config(&cfg);
    let r = &data[0];
    let out = refine(&model, &r.ground, &r.satellite, &r.prior, &sched).unwrap();
    assert_eq!(out.trace.len(), 6);
    let levels: Vec<(usize, usize)> = out.trace.iter().map(|t| (t.level, t.iter)).collect();
    // Each iteration sweeps the levels coarse to fine.
    assert_eq!(levels, vec![(1, 1), (2, 1), (3, 1), (1, 2), (2, 2), (3, 2)]);
    // Zero-initialized heads leave the prior rotation untouched.
    for t in &out.trace {
        assert!((t.theta_deg - r.prior.theta_deg()).abs() < 1e-9);
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("trace.csv");
    write_trace(&p, &out.trace).unwrap();
    assert_eq!(read_trace(&p).unwrap(), out.trace);
    let header = std::fs::read_to_string(&p).unwrap();
    assert!(header.starts_with("level,iter,theta_deg,tx_m,tz_m"));
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let cfg = common::tiny_config();
    let (data, _) = make_dataset(&cfg, cfg.train_samples, NoiseSpec::from_config(&cfg), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: Some(dir.path().to_path_buf()) };

    let mut a = Model::new(&cfg).unwrap();
    let ra = train(&mut a, &data, &out, |_| {}).unwrap();
    let mut b = Model::new(&cfg).unwrap();
    let rb = train(&mut b, &data, &TrainOutput::default(), |_| {}).unwrap();
    assert_eq!(ra.steps, 3);
    assert_eq!(ra.losses, rb.losses);
    for id in a.store.ids() {
        assert_eq!(a.store.get(id).data(), b.store.get(id).data(), "{}", a.store.name(id));
    }

    // Both balancing weights drift up while e^{-λ}·L exceeds 1.
    let (l1, l2) = a.lambdas();
    assert!(l1 > cfg.lambda1_init && l2 > cfg.lambda2_init, "λ = ({l1}, {l2})");

    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert!(csv.starts_with("step,L1,L2,lambda1,lambda2,total"));
    assert_eq!(read_losses(dir.path().join("loss.csv")).unwrap(), ra.losses);
    for row in &ra.losses {
        let t = loss_total_value(row.l1, row.l2, -5.0, -3.0);
        assert!(row.total.is_finite() && t.is_finite());
    }

    let loaded = Model::load(&cfg, dir.path().join("final")).unwrap();
    let sched = RefineSchedule::from_config(&cfg);
    let r = &data[0];
    let x = refine(&a, &r.ground, &r.satellite, &r.prior, &sched).unwrap();
    let y = refine(&loaded, &r.ground, &r.satellite, &r.prior, &sched).unwrap();
    // Checkpoints narrow weights to f32, so the reload agrees to rounding.
    for (p, q) in x.trace.iter().zip(&y.trace) {
        assert!((p.theta_deg - q.theta_deg).abs() < 1e-6 && (p.tx_m - q.tx_m).abs() < 1e-6 && (p.tz_m - q.tz_m).abs() < 1e-6);
    }
    for id in a.store.ids() {
        let d = a.store.get(id).max_abs_diff(loaded.store.get(id));
        assert!(d <= 1e-7 * (1.0 + a.store.get(id).data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }
}

#[test]
fn loading_into_a_different_architecture_fails() {
    let cfg = common::tiny_config();
    let dir = tempfile::tempdir().unwrap();
    Model::new(&cfg).unwrap().save(dir.path()).unwrap();
    let mut other = cfg.clone();
    other.optimizer_hidden = 12;
    assert!(Model::load(&other, dir.path()).is_err());
}

#[test]
fn empty_training_set_is_rejected() {
    let cfg = common::tiny_config();
    let mut m = Model::new(&cfg).unwrap();
    assert!(train(&mut m, &[], &TrainOutput::default(), |_| {}).is_err());
}
