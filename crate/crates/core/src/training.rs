//! Pose and location losses, their uncertainty-weighted sum, and the
//! training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skyalign_tensor::ops;
use skyalign_tensor::{Backward, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, Pose3DoF};
use crate::imageio;
use crate::model::Model;
use crate::optimizer::{forward, RefineSchedule};
use crate::synthdata::SampleRecord;

/// Signed per-entry residuals `(θ deg, t_x, t_z)` against `gt`.
fn residuals(pose: &[f64], gt: &Pose3DoF) -> [f64; 3] {
    [
        angle_diff(pose[0], gt.theta()).to_degrees(),
        pose[1] - gt.t_x,
        pose[2] - gt.t_z,
    ]
}

/// Sum over trace entries of `|Δθ|° + |Δt_x| + |Δt_z|`, the angle taken on
/// the circle. Without translation supervision only the angle term remains.
pub fn loss_pose_value(trace: &[Pose3DoF], gt: &Pose3DoF, translation: bool) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::Invalid("pose loss needs a non-empty trace".into()));
    }
    Ok(trace
        .iter()
        .map(|p| {
            let r = residuals(&[p.theta(), p.t_x, p.t_z], gt);
            r[0].abs() + if translation { r[1].abs() + r[2].abs() } else { 0.0 }
        })
        .sum())
}

struct PoseL1 {
    gt: Pose3DoF,
    translation: bool,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Backward for PoseL1 {
    fn name(&self) -> &'static str {
        "pose_l1"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> skyalign_tensor::Result<Vec<Option<Tensor>>> {
        let g = grad.data()[0];
        Ok(inputs
            .iter()
            .map(|p| {
                let r = residuals(p.data(), &self.gt);
                let t = if self.translation { 1.0 } else { 0.0 };
                Some(Tensor::from_vec(vec![
                    g * sign(r[0]) * 180.0 / std::f64::consts::PI,
                    g * t * sign(r[1]),
                    g * t * sign(r[2]),
                ]))
            })
            .collect())
    }
}

/// Differentiable pose loss over `[3]` trace vars (θ in radians); `[1]`.
pub fn loss_pose(tape: &mut Tape, trace: &[Var], gt: &Pose3DoF, translation: bool) -> Result<Var> {
    let poses = trace
        .iter()
        .map(|&v| Pose3DoF::from_tensor(tape.value(v)))
        .collect::<Result<Vec<_>>>()?;
    let value = loss_pose_value(&poses, gt, translation)?;
    Ok(tape.push(
        Tensor::from_vec(vec![value]),
        trace,
        PoseL1 {
            gt: *gt,
            translation,
        },
    ))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Exponent sign: `+1` penalizes other locations beating the ground truth;
/// `-1` is the literal printed form.
fn location_sign(literal: bool) -> f64 {
    if literal {
        -1.0
    } else {
        1.0
    }
}

/// Mean over non-GT positions of `log(1 + exp(γ (P_o − P_gt)))`.
pub fn loss_location_value(p: &[f64], gt: usize, gamma: f64, literal: bool) -> Result<f64> {
    if gt >= p.len() {
        return Err(Error::Invalid(format!("ground-truth index {gt} outside map of {}", p.len())));
    }
    if p.len() < 2 {
        return Ok(std::f64::consts::LN_2);
    }
    let s = location_sign(literal);
    let total: f64 = p
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != gt)
        .map(|(_, &v)| softplus(s * gamma * (v - p[gt])))
        .sum();
    Ok(total / (p.len() - 1) as f64)
}

struct LocationLoss {
    gt: usize,
    gamma: f64,
    sign: f64,
}

impl Backward for LocationLoss {
    fn name(&self) -> &'static str {
        "location_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> skyalign_tensor::Result<Vec<Option<Tensor>>> {
        let p = inputs[0].data();
        let n = p.len();
        let mut d = vec![0.0; n];
        if n >= 2 {
            let k = grad.data()[0] * self.sign * self.gamma / (n - 1) as f64;
            for i in 0..n {
                if i != self.gt {
                    let w = k * logistic(self.sign * self.gamma * (p[i] - p[self.gt]));
                    d[i] += w;
                    d[self.gt] -= w;
                }
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
    }
}

/// Differentiable location loss over a probability map var; `gt` is the
/// row-major index of the ground-truth position. Result `[1]`.
pub fn loss_location(tape: &mut Tape, p: Var, gt: usize, gamma: f64, literal: bool) -> Result<Var> {
    let value = loss_location_value(tape.value(p).data(), gt, gamma, literal)?;
    Ok(tape.push(
        Tensor::from_vec(vec![value]),
        &[p],
        LocationLoss {
            gt,
            gamma,
            sign: location_sign(literal),
        },
    ))
}

pub fn loss_total_value(l1: f64, l2: f64, lambda1: f64, lambda2: f64) -> f64 {
    l1 * (-lambda1).exp() + lambda1 + l2 * (-lambda2).exp() + lambda2
}

/// `L1·e^{−λ1} + λ1 + L2·e^{−λ2} + λ2` on `[1]` vars.
pub fn loss_total(tape: &mut Tape, l1: Var, l2: Var, lambda1: Var, lambda2: Var) -> Result<Var> {
    let term = |tape: &mut Tape, l: Var, lam: Var| -> Result<Var> {
        let w = ops::scale(tape, lam, -1.0);
        let w = ops::exp(tape, w);
        let a = ops::mul(tape, l, w)?;
        Ok(ops::add(tape, a, lam)?)
    };
    let a = term(tape, l1, lambda1)?;
    let b = term(tape, l2, lambda2)?;
    Ok(ops::add(tape, a, b)?)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; store.len()],
        }
    }

    /// Applies one update for every parameter with a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
            let p = store.get_mut(ids[i]).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One line of the loss-curve CSV (batch means).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

pub fn write_losses(path: impl AsRef<Path>, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_losses(path: impl AsRef<Path>) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Per-sample loss terms and gradients.
pub struct SampleLoss {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub grads: Vec<Option<Tensor>>,
}

/// Forward and backward for one sample.
pub fn sample_loss(model: &Model, rec: &SampleRecord, schedule: &RefineSchedule) -> Result<SampleLoss> {
    let cfg = &model.cfg;
    let mut tape = Tape::new();
    let pass = forward(&mut tape, model, &rec.ground, &rec.satellite, &rec.prior, schedule, true)?;
    let trace: Vec<Var> = pass.trace.iter().map(|t| t.2).collect();
    let l1 = loss_pose(&mut tape, &trace, &rec.gt, cfg.translation_supervision)?;
    let loc = pass.location.as_ref().expect("location requested");
    let (u, v) = loc.search.position_of(rec.gt.t_x, rec.gt.t_z).ok_or_else(|| {
        Error::Invalid(format!(
            "ground-truth translation ({:.2}, {:.2}) outside the search window",
            rec.gt.t_x, rec.gt.t_z
        ))
    })?;
    let gt = v * loc.search.region.width + u;
    let l2 = loss_location(&mut tape, loc.prob, gt, cfg.gamma, cfg.literal_triplet_sign)?;
    let lam1 = tape.param(&model.store, model.lambda1);
    let lam2 = tape.param(&model.store, model.lambda2);
    let total = loss_total(&mut tape, l1, l2, lam1, lam2)?;
    let (l1v, l2v, tv) = (tape.value(l1).item(), tape.value(l2).item(), tape.value(total).item());
    if !(l1v.is_finite() && l2v.is_finite() && tv.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss: L1={l1v} L2={l2v} total={tv}")));
    }
    let grads = tape.backward(total)?;
    let mut out: Vec<Option<Tensor>> = vec![None; model.store.len()];
    for (id, g) in grads.into_params() {
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for `{}`", model.store.name(id))));
        }
        out[id.index()] = Some(g);
    }
    Ok(SampleLoss {
        l1: l1v,
        l2: l2v,
        total: tv,
        grads: out,
    })
}

/// Where training writes checkpoints and curves.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<LossRow>,
    pub steps: usize,
}

/// Total optimizer steps for `n` samples.
pub fn total_steps(cfg: &crate::Config, n: usize) -> usize {
    if cfg.max_steps > 0 {
        cfg.max_steps
    } else {
        cfg.epochs * n.div_ceil(cfg.batch_size)
    }
}

/// Learning rate at `step` of `total`, linear from `lr_start` to `lr_end`.
pub fn learning_rate(cfg: &crate::Config, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return cfg.lr_start;
    }
    cfg.lr_start + (cfg.lr_end - cfg.lr_start) * step as f64 / (total - 1) as f64
}

fn dump_sample(dir: &Path, rec: &SampleRecord, err: &Error) {
    let d = dir.join("nan_dump");
    if std::fs::create_dir_all(&d).is_err() {
        return;
    }
    let bytes = |m: &skyalign_tensor::FeatureMap| imageio::unit_to_bytes(&m.data);
    let _ = imageio::write_pgm(d.join("ground.pgm"), rec.ground.width, rec.ground.height, &bytes(&rec.ground));
    let _ = imageio::write_pgm(d.join("satellite.pgm"), rec.satellite.width, rec.satellite.height, &bytes(&rec.satellite));
    let _ = std::fs::write(
        d.join("info.txt"),
        format!(
            "error: {err}\nscene_seed: {}\ngt: {:?}\nprior: {:?}\n",
            rec.scene_seed, rec.gt, rec.prior
        ),
    );
}

/// Trains `model` on `data`. Gradients of a batch are summed in sample order
/// and averaged, so runs are reproducible for a fixed seed. A checkpoint is
/// written after every epoch and the loss curve at the end.
pub fn train(
    model: &mut Model,
    data: &[SampleRecord],
    out: &TrainOutput,
    mut on_step: impl FnMut(&LossRow),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let cfg = model.cfg.clone();
    let schedule = RefineSchedule::from_config(&cfg);
    let total = total_steps(&cfg, data.len());
    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut losses = Vec::with_capacity(total);
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
            let (mut l1, mut l2, mut tot) = (0.0, 0.0, 0.0);
            for &i in batch {
                let s = match sample_loss(model, &data[i], &schedule) {
                    Ok(s) => s,
                    Err(e) => {
                        if let (true, Some(dir)) = (e.is_numeric(), &out.dir) {
                            dump_sample(dir, &data[i], &e);
                        }
                        return Err(e);
                    }
                };
                l1 += s.l1;
                l2 += s.l2;
                tot += s.total;
                for (a, g) in acc.iter_mut().zip(s.grads) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *a = Some(g),
                        _ => {}
                    }
                }
            }
            let k = 1.0 / batch.len() as f64;
            for g in acc.iter_mut().flatten() {
                for x in g.data_mut() {
                    *x *= k;
                }
            }
            adam.step(&mut model.store, &acc, learning_rate(&cfg, step, total));
            let (lam1, lam2) = model.lambdas();
            let row = LossRow {
                step,
                l1: l1 * k,
                l2: l2 * k,
                lambda1: lam1,
                lambda2: lam2,
                total: tot * k,
            };
            on_step(&row);
            losses.push(row);
            step += 1;
        }
        epoch += 1;
        if let Some(dir) = &out.dir {
            model.save(dir.join(format!("epoch_{epoch:03}")))?;
        }
    }
    if let Some(dir) = &out.dir {
        model.save(dir.join("final"))?;
        write_losses(dir.join("loss.csv"), &losses)?;
    }
    Ok(TrainReport { losses, steps: step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_gives_ln2() {
        for literal in [false, true] {
            let v = loss_location_value(&[0.3; 25], 7, 10.0, literal).unwrap();
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_ground_truth_gives_small_loss() {
        let mut p = vec![0.0; 9];
        p[4] = 1.0;
        let v = loss_location_value(&p, 4, 10.0, false).unwrap();
        assert!((v - (1.0 + (-10.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn total_at_zero_losses() {
        assert_eq!(loss_total_value(0.0, 0.0, -5.0, -3.0), -8.0);
    }

    #[test]
    fn pose_loss_single_entry() {
        let gt = Pose3DoF::from_degrees(10.0, 1.0, 2.0);
        let p = Pose3DoF::from_degrees(11.0, 2.0, 1.0);
        assert!((loss_pose_value(&[p], &gt, true).unwrap() - 3.0).abs() < 1e-12);
        assert!((loss_pose_value(&[p], &gt, false).unwrap() - 1.0).abs() < 1e-12);
        assert!(loss_pose_value(&[], &gt, true).is_err());
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = crate::Config::default();
        assert_eq!(learning_rate(&cfg, 0, 100), 1e-4);
        assert!((learning_rate(&cfg, 99, 100) - 1e-5).abs() < 1e-18);
    }
}
