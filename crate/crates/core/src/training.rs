//! Regularized training: Adam, learning-rate schedules, path-norm and L2
//! regularizers, the pruning schedule and grid search over λ.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::architectures::{
    init_network, EffectiveWeights, NetSpec, Network, OutNonlinearity, ParamRole,
};
use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::linalg::{seeded_rng, Matrix};
use crate::metrics::network_sparsity;
use crate::pathnorm::{network_closed_form_grad, network_improved_grad, network_naive_grad};

/// The λ grid searched by default.
pub const DEFAULT_LAMBDAS: [f64; 13] = [
    5e-5, 1e-4, 2.5e-4, 5e-4, 1e-3, 2.5e-3, 5e-3, 1e-2, 2.5e-2, 5e-2, 1e-1, 2.5e-1, 5e-1,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Linear `lo → hi` over `warm_frac`, constant for `hold_frac`, then
    /// linear `hi → lo` over the rest.
    WarmHoldDecay {
        lo: f64,
        hi: f64,
        warm_frac: f64,
        hold_frac: f64,
    },
    /// Linear `init → max` over `peak_frac`, then linear `max → final_lr`.
    OneCycle {
        init: f64,
        max: f64,
        final_lr: f64,
        peak_frac: f64,
    },
    Constant {
        lr: f64,
    },
}

impl LrSchedule {
    pub fn warm_hold_decay_default() -> Self {
        LrSchedule::WarmHoldDecay {
            lo: 1e-4,
            hi: 2e-3,
            warm_frac: 0.05,
            hold_frac: 0.45,
        }
    }

    pub fn one_cycle_default() -> Self {
        LrSchedule::OneCycle {
            init: 1e-4,
            max: 2e-2,
            final_lr: 1e-5,
            peak_frac: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::WarmHoldDecay {
                lo,
                hi,
                warm_frac,
                hold_frac,
            } => {
                lo > 0.0
                    && hi > 0.0
                    && warm_frac >= 0.0
                    && hold_frac >= 0.0
                    && warm_frac + hold_frac <= 1.0
            }
            LrSchedule::OneCycle {
                init,
                max,
                final_lr,
                peak_frac,
            } => init > 0.0 && max > 0.0 && final_lr > 0.0 && (0.0..=1.0).contains(&peak_frac),
            LrSchedule::Constant { lr } => lr > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid learning-rate schedule {self:?}"
            )))
        }
    }

    /// Learning rate at `step` of a `total`-step run; `step = total` gives the
    /// end point of the schedule.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let t = if total == 0 {
            0.0
        } else {
            step as f64 / total as f64
        };
        let lerp = |a: f64, b: f64, u: f64| a + (b - a) * u.clamp(0.0, 1.0);
        match *self {
            LrSchedule::WarmHoldDecay {
                lo,
                hi,
                warm_frac,
                hold_frac,
            } => {
                let hold_end = warm_frac + hold_frac;
                if t < warm_frac {
                    lerp(lo, hi, t / warm_frac)
                } else if t <= hold_end {
                    hi
                } else {
                    lerp(hi, lo, (t - hold_end) / (1.0 - hold_end))
                }
            }
            LrSchedule::OneCycle {
                init,
                max,
                final_lr,
                peak_frac,
            } => {
                if t < peak_frac {
                    lerp(init, max, t / peak_frac)
                } else {
                    lerp(max, final_lr, (t - peak_frac) / (1.0 - peak_frac))
                }
            }
            LrSchedule::Constant { lr } => lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regularizer {
    None,
    /// `λ Σ ‖w‖₂²` over effective weight rows.
    L2wr {
        lambda: f64,
    },
    /// Product of lengths; PSiLON networks only.
    PathNormClosedForm {
        lambda: f64,
    },
    /// Naive 1-path-norm (skip and weight paths distinct for residual networks).
    PathNormNaive {
        lambda: f64,
    },
    /// Improved CReLU bound; residual networks only.
    PathNormImproved {
        lambda: f64,
    },
}

impl Regularizer {
    pub fn lambda(&self) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::L2wr { lambda }
            | Regularizer::PathNormClosedForm { lambda }
            | Regularizer::PathNormNaive { lambda }
            | Regularizer::PathNormImproved { lambda } => lambda,
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Regularizer {
        match self {
            Regularizer::None => Regularizer::None,
            Regularizer::L2wr { .. } => Regularizer::L2wr { lambda },
            Regularizer::PathNormClosedForm { .. } => Regularizer::PathNormClosedForm { lambda },
            Regularizer::PathNormNaive { .. } => Regularizer::PathNormNaive { lambda },
            Regularizer::PathNormImproved { .. } => Regularizer::PathNormImproved { lambda },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    /// On logits: binary for one output, softmax otherwise.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneWindow {
    pub start: usize,
    pub end: usize,
}

/// 0 before the window, linear across it, 1 from its end on.
pub fn prune_alpha(step: usize, window: &PruneWindow) -> f64 {
    if step <= window.start {
        0.0
    } else if step >= window.end {
        1.0
    } else {
        (step - window.start) as f64 / (window.end - window.start) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub steps: usize,
    /// Used to size mini-batches when `batch_size` is 0.
    #[serde(default = "default_batches")]
    pub batches_per_epoch: usize,
    #[serde(default)]
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub regularizer: Regularizer,
    pub loss: LossKind,
    #[serde(default)]
    pub prune_window: Option<PruneWindow>,
    pub seed: u64,
    /// Fills the `wall_ms` column; off by default so logs are reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_batches() -> usize {
    10
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        self.lr_schedule.validate()?;
        let lambda = self.regularizer.lambda();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!(
                "λ must be a non-negative number, got {lambda}"
            )));
        }
        if self.batch_size == 0 && self.batches_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size or batches_per_epoch must be positive".into(),
            ));
        }
        if let Some(w) = self.prune_window {
            if w.start >= w.end || w.end > self.steps {
                return Err(Error::Config(format!(
                    "prune window {}..{} must be non-empty and within 0..{}",
                    w.start, w.end, self.steps
                )));
            }
        }
        Ok(())
    }

    fn resolved_batch_size(&self, n: usize) -> usize {
        let b = if self.batch_size > 0 {
            self.batch_size
        } else {
            n.div_ceil(self.batches_per_epoch)
        };
        b.clamp(1, n.max(1))
    }
}

/// Standard Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("Adam::step", self.m.len(), grads.len()));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_loss(net: &Network, targets: &Targets, loss: LossKind) -> Result<()> {
    match (loss, targets) {
        (LossKind::Mse, Targets::Regression(_)) => Ok(()),
        (LossKind::CrossEntropy, Targets::Classes(_)) => {
            if net.out_nonlinearity != OutNonlinearity::Identity {
                return Err(Error::Config(
                    "cross-entropy is computed on logits; use the identity output".into(),
                ));
            }
            Ok(())
        }
        _ => Err(Error::Config(format!(
            "{loss:?} loss does not match the targets"
        ))),
    }
}

/// Mean loss of `output` against `targets` and its gradient with respect to `output`.
pub fn data_loss(output: &Matrix, targets: &Targets, loss: LossKind) -> Result<(f64, Matrix)> {
    let (n, k) = output.shape();
    if targets.len() != n {
        return Err(Error::dim("data_loss", n, targets.len()));
    }
    if n == 0 {
        return Err(Error::EmptyDataset("loss batch".into()));
    }
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    match (loss, targets) {
        (LossKind::Mse, Targets::Regression(y)) => {
            if k != 1 {
                return Err(Error::dim("mse output", 1, k));
            }
            for i in 0..n {
                let r = output[(i, 0)] - y[i];
                total += r * r;
                grad[(i, 0)] = 2.0 * r / n as f64;
            }
        }
        (LossKind::CrossEntropy, Targets::Classes(y)) if k == 1 => {
            for i in 0..n {
                let z = output[(i, 0)];
                let t = y[i] as f64;
                if y[i] > 1 {
                    return Err(Error::Config(format!("binary output but class {}", y[i])));
                }
                total += softplus(z) - t * z;
                grad[(i, 0)] = (sigmoid(z) - t) / n as f64;
            }
        }
        (LossKind::CrossEntropy, Targets::Classes(y)) => {
            for i in 0..n {
                let row = output.row(i);
                if y[i] >= k {
                    return Err(Error::Config(format!("{k} outputs but class {}", y[i])));
                }
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|z| (z - m).exp()).sum();
                let lse = m + sum.ln();
                total += lse - row[y[i]];
                for j in 0..k {
                    let p = (row[j] - lse).exp();
                    grad[(i, j)] = (p - f64::from(u8::from(j == y[i]))) / n as f64;
                }
            }
        }
        _ => {
            return Err(Error::Config(format!(
                "{loss:?} loss does not match the targets"
            )))
        }
    }
    Ok((total / n as f64, grad))
}

/// Value of the (unscaled) regularizer and, when `want_grad` is set, its
/// gradient in [`Network::params`] order.
pub fn regularizer_value(
    net: &Network,
    reg: &Regularizer,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let eff_grad = |value: f64, grads: EffectiveWeights| -> Result<(f64, Option<Vec<f64>>)> {
        if !want_grad {
            return Ok((value, None));
        }
        let biases = net.zero_bias_grads();
        let g = net.pullback(&crate::architectures::EffectiveGrads {
            weights: grads,
            biases,
        })?;
        Ok((value, Some(g)))
    };
    match reg {
        Regularizer::None => Ok((0.0, want_grad.then(|| vec![0.0; net.num_params()]))),
        Regularizer::L2wr { .. } => {
            let eff = net.effective_weights()?;
            let value = eff.matrices().iter().map(|w| w.frobenius_sq()).sum();
            let mut g = eff.clone();
            for (dst, src) in g.matrices_mut().into_iter().zip(eff.matrices()) {
                *dst = src.scale(2.0);
            }
            eff_grad(value, g)
        }
        Regularizer::PathNormNaive { .. } => {
            let (v, g) = network_naive_grad(net)?;
            eff_grad(v, g)
        }
        Regularizer::PathNormImproved { .. } => {
            let (v, g) = network_improved_grad(net)?;
            eff_grad(v, g)
        }
        Regularizer::PathNormClosedForm { .. } => {
            let (v, layer_grads) = network_closed_form_grad(net)?;
            if !want_grad {
                return Ok((v, None));
            }
            let mut flat = vec![0.0; net.num_params()];
            let mut offsets = vec![0usize; layer_grads.len()];
            let nlayers = net.num_layers();
            for (i, k) in net.param_kinds().iter().enumerate() {
                if k.role == ParamRole::Length {
                    let frozen = net.freeze_interior_lengths && k.layer + 1 < nlayers;
                    if !frozen {
                        flat[i] = layer_grads[k.layer].values()[offsets[k.layer]];
                    }
                    offsets[k.layer] += 1;
                }
            }
            Ok((v, Some(flat)))
        }
    }
}

/// Data loss and regularizer value with the gradient of `data + λ·R`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub data_loss: f64,
    pub reg_value: f64,
    pub grad: Vec<f64>,
}

impl Objective {
    pub fn total(&self, lambda: f64) -> f64 {
        self.data_loss + lambda * self.reg_value
    }
}

pub fn regularized_loss(
    net: &Network,
    batch: &Dataset,
    loss: LossKind,
    reg: &Regularizer,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("training batch".into()));
    }
    check_loss(net, &batch.targets, loss)?;
    let trace = net.forward_batch(&batch.features)?;
    let (value, dout) = data_loss(&trace.output, &batch.targets, loss)?;
    let mut eg = net.backward_effective(&trace, &dout)?;
    let lambda = reg.lambda();
    let mut extra: Option<Vec<f64>> = None;
    let reg_value = match reg {
        Regularizer::None => 0.0,
        Regularizer::L2wr { .. } => {
            let eff = &trace.effective;
            let mut scaled = eff.clone();
            for (dst, src) in scaled.matrices_mut().into_iter().zip(eff.matrices()) {
                *dst = src.scale(2.0 * lambda);
            }
            eg.weights.add_assign(&scaled)?;
            eff.matrices().iter().map(|w| w.frobenius_sq()).sum()
        }
        Regularizer::PathNormNaive { .. } | Regularizer::PathNormImproved { .. } => {
            let (v, g) = match reg {
                Regularizer::PathNormNaive { .. } => network_naive_grad(net)?,
                _ => network_improved_grad(net)?,
            };
            let mut g = g;
            for m in g.matrices_mut() {
                *m = m.scale(lambda);
            }
            eg.weights.add_assign(&g)?;
            v
        }
        Regularizer::PathNormClosedForm { .. } => {
            let (v, g) = regularizer_value(net, reg, true)?;
            extra = g;
            v
        }
    };
    let mut grad = net.pullback(&eg)?;
    if let Some(extra) = extra {
        for (a, b) in grad.iter_mut().zip(extra) {
            *a += lambda * b;
        }
    }
    Ok(Objective {
        data_loss: value,
        reg_value,
        grad,
    })
}

/// Mean data loss of `net` on a whole dataset.
pub fn evaluate_loss(net: &Network, ds: &Dataset, loss: LossKind) -> Result<f64> {
    check_loss(net, &ds.targets, loss)?;
    let out = net.predict(&ds.features)?;
    Ok(data_loss(&out, &ds.targets, loss)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub loss: f64,
    /// Regression only, in standardized target units.
    pub rmse: Option<f64>,
    /// Regression only, in raw target units.
    pub rmse_raw: Option<f64>,
    pub cross_entropy: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn evaluate(net: &Network, ds: &Dataset) -> Result<EvalReport> {
    let out = net.predict(&ds.features)?;
    let n = ds.len();
    match &ds.targets {
        Targets::Regression(_) => {
            let (mse, _) = data_loss(&out, &ds.targets, LossKind::Mse)?;
            let rmse = mse.sqrt();
            let rmse_raw = ds.standardization.as_ref().and_then(|s| s.target).map(|t| {
                if t.constant {
                    rmse
                } else {
                    rmse * t.quartile_deviation
                }
            });
            Ok(EvalReport {
                n,
                loss: mse,
                rmse: Some(rmse),
                rmse_raw,
                cross_entropy: None,
                accuracy: None,
            })
        }
        Targets::Classes(y) => {
            let (ce, _) = data_loss(&out, &ds.targets, LossKind::CrossEntropy)?;
            let correct = (0..n)
                .filter(|&i| {
                    let row = out.row(i);
                    let pred = if row.len() == 1 {
                        usize::from(row[0] > 0.0)
                    } else {
                        (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                    };
                    pred == y[i]
                })
                .count();
            Ok(EvalReport {
                n,
                loss: ce,
                rmse: None,
                rmse_raw: None,
                cross_entropy: Some(ce),
                accuracy: Some(correct as f64 / n as f64),
            })
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub reg_value: f64,
    pub lr: f64,
    pub alpha: f64,
    pub network_nsparsity: f64,
    pub wall_ms: u64,
}

pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "step",
            "train_loss",
            "val_loss",
            "reg_value",
            "lr",
            "alpha",
            "network_nsparsity",
            "wall_ms",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub net: Network,
    pub rows: Vec<MetricsRow>,
    pub optimizer: Adam,
    /// Set when a non-finite loss or gradient stopped the run; the last row
    /// of `rows` is the diagnostic row for that step.
    pub divergence: Option<Divergence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

impl Divergence {
    pub fn to_error(&self) -> Error {
        Error::Divergence {
            step: self.step,
            reason: self.reason.clone(),
        }
    }
}

impl TrainResult {
    pub fn final_val_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.val_loss)
    }

    pub fn min_val_loss(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Runs `plan.steps` Adam updates on shuffled mini-batches of `train`.
///
/// Mini-batches are drawn without replacement and reshuffled every epoch.
/// A metrics row is recorded at the end of every epoch and after the final
/// step. With a prune window, every L1-normalized layer is switched to
/// `Blend(α)` with α following [`prune_alpha`].
pub fn train(
    mut net: Network,
    train: &Dataset,
    val: &Dataset,
    plan: &TrainPlan,
) -> Result<TrainResult> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation split".into()));
    }
    check_loss(&net, &train.targets, plan.loss)?;
    check_loss(&net, &val.targets, plan.loss)?;
    // Regularizer/architecture mismatches surface before any compute.
    regularizer_value(&net, &plan.regularizer, false)?;

    let start = Instant::now();
    let wall = |plan: &TrainPlan| {
        if plan.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    };
    let n = train.len();
    let batch = plan.resolved_batch_size(n);
    let mut rng = seeded_rng(plan.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut epoch_loss = 0.0;
    let mut epoch_batches = 0usize;
    let mut adam = Adam::new(net.num_params());
    let mut params = net.params();
    let mut rows = Vec::new();
    let alpha_at = |s: usize| {
        plan.prune_window
            .as_ref()
            .map_or(0.0, |w| prune_alpha(s, w))
    };

    for step in 0..plan.steps {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + batch).min(n)];
        cursor += idx.len();
        let alpha = alpha_at(step);
        if plan.prune_window.is_some() && alpha > 0.0 {
            net.install_blend(alpha);
        }
        let lr = plan.lr_schedule.lr_at(step, plan.steps);
        let obj = regularized_loss(&net, &train.subset(idx), plan.loss, &plan.regularizer)?;
        if !obj.data_loss.is_finite()
            || !obj.reg_value.is_finite()
            || obj.grad.iter().any(|g| !g.is_finite())
        {
            rows.push(MetricsRow {
                step,
                train_loss: obj.data_loss,
                val_loss: f64::NAN,
                reg_value: obj.reg_value,
                lr,
                alpha,
                network_nsparsity: f64::NAN,
                wall_ms: wall(plan),
            });
            let reason = if obj.data_loss.is_finite() {
                "non-finite gradient"
            } else {
                "non-finite loss"
            };
            return Ok(TrainResult {
                net,
                rows,
                optimizer: adam,
                divergence: Some(Divergence {
                    step,
                    reason: reason.into(),
                }),
            });
        }
        epoch_loss += obj.data_loss;
        epoch_batches += 1;
        adam.step(&mut params, &obj.grad, lr)?;
        net.set_params(&params)?;

        let done = step + 1;
        if plan.prune_window.is_some() && alpha_at(done) > 0.0 {
            net.install_blend(alpha_at(done));
        }
        if cursor >= n || done == plan.steps {
            let val_loss = evaluate_loss(&net, val, plan.loss)?;
            let (reg_value, _) = regularizer_value(&net, &plan.regularizer, false)?;
            rows.push(MetricsRow {
                step: done,
                train_loss: epoch_loss / epoch_batches as f64,
                val_loss,
                reg_value,
                lr: plan.lr_schedule.lr_at(done, plan.steps),
                alpha: alpha_at(done),
                network_nsparsity: network_sparsity(&net)?.network_nsparsity,
                wall_ms: wall(plan),
            });
            epoch_loss = 0.0;
            epoch_batches = 0;
            if !val_loss.is_finite() {
                return Ok(TrainResult {
                    net,
                    rows,
                    optimizer: adam,
                    divergence: Some(Divergence {
                        step: done,
                        reason: "non-finite validation loss".into(),
                    }),
                });
            }
        }
    }
    Ok(TrainResult {
        net,
        rows,
        optimizer: adam,
        divergence: None,
    })
}

/// Outcome of one λ of a grid search.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub lambda: f64,
    pub final_val_loss: f64,
    pub min_val_loss: f64,
    pub final_reg_value: f64,
    pub result: TrainResult,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best_lambda: f64,
    pub best_index: usize,
    pub cells: Vec<GridCell>,
}

/// Trains one model per λ from the same initialization (drawn with
/// `init_seed`) and picks the smallest final validation loss. Cells run on
/// the current rayon pool when `parallel` is set; results do not depend on it.
pub fn grid_search(
    spec: &NetSpec,
    init_seed: u64,
    train_ds: &Dataset,
    val: &Dataset,
    template: &TrainPlan,
    lambdas: &[f64],
    parallel: bool,
) -> Result<GridResult> {
    if lambdas.is_empty() {
        return Err(Error::Config("grid search needs at least one λ".into()));
    }
    let init = init_network(spec, &mut seeded_rng(init_seed))?;
    let run = |&lambda: &f64| -> Result<GridCell> {
        let plan = TrainPlan {
            regularizer: template.regularizer.with_lambda(lambda),
            ..template.clone()
        };
        let result = train(init.clone(), train_ds, val, &plan)?;
        let final_val_loss = if result.divergence.is_some() {
            f64::INFINITY
        } else {
            result.final_val_loss()
        };
        Ok(GridCell {
            lambda,
            final_val_loss,
            min_val_loss: result.min_val_loss(),
            final_reg_value: result.rows.last().map_or(f64::NAN, |r| r.reg_value),
            result,
        })
    };
    let cells: Vec<GridCell> = if parallel {
        lambdas.par_iter().map(run).collect::<Result<_>>()?
    } else {
        lambdas.iter().map(run).collect::<Result<_>>()?
    };
    let best_index = (0..cells.len())
        .min_by(|&a, &b| cells[a].final_val_loss.total_cmp(&cells[b].final_val_loss))
        .expect("non-empty grid");
    Ok(GridResult {
        best_lambda: cells[best_index].lambda,
        best_index,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::NetSpec;
    use crate::data::{synth_task, SynthKind, Task};
    use crate::linalg::{l1_norm, standard_normal};
    use crate::normalization::NormMode;

    #[test]
    fn warm_hold_decay_points() {
        let s = LrSchedule::warm_hold_decay_default();
        assert!((s.lr_at(0, 1000) - 1e-4).abs() < 1e-15);
        assert!((s.lr_at(250, 1000) - 2e-3).abs() < 1e-15);
        assert!((s.lr_at(1000, 1000) - 1e-4).abs() < 1e-15);
        assert!((s.lr_at(25, 1000) - (1e-4 + 0.5 * 1.9e-3)).abs() < 1e-15);
    }

    #[test]
    fn one_cycle_points() {
        let s = LrSchedule::one_cycle_default();
        assert!((s.lr_at(0, 100) - 1e-4).abs() < 1e-15);
        assert!((s.lr_at(20, 100) - 2e-2).abs() < 1e-15);
        assert!((s.lr_at(100, 100) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn prune_alpha_points() {
        let w = PruneWindow {
            start: 4000,
            end: 5000,
        };
        assert_eq!(prune_alpha(100, &w), 0.0);
        assert_eq!(prune_alpha(4500, &w), 0.5);
        assert_eq!(prune_alpha(5000, &w), 1.0);
        assert_eq!(prune_alpha(6000, &w), 1.0);
    }

    #[test]
    fn adam_examples() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);

        let mut adam = Adam::new(3);
        let mut p = vec![0.0; 3];
        adam.step(&mut p, &[3.0, -0.01, 0.0], 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8);
        assert!((p[1] - 0.1).abs() < 1e-5);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = seeded_rng(0);
        let mut out = Matrix::zeros(4, 3);
        for v in out.data_mut() {
            *v = standard_normal(&mut rng);
        }
        let cases = [
            (
                Targets::Classes(vec![0, 2, 1, 2]),
                LossKind::CrossEntropy,
                3,
            ),
            (
                Targets::Classes(vec![0, 1, 1, 0]),
                LossKind::CrossEntropy,
                1,
            ),
            (
                Targets::Regression(vec![0.1, -0.3, 2.0, 0.0]),
                LossKind::Mse,
                1,
            ),
        ];
        for (targets, loss, k) in cases {
            let o = Matrix::from_vec(4, k, out.data()[..4 * k].to_vec()).unwrap();
            let (_, g) = data_loss(&o, &targets, loss).unwrap();
            for i in 0..o.data().len() {
                let mut a = o.clone();
                a.data_mut()[i] += 1e-6;
                let mut b = o.clone();
                b.data_mut()[i] -= 1e-6;
                let fd = (data_loss(&a, &targets, loss).unwrap().0
                    - data_loss(&b, &targets, loss).unwrap().0)
                    / 2e-6;
                assert!((fd - g.data()[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn constant_logit_cross_entropy_is_ln2() {
        let out = Matrix::zeros(4, 1);
        let (ce, _) = data_loss(
            &out,
            &Targets::Classes(vec![0, 1, 0, 1]),
            LossKind::CrossEntropy,
        )
        .unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn teacher() -> (Dataset, Dataset) {
        let ds = synth_task(SynthKind::SparseTeacher { k_active: 2 }, 120, 5, 0.1, 1).unwrap();
        let (a, b, _) = crate::data::split_standardized(
            &ds,
            &crate::data::SplitSpec {
                train_n: 80,
                val_frac_of_rest: 0.5,
                seed: 0,
            },
        )
        .unwrap();
        (a, b)
    }

    #[test]
    fn closed_form_regularizer_touches_only_lengths() {
        let (train_ds, _) = teacher();
        let net = init_network(&NetSpec::psilon_mlp(5, 6, 2, 1), &mut seeded_rng(0)).unwrap();
        let base = regularized_loss(&net, &train_ds, LossKind::Mse, &Regularizer::None).unwrap();
        let reg = regularized_loss(
            &net,
            &train_ds,
            LossKind::Mse,
            &Regularizer::PathNormClosedForm { lambda: 0.3 },
        )
        .unwrap();
        for ((a, b), k) in base.grad.iter().zip(&reg.grad).zip(net.param_kinds()) {
            if k.role != ParamRole::Length {
                assert_eq!(a, b);
            }
        }
        assert!(base.grad.iter().zip(&reg.grad).any(|(a, b)| a != b));
    }

    #[test]
    fn regularizer_mismatches_are_config_errors() {
        let (train_ds, val) = teacher();
        let net = init_network(&NetSpec::psilon_mlp(5, 6, 2, 1), &mut seeded_rng(0)).unwrap();
        let plan = TrainPlan {
            steps: 5,
            batches_per_epoch: 4,
            batch_size: 0,
            lr_schedule: LrSchedule::Constant { lr: 1e-3 },
            regularizer: Regularizer::PathNormImproved { lambda: 0.1 },
            loss: LossKind::Mse,
            prune_window: None,
            seed: 0,
            record_wall_time: false,
        };
        assert!(matches!(
            train(net.clone(), &train_ds, &val, &plan),
            Err(Error::Config(_))
        ));
        let snet = init_network(&NetSpec::snet_mlp(5, 6, 2, 1), &mut seeded_rng(0)).unwrap();
        let plan = TrainPlan {
            regularizer: Regularizer::PathNormClosedForm { lambda: 0.1 },
            ..plan
        };
        assert!(matches!(
            train(snet, &train_ds, &val, &plan),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_steps_leave_net_unchanged() {
        let (train_ds, val) = teacher();
        let net = init_network(&NetSpec::psilon_mlp(5, 6, 2, 1), &mut seeded_rng(0)).unwrap();
        let plan = TrainPlan {
            steps: 0,
            batches_per_epoch: 4,
            batch_size: 0,
            lr_schedule: LrSchedule::Constant { lr: 1e-3 },
            regularizer: Regularizer::None,
            loss: LossKind::Mse,
            prune_window: None,
            seed: 0,
            record_wall_time: false,
        };
        let r = train(net.clone(), &train_ds, &val, &plan).unwrap();
        assert_eq!(r.net, net);
        assert!(r.rows.is_empty());
    }

    #[test]
    fn pruning_reaches_exact_sparsity() {
        let (train_ds, val) = teacher();
        let net = init_network(&NetSpec::psilon_mlp(5, 16, 2, 1), &mut seeded_rng(0)).unwrap();
        let plan = TrainPlan {
            steps: 300,
            batches_per_epoch: 4,
            batch_size: 0,
            lr_schedule: LrSchedule::warm_hold_decay_default(),
            regularizer: Regularizer::PathNormClosedForm { lambda: 1e-3 },
            loss: LossKind::Mse,
            prune_window: Some(PruneWindow {
                start: 200,
                end: 300,
            }),
            seed: 0,
            record_wall_time: false,
        };
        let r = train(net, &train_ds, &val, &plan).unwrap();
        assert!(r.divergence.is_none());
        assert!(r
            .net
            .modes()
            .iter()
            .all(|m| *m == NormMode::Blend { alpha: 1.0 }));
        let report = network_sparsity(&r.net).unwrap();
        assert!(report.exact_sparsity > 0.0);
        let lengths = r.net.lengths();
        for (w, l) in r
            .net
            .effective_weights()
            .unwrap()
            .matrices()
            .iter()
            .zip(lengths)
        {
            for (row, ri) in w.row_iter().zip(0..) {
                assert!((l1_norm(row) - l.get(ri).abs()).abs() < 1e-9 * (1.0 + l.get(ri).abs()));
            }
        }
        let last = r.rows.last().unwrap();
        assert_eq!(last.step, 300);
        assert_eq!(last.alpha, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let (train_ds, val) = teacher();
        let net = init_network(&NetSpec::psilon_mlp(5, 8, 2, 1), &mut seeded_rng(0)).unwrap();
        let plan = TrainPlan {
            steps: 40,
            batches_per_epoch: 4,
            batch_size: 0,
            lr_schedule: LrSchedule::warm_hold_decay_default(),
            regularizer: Regularizer::PathNormClosedForm { lambda: 1e-3 },
            loss: LossKind::Mse,
            prune_window: None,
            seed: 5,
            record_wall_time: false,
        };
        let a = train(net.clone(), &train_ds, &val, &plan).unwrap();
        let b = train(net, &train_ds, &val, &plan).unwrap();
        assert_eq!(a.rows, b.rows);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_metrics_csv(&a.rows, &mut ca).unwrap();
        write_metrics_csv(&b.rows, &mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.rows.len(), 10);
    }

    #[test]
    fn separable_task_reaches_low_cross_entropy() {
        let ds = synth_task(SynthKind::TwoGaussians, 400, 4, 0.0, 3).unwrap();
        let (train_ds, val, _) = crate::data::split_standardized(
            &ds,
            &crate::data::SplitSpec {
                train_n: 200,
                val_frac_of_rest: 0.5,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(train_ds.task, Task::BinaryClass);
        let net = init_network(&NetSpec::psilon_mlp(4, 16, 2, 1), &mut seeded_rng(2)).unwrap();
        let plan = TrainPlan {
            steps: 500,
            batches_per_epoch: 4,
            batch_size: 0,
            lr_schedule: LrSchedule::warm_hold_decay_default(),
            regularizer: Regularizer::None,
            loss: LossKind::CrossEntropy,
            prune_window: None,
            seed: 0,
            record_wall_time: false,
        };
        let r = train(net, &train_ds, &val, &plan).unwrap();
        let ce = evaluate_loss(&r.net, &train_ds, LossKind::CrossEntropy).unwrap();
        assert!(ce < 0.1, "{ce}");
    }

    #[test]
    fn grid_search_single_lambda() {
        let (train_ds, val) = teacher();
        let plan = TrainPlan {
            steps: 20,
            batches_per_epoch: 4,
            batch_size: 0,
            lr_schedule: LrSchedule::warm_hold_decay_default(),
            regularizer: Regularizer::PathNormClosedForm { lambda: 0.0 },
            loss: LossKind::Mse,
            prune_window: None,
            seed: 0,
            record_wall_time: false,
        };
        let spec = NetSpec::psilon_mlp(5, 8, 2, 1);
        let g = grid_search(&spec, 0, &train_ds, &val, &plan, &[2.5e-3], false).unwrap();
        assert_eq!(g.best_lambda, 2.5e-3);
        let p = grid_search(&spec, 0, &train_ds, &val, &plan, &[1e-3, 1e-1], true).unwrap();
        let s = grid_search(&spec, 0, &train_ds, &val, &plan, &[1e-3, 1e-1], false).unwrap();
        assert_eq!(p.best_lambda, s.best_lambda);
        for (a, b) in p.cells.iter().zip(&s.cells) {
            assert_eq!(a.result.rows, b.result.rows);
        }
    }

    #[test]
    fn default_grid_has_thirteen_values() {
        assert_eq!(DEFAULT_LAMBDAS.len(), 13);
        assert_eq!(DEFAULT_LAMBDAS[0], 5e-5);
        assert_eq!(DEFAULT_LAMBDAS[12], 5e-1);
    }
}
