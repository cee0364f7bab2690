//! Mini-batch SGD with momentum, weight decay, learning-rate milestones and a
//! scheduled loss; learning-rate sweeps with validation-based selection; and
//! the gradient-volume factor used to build a volume-matched CE baseline.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{BucketSnapshot, SampleRecord};
use crate::data::{Dataset, Splits};
use crate::error::{invalid, Error, Result};
use crate::losses::{LossSpec, MixWeights};
use crate::math::{softmax, RandomSource};
use crate::model::ClassifierModel;
use crate::schedule::{focus_of, schedule_at, ScheduleSpec};

/// Learning rates swept for each method when none are given.
pub const DEFAULT_LRS: [f64; 3] = [0.01, 0.005, 0.001];

/// What the trainer minimizes: a focus schedule over `alpha * CE + beta * EL`,
/// or one fixed loss. Serialized as `{"schedule": "f0..05"}` or
/// `{"loss": {"name": "focal"}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Schedule(ScheduleSpec),
    Loss(LossSpec),
}

/// Weights in effect during one epoch, as recorded in the report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochObjective {
    pub loss: LossSpec,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub focus: Option<f64>,
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match self {
            Objective::Schedule(s) => s.validate(),
            Objective::Loss(l) => {
                l.validate()?;
                if !l.has_gradient() {
                    return Err(Error::Unsupported(format!(
                        "cannot train with value-only loss {:?}",
                        l.name()
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn at(&self, epoch: usize, total_epochs: usize) -> Result<EpochObjective> {
        match self {
            Objective::Schedule(spec) => {
                let w = schedule_at(spec, epoch, total_epochs)?;
                Ok(EpochObjective {
                    loss: LossSpec::from(w.mix()),
                    alpha: Some(w.alpha),
                    beta: Some(w.beta),
                    focus: Some(w.focus),
                })
            }
            Objective::Loss(loss) => {
                let mix = loss.mix_weights();
                let focus = mix
                    .filter(|w| w.beta > 0.0)
                    .map(|w| focus_of(w).map(|f| f.focus))
                    .transpose()?;
                Ok(EpochObjective {
                    loss: *loss,
                    alpha: mix.map(|w| w.alpha),
                    beta: mix.map(|w| w.beta),
                    focus,
                })
            }
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Apply weight decay to biases as well as weights.
    #[serde(default = "yes")]
    pub decay_biases: bool,
    /// `(epoch, factor)`: from `epoch` on, the learning rate is multiplied by `factor`.
    #[serde(default)]
    pub lr_milestones: Vec<(usize, f64)>,
    pub objective: Objective,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub shuffle: bool,
    /// Epochs after which per-sample test probabilities are recorded.
    #[serde(default)]
    pub snapshot_epochs: Vec<usize>,
}

impl TrainConfig {
    pub fn new(objective: Objective, epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
            momentum: default_momentum(),
            weight_decay: 0.0,
            decay_biases: true,
            lr_milestones: Vec::new(),
            objective,
            seed: 0,
            shuffle: true,
            snapshot_epochs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.momentum.is_finite() && self.momentum >= 0.0) {
            return Err(invalid("momentum must be >= 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay must be >= 0"));
        }
        let mut prev = None;
        for &(epoch, factor) in &self.lr_milestones {
            if prev.is_some_and(|p| epoch <= p) || epoch >= self.epochs {
                return Err(invalid(
                    "milestone epochs must be strictly increasing and below the epoch count",
                ));
            }
            if !(factor.is_finite() && factor > 0.0) {
                return Err(invalid("milestone factors must be > 0"));
            }
            prev = Some(epoch);
        }
        if let Some(&e) = self.snapshot_epochs.iter().find(|&&e| e >= self.epochs) {
            return Err(invalid(format!("snapshot epoch {e} is never trained")));
        }
        self.objective.validate()
    }

    /// Base rate times every milestone factor whose epoch is `<= epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_milestones
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr, |lr, (_, f)| lr * f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub focus: Option<f64>,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub lr: f64,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Earliest epoch with the highest validation accuracy.
    pub best_val_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub test_accuracy_at_best: f64,
    pub final_model: ClassifierModel,
    pub snapshots: Vec<BucketSnapshot>,
    /// Set when training diverged; the epochs completed so far are kept.
    pub failure: Option<String>,
}

/// Compact per-run record persisted next to the epoch CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub lr: f64,
    pub seed: u64,
    pub epochs_completed: usize,
    pub best_val_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub test_accuracy_at_best: f64,
    pub failure: Option<String>,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            lr: self.lr,
            seed: self.seed,
            epochs_completed: self.epochs.len(),
            best_val_epoch: self.best_val_epoch,
            best_val_accuracy: self.best_val_accuracy,
            test_accuracy_at_best: self.test_accuracy_at_best,
            failure: self.failure.clone(),
        }
    }

    /// One row per epoch: `epoch,alpha,beta,F,train_loss,train_acc,val_acc,test_acc`.
    /// Weights that do not apply to the loss are left empty.
    pub fn write_epoch_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epoch",
            "alpha",
            "beta",
            "F",
            "train_loss",
            "train_acc",
            "val_acc",
            "test_acc",
        ])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                opt(r.alpha),
                opt(r.beta),
                opt(r.focus),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.val_acc.to_string(),
                r.test_acc.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_epoch_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_epoch_csv(std::fs::File::create(path)?)
    }
}

fn check_compatible(model: &ClassifierModel, d: &Dataset, which: &'static str) -> Result<()> {
    if d.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: which,
            expected: model.input_dim(),
            found: d.dim(),
        });
    }
    if d.classes() > model.classes() {
        return Err(invalid(format!(
            "{which} has {} classes, model only {}",
            d.classes(),
            model.classes()
        )));
    }
    Ok(())
}

enum Step {
    Ok(f64),
    Diverged(String),
}

/// Trains `model` in place of ownership and reports every epoch.
///
/// Per mini-batch: `v <- momentum * v + mean_grad + weight_decay * theta`,
/// then `theta <- theta - lr_e * v`. The final partial batch is used.
/// Shuffling for epoch `e` draws from `RandomSource::derive(seed, e)`.
/// A non-finite loss or parameter stops the run and marks the report failed.
pub fn train(mut model: ClassifierModel, splits: &Splits, cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    check_compatible(&model, &splits.train, "training set")?;
    check_compatible(&model, &splits.val, "validation set")?;
    check_compatible(&model, &splits.test, "test set")?;

    let decay_mask: Vec<f64> = {
        let mut mask = vec![1.0; model.param_count()];
        if !cfg.decay_biases {
            for layer in model.layers() {
                mask[layer.bias].fill(0.0);
            }
        }
        mask
    };
    let n = splits.train.len();
    let mut velocity = vec![0.0; model.param_count()];
    let mut grad = vec![0.0; model.param_count()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = RunReport {
        lr: cfg.lr,
        seed: cfg.seed,
        epochs: Vec::with_capacity(cfg.epochs),
        best_val_epoch: None,
        best_val_accuracy: 0.0,
        test_accuracy_at_best: 0.0,
        final_model: model.clone(),
        snapshots: Vec::new(),
        failure: None,
    };

    for epoch in 0..cfg.epochs {
        let objective = cfg.objective.at(epoch, cfg.epochs)?;
        if cfg.shuffle {
            order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
            RandomSource::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        }
        let lr = cfg.lr_at(epoch);

        let step = (|| -> Result<Step> {
            let mut loss_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                grad.fill(0.0);
                for &i in batch {
                    let (loss, g) =
                        match model.backward_loss(splits.train.row(i), splits.train.label(i), &objective.loss) {
                            Ok(v) => v,
                            Err(Error::NonFinite(what)) => return Ok(Step::Diverged(format!("non-finite {what}"))),
                            Err(e) => return Err(e),
                        };
                    if !loss.is_finite() {
                        return Ok(Step::Diverged(format!("non-finite loss at epoch {epoch}")));
                    }
                    loss_sum += loss;
                    for (acc, v) in grad.iter_mut().zip(g.as_slice()) {
                        *acc += v;
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                let params = model.params_mut();
                for k in 0..params.len() {
                    velocity[k] =
                        cfg.momentum * velocity[k] + grad[k] * scale + cfg.weight_decay * decay_mask[k] * params[k];
                    params[k] -= lr * velocity[k];
                }
                if params.iter().any(|v| !v.is_finite()) {
                    return Ok(Step::Diverged(format!("non-finite parameters at epoch {epoch}")));
                }
            }
            Ok(Step::Ok(loss_sum / n as f64))
        })()?;

        let train_loss = match step {
            Step::Ok(l) => l,
            Step::Diverged(msg) => {
                report.failure = Some(msg);
                break;
            }
        };
        let accs = (|| -> Result<(f64, f64, f64)> {
            Ok((
                model.accuracy(&splits.train)?,
                model.accuracy(&splits.val)?,
                model.accuracy(&splits.test)?,
            ))
        })();
        let (train_acc, val_acc, test_acc) = match accs {
            Ok(a) => a,
            Err(Error::NonFinite(what)) => {
                report.failure = Some(format!("non-finite {what} at epoch {epoch}"));
                break;
            }
            Err(e) => return Err(e),
        };

        if report.best_val_epoch.is_none() || val_acc > report.best_val_accuracy {
            report.best_val_epoch = Some(epoch);
            report.best_val_accuracy = val_acc;
            report.test_accuracy_at_best = test_acc;
        }
        if cfg.snapshot_epochs.contains(&epoch) {
            report
                .snapshots
                .push(probability_snapshot(&model, &splits.test, epoch)?);
        }
        report.epochs.push(EpochRecord {
            epoch,
            alpha: objective.alpha,
            beta: objective.beta,
            focus: objective.focus,
            lr,
            train_loss,
            train_acc,
            val_acc,
            test_acc,
        });
    }
    report.final_model = model;
    Ok(report)
}

/// Per-sample correctness and true-class probability; sample ids are row indices.
pub fn probability_snapshot(model: &ClassifierModel, data: &Dataset, epoch: usize) -> Result<BucketSnapshot> {
    let records = data
        .iter()
        .enumerate()
        .map(|(id, (x, y))| {
            let logits = model.forward(x)?;
            let p = softmax(&logits);
            Ok(SampleRecord {
                id,
                correct: crate::math::argmax(logits.as_slice()) == y,
                p_y: p.as_slice()[y],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    BucketSnapshot::new(epoch, records)
}

/// All runs of a learning-rate sweep and the index of the selected one.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub best_index: usize,
    pub reports: Vec<RunReport>,
}

impl SweepOutcome {
    pub fn best(&self) -> &RunReport {
        &self.reports[self.best_index]
    }
}

/// One training run per learning rate, each from a fresh `make_model()` and
/// the same seed. The winner has the highest validation accuracy at its best
/// epoch; ties go to the lower learning rate. Failed runs never win.
pub fn lr_sweep(
    make_model: impl Fn() -> Result<ClassifierModel>,
    splits: &Splits,
    template: &TrainConfig,
    lrs: &[f64],
) -> Result<SweepOutcome> {
    if lrs.is_empty() {
        return Err(Error::Empty("learning-rate list"));
    }
    let reports = lrs
        .iter()
        .map(|&lr| {
            let cfg = TrainConfig { lr, ..template.clone() };
            train(make_model()?, splits, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let best_index = reports
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.failed() && r.best_val_epoch.is_some())
        .max_by(|(i, a), (j, b)| {
            a.best_val_accuracy
                .total_cmp(&b.best_val_accuracy)
                .then(b.lr.total_cmp(&a.lr))
                .then(j.cmp(i))
        })
        .map(|(i, _)| i)
        .ok_or(Error::AllRunsFailed)?;
    Ok(SweepOutcome { best_index, reports })
}

/// Which logit-gradient component a volume integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeCase {
    /// `int_0^1 |beta p^2 + p (alpha - beta) - alpha| dp`
    Target,
    /// `int_0^1 int_0^1 |p_j (beta p_y + alpha)| dp_y dp_j`
    Nontarget,
}

const VOLUME_TOLERANCE: f64 = 1e-9;

/// Volume under the absolute logit gradient of `alpha * CE + beta * EL`.
pub fn gradient_volume(w: MixWeights, case: VolumeCase) -> f64 {
    let MixWeights { alpha, beta } = w;
    match case {
        VolumeCase::Target => adaptive_simpson(
            &|p: f64| (beta * p * p + p * (alpha - beta) - alpha).abs(),
            0.0,
            1.0,
            VOLUME_TOLERANCE,
        ),
        VolumeCase::Nontarget => adaptive_simpson(
            &|pj: f64| {
                adaptive_simpson(
                    &|py: f64| (pj * (beta * py + alpha)).abs(),
                    0.0,
                    1.0,
                    VOLUME_TOLERANCE * 0.1,
                )
            },
            0.0,
            1.0,
            VOLUME_TOLERANCE,
        ),
    }
}

/// Learning rate for CE scaled by `V(w) / V(CE)` over the target component.
pub fn volume_matched_ce_lr(base_lr: f64, w: MixWeights) -> Result<f64> {
    if !(base_lr.is_finite() && base_lr > 0.0) {
        return Err(invalid(format!("base learning rate must be > 0, got {base_lr}")));
    }
    let factor = gradient_volume(w, VolumeCase::Target) / gradient_volume(MixWeights::CE, VolumeCase::Target);
    Ok(base_lr * factor)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
