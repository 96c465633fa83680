//! Adam training loop with step-decayed learning rate and L2 on conv weights.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint;
use crate::data::{augment, batch_iter, sequential_batches, AugmentConfig, LabeledBatch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::{batch_cross_entropy, predictions, Mode};
use crate::params::{ParamKind, ParamMut};
use crate::scalar::Scalar;

/// Which weights receive the L2 penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L2Scope {
    /// Feature-map convolution kernels only.
    ConvWeights,
    /// Convolution kernels and the dense head.
    ConvAndDense,
}

impl L2Scope {
    pub fn covers(self, kind: ParamKind) -> bool {
        match self {
            L2Scope::ConvWeights => kind == ParamKind::ConvWeight,
            L2Scope::ConvAndDense => matches!(kind, ParamKind::ConvWeight | ParamKind::DenseWeight),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub l2: f64,
    pub l2_scope: L2Scope,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            decay: 0.94,
            decay_every: 2,
            epochs: 150,
            l2: 1e-4,
            l2_scope: L2Scope::ConvWeights,
            batch_size: 128,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr0", self.lr0), ("adam_eps", self.adam_eps)];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("{k} must be positive, got {v}")));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay_every and batch_size must be at least 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{k} must be in [0, 1), got {b}")));
            }
        }
        self.augment.validate()
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lr0={} decay={} decay_every={} epochs={} l2={} l2_scope={:?} batch_size={} seed={} beta1={} beta2={} \
             adam_eps={} flip_prob={} max_shift={} fill={:?}",
            self.lr0,
            self.decay,
            self.decay_every,
            self.epochs,
            self.l2,
            self.l2_scope,
            self.batch_size,
            self.seed,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.augment.flip_prob,
            self.augment.max_shift,
            self.augment.fill,
        )
    }
}

/// `lr0 · decay^floor(epoch / decay_every)`
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// First and second moments per parameter tensor plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![T::zero(); n], vec![T::zero(); n])).unzip();
        Self { m, v, t: 0 }
    }

    pub fn for_model(model: &Model<T>) -> Self {
        Self::new(model.named_params().iter().map(|(_, p)| p.data.len()))
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<T: Scalar>(
    params: &mut [ParamMut<'_, T>],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one, eps) = (T::one(), T::lit(cfg.adam_eps));
    let step = T::lit(lr / c1);
    let inv_c2 = T::lit(1.0 / c2);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.data.len() != g.len() || m.len() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: format!("{}", p.data.len()),
                got: format!("{}", g.len()),
            });
        }
        for (((w, &g), m), v) in p.data.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *w -= step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// `l2 · Σ w²` over the weights in scope.
pub fn l2_penalty<T: Scalar>(model: &Model<T>, cfg: &TrainConfig) -> f64 {
    model
        .named_params()
        .iter()
        .filter(|(_, p)| cfg.l2_scope.covers(p.kind))
        .map(|(_, p)| p.data.iter().map(|w| w.as_f64() * w.as_f64()).sum::<f64>())
        .sum::<f64>()
        * cfg.l2
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's training batches.
    pub train_loss: f64,
    /// `l2 · Σ w²` after the epoch, reported apart from the data loss.
    pub l2_penalty: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "epoch,lr,train_loss,train_acc,test_loss,test_acc,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.test_loss, self.test_acc, self.seconds
        )
    }
}

/// Hooks into the epoch loop.
pub trait TrainObserver<T> {
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _model: &Model<T>) -> Result<()> {
        Ok(())
    }

    /// Polled between batches; returning `true` ends training early.
    fn should_stop(&self) -> bool {
        false
    }
}

impl<T> TrainObserver<T> for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub interrupted: bool,
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &LabeledBatch<T>, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for batch in sequential_batches(data, batch_size) {
        let logits = model.infer(&batch.images)?;
        let (l, _) = batch_cross_entropy(&logits, &batch.labels)?;
        loss += l.as_f64() * batch.len() as f64;
        correct += count_correct(&logits, &batch.labels);
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

fn count_correct<T: Scalar>(logits: &crate::tensor::Tensor4<T>, labels: &[u8]) -> usize {
    predictions(logits).iter().zip(labels).filter(|(&p, &l)| p == l as usize).count()
}

/// Runs `cfg.epochs` epochs of augmented mini-batch Adam, evaluating on
/// `test` after each epoch.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train: &LabeledBatch<T>,
    test: &LabeledBatch<T>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Data("empty training set".into()));
    }
    let mut state = AdamState::for_model(model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let l2 = T::lit(2.0 * cfg.l2);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in batch_iter(train, cfg.batch_size, cfg.seed, epoch).enumerate() {
            if observer.should_stop() {
                return Ok(TrainOutcome {
                    history,
                    interrupted: true,
                });
            }
            let batch = augment(&batch, &cfg.augment, cfg.seed, epoch);
            let (logits, tape) = model.forward_with_tape(&batch.images, Mode::Train)?;
            let (loss, dlogits) = batch_cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let mut grads = model.backward(&tape, &dlogits)?;
            if cfg.l2 > 0.0 {
                for ((_, g), (_, p)) in grads.named_params_mut().into_iter().zip(model.named_params()) {
                    if cfg.l2_scope.covers(p.kind) {
                        for (g, &w) in g.data.iter_mut().zip(p.data) {
                            *g += l2 * w;
                        }
                    }
                }
            }
            model.commit_bn_stats(&tape);
            let grad_views = grads.named_params();
            let grad_slices: Vec<&[T]> = grad_views.iter().map(|(_, g)| g.data).collect();
            let mut params: Vec<ParamMut<'_, T>> = model.named_params_mut().into_iter().map(|(_, p)| p).collect();
            adam_step(&mut params, &grad_slices, &mut state, lr, cfg)?;
            loss_sum += loss.as_f64() * batch.len() as f64;
            correct += count_correct(&logits, &batch.labels);
        }
        let (test_loss, test_acc) = evaluate(model, test, cfg.batch_size)?;
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            l2_penalty: l2_penalty(model, cfg),
            train_acc: correct as f64 / train.len() as f64,
            test_loss,
            test_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer.on_epoch(&metrics, model)?;
        history.push(metrics);
    }
    Ok(TrainOutcome {
        history,
        interrupted: false,
    })
}

/// Writes the metrics CSV and keeps the checkpoint with the best test
/// accuracy seen so far.
pub struct RunRecorder<W: Write> {
    csv: W,
    best_path: Option<PathBuf>,
    best_acc: f64,
    stop: Option<std::sync::Arc<std::sync::atomic::AtomicBool>>,
}

impl<W: Write> RunRecorder<W> {
    /// Emits the `#` config line and the header row.
    pub fn new(mut csv: W, cfg: &TrainConfig, context: &str, best_path: Option<&Path>) -> Result<Self> {
        writeln!(csv, "# {context} {cfg}")?;
        writeln!(csv, "{CSV_HEADER}")?;
        csv.flush()?;
        Ok(Self {
            csv,
            best_path: best_path.map(Path::to_path_buf),
            best_acc: f64::NEG_INFINITY,
            stop: None,
        })
    }

    /// Stops training once `flag` is raised.
    pub fn with_stop_flag(mut self, flag: std::sync::Arc<std::sync::atomic::AtomicBool>) -> Self {
        self.stop = Some(flag);
        self
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.best_acc.is_finite().then_some(self.best_acc)
    }

    pub fn into_inner(self) -> W {
        self.csv
    }
}

impl<T: Scalar, W: Write> TrainObserver<T> for RunRecorder<W> {
    fn on_epoch(&mut self, m: &EpochMetrics, model: &Model<T>) -> Result<()> {
        writeln!(self.csv, "{}", m.csv_row())?;
        self.csv.flush()?;
        if m.test_acc > self.best_acc {
            self.best_acc = m.test_acc;
            if let Some(p) = &self.best_path {
                checkpoint::save(model, p)?;
            }
        }
        Ok(())
    }

    fn should_stop(&self) -> bool {
        self.stop.as_ref().is_some_and(|f| f.load(std::sync::atomic::Ordering::SeqCst))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn slot(data: &mut [f64]) -> ParamMut<'_, f64> {
        ParamMut {
            name: "w",
            kind: ParamKind::ConvWeight,
            dims: vec![data.len()],
            data,
        }
    }

    #[test]
    fn schedule_anchors() {
        let cfg = TrainConfig::default();
        assert!((lr_at(0, &cfg) - 0.01).abs() < 1e-12);
        assert!((lr_at(2, &cfg) - 0.0094).abs() < 1e-12);
        assert!((lr_at(3, &cfg) - 0.0094).abs() < 1e-12);
        assert!((lr_at(4, &cfg) - 0.008836).abs() < 1e-12);
        assert!((0..200).all(|e| lr_at(e + 1, &cfg) <= lr_at(e, &cfg)));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut w = [0.0];
        let mut state = AdamState::new([1]);
        adam_step(&mut [slot(&mut w)], &[&[1.0]], &mut state, 0.01, &cfg).unwrap();
        assert!((w[0] + 0.01).abs() < 1e-8, "{}", w[0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let cfg = TrainConfig::default();
        let mut w = [0.3, -2.0];
        let mut state = AdamState::new([2]);
        adam_step(&mut [slot(&mut w)], &[&[0.0, 0.0]], &mut state, 0.01, &cfg).unwrap();
        assert_eq!(w, [0.3, -2.0]);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let cfg = TrainConfig::default();
        let mut w = [0.0; 3];
        let mut state = AdamState::new([3]);
        assert!(adam_step(&mut [slot(&mut w)], &[&[1.0]], &mut state, 0.01, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { decay: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr0: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn l2_scope() {
        assert!(L2Scope::ConvWeights.covers(ParamKind::ConvWeight));
        assert!(!L2Scope::ConvWeights.covers(ParamKind::DenseWeight));
        assert!(!L2Scope::ConvAndDense.covers(ParamKind::Attention));
        assert!(!L2Scope::ConvAndDense.covers(ParamKind::ConvBias));
    }
}
