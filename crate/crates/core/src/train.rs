//! Nesterov-momentum SGD with a step learning-rate schedule.
//!
//! The training loop is deterministic given (seed, config, dataset): epoch
//! shuffles and per-sample augmentation draw from substreams keyed by epoch
//! and by the sample's position in the dataset, and gradients accumulate in
//! a fixed order. The per-epoch wall time in the log is the one field that
//! varies between runs.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, batch_to_tensor, AugmentSpec, Image};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Gradients, ModelConfig, Network};
use crate::rng::RngStream;
use crate::tensor::{softmax_cross_entropy, softmax_cross_entropy_backward, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs between learning-rate drops.
    pub lr_drop_every: usize,
    /// Each drop divides the rate by this factor.
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// When false, batch-norm gamma and beta are exempt from weight decay.
    pub decay_norm_params: bool,
    pub seed: u64,
    pub augment: AugmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1500,
            batch_size: 256,
            base_lr: 0.1,
            lr_drop_every: 250,
            lr_drop_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_norm_params: true,
            seed: 0,
            augment: AugmentSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid(
                "batch_size must be at least 2 (batch statistics need more than one sample)",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::invalid(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_drop_factor > 0.0) || !self.lr_drop_factor.is_finite() {
            return Err(Error::invalid(format!(
                "lr_drop_factor must be positive, got {}",
                self.lr_drop_factor
            )));
        }
        if self.lr_drop_every == 0 {
            return Err(Error::invalid("lr_drop_every must be at least 1"));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        self.augment.validate()
    }
}

/// Learning rate for `epoch`: base divided by factor once per completed
/// `lr_drop_every` span. Division (not multiplying by a reciprocal) keeps
/// round factors exact, e.g. 0.1 / 10^5 is exactly 1e-6.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} out of range for a {}-epoch schedule",
            cfg.epochs
        )));
    }
    let drops = (epoch / cfg.lr_drop_every) as i32;
    Ok(cfg.base_lr / cfg.lr_drop_factor.powi(drops))
}

/// One velocity tensor per trainable parameter.
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        let velocity = net
            .named_params()
            .into_iter()
            .map(|(name, p)| (name, Tensor::zeros(p.shape().to_vec())))
            .collect();
        OptimizerState { velocity }
    }
}

/// Elementwise Nesterov update: g~ = g + lambda * theta, v <- mu * v + g~,
/// theta <- theta - lr * (g~ + mu * v).
fn nesterov_update_buf(
    theta: &mut [f64],
    grad: &[f64],
    vel: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(vel.iter_mut()) {
        let g_tilde = g + weight_decay * *t;
        *v = momentum * *v + g_tilde;
        *t -= lr * (g_tilde + momentum * *v);
    }
}

/// Applies one optimizer step to every trainable parameter. Gradients must
/// cover the parameter set exactly (shape-checked).
pub fn nesterov_step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    decay_norm_params: bool,
) -> Result<()> {
    for (name, param) in net.named_params_mut() {
        let grad = grads
            .0
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("no gradient for parameter {name}")))?;
        if grad.shape() != param.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let vel = state
            .velocity
            .get_mut(&name)
            .ok_or_else(|| Error::invalid(format!("no velocity for parameter {name}")))?;
        let lambda = if decay_norm_params || !Network::is_norm_param(&name) {
            weight_decay
        } else {
            0.0
        };
        nesterov_update_buf(
            param.data_mut(),
            grad.data(),
            vel.data_mut(),
            lr,
            momentum,
            lambda,
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

/// Hyperparameters echoed at the top of every training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogHeader {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub train_samples: usize,
    pub batches_per_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub header: TrainLogHeader,
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    /// Newline-delimited rendering: header record, then one record per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Trains `net` in place and returns the per-epoch log.
///
/// Per epoch: shuffle indices with an epoch-keyed stream, cut into
/// `batch_size` minibatches (a final short batch is dropped), augment each
/// sample with a stream keyed by (epoch, dataset position), then forward,
/// backpropagate and step. A non-finite minibatch loss aborts with a
/// divergence error naming the epoch.
pub fn fit(net: &mut Network, train_set: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    train_set.validate()?;
    let n = train_set.len();
    if n == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size > n {
        return Err(Error::invalid(format!(
            "batch_size {} exceeds dataset size {n}",
            cfg.batch_size
        )));
    }
    let side = net.config.input_side;
    for (i, s) in train_set.samples.iter().enumerate() {
        if s.image.width != side || s.image.height != side {
            return Err(Error::invalid(format!(
                "sample {i} is {}x{}, network expects {side}x{side}",
                s.image.width, s.image.height
            )));
        }
        if s.label >= net.config.num_classes {
            return Err(Error::invalid(format!(
                "sample {i} has label {} but the network has {} classes",
                s.label, net.config.num_classes
            )));
        }
    }

    let fill = cfg
        .augment
        .fill_value
        .unwrap_or_else(|| train_set.channel_means());
    let stream = RngStream::new(cfg.seed);
    let mut state = OptimizerState::new(net);
    let batches = n / cfg.batch_size;
    let mut entries = Vec::with_capacity(cfg.epochs);

    let mut perm: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(cfg, epoch)?;
        for (i, slot) in perm.iter_mut().enumerate() {
            *slot = i;
        }
        stream.shuffle_stream(epoch).shuffle(&mut perm);

        let mut loss_sum = 0.0;
        for b in 0..batches {
            let idx = &perm[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let mut images: Vec<Image> = Vec::with_capacity(idx.len());
            let mut labels: Vec<usize> = Vec::with_capacity(idx.len());
            for &i in idx {
                let mut sample_rng = stream.sample_stream(epoch, i);
                images.push(apply_policy(
                    &cfg.augment,
                    fill,
                    &train_set.samples[i].image,
                    &mut sample_rng,
                )?);
                labels.push(train_set.samples[i].label);
            }
            let refs: Vec<&Image> = images.iter().collect();
            let x = batch_to_tensor(&refs)?;
            let (out, cache) = net.forward_cached(&x)?;
            let (loss, probs) = softmax_cross_entropy(&out.logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    detail: format!("minibatch {b} loss is {loss}"),
                });
            }
            let dlogits = softmax_cross_entropy_backward(&probs, &labels);
            let grads = net.backward(&cache, &dlogits)?;
            nesterov_step(
                net,
                &grads,
                &mut state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                cfg.decay_norm_params,
            )?;
            loss_sum += loss;
        }
        entries.push(TrainLogEntry {
            epoch,
            lr,
            mean_loss: loss_sum / batches as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    Ok(TrainLog {
        header: TrainLogHeader {
            train: cfg.clone(),
            model: net.config.clone(),
            train_samples: n,
            batches_per_epoch: batches,
        },
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Policy;
    use crate::data::generate_synthetic;
    use crate::model::{build_network, Variant};

    fn paper_schedule() -> TrainConfig {
        TrainConfig {
            epochs: 1500,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_hits_the_published_breakpoints_exactly() {
        let cfg = paper_schedule();
        assert_eq!(lr_at_epoch(&cfg, 0).unwrap(), 0.1);
        assert_eq!(lr_at_epoch(&cfg, 249).unwrap(), 0.1);
        assert_eq!(lr_at_epoch(&cfg, 250).unwrap(), 0.01);
        assert_eq!(lr_at_epoch(&cfg, 499).unwrap(), 0.01);
        assert_eq!(lr_at_epoch(&cfg, 500).unwrap(), 0.001);
        assert_eq!(lr_at_epoch(&cfg, 1250).unwrap(), 1e-6);
        assert!(lr_at_epoch(&cfg, 1500).is_err());
    }

    #[test]
    fn schedule_is_nonincreasing_and_piecewise_constant() {
        let cfg = paper_schedule();
        let mut prev = lr_at_epoch(&cfg, 0).unwrap();
        for epoch in 1..1500 {
            let lr = lr_at_epoch(&cfg, epoch).unwrap();
            assert!(lr <= prev, "epoch {epoch}");
            if epoch % cfg.lr_drop_every == 0 {
                assert!(lr < prev, "drop expected at epoch {epoch}");
            } else {
                assert_eq!(lr, prev, "plateau expected at epoch {epoch}");
            }
            prev = lr;
        }
    }

    #[test]
    fn nesterov_two_step_hand_values() {
        let mut theta = [1.0];
        let mut vel = [0.0];
        nesterov_update_buf(&mut theta, &[1.0], &mut vel, 0.1, 0.9, 0.0);
        assert!((theta[0] - 0.81).abs() < 1e-12, "{}", theta[0]);
        nesterov_update_buf(&mut theta, &[1.0], &mut vel, 0.1, 0.9, 0.0);
        assert!((theta[0] - 0.539).abs() < 1e-12, "{}", theta[0]);
    }

    #[test]
    fn zero_momentum_zero_decay_is_plain_sgd() {
        let mut theta = [2.0, -1.0];
        let mut vel = [0.0, 0.0];
        nesterov_update_buf(&mut theta, &[0.5, -2.0], &mut vel, 0.1, 0.0, 0.0);
        assert_eq!(theta, [2.0 - 0.05, -1.0 + 0.2]);
    }

    #[test]
    fn zero_gradient_zero_velocity_is_a_fixed_point() {
        let mut theta = [3.0];
        let mut vel = [0.0];
        nesterov_update_buf(&mut theta, &[0.0], &mut vel, 0.1, 0.9, 0.0);
        assert_eq!(theta, [3.0]);
        assert_eq!(vel, [0.0]);
    }

    #[test]
    fn pure_decay_contracts_parameters_toward_zero() {
        // Without momentum the decay-only update is a strict geometric
        // contraction.
        let mut theta = [1.0];
        let mut vel = [0.0];
        let mut prev = theta[0];
        for _ in 0..30 {
            nesterov_update_buf(&mut theta, &[0.0], &mut vel, 0.1, 0.0, 0.1);
            assert!(theta[0] < prev && theta[0] > 0.0, "{}", theta[0]);
            prev = theta[0];
        }
        // With momentum the trajectory may ring around zero, but the
        // magnitude still collapses.
        let mut theta = [1.0];
        let mut vel = [0.0];
        for _ in 0..200 {
            nesterov_update_buf(&mut theta, &[0.0], &mut vel, 0.1, 0.9, 0.1);
        }
        assert!(theta[0].abs() < 1e-2, "{}", theta[0]);
    }

    #[test]
    fn zero_lr_step_changes_no_parameter() {
        let config = ModelConfig {
            variant: Variant::Toy10,
            num_classes: 2,
            input_side: 16,
            stage_widths: vec![4],
            blocks_per_stage: vec![1],
        };
        let mut net = build_network(&config, 3).unwrap();
        let before: Vec<Tensor> = net.named_params().iter().map(|(_, t)| (*t).clone()).collect();
        let x = Tensor::randn(
            vec![2, 3, 16, 16],
            1.0,
            &mut RngStream::new(1).derive(&[5]),
        );
        let (out, cache) = net.forward_cached(&x).unwrap();
        let (_, probs) = softmax_cross_entropy(&out.logits, &[0, 1]).unwrap();
        let dlogits = softmax_cross_entropy_backward(&probs, &[0, 1]);
        let grads = net.backward(&cache, &dlogits).unwrap();
        let mut state = OptimizerState::new(&net);
        nesterov_step(&mut net, &grads, &mut state, 0.0, 0.9, 1e-4, true).unwrap();
        for ((_, after), before) in net.named_params().iter().zip(&before) {
            assert_eq!(*after, before);
        }
    }

    #[test]
    fn norm_param_decay_toggle_is_respected() {
        let config = ModelConfig {
            variant: Variant::Toy10,
            num_classes: 2,
            input_side: 16,
            stage_widths: vec![4],
            blocks_per_stage: vec![1],
        };
        let mut net = build_network(&config, 3).unwrap();
        // Zero gradients: any movement comes from decay alone.
        let zero_grads = Gradients(
            net.named_params()
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        );
        let gamma_before = net.stages[0][0].bn1.gamma.clone();
        let stem_before = net.stem.weight.clone();
        let mut state = OptimizerState::new(&net);
        nesterov_step(&mut net, &zero_grads, &mut state, 0.1, 0.0, 0.1, false).unwrap();
        assert_eq!(net.stages[0][0].bn1.gamma, gamma_before);
        assert_ne!(net.stem.weight, stem_before);
    }

    fn tiny_setup(seed: u64) -> (Network, Dataset, TrainConfig) {
        let (train, _) = generate_synthetic(2, 6, 1, 16, 21).unwrap();
        let config = ModelConfig {
            variant: Variant::Toy10,
            num_classes: 2,
            input_side: 16,
            stage_widths: vec![4, 6],
            blocks_per_stage: vec![1, 1],
        };
        let net = build_network(&config, seed).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            base_lr: 0.05,
            seed: 13,
            augment: AugmentSpec {
                policy: Policy::GrThenHns,
                ..AugmentSpec::default()
            },
            ..TrainConfig::default()
        };
        (net, train, cfg)
    }

    #[test]
    fn fit_is_bitwise_deterministic() {
        let (mut net_a, train, cfg) = tiny_setup(30);
        let (mut net_b, _, _) = tiny_setup(30);
        let log_a = fit(&mut net_a, &train, &cfg).unwrap();
        let log_b = fit(&mut net_b, &train, &cfg).unwrap();
        for ((name, a), (_, b)) in net_a.named_state().iter().zip(net_b.named_state()) {
            assert_eq!(**a, *b, "{name}");
        }
        for (ea, eb) in log_a.entries.iter().zip(&log_b.entries) {
            assert_eq!(ea.epoch, eb.epoch);
            assert_eq!(ea.lr, eb.lr);
            assert_eq!(ea.mean_loss, eb.mean_loss);
        }
        assert_eq!(log_a.entries.len(), cfg.epochs);
        assert_eq!(log_a.header.batches_per_epoch, 3);
    }

    #[test]
    fn zero_epochs_returns_the_network_untouched() {
        let (mut net, train, mut cfg) = tiny_setup(31);
        cfg.epochs = 0;
        let fresh = build_network(&net.config, 31).unwrap();
        let log = fit(&mut net, &train, &cfg).unwrap();
        assert!(log.entries.is_empty());
        for ((name, a), (_, b)) in net.named_state().iter().zip(fresh.named_state()) {
            assert_eq!(**a, *b, "{name}");
        }
    }

    #[test]
    fn fit_learns_on_easy_data() {
        let (mut net, train, mut cfg) = tiny_setup(32);
        cfg.epochs = 10;
        cfg.augment.policy = Policy::None;
        let log = fit(&mut net, &train, &cfg).unwrap();
        let first = log.entries.first().unwrap().mean_loss;
        let last = log.entries.last().unwrap().mean_loss;
        assert!(
            last < first,
            "loss should fall on separable data: {first} -> {last}"
        );
    }

    #[test]
    fn fit_rejects_oversized_batch_and_bad_config() {
        let (mut net, train, mut cfg) = tiny_setup(33);
        cfg.batch_size = 1000;
        assert!(fit(&mut net, &train, &cfg).is_err());
        cfg.batch_size = 1;
        assert!(fit(&mut net, &train, &cfg).is_err());
        cfg.batch_size = 4;
        cfg.momentum = 1.0;
        assert!(fit(&mut net, &train, &cfg).is_err());
        cfg.momentum = 0.9;
        cfg.lr_drop_factor = 0.0;
        assert!(fit(&mut net, &train, &cfg).is_err());
    }

    #[test]
    fn log_serializes_to_one_record_per_line() {
        let (mut net, train, cfg) = tiny_setup(34);
        let log = fit(&mut net, &train, &cfg).unwrap();
        let jsonl = log.to_jsonl().unwrap();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 1 + cfg.epochs);
        assert!(lines[0].contains("\"batch_size\":4"));
        assert!(lines[1].contains("\"epoch\":0"));
    }

    use crate::rng::RngStream;
}
