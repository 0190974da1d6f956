//! Loss assembly, optimizers and the training loop.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{Batch, WindowDataset};
use super::model::{ForwardPass, PaNet};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field_store::{quantile_type7, wet_values};
use crate::objectives::{curriculum_weight, decisiveness_tape, dice_tape, equity_from_usage, equity_tape, LossConfig};
use crate::pa_moe::{soft_usage, RoutingMap};

/// Losses above this magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// SGD momentum, also Adam's first-moment decay.
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    /// Route with the true future rain instead of the persistence prior.
    pub teacher_forcing: bool,
    pub shuffle: bool,
    /// Use the 90th percentile of wet training cells as the curriculum
    /// reference rate instead of `loss.curriculum.r_ref`.
    pub auto_r_ref: bool,
    /// Rescale the gradient to this global L2 norm when it is larger; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            lr: 1e-3,
            momentum: 0.9,
            optimizer: OptimizerKind::Sgd,
            loss: LossConfig::default(),
            teacher_forcing: false,
            shuffle: true,
            auto_r_ref: true,
            clip_norm: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("invalid lr {} or momentum {}", self.lr, self.momentum)));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config(format!("invalid clip_norm {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// 90th percentile of the wet cells of every stored frame, or 1 mm/h for a dry set.
pub fn reference_rate(data: &WindowDataset) -> f64 {
    let fields: Vec<_> = data.sequences().iter().map(|s| s.intensity()).collect();
    let wet = wet_values(fields.iter().map(|f| f.data.as_slice()));
    if wet.is_empty() {
        1.0
    } else {
        quantile_type7(&wet, 0.9)
    }
}

/// Scalar loss nodes of one forward pass.
pub struct LossVars {
    pub total: Var,
    pub pred: Var,
    /// Layer mean of the soft-usage equity penalty.
    pub equity: Var,
    /// Layer mean of the routing entropy penalty.
    pub decisiveness: Var,
}

/// Records `L_pred + gamma * mean_l (L_eq + beta * L_dec)` on `tape`.
///
/// `weights` are per target pixel; `None` is the unweighted mean.
pub fn loss_graph(
    tape: &mut Tape,
    pass: &ForwardPass,
    batch: &Batch,
    weights: Option<&[f64]>,
    cfg: &LossConfig,
) -> LossVars {
    let pred = dice_tape(tape, pass.probs, &batch.labels, weights, cfg.epsilon);
    let n_tok = pass.budgets.len();
    let mut eq_terms = Vec::with_capacity(pass.layers.len());
    let mut dec_terms = Vec::with_capacity(pass.layers.len());
    for layer in &pass.layers {
        let usage = soft_usage(tape, layer.probs, &pass.budgets);
        eq_terms.push(equity_tape(tape, usage, n_tok, cfg.epsilon));
        dec_terms.push(decisiveness_tape(tape, layer.probs, cfg.epsilon));
    }
    let mean = |tape: &mut Tape, terms: &[Var]| {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t);
        }
        tape.scale(acc, 1.0 / terms.len() as f64)
    };
    let equity = mean(tape, &eq_terms);
    let decisiveness = mean(tape, &dec_terms);
    let total = if cfg.gamma == 0.0 {
        pred
    } else {
        let d = tape.scale(decisiveness, cfg.beta);
        let moe = tape.add(equity, d);
        let moe = tape.scale(moe, cfg.gamma);
        tape.add(pred, moe)
    };
    LossVars { total, pred, equity, decisiveness }
}

/// Curriculum weight of every target pixel of `batch`.
pub fn pixel_weights(batch: &Batch, epoch: usize, total_epochs: usize, cfg: &LossConfig) -> Result<Vec<f64>> {
    batch
        .target
        .data
        .iter()
        .map(|&r| curriculum_weight(r as f64, epoch, total_epochs, &cfg.curriculum))
        .collect()
}

/// Hard-count usage CV and mean routing entropy (no smoothing), averaged over layers.
pub fn routing_diagnostics(tape: &Tape, pass: &ForwardPass, n_experts: usize, eps: f64) -> Result<(f64, f64)> {
    let n_tok = pass.budgets.len();
    let (mut cv, mut entropy) = (0.0, 0.0);
    for layer in &pass.layers {
        let mut usage = vec![0.0; n_experts];
        for sel in &layer.selections {
            for &e in sel {
                usage[e] += 1.0;
            }
        }
        cv += equity_from_usage(&usage, n_tok, eps)?;
        let h: f64 = tape
            .value(layer.probs)
            .data()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        entropy += h / n_tok as f64;
    }
    let l = pass.layers.len() as f64;
    Ok((cv / l, entropy / l))
}

/// SGD with momentum or Adam, with per-parameter state in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    /// Velocity (SGD) or first moment (Adam).
    pub first: Vec<Vec<f64>>,
    /// Adam second moment; empty for SGD.
    pub second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Optimizer {
            kind,
            lr,
            momentum,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: zeros(),
            second: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
        }
    }

    pub fn step(&mut self, params: &mut crate::autodiff::ParamStore, grads: &[Tensor]) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.momentum, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.value_at_mut(i).data_mut();
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((pv, mv), &gv) in p.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *mv = b1 * *mv + gv;
                        *pv -= self.lr * *mv;
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut self.second[i];
                    for (((pv, mv), vv), &gv) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// One row of the training log: step means over an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pred_loss: f64,
    pub equity: f64,
    pub decisiveness: f64,
    pub total: f64,
    pub cv: f64,
    pub entropy: f64,
    /// Tokens routed with `k_min`, `k_med`, `k_max`.
    pub tier_tokens: [usize; 3],
}

pub const TRAIN_LOG_HEADER: &str = "epoch,pred_loss,equity,decisiveness,total,cv,entropy";

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.pred_loss, r.equity, r.decisiveness, r.total, r.cv, r.entropy
        ));
    }
    s
}

/// Scalar results of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub pred: f64,
    pub equity: f64,
    pub decisiveness: f64,
    pub total: f64,
    pub cv: f64,
    pub entropy: f64,
    pub tiers: [usize; 3],
}

/// Model, optimizer and shuffling state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: PaNet,
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    pub rng: ChaCha8Rng,
    /// Epochs completed.
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: PaNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = model.params.values().map(|t| t.len()).collect();
        let optimizer = Optimizer::new(config.optimizer, config.lr, config.momentum, &sizes);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { model, config, optimizer, rng, epoch: 0, log: Vec::new() })
    }

    fn loss_config(&self, data: &WindowDataset) -> LossConfig {
        let mut cfg = self.config.loss;
        if self.config.auto_r_ref {
            cfg.curriculum.r_ref = reference_rate(data);
        }
        cfg
    }

    /// Forward, backward and update on one batch. The update is skipped and
    /// [`Error::Divergence`] returned when the loss is non-finite or too large.
    pub fn step(&mut self, batch: &Batch, cfg: &LossConfig) -> Result<StepOutcome> {
        let routing: RoutingMap = self.model.routing_map(batch, self.config.teacher_forcing)?;
        let weights = pixel_weights(batch, self.epoch, self.config.epochs.max(self.epoch + 1), cfg)?;
        let mut tape = Tape::new();
        let pass = self.model.forward(&mut tape, batch, &routing, None)?;
        let loss = loss_graph(&mut tape, &pass, batch, Some(&weights), cfg);
        let total = tape.value(loss.total).item();
        if !total.is_finite() || total.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { epoch: self.epoch, loss: total });
        }
        let (cv, entropy) = routing_diagnostics(&tape, &pass, self.model.config.n_experts, cfg.epsilon)?;
        let mut grads = tape.backward(loss.total).for_params(&self.model.params);
        if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { epoch: self.epoch, loss: f64::NAN });
        }
        clip_gradients(&mut grads, self.config.clip_norm);
        self.optimizer.step(&mut self.model.params, &grads);
        Ok(StepOutcome {
            pred: tape.value(loss.pred).item(),
            equity: tape.value(loss.equity).item(),
            decisiveness: tape.value(loss.decisiveness).item(),
            total,
            cv,
            entropy,
            tiers: routing.tier_counts(),
        })
    }

    pub fn run_epoch(&mut self, data: &WindowDataset) -> Result<EpochRecord> {
        let cfg = self.loss_config(data);
        let mut order: Vec<usize> = (0..data.len()).collect();
        if self.config.shuffle {
            order.shuffle(&mut self.rng);
        }
        let mut sums = [0.0; 6];
        let mut tiers = [0usize; 3];
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = data.batch(chunk)?;
            let s = self.step(&batch, &cfg)?;
            for (acc, v) in sums.iter_mut().zip([s.pred, s.equity, s.decisiveness, s.total, s.cv, s.entropy]) {
                *acc += v;
            }
            for (t, c) in tiers.iter_mut().zip(s.tiers) {
                *t += c;
            }
            steps += 1;
            debug!("epoch {} step {steps}: total {:.6}", self.epoch, s.total);
        }
        let m = sums.map(|v| v / steps as f64);
        let rec = EpochRecord {
            epoch: self.epoch,
            pred_loss: m[0],
            equity: m[1],
            decisiveness: m[2],
            total: m[3],
            cv: m[4],
            entropy: m[5],
            tier_tokens: tiers,
        };
        info!("epoch {}: pred {:.5} total {:.5} cv {:.4}", rec.epoch, rec.pred_loss, rec.total, rec.cv);
        self.epoch += 1;
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn train(&mut self, data: &WindowDataset) -> Result<&[EpochRecord]> {
        while self.epoch < self.config.epochs {
            self.run_epoch(data)?;
        }
        Ok(&self.log)
    }
}
