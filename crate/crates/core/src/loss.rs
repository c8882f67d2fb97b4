//! The training objective and the minibatch training loop.
//!
//! For a batch of users the objective is
//! `mean_u S_ε(p_u, decode(z_u)) + λ_t · MMD²(z, prior draws)`, where `p_u` is
//! uniform over the user's clicked items, `S_ε` is the entropic transport
//! value under the item ground cost (differentiated through a fixed number of
//! unrolled Sinkhorn iterations) and `λ_t = λ₀ · decay^t` shrinks every epoch.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::kernels::{mmd_sq_grad, KernelConfig};
use crate::model::{backward, decode, encode, init_params, normalized_input, Adam, ModelConfig, ModelParams, Noise};
use crate::numerics::{Matrix, Rng};
use crate::ot::{sinkhorn_batch_grad, CostMatrix, DiscreteMeasure};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda0: f64,
    pub lambda_decay: f64,
    pub n_unroll: usize,
    pub kernel: KernelConfig,
    /// Prior draws per step; `None` uses the batch size.
    pub prior_samples_per_batch: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1.0,
            lambda0: 10.0,
            lambda_decay: 0.97,
            n_unroll: 50,
            kernel: KernelConfig::default(),
            prior_samples_per_batch: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return Err(Error::Config(format!("lambda0 must be non-negative, got {}", self.lambda0)));
        }
        if !(self.lambda_decay > 0.0 && self.lambda_decay <= 1.0) {
            return Err(Error::Config(format!("lambda_decay must lie in (0,1], got {}", self.lambda_decay)));
        }
        if self.n_unroll == 0 {
            return Err(Error::Config("n_unroll must be at least 1".into()));
        }
        KernelConfig::new(self.kernel.bandwidth).map_err(|e| Error::Config(e.to_string()))?;
        if self.prior_samples_per_batch == Some(0) || self.prior_samples_per_batch == Some(1) {
            return Err(Error::Config("prior_samples_per_batch must be at least 2".into()));
        }
        Ok(())
    }
}

/// `λ₀ · decay^epoch`.
pub fn lambda_at(cfg: &LossConfig, epoch: usize) -> f64 {
    cfg.lambda0 * cfg.lambda_decay.powi(epoch as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub mmd: f64,
    pub lambda_used: f64,
}

/// Objective and parameter gradients for one batch.
pub fn geocf_loss(
    params: &ModelParams,
    batch: &[&[usize]],
    cost: &CostMatrix,
    cfg: &LossConfig,
    epoch: usize,
    rng: &mut Rng,
) -> Result<(LossBreakdown, ModelParams)> {
    let latent = params.config().latent;
    let noise = rng.normal_matrix(batch.len(), latent);
    let prior = rng.normal_matrix(cfg.prior_samples_per_batch.unwrap_or(batch.len()), latent);
    geocf_loss_with_draws(params, batch, cost, cfg, lambda_at(cfg, epoch), noise, &prior)
}

/// [`geocf_loss`] with explicit reparameterization noise, prior draws and λ.
pub fn geocf_loss_with_draws(
    params: &ModelParams,
    batch: &[&[usize]],
    cost: &CostMatrix,
    cfg: &LossConfig,
    lambda: f64,
    noise: Matrix,
    prior: &Matrix,
) -> Result<(LossBreakdown, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    if cost.rows() != params.num_items() || cost.cols() != params.num_items() {
        return Err(Error::shape("geocf_loss cost", cost.matrix().shape(), (params.num_items(), params.num_items())));
    }
    let x = normalized_input(batch, params.num_items())?;
    let (lat, enc) = encode(params, &x, Noise::Given(noise))?;
    let (probs, dec) = decode(params, &lat.z)?;
    let targets = batch
        .iter()
        .map(|items| DiscreteMeasure::uniform_over(items.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let (values, mut d_probs) = sinkhorn_batch_grad(&targets, &probs, cost, cfg.epsilon, cfg.n_unroll)?;
    let b = batch.len() as f64;
    let reconstruction = values.iter().sum::<f64>() / b;
    d_probs.scale(1.0 / b);
    let (mmd, mut d_z) = mmd_sq_grad(&lat.z, prior, &cfg.kernel)?;
    d_z.scale(lambda);
    let grads = backward(params, &enc, &dec, &d_probs, (lambda != 0.0).then_some(&d_z))?;
    let total = reconstruction + lambda * mmd;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss (reconstruction {reconstruction}, mmd {mmd}, lambda {lambda})"
        )));
    }
    Ok((
        LossBreakdown {
            total,
            reconstruction,
            mmd,
            lambda_used: lambda,
        },
        grads,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 500,
            learning_rate: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// One optimizer step of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Writes the trace as TSV: `epoch, step, total, reconstruction, mmd, lambda`.
pub fn write_trace_tsv(trace: &[StepRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch\tstep\ttotal\treconstruction\tmmd\tlambda")?;
    for r in trace {
        let l = &r.loss;
        writeln!(
            w,
            "{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}",
            r.epoch, r.step, l.total, l.reconstruction, l.mmd, l.lambda_used
        )?;
    }
    Ok(())
}

/// Mean loss components per epoch, in epoch order.
pub fn epoch_means(trace: &[StepRecord]) -> Vec<LossBreakdown> {
    let epochs = trace.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let rs: Vec<&StepRecord> = trace.iter().filter(|r| r.epoch == e).collect();
            let n = rs.len().max(1) as f64;
            let mean = |f: fn(&LossBreakdown) -> f64| rs.iter().map(|r| f(&r.loss)).sum::<f64>() / n;
            LossBreakdown {
                total: mean(|l| l.total),
                reconstruction: mean(|l| l.reconstruction),
                mmd: mean(|l| l.mmd),
                lambda_used: mean(|l| l.lambda_used),
            }
        })
        .collect()
}

/// Splits `0..n` into consecutive batches of `size`, folding a trailing batch
/// of one user into its predecessor (the MMD term needs two samples).
fn batch_bounds(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n).step_by(size).map(|s| (s, (s + size).min(n))).collect();
    if out.len() > 1 && out.last().is_some_and(|&(s, e)| e - s < 2) {
        let (_, e) = out.pop().unwrap();
        out.last_mut().unwrap().1 = e;
    }
    out
}

/// Trains a fresh model on every row of `dataset`.
///
/// Random streams derived from `seed`: 0 for initialization, 1 for the
/// per-epoch shuffles, 2 for noise and prior draws.
pub fn train(
    dataset: &InteractionMatrix,
    cost: &CostMatrix,
    loss: &LossConfig,
    model: ModelConfig,
    opts: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<StepRecord>)> {
    train_with_progress(dataset, cost, loss, model, opts, seed, |_, _| {})
}

/// [`train`] with a callback after every epoch (epoch index, epoch mean loss).
pub fn train_with_progress(
    dataset: &InteractionMatrix,
    cost: &CostMatrix,
    loss: &LossConfig,
    model: ModelConfig,
    opts: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(usize, &LossBreakdown),
) -> Result<(ModelParams, Vec<StepRecord>)> {
    loss.validate()?;
    opts.validate()?;
    let n = dataset.num_users();
    if n < 2 {
        return Err(Error::Empty(format!("training needs at least 2 users, got {n}")));
    }
    let base = Rng::new(seed);
    let mut params = init_params(dataset.num_items(), model, &mut base.derive(0))?;
    let mut shuffle_rng = base.derive(1);
    let mut draw_rng = base.derive(2);
    let mut opt = Adam::new(&params, opts.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let bounds = batch_bounds(n, opts.batch_size);
    let mut trace = Vec::with_capacity(opts.epochs * bounds.len());
    for epoch in 0..opts.epochs {
        shuffle_rng.shuffle(&mut order);
        for (step, &(s, e)) in bounds.iter().enumerate() {
            let batch: Vec<&[usize]> = order[s..e].iter().map(|&u| dataset.row(u)).collect();
            let (breakdown, grads) = geocf_loss(&params, &batch, cost, loss, epoch, &mut draw_rng)?;
            opt.step(&mut params, &grads)?;
            trace.push(StepRecord {
                epoch,
                step,
                loss: breakdown,
            });
        }
        let means = epoch_means(&trace[trace.len() - bounds.len()..]);
        progress(epoch, &means[epoch.min(means.len() - 1)]);
    }
    Ok((params, trace))
}
