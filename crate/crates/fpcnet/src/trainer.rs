//! Mini-batch SGD with momentum, MSE loss, and finite-difference checks.
//!
//! Per-sample gradients inside a batch are computed in parallel but always
//! reduced in sample order, so a run is bit-reproducible for a given seed
//! regardless of thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{backward, forward, forward_trace, GradStore, NetworkSpec, ParamStore};
use crate::nn::KernelWeights;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deterministic sample provider: the pair returned for an index must depend
/// only on (dataset seed, index).
pub trait SampleSource<S>: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn sample(&self, index: usize) -> (Tensor<S>, Vec<S>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Loss {
    Mse,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// lr multiplier applied every `lr_decay_interval` iterations (0 = off).
    pub lr_decay_factor: f64,
    pub lr_decay_interval: u64,
    pub seed: u64,
    pub loss: Loss,
    /// Evaluate every this many iterations (0 = final only).
    pub eval_interval: u64,
}

impl TrainConfig {
    /// Defaults: batch 128, lr 0.005, momentum 0.9, lr halved every quarter
    /// of the run.
    pub fn new(iterations: u64, seed: u64) -> Self {
        TrainConfig {
            batch_size: 128,
            iterations,
            learning_rate: 0.005,
            momentum: 0.9,
            lr_decay_factor: 0.5,
            lr_decay_interval: (iterations / 4).max(1),
            seed,
            loss: Loss::Mse,
            eval_interval: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        // lr 0 is allowed here so the degenerate "no update" case is
        // expressible; real runs (and the CLI) want it strictly positive.
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be >= 0 and finite".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        if self.lr_decay_interval == 0 {
            return self.learning_rate;
        }
        let steps = iteration / self.lr_decay_interval;
        self.learning_rate * self.lr_decay_factor.powi(steps as i32)
    }
}

/// Mean squared error and its gradient w.r.t. the predictions.
pub fn mse_loss<S: Scalar>(pred: &[S], target: &[S]) -> Result<(S, Vec<S>)> {
    if pred.len() != target.len() {
        return Err(Error::dim("target length", pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let n = S::from_usize(pred.len());
    let mut loss = S::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        loss += d * d;
        grad.push((d + d) / n);
    }
    Ok((loss / n, grad))
}

/// Momentum buffers shaped like the parameter store.
pub struct MomentumState<S>(Vec<Option<KernelWeights<S>>>);

impl<S: Scalar> MomentumState<S> {
    pub fn zeros_like(params: &ParamStore<S>) -> Self {
        MomentumState(
            params
                .layers
                .iter()
                .map(|l| {
                    l.as_ref()
                        .map(|k| KernelWeights::zeros(k.out_channels, k.in_channels, k.kh, k.kw))
                })
                .collect(),
        )
    }
}

/// Classical momentum: v ← μ·v − lr·g; w ← w + v.
pub fn sgd_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &GradStore<S>,
    state: &mut MomentumState<S>,
    lr: S,
    momentum: S,
) {
    for ((layer, grad), vel) in params.layers.iter_mut().zip(grads).zip(&mut state.0) {
        let (Some(layer), Some(grad), Some(vel)) = (layer, grad, vel) else {
            continue;
        };
        for ((w, &g), v) in layer
            .weights
            .iter_mut()
            .zip(&grad.weights)
            .zip(&mut vel.weights)
        {
            *v = momentum * *v - lr * g;
            *w += *v;
        }
        for ((b, &g), v) in layer.bias.iter_mut().zip(&grad.bias).zip(&mut vel.bias) {
            *v = momentum * *v - lr * g;
            *b += *v;
        }
    }
}

fn accumulate<S: Scalar>(total: &mut GradStore<S>, part: &GradStore<S>, scale: S) {
    for (t, p) in total.iter_mut().zip(part) {
        match (t, p) {
            (Some(t), Some(p)) => t.add_scaled(p, scale),
            (t @ None, Some(p)) => {
                let mut g = p.clone();
                g.scale(scale);
                *t = Some(g);
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// (iteration, mean training-batch loss), every iteration.
    pub loss_curve: Vec<(u64, f64)>,
    /// (iteration, eval metric) at eval intervals and at the end.
    pub evals: Vec<(u64, f64)>,
    pub final_loss: f64,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// CSV rows: iteration,loss,eval (eval blank off the eval grid).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,eval\n");
        let mut evals = self.evals.iter().peekable();
        for &(it, loss) in &self.loss_curve {
            let eval = match evals.peek() {
                Some(&&(eit, v)) if eit == it => {
                    evals.next();
                    format!("{v}")
                }
                _ => String::new(),
            };
            out.push_str(&format!("{it},{loss},{eval}\n"));
        }
        out
    }
}

/// Run the SGD loop.
///
/// Sample order is shuffled per epoch from (seed, epoch); per-sample
/// gradients are averaged over the batch in index order; a non-finite batch
/// loss aborts with the iteration and lr in the error.
pub fn train<S: Scalar>(
    spec: &NetworkSpec,
    params: &mut ParamStore<S>,
    source: &dyn SampleSource<S>,
    eval: Option<&dyn Fn(&ParamStore<S>) -> f64>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    spec.validate()?;
    if source.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let started = Instant::now();
    let mut state = MomentumState::zeros_like(params);
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut cursor = order.len(); // forces a shuffle on first use
    let mut epoch = 0u64;
    let mut report = TrainReport {
        loss_curve: Vec::with_capacity(cfg.iterations as usize),
        evals: Vec::new(),
        final_loss: f64::NAN,
        wall_clock_secs: 0.0,
    };

    for iteration in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor >= order.len() {
                let mut r = rng::stream2(cfg.seed, 0xE0, epoch);
                order.shuffle(&mut r);
                cursor = 0;
                epoch += 1;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let per_sample: Vec<(f64, GradStore<S>)> = batch
            .par_iter()
            .map(|&idx| {
                let (input, target) = source.sample(idx);
                let trace = forward_trace(spec, params, &input).expect("validated spec");
                let (loss, dpred) =
                    mse_loss(&trace.predictions, &target).expect("head/target lengths");
                let grads = backward(spec, params, &trace, &dpred).expect("validated spec");
                (loss.to_f64(), grads)
            })
            .collect();

        let inv_batch = S::from_f64(1.0 / cfg.batch_size as f64);
        let mut grads: GradStore<S> = vec![None; spec.nodes.len()];
        let mut batch_loss = 0.0;
        for (loss, g) in &per_sample {
            batch_loss += loss;
            accumulate(&mut grads, g, inv_batch);
        }
        batch_loss /= cfg.batch_size as f64;

        let lr = cfg.lr_at(iteration);
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, lr });
        }
        sgd_step(
            params,
            &grads,
            &mut state,
            S::from_f64(lr),
            S::from_f64(cfg.momentum),
        );
        report.loss_curve.push((iteration, batch_loss));

        if let Some(eval_fn) = eval {
            let last = iteration + 1 == cfg.iterations;
            if (cfg.eval_interval > 0 && (iteration + 1) % cfg.eval_interval == 0) || last {
                report.evals.push((iteration, eval_fn(params)));
            }
        }
    }
    report.final_loss = report.loss_curve.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences on a random
/// subset of at least `count` trainable scalars (weights and biases).
///
/// Relative error is |a − n| / max(|a|, |n|, 1e-4); the floor keeps
/// differences at the finite-difference noise scale from registering as
/// large relative errors when the true gradient is ~0.
pub fn grad_check<S: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<S>,
    input: &Tensor<S>,
    target: &[S],
    count: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let trace = forward_trace(spec, params, input)?;
    let (_, dpred) = mse_loss(&trace.predictions, target)?;
    let analytic = backward(spec, params, &trace, &dpred)?;

    // Enumerate all trainable coordinates: (node, weight index, is_bias).
    let mut coords = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        if let Some(k) = layer {
            for w in 0..k.weights.len() {
                coords.push((i, w, false));
            }
            for b in 0..k.bias.len() {
                coords.push((i, b, true));
            }
        }
    }
    if coords.is_empty() {
        return Err(Error::Empty("trainable parameters"));
    }
    let mut r = rng::stream(seed, 0);
    coords.shuffle(&mut r);
    coords.truncate(count.min(coords.len()));

    let h = S::from_f64(step);
    let loss_with = |params: &ParamStore<S>| -> Result<f64> {
        let pred = forward(spec, params, input)?;
        Ok(mse_loss(&pred, target)?.0.to_f64())
    };

    let max_rel_err = coords
        .par_iter()
        .map(|&(node, idx, is_bias)| {
            let mut plus = params.clone();
            let mut minus = params.clone();
            {
                let (p, m) = (
                    plus.layers[node].as_mut().unwrap(),
                    minus.layers[node].as_mut().unwrap(),
                );
                if is_bias {
                    p.bias[idx] += h;
                    m.bias[idx] -= h;
                } else {
                    p.weights[idx] += h;
                    m.weights[idx] -= h;
                }
            }
            let numeric = (loss_with(&plus).unwrap() - loss_with(&minus).unwrap())
                / (2.0 * step);
            let k = analytic[node].as_ref().unwrap();
            let a = if is_bias {
                k.bias[idx].to_f64()
            } else {
                k.weights[idx].to_f64()
            };
            (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4)
        })
        .reduce(|| 0.0, f64::max);

    Ok(GradCheckReport {
        max_rel_err,
        checked: coords.len(),
    })
}
