use std::collections::BTreeMap;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::data::Dataset;
use super::loss::{mse_loss, SquaredError};
use crate::autodiff::{BatchStats, Tape, Tensor};
use crate::dataio::{shuffle, KeyValues};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::models::{update_running, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub n_workers: usize,
    pub seed: u64,
    /// Validation interval in steps.
    pub checkpoint_every: usize,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 1000,
            adam: AdamConfig::default(),
            n_workers: 1,
            seed: 0,
            checkpoint_every: 100,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 9] = [
        "batch_size",
        "steps",
        "learning_rate",
        "beta1",
        "beta2",
        "adam_eps",
        "n_workers",
        "seed",
        "checkpoint_every",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_workers == 0 || self.batch_size % self.n_workers != 0 {
            return Err(Error::invalid(format!(
                "train: batch_size {} must be a positive multiple of n_workers {}",
                self.batch_size, self.n_workers
            )));
        }
        if self.steps == 0 {
            return Err(Error::invalid("train: steps must be at least 1"));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::invalid("train: learning_rate must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("train: checkpoint_every must be at least 1"));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! set {
            ($key:literal, $($field:ident).+) => {
                if let Some(v) = kv.optional($key)? {
                    self.$($field).+ = v;
                }
            };
        }
        set!("batch_size", batch_size);
        set!("steps", steps);
        set!("learning_rate", adam.learning_rate);
        set!("beta1", adam.beta1);
        set!("beta2", adam.beta2);
        set!("adam_eps", adam.eps);
        set!("n_workers", n_workers);
        set!("seed", seed);
        set!("checkpoint_every", checkpoint_every);
        Ok(())
    }
}

/// Loss, gradients and norm statistics of one batch.
#[derive(Clone, Debug)]
pub struct StepGrad {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    /// Train-mode batch statistics (worker 0's shard when sharded).
    pub norm_stats: Vec<(String, BatchStats)>,
}

/// Mean-squared loss and its gradient on one shard, computed on a private tape.
pub fn shard_gradients(model: &Model, inputs: &[&Tensor], targets: &[&Tensor]) -> Result<StepGrad> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::invalid(
            "train: shard needs matching, non-empty inputs and targets",
        ));
    }
    let x = Tensor::stack(&inputs.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
    let y = Tensor::stack(&targets.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
    let tape = Tape::new();
    let bound = model.params.bind(&tape, true);
    let out = model.forward(&bound, tape.constant(x), Mode::Train)?;
    let loss = mse_loss(out.output, tape.constant(y))?;
    let value = loss.value().item()?;
    let g = tape.backward(loss)?;
    let grads = bound.vars.iter().map(|(k, v)| (k.clone(), g.wrt(*v))).collect();
    Ok(StepGrad {
        loss: value,
        grads,
        norm_stats: out.norm_stats,
    })
}

/// Splits a batch into `n_workers` equal contiguous shards, computes each
/// shard's gradient on its own thread against the same parameters, and
/// averages in worker order.
pub fn batch_gradients(model: &Model, inputs: &[&Tensor], targets: &[&Tensor], n_workers: usize) -> Result<StepGrad> {
    let n = inputs.len();
    if n_workers == 0 || n % n_workers != 0 || n == 0 {
        return Err(Error::invalid(format!(
            "train: batch {n} not divisible into {n_workers} shards"
        )));
    }
    if n_workers == 1 {
        return shard_gradients(model, inputs, targets);
    }
    let shard = n / n_workers;
    let results: Vec<Result<StepGrad>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..n_workers)
            .map(|w| {
                let (xs, ys) = (
                    &inputs[w * shard..(w + 1) * shard],
                    &targets[w * shard..(w + 1) * shard],
                );
                scope.spawn(move || shard_gradients(model, xs, ys))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::invalid("train: worker panicked")))
            })
            .collect()
    });
    let mut results = results.into_iter();
    let mut acc = results.next().expect("at least one worker")?;
    for r in results {
        let r = r?;
        acc.loss += r.loss;
        for (k, g) in r.grads {
            let a = acc.grads.get_mut(&k).expect("same parameter set");
            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
        }
    }
    let inv = 1.0 / n_workers as f64;
    acc.loss *= inv;
    for g in acc.grads.values_mut() {
        g.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    Ok(acc)
}

/// One row of the loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_mse: f64,
    pub val_rmse: Option<f64>,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,train_mse,val_rmse\n");
    for p in curve {
        let v = p.val_rmse.map_or_else(String::new, |v| v.to_string());
        out.push_str(&format!("{},{},{}\n", p.step, p.train_mse, v));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters with the lowest validation RMSE (the final ones without
    /// validation data).
    pub best: Model,
    pub best_step: usize,
    pub best_val_rmse: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

/// Pooled RMSE of eval-mode predictions, in standardized units.
pub fn dataset_rmse(model: &Model, data: &Dataset, batch: usize) -> Result<f64> {
    let mut se = SquaredError::default();
    for (xs, ys) in data.inputs.chunks(batch.max(1)).zip(data.targets.chunks(batch.max(1))) {
        let pred = model.predict(&Tensor::stack(xs)?)?;
        let target = Tensor::stack(ys)?;
        se.push(pred.data(), target.data())?;
    }
    Ok(se.rmse())
}

/// Seeded epoch-wise shuffling that serves batches of any size.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    shuffle(&mut self.order, &mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Data-parallel Adam training with a fixed step budget and best-validation
/// model selection. `observer` sees every curve point as it is produced.
pub fn train(
    mut model: Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let val_set = val_set.filter(|v| !v.is_empty());
    let mut sampler = BatchSampler::new(train_set.len(), cfg.seed);
    let mut state = AdamState::default();
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, usize, Model)> = None;
    for step in 1..=cfg.steps {
        let idx = sampler.next(cfg.batch_size);
        let xs: Vec<&Tensor> = idx.iter().map(|&i| &train_set.inputs[i]).collect();
        let ys: Vec<&Tensor> = idx.iter().map(|&i| &train_set.targets[i]).collect();
        let g = batch_gradients(&model, &xs, &ys, cfg.n_workers)?;
        if !g.loss.is_finite() || g.grads.values().any(|t| !t.all_finite()) {
            return Err(Error::Diverged(step));
        }
        adam_step(&mut model.params.tensors, &g.grads, &mut state, &cfg.adam)?;
        update_running(&mut model.params, &g.norm_stats, cfg.bn_momentum)?;
        if model.params.tensors.values().any(|t| !t.all_finite()) {
            return Err(Error::Diverged(step));
        }
        let validate = step % cfg.checkpoint_every == 0 || step == cfg.steps;
        let val_rmse = match (validate, val_set) {
            (true, Some(v)) => {
                let r = dataset_rmse(&model, v, cfg.batch_size)?;
                if !r.is_finite() {
                    return Err(Error::Diverged(step));
                }
                if best.as_ref().is_none_or(|(b, _, _)| r < *b) {
                    best = Some((r, step, model.clone()));
                }
                Some(r)
            }
            _ => None,
        };
        let point = CurvePoint {
            step,
            train_mse: g.loss,
            val_rmse,
        };
        observer(&point);
        curve.push(point);
    }
    let (best_val_rmse, best_step, best_model) = match best {
        Some((r, s, m)) => (Some(r), s, m),
        None => (None, cfg.steps, model.clone()),
    };
    Ok(TrainOutcome {
        model,
        best: best_model,
        best_step,
        best_val_rmse,
        curve,
    })
}
