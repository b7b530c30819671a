use crate::autodiff::{batch_norm, BatchStats, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
    /// Samples pooled per statistic in train mode; `None` pools the whole batch.
    pub group: Option<usize>,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: 1e-5,
            momentum: 0.1,
            group: None,
        }
    }
}

/// Exponential moving averages of per-channel mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of updates applied; zero means uninitialized.
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            updates: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    /// Folds one training batch in. The first update copies the batch
    /// statistics; later ones blend with weight `momentum`.
    pub fn update(&mut self, stats: &BatchStats, momentum: f64) -> Result<()> {
        let c = stats.channels;
        if c != self.mean.len() {
            return Err(Error::shape("running stats", &[self.mean.len()], &[c]));
        }
        let g = stats.groups as f64;
        let total = (stats.groups * stats.count) as f64;
        for ch in 0..c {
            let means = (0..stats.groups).map(|k| stats.mean[k * c + ch]);
            let mean = means.clone().sum::<f64>() / g;
            // Pooled biased variance: mean within-group variance plus the
            // variance of group means.
            let within = (0..stats.groups).map(|k| stats.var[k * c + ch]).sum::<f64>() / g;
            let between = means.map(|m| (m - mean) * (m - mean)).sum::<f64>() / g;
            let mut var = within + between;
            if total > 1.0 {
                var *= total / (total - 1.0);
            }
            if self.updates == 0 {
                self.mean[ch] = mean;
                self.var[ch] = var;
            } else {
                self.mean[ch] = (1.0 - momentum) * self.mean[ch] + momentum * mean;
                self.var[ch] = (1.0 - momentum) * self.var[ch] + momentum * var;
            }
        }
        self.updates += 1;
        Ok(())
    }
}

/// Batch normalization over `[N][C][P][H][W]` (an unbatched `[C][P][H][W]`
/// input is treated as `N = 1`).
///
/// Train mode normalizes with batch statistics and, when `running` is given,
/// folds them into it. Eval mode uses `running`, which must have seen at
/// least one training batch.
pub fn batchnorm<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    mode: Mode,
    running: Option<&mut RunningStats>,
    cfg: &BnConfig,
) -> Result<(Var<'t>, Option<BatchStats>)> {
    let shape = x.shape();
    let batched = match shape.len() {
        5 => true,
        4 => false,
        _ => return Err(Error::shape("batchnorm", &shape, &gamma.shape())),
    };
    match mode {
        Mode::Train => {
            let xb = if batched {
                x
            } else {
                let mut s = vec![1];
                s.extend(&shape);
                x.reshape(&s)?
            };
            let group = cfg.group.unwrap_or(xb.shape()[0]);
            let (y, stats) = batch_norm(xb, gamma, beta, group, cfg.eps)?;
            if let Some(r) = running {
                r.update(&stats, cfg.momentum)?;
            }
            let y = if batched { y } else { y.reshape(&shape)? };
            Ok((y, Some(stats)))
        }
        Mode::Eval => {
            let r = running.ok_or_else(|| Error::invalid("batchnorm: eval mode needs running stats"))?;
            Ok((batchnorm_eval(x, gamma, beta, r, cfg.eps)?, None))
        }
    }
}

pub(crate) fn batchnorm_eval<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running: &RunningStats,
    eps: f64,
) -> Result<Var<'t>> {
    if !running.is_initialized() {
        return Err(Error::invalid(
            "batchnorm: running statistics are uninitialized (no training step yet)",
        ));
    }
    let tape = x.tape();
    let c = running.mean.len();
    let inv: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let scale = gamma.mul(tape.constant(Tensor::from_vec(inv)))?;
    let shift = beta.sub(scale.mul(tape.constant(Tensor::from_vec(running.mean.clone())))?)?;
    let nd = x.value().ndim();
    if nd < 4 || x.shape()[nd - 4] != c {
        return Err(Error::shape("batchnorm", &x.shape(), &[c]));
    }
    x.scale_shift(scale, shift, nd - 4)
}
