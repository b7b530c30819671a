use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Mean squared difference over all elements, as a differentiable scalar.
pub fn mse_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", &pred.shape(), &target.shape()));
    }
    let d = pred.sub(target)?;
    Ok(d.mul(d)?.mean())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse", pred.shape(), target.shape()));
    }
    if pred.is_empty() {
        return Err(Error::invalid("mse: empty tensors"));
    }
    let ss: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss / pred.len() as f64)
}

pub fn rmse_metric(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(mse(pred, target)?.sqrt())
}

/// Streaming sum of squared errors for pooled RMSE over many tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SquaredError {
    pub sum: f64,
    pub count: usize,
}

impl SquaredError {
    pub fn push(&mut self, pred: &[f64], target: &[f64]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::shape("rmse", &[pred.len()], &[target.len()]));
        }
        self.sum += pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        self.count += pred.len();
        Ok(())
    }

    pub fn rmse(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            (self.sum / self.count as f64).sqrt()
        }
    }
}
