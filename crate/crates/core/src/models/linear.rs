use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-level `target ≈ a·spread_t0 + b`, shared across grid points.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBaseline {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

fn levels_of(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [p, _, _] => Ok(*p),
        s => Err(Error::invalid(format!(
            "linear baseline: expected [P][H][W], got {s:?}"
        ))),
    }
}

/// Ordinary least squares per level over every grid point of every pair
/// `(spread_t0, target)`, both shaped `[P][H][W]`. A predictor without
/// variance at some level gives `a = 0`, `b = mean(target)` there.
pub fn fit_linear_baseline(pairs: &[(Tensor, Tensor)]) -> Result<LinearBaseline> {
    if pairs.len() < 2 {
        return Err(Error::invalid("linear baseline: need at least 2 pairs"));
    }
    let p = levels_of(&pairs[0].0)?;
    let shape = pairs[0].0.shape().to_vec();
    for (x, y) in pairs {
        if x.shape() != shape.as_slice() || y.shape() != shape.as_slice() {
            return Err(Error::shape("linear baseline", x.shape(), y.shape()));
        }
    }
    let plane = shape[1] * shape[2];
    let (mut a, mut b) = (vec![0.0; p], vec![0.0; p]);
    for l in 0..p {
        let r = l * plane..(l + 1) * plane;
        let n = (pairs.len() * plane) as f64;
        let (mut sx, mut sy, mut mx) = (0.0, 0.0, 0.0f64);
        for (x, y) in pairs {
            sx += x.data()[r.clone()].iter().sum::<f64>();
            sy += y.data()[r.clone()].iter().sum::<f64>();
            mx = x.data()[r.clone()].iter().fold(mx, |m, v| m.max(v.abs()));
        }
        let (xbar, ybar) = (sx / n, sy / n);
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for (x, y) in pairs {
            for (xv, yv) in x.data()[r.clone()].iter().zip(&y.data()[r.clone()]) {
                sxx += (xv - xbar) * (xv - xbar);
                sxy += (xv - xbar) * (yv - ybar);
            }
        }
        // Variance indistinguishable from rounding noise counts as none.
        let noise = 16.0 * f64::EPSILON * mx;
        if sxx / n <= noise * noise {
            a[l] = 0.0;
            b[l] = ybar;
        } else {
            a[l] = sxy / sxx;
            b[l] = ybar - a[l] * xbar;
        }
    }
    Ok(LinearBaseline { a, b })
}

/// Applies the per-level fit to a `[P][H][W]` predictor.
pub fn predict_linear_baseline(fit: &LinearBaseline, x: &Tensor) -> Result<Tensor> {
    let p = levels_of(x)?;
    if p != fit.a.len() {
        return Err(Error::shape("linear baseline", x.shape(), &[fit.a.len()]));
    }
    let plane = x.len() / p.max(1);
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let l = i / plane;
            fit.a[l] * v + fit.b[l]
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
