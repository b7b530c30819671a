use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bound, Model, ModelSpec};
use crate::autodiff::{concat, grad_check_report, GradCheckReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::layers::{ConvVariant, Mode};
use crate::models::Arch;
use crate::train::mse_loss;

/// Tolerance for the end-to-end check.
pub const MODEL_GRAD_TOLERANCE: f64 = 1e-5;

/// Outcome of [`model_grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheck {
    /// Central differences over every parameter not listed below, plus the input.
    pub report: GradCheckReport,
    /// Parameters whose true gradient is exactly zero, and the largest tape
    /// gradient entry among them.
    pub zero_gradient: Vec<String>,
    pub zero_gradient_max: f64,
    /// Parameters left out because their gradient is only eps-sized.
    pub skipped: Vec<String>,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < MODEL_GRAD_TOLERANCE
            && self.zero_gradient_max < 1e-10
            && self.report.kinks.len() * 100 <= self.report.checked
    }
}

/// A convolution bias that is constant across levels feeds a batch norm, whose
/// mean subtraction removes it. On a single level the same holds for the
/// affine shift and the full variant's per-level bias.
fn zero_gradient(spec: &ModelSpec, name: &str) -> bool {
    if spec.arch != Arch::UNet || !name.contains(".conv") {
        return false;
    }
    let single = spec.n_levels == 1;
    let level_constant = spec.conv_variant != ConvVariant::Full || single;
    (level_constant && name.ends_with(".bias")) || (single && name.ends_with(".shift"))
}

/// On one level the affine scale multiplies a channel that batch norm then
/// rescales, so its gradient is of the order of the norm's eps.
fn eps_sized(spec: &ModelSpec, name: &str) -> bool {
    spec.arch == Arch::UNet && spec.n_levels == 1 && name.contains(".conv") && name.ends_with(".scale")
}

/// Rebuilds the full flat vector from the checked coordinates `v` and the
/// fixed runs of `flat`.
fn unpack<'t>(tape: &'t Tape, v: Var<'t>, runs: &[(bool, usize, usize)], flat: &[f64]) -> Result<Var<'t>> {
    let mut pieces = Vec::with_capacity(runs.len());
    let mut pos = 0;
    for &(kept, start, len) in runs {
        if kept {
            pieces.push(v.slice(0, pos, len)?);
            pos += len;
        } else {
            pieces.push(tape.constant(Tensor::from_vec(flat[start..start + len].to_vec())));
        }
    }
    concat(&pieces, 0)
}

/// Kink-aware central-difference check of the mean-squared loss of a freshly
/// initialized model in train mode, over the parameters and the input.
pub fn model_grad_check(spec: &ModelSpec, batch: usize, seed: u64) -> Result<ModelGradCheck> {
    let model = Model::build(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: &[usize]| -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let (p, h, w) = (spec.n_levels, spec.n_lat, spec.n_lon);
    let x = uniform(&[batch, spec.in_channels, p, h, w])?;
    let target = uniform(&[batch, spec.out_channels, p, h, w])?;

    // Every parameter, then the input, in one flat vector.
    let mut layout = Vec::new();
    let mut flat = Vec::new();
    for (name, t) in &model.params.tensors {
        layout.push((name.clone(), t.shape().to_vec(), flat.len()));
        flat.extend_from_slice(t.data());
    }
    let x_offset = flat.len();
    flat.extend_from_slice(x.data());

    let tape = Tape::new();
    let bound = model.params.bind(&tape, true);
    let y = model.forward(&bound, tape.constant(x.clone()), Mode::Train)?.output;
    let grads = tape.backward(mse_loss(y, tape.constant(target.clone()))?)?;
    let zero: Vec<String> = layout
        .iter()
        .map(|e| e.0.clone())
        .filter(|n| zero_gradient(spec, n))
        .collect();
    let skipped: Vec<String> = layout
        .iter()
        .map(|e| e.0.clone())
        .filter(|n| eps_sized(spec, n))
        .collect();
    let zero_gradient_max = zero
        .iter()
        .flat_map(|n| grads.wrt(bound.vars[n]).data().to_vec())
        .fold(0.0f64, |m, g| m.max(g.abs()));

    let excluded: Vec<(usize, usize)> = layout
        .iter()
        .filter(|(n, _, _)| zero.contains(n) || skipped.contains(n))
        .map(|(_, s, o)| (*o, s.iter().product()))
        .collect();
    let keep: Vec<usize> = (0..flat.len())
        .filter(|i| !excluded.iter().any(|(o, n)| (*o..o + n).contains(i)))
        .collect();
    // Contiguous runs of kept and fixed coordinates.
    let mut runs: Vec<(bool, usize, usize)> = Vec::new();
    let mut k = 0;
    let mut i = 0;
    while i < flat.len() {
        let kept = k < keep.len() && keep[k] == i;
        let start = i;
        while i < flat.len() && (k < keep.len() && keep[k] == i) == kept {
            if kept {
                k += 1;
            }
            i += 1;
        }
        runs.push((kept, start, i - start));
    }
    let checked = Tensor::from_vec(keep.iter().map(|&i| flat[i]).collect());
    let report = grad_check_report(
        |tape, v| {
            let full = unpack(tape, v, &runs, &flat)?;
            let mut vars = BTreeMap::new();
            for (name, shape, off) in &layout {
                vars.insert(
                    name.clone(),
                    full.slice(0, *off, shape.iter().product())?.reshape(shape)?,
                );
            }
            let xv = full.slice(0, x_offset, x.len())?.reshape(x.shape())?;
            let y = model.forward(&Bound { vars }, xv, Mode::Train)?.output;
            mse_loss(y, tape.constant(target.clone()))
        },
        &checked,
        1e-5,
        MODEL_GRAD_TOLERANCE,
    )?;
    Ok(ModelGradCheck {
        report,
        zero_gradient: zero,
        zero_gradient_max,
        skipped,
    })
}
