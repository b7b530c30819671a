use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    affine_level, batchnorm, conv3d, conv_full, conv_separable, convlstm_cell, maxpool3d, upsample3d, BnConfig,
    ConvLstmWeights, Mode,
};
use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Tolerance every layer must meet in [`layer_grad_checks`].
pub const LAYER_GRAD_TOLERANCE: f64 = 1e-6;

/// Worst central-difference disagreement of one layer over all its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub max_rel_error: f64,
    /// Input draws rejected as ill-conditioned before the checked one.
    pub redraws: usize,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < LAYER_GRAD_TOLERANCE
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("length matches shape")
}

/// Distinct values 0.01 apart in random order, so no pooling window holds a
/// near tie.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("length matches shape")
}

/// Weighted sum with fixed weights.
fn probe<'t>(y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(y.tape().constant(w.clone()))?.sum())
}

/// Binds `args` with argument `k` replaced by `v`.
fn bind<'t>(tape: &'t Tape, args: &[Tensor], k: usize, v: Var<'t>) -> Vec<Var<'t>> {
    args.iter()
        .enumerate()
        .map(|(i, a)| if i == k { v } else { tape.constant(a.clone()) })
        .collect()
}

/// True when no nonzero gradient entry is below 1e-3 of the RMS entry.
/// Central differences carry about 1e-11 of absolute rounding noise, so a
/// gradient entry that cancels to near zero cannot meet a relative tolerance
/// and says nothing about the adjoint.
fn well_conditioned<F>(args: &[Tensor], checked: usize, f: &F) -> Result<bool>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = args.iter().map(|a| tape.leaf(a.clone())).collect();
    let grads = tape.backward(f(&tape, &leaves)?)?;
    for v in &leaves[..checked] {
        let g = grads.wrt(*v);
        let nonzero: Vec<f64> = g.data().iter().copied().filter(|x| *x != 0.0).collect();
        if nonzero.is_empty() {
            continue;
        }
        let rms = (nonzero.iter().map(|x| x * x).sum::<f64>() / nonzero.len() as f64).sqrt();
        if nonzero.iter().any(|x| x.abs() < 1e-3 * rms) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Draws inputs until they are well conditioned, then checks `f` with
/// respect to each of the first `checked` arguments in turn, the others held
/// fixed. Later arguments are output weights.
fn check_layer<G, F>(layer: &'static str, checked: usize, rng: &mut ChaCha8Rng, mut draw: G, f: F) -> Result<LayerCheck>
where
    G: FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    const MAX_DRAWS: usize = 50;
    for redraws in 0..MAX_DRAWS {
        let args = draw(rng);
        if !well_conditioned(&args, checked, &f)? {
            continue;
        }
        let mut worst: f64 = 0.0;
        for k in 0..checked {
            let err = grad_check(|tape, v| f(tape, &bind(tape, &args, k, v)), &args[k], 1e-5)?;
            worst = worst.max(err);
        }
        return Ok(LayerCheck {
            layer,
            max_rel_error: worst,
            redraws,
        });
    }
    Err(Error::invalid(format!(
        "gradcheck: no well-conditioned input for {layer} in {MAX_DRAWS} draws"
    )))
}

/// Central-difference checks of every layer at seeded random inputs with
/// no kink inside the step. One entry per layer, in a fixed order.
///
/// Where a layer is linear in an argument, inputs and output weights are
/// drawn positive so gradient entries are sums without cancellation.
pub fn layer_grad_checks(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c_in, c_out, p, h, w) = (2, 3, 3, 4, 4);
    let xs = [c_in, p, h, w];
    let ys = [c_out, p, h, w];
    let mut out = Vec::new();

    out.push(check_layer(
        "conv3d",
        3,
        &mut rng,
        |r| {
            vec![
                uniform(&xs, 0.5, 1.5, r),
                uniform(&[c_out, c_in, 3, 3, 3], 0.1, 0.5, r),
                uniform(&[c_out], -0.5, 0.5, r),
                uniform(&ys, 0.5, 1.5, r),
            ]
        },
        |_, a| probe(conv3d(a[0], a[1], a[2])?, &a[3].value()),
    )?);

    out.push(check_layer(
        "conv_full",
        3,
        &mut rng,
        |r| {
            vec![
                uniform(&xs, 0.5, 1.5, r),
                uniform(&[p, c_out, c_in, 3, 3, 3], 0.1, 0.5, r),
                uniform(&[p, c_out], -0.5, 0.5, r),
                uniform(&ys, 0.5, 1.5, r),
            ]
        },
        |_, a| probe(conv_full(a[0], a[1], a[2])?, &a[3].value()),
    )?);

    out.push(check_layer(
        "affine_level",
        3,
        &mut rng,
        |r| {
            vec![
                uniform(&xs, 0.5, 1.5, r),
                uniform(&[c_in, p], 0.5, 1.5, r),
                uniform(&[c_in, p], -0.5, 0.5, r),
                uniform(&xs, 0.5, 1.5, r),
            ]
        },
        |_, a| probe(affine_level(a[0], a[1], a[2])?, &a[3].value()),
    )?);

    out.push(check_layer(
        "conv_separable",
        4,
        &mut rng,
        |r| {
            vec![
                uniform(&xs, 0.5, 1.5, r),
                uniform(&[c_out, c_in, 3, 3], 0.1, 0.5, r),
                uniform(&[c_out, c_out, 3], 0.1, 0.5, r),
                uniform(&[c_out], -0.5, 0.5, r),
                uniform(&ys, 0.5, 1.5, r),
            ]
        },
        |_, a| probe(conv_separable(a[0], a[1], a[2], a[3])?, &a[4].value()),
    )?);

    out.push(check_layer(
        "maxpool3d",
        1,
        &mut rng,
        |r| vec![distinct(&xs, r), uniform(&[c_in, p, h / 2, w / 2], 0.5, 1.5, r)],
        |_, a| probe(maxpool3d(a[0], [1, 2, 2])?, &a[1].value()),
    )?);

    out.push(check_layer(
        "upsample3d",
        1,
        &mut rng,
        |r| {
            vec![
                uniform(&xs, -1.0, 1.0, r),
                uniform(&[c_in, p, 2 * h, 2 * w], 0.5, 1.5, r),
            ]
        },
        |_, a| probe(upsample3d(a[0], [1, 2, 2])?, &a[1].value()),
    )?);

    let cfg = BnConfig::default();
    out.push(check_layer(
        "batchnorm",
        3,
        &mut rng,
        |r| {
            vec![
                uniform(&[2, c_in, p, h, w], -1.0, 1.0, r),
                uniform(&[c_in], 0.5, 1.5, r),
                uniform(&[c_in], -0.5, 0.5, r),
                uniform(&[2, c_in, p, h, w], -1.0, 1.0, r),
            ]
        },
        |_, a| probe(batchnorm(a[0], a[1], a[2], Mode::Train, None, &cfg)?.0, &a[3].value()),
    )?);

    // Two unrolled steps from a random state. Positive inputs, weights and
    // state keep every gate derivative of one sign.
    let ch = 2;
    let hs = [ch, p, h, w];
    out.push(check_layer(
        "convlstm_cell",
        7,
        &mut rng,
        |r| {
            vec![
                uniform(&xs, 0.2, 1.0, r),
                uniform(&[4 * ch, c_in, 3, 3, 3], 0.0, 0.1, r),
                uniform(&[4 * ch, ch, 3, 3, 3], 0.0, 0.1, r),
                uniform(&[4 * ch], -0.5, 0.5, r),
                uniform(&hs, 0.1, 0.5, r),
                uniform(&hs, 0.1, 0.5, r),
                uniform(&xs, 0.2, 1.0, r),
                uniform(&hs, 0.5, 1.5, r),
            ]
        },
        |_, a| {
            let weights = ConvLstmWeights {
                input: a[1],
                hidden: a[2],
                bias: a[3],
            };
            let (h1, c1) = convlstm_cell(a[0], a[4], a[5], &weights)?;
            let (h2, _) = convlstm_cell(a[6], h1, c1, &weights)?;
            probe(h2, &a[7].value())
        },
    )?);
    Ok(out)
}
