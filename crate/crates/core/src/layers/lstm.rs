use rand::Rng;

use super::he_uniform;
use crate::autodiff::{self, Tensor, Var};
use crate::error::{Error, Result};

/// Gate weights of a ConvLSTM cell. Gate blocks along the output-channel
/// axis are ordered input, forget, output, candidate.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmWeights<'t> {
    /// `[4·C_h][C_in][kd][kh][kw]`
    pub input: Var<'t>,
    /// `[4·C_h][C_h][kd][kh][kw]`
    pub hidden: Var<'t>,
    /// `[4·C_h]`
    pub bias: Var<'t>,
}

impl ConvLstmWeights<'_> {
    pub fn shapes(c_in: usize, c_hidden: usize, kernel: [usize; 3]) -> [(&'static str, Vec<usize>); 3] {
        let [kd, kh, kw] = kernel;
        [
            ("input", vec![4 * c_hidden, c_in, kd, kh, kw]),
            ("hidden", vec![4 * c_hidden, c_hidden, kd, kh, kw]),
            ("bias", vec![4 * c_hidden]),
        ]
    }

    pub fn init(c_in: usize, c_hidden: usize, kernel: [usize; 3], rng: &mut impl Rng) -> Vec<(&'static str, Tensor)> {
        let taps: usize = kernel.iter().product();
        Self::shapes(c_in, c_hidden, kernel)
            .into_iter()
            .map(|(name, shape)| {
                let t = match name {
                    "input" => he_uniform(&shape, c_in * taps, rng),
                    "hidden" => he_uniform(&shape, c_hidden * taps, rng),
                    _ => Tensor::zeros(&shape),
                };
                (name, t)
            })
            .collect()
    }
}

/// One ConvLSTM step without peephole terms:
///
/// ```text
/// i, f, o = σ(W_x * x + W_h * h + b)   g = tanh(W_x * x + W_h * h + b)
/// c' = f ⊙ c + i ⊙ g                   h' = o ⊙ tanh(c')
/// ```
///
/// Inputs may be `[C][P][H][W]` or batched `[N][C][P][H][W]`.
pub fn convlstm_cell<'t>(
    x: Var<'t>,
    h_prev: Var<'t>,
    c_prev: Var<'t>,
    w: &ConvLstmWeights<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let hs = h_prev.shape();
    if hs != c_prev.shape() || hs.len() < 4 {
        return Err(Error::shape("convlstm_cell", &hs, &c_prev.shape()));
    }
    let axis = hs.len() - 4;
    let ch = hs[axis];
    let pre = autodiff::conv3d(x, w.input, Some(w.bias))?.add(autodiff::conv3d(h_prev, w.hidden, None)?)?;
    if pre.shape()[axis] != 4 * ch {
        return Err(Error::shape("convlstm_cell", &pre.shape(), &hs));
    }
    let gate = |k: usize| pre.slice(axis, k * ch, ch);
    let i = gate(0)?.sigmoid();
    let f = gate(1)?.sigmoid();
    let o = gate(2)?.sigmoid();
    let g = gate(3)?.tanh();
    let c = f.mul(c_prev)?.add(i.mul(g)?)?;
    let h = o.mul(c.tanh())?;
    Ok((h, c))
}
