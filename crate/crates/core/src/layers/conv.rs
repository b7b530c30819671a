use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::he_uniform;
use crate::autodiff::{self, Tensor, Var};
use crate::error::{Error, Result};

/// Standard same-padded 3-D convolution, cross-correlation semantics.
pub fn conv3d<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    autodiff::conv3d(x, weight, Some(bias))
}

/// Convolution with a separate kernel set per output pressure level
/// (`weight` is `[P][C_out][C_in][kd][kh][kw]`, `bias` is `[P][C_out]`).
/// Each level sees the same zero-padded window a standard convolution would.
pub fn conv_full<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    autodiff::conv3d_per_level(x, weight, Some(bias))
}

/// `y[c][p] = scale[c][p] · x[c][p] + shift[c][p]` over every lat/lon point.
pub fn affine_level<'t>(x: Var<'t>, scale: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
    let nd = x.value().ndim();
    if nd < 4 {
        return Err(Error::shape("affine_level", &x.shape(), &scale.shape()));
    }
    x.scale_shift(scale, shift, nd - 4)
}

/// Horizontal 2-D convolution shared across levels (`horiz` is
/// `[C_out][C_in][kh][kw]`), then a channel-mixing 1-D convolution along the
/// level axis (`vert` is `[C_out][C_out][kd]`), then `bias`.
pub fn conv_separable<'t>(x: Var<'t>, horiz: Var<'t>, vert: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let hs = horiz.shape();
    let vs = vert.shape();
    if hs.len() != 4 || vs.len() != 3 || vs[0] != hs[0] || vs[1] != hs[0] {
        return Err(Error::shape("conv_separable", &hs, &vs));
    }
    let horiz = horiz.reshape(&[hs[0], hs[1], 1, hs[2], hs[3]])?;
    let vert = vert.reshape(&[vs[0], vs[1], vs[2], 1, 1])?;
    let mid = autodiff::conv3d(x, horiz, None)?;
    autodiff::conv3d(mid, vert, Some(bias))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvVariant {
    Standard,
    Full,
    Affine,
    Separable,
}

impl ConvVariant {
    pub const ALL: [ConvVariant; 4] = [
        ConvVariant::Standard,
        ConvVariant::Full,
        ConvVariant::Affine,
        ConvVariant::Separable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConvVariant::Standard => "standard",
            ConvVariant::Full => "full",
            ConvVariant::Affine => "affine",
            ConvVariant::Separable => "separable",
        }
    }
}

impl fmt::Display for ConvVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConvVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConvVariant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown conv variant '{s}' (expected standard, full, affine or separable)"
            ))
        })
    }
}

/// One convolution of a given variant; stride 1 with same zero padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(depth, lat, lon)` extents, all odd.
    pub kernel: [usize; 3],
    pub variant: ConvVariant,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3], variant: ConvVariant) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            variant,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("conv: channel counts must be at least 1"));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid(format!("conv: kernel {:?} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Parameter names and shapes for a grid with `levels` pressure levels.
    pub fn param_shapes(&self, levels: usize) -> Vec<(&'static str, Vec<usize>)> {
        let (ci, co) = (self.in_channels, self.out_channels);
        let [kd, kh, kw] = self.kernel;
        match self.variant {
            ConvVariant::Standard => vec![("weight", vec![co, ci, kd, kh, kw]), ("bias", vec![co])],
            ConvVariant::Full => vec![("weight", vec![levels, co, ci, kd, kh, kw]), ("bias", vec![levels, co])],
            ConvVariant::Affine => vec![
                ("weight", vec![co, ci, kd, kh, kw]),
                ("bias", vec![co]),
                ("scale", vec![co, levels]),
                ("shift", vec![co, levels]),
            ],
            ConvVariant::Separable => vec![
                ("horiz", vec![co, ci, kh, kw]),
                ("vert", vec![co, co, kd]),
                ("bias", vec![co]),
            ],
        }
    }

    pub fn param_count(&self, levels: usize) -> usize {
        self.param_shapes(levels)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// He-uniform weights, zero biases and shifts, unit scales.
    pub fn init(&self, levels: usize, rng: &mut impl Rng) -> Vec<(&'static str, Tensor)> {
        let [kd, kh, kw] = self.kernel;
        self.param_shapes(levels)
            .into_iter()
            .map(|(name, shape)| {
                let t = match name {
                    "weight" => he_uniform(&shape, self.in_channels * kd * kh * kw, rng),
                    "horiz" => he_uniform(&shape, self.in_channels * kh * kw, rng),
                    "vert" => he_uniform(&shape, self.out_channels * kd, rng),
                    "scale" => Tensor::full(&shape, 1.0),
                    _ => Tensor::zeros(&shape),
                };
                (name, t)
            })
            .collect()
    }

    /// Applies the convolution, looking parameters up by their short names.
    pub fn forward<'t>(&self, x: Var<'t>, param: impl Fn(&str) -> Result<Var<'t>>) -> Result<Var<'t>> {
        match self.variant {
            ConvVariant::Standard => conv3d(x, param("weight")?, param("bias")?),
            ConvVariant::Full => conv_full(x, param("weight")?, param("bias")?),
            ConvVariant::Affine => {
                let y = conv3d(x, param("weight")?, param("bias")?)?;
                affine_level(y, param("scale")?, param("shift")?)
            }
            ConvVariant::Separable => conv_separable(x, param("horiz")?, param("vert")?, param("bias")?),
        }
    }
}
