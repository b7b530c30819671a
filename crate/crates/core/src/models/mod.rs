//! Model assembly: the 3D U-Net with a selectable convolution variant, a
//! ConvLSTM temporal net, named parameter stores, checkpoints and the
//! per-level linear regression baseline.

mod checkpoint;
mod gradcheck;
mod linear;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use gradcheck::{model_grad_check, ModelGradCheck, MODEL_GRAD_TOLERANCE};
pub use linear::{fit_linear_baseline, predict_linear_baseline, LinearBaseline};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, BatchStats, Tape, Tensor, Var};
use crate::dataio::KeyValues;
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm, convlstm_cell, maxpool3d, upsample3d, BnConfig, ConvLstmWeights, ConvSpec, ConvVariant, Mode,
    RunningStats,
};

/// Which inputs the model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemporalMode {
    /// Raw member fields packed as channels.
    None,
    /// Spread at the early forecast times for one level.
    SpreadChannels,
    /// As above plus the control trajectory's initial parameters.
    SpreadChannelsPlusIp,
}

impl TemporalMode {
    pub const ALL: [TemporalMode; 3] = [
        TemporalMode::None,
        TemporalMode::SpreadChannels,
        TemporalMode::SpreadChannelsPlusIp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemporalMode::None => "none",
            TemporalMode::SpreadChannels => "spread",
            TemporalMode::SpreadChannelsPlusIp => "spread+ip",
        }
    }
}

impl fmt::Display for TemporalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemporalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemporalMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown temporal mode '{s}' (expected none, spread or spread+ip)"
            ))
        })
    }
}

/// Network family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    UNet,
    /// ConvLSTM over the spread time steps, then a 1×1×1 head.
    ConvLstm,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::UNet => "unet",
            Arch::ConvLstm => "convlstm",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Arch::UNet),
            "convlstm" => Ok(Arch::ConvLstm),
            _ => Err(Error::invalid(format!(
                "unknown architecture '{s}' (expected unet or convlstm)"
            ))),
        }
    }
}

const MAX_DEPTH: usize = 16;
const MAX_KERNEL: usize = 63;
const MAX_CHANNELS: usize = 1 << 16;
/// Checkpoints index values with 32 bits; this leaves ample headroom.
const MAX_PARAMS: usize = 1 << 28;

/// Model topology.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    /// Number of pooling stages.
    pub depth: usize,
    pub conv_variant: ConvVariant,
    pub temporal_mode: TemporalMode,
    pub seed: u64,
    /// Extent of the level axis the model is built for.
    pub n_levels: usize,
    pub n_lat: usize,
    pub n_lon: usize,
    /// `(level, lat, lon)` kernel extent of every non-head convolution.
    pub kernel: [usize; 3],
    /// Samples per batch-norm statistic in train mode.
    pub bn_group: usize,
    /// Spread time steps fed to the ConvLSTM (leading input channels).
    pub time_steps: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            arch: Arch::UNet,
            in_channels: 6,
            out_channels: 1,
            base_channels: 32,
            depth: 2,
            conv_variant: ConvVariant::Standard,
            temporal_mode: TemporalMode::None,
            seed: 0,
            n_levels: 7,
            n_lat: 20,
            n_lon: 32,
            kernel: [3, 3, 3],
            bn_group: 1,
            time_steps: 2,
        }
    }
}

impl ModelSpec {
    pub const KEYS: [&'static str; 14] = [
        "arch",
        "in_channels",
        "out_channels",
        "base_channels",
        "depth",
        "conv_variant",
        "temporal_mode",
        "model_seed",
        "n_levels",
        "n_lat",
        "n_lon",
        "kernel",
        "bn_group",
        "time_steps",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("model: channel counts must be at least 1"));
        }
        if self.n_levels == 0 || self.n_lat == 0 || self.n_lon == 0 {
            return Err(Error::invalid("model: grid extents must be at least 1"));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid(format!("model: kernel {:?} must be odd", self.kernel)));
        }
        if self.bn_group == 0 {
            return Err(Error::invalid("model: bn_group must be at least 1"));
        }
        if self.depth > MAX_DEPTH || self.kernel.iter().any(|&k| k > MAX_KERNEL) {
            return Err(Error::invalid(format!(
                "model: depth {} or kernel {:?} out of range (at most {MAX_DEPTH} and {MAX_KERNEL})",
                self.depth, self.kernel
            )));
        }
        let widest = [
            self.in_channels,
            self.out_channels,
            self.base_channels.checked_mul(1 << self.depth).unwrap_or(usize::MAX),
        ];
        if widest.iter().any(|&c| c > MAX_CHANNELS) {
            return Err(Error::invalid(format!(
                "model: more than {MAX_CHANNELS} channels in some layer"
            )));
        }
        match self.arch {
            Arch::UNet => {
                if self.depth == 0 {
                    return Err(Error::invalid("model: depth must be at least 1"));
                }
                let f = 1usize.checked_shl(self.depth as u32).unwrap_or(0);
                if f == 0 || self.n_lat % f != 0 || self.n_lon % f != 0 {
                    return Err(Error::invalid(format!(
                        "model: lat/lon {}x{} not divisible by 2^{}",
                        self.n_lat, self.n_lon, self.depth
                    )));
                }
            }
            Arch::ConvLstm => {
                if self.temporal_mode == TemporalMode::None {
                    return Err(Error::invalid("model: convlstm needs a temporal mode"));
                }
                if self.time_steps == 0 || self.time_steps > self.in_channels {
                    return Err(Error::invalid("model: time_steps must be in 1..=in_channels"));
                }
            }
        }
        let count = self.param_shapes().iter().try_fold(0usize, |acc, (_, s)| {
            s.iter()
                .try_fold(1usize, |n, &d| n.checked_mul(d))
                .and_then(|n| acc.checked_add(n))
        });
        if count.is_none_or(|n| n > MAX_PARAMS) {
            return Err(Error::invalid(format!("model: more than {MAX_PARAMS} parameters")));
        }
        Ok(())
    }

    /// Overrides fields from `key=value` entries (keys in [`ModelSpec::KEYS`]).
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! set {
            ($key:literal, $field:ident) => {
                if let Some(v) = kv.optional($key)? {
                    self.$field = v;
                }
            };
        }
        set!("arch", arch);
        set!("in_channels", in_channels);
        set!("out_channels", out_channels);
        set!("base_channels", base_channels);
        set!("depth", depth);
        set!("conv_variant", conv_variant);
        set!("temporal_mode", temporal_mode);
        set!("model_seed", seed);
        set!("n_levels", n_levels);
        set!("n_lat", n_lat);
        set!("n_lon", n_lon);
        set!("bn_group", bn_group);
        set!("time_steps", time_steps);
        if let Some(k) = kv.list::<usize>("kernel")? {
            self.kernel = k
                .try_into()
                .map_err(|_| Error::invalid("model: kernel needs three extents"))?;
        }
        Ok(())
    }

    /// `key=value` text readable by [`ModelSpec::apply`].
    pub fn to_text(&self) -> String {
        format!(
            "arch={}\nin_channels={}\nout_channels={}\nbase_channels={}\ndepth={}\nconv_variant={}\n\
             temporal_mode={}\nmodel_seed={}\nn_levels={}\nn_lat={}\nn_lon={}\nkernel={},{},{}\nbn_group={}\ntime_steps={}\n",
            self.arch,
            self.in_channels,
            self.out_channels,
            self.base_channels,
            self.depth,
            self.conv_variant,
            self.temporal_mode,
            self.seed,
            self.n_levels,
            self.n_lat,
            self.n_lon,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
            self.bn_group,
            self.time_steps
        )
    }

    fn conv(&self, c_in: usize, c_out: usize) -> ConvSpec {
        ConvSpec {
            in_channels: c_in,
            out_channels: c_out,
            kernel: self.kernel,
            variant: self.conv_variant,
        }
    }

    fn head(&self, c_in: usize) -> ConvSpec {
        ConvSpec {
            in_channels: c_in,
            out_channels: self.out_channels,
            kernel: [1, 1, 1],
            variant: ConvVariant::Standard,
        }
    }

    /// The double-conv blocks of the U-Net in evaluation order:
    /// `(name, in_channels, out_channels)`.
    pub fn unet_blocks(&self) -> Vec<(String, usize, usize)> {
        let b = self.base_channels;
        let width = |i: usize| b << i;
        let mut blocks = Vec::new();
        for i in 0..self.depth {
            let c_in = if i == 0 { self.in_channels } else { width(i - 1) };
            blocks.push((format!("enc{i}"), c_in, width(i)));
        }
        blocks.push(("mid".to_string(), width(self.depth - 1), width(self.depth)));
        for i in (0..self.depth).rev() {
            blocks.push((format!("dec{i}"), width(i + 1) + width(i), width(i)));
        }
        blocks
    }

    /// Names and shapes of every learnable tensor, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let p = self.n_levels;
        match self.arch {
            Arch::UNet => {
                for (name, c_in, c_out) in self.unet_blocks() {
                    for (k, ci) in [(0, c_in), (1, c_out)] {
                        for (n, s) in self.conv(ci, c_out).param_shapes(p) {
                            out.push((format!("{name}.conv{k}.{n}"), s));
                        }
                        out.push((format!("{name}.bn{k}.gamma"), vec![c_out]));
                        out.push((format!("{name}.bn{k}.beta"), vec![c_out]));
                    }
                }
                for (n, s) in self.head(self.base_channels).param_shapes(p) {
                    out.push((format!("head.{n}"), s));
                }
            }
            Arch::ConvLstm => {
                let c_in = self.in_channels - self.time_steps + 1;
                for (n, s) in ConvLstmWeights::shapes(c_in, self.base_channels, self.kernel) {
                    out.push((format!("lstm.{n}"), s));
                }
                for (n, s) in self.head(self.base_channels).param_shapes(p) {
                    out.push((format!("head.{n}"), s));
                }
            }
        }
        out
    }

    /// Batch-norm layer names and channel counts.
    pub fn norm_layers(&self) -> Vec<(String, usize)> {
        match self.arch {
            Arch::UNet => self
                .unet_blocks()
                .into_iter()
                .flat_map(|(name, _, c)| [(format!("{name}.bn0"), c), (format!("{name}.bn1"), c)])
                .collect(),
            Arch::ConvLstm => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named learnable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
    pub running: BTreeMap<String, RunningStats>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("model: no parameter named '{name}'")))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape`, tracked or constant.
    pub fn bind<'t>(&self, tape: &'t Tape, track: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if track {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters registered on one tape.
pub struct Bound<'t> {
    pub vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("model: no parameter named '{name}'")))
    }
}

/// Output of one forward pass.
pub struct ForwardOut<'t> {
    pub output: Var<'t>,
    /// Train-mode batch statistics per norm layer.
    pub norm_stats: Vec<(String, BatchStats)>,
}

/// A model: topology plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

impl Model {
    /// Builds and deterministically initializes a model from `spec.seed`.
    pub fn build(spec: ModelSpec) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut tensors = BTreeMap::new();
        let p = spec.n_levels;
        let mut insert = |prefix: String, items: Vec<(&'static str, Tensor)>| {
            for (n, t) in items {
                tensors.insert(format!("{prefix}.{n}"), t);
            }
        };
        match spec.arch {
            Arch::UNet => {
                for (name, c_in, c_out) in spec.unet_blocks() {
                    for (k, ci) in [(0, c_in), (1, c_out)] {
                        insert(format!("{name}.conv{k}"), spec.conv(ci, c_out).init(p, &mut rng));
                        insert(
                            format!("{name}.bn{k}"),
                            vec![
                                ("gamma", Tensor::full(&[c_out], 1.0)),
                                ("beta", Tensor::zeros(&[c_out])),
                            ],
                        );
                    }
                }
            }
            Arch::ConvLstm => {
                let c_in = spec.in_channels - spec.time_steps + 1;
                insert(
                    "lstm".into(),
                    ConvLstmWeights::init(c_in, spec.base_channels, spec.kernel, &mut rng),
                );
            }
        }
        insert("head".into(), spec.head(spec.base_channels).init(p, &mut rng));
        let running = spec
            .norm_layers()
            .into_iter()
            .map(|(n, c)| (n, RunningStats::new(c)))
            .collect();
        let model = Model {
            params: ModelParams { tensors, running },
            spec,
        };
        model.check_params()?;
        Ok(model)
    }

    /// Asserts the parameter store matches the topology exactly.
    pub fn check_params(&self) -> Result<()> {
        let shapes = self.spec.param_shapes();
        if shapes.len() != self.params.tensors.len() {
            return Err(Error::invalid(format!(
                "model: {} tensors, topology needs {}",
                self.params.tensors.len(),
                shapes.len()
            )));
        }
        for (name, shape) in &shapes {
            let t = self.params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("model parameter", t.shape(), shape));
            }
        }
        let norms = self.spec.norm_layers();
        if norms.len() != self.params.running.len() {
            return Err(Error::invalid("model: running statistics do not match norm layers"));
        }
        for (name, c) in norms {
            match self.params.running.get(&name) {
                Some(r) if r.mean.len() == c && r.var.len() == c => {}
                _ => return Err(Error::invalid(format!("model: bad running statistics for '{name}'"))),
            }
        }
        if self.params.count() != self.spec.param_count() {
            return Err(Error::invalid("model: parameter count differs from topology"));
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = &self.spec;
        if shape.len() != 5 {
            return Err(Error::invalid(format!(
                "model: expected a [N][C][P][H][W] batch, got shape {shape:?}"
            )));
        }
        if shape[1] != s.in_channels {
            return Err(Error::invalid(format!(
                "model: expected {} input channels, got {}",
                s.in_channels, shape[1]
            )));
        }
        let levels_fixed = matches!(s.conv_variant, ConvVariant::Full | ConvVariant::Affine);
        if levels_fixed && shape[2] != s.n_levels {
            return Err(Error::invalid(format!(
                "model: expected {} levels, got {}",
                s.n_levels, shape[2]
            )));
        }
        if s.arch == Arch::UNet {
            let f = 1 << s.depth;
            if shape[3] % f != 0 || shape[4] % f != 0 {
                return Err(Error::invalid(format!(
                    "model: lat/lon {}x{} not divisible by {f}",
                    shape[3], shape[4]
                )));
            }
        }
        Ok(())
    }

    /// Forward pass on a batch `[N][C][P][H][W]` (an unbatched
    /// `[C][P][H][W]` input yields an unbatched output).
    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>, mode: Mode) -> Result<ForwardOut<'t>> {
        let shape = x.shape();
        let unbatched = shape.len() == 4;
        let x = if unbatched {
            x.reshape(&[&[1][..], &shape[..]].concat())?
        } else {
            x
        };
        self.check_input(&x.shape())?;
        let mut ctx = NormCtx {
            mode,
            running: &self.params.running,
            cfg: BnConfig {
                group: Some(self.spec.bn_group),
                ..BnConfig::default()
            },
            stats: Vec::new(),
        };
        let y = match self.spec.arch {
            Arch::UNet => self.unet(bound, x, &mut ctx)?,
            Arch::ConvLstm => self.lstm(bound, x)?,
        };
        let y = self
            .spec
            .head(self.spec.base_channels)
            .forward(y, |n| bound.get(&format!("head.{n}")))?;
        let output = if unbatched {
            let s = y.shape();
            y.reshape(&s[1..])?
        } else {
            y
        };
        Ok(ForwardOut {
            output,
            norm_stats: ctx.stats,
        })
    }

    fn block<'t>(
        &self,
        bound: &Bound<'t>,
        name: &str,
        c_in: usize,
        c_out: usize,
        x: Var<'t>,
        ctx: &mut NormCtx,
    ) -> Result<Var<'t>> {
        let mut y = x;
        for (k, ci) in [(0, c_in), (1, c_out)] {
            y = self
                .spec
                .conv(ci, c_out)
                .forward(y, |n| bound.get(&format!("{name}.conv{k}.{n}")))?;
            y = ctx.norm(bound, &format!("{name}.bn{k}"), y)?;
            y = y.relu();
        }
        Ok(y)
    }

    fn unet<'t>(&self, bound: &Bound<'t>, x: Var<'t>, ctx: &mut NormCtx) -> Result<Var<'t>> {
        let blocks = self.spec.unet_blocks();
        let d = self.spec.depth;
        let mut skips = Vec::with_capacity(d);
        let mut y = x;
        for (name, ci, co) in &blocks[..d] {
            y = self.block(bound, name, *ci, *co, y, ctx)?;
            skips.push(y);
            y = maxpool3d(y, [1, 2, 2])?;
        }
        let (name, ci, co) = &blocks[d];
        y = self.block(bound, name, *ci, *co, y, ctx)?;
        for (name, ci, co) in &blocks[d + 1..] {
            let skip = skips.pop().expect("one skip per stage");
            y = concat(&[upsample3d(y, [1, 2, 2])?, skip], 1)?;
            y = self.block(bound, name, *ci, *co, y, ctx)?;
        }
        Ok(y)
    }

    fn lstm<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let steps = self.spec.time_steps;
        let tape = x.tape();
        let w = ConvLstmWeights {
            input: bound.get("lstm.input")?,
            hidden: bound.get("lstm.hidden")?,
            bias: bound.get("lstm.bias")?,
        };
        let state = [s[0], self.spec.base_channels, s[2], s[3], s[4]];
        let mut h = tape.constant(Tensor::zeros(&state));
        let mut c = tape.constant(Tensor::zeros(&state));
        let extra = (steps < s[1]).then(|| x.slice(1, steps, s[1] - steps)).transpose()?;
        for k in 0..steps {
            let xt = x.slice(1, k, 1)?;
            let xt = match extra {
                Some(e) => concat(&[xt, e], 1)?,
                None => xt,
            };
            (h, c) = convlstm_cell(xt, h, c, &w)?;
        }
        Ok(h)
    }

    /// Eval-mode prediction for a batch or single input.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let out = self.forward(&bound, tape.constant(x.clone()), Mode::Eval)?;
        let value = out.output.value();
        Ok((*value).clone())
    }
}

struct NormCtx<'a> {
    mode: Mode,
    running: &'a BTreeMap<String, RunningStats>,
    cfg: BnConfig,
    stats: Vec<(String, BatchStats)>,
}

impl NormCtx<'_> {
    fn norm<'t>(&mut self, bound: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = bound.get(&format!("{name}.gamma"))?;
        let beta = bound.get(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = batchnorm(x, gamma, beta, Mode::Train, None, &self.cfg)?;
                self.stats
                    .push((name.to_string(), stats.expect("train mode returns statistics")));
                Ok(y)
            }
            Mode::Eval => {
                let mut r = self
                    .running
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("model: no running statistics for '{name}'")))?;
                Ok(batchnorm(x, gamma, beta, Mode::Eval, Some(&mut r), &self.cfg)?.0)
            }
        }
    }
}

/// Folds one step's batch statistics into the running statistics.
pub fn update_running(params: &mut ModelParams, stats: &[(String, BatchStats)], momentum: f64) -> Result<()> {
    for (name, s) in stats {
        params
            .running
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("model: no running statistics for '{name}'")))?
            .update(s, momentum)?;
    }
    Ok(())
}
