use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::dataio::{join, KeyValues, StatsFile};
use crate::error::{Error, Result};
use crate::grids::{
    channel_pack, ensemble_spread, standardize, EnsembleSample, Field, GridSpec, NormAccumulator, STD_FLOOR,
};
use crate::models::TemporalMode;

/// Which slabs become model inputs and which spread is the target.
#[derive(Clone, Debug, PartialEq)]
pub struct InputConfig {
    pub temporal_mode: TemporalMode,
    /// Raw mode: members `0..m` are packed as inputs.
    pub m_trajectories: usize,
    /// Raw mode: member field times; temporal modes: spread times.
    pub input_times: Vec<usize>,
    /// Raw mode parameters (the IP channels in temporal modes are all parameters).
    pub params: Vec<usize>,
    pub target_param: usize,
    pub target_time: usize,
    /// Temporal modes predict one level at a time.
    pub level: usize,
}

impl InputConfig {
    /// Raw member fields of members `0..m` at every forecast time, all
    /// parameters; target is the spread of `t` (or parameter 0) at the last time.
    pub fn raw(spec: &GridSpec, m: usize) -> Self {
        InputConfig {
            temporal_mode: TemporalMode::None,
            m_trajectories: m,
            input_times: (0..spec.n_times()).collect(),
            params: (0..spec.n_params).collect(),
            target_param: spec.param_index("t").unwrap_or(0),
            target_time: spec.n_times() - 1,
            level: 0,
        }
    }

    /// Full-ensemble spread at every time but the last, optionally with the
    /// control's initial parameters, one level at a time.
    pub fn temporal(spec: &GridSpec, mode: TemporalMode, level: usize) -> Self {
        InputConfig {
            temporal_mode: mode,
            m_trajectories: 1,
            input_times: (0..spec.n_times().saturating_sub(1)).collect(),
            level,
            ..Self::raw(spec, 1)
        }
    }

    /// Keys accepted by [`InputConfig::from_kv`].
    pub const KEYS: [&'static str; 7] = [
        "temporal_mode",
        "m_trajectories",
        "input_times",
        "input_params",
        "target_param",
        "target_time",
        "level",
    ];

    /// Starts from [`InputConfig::raw`] with one trajectory, or from
    /// [`InputConfig::temporal`] when `temporal_mode` is set, then applies
    /// the remaining keys. Parameters may be given by name or index.
    pub fn from_kv(spec: &GridSpec, kv: &KeyValues) -> Result<Self> {
        let mode = kv.optional("temporal_mode")?.unwrap_or(TemporalMode::None);
        let mut cfg = match mode {
            TemporalMode::None => Self::raw(spec, 1),
            _ => Self::temporal(spec, mode, 0),
        };
        let param = |name: &str| -> Result<usize> {
            spec.param_index(name)
                .or_else(|| name.parse().ok().filter(|&i| i < spec.n_params))
                .ok_or_else(|| Error::invalid(format!("inputs: unknown parameter '{name}'")))
        };
        if let Some(v) = kv.optional("m_trajectories")? {
            cfg.m_trajectories = v;
        }
        if let Some(v) = kv.list("input_times")? {
            cfg.input_times = v;
        }
        if let Some(v) = kv.list::<String>("input_params")? {
            cfg.params = v.iter().map(|n| param(n)).collect::<Result<_>>()?;
        }
        if let Some(v) = kv.optional::<String>("target_param")? {
            cfg.target_param = param(&v)?;
        }
        if let Some(v) = kv.optional("target_time")? {
            cfg.target_time = v;
        }
        if let Some(v) = kv.optional("level")? {
            cfg.level = v;
        }
        Ok(cfg)
    }

    /// `key=value` text readable by [`InputConfig::from_kv`].
    pub fn to_text(&self) -> String {
        format!(
            "temporal_mode={}\nm_trajectories={}\ninput_times={}\ninput_params={}\ntarget_param={}\ntarget_time={}\nlevel={}\n",
            self.temporal_mode,
            self.m_trajectories,
            join(&self.input_times),
            join(&self.params),
            self.target_param,
            self.target_time,
            self.level
        )
    }

    pub fn channels(&self, spec: &GridSpec) -> usize {
        match self.temporal_mode {
            TemporalMode::None => self.m_trajectories * self.input_times.len() * self.params.len(),
            TemporalMode::SpreadChannels => self.input_times.len(),
            TemporalMode::SpreadChannelsPlusIp => self.input_times.len() + spec.n_params,
        }
    }

    /// Level extent of the model inputs.
    pub fn levels(&self, spec: &GridSpec) -> usize {
        if self.temporal_mode == TemporalMode::None {
            spec.n_levels
        } else {
            1
        }
    }

    pub fn validate(&self, spec: &GridSpec, n_members: usize) -> Result<()> {
        let t = spec.n_times();
        if self.target_time >= t || self.input_times.iter().any(|&i| i >= t) {
            return Err(Error::invalid("inputs: time index out of range"));
        }
        if self.target_param >= spec.n_params || self.params.iter().any(|&p| p >= spec.n_params) {
            return Err(Error::invalid("inputs: parameter index out of range"));
        }
        if self.input_times.is_empty() {
            return Err(Error::invalid("inputs: no input times"));
        }
        match self.temporal_mode {
            TemporalMode::None => {
                if self.m_trajectories == 0 || self.m_trajectories > n_members {
                    return Err(Error::invalid(format!(
                        "inputs: m_trajectories {} not in 1..={n_members}",
                        self.m_trajectories
                    )));
                }
                if self.params.is_empty() {
                    return Err(Error::invalid("inputs: no input parameters"));
                }
            }
            _ => {
                if self.level >= spec.n_levels {
                    return Err(Error::invalid("inputs: level out of range"));
                }
            }
        }
        Ok(())
    }
}

/// What training and evaluation need from one ensemble: the first few
/// members' fields, the target parameter's full spread at every time and
/// the spread of members `0..m` at the target time for every `m < M`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedSample {
    pub id: String,
    pub epoch_tag: u32,
    pub spec: Arc<GridSpec>,
    pub n_members: usize,
    /// `[member][time]` for members `0..kept`.
    pub members: Vec<Vec<Field>>,
    /// Full spread of the target parameter, `[time]` → `[P][H][W]`.
    pub spread: Vec<Tensor>,
    /// Entry `m-1` is the spread of members `0..m` at the target time
    /// (all zeros for `m = 1`), for `m` in `1..M`.
    pub sub_spread: Vec<Tensor>,
    pub target_param: usize,
    pub target_time: usize,
}

impl ReducedSample {
    pub fn new(sample: &EnsembleSample, keep_members: usize, target_param: usize, target_time: usize) -> Result<Self> {
        sample.validate()?;
        let s = &sample.spec;
        let m = sample.n_members();
        if m < 2 {
            return Err(Error::invalid("reduce: need at least 2 members"));
        }
        if keep_members == 0 || keep_members > m || target_param >= s.n_params || target_time >= s.n_times() {
            return Err(Error::invalid("reduce: index out of range"));
        }
        let spread = (0..s.n_times())
            .map(|t| sample.spread_at(t)?.slab(target_param, None))
            .collect::<Result<Vec<_>>>()?;
        let mut sub_spread = vec![Tensor::zeros(&[s.n_levels, s.n_lat, s.n_lon])];
        for k in 2..m {
            let f = sample.at_time(target_time, 0..k)?;
            sub_spread.push(ensemble_spread(&f)?.slab(target_param, None)?);
        }
        Ok(ReducedSample {
            id: sample.sample_id.clone(),
            epoch_tag: sample.epoch_tag,
            spec: s.clone(),
            n_members: m,
            members: sample.members[..keep_members].to_vec(),
            spread,
            sub_spread,
            target_param,
            target_time,
        })
    }

    /// Target-parameter spread of the full ensemble at the target time.
    pub fn full_spread(&self) -> &Tensor {
        &self.spread[self.target_time]
    }
}

/// Streaming field and per-time spread statistics over training samples.
pub struct StatsAccumulator {
    field: NormAccumulator,
    spread: Vec<NormAccumulator>,
    spec: Option<Arc<GridSpec>>,
}

impl StatsAccumulator {
    pub fn new() -> Self {
        StatsAccumulator {
            field: NormAccumulator::new(0, 0),
            spread: Vec::new(),
            spec: None,
        }
    }

    /// Adds every member field at every time, and the spread at each time.
    pub fn push(&mut self, sample: &EnsembleSample) -> Result<()> {
        sample.validate()?;
        let s = &sample.spec;
        match &self.spec {
            None => {
                self.field = NormAccumulator::new(s.n_params, s.n_levels);
                self.spread = (0..s.n_times())
                    .map(|_| NormAccumulator::new(s.n_params, s.n_levels))
                    .collect();
                self.spec = Some(s.clone());
            }
            Some(prev) if **prev != **s => {
                return Err(Error::invalid("stats: samples on different grids"));
            }
            Some(_) => {}
        }
        for f in sample.members.iter().flatten() {
            self.field.push(f)?;
        }
        for (t, acc) in self.spread.iter_mut().enumerate() {
            acc.push(&sample.spread_at(t)?)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<StatsFile> {
        if self.spec.is_none() {
            return Err(Error::invalid("stats: no training samples"));
        }
        let stats = StatsFile {
            field: self.field.finish(STD_FLOOR)?,
            spread: self
                .spread
                .into_iter()
                .map(|a| a.finish(STD_FLOOR))
                .collect::<Result<Vec<_>>>()?,
        };
        stats.validate()?;
        Ok(stats)
    }
}

impl Default for StatsAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

/// Standardized model inputs and targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    /// Each `[C][P][H][W]`.
    pub inputs: Vec<Tensor>,
    /// Each `[1][P][H][W]`.
    pub targets: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn standardize_slab(t: &Tensor, param: usize, levels: &[usize], stats: &crate::grids::NormStats) -> Vec<f64> {
    let plane = t.len() / levels.len();
    t.data()
        .chunks(plane)
        .zip(levels)
        .flat_map(|(chunk, &l)| {
            let (m, s) = (stats.mean_at(param, l), stats.std_at(param, l));
            chunk.iter().map(move |v| (v - m) / s)
        })
        .collect()
}

fn level_slab(t: &Tensor, level: usize) -> Result<Tensor> {
    let s = t.shape();
    let plane = s[1] * s[2];
    Tensor::new(
        vec![1, s[1], s[2]],
        t.data()[level * plane..(level + 1) * plane].to_vec(),
    )
}

/// Model input `[C][P][H][W]` for one sample.
pub fn model_input(sample: &ReducedSample, stats: &StatsFile, input: &InputConfig) -> Result<Tensor> {
    let s = &sample.spec;
    input.validate(s, sample.n_members)?;
    match input.temporal_mode {
        TemporalMode::None => {
            if input.m_trajectories > sample.members.len() {
                return Err(Error::invalid(format!(
                    "inputs: sample keeps {} members, {} requested",
                    sample.members.len(),
                    input.m_trajectories
                )));
            }
            let members = sample.members[..input.m_trajectories]
                .iter()
                .map(|m| {
                    m.iter()
                        .map(|f| standardize(f, &stats.field))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let view = EnsembleSample {
                spec: s.clone(),
                members,
                control_index: None,
                sample_id: sample.id.clone(),
                epoch_tag: sample.epoch_tag,
            };
            let members: Vec<usize> = (0..input.m_trajectories).collect();
            channel_pack(&view, &members, &input.input_times, &input.params, &[], None)
        }
        mode => {
            let l = input.level;
            let mut data = Vec::new();
            for &t in &input.input_times {
                let slab = level_slab(&sample.spread[t], l)?;
                data.extend(standardize_slab(&slab, sample.target_param, &[l], &stats.spread[t]));
            }
            if mode == TemporalMode::SpreadChannelsPlusIp {
                let ip = sample
                    .members
                    .first()
                    .ok_or_else(|| Error::invalid("inputs: no member kept for initial parameters"))?;
                let f = standardize(&ip[0], &stats.field)?;
                for p in 0..s.n_params {
                    data.extend_from_slice(f.plane(p, l));
                }
            }
            Tensor::new(vec![input.channels(s), 1, s.n_lat, s.n_lon], data)
        }
    }
}

/// Standardized target `[1][P][H][W]` (one level in temporal modes).
pub fn model_target(sample: &ReducedSample, stats: &StatsFile, input: &InputConfig) -> Result<Tensor> {
    let s = &sample.spec;
    let full = sample.full_spread();
    let stats_t = &stats.spread[sample.target_time];
    let (slab, levels): (Tensor, Vec<usize>) = if input.temporal_mode == TemporalMode::None {
        (full.clone(), (0..s.n_levels).collect())
    } else {
        (level_slab(full, input.level)?, vec![input.level])
    };
    let data = standardize_slab(&slab, sample.target_param, &levels, stats_t);
    Tensor::new(vec![1, levels.len(), s.n_lat, s.n_lon], data)
}

/// Maps a standardized prediction `[1][P'][H][W]` back to spread units as
/// `[P'][H][W]`.
pub fn destandardize_target(
    pred: &Tensor,
    sample: &ReducedSample,
    stats: &StatsFile,
    input: &InputConfig,
) -> Result<Tensor> {
    let s = pred.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape("destandardize target", s, &[1]));
    }
    let levels: Vec<usize> = if input.temporal_mode == TemporalMode::None {
        (0..s[1]).collect()
    } else {
        vec![input.level]
    };
    let st = &stats.spread[sample.target_time];
    let plane = s[2] * s[3];
    let data = pred
        .data()
        .chunks(plane)
        .zip(&levels)
        .flat_map(|(chunk, &l)| {
            let (m, sd) = (st.mean_at(sample.target_param, l), st.std_at(sample.target_param, l));
            chunk.iter().map(move |v| v * sd + m)
        })
        .collect();
    Tensor::new(vec![s[1], s[2], s[3]], data)
}

/// Builds standardized inputs and targets for every sample (and, in
/// temporal modes with `all_levels`, every level).
pub fn prepare(samples: &[ReducedSample], stats: &StatsFile, input: &InputConfig, all_levels: bool) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for s in samples {
        let levels: Vec<usize> = if input.temporal_mode != TemporalMode::None && all_levels {
            (0..s.spec.n_levels).collect()
        } else {
            vec![input.level]
        };
        for l in levels {
            let cfg = InputConfig {
                level: l,
                ..input.clone()
            };
            ds.inputs.push(model_input(s, stats, &cfg)?);
            ds.targets.push(model_target(s, stats, &cfg)?);
        }
    }
    Ok(ds)
}
