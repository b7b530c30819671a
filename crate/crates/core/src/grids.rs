//! Grid geometry, ensemble statistics, standardization and channel packing.

use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Lower bound applied to every standard deviation in [`NormStats`].
pub const STD_FLOOR: f64 = 1e-6;

/// Geometry of one trajectory snapshot: parameters × pressure levels × lat × lon.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub n_params: usize,
    pub n_levels: usize,
    pub n_lat: usize,
    pub n_lon: usize,
    /// Pressure in hPa, descriptive only.
    pub level_values: Vec<f64>,
    pub param_names: Vec<String>,
    /// Hour offsets, strictly increasing from 0.
    pub forecast_times: Vec<u32>,
}

impl GridSpec {
    pub fn new(
        n_lat: usize,
        n_lon: usize,
        level_values: Vec<f64>,
        param_names: Vec<String>,
        forecast_times: Vec<u32>,
    ) -> Result<Self> {
        let spec = GridSpec {
            n_params: param_names.len(),
            n_levels: level_values.len(),
            n_lat,
            n_lon,
            level_values,
            param_names,
            forecast_times,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Six parameters, seven levels, a 20 × 32 window and times 0/3/6 h.
    pub fn desk_default() -> Self {
        Self::with_shape(6, 7, 20, 32)
    }

    /// A grid with the default parameter/level names truncated or padded to
    /// the requested counts.
    pub fn with_shape(n_params: usize, n_levels: usize, n_lat: usize, n_lon: usize) -> Self {
        const PARAMS: [&str; 6] = ["u", "v", "z", "t", "r", "cc"];
        const LEVELS: [f64; 7] = [200.0, 300.0, 400.0, 500.0, 700.0, 850.0, 1000.0];
        let param_names = (0..n_params)
            .map(|i| PARAMS.get(i).map_or_else(|| format!("p{i}"), |s| s.to_string()))
            .collect();
        let level_values = (0..n_levels)
            .map(|i| LEVELS.get(i).copied().unwrap_or(1000.0 + 50.0 * i as f64))
            .collect();
        GridSpec {
            n_params,
            n_levels,
            n_lat,
            n_lon,
            level_values,
            param_names,
            forecast_times: vec![0, 3, 6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_params == 0 || self.n_levels == 0 || self.n_lat == 0 || self.n_lon == 0 {
            return Err(Error::invalid("grid: all counts must be at least 1"));
        }
        if self.level_values.len() != self.n_levels {
            return Err(Error::invalid("grid: level_values length differs from n_levels"));
        }
        if self.param_names.len() != self.n_params {
            return Err(Error::invalid("grid: param_names length differs from n_params"));
        }
        if self.forecast_times.first() != Some(&0) {
            return Err(Error::invalid("grid: forecast_times must start at 0"));
        }
        if self.forecast_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("grid: forecast_times must be strictly increasing"));
        }
        Ok(())
    }

    pub fn n_times(&self) -> usize {
        self.forecast_times.len()
    }

    /// Points in one horizontal slab.
    pub fn plane(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn field_len(&self) -> usize {
        self.n_params * self.n_levels * self.plane()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|p| p == name)
    }
}

/// One trajectory at one time, laid out `[param][level][lat][lon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    spec: Arc<GridSpec>,
    data: Vec<f64>,
}

impl Field {
    pub fn new(spec: Arc<GridSpec>, data: Vec<f64>) -> Result<Self> {
        if data.len() != spec.field_len() {
            return Err(Error::invalid(format!(
                "field: expected {} values, got {}",
                spec.field_len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("field: non-finite value at offset {i}")));
        }
        Ok(Field { spec, data })
    }

    pub fn zeros(spec: Arc<GridSpec>) -> Self {
        let n = spec.field_len();
        Field {
            spec,
            data: vec![0.0; n],
        }
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, param: usize, level: usize, lat: usize, lon: usize) -> usize {
        ((param * self.spec.n_levels + level) * self.spec.n_lat + lat) * self.spec.n_lon + lon
    }

    pub fn get(&self, param: usize, level: usize, lat: usize, lon: usize) -> f64 {
        self.data[self.offset(param, level, lat, lon)]
    }

    /// The horizontal plane of one (param, level) pair.
    pub fn plane(&self, param: usize, level: usize) -> &[f64] {
        let n = self.spec.plane();
        let start = (param * self.spec.n_levels + level) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, param: usize, level: usize) -> &mut [f64] {
        let n = self.spec.plane();
        let start = (param * self.spec.n_levels + level) * n;
        &mut self.data[start..start + n]
    }

    /// All levels (or one level) of one parameter as a `[P][H][W]` tensor.
    pub fn slab(&self, param: usize, level: Option<usize>) -> Result<Tensor> {
        let s = &self.spec;
        check_index("param", param, s.n_params)?;
        match level {
            None => {
                let n = s.n_levels * s.plane();
                Tensor::new(
                    vec![s.n_levels, s.n_lat, s.n_lon],
                    self.data[param * n..(param + 1) * n].to_vec(),
                )
            }
            Some(l) => {
                check_index("level", l, s.n_levels)?;
                Tensor::new(vec![1, s.n_lat, s.n_lon], self.plane(param, l).to_vec())
            }
        }
    }
}

/// All members of one ensemble at all forecast times.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSample {
    pub spec: Arc<GridSpec>,
    /// Indexed `[member][time]`.
    pub members: Vec<Vec<Field>>,
    pub control_index: Option<usize>,
    pub sample_id: String,
    pub epoch_tag: u32,
}

impl EnsembleSample {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.members.is_empty() {
            return Err(Error::invalid("sample: no members"));
        }
        for m in &self.members {
            if m.len() != self.spec.n_times() {
                return Err(Error::invalid(format!(
                    "sample: member has {} times, grid has {}",
                    m.len(),
                    self.spec.n_times()
                )));
            }
            if m.iter().any(|f| *f.spec != *self.spec) {
                return Err(Error::invalid("sample: member field on a different grid"));
            }
        }
        if let Some(c) = self.control_index {
            check_index("control member", c, self.members.len())?;
        }
        Ok(())
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    /// Fields of the given members at one time index.
    pub fn at_time(&self, time: usize, members: impl IntoIterator<Item = usize>) -> Result<Vec<&Field>> {
        check_index("time", time, self.spec.n_times())?;
        members
            .into_iter()
            .map(|m| {
                check_index("member", m, self.members.len())?;
                Ok(&self.members[m][time])
            })
            .collect()
    }

    /// Spread of all members at one time index.
    pub fn spread_at(&self, time: usize) -> Result<Field> {
        let fields = self.at_time(time, 0..self.n_members())?;
        ensemble_spread(&fields)
    }
}

fn check_index(what: &'static str, index: usize, len: usize) -> Result<()> {
    if index >= len {
        Err(Error::Index { what, index, len })
    } else {
        Ok(())
    }
}

fn shared_spec<'a>(members: &[&'a Field]) -> Result<&'a Arc<GridSpec>> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("ensemble: empty member list"))?;
    for f in &members[1..] {
        if f.spec != first.spec {
            return Err(Error::invalid("ensemble: members on different grids"));
        }
    }
    Ok(&first.spec)
}

/// Pointwise arithmetic mean over members.
pub fn ensemble_mean(members: &[&Field]) -> Result<Field> {
    let spec = shared_spec(members)?;
    let inv = 1.0 / members.len() as f64;
    let mut out = vec![0.0; spec.field_len()];
    for f in members {
        for (o, v) in out.iter_mut().zip(&f.data) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(Field {
        spec: spec.clone(),
        data: out,
    })
}

/// Pointwise sample standard deviation (divisor `M - 1`) over members.
pub fn ensemble_spread(members: &[&Field]) -> Result<Field> {
    if members.len() < 2 {
        return Err(Error::invalid(format!(
            "spread needs at least 2 members, got {}",
            members.len()
        )));
    }
    let mean = ensemble_mean(members)?;
    let mut ss = vec![0.0; mean.data.len()];
    for f in members {
        for ((s, v), m) in ss.iter_mut().zip(&f.data).zip(&mean.data) {
            let d = v - m;
            *s += d * d;
        }
    }
    let denom = (members.len() - 1) as f64;
    ss.iter_mut().for_each(|s| *s = (*s / denom).sqrt());
    Ok(Field {
        spec: mean.spec,
        data: ss,
    })
}

/// Per-(parameter, level) mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub n_params: usize,
    pub n_levels: usize,
    /// `[param][level]`, row-major.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub std_floor: f64,
}

impl NormStats {
    pub fn identity(n_params: usize, n_levels: usize) -> Self {
        NormStats {
            n_params,
            n_levels,
            mean: vec![0.0; n_params * n_levels],
            std: vec![1.0; n_params * n_levels],
            std_floor: STD_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_params.checked_mul(self.n_levels).unwrap_or(0);
        if n == 0 || self.mean.len() != n || self.std.len() != n {
            return Err(Error::invalid("norm stats: inconsistent dimensions"));
        }
        if !(self.std_floor > 0.0) {
            return Err(Error::invalid("norm stats: std_floor must be positive"));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("norm stats: non-finite mean"));
        }
        if self.std.iter().any(|&s| !s.is_finite() || s < self.std_floor) {
            return Err(Error::invalid("norm stats: std below floor"));
        }
        Ok(())
    }

    pub fn mean_at(&self, param: usize, level: usize) -> f64 {
        self.mean[param * self.n_levels + level]
    }

    pub fn std_at(&self, param: usize, level: usize) -> f64 {
        self.std[param * self.n_levels + level]
    }

    fn check(&self, spec: &GridSpec) -> Result<()> {
        if spec.n_params != self.n_params || spec.n_levels != self.n_levels {
            return Err(Error::shape(
                "norm stats",
                &[self.n_params, self.n_levels],
                &[spec.n_params, spec.n_levels],
            ));
        }
        Ok(())
    }
}

/// Streaming pooled (population) moments per (param, level).
///
/// Each field contributes its slab moments, merged with Chan's pairwise
/// update so large pools do not lose precision.
#[derive(Clone, Debug)]
pub struct NormAccumulator {
    n_params: usize,
    n_levels: usize,
    count: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl NormAccumulator {
    pub fn new(n_params: usize, n_levels: usize) -> Self {
        let n = n_params * n_levels;
        NormAccumulator {
            n_params,
            n_levels,
            count: vec![0.0; n],
            mean: vec![0.0; n],
            m2: vec![0.0; n],
        }
    }

    pub fn push(&mut self, field: &Field) -> Result<()> {
        let s = field.spec();
        if s.n_params != self.n_params || s.n_levels != self.n_levels {
            return Err(Error::shape(
                "norm stats",
                &[self.n_params, self.n_levels],
                &[s.n_params, s.n_levels],
            ));
        }
        for p in 0..s.n_params {
            for l in 0..s.n_levels {
                self.push_plane(p, l, field.plane(p, l));
            }
        }
        Ok(())
    }

    /// Adds raw values to one (param, level) pool.
    pub fn push_plane(&mut self, param: usize, level: usize, values: &[f64]) {
        if values.is_empty() {
            return;
        }
        let nb = values.len() as f64;
        let mb = values.iter().sum::<f64>() / nb;
        let m2b: f64 = values.iter().map(|v| (v - mb) * (v - mb)).sum();
        let i = param * self.n_levels + level;
        let na = self.count[i];
        let n = na + nb;
        let delta = mb - self.mean[i];
        self.mean[i] += delta * nb / n;
        self.m2[i] += m2b + delta * delta * na * nb / n;
        self.count[i] = n;
    }

    pub fn finish(self, std_floor: f64) -> Result<NormStats> {
        if self.count.iter().any(|&c| c == 0.0) {
            return Err(Error::invalid("norm stats: no training fields"));
        }
        let std = self
            .m2
            .iter()
            .zip(&self.count)
            .map(|(m2, n)| (m2 / n).sqrt().max(std_floor))
            .collect();
        Ok(NormStats {
            n_params: self.n_params,
            n_levels: self.n_levels,
            mean: self.mean,
            std,
            std_floor,
        })
    }
}

/// Pooled per-(param, level) statistics over a stream of training fields.
pub fn compute_norm_stats<'a>(fields: impl IntoIterator<Item = &'a Field>) -> Result<NormStats> {
    let mut iter = fields.into_iter().peekable();
    let first = iter
        .peek()
        .ok_or_else(|| Error::invalid("norm stats: empty field stream"))?;
    let mut acc = NormAccumulator::new(first.spec().n_params, first.spec().n_levels);
    for f in iter {
        acc.push(f)?;
    }
    acc.finish(STD_FLOOR)
}

pub fn standardize(f: &Field, s: &NormStats) -> Result<Field> {
    s.check(f.spec())?;
    let mut out = f.clone();
    for p in 0..s.n_params {
        for l in 0..s.n_levels {
            let (m, sd) = (s.mean_at(p, l), s.std_at(p, l));
            out.plane_mut(p, l).iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
    }
    Ok(out)
}

pub fn destandardize(f: &Field, s: &NormStats) -> Result<Field> {
    s.check(f.spec())?;
    let mut out = f.clone();
    for p in 0..s.n_params {
        for l in 0..s.n_levels {
            let (m, sd) = (s.mean_at(p, l), s.std_at(p, l));
            out.plane_mut(p, l).iter_mut().for_each(|v| *v = *v * sd + m);
        }
    }
    Ok(out)
}

/// Packs member/time/parameter slabs of one sample into model channels.
///
/// Channel `k` holds, in order: for each member in `members`, for each time
/// in `times`, for each parameter in `params`, that slab; `extras` are
/// appended last. With `level = Some(l)` only pressure level `l` is taken and
/// the output level axis has length 1; extras must match that level count.
/// The result has shape `[C][P][H][W]`.
pub fn channel_pack(
    sample: &EnsembleSample,
    members: &[usize],
    times: &[usize],
    params: &[usize],
    extras: &[Tensor],
    level: Option<usize>,
) -> Result<Tensor> {
    let s = &sample.spec;
    for &m in members {
        check_index("member", m, sample.n_members())?;
    }
    for &t in times {
        check_index("time", t, s.n_times())?;
    }
    for &p in params {
        check_index("param", p, s.n_params)?;
    }
    if let Some(l) = level {
        check_index("level", l, s.n_levels)?;
    }
    let depth = if level.is_some() { 1 } else { s.n_levels };
    let slab_shape = [depth, s.n_lat, s.n_lon];
    let slab_len = depth * s.plane();
    let channels = members.len() * times.len() * params.len() + extras.len();
    let mut data = Vec::with_capacity(channels * slab_len);
    for &m in members {
        for &t in times {
            let field = &sample.members[m][t];
            for &p in params {
                data.extend_from_slice(field.slab(p, level)?.data());
            }
        }
    }
    for e in extras {
        if e.shape() != slab_shape {
            return Err(Error::shape("channel_pack extra", e.shape(), &slab_shape));
        }
        data.extend_from_slice(e.data());
    }
    Tensor::new(vec![channels, depth, s.n_lat, s.n_lon], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(p: usize, l: usize, h: usize, w: usize) -> Arc<GridSpec> {
        Arc::new(GridSpec::with_shape(p, l, h, w))
    }

    fn constant(spec: &Arc<GridSpec>, v: f64) -> Field {
        Field::new(spec.clone(), vec![v; spec.field_len()]).unwrap()
    }

    #[test]
    fn mean_and_spread_examples() {
        let s = spec(1, 1, 1, 1);
        let f = constant(&s, 3.5);
        assert_eq!(ensemble_mean(&[&f, &f, &f]).unwrap(), f);
        assert_eq!(ensemble_spread(&[&f, &f]).unwrap().data(), &[0.0]);

        let (a, b) = (constant(&s, 1.0), constant(&s, 3.0));
        assert_eq!(ensemble_mean(&[&a, &b]).unwrap().data(), &[2.0]);
        let sp = ensemble_spread(&[&a, &b]).unwrap().data()[0];
        assert!((sp - 1.41421356).abs() < 1e-8);

        let five: Vec<Field> = (0..5).map(|v| constant(&s, v as f64)).collect();
        let refs: Vec<&Field> = five.iter().collect();
        assert_eq!(ensemble_mean(&refs).unwrap().data(), &[2.0]);
        assert!((ensemble_spread(&refs).unwrap().data()[0] - 1.58113883).abs() < 1e-8);
    }

    #[test]
    fn ensemble_errors() {
        let s = spec(1, 1, 2, 2);
        let f = constant(&s, 1.0);
        assert!(ensemble_mean(&[]).is_err());
        assert!(ensemble_spread(&[&f]).is_err());
        let g = constant(&spec(1, 1, 2, 3), 1.0);
        assert!(ensemble_mean(&[&f, &g]).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(2, 2, vec![500.0], vec!["t".into()], vec![0, 3, 6]).is_ok());
        assert!(GridSpec::new(0, 2, vec![500.0], vec!["t".into()], vec![0]).is_err());
        assert!(GridSpec::new(2, 2, vec![500.0], vec!["t".into()], vec![3, 6]).is_err());
        assert!(GridSpec::new(2, 2, vec![500.0], vec!["t".into()], vec![0, 6, 6]).is_err());
        let s = spec(1, 1, 1, 1);
        assert!(Field::new(s.clone(), vec![f64::NAN]).is_err());
        assert!(Field::new(s, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn norm_stats_examples() {
        let s = spec(2, 3, 4, 5);
        let st = compute_norm_stats([&constant(&s, 5.0)]).unwrap();
        assert!(st.mean.iter().all(|&m| m == 5.0));
        assert!(st.std.iter().all(|&v| v == STD_FLOOR));

        let st = compute_norm_stats([&constant(&s, 0.0), &constant(&s, 2.0)]).unwrap();
        assert!(st.mean.iter().all(|&m| (m - 1.0).abs() < 1e-15));
        assert!(st.std.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        assert!(compute_norm_stats(std::iter::empty::<&Field>()).is_err());
    }

    #[test]
    fn standardize_examples() {
        let s = spec(1, 1, 1, 1);
        let stats = NormStats {
            n_params: 1,
            n_levels: 1,
            mean: vec![5.0],
            std: vec![2.0],
            std_floor: STD_FLOOR,
        };
        let f = constant(&s, 7.0);
        assert_eq!(standardize(&f, &stats).unwrap().data(), &[1.0]);
        assert_eq!(destandardize(&standardize(&f, &stats).unwrap(), &stats).unwrap(), f);
        let id = NormStats::identity(1, 1);
        assert_eq!(standardize(&f, &id).unwrap(), f);
        assert!(standardize(&constant(&spec(2, 1, 1, 1), 1.0), &id).is_err());
    }

    fn sample(spec: &Arc<GridSpec>, n_members: usize) -> EnsembleSample {
        let members = (0..n_members)
            .map(|m| {
                (0..spec.n_times())
                    .map(|t| {
                        let data = (0..spec.field_len())
                            .map(|i| (m * 1_000_000 + t * 100_000 + i) as f64)
                            .collect();
                        Field::new(spec.clone(), data).unwrap()
                    })
                    .collect()
            })
            .collect();
        EnsembleSample {
            spec: spec.clone(),
            members,
            control_index: Some(0),
            sample_id: "s".into(),
            epoch_tag: 0,
        }
    }

    #[test]
    fn channel_pack_counts() {
        let s = spec(6, 7, 4, 4);
        let smp = sample(&s, 3);
        let all: Vec<usize> = (0..6).collect();
        let x = channel_pack(&smp, &[0], &[0], &all, &[], None).unwrap();
        assert_eq!(x.shape(), &[6, 7, 4, 4]);
        let x = channel_pack(&smp, &[0, 1], &[0, 1], &[3], &[], None).unwrap();
        assert_eq!(x.shape()[0], 4);

        let s0 = smp.spread_at(0).unwrap().slab(3, Some(5)).unwrap();
        let s1 = smp.spread_at(1).unwrap().slab(3, Some(5)).unwrap();
        let x = channel_pack(&smp, &[], &[], &[], &[s0, s1], Some(5)).unwrap();
        assert_eq!(x.shape(), &[2, 1, 4, 4]);
        let e0 = smp.spread_at(0).unwrap().slab(3, Some(5)).unwrap();
        let e1 = smp.spread_at(1).unwrap().slab(3, Some(5)).unwrap();
        let x = channel_pack(&smp, &[0], &[0], &all, &[e0, e1], Some(5)).unwrap();
        assert_eq!(x.shape(), &[8, 1, 4, 4]);
    }

    #[test]
    fn channel_pack_slot_order() {
        let s = spec(2, 3, 2, 2);
        let smp = sample(&s, 3);
        let members = [2, 0];
        let times = [2, 1];
        let params = [1, 0];
        let x = channel_pack(&smp, &members, &times, &params, &[], None).unwrap();
        let slab = 3 * 4;
        let mut k = 0;
        for &m in &members {
            for &t in &times {
                for &p in &params {
                    let want = smp.members[m][t].slab(p, None).unwrap();
                    assert_eq!(&x.data()[k * slab..(k + 1) * slab], want.data());
                    k += 1;
                }
            }
        }
        assert!(channel_pack(&smp, &[3], &[0], &[0], &[], None).is_err());
        assert!(channel_pack(&smp, &[0], &[3], &[0], &[], None).is_err());
        assert!(channel_pack(&smp, &[0], &[0], &[2], &[], None).is_err());
        assert!(channel_pack(&smp, &[0], &[0], &[0], &[], Some(3)).is_err());
    }
}
