//! Coupled Lorenz-96 ensembles with the tensor geometry of the real data.
//!
//! Every (parameter, level) channel is a Lorenz-96 ring of length
//! `n_lat·n_lon`, reshaped row-major onto the grid. Level `l` also feels
//! `0.1·(x[l-1] − x[l+1])` from its vertical neighbours so that structure
//! along the level axis is learnable.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::{split_dataset, write_esg, KeyValues, SplitManifest};
use crate::error::{Error, Result};
use crate::grids::{EnsembleSample, Field, GridSpec};

/// Strength of the coupling between adjacent levels.
pub const LEVEL_COUPLING: f64 = 0.1;

/// One classical fourth-order Runge-Kutta step of `dx/dt = f(x)`.
pub fn rk4_step(x: &[f64], dt: f64, mut f: impl FnMut(&[f64], &mut [f64])) -> Vec<f64> {
    let n = x.len();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    f(x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    f(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    f(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    f(&tmp, &mut k4);
    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// `dx_i/dt = (x_{i+1} − x_{i−2})·x_{i−1} − x_i + F` on one cyclic ring.
fn ring_rhs(x: &[f64], out: &mut [f64], forcing: f64) {
    let n = x.len();
    let term = |i: usize, ip1: usize, im1: usize, im2: usize| (x[ip1] - x[im2]) * x[im1] - x[i] + forcing;
    out[0] = term(0, 1, n - 1, n - 2);
    out[1] = term(1, 2, 0, n - 1);
    for i in 2..n - 1 {
        out[i] = (x[i + 1] - x[i - 2]) * x[i - 1] - x[i] + forcing;
    }
    out[n - 1] = term(n - 1, 0, n - 2, n - 3);
}

fn check_ring(n: usize) -> Result<()> {
    if n < 4 {
        return Err(Error::invalid(format!("lorenz96: ring length {n} < 4")));
    }
    Ok(())
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("lorenz96: non-finite state"))
    }
}

/// One RK4 step of a single Lorenz-96 ring.
pub fn lorenz96_step(state: &[f64], forcing: f64, dt: f64) -> Result<Vec<f64>> {
    check_ring(state.len())?;
    check_finite(state)?;
    let next = rk4_step(state, dt, |x, out| ring_rhs(x, out, forcing));
    check_finite(&next)?;
    Ok(next)
}

/// Right-hand side of the stacked system laid out `[param][level][ring]`.
fn coupled_rhs(x: &[f64], out: &mut [f64], forcing: f64, levels: usize, ring: usize) {
    for (c, (xc, oc)) in x.chunks(ring).zip(out.chunks_mut(ring)).enumerate() {
        ring_rhs(xc, oc, forcing);
        let l = c % levels;
        if l > 0 {
            let above = &x[(c - 1) * ring..c * ring];
            oc.iter_mut().zip(above).for_each(|(o, a)| *o += LEVEL_COUPLING * a);
        }
        if l + 1 < levels {
            let below = &x[(c + 1) * ring..(c + 2) * ring];
            oc.iter_mut().zip(below).for_each(|(o, b)| *o -= LEVEL_COUPLING * b);
        }
    }
}

/// One RK4 step of all rings of a field-shaped state with level coupling.
pub fn coupled_step(state: &[f64], forcing: f64, dt: f64, levels: usize, ring: usize) -> Result<Vec<f64>> {
    check_ring(ring)?;
    if levels == 0 || state.len() % (levels * ring) != 0 {
        return Err(Error::shape("coupled lorenz96", &[state.len()], &[levels, ring]));
    }
    check_finite(state)?;
    let next = rk4_step(state, dt, |x, out| coupled_rhs(x, out, forcing, levels, ring));
    check_finite(&next)?;
    Ok(next)
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub spec: GridSpec,
    pub forcing: f64,
    pub dt: f64,
    /// RK4 steps per forecast hour.
    pub steps_per_time_unit: usize,
    pub ic_perturbation_sigma: f64,
    pub n_members: usize,
    /// Perturb every member, control included.
    pub perturbed_control: bool,
    pub seed: u64,
    pub spinup_steps: usize,
    /// Number of chronological epoch tags a dataset is divided into.
    pub n_epochs: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            spec: GridSpec::desk_default(),
            forcing: 8.0,
            dt: 0.01,
            steps_per_time_unit: 10,
            ic_perturbation_sigma: 1e-4,
            n_members: 10,
            perturbed_control: false,
            seed: 0,
            spinup_steps: 500,
            n_epochs: 10,
        }
    }
}

impl GenConfig {
    /// Keys accepted by [`GenConfig::apply`].
    pub const KEYS: [&'static str; 14] = [
        "n_params",
        "n_levels",
        "n_lat",
        "n_lon",
        "forecast_times",
        "forcing",
        "dt",
        "steps_per_time_unit",
        "sigma",
        "members",
        "perturbed_control",
        "seed",
        "spinup_steps",
        "n_epochs",
    ];

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!("gen: dt {} must be positive", self.dt)));
        }
        if !self.forcing.is_finite() {
            return Err(Error::invalid("gen: forcing must be finite"));
        }
        if self.n_members < 2 {
            return Err(Error::invalid("gen: need at least 2 members"));
        }
        if !(self.ic_perturbation_sigma >= 0.0) || !self.ic_perturbation_sigma.is_finite() {
            return Err(Error::invalid("gen: sigma must be non-negative"));
        }
        if self.steps_per_time_unit == 0 {
            return Err(Error::invalid("gen: steps_per_time_unit must be at least 1"));
        }
        if self.n_epochs == 0 {
            return Err(Error::invalid("gen: n_epochs must be at least 1"));
        }
        check_ring(self.spec.plane())
    }

    /// Overrides fields from `key=value` entries; unknown keys are rejected.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.check_known(&Self::KEYS)?;
        let s = &mut self.spec;
        let (p, l) = (kv.optional("n_params")?, kv.optional("n_levels")?);
        if p.is_some() || l.is_some() {
            let (lat, lon, times) = (s.n_lat, s.n_lon, s.forecast_times.clone());
            *s = GridSpec::with_shape(p.unwrap_or(s.n_params), l.unwrap_or(s.n_levels), lat, lon);
            s.forecast_times = times;
        }
        if let Some(v) = kv.optional("n_lat")? {
            s.n_lat = v;
        }
        if let Some(v) = kv.optional("n_lon")? {
            s.n_lon = v;
        }
        if let Some(v) = kv.list("forecast_times")? {
            s.forecast_times = v;
        }
        macro_rules! set {
            ($key:literal, $field:ident) => {
                if let Some(v) = kv.optional($key)? {
                    self.$field = v;
                }
            };
        }
        set!("forcing", forcing);
        set!("dt", dt);
        set!("steps_per_time_unit", steps_per_time_unit);
        set!("sigma", ic_perturbation_sigma);
        set!("members", n_members);
        set!("perturbed_control", perturbed_control);
        set!("seed", seed);
        set!("spinup_steps", spinup_steps);
        set!("n_epochs", n_epochs);
        self.validate()
    }

    fn step(&self, x: &[f64]) -> Result<Vec<f64>> {
        coupled_step(x, self.forcing, self.dt, self.spec.n_levels, self.spec.plane())
    }
}

/// The generator stream for one sample: `ChaCha8Rng::seed_from_u64(seed)`
/// on stream `sample_seed`.
fn sample_rng(cfg: &GenConfig, sample_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(sample_seed);
    rng
}

/// Spun-up base state and one perturbation seed per member.
fn base_and_member_seeds(cfg: &GenConfig, sample_seed: u64) -> Result<(Vec<f64>, Vec<u64>)> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg, sample_seed);
    let mut base: Vec<f64> = (0..cfg.spec.field_len())
        .map(|_| cfg.forcing + rng.sample::<f64, _>(StandardNormal))
        .collect();
    for _ in 0..cfg.spinup_steps {
        base = cfg.step(&base)?;
    }
    let seeds = (0..cfg.n_members).map(|_| rng.next_u64()).collect();
    Ok((base, seeds))
}

/// The per-member perturbation seeds `generate_ensemble` uses.
pub fn member_seeds(cfg: &GenConfig, sample_seed: u64) -> Result<Vec<u64>> {
    Ok(base_and_member_seeds(cfg, sample_seed)?.1)
}

/// Generates one ensemble: a spun-up base state, per-member Gaussian
/// perturbations (member 0 is the unperturbed control unless
/// `perturbed_control`), each member integrated and sampled at every
/// forecast time. Deterministic in `(cfg.seed, sample_seed)`.
pub fn generate_ensemble(cfg: &GenConfig, sample_seed: u64) -> Result<EnsembleSample> {
    let (base, seeds) = base_and_member_seeds(cfg, sample_seed)?;
    ensemble_with_member_seeds(cfg, sample_seed, &base, &seeds)
}

/// Like [`generate_ensemble`] but with explicit member perturbation seeds
/// (one per member). Member `k` is perturbed with noise drawn from
/// `ChaCha8Rng::seed_from_u64(seeds[k])`.
pub fn generate_ensemble_with_seeds(cfg: &GenConfig, sample_seed: u64, seeds: &[u64]) -> Result<EnsembleSample> {
    if seeds.len() != cfg.n_members {
        return Err(Error::invalid(format!(
            "gen: {} member seeds for {} members",
            seeds.len(),
            cfg.n_members
        )));
    }
    let (base, _) = base_and_member_seeds(cfg, sample_seed)?;
    ensemble_with_member_seeds(cfg, sample_seed, &base, seeds)
}

fn ensemble_with_member_seeds(
    cfg: &GenConfig,
    sample_seed: u64,
    base: &[f64],
    seeds: &[u64],
) -> Result<EnsembleSample> {
    let spec = Arc::new(cfg.spec.clone());
    let control = (!cfg.perturbed_control).then_some(0);
    let sample_steps: Vec<usize> = spec
        .forecast_times
        .iter()
        .map(|&t| t as usize * cfg.steps_per_time_unit)
        .collect();
    let mut members = Vec::with_capacity(cfg.n_members);
    for (m, &seed) in seeds.iter().enumerate() {
        let mut x = base.to_vec();
        if control != Some(m) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in &mut x {
                *v += cfg.ic_perturbation_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut fields = Vec::with_capacity(sample_steps.len());
        let mut step = 0;
        for &target in &sample_steps {
            while step < target {
                x = cfg.step(&x)?;
                step += 1;
            }
            fields.push(Field::new(spec.clone(), x.clone())?);
        }
        members.push(fields);
    }
    Ok(EnsembleSample {
        spec,
        members,
        control_index: control,
        sample_id: sample_id(sample_seed),
        epoch_tag: 0,
    })
}

pub fn sample_id(index: u64) -> String {
    format!("s{index:06}")
}

/// How a generated dataset is split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitOptions {
    pub seed: u64,
    pub train_frac: f64,
    pub test_epoch_tags: BTreeSet<u32>,
}

/// Chronological tag of sample `index` out of `n_samples`.
pub fn epoch_tag(index: usize, n_samples: usize, n_epochs: u32) -> u32 {
    (index as u64 * n_epochs as u64 / n_samples as u64) as u32
}

/// Generates `n_samples` ensembles (sample seeds `0..n_samples`) in memory
/// with chronological epoch tags.
pub fn generate_samples(cfg: &GenConfig, n_samples: usize) -> Result<Vec<EnsembleSample>> {
    if n_samples == 0 {
        return Err(Error::invalid("gen: n_samples must be at least 1"));
    }
    (0..n_samples)
        .map(|i| {
            let mut s = generate_ensemble(cfg, i as u64)?;
            s.epoch_tag = epoch_tag(i, n_samples, cfg.n_epochs);
            Ok(s)
        })
        .collect()
}

/// File name of a sample inside a dataset directory.
pub fn sample_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.esg"))
}

/// Writes `n_samples` ESG files plus `manifest.txt` into `out_dir`.
pub fn generate_dataset(
    cfg: &GenConfig,
    n_samples: usize,
    out_dir: &Path,
    split: &SplitOptions,
) -> Result<(Vec<PathBuf>, SplitManifest)> {
    if n_samples == 0 {
        return Err(Error::invalid("gen: n_samples must be at least 1"));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(n_samples);
    let mut ids = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut s = generate_ensemble(cfg, i as u64)?;
        s.epoch_tag = epoch_tag(i, n_samples, cfg.n_epochs);
        let path = sample_path(out_dir, &s.sample_id);
        write_esg(&s, &path)?;
        ids.push((s.sample_id.clone(), s.epoch_tag));
        paths.push(path);
    }
    let manifest = split_dataset(&ids, split.seed, split.train_frac, &split.test_epoch_tags)?;
    manifest.write(&out_dir.join("manifest.txt"))?;
    Ok((paths, manifest))
}
