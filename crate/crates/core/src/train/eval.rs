use std::fmt::Write as _;
use std::path::PathBuf;

use super::data::{destandardize_target, model_input, InputConfig, ReducedSample};
use super::loss::SquaredError;
use crate::autodiff::Tensor;
use crate::dataio::{write_heatmap, StatsFile};
use crate::error::{Error, Result};
use crate::models::{fit_linear_baseline, predict_linear_baseline, LinearBaseline, Model, TemporalMode};

/// Anything that estimates the full-ensemble spread of the target parameter
/// at the target time, in physical units, shaped `[P][H][W]`.
pub trait SpreadEstimator {
    fn name(&self) -> String;
    fn estimate(&self, sample: &ReducedSample, stats: &StatsFile) -> Result<Tensor>;
}

/// A trained network with its input recipe.
pub struct ModelEstimator {
    pub name: String,
    pub model: Model,
    pub input: InputConfig,
}

impl SpreadEstimator for ModelEstimator {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn estimate(&self, sample: &ReducedSample, stats: &StatsFile) -> Result<Tensor> {
        if self.input.temporal_mode == TemporalMode::None {
            let x = model_input(sample, stats, &self.input)?;
            let pred = self.model.predict(&x)?;
            return destandardize_target(&pred, sample, stats, &self.input);
        }
        // One level at a time, batched across levels.
        let s = &sample.spec;
        let cfgs: Vec<InputConfig> = (0..s.n_levels)
            .map(|l| InputConfig {
                level: l,
                ..self.input.clone()
            })
            .collect();
        let xs = cfgs
            .iter()
            .map(|c| model_input(sample, stats, c))
            .collect::<Result<Vec<_>>>()?;
        let pred = self.model.predict(&Tensor::stack(&xs)?)?;
        let mut data = Vec::with_capacity(s.n_levels * s.plane());
        for (l, c) in cfgs.iter().enumerate() {
            let one = pred.index_axis0(l)?;
            data.extend_from_slice(destandardize_target(&one, sample, stats, c)?.data());
        }
        Tensor::new(vec![s.n_levels, s.n_lat, s.n_lon], data)
    }
}

/// The per-level regression on the full spread at the first forecast time.
pub struct LinearEstimator(pub LinearBaseline);

impl SpreadEstimator for LinearEstimator {
    fn name(&self) -> String {
        "linear".into()
    }

    fn estimate(&self, sample: &ReducedSample, _: &StatsFile) -> Result<Tensor> {
        predict_linear_baseline(&self.0, &sample.spread[0])
    }
}

/// Fits the linear baseline on training samples: full spread at the first
/// time against full spread at the target time.
pub fn fit_linear_on(samples: &[ReducedSample]) -> Result<LinearBaseline> {
    let pairs: Vec<(Tensor, Tensor)> = samples
        .iter()
        .map(|s| (s.spread[0].clone(), s.full_spread().clone()))
        .collect();
    fit_linear_baseline(&pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Level used for heatmaps.
    pub heatmap_level: usize,
    /// Directory for heatmaps; `None` skips them.
    pub heatmap_dir: Option<PathBuf>,
    /// Number of leading test samples to draw heatmaps for.
    pub heatmap_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            heatmap_level: 5,
            heatmap_dir: None,
            heatmap_samples: 2,
        }
    }
}

/// RMSE of one estimator against the full spread.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    /// Pooled over samples, levels and grid points.
    pub rmse: f64,
    pub per_level: Vec<f64>,
    pub per_sample: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    /// Model rows, then the linear baseline if it was given.
    pub rows: Vec<EvalRow>,
    /// `(m, row)` for the m-member sample spread, `m = 1..M`.
    pub m_spread: Vec<(usize, EvalRow)>,
    pub heatmaps: Vec<PathBuf>,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .chain(self.m_spread.iter().map(|(_, r)| r))
            .find(|r| r.name == name)
    }

    pub fn m_row(&self, m: usize) -> Option<&EvalRow> {
        self.m_spread.iter().find(|(k, _)| *k == m).map(|(_, r)| r)
    }

    fn all_rows(&self) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().chain(self.m_spread.iter().map(|(_, r)| r))
    }

    /// Aligned text table of pooled RMSEs.
    pub fn to_table(&self) -> String {
        let width = self.all_rows().map(|r| r.name.len()).max().unwrap_or(0).max(9);
        let mut out = format!(
            "{:<width$}  {:>12}   ({} test samples)\n",
            "estimator", "rmse", self.n_samples
        );
        for r in self.all_rows() {
            writeln!(out, "{:<width$}  {:>12.6e}", r.name, r.rmse).expect("string write");
        }
        out
    }

    /// CSV with the pooled RMSE and one column per level.
    pub fn to_csv(&self) -> String {
        let levels = self.all_rows().map(|r| r.per_level.len()).max().unwrap_or(0);
        let mut out = String::from("estimator,rmse");
        for l in 0..levels {
            write!(out, ",level{l}").expect("string write");
        }
        out.push('\n');
        for r in self.all_rows() {
            write!(out, "{},{}", r.name, r.rmse).expect("string write");
            for v in &r.per_level {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

struct RowAcc {
    name: String,
    total: SquaredError,
    levels: Vec<SquaredError>,
    per_sample: Vec<f64>,
}

impl RowAcc {
    fn new(name: String, levels: usize) -> Self {
        RowAcc {
            name,
            total: SquaredError::default(),
            levels: vec![SquaredError::default(); levels],
            per_sample: Vec::new(),
        }
    }

    fn push(&mut self, est: &Tensor, truth: &Tensor) -> Result<()> {
        if est.shape() != truth.shape() {
            return Err(Error::shape("evaluate", est.shape(), truth.shape()));
        }
        let plane = truth.len() / self.levels.len();
        let mut sample = SquaredError::default();
        for (l, acc) in self.levels.iter_mut().enumerate() {
            let r = l * plane..(l + 1) * plane;
            acc.push(&est.data()[r.clone()], &truth.data()[r])?;
        }
        sample.push(est.data(), truth.data())?;
        self.total.push(est.data(), truth.data())?;
        self.per_sample.push(sample.rmse());
        Ok(())
    }

    fn finish(self) -> EvalRow {
        EvalRow {
            name: self.name,
            rmse: self.total.rmse(),
            per_level: self.levels.iter().map(SquaredError::rmse).collect(),
            per_sample: self.per_sample,
        }
    }
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Scores every estimator, the linear baseline and the m-member spread
/// ladder against the full spread of each test sample.
pub fn evaluate(
    estimators: &[&dyn SpreadEstimator],
    linear: Option<&LinearBaseline>,
    test: &[ReducedSample],
    stats: &StatsFile,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let first = test
        .first()
        .ok_or_else(|| Error::invalid("evaluate: empty test split"))?;
    let levels = first.spec.n_levels;
    let linear_est = linear.map(|l| LinearEstimator(l.clone()));
    let mut all: Vec<&dyn SpreadEstimator> = estimators.to_vec();
    if let Some(l) = &linear_est {
        all.push(l);
    }
    let mut rows: Vec<RowAcc> = all.iter().map(|e| RowAcc::new(e.name(), levels)).collect();
    let n_members = first.n_members;
    let mut ladder: Vec<RowAcc> = (1..n_members)
        .map(|m| RowAcc::new(format!("spread m={m}"), levels))
        .collect();
    if let Some(dir) = &cfg.heatmap_dir {
        if cfg.heatmap_level >= levels {
            return Err(Error::invalid("evaluate: heatmap level out of range"));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut heatmaps = Vec::new();
    for (i, sample) in test.iter().enumerate() {
        if sample.n_members != n_members || sample.spec != first.spec {
            return Err(Error::invalid("evaluate: test samples differ in shape"));
        }
        let truth = sample.full_spread();
        for (est, row) in all.iter().zip(&mut rows) {
            let e = est.estimate(sample, stats)?;
            if !e.all_finite() {
                return Err(Error::invalid(format!(
                    "evaluate: '{}' produced non-finite values",
                    est.name()
                )));
            }
            row.push(&e, truth)?;
            if let (Some(dir), true) = (&cfg.heatmap_dir, i < cfg.heatmap_samples) {
                let plane = sample.spec.plane();
                let r = cfg.heatmap_level * plane..(cfg.heatmap_level + 1) * plane;
                let diff: Vec<f64> = e.data()[r.clone()]
                    .iter()
                    .zip(&truth.data()[r])
                    .map(|(a, b)| (a - b) * (a - b))
                    .collect();
                let stem = dir.join(format!(
                    "{}_{}_level{}",
                    file_safe(&est.name()),
                    file_safe(&sample.id),
                    cfg.heatmap_level
                ));
                let (c, p) = write_heatmap(&diff, sample.spec.n_lat, sample.spec.n_lon, &stem)?;
                heatmaps.push(c);
                heatmaps.push(p);
            }
        }
        for (row, est) in ladder.iter_mut().zip(&sample.sub_spread) {
            row.push(est, truth)?;
        }
    }
    Ok(EvalReport {
        n_samples: test.len(),
        rows: rows.into_iter().map(RowAcc::finish).collect(),
        m_spread: ladder
            .into_iter()
            .enumerate()
            .map(|(k, r)| (k + 1, r.finish()))
            .collect(),
        heatmaps,
    })
}
