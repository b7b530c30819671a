use std::fs;
use std::path::Path;

use super::kv::{join, KeyValues};
use crate::error::{Error, Result};
use crate::grids::NormStats;

/// Standardization statistics for raw fields and, separately, for the
/// ensemble spread at each forecast time.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsFile {
    pub field: NormStats,
    /// One entry per forecast time index.
    pub spread: Vec<NormStats>,
}

impl StatsFile {
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        for s in &self.spread {
            s.validate()?;
            if (s.n_params, s.n_levels, s.std_floor) != (self.field.n_params, self.field.n_levels, self.field.std_floor)
            {
                return Err(Error::invalid("stats: spread statistics on a different grid"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let f = &self.field;
        let mut out = format!(
            "n_params={}\nn_levels={}\nn_times={}\nstd_floor={}\nfield.mean={}\nfield.std={}\n",
            f.n_params,
            f.n_levels,
            self.spread.len(),
            f.std_floor,
            join(&f.mean),
            join(&f.std)
        );
        for (t, s) in self.spread.iter().enumerate() {
            out.push_str(&format!(
                "spread.{t}.mean={}\nspread.{t}.std={}\n",
                join(&s.mean),
                join(&s.std)
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let n_params: usize = kv.require("n_params")?;
        let n_levels: usize = kv.require("n_levels")?;
        let n_times: usize = kv.require("n_times")?;
        let std_floor: f64 = kv.require("std_floor")?;
        if n_times > 1024 {
            return Err(Error::invalid("stats: implausible n_times"));
        }
        let mut valid = vec![
            "n_params".to_string(),
            "n_levels".to_string(),
            "n_times".to_string(),
            "std_floor".to_string(),
            "field.mean".to_string(),
            "field.std".to_string(),
        ];
        for t in 0..n_times {
            valid.push(format!("spread.{t}.mean"));
            valid.push(format!("spread.{t}.std"));
        }
        kv.check_known(&valid.iter().map(String::as_str).collect::<Vec<_>>())?;
        let load = |prefix: &str| -> Result<NormStats> {
            let get = |k: &str| {
                kv.list::<f64>(&format!("{prefix}.{k}"))?
                    .ok_or_else(|| Error::invalid(format!("stats: missing key '{prefix}.{k}'")))
            };
            let s = NormStats {
                n_params,
                n_levels,
                mean: get("mean")?,
                std: get("std")?,
                std_floor,
            };
            s.validate()?;
            Ok(s)
        };
        let field = load("field")?;
        let spread = (0..n_times)
            .map(|t| load(&format!("spread.{t}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(StatsFile { field, spread })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
