use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::kv::{join, KeyValues};
use crate::error::{Error, Result};
use crate::grids::{EnsembleSample, Field, GridSpec};

pub const ESG_MAGIC: [u8; 4] = *b"ESG1";
pub const ESG_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

/// Fixed 40-byte header: magic, version, six extents, eight reserved zero
/// bytes. All integers are little-endian `u32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EsgHeader {
    pub members: u32,
    pub times: u32,
    pub params: u32,
    pub levels: u32,
    pub lat: u32,
    pub lon: u32,
}

impl EsgHeader {
    pub fn counts(&self) -> [u32; 6] {
        [self.members, self.times, self.params, self.levels, self.lat, self.lon]
    }

    /// Number of payload values, or `None` if it overflows `usize`.
    pub fn value_count(&self) -> Option<usize> {
        self.counts()
            .iter()
            .try_fold(1usize, |acc, &c| acc.checked_mul(c as usize))
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&ESG_MAGIC);
        out[4..8].copy_from_slice(&ESG_VERSION.to_le_bytes());
        for (i, c) in self.counts().iter().enumerate() {
            out[8 + 4 * i..12 + 4 * i].copy_from_slice(&c.to_le_bytes());
        }
        out
    }
}

/// Serializes a header and its payload; `values.len()` must match the header.
pub fn encode_esg_raw(header: &EsgHeader, values: &[f32]) -> Result<Vec<u8>> {
    if header.counts().contains(&0) {
        return Err(Error::invalid("esg: all extents must be at least 1"));
    }
    if header.value_count() != Some(values.len()) {
        return Err(Error::invalid(format!(
            "esg: payload has {} values, header implies {:?}",
            values.len(),
            header.value_count()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(&header.encode());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn word(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses and validates a complete ESG byte image.
pub fn decode_esg_raw(bytes: &[u8]) -> Result<(EsgHeader, Vec<f32>)> {
    if bytes.len() >= 4 && bytes[..4] != ESG_MAGIC {
        return Err(Error::NotEsg);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated);
    }
    let version = word(bytes, 4);
    if version != ESG_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let c: Vec<u32> = (0..6).map(|i| word(bytes, 8 + 4 * i)).collect();
    let header = EsgHeader {
        members: c[0],
        times: c[1],
        params: c[2],
        levels: c[3],
        lat: c[4],
        lon: c[5],
    };
    if c.contains(&0) {
        return Err(Error::Corrupt("zero extent in header".into()));
    }
    if bytes[32..HEADER_LEN].iter().any(|&b| b != 0) {
        return Err(Error::Corrupt("reserved header bytes are not zero".into()));
    }
    let expected = header
        .value_count()
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Corrupt("header extents overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Truncated);
    }
    if payload.len() > expected {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Corrupt(format!("non-finite value at index {i}")));
    }
    Ok((header, values))
}

/// Narrows to single precision, rejecting values outside its range.
pub fn to_f32(values: impl IntoIterator<Item = f64>) -> Result<Vec<f32>> {
    values
        .into_iter()
        .map(|v| {
            let x = v as f32;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::invalid(format!(
                    "value {v} is not representable in single precision"
                )))
            }
        })
        .collect()
}

/// Sidecar metadata for a sample file.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub param_names: Vec<String>,
    pub level_values: Vec<f64>,
    pub forecast_times: Vec<u32>,
    pub sample_id: String,
    pub epoch_tag: u32,
    pub control_index: Option<usize>,
}

const META_KEYS: [&str; 6] = [
    "param_names",
    "level_values",
    "forecast_times",
    "sample_id",
    "epoch_tag",
    "control_index",
];

/// Sample ids are single tokens so they survive manifests and file names.
pub fn validate_id(id: &str) -> Result<()> {
    if id.is_empty()
        || id
            .chars()
            .any(|c| c.is_whitespace() || c == '[' || c == ']' || c == '/')
    {
        return Err(Error::invalid(format!("invalid sample id '{id}'")));
    }
    Ok(())
}

impl SampleMeta {
    pub fn of(sample: &EnsembleSample) -> Self {
        SampleMeta {
            param_names: sample.spec.param_names.clone(),
            level_values: sample.spec.level_values.clone(),
            forecast_times: sample.spec.forecast_times.clone(),
            sample_id: sample.sample_id.clone(),
            epoch_tag: sample.epoch_tag,
            control_index: sample.control_index,
        }
    }

    pub fn to_text(&self) -> String {
        let control = self.control_index.map_or_else(|| "none".to_string(), |c| c.to_string());
        format!(
            "param_names={}\nlevel_values={}\nforecast_times={}\nsample_id={}\nepoch_tag={}\ncontrol_index={}\n",
            self.param_names.join(","),
            join(&self.level_values),
            join(&self.forecast_times),
            self.sample_id,
            self.epoch_tag,
            control
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.check_known(&META_KEYS)?;
        let param_names: Vec<String> = kv
            .list("param_names")?
            .ok_or_else(|| Error::invalid("meta: missing key 'param_names'"))?;
        if param_names.iter().any(|p| p.is_empty()) {
            return Err(Error::invalid("meta: empty parameter name"));
        }
        let level_values: Vec<f64> = kv
            .list("level_values")?
            .ok_or_else(|| Error::invalid("meta: missing key 'level_values'"))?;
        let forecast_times = kv
            .list("forecast_times")?
            .ok_or_else(|| Error::invalid("meta: missing key 'forecast_times'"))?;
        let sample_id: String = kv.require("sample_id")?;
        validate_id(&sample_id)?;
        let control_index = match kv.get("control_index") {
            None | Some("none") => None,
            Some(_) => Some(kv.require("control_index")?),
        };
        Ok(SampleMeta {
            param_names,
            level_values,
            forecast_times,
            sample_id,
            epoch_tag: kv.require("epoch_tag")?,
            control_index,
        })
    }
}

/// Encodes a sample as ESG bytes plus sidecar text.
pub fn encode_sample(sample: &EnsembleSample) -> Result<(Vec<u8>, String)> {
    sample.validate()?;
    validate_id(&sample.sample_id)?;
    let s = &sample.spec;
    let header = EsgHeader {
        members: count(sample.n_members())?,
        times: count(s.n_times())?,
        params: count(s.n_params)?,
        levels: count(s.n_levels)?,
        lat: count(s.n_lat)?,
        lon: count(s.n_lon)?,
    };
    let values = to_f32(
        sample
            .members
            .iter()
            .flat_map(|m| m.iter().flat_map(|f| f.data().iter().copied())),
    )?;
    Ok((encode_esg_raw(&header, &values)?, SampleMeta::of(sample).to_text()))
}

fn count(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("extent {n} exceeds u32")))
}

/// Decodes ESG bytes plus sidecar text into a sample.
pub fn decode_sample(bytes: &[u8], meta_text: &str) -> Result<EnsembleSample> {
    let (h, values) = decode_esg_raw(bytes)?;
    let meta = SampleMeta::parse(meta_text)?;
    if meta.param_names.len() != h.params as usize
        || meta.level_values.len() != h.levels as usize
        || meta.forecast_times.len() != h.times as usize
    {
        return Err(Error::Corrupt("sidecar metadata disagrees with header extents".into()));
    }
    let spec = Arc::new(GridSpec::new(
        h.lat as usize,
        h.lon as usize,
        meta.level_values,
        meta.param_names,
        meta.forecast_times,
    )?);
    let n = spec.field_len();
    let mut chunks = values.chunks_exact(n);
    let members = (0..h.members)
        .map(|_| {
            (0..h.times)
                .map(|_| {
                    let chunk = chunks.next().expect("payload length checked");
                    Field::new(spec.clone(), chunk.iter().map(|&v| v as f64).collect())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let sample = EnsembleSample {
        spec,
        members,
        control_index: meta.control_index,
        sample_id: meta.sample_id,
        epoch_tag: meta.epoch_tag,
    };
    sample.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok(sample)
}

/// `<path>.meta`
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_esg(sample: &EnsembleSample, path: &Path) -> Result<()> {
    let (bytes, meta) = encode_sample(sample)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(mp, e))
}

pub fn read_esg(path: &Path) -> Result<EnsembleSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    let meta = fs::read_to_string(&mp).map_err(|e| Error::io(mp, e))?;
    decode_sample(&bytes, &meta)
}
