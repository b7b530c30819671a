use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Model, ModelParams, ModelSpec};
use crate::autodiff::Tensor;
use crate::dataio::{decode_esg_raw, encode_esg_raw, join, meta_path, to_f32, EsgHeader, KeyValues};
use crate::error::{Error, Result};
use crate::layers::RunningStats;

/// Serializes a model as a single-row ESG payload (every tensor flattened in
/// name order, then each norm layer's running mean and variance) plus a
/// sidecar holding the topology and each tensor's shape.
pub fn encode_checkpoint(model: &Model) -> Result<(Vec<u8>, String)> {
    model.check_params()?;
    let p = &model.params;
    let mut meta = model.spec.to_text();
    let mut values = Vec::new();
    for (name, t) in &p.tensors {
        meta.push_str(&format!("tensor.{name}={}\n", join(t.shape())));
        values.extend(to_f32(t.data().iter().copied())?);
    }
    for (name, r) in &p.running {
        meta.push_str(&format!(
            "running.{name}={}\nrunning_updates.{name}={}\n",
            r.mean.len(),
            r.updates
        ));
        values.extend(to_f32(r.mean.iter().chain(&r.var).copied())?);
    }
    let header = EsgHeader {
        members: 1,
        times: 1,
        params: 1,
        levels: 1,
        lat: 1,
        lon: u32::try_from(values.len()).map_err(|_| Error::invalid("checkpoint: model too large"))?,
    };
    Ok((encode_esg_raw(&header, &values)?, meta))
}

pub fn decode_checkpoint(bytes: &[u8], meta: &str) -> Result<Model> {
    let kv = KeyValues::parse(meta)?;
    let mut spec = ModelSpec::default();
    spec.apply(&kv)?;
    spec.validate()?;
    let shapes = spec.param_shapes();
    let norms = spec.norm_layers();
    let mut valid: Vec<String> = ModelSpec::KEYS.iter().map(|k| k.to_string()).collect();
    valid.extend(shapes.iter().map(|(n, _)| format!("tensor.{n}")));
    for (n, _) in &norms {
        valid.push(format!("running.{n}"));
        valid.push(format!("running_updates.{n}"));
    }
    kv.check_known(&valid.iter().map(String::as_str).collect::<Vec<_>>())?;

    let (header, values) = decode_esg_raw(bytes)?;
    if header.counts()[..5] != [1, 1, 1, 1, 1] {
        return Err(Error::Corrupt("checkpoint payload must be a single row".into()));
    }
    let need = spec.param_count() + norms.iter().map(|(_, c)| 2 * c).sum::<usize>();
    if values.len() != need {
        return Err(Error::Corrupt(format!(
            "checkpoint holds {} values, topology needs {need}",
            values.len()
        )));
    }
    let mut values = values.into_iter().map(f64::from);
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };

    let mut ordered: Vec<_> = shapes;
    ordered.sort_by(|a, b| a.0.cmp(&b.0));
    let mut tensors = BTreeMap::new();
    for (name, shape) in ordered {
        let stored: Vec<usize> = kv
            .list(&format!("tensor.{name}"))?
            .ok_or_else(|| Error::Corrupt(format!("checkpoint: missing tensor '{name}'")))?;
        if stored != shape {
            return Err(Error::Corrupt(format!(
                "checkpoint: tensor '{name}' has shape {stored:?}, topology needs {shape:?}"
            )));
        }
        let n = shape.iter().product();
        tensors.insert(name, Tensor::new(shape, take(n))?);
    }
    let mut running = BTreeMap::new();
    let mut norms = norms;
    norms.sort();
    for (name, c) in norms {
        let stored: usize = kv
            .optional(&format!("running.{name}"))?
            .ok_or_else(|| Error::Corrupt(format!("checkpoint: missing running stats '{name}'")))?;
        if stored != c {
            return Err(Error::Corrupt(format!(
                "checkpoint: running stats '{name}' have {stored} channels"
            )));
        }
        let updates = kv.require(&format!("running_updates.{name}"))?;
        let mean = take(c);
        let var = take(c);
        running.insert(name, RunningStats { mean, var, updates });
    }
    let model = Model {
        spec,
        params: ModelParams { tensors, running },
    };
    model.check_params()?;
    Ok(model)
}

pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let (bytes, meta) = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(mp, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    let meta = fs::read_to_string(&mp).map_err(|e| Error::io(mp, e))?;
    decode_checkpoint(&bytes, &meta)
}
