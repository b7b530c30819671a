//! Entry points shared by the cargo-fuzz targets in `fuzz/` and the corpus
//! replay test. Each one feeds arbitrary bytes to a parser or decoder and
//! panics only on a real bug: a crash inside the parser or a successful
//! parse that does not survive re-encoding.

use crate::dataio::{
    decode_esg_raw, decode_sample, encode_esg_raw, encode_sample, KeyValues, SampleMeta, SplitManifest, StatsFile,
};
use crate::grids::GridSpec;
use crate::models::{decode_checkpoint, encode_checkpoint, ModelSpec};
use crate::synth::GenConfig;
use crate::train::{InputConfig, TrainConfig};

/// Names of every target, matching the binaries in `fuzz/fuzz_targets`.
pub const TARGETS: [&str; 7] = [
    "esg_decode",
    "sample_decode",
    "meta_parse",
    "manifest_parse",
    "stats_parse",
    "config_parse",
    "checkpoint_decode",
];

/// Runs the named target on one input. Unknown names panic.
pub fn run(target: &str, data: &[u8]) {
    match target {
        "esg_decode" => esg_decode(data),
        "sample_decode" => sample_decode(data),
        "meta_parse" => meta_parse(data),
        "manifest_parse" => manifest_parse(data),
        "stats_parse" => stats_parse(data),
        "config_parse" => config_parse(data),
        "checkpoint_decode" => checkpoint_decode(data),
        other => panic!("unknown fuzz target '{other}'"),
    }
}

/// Splits `[len: u16 LE][text: len bytes][rest]` into sidecar text and a binary image.
fn split_sidecar(data: &[u8]) -> Option<(&str, &[u8])> {
    let len = u16::from_le_bytes(data.get(..2)?.try_into().ok()?) as usize;
    let text = std::str::from_utf8(data.get(2..2 + len)?).ok()?;
    Some((text, &data[2 + len..]))
}

/// Prefixes sidecar text with its length, the inverse of `split_sidecar`.
pub fn join_sidecar(text: &str, bytes: &[u8]) -> Vec<u8> {
    let len = u16::try_from(text.len()).expect("sidecar under 64 KiB");
    let mut out = len.to_le_bytes().to_vec();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(bytes);
    out
}

pub fn esg_decode(data: &[u8]) {
    if let Ok((header, values)) = decode_esg_raw(data) {
        let again = encode_esg_raw(&header, &values).expect("decoded image re-encodes");
        assert_eq!(again, data, "ESG image is not canonical");
    }
}

pub fn sample_decode(data: &[u8]) {
    let Some((meta, bytes)) = split_sidecar(data) else {
        return;
    };
    if let Ok(sample) = decode_sample(bytes, meta) {
        let (b, m) = encode_sample(&sample).expect("decoded sample re-encodes");
        assert_eq!(b, bytes);
        assert_eq!(decode_sample(&b, &m).expect("re-encoded sample decodes"), sample);
    }
}

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

pub fn meta_parse(data: &[u8]) {
    if let Some(Ok(meta)) = text(data).map(SampleMeta::parse) {
        assert_eq!(SampleMeta::parse(&meta.to_text()).expect("meta round trip"), meta);
    }
}

pub fn manifest_parse(data: &[u8]) {
    if let Some(Ok(m)) = text(data).map(SplitManifest::parse) {
        assert_eq!(SplitManifest::parse(&m.to_text()).expect("manifest round trip"), m);
    }
}

pub fn stats_parse(data: &[u8]) {
    if let Some(Ok(s)) = text(data).map(StatsFile::parse) {
        assert_eq!(StatsFile::parse(&s.to_text()).expect("stats round trip"), s);
    }
}

pub fn config_parse(data: &[u8]) {
    let Some(Ok(kv)) = text(data).map(KeyValues::parse) else {
        return;
    };
    let mut gen = GenConfig::default();
    if gen.apply(&kv).is_ok() {
        let _ = gen.validate();
    }
    let mut train = TrainConfig::default();
    if train.apply(&kv).is_ok() {
        let _ = train.validate();
    }
    let grid = GridSpec::desk_default();
    if let Ok(input) = InputConfig::from_kv(&grid, &kv) {
        let _ = input.validate(&grid, 10);
    }
    let mut spec = ModelSpec::default();
    if spec.apply(&kv).is_ok() && spec.validate().is_ok() {
        let mut again = ModelSpec::default();
        again
            .apply(&KeyValues::parse(&spec.to_text()).expect("spec text parses"))
            .expect("spec round trip");
        assert_eq!(again, spec);
    }
}

pub fn checkpoint_decode(data: &[u8]) {
    let Some((meta, bytes)) = split_sidecar(data) else {
        return;
    };
    if let Ok(model) = decode_checkpoint(bytes, meta) {
        let (b, m) = encode_checkpoint(&model).expect("decoded model re-encodes");
        assert_eq!(decode_checkpoint(&b, &m).expect("re-encoded model decodes"), model);
    }
}
