//! File formats: ESG sample files with `.meta` sidecars, split manifests,
//! norm-stat files, `key=value` configs and heatmaps.

mod esg;
mod heatmap;
mod kv;
mod manifest;
mod stats;

pub use esg::{
    decode_esg_raw, decode_sample, encode_esg_raw, encode_sample, meta_path, read_esg, to_f32, validate_id, write_esg,
    EsgHeader, SampleMeta, ESG_MAGIC, ESG_VERSION, HEADER_LEN,
};
pub use heatmap::{heatmap_csv, heatmap_pgm, write_heatmap, LOG_FLOOR};
pub use kv::{join, KeyValues};
pub use manifest::{shuffle, split_dataset, SplitManifest, SHUFFLE_ALGORITHM};
pub use stats::StatsFile;
