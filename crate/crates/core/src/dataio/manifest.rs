use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::esg::validate_id;
use crate::error::{Error, Result};

/// Identifies the shuffle so other implementations can reproduce a split.
pub const SHUFFLE_ALGORITHM: &str = "chacha8-seed_from_u64/fisher-yates-descending/mul-shift-u64";

/// Train/validation/test partition of sample ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Index in `0..=bound` from one 64-bit draw via a widening multiply.
fn draw_index(rng: &mut ChaCha8Rng, bound: usize) -> usize {
    ((rng.next_u64() as u128 * (bound as u128 + 1)) >> 64) as usize
}

/// In-place Fisher-Yates shuffle: for `i` from `n-1` down to 1, swap `i`
/// with a uniform index in `0..=i`.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = draw_index(rng, i);
        items.swap(i, j);
    }
}

/// Splits `(id, epoch_tag)` pairs. Ids tagged with a test epoch go to the
/// test list in input order; the rest are shuffled with
/// `ChaCha8Rng::seed_from_u64(seed)` and the first `⌊train_frac·n⌋` become
/// training ids.
pub fn split_dataset(
    ids: &[(String, u32)],
    seed: u64,
    train_frac: f64,
    test_epoch_tags: &BTreeSet<u32>,
) -> Result<SplitManifest> {
    if ids.is_empty() {
        return Err(Error::invalid("split: no sample ids"));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::invalid(format!(
            "split: train fraction {train_frac} not in (0, 1)"
        )));
    }
    let mut seen = HashSet::new();
    for (id, _) in ids {
        validate_id(id)?;
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("split: duplicate id '{id}'")));
        }
    }
    let (test, mut rest): (Vec<_>, Vec<_>) = ids.iter().partition(|(_, tag)| test_epoch_tags.contains(tag));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut rest, &mut rng);
    // The tiny offset keeps products such as 0.7·10 from flooring to 6.
    let n_train = (train_frac * rest.len() as f64 + 1e-9).floor() as usize;
    if n_train == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let names = |v: &[&(String, u32)]| v.iter().map(|(id, _)| id.clone()).collect();
    Ok(SplitManifest {
        seed,
        train_ids: names(&rest[..n_train]),
        val_ids: names(&rest[n_train..]),
        test_ids: names(&test),
    })
}

impl SplitManifest {
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train_ids.iter().chain(&self.val_ids).chain(&self.test_ids)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("seed={}\nprng={SHUFFLE_ALGORITHM}\n", self.seed);
        for (name, ids) in [
            ("train", &self.train_ids),
            ("val", &self.val_ids),
            ("test", &self.test_ids),
        ] {
            out.push_str(&format!("[{name}]\n"));
            for id in ids {
                out.push_str(id);
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let err = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        let (n, first) = lines.next().ok_or_else(|| err(0, "empty manifest".into()))?;
        let seed = first
            .trim()
            .strip_prefix("seed=")
            .ok_or_else(|| err(n, "first line must be seed=<n>".into()))?
            .parse::<u64>()
            .map_err(|e| err(n, format!("bad seed: {e}")))?;
        let mut m = SplitManifest {
            seed,
            train_ids: Vec::new(),
            val_ids: Vec::new(),
            test_ids: Vec::new(),
        };
        let mut section: Option<usize> = None;
        let mut seen_sections = [false; 3];
        let mut seen_ids = HashSet::new();
        for (n, raw) in lines {
            let line = raw.trim();
            if section.is_none() && line.starts_with("prng=") {
                continue;
            }
            let header = match line {
                "[train]" => Some(0),
                "[val]" => Some(1),
                "[test]" => Some(2),
                _ => None,
            };
            if let Some(h) = header {
                if seen_sections[h] {
                    return Err(err(n, format!("repeated section {line}")));
                }
                seen_sections[h] = true;
                section = Some(h);
                continue;
            }
            let s = section.ok_or_else(|| err(n, format!("id '{line}' outside a section")))?;
            validate_id(line).map_err(|e| err(n, e.to_string()))?;
            if !seen_ids.insert(line.to_string()) {
                return Err(err(n, format!("id '{line}' listed twice")));
            }
            [&mut m.train_ids, &mut m.val_ids, &mut m.test_ids][s].push(line.to_string());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
