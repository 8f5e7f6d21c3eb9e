use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{synth_utterance, utterance_snr, AudioBatch, SynthParams, MIN_LENGTH};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub length: usize,
    pub snr_db: f64,
}

/// One split: which utterances to synthesize and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub params: SynthParams,
    pub entries: Vec<ManifestEntry>,
}

/// `count` consecutive seeds starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedRange {
    pub start: u64,
    pub count: u64,
}

impl SeedRange {
    fn end(&self) -> Result<u64> {
        self.start
            .checked_add(self.count)
            .ok_or_else(|| Error::invalid("seed range overflows"))
    }
}

/// Train, validation and test manifests over consecutive seed blocks from
/// `base_seed`.
pub fn make_dataset(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    base_seed: u64,
    length: usize,
    params: &SynthParams,
) -> Result<[DatasetManifest; 3]> {
    let mut start = base_seed;
    let mut ranges = [SeedRange { start: 0, count: 0 }; 3];
    for (r, n) in ranges.iter_mut().zip([n_train, n_val, n_test]) {
        *r = SeedRange {
            start,
            count: n as u64,
        };
        start = r.end()?;
    }
    make_dataset_with_ranges(ranges, length, params)
}

/// Like [`make_dataset`] with explicit seed ranges, which must be non-empty
/// and pairwise disjoint.
pub fn make_dataset_with_ranges(
    ranges: [SeedRange; 3],
    length: usize,
    params: &SynthParams,
) -> Result<[DatasetManifest; 3]> {
    for (i, a) in ranges.iter().enumerate() {
        if a.count == 0 {
            return Err(Error::invalid("every split needs at least one utterance"));
        }
        for b in &ranges[i + 1..] {
            if a.start < b.end()? && b.start < a.end()? {
                return Err(Error::invalid(format!(
                    "seed ranges {}..{} and {}..{} overlap",
                    a.start,
                    a.end()?,
                    b.start,
                    b.end()?
                )));
            }
        }
    }
    if length < MIN_LENGTH {
        return Err(Error::invalid(format!("utterance length must be at least {MIN_LENGTH}")));
    }
    let build = |split: &str, r: SeedRange| -> Result<DatasetManifest> {
        let entries = (r.start..r.end()?)
            .map(|seed| {
                Ok(ManifestEntry {
                    seed,
                    length,
                    snr_db: utterance_snr(seed, params)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetManifest {
            split: split.into(),
            params: *params,
            entries,
        })
    };
    Ok([
        build("train", ranges[0])?,
        build("val", ranges[1])?,
        build("test", ranges[2])?,
    ])
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Synthesizes every entry, in manifest order.
    pub fn materialize(&self) -> Result<Vec<AudioBatch>> {
        self.entries
            .par_iter()
            .map(|e| {
                let u = synth_utterance(e.seed, e.length, &self.params)?;
                if u.meta[0].snr_db.to_bits() != e.snr_db.to_bits() {
                    return Err(Error::invalid(format!(
                        "seed {} regenerates at {} dB, manifest says {}",
                        e.seed, u.meta[0].snr_db, e.snr_db
                    )));
                }
                Ok(u)
            })
            .collect()
    }

    /// True when no seed is shared with `other`.
    pub fn is_disjoint(&self, other: &DatasetManifest) -> bool {
        let seeds: std::collections::HashSet<u64> = self.entries.iter().map(|e| e.seed).collect();
        other.entries.iter().all(|e| !seeds.contains(&e.seed))
    }

    /// Line-oriented text: `key value` header lines, then one
    /// `seed T snr_db` line per utterance.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        writeln!(s, "split {}", self.split).unwrap();
        writeln!(s, "sample_rate {}", p.sample_rate).unwrap();
        writeln!(s, "source_snr {} {}", p.source_snr.0, p.source_snr.1).unwrap();
        if let Some((lo, hi)) = p.noise_snr {
            writeln!(s, "noise_snr {lo} {hi}").unwrap();
        }
        s.push_str("# seed T snr_db\n");
        for e in &self.entries {
            writeln!(s, "{} {} {:?}", e.seed, e.length, e.snr_db).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut split = None;
        let mut params = SynthParams {
            noise_snr: None,
            ..SynthParams::default()
        };
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::invalid(format!("manifest line {}: {what}", no + 1));
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad("expected a number"))
            };
            match f[0] {
                "split" if f.len() == 2 => split = Some(f[1].to_string()),
                "sample_rate" if f.len() == 2 => {
                    params.sample_rate = f[1].parse().map_err(|_| bad("bad sample rate"))?
                }
                "source_snr" if f.len() == 3 => params.source_snr = (num(1)?, num(2)?),
                "noise_snr" if f.len() == 3 => params.noise_snr = Some((num(1)?, num(2)?)),
                _ if f.len() == 3 => entries.push(ManifestEntry {
                    seed: f[0].parse().map_err(|_| bad("bad seed"))?,
                    length: f[1].parse().map_err(|_| bad("bad length"))?,
                    snr_db: num(2)?,
                }),
                _ => return Err(bad("unrecognized line")),
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(e) = entries.iter().find(|e| !seen.insert(e.seed)) {
            return Err(Error::invalid(format!("manifest repeats seed {}", e.seed)));
        }
        Ok(Self {
            split: split.ok_or_else(|| Error::invalid("manifest has no split line"))?,
            params,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
