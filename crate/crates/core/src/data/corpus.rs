//! JSON-lines corpora and patient-disjoint split manifests.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| DataError::Invalid(e.to_string()))?;
        buf.push(b'\n');
    }
    crate::io::atomic_write(path, &buf)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusEntry>> {
    let entries: Vec<CorpusEntry> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.id.as_str()) {
            return Err(DataError::DuplicateId(e.id.clone()));
        }
    }
    Ok(entries)
}

pub fn write_corpus(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    write_jsonl(path, entries)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?} (train, val or test)")),
        }
    }
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(DataError::Invalid(format!("id {id:?} appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| DataError::Invalid(e.to_string()))?;
        text.push('\n');
        crate::io::atomic_write(path, text.as_bytes())?;
        Ok(())
    }
}

/// 70/10/20 split over patients (records without a patient id count as
/// their own patient), shuffled with `seed`. Ids keep corpus order inside
/// each split.
pub fn split_by_patient(entries: &[CorpusEntry], seed: u64) -> SplitManifest {
    let mut patients: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        patients.entry(e.patient_id.as_deref().unwrap_or(&e.id)).or_default().push(i);
    }
    let mut keys: Vec<&str> = patients.keys().copied().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = keys.len();
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
    let mut which = vec![Split::Test; entries.len()];
    for (rank, key) in keys.iter().enumerate() {
        let split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        for &i in &patients[key] {
            which[i] = split;
        }
    }
    let pick = |s: Split| -> Vec<String> {
        entries.iter().zip(&which).filter(|(_, w)| **w == s).map(|(e, _)| e.id.clone()).collect()
    };
    SplitManifest {
        seed,
        train: pick(Split::Train),
        val: pick(Split::Val),
        test: pick(Split::Test),
    }
}
