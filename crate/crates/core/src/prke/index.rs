//! Exact cosine top-K retrieval over training records.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RRGI";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("index requires ≥ N_K records or explicit smaller K (have {have}, K = {k})")]
    TooFewRecords { have: usize, k: usize },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("{what} width {actual} does not match expected {expected} for record {id:?}")]
    Width {
        what: &'static str,
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("K = {k} exceeds the {size} available entries")]
    KTooLarge { k: usize, size: usize },
    #[error("leakage: record {0:?} from a held-out split is present in the retrieval index")]
    Leakage(String),
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IndexError>;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub image: Vec<f64>,
    pub report: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    /// Insertion position in the index.
    pub position: usize,
    pub score: f64,
}

/// Which split a query record belongs to; governs the leakage guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySplit {
    /// The record's own entry is skipped.
    Train,
    /// The record must not be in the index at all.
    HeldOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    d_img: usize,
    d_report: usize,
    entries: Vec<IndexEntry>,
    norms: Vec<f64>,
    by_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    d_img: usize,
    d: usize,
    count: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl RetrievalIndex {
    pub fn new(d_img: usize, d_report: usize) -> Self {
        Self {
            d_img,
            d_report,
            entries: Vec::new(),
            norms: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn insert(&mut self, entry: IndexEntry) -> Result<()> {
        if self.by_id.contains_key(&entry.id) {
            return Err(IndexError::DuplicateId(entry.id));
        }
        for (what, expected, actual) in [
            ("image embedding", self.d_img, entry.image.len()),
            ("report embedding", self.d_report, entry.report.len()),
        ] {
            if expected != actual {
                return Err(IndexError::Width {
                    what,
                    id: entry.id,
                    expected,
                    actual,
                });
            }
        }
        self.by_id.insert(entry.id.clone(), self.entries.len());
        self.norms.push(norm(&entry.image));
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn d_report(&self) -> usize {
        self.d_report
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    /// Cosine similarity of `query` against every entry, in insertion order.
    /// Zero-norm vectors score `-inf`.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        let qn = norm(query);
        self.entries
            .iter()
            .zip(&self.norms)
            .map(|(e, &en)| {
                if qn == 0.0 || en == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    e.image.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (qn * en)
                }
            })
            .collect()
    }

    /// Top-`k` entries by cosine, descending; ties go to the earlier entry.
    pub fn retrieve_topk(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        self.retrieve_excluding(query, k, None)
    }

    fn retrieve_excluding(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<Hit>> {
        if query.len() != self.d_img {
            return Err(IndexError::Width {
                what: "query",
                id: String::new(),
                expected: self.d_img,
                actual: query.len(),
            });
        }
        let size = self.len() - usize::from(exclude.is_some());
        if k > size {
            return Err(IndexError::KTooLarge { k, size });
        }
        let scores = self.scores(query);
        let mut order: Vec<usize> = (0..self.len()).filter(|&i| Some(i) != exclude).collect();
        let cmp = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
        if k < order.len() {
            order.select_nth_unstable_by(k, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| Hit {
                id: self.entries[i].id.clone(),
                position: i,
                score: scores[i],
            })
            .collect())
    }

    /// Retrieval for a corpus record with the leakage guard applied.
    pub fn retrieve_for(&self, id: &str, split: QuerySplit, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        let own = self.by_id.get(id).copied();
        match (split, own) {
            (QuerySplit::HeldOut, Some(_)) => Err(IndexError::Leakage(id.to_owned())),
            _ => self.retrieve_excluding(query, k, own),
        }
    }

    /// Stacks the report embeddings of `hits` into `W_Pr` (`K × d`).
    pub fn report_matrix(&self, hits: &[Hit]) -> Tensor {
        let rows: Vec<Vec<f64>> = hits.iter().map(|h| self.entries[h.position].report.clone()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            d_img: self.d_img,
            d: self.d_report,
            count: self.len(),
        })
        .map_err(|e| IndexError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for e in &self.entries {
            w.write_all(&(e.id.len() as u32).to_le_bytes())?;
            w.write_all(e.id.as_bytes())?;
            for v in e.image.iter().chain(&e.report) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(IndexError::Format("bad magic".into()));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(truncated)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| IndexError::Format(e.to_string()))?;
        if header.version != VERSION {
            return Err(IndexError::Format(format!(
                "unsupported version {} (expected {VERSION})",
                header.version
            )));
        }
        let mut index = Self::new(header.d_img, header.d);
        for _ in 0..header.count {
            let id_len = read_u32(&mut r)? as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id).map_err(truncated)?;
            let id = String::from_utf8(id).map_err(|e| IndexError::Format(e.to_string()))?;
            let image = read_f64s(&mut r, header.d_img)?;
            let report = read_f64s(&mut r, header.d)?;
            index.insert(IndexEntry { id, image, report })?;
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::io::atomic_write(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn truncated(e: std::io::Error) -> IndexError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        IndexError::Format("truncated".into())
    } else {
        IndexError::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Builds an index from training records, requiring at least `k` of them.
pub fn build_index(records: impl IntoIterator<Item = IndexEntry>, d_img: usize, d_report: usize, k: usize) -> Result<RetrievalIndex> {
    let mut index = RetrievalIndex::new(d_img, d_report);
    for e in records {
        index.insert(e)?;
    }
    if index.len() < k || index.is_empty() {
        return Err(IndexError::TooFewRecords { have: index.len(), k });
    }
    Ok(index)
}
