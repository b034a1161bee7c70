//! Checkpoint files: magic, version, a JSON header (config, vocabulary,
//! topics, graph, parameter table, training progress), then raw f64 data.
//!
//! Layout after the header: every parameter value in store order, then, when
//! optimizer state is present, all first moments followed by all second
//! moments. Little-endian throughout.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::model::{ModelConfig, PpkedModel};
use crate::optim::{AdamConfig, AdamState};
use crate::pipeline::{Error, Result};
use crate::poke::TopicBag;
use crate::prke::KnowledgeGraph;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RRGC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where a training run stands after its last completed epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Progress {
    /// Completed report-training epochs.
    pub epoch: usize,
    pub pretrained: bool,
    pub best_bleu4: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
    pub train_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: [usize; 2],
    requires_grad: bool,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step_count: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    seed: u64,
    vocab: Vocabulary,
    topics: Vec<String>,
    groups: Vec<(String, Vec<usize>)>,
    /// Used when the graph was built from an explicit adjacency.
    adjacency: Option<Vec<Vec<u8>>>,
    params: Vec<ParamMeta>,
    progress: Option<Progress>,
    adam: Option<AdamMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: PpkedModel,
    /// Seed the parameter layout was initialized with.
    pub seed: u64,
    pub progress: Option<Progress>,
    pub adam: Option<AdamState>,
}

fn format_err(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let m = &self.model;
        let s = &m.store;
        let graph = &m.graph;
        let n = graph.len();
        let adjacency = graph.groups().is_empty().then(|| {
            (0..n).map(|i| (0..n).map(|j| graph.adjacency().get(i, j) as u8).collect()).collect()
        });
        let header = Header {
            model: m.config.clone(),
            seed: self.seed,
            vocab: m.vocab.clone(),
            topics: m.bag.names().to_vec(),
            groups: graph.groups().to_vec(),
            adjacency,
            params: s
                .ids()
                .map(|id| {
                    let v = s.value(id);
                    ParamMeta {
                        name: s.name(id).to_owned(),
                        shape: [v.rows(), v.cols()],
                        requires_grad: s.requires_grad(id),
                    }
                })
                .collect(),
            progress: self.progress.clone(),
            adam: self.adam.as_ref().map(|a| AdamMeta {
                config: a.config.clone(),
                step_count: a.step_count,
            }),
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + json.len() + s.num_scalars() * 8 * 3);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        for id in s.ids() {
            put(s.value(id).data());
        }
        if let Some(a) = &self.adam {
            a.first_moment.iter().for_each(|m| put(m));
            a.second_moment.iter().for_each(|v| put(v));
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(format_err("truncated checkpoint"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(format_err("bad magic: not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(len)?).map_err(|e| format_err(format!("header: {e}")))?;

        let bag = TopicBag::new(header.topics.clone()).map_err(|e| format_err(e.to_string()))?;
        let graph = match &header.adjacency {
            None => KnowledgeGraph::from_groups(header.topics.clone(), header.groups.clone()),
            Some(rows) => {
                let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&b| f64::from(b)).collect()).collect();
                KnowledgeGraph::from_adjacency(header.topics.clone(), Tensor::from_rows(&rows))
            }
        }
        .map_err(|e| format_err(e.to_string()))?;
        let mut model = PpkedModel::new(header.model, header.vocab, bag, graph, header.seed).map_err(|e| format_err(e.to_string()))?;
        if model.store.len() != header.params.len() {
            return Err(format_err(format!(
                "checkpoint has {} parameters, layout expects {}",
                header.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        let mut read = |n: usize| -> Result<Vec<f64>> {
            Ok(take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        for (&id, meta) in ids.iter().zip(&header.params) {
            let v = model.store.value(id);
            if model.store.name(id) != meta.name || [v.rows(), v.cols()] != meta.shape {
                return Err(format_err(format!(
                    "parameter {:?} {:?} does not match layout {:?} {:?}",
                    meta.name,
                    meta.shape,
                    model.store.name(id),
                    v.shape()
                )));
            }
            let data = read(meta.shape[0] * meta.shape[1])?;
            model.store.set_value(id, Tensor::new(&meta.shape, data).map_err(|e| format_err(e.to_string()))?)
                .map_err(|e| format_err(e.to_string()))?;
            model.store.set_requires_grad(id, meta.requires_grad);
        }
        let adam = match header.adam {
            None => None,
            Some(meta) => {
                let sizes: Vec<usize> = header.params.iter().map(|p| p.shape[0] * p.shape[1]).collect();
                let first_moment = sizes.iter().map(|&n| read(n)).collect::<Result<Vec<_>>>()?;
                let second_moment = sizes.iter().map(|&n| read(n)).collect::<Result<Vec<_>>>()?;
                Some(AdamState {
                    config: meta.config,
                    step_count: meta.step_count,
                    first_moment,
                    second_moment,
                })
            }
        };
        if !cur.is_empty() {
            return Err(format_err(format!("{} trailing bytes after checkpoint data", cur.len())));
        }
        Ok(Self {
            model,
            seed: header.seed,
            progress: header.progress,
            adam,
        })
    }

    /// Atomic: an interrupted save leaves any previous file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::io::atomic_write(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Data(crate::data::DataError::Invalid(format!("{}: {e}", path.display()))))?;
        Self::read_from(std::io::BufReader::new(f)).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Refuses a run configuration whose model section differs from the one
    /// the checkpoint was trained with, listing every differing field.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let diff = config_diff(&self.model.config, config);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "checkpoint was trained with a different model configuration:\n{}",
                diff.join("\n")
            )))
        }
    }
}

/// `field: checkpoint → config` lines for every differing field.
pub fn config_diff(checkpoint: &ModelConfig, config: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(checkpoint).expect("config serializes");
    let b = serde_json::to_value(config).expect("config serializes");
    let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("  {k}: checkpoint {v}, config {}", b.get(k).map_or("missing".into(), |x| x.to_string())))
        .collect()
}
