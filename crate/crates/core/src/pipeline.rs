//! End-to-end commands over on-disk artifacts, shared by the CLI and tests.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use radreport_metrics::{bleu, cider, rouge_l, MetricError};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    read_corpus, read_jsonl, synth_corpus, tokenize, write_corpus, write_jsonl, CorpusEntry, DataError, FeatureFile, FeatureKind, Split,
    SplitManifest,
};
use crate::mkd::gates::{gate_statistics, GateRow, GateSequence};
use crate::model::PpkedModel;
use crate::poke::TopicBag;
use crate::prke::{IndexError, KnowledgeGraph, RetrievalIndex};
use crate::tensor::TensorError;
use crate::train::{assemble, bleu4, generate_all, pretrain, training_index, training_vocabulary, EpochLog, Example, Generation, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 config, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Index(_) | Error::Checkpoint(_) | Error::Io(_) => 3,
            Error::Model(_) | Error::Metric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub records: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Writes the synthetic corpus, its features and the split manifest.
pub fn run_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let s = &cfg.synth;
    if s.n_patches != cfg.model.n_patches || s.feature_dim != cfg.model.feature_dim || cfg.model.feature_kind != FeatureKind::Raw {
        return Err(Error::Config(format!(
            "synthetic features are raw {}×{} but the model expects {:?} {}×{}",
            s.n_patches, s.feature_dim, cfg.model.feature_kind, cfg.model.n_patches, cfg.model.feature_dim
        )));
    }
    let corpus = synth_corpus(s, &TopicBag::default())?;
    write_corpus(&cfg.data.corpus, &corpus.entries)?;
    corpus.features.save(&cfg.data.features)?;
    corpus.manifest.save(&cfg.data.manifest)?;
    let m = &corpus.manifest;
    Ok(SynthSummary {
        records: corpus.entries.len(),
        train: m.train.len(),
        val: m.val.len(),
        test: m.test.len(),
    })
}

struct Artifacts {
    entries: Vec<CorpusEntry>,
    features: FeatureFile,
    manifest: SplitManifest,
}

fn load_artifacts(cfg: &RunConfig) -> Result<Artifacts> {
    let d = &cfg.data;
    RunConfig::require(&[&d.corpus, &d.features, &d.manifest])?;
    let a = Artifacts {
        entries: read_corpus(&d.corpus)?,
        features: FeatureFile::load(&d.features)?,
        manifest: SplitManifest::load(&d.manifest)?,
    };
    cfg.check_train_size(a.manifest.train.len())?;
    Ok(a)
}

/// Builds and saves the retrieval index over the training split.
pub fn run_index(cfg: &RunConfig) -> Result<usize> {
    let a = load_artifacts(cfg)?;
    let index = training_index(&a.entries, &a.features, &a.manifest, cfg.model.d_report, cfg.model.n_retrieved, cfg.seed)?;
    index.save(&cfg.data.index)?;
    Ok(index.len())
}

fn load_index(cfg: &RunConfig, manifest: &SplitManifest) -> Result<RetrievalIndex> {
    RunConfig::require(&[&cfg.data.index])?;
    let index = RetrievalIndex::load(&cfg.data.index)?;
    for id in manifest.val.iter().chain(&manifest.test) {
        if index.contains(id) {
            return Err(IndexError::Leakage(id.clone()).into());
        }
    }
    Ok(index)
}

pub fn load_graph(cfg: &RunConfig, bag: &TopicBag) -> Result<KnowledgeGraph> {
    match &cfg.data.graph {
        None => Ok(KnowledgeGraph::default_for(bag)?),
        Some(p) => {
            RunConfig::require(&[p])?;
            let text = std::fs::read_to_string(p)?;
            KnowledgeGraph::parse(&text, bag).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub best_bleu4: Option<f64>,
    pub stopped_early: bool,
}

fn examples(cfg: &RunConfig, a: &Artifacts, index: &RetrievalIndex, model: &PpkedModel, split: Split) -> Result<Vec<Example>> {
    assemble(split, &a.entries, &a.features, &a.manifest, index, &model.vocab, &model.bag, &cfg.model)
}

/// Pretraining (when configured) followed by report training with
/// per-epoch validation, best/last checkpoints and a JSON-lines log. With
/// `resume`, training continues from the last checkpoint if one exists.
pub fn run_train(cfg: &RunConfig, resume: bool, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainSummary> {
    let a = load_artifacts(cfg)?;
    let index = load_index(cfg, &a.manifest)?;
    let dir = &cfg.data.checkpoint_dir;
    let last = dir.join(LAST_CHECKPOINT);
    let resuming = resume && last.exists();
    let mut trainer = if resuming {
        let ckpt = Checkpoint::load(&last)?;
        ckpt.check_compatible(&cfg.model)?;
        Trainer::resume(ckpt, cfg.train.clone(), cfg.seed)
    } else {
        let bag = TopicBag::default();
        let graph = load_graph(cfg, &bag)?;
        let vocab = training_vocabulary(&a.entries, &a.manifest, cfg.vocab.policy)?;
        Trainer::new(PpkedModel::new(cfg.model.clone(), vocab, bag, graph, cfg.seed)?, cfg.train.clone(), cfg.seed)
    };
    std::fs::create_dir_all(dir)?;
    let mut log = OpenOptions::new().create(true).write(true).append(resuming).truncate(!resuming).open(dir.join(TRAIN_LOG))?;
    let mut emit = |entry: EpochLog| -> Result<()> {
        let mut line = serde_json::to_string(&entry).expect("log serializes");
        line.push('\n');
        log.write_all(line.as_bytes())?;
        log.flush()?;
        on_epoch(&entry);
        Ok(())
    };

    let train = examples(cfg, &a, &index, &trainer.model, Split::Train)?;
    let val = examples(cfg, &a, &index, &trainer.model, Split::Val)?;
    let validate = !cfg.train.skip_validation && !val.is_empty();

    if !trainer.progress.pretrained && cfg.train.pretrain_epochs > 0 {
        let start = Instant::now();
        let report = pretrain(&mut trainer.model, &train, &val, &cfg.train, cfg.seed)?;
        let n = report.losses.len();
        for (e, &loss) in report.losses.iter().enumerate() {
            emit(EpochLog {
                stage: "pretrain".into(),
                epoch: e + 1,
                train_loss: loss,
                val_bleu4: None,
                val_auc: (e + 1 == n).then(|| report.auc.clone()),
                improved: false,
                wall_time_s: start.elapsed().as_secs_f64() * (e + 1) as f64 / n as f64,
            })?;
        }
    }
    trainer.progress.pretrained = true;

    let opts = cfg.generate.options();
    while !trainer.finished() {
        let start = Instant::now();
        let loss = trainer.train_epoch(&train)?;
        let (val_bleu4, improved) = if validate {
            let b = bleu4(&generate_all(&trainer.model, &val, &opts)?, &val)?;
            (Some(b), trainer.record_validation(b))
        } else {
            (None, true)
        };
        let ckpt = trainer.checkpoint();
        if improved {
            ckpt.save(&dir.join(BEST_CHECKPOINT))?;
        }
        ckpt.save(&last)?;
        emit(EpochLog {
            stage: "train".into(),
            epoch: trainer.progress.epoch,
            train_loss: loss,
            val_bleu4,
            val_auc: None,
            improved,
            wall_time_s: start.elapsed().as_secs_f64(),
        })?;
    }
    Ok(TrainSummary {
        epochs: trainer.progress.epoch,
        final_loss: trainer.progress.train_losses.last().copied().unwrap_or(f64::NAN),
        best_bleu4: trainer.progress.best_bleu4,
        stopped_early: trainer.stopped_early(),
    })
}

/// Generates reports for `split` and writes them as JSON lines; returns the
/// output path.
pub fn run_generate(cfg: &RunConfig, split: Split, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let path = checkpoint.map_or_else(|| cfg.data.checkpoint_dir.join(BEST_CHECKPOINT), Path::to_path_buf);
    RunConfig::require(&[&path])?;
    let ckpt = Checkpoint::load(&path)?;
    ckpt.check_compatible(&cfg.model)?;
    let a = load_artifacts(cfg)?;
    let index = load_index(cfg, &a.manifest)?;
    let data = examples(cfg, &a, &index, &ckpt.model, split)?;
    let gens = generate_all(&ckpt.model, &data, &cfg.generate.options())?;
    let out = cfg.data.output_dir.join(format!("generations_{}.jsonl", split_name(split)));
    write_jsonl(&out, &gens)?;
    Ok(out)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_per_topic: Option<BTreeMap<String, f64>>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        for (name, v) in [
            ("BLEU-1", self.bleu1),
            ("BLEU-2", self.bleu2),
            ("BLEU-3", self.bleu3),
            ("BLEU-4", self.bleu4),
            ("ROUGE-L", self.rouge_l),
            ("CIDEr", self.cider),
        ] {
            s.push_str(&format!("{name:<8} {v:.4}\n"));
        }
        s.push_str("METEOR   not implemented\n");
        s
    }
}

/// Any JSON-lines file of objects with `id` and a `report` or `text` field.
#[derive(serde::Deserialize)]
struct Reported {
    id: String,
    #[serde(alias = "text")]
    report: String,
}

/// Scores generations against references matched by id. Every generation
/// needs a reference; references without a generation are ignored.
pub fn run_evaluate(generations: &Path, references: &Path) -> Result<EvalReport> {
    RunConfig::require(&[generations, references])?;
    let gens: Vec<Reported> = read_jsonl(generations)?;
    let refs: Vec<Reported> = read_jsonl(references)?;
    evaluate_pairs(
        &gens.iter().map(|g| (g.id.as_str(), g.report.as_str())).collect::<Vec<_>>(),
        &refs.iter().map(|r| (r.id.as_str(), r.report.as_str())).collect::<Vec<_>>(),
    )
}

pub fn evaluate_pairs(generations: &[(&str, &str)], references: &[(&str, &str)]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &str> = references.iter().copied().collect();
    let missing: Vec<String> = generations.iter().filter(|(id, _)| !by_id.contains_key(id)).map(|(id, _)| id.to_string()).collect();
    if !missing.is_empty() {
        return Err(DataError::MissingIds(missing).into());
    }
    if generations.is_empty() {
        return Err(DataError::EmptyCorpus.into());
    }
    let cands: Vec<Vec<String>> = generations.iter().map(|(_, r)| tokenize(r)).collect();
    let refs: Vec<Vec<Vec<String>>> = generations.iter().map(|(id, _)| vec![tokenize(by_id[id])]).collect();
    let b = bleu(&cands, &refs, 4)?;
    Ok(EvalReport {
        bleu1: b.get(1),
        bleu2: b.get(2),
        bleu3: b.get(3),
        bleu4: b.get(4),
        rouge_l: rouge_l(&cands, &refs)?,
        cider: cider(&cands, &refs)?,
        auc_per_topic: None,
    })
}

pub fn run_gates(generations: &Path) -> Result<Vec<GateRow>> {
    RunConfig::require(&[generations])?;
    let gens: Vec<Generation> = read_jsonl(generations)?;
    Ok(gate_statistics(
        &gens
            .into_iter()
            .map(|g| GateSequence {
                tokens: g.tokens,
                gates: g.per_step_gates,
            })
            .collect::<Vec<_>>(),
    ))
}

pub fn gates_table(rows: &[GateRow]) -> String {
    let mut s = format!("{:<12} {:>8} {:>8} {:>10} {:>8} {:>8} {:>7}\n", "class", "λ1", "λ2", "sentences", "λ1/tok", "λ2/tok", "tokens");
    for r in rows {
        let class = match r.class {
            crate::mkd::gates::SentenceClass::Normality => "normality",
            crate::mkd::gates::SentenceClass::Abnormality => "abnormality",
        };
        s.push_str(&format!(
            "{class:<12} {:>8.4} {:>8.4} {:>10} {:>8.4} {:>8.4} {:>7}\n",
            r.sentence_lambda1, r.sentence_lambda2, r.sentences, r.token_lambda1, r.token_lambda2, r.tokens
        ));
    }
    s
}
