//! Dataset assembly, tag pretraining and report training.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radreport_metrics::{bleu, roc_auc};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, Progress};
use crate::config::{HeadInput, TrainConfig};
use crate::data::{
    derive_topic_labels, image_embedding, report_embedding, tokenize, CorpusEntry, DataError, FeatureFile, Split, SplitManifest,
    VocabPolicy, Vocabulary,
};
use crate::mkd::{self, DecodeOptions};
use crate::model::{ExampleInput, ModelConfig, PpkedModel};
use crate::nn::{Ctx, ParamBuilder};
use crate::optim::{AdamConfig, AdamState};
use crate::pipeline::{Error, Result};
use crate::poke::{explore_posterior, positive_weights, TopicBag, TopicHead};
use crate::prke::{build_index, IndexEntry, QuerySplit, RetrievalIndex};
use crate::tensor::Tensor;

/// One record ready for the model.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    /// `N_I × feature_dim`.
    pub features: Tensor,
    /// `N_K × d_report` embeddings of the retrieved training reports.
    pub retrieved: Tensor,
    pub retrieved_ids: Vec<String>,
    pub words: Vec<String>,
    pub tokens: Vec<usize>,
    pub labels: Vec<bool>,
}

impl Example {
    pub fn input(&self) -> ExampleInput<'_> {
        ExampleInput {
            features: &self.features,
            retrieved: &self.retrieved,
        }
    }
}

fn entries_of<'a>(entries: &'a [CorpusEntry], ids: &[String]) -> Result<Vec<&'a CorpusEntry>> {
    let by_id: HashMap<&str, &CorpusEntry> = entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let missing: Vec<String> = ids.iter().filter(|id| !by_id.contains_key(id.as_str())).cloned().collect();
    if !missing.is_empty() {
        return Err(DataError::MissingIds(missing).into());
    }
    Ok(ids.iter().map(|id| by_id[id.as_str()]).collect())
}

fn features_of<'a>(features: &'a FeatureFile, id: &str) -> Result<&'a [f32]> {
    features.get(id).ok_or_else(|| DataError::MissingIds(vec![id.to_owned()]).into())
}

/// Vocabulary over the training split only.
pub fn training_vocabulary(entries: &[CorpusEntry], manifest: &SplitManifest, policy: VocabPolicy) -> Result<Vocabulary> {
    let train = entries_of(entries, &manifest.train)?;
    let tokens: Vec<Vec<String>> = train.iter().map(|e| tokenize(&e.report)).collect();
    Ok(crate::data::build_vocab(tokens.iter().map(Vec::as_slice), policy)?)
}

/// Retrieval index over the training split: image keys are mean-pooled
/// patch features, values are hashed report embeddings.
pub fn training_index(
    entries: &[CorpusEntry],
    features: &FeatureFile,
    manifest: &SplitManifest,
    d_report: usize,
    k: usize,
    seed: u64,
) -> Result<RetrievalIndex> {
    let train = entries_of(entries, &manifest.train)?;
    let records = train
        .iter()
        .map(|e| {
            Ok(IndexEntry {
                id: e.id.clone(),
                image: image_embedding(features_of(features, &e.id)?, features.n_patches, features.width),
                report: report_embedding(&tokenize(&e.report), d_report, seed),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // Training queries exclude themselves, so one spare record is needed.
    Ok(build_index(records, features.width, d_report, k + 1)?)
}

/// Builds the examples of `split`, retrieving `N_K` training reports per
/// record. Training records never retrieve themselves; held-out records
/// must not be in the index.
pub fn assemble(
    split: Split,
    entries: &[CorpusEntry],
    features: &FeatureFile,
    manifest: &SplitManifest,
    index: &RetrievalIndex,
    vocab: &Vocabulary,
    bag: &TopicBag,
    config: &ModelConfig,
) -> Result<Vec<Example>> {
    features.validate(config.n_patches, config.feature_dim)?;
    if features.kind != config.feature_kind {
        return Err(Error::Config(format!(
            "feature file holds {:?} features but the model expects {:?}",
            features.kind, config.feature_kind
        )));
    }
    if index.d_img() != features.width || index.d_report() != config.d_report {
        return Err(Error::Config(format!(
            "index widths ({}, {}) do not match features {} / d_report {}",
            index.d_img(),
            index.d_report(),
            features.width,
            config.d_report
        )));
    }
    let query_split = match split {
        Split::Train => QuerySplit::Train,
        Split::Val | Split::Test => QuerySplit::HeldOut,
    };
    entries_of(entries, manifest.ids(split))?
        .into_iter()
        .map(|e| {
            let raw = features_of(features, &e.id)?;
            let query = image_embedding(raw, features.n_patches, features.width);
            let hits = index.retrieve_for(&e.id, query_split, &query, config.n_retrieved)?;
            let words = tokenize(&e.report);
            Ok(Example {
                id: e.id.clone(),
                features: Tensor::new(&[features.n_patches, features.width], raw.iter().map(|&v| f64::from(v)).collect())?,
                retrieved: index.report_matrix(&hits),
                retrieved_ids: hits.into_iter().map(|h| h.id).collect(),
                tokens: vocab.encode(&words),
                labels: derive_topic_labels(&words, bag),
                words,
            })
        })
        .collect()
}

fn mix(parts: &[u64]) -> u64 {
    // SplitMix64 finalizer folded over the parts.
    parts.iter().fold(0x9e37_79b9_7f4a_7c15u64, |h, &p| {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

fn epoch_order(n: usize, seed: u64, stage: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[seed, stage, epoch as u64])));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean weighted BCE per example, per epoch.
    pub losses: Vec<f64>,
    /// Validation AUC per topic; `None` when a topic's validation labels are
    /// single-class.
    pub auc: Vec<Option<f64>>,
}

fn head_logits<'t>(model: &PpkedModel, ctx: &Ctx<'t>, head: &TopicHead, head_input: HeadInput, ex: &Example) -> Result<crate::Var<'t>> {
    let raw = ctx.tape.constant(ex.features.clone());
    let image = match &model.layout.input_proj {
        Some(p) => p.forward(ctx, raw)?,
        None => raw,
    };
    let pooled_from = match head_input {
        HeadInput::Image => image,
        HeadInput::Posterior => explore_posterior(ctx, image, &model.layout.poke)?.i_prime,
    };
    Ok(head.logits(ctx, pooled_from)?)
}

/// Weighted-BCE tag pretraining. The classification head lives in a copy of
/// the parameter store and is discarded afterwards; every other updated
/// weight is written back into `model`.
pub fn pretrain(model: &mut PpkedModel, train: &[Example], val: &[Example], cfg: &TrainConfig, seed: u64) -> Result<PretrainReport> {
    let n_topics = model.bag.len();
    let mut store = model.store.clone();
    let head = {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 1]));
        TopicHead::new(&mut ParamBuilder::new(&mut store, &mut rng), model.config.d_model, n_topics)?
    };
    let labels: Vec<Vec<bool>> = train.iter().map(|e| e.labels.clone()).collect();
    let weights = positive_weights(&labels, n_topics);
    let mut adam = AdamState::new(
        &store,
        AdamConfig {
            learning_rate: cfg.pretrain_learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let order = epoch_order(train.len(), seed, 1, epoch);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::training(mix(&[seed, 1, epoch as u64, b as u64]));
            let ctx = Ctx::new(&tape, &store, model.config.dropout);
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &train[i];
                let targets: Vec<f64> = ex.labels.iter().map(|&l| f64::from(u8::from(l))).collect();
                parts.push(head_logits(model, &ctx, &head, cfg.head_input, ex)?.bce_with_logits(&targets, &weights)?);
            }
            let loss = parts[1..].iter().try_fold(parts[0], |acc, p| acc.add(*p))?.scale(1.0 / batch.len() as f64);
            total += loss.item() * batch.len() as f64;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&mut store);
            adam.step(&mut store)?;
            store.zero_grad();
        }
        losses.push(total / train.len().max(1) as f64);
    }
    for id in model.store.ids() {
        model.store.set_value(id, store.value(id).clone())?;
    }

    let mut scores = vec![Vec::with_capacity(val.len()); n_topics];
    for ex in val {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, model.config.dropout);
        let logits = head_logits(model, &ctx, &head, cfg.head_input, ex)?.value();
        for (k, s) in scores.iter_mut().enumerate() {
            s.push(logits.data()[k]);
        }
    }
    let auc = (0..n_topics)
        .map(|k| {
            let y: Vec<bool> = val.iter().map(|e| e.labels[k]).collect();
            roc_auc(&scores[k], &y).ok()
        })
        .collect();
    Ok(PretrainReport { losses, auc })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_bleu4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<Vec<Option<f64>>>,
    pub improved: bool,
    pub wall_time_s: f64,
}

/// Report-generation training state: model, optimizer and progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: PpkedModel,
    pub adam: AdamState,
    pub progress: Progress,
    pub config: TrainConfig,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: PpkedModel, config: TrainConfig, seed: u64) -> Self {
        let adam = AdamState::new(
            &model.store,
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        Self {
            model,
            adam,
            progress: Progress::default(),
            config,
            seed,
        }
    }

    /// Continues a run; optimizer state and progress come from the
    /// checkpoint when it carries them.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig, seed: u64) -> Self {
        let mut t = Self::new(ckpt.model, config, seed);
        if let Some(a) = ckpt.adam {
            t.adam = a;
            t.adam.config.learning_rate = t.config.learning_rate;
        }
        t.progress = ckpt.progress.unwrap_or_default();
        t
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            seed: self.seed,
            progress: Some(self.progress.clone()),
            adam: Some(self.adam.clone()),
        }
    }

    /// One pass over `data` in a seeded order. Returns the token-weighted mean
    /// NLL over the epoch.
    pub fn train_epoch(&mut self, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(DataError::EmptyCorpus.into());
        }
        let epoch = self.progress.epoch;
        let order = epoch_order(data.len(), self.seed, 2, epoch);
        let (mut nll, mut count) = (0.0, 0usize);
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let tape = Tape::training(mix(&[self.seed, 2, epoch as u64, b as u64]));
            let ctx = self.model.bind(&tape);
            let parts = batch
                .iter()
                .map(|&i| self.model.example_nll(&ctx, &data[i].input(), &data[i].tokens))
                .collect::<crate::tensor::Result<Vec<_>>>()?;
            let n: usize = parts.iter().map(|p| p.1).sum();
            let loss = mkd::batch_loss(&parts)?;
            nll += loss.item() * n as f64;
            count += n;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&mut self.model.store);
            self.adam.step(&mut self.model.store)?;
            self.model.store.zero_grad();
        }
        let mean = nll / count as f64;
        self.progress.epoch += 1;
        self.progress.train_losses.push(mean);
        Ok(mean)
    }

    pub fn stopped_early(&self) -> bool {
        self.progress.best_epoch.is_some() && self.progress.epochs_since_best >= self.config.patience
    }

    pub fn finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs || self.stopped_early()
    }

    /// Records a validation BLEU-4; returns whether it is a new best.
    pub fn record_validation(&mut self, bleu4: f64) -> bool {
        let p = &mut self.progress;
        let improved = p.best_bleu4.is_none_or(|b| bleu4 > b);
        if improved {
            p.best_bleu4 = Some(bleu4);
            p.best_epoch = Some(p.epoch);
            p.epochs_since_best = 0;
        } else {
            p.epochs_since_best += 1;
        }
        improved
    }
}

/// Greedy (or beam) generation for a set of examples.
pub fn generate_all(model: &PpkedModel, examples: &[Example], opts: &DecodeOptions) -> Result<Vec<Generation>> {
    examples
        .iter()
        .map(|ex| {
            let g = model.generate(&ex.input(), opts)?;
            let tokens: Vec<String> = g
                .token_ids
                .iter()
                .map(|&t| model.vocab.token(t).unwrap_or(crate::data::vocab::SPECIALS[crate::data::vocab::UNK]).to_owned())
                .collect();
            Ok(Generation {
                id: ex.id.clone(),
                text: tokens.join(" "),
                token_ids: g.token_ids,
                tokens,
                per_step_gates: g.gates,
                log_prob: g.log_prob,
                finished: g.finished,
            })
        })
        .collect()
}

/// One generated report with the distilling gates of each emitted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub id: String,
    pub text: String,
    pub token_ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// `[λ1, λ2]` per emitted token, averaged over the knowledge rows.
    pub per_step_gates: Vec<[f64; 2]>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Corpus BLEU-4 of generations against the examples' own reports.
pub fn bleu4(generations: &[Generation], examples: &[Example]) -> Result<f64> {
    let cands: Vec<Vec<String>> = generations.iter().map(|g| g.tokens.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = examples.iter().map(|e| vec![e.words.clone()]).collect();
    Ok(bleu(&cands, &refs, 4)?.get(4))
}
