//! Planted-signal synthetic corpus.
//!
//! Every planted topic owns a block of patches. An active topic adds a
//! signature vector (one per topic and template variant) to its block and
//! contributes its template sentence to the report, replacing the normal
//! filler of its organ group. The report is therefore a deterministic
//! function of the planted signal, while features carry Gaussian noise.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::corpus::{split_by_patient, CorpusEntry, SplitManifest};
use super::features::{FeatureFile, FeatureKind};
use super::{DataError, Result};
use crate::poke::TopicBag;

/// Organ groups in report order: name, member topics, normal filler.
const GROUPS: &[(&str, &[&str], &str)] = &[
    ("heart", &["cardiomegaly"], "the heart size is normal ."),
    ("mediastinum", &[], "the mediastinal contour is stable ."),
    (
        "lungs",
        &[
            "emphysema",
            "pneumonia",
            "edema",
            "atelectasis",
            "cicatrix",
            "opacity",
            "lesion",
            "airspace disease",
            "hypoinflation",
        ],
        "the lungs are clear .",
    ),
    ("pleura", &["effusion", "thickening", "pneumothorax"], "no pleural fluid is seen ."),
    ("bone", &["scoliosis", "fractures"], "no acute bony abnormality ."),
    ("soft tissue", &["hernia", "calcinosis", "medical device"], "soft tissues are normal ."),
];

/// Two template sentences per planted topic.
const TEMPLATES: &[(&str, [&str; 2])] = &[
    ("cardiomegaly", ["there is mild cardiomegaly .", "the heart is enlarged with cardiomegaly ."]),
    ("scoliosis", ["there is mild thoracic scoliosis .", "scoliosis of the spine is present ."]),
    ("fractures", ["there are healed rib fractures .", "old fractures of the ribs are seen ."]),
    ("effusion", ["there is a small left pleural effusion .", "a right pleural effusion is present ."]),
    ("thickening", ["there is mild pleural thickening .", "apical pleural thickening is seen ."]),
    ("pneumothorax", ["there is a small right pneumothorax .", "a left apical pneumothorax is present ."]),
    ("hernia", ["there is a small hiatal hernia .", "a hiatal hernia is present ."]),
    ("calcinosis", ["there is calcinosis of the soft tissues .", "scattered calcinosis is present ."]),
    ("emphysema", ["the lungs are hyperexpanded with emphysema .", "there is upper lobe emphysema ."]),
    ("pneumonia", ["findings are concerning for pneumonia .", "there is right lower lobe pneumonia ."]),
    ("edema", ["there is mild interstitial edema .", "pulmonary edema is present ."]),
    ("atelectasis", ["there is bibasilar atelectasis .", "streaky atelectasis is seen at the left base ."]),
    ("cicatrix", ["there is linear cicatrix at the right base .", "a cicatrix is seen in the left lung ."]),
    ("opacity", ["there is a focal opacity in the right lung .", "a hazy opacity is seen at the left base ."]),
    ("lesion", ["a nodular lesion is seen in the left upper lobe .", "there is a small lesion in the right lung ."]),
    ("airspace disease", ["there is patchy airspace disease .", "airspace disease is seen in the right base ."]),
    ("hypoinflation", ["there is hypoinflation of the lungs .", "lung volumes are low with hypoinflation ."]),
    ("medical device", ["a medical device projects over the chest .", "there is a medical device in the right chest ."]),
];

pub const VARIANTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_records: usize,
    pub seed: u64,
    /// Probability that a record has at least one planted topic.
    pub abnormality_rate: f64,
    pub max_topics: usize,
    pub n_patches: usize,
    pub feature_dim: usize,
    pub signal: f64,
    pub noise: f64,
    pub studies_per_patient: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_records: 500,
            seed: 0,
            abnormality_rate: 0.3,
            max_topics: 2,
            n_patches: 18,
            feature_dim: 32,
            signal: 1.0,
            noise: 0.3,
            studies_per_patient: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub entries: Vec<CorpusEntry>,
    pub features: FeatureFile,
    /// Planted `(topic index, variant)` pairs per record, sorted by topic.
    pub planted: Vec<Vec<(usize, usize)>>,
    pub manifest: SplitManifest,
}

/// Indices (in `bag`) of topics that have templates.
pub fn planted_topics(bag: &TopicBag) -> Result<Vec<usize>> {
    TEMPLATES
        .iter()
        .map(|(name, _)| {
            bag.index_of(name)
                .ok_or_else(|| DataError::Invalid(format!("topic bag lacks planted topic {name:?}")))
        })
        .collect()
}

/// Patches carrying the signature of the `slot`-th planted topic.
pub fn topic_block(slot: usize, n_planted: usize, n_patches: usize) -> Vec<usize> {
    let size = (n_patches / n_planted).max(1);
    (0..size).map(|j| (slot * size + j) % n_patches).collect()
}

fn template(name: &str, variant: usize) -> &'static str {
    TEMPLATES.iter().find(|(n, _)| *n == name).expect("known topic").1[variant]
}

/// Report text for a set of active `(topic name, variant)` pairs.
pub fn compose_report(active: &[(&str, usize)]) -> String {
    let mut sentences = Vec::new();
    for (_, members, filler) in GROUPS {
        let mut any = false;
        for m in *members {
            if let Some((_, v)) = active.iter().find(|(n, _)| n == m) {
                sentences.push(template(m, *v));
                any = true;
            }
        }
        if !any {
            sentences.push(filler);
        }
    }
    sentences.join(" ")
}

pub fn synth_corpus(cfg: &SynthConfig, bag: &TopicBag) -> Result<SynthCorpus> {
    if !(0.0..=1.0).contains(&cfg.abnormality_rate) {
        return Err(DataError::Invalid(format!("abnormality_rate {} outside [0, 1]", cfg.abnormality_rate)));
    }
    if cfg.n_patches == 0 || cfg.feature_dim == 0 || cfg.studies_per_patient == 0 {
        return Err(DataError::Invalid("n_patches, feature_dim and studies_per_patient must be positive".into()));
    }
    let planted_ids = planted_topics(bag)?;
    let n_planted = planted_ids.len();
    let max_topics = cfg.max_topics.clamp(1, n_planted);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signatures: Vec<Vec<Vec<f64>>> = (0..n_planted)
        .map(|_| {
            (0..VARIANTS)
                .map(|_| {
                    (0..cfg.feature_dim)
                        .map(|_| {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            cfg.signal * g
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| DataError::Invalid(e.to_string()))?;

    let mut entries = Vec::with_capacity(cfg.num_records);
    let mut features = FeatureFile::new(FeatureKind::Raw, cfg.n_patches, cfg.feature_dim);
    let mut planted = Vec::with_capacity(cfg.num_records);
    for r in 0..cfg.num_records {
        let mut active: Vec<(usize, usize)> = Vec::new();
        if rng.random_bool(cfg.abnormality_rate) {
            let count = rng.random_range(1..=max_topics);
            for slot in sample(&mut rng, n_planted, count).into_iter() {
                active.push((slot, rng.random_range(0..VARIANTS)));
            }
            active.sort_unstable();
        }
        let mut values: Vec<f64> = (0..cfg.n_patches * cfg.feature_dim).map(|_| noise.sample(&mut rng)).collect();
        for &(slot, v) in &active {
            for p in topic_block(slot, n_planted, cfg.n_patches) {
                let row = &mut values[p * cfg.feature_dim..(p + 1) * cfg.feature_dim];
                for (x, s) in row.iter_mut().zip(&signatures[slot][v]) {
                    *x += s;
                }
            }
        }
        let named: Vec<(&str, usize)> = active.iter().map(|&(s, v)| (TEMPLATES[s].0, v)).collect();
        let id = format!("s{r:05}");
        features.push(id.clone(), values.into_iter().map(|x| x as f32).collect())?;
        entries.push(CorpusEntry {
            id,
            report: compose_report(&named),
            patient_id: Some(format!("p{:05}", r / cfg.studies_per_patient)),
        });
        planted.push(active.iter().map(|&(s, v)| (planted_ids[s], v)).collect());
    }
    let manifest = split_by_patient(&entries, cfg.seed);
    Ok(SynthCorpus {
        entries,
        features,
        planted,
        manifest,
    })
}
