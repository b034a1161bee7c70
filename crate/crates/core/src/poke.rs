//! Posterior knowledge: align image patches with the topic bag and extract
//! topic-grounded region features `I′`.

use std::collections::HashSet;

use crate::attention::{run_stack, AttendBlock, NormParams};
use crate::autograd::Var;
use crate::nn::{Ctx, Linear, ParamBuilder};
use crate::params::ParamId;
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_TOPICS: [&str; 20] = [
    "cardiomegaly",
    "scoliosis",
    "fractures",
    "effusion",
    "thickening",
    "pneumothorax",
    "hernia",
    "calcinosis",
    "emphysema",
    "pneumonia",
    "edema",
    "atelectasis",
    "cicatrix",
    "opacity",
    "lesion",
    "airspace disease",
    "hypoinflation",
    "medical device",
    "normal",
    "other",
];

/// Ordered, unique topic names. The embedding matrix `T` lives in the model's
/// parameter store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicBag {
    names: Vec<String>,
}

impl TopicBag {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(TensorError::Contract("topic bag is empty".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(TensorError::Contract(format!("duplicate topic {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn words(&self, topic: usize) -> impl Iterator<Item = &str> {
        self.names[topic].split_whitespace()
    }

    /// Index of the catch-all "normal" topic, if present.
    pub fn normal(&self) -> Option<usize> {
        self.index_of("normal")
    }
}

impl Default for TopicBag {
    fn default() -> Self {
        Self {
            names: DEFAULT_TOPICS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PokeParams {
    /// Topic embeddings `T`, one row per topic.
    pub topics: ParamId,
    pub image_to_topic: Vec<AttendBlock>,
    pub topic_to_image: Vec<AttendBlock>,
    pub norm: NormParams,
}

impl PokeParams {
    pub fn new(b: &mut ParamBuilder<'_>, n_topics: usize, d: usize, heads: usize, depth: usize) -> Result<Self> {
        let bound = (1.0 / d as f64).sqrt();
        Ok(Self {
            topics: b.uniform("topics", n_topics, d, bound)?,
            image_to_topic: AttendBlock::stack(&mut b.scope("image_to_topic"), depth, d, heads)?,
            topic_to_image: AttendBlock::stack(&mut b.scope("topic_to_image"), depth, d, heads)?,
            norm: NormParams::new(&mut b.scope("norm"), d)?,
        })
    }
}

pub struct PosteriorOutput<'t> {
    pub i_prime: Var<'t>,
    pub t_hat: Var<'t>,
    /// `N_I × N_T`, head-averaged.
    pub image_to_topic_attention: Tensor,
    /// `N_I × N_I`, head-averaged.
    pub topic_to_image_attention: Tensor,
}

/// `T̂ = FFN(MHA(I, T))`, `Î = FFN(MHA(T̂, I))`, `I′ = LayerNorm(Î + T̂)`.
pub fn explore_posterior<'t>(ctx: &Ctx<'t>, image: Var<'t>, p: &PokeParams) -> Result<PosteriorOutput<'t>> {
    let topics = ctx.p(p.topics);
    let (t_hat, image_to_topic_attention) = run_stack(ctx, &p.image_to_topic, image, topics)?;
    let (i_hat, topic_to_image_attention) = run_stack(ctx, &p.topic_to_image, t_hat, image)?;
    let i_prime = p.norm.forward(ctx, i_hat.add(t_hat)?)?;
    Ok(PosteriorOutput {
        i_prime,
        t_hat,
        image_to_topic_attention,
        topic_to_image_attention,
    })
}

/// Linear tag classifier used only while pretraining.
#[derive(Debug, Clone)]
pub struct TopicHead {
    pub linear: Linear,
}

impl TopicHead {
    pub fn new(b: &mut ParamBuilder<'_>, d: usize, n_topics: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(&mut b.scope("topic_head"), d, n_topics, true)?,
        })
    }

    /// Logits `1 × N_T` from mean-pooled patch features.
    pub fn logits<'t>(&self, ctx: &Ctx<'t>, patches: Var<'t>) -> Result<Var<'t>> {
        self.linear.forward(ctx, patches.mean_rows()?)
    }
}

/// Per-topic positive weights `negatives / positives` over a label set.
/// Topics without positives get weight 1.
pub fn positive_weights(labels: &[Vec<bool>], n_topics: usize) -> Vec<f64> {
    (0..n_topics)
        .map(|k| {
            let pos = labels.iter().filter(|l| l[k]).count();
            let neg = labels.len() - pos;
            if pos == 0 {
                1.0
            } else {
                neg as f64 / pos as f64
            }
        })
        .collect()
}
