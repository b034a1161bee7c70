//! The full model: parameter layout, encoder passes and generation.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{FeatureKind, Vocabulary};
use crate::mkd::{self, decode_forward, DecodeOptions, DecoderOutput, DecoderParams, GateMode, GenerationResult, Memory, StepModel, StepOutput};
use crate::nn::{Ctx, Linear, ParamBuilder};
use crate::params::ParamStore;
use crate::poke::{explore_posterior, PokeParams, TopicBag};
use crate::prke::{explore_prior, graph_propagate, KnowledgeGraph, PrkeParams};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Patches per image (`N_I`).
    pub n_patches: usize,
    /// Width of ingested patch features.
    pub feature_dim: usize,
    pub feature_kind: FeatureKind,
    /// Width of retrieved report embeddings.
    pub d_report: usize,
    /// Retrieved reports per image (`N_K`).
    pub n_retrieved: usize,
    pub poke_depth: usize,
    pub prke_depth: usize,
    pub decoder_depth: usize,
    pub gcn_layers: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            n_patches: 49,
            feature_dim: 2048,
            feature_kind: FeatureKind::Raw,
            d_report: 512,
            n_retrieved: 100,
            poke_depth: 1,
            prke_depth: 1,
            decoder_depth: 3,
            gcn_layers: 2,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TensorError::Contract(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} must be divisible by n_heads {}", self.d_model, self.n_heads));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_patches", self.n_patches),
            ("feature_dim", self.feature_dim),
            ("d_report", self.d_report),
            ("n_retrieved", self.n_retrieved),
            ("poke_depth", self.poke_depth),
            ("prke_depth", self.prke_depth),
            ("decoder_depth", self.decoder_depth),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.feature_kind == FeatureKind::Projected && self.feature_dim != self.d_model {
            return fail(format!(
                "projected features must have width d_model {} (got {})",
                self.d_model, self.feature_dim
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub input_proj: Option<Linear>,
    pub poke: PokeParams,
    pub prke: PrkeParams,
    pub decoder: DecoderParams,
}

/// Per-example encoder inputs.
#[derive(Debug, Clone, Copy)]
pub struct ExampleInput<'a> {
    /// `N_I × feature_dim` patch features.
    pub features: &'a Tensor,
    /// `N_K × d_report` retrieved report embeddings.
    pub retrieved: &'a Tensor,
}

pub struct Encoded<'t> {
    /// Projected patch features `I`.
    pub image: Var<'t>,
    pub memory: Memory<'t>,
    pub image_to_topic_attention: Tensor,
    pub topic_to_image_attention: Tensor,
    pub experience_attention: Tensor,
    pub knowledge_attention: Tensor,
}

#[derive(Debug, Clone)]
pub struct PpkedModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub bag: TopicBag,
    pub graph: KnowledgeGraph,
    pub store: ParamStore,
    pub layout: Layout,
    norm_adj: Arc<Tensor>,
}

impl PpkedModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, bag: TopicBag, graph: KnowledgeGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        if graph.node_names() != bag.names() {
            return Err(TensorError::Contract("knowledge graph nodes must match the topic bag".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let layout = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            let input_proj = match c.feature_kind {
                FeatureKind::Raw => Some(Linear::new(&mut b.scope("input_proj"), c.feature_dim, c.d_model, true)?),
                FeatureKind::Projected => None,
            };
            Layout {
                input_proj,
                poke: PokeParams::new(&mut b.scope("poke"), bag.len(), c.d_model, c.n_heads, c.poke_depth)?,
                prke: PrkeParams::new(&mut b.scope("prke"), c.d_model, c.d_report, c.n_heads, c.prke_depth, c.gcn_layers)?,
                decoder: DecoderParams::new(&mut b.scope("mkd"), vocab.len(), c.d_model, c.n_heads, c.decoder_depth)?,
            }
        };
        let norm_adj = Arc::new(graph.normalized_adjacency());
        let mut model = Self {
            config,
            vocab,
            bag,
            graph,
            store,
            layout,
            norm_adj,
        };
        model.init_topics_from_words();
        Ok(model)
    }

    /// Topic rows start as the mean word embedding of the topic's name
    /// words; names entirely outside the vocabulary keep their random init.
    fn init_topics_from_words(&mut self) {
        let d = self.config.d_model;
        let emb = self.store.value(self.layout.decoder.word_emb).clone();
        let topics = self.store.value_mut(self.layout.poke.topics);
        for k in 0..self.bag.len() {
            let ids: Vec<usize> = self.bag.words(k).filter_map(|w| self.vocab.id(w)).collect();
            if ids.is_empty() {
                continue;
            }
            let row = &mut topics.data_mut()[k * d..(k + 1) * d];
            row.iter_mut().for_each(|x| *x = 0.0);
            for &i in &ids {
                for (x, e) in row.iter_mut().zip(emb.row_slice(i)) {
                    *x += e / ids.len() as f64;
                }
            }
        }
    }

    pub fn normalized_adjacency(&self) -> &Arc<Tensor> {
        &self.norm_adj
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Ctx<'t> {
        Ctx::new(tape, &self.store, self.config.dropout)
    }

    fn check_input(&self, input: &ExampleInput<'_>) -> Result<()> {
        let c = &self.config;
        for (what, t, expected) in [
            ("patch features", input.features, [c.n_patches, c.feature_dim]),
            ("retrieved reports", input.retrieved, [input.retrieved.rows(), c.d_report]),
        ] {
            if t.shape() != expected {
                return Err(TensorError::Shape {
                    op: what,
                    left: t.shape().to_vec(),
                    right: expected.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Runs PoKE and PrKE, producing the decoder's knowledge sources.
    pub fn encode<'t>(&self, ctx: &Ctx<'t>, input: &ExampleInput<'_>) -> Result<Encoded<'t>> {
        self.check_input(input)?;
        let l = &self.layout;
        let raw = ctx.tape.constant(input.features.clone());
        let image = match &l.input_proj {
            Some(p) => p.forward(ctx, raw)?,
            None => raw,
        };
        let post = explore_posterior(ctx, image, &l.poke)?;
        let g_pr = graph_propagate(ctx, &self.norm_adj, ctx.p(l.poke.topics), image.mean_rows()?, &l.prke.graph)?;
        let w_pr = l.prke.report_proj.forward(ctx, ctx.tape.constant(input.retrieved.clone()))?;
        let prior = explore_prior(ctx, post.i_prime, w_pr, g_pr, &l.prke)?;
        Ok(Encoded {
            image,
            memory: Memory {
                i_prime: post.i_prime,
                g_prime: prior.g_prime,
                w_prime: prior.w_prime,
            },
            image_to_topic_attention: post.image_to_topic_attention,
            topic_to_image_attention: post.topic_to_image_attention,
            experience_attention: prior.experience_attention,
            knowledge_attention: prior.knowledge_attention,
        })
    }

    /// Teacher-forced decoder pass over `tokens` (without BOS/EOS).
    pub fn decode_teacher_forced<'t>(
        &self,
        ctx: &Ctx<'t>,
        memory: &Memory<'t>,
        tokens: &[usize],
        mode: GateMode,
    ) -> Result<(DecoderOutput<'t>, Vec<Option<usize>>)> {
        let (inputs, targets) = mkd::teacher_forcing(tokens);
        Ok((decode_forward(ctx, &inputs, memory, &self.layout.decoder, mode)?, targets))
    }

    /// Summed token NLL of one example and its scored-token count.
    pub fn example_nll<'t>(&self, ctx: &Ctx<'t>, input: &ExampleInput<'_>, tokens: &[usize]) -> Result<(Var<'t>, usize)> {
        let enc = self.encode(ctx, input)?;
        let (out, targets) = self.decode_teacher_forced(ctx, &enc.memory, tokens, GateMode::Learned)?;
        mkd::sequence_nll(out.log_probs, &targets)
    }

    /// Evaluation-mode knowledge sources for decoding.
    pub fn memory_tensors(&self, input: &ExampleInput<'_>) -> Result<[Tensor; 3]> {
        let tape = Tape::new();
        let ctx = self.bind(&tape);
        let m = self.encode(&ctx, input)?.memory;
        Ok([m.i_prime, m.g_prime, m.w_prime].map(|v| v.value().as_ref().clone()))
    }

    pub fn generate(&self, input: &ExampleInput<'_>, opts: &DecodeOptions) -> Result<GenerationResult> {
        let stepper = Stepper {
            model: self,
            memory: self.memory_tensors(input)?,
            mode: GateMode::Learned,
        };
        if opts.beam_width <= 1 {
            mkd::greedy_decode(&stepper, opts)
        } else {
            mkd::beam_decode(&stepper, opts)
        }
    }
}

/// Next-token scoring over precomputed knowledge sources.
pub struct Stepper<'m> {
    pub model: &'m PpkedModel,
    pub memory: [Tensor; 3],
    pub mode: GateMode,
}

impl StepModel for Stepper<'_> {
    fn step(&self, prefix: &[usize]) -> Result<StepOutput> {
        let tape = Tape::new();
        let ctx = self.model.bind(&tape);
        let [i, g, w] = self.memory.clone().map(|t| tape.constant(t));
        let mem = Memory {
            i_prime: i,
            g_prime: g,
            w_prime: w,
        };
        let out = decode_forward(&ctx, prefix, &mem, &self.model.layout.decoder, self.mode)?;
        let lp = out.log_probs.value();
        let last = lp.rows() - 1;
        Ok(StepOutput {
            log_probs: lp.row_slice(last).to_vec(),
            gates: out.ada.step_gates()[last],
        })
    }
}
