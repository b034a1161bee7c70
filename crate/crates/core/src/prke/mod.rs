//! Prior knowledge: retrieved reports of similar training images (`W_Pr`)
//! and knowledge-graph node features (`G_Pr`), each explored from `I′`.

pub mod graph;
pub mod index;

use crate::attention::{run_stack, AttendBlock};
use crate::autograd::Var;
use crate::nn::{Ctx, Linear, ParamBuilder};
use crate::tensor::{Result, Tensor};

pub use graph::{graph_propagate, GraphParams, KnowledgeGraph};
pub use index::{build_index, Hit, IndexEntry, IndexError, QuerySplit, RetrievalIndex};

#[derive(Debug, Clone)]
pub struct PrkeParams {
    /// Maps report embeddings (`d_report`) into the model width.
    pub report_proj: Linear,
    pub graph: GraphParams,
    pub experience: Vec<AttendBlock>,
    pub knowledge: Vec<AttendBlock>,
}

impl PrkeParams {
    pub fn new(b: &mut ParamBuilder<'_>, d: usize, d_report: usize, heads: usize, depth: usize, gcn_layers: usize) -> Result<Self> {
        Ok(Self {
            report_proj: Linear::new(&mut b.scope("report_proj"), d_report, d, true)?,
            graph: GraphParams::new(&mut b.scope("graph"), d, gcn_layers)?,
            experience: AttendBlock::stack(&mut b.scope("experience"), depth, d, heads)?,
            knowledge: AttendBlock::stack(&mut b.scope("knowledge"), depth, d, heads)?,
        })
    }
}

pub struct PriorOutput<'t> {
    pub w_prime: Var<'t>,
    pub g_prime: Var<'t>,
    /// `N_I × N_K`, head-averaged.
    pub experience_attention: Tensor,
    /// `N_I × N_T`, head-averaged.
    pub knowledge_attention: Tensor,
}

/// `W′ = FFN(MHA(I′, W_Pr))`, `G′ = FFN(MHA(I′, G_Pr))`.
pub fn explore_prior<'t>(ctx: &Ctx<'t>, i_prime: Var<'t>, w_pr: Var<'t>, g_pr: Var<'t>, p: &PrkeParams) -> Result<PriorOutput<'t>> {
    let (w_prime, experience_attention) = run_stack(ctx, &p.experience, i_prime, w_pr)?;
    let (g_prime, knowledge_attention) = run_stack(ctx, &p.knowledge, i_prime, g_pr)?;
    Ok(PriorOutput {
        w_prime,
        g_prime,
        experience_attention,
        knowledge_attention,
    })
}
