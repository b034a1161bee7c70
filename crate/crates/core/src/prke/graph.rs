//! Organ-grouped topic graph and its graph-convolution encoder.

use std::sync::Arc;

use crate::autograd::Var;
use crate::nn::{Ctx, Linear, ParamBuilder};
use crate::params::ParamId;
use crate::poke::TopicBag;
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_GROUPS: &str = "\
# organ or body part: member topics
heart: cardiomegaly
pleura: effusion, thickening, pneumothorax
lung parenchyma: emphysema, pneumonia, edema, atelectasis, opacity, lesion, airspace disease, hypoinflation, cicatrix
bone: scoliosis, fractures
soft tissue/other: hernia, calcinosis, medical device, other
normal: normal
";

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    node_names: Vec<String>,
    groups: Vec<(String, Vec<usize>)>,
    adjacency: Tensor,
}

impl KnowledgeGraph {
    /// Parses `group: topic, topic, ...` lines. Blank lines and `#` comments
    /// are ignored. Groups must partition the bag.
    pub fn parse(text: &str, bag: &TopicBag) -> Result<Self> {
        let n = bag.len();
        let mut owner: Vec<Option<String>> = vec![None; n];
        let mut groups = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| TensorError::Contract(format!("graph config line {}: {msg}", lineno + 1));
            let (group, members) = line.split_once(':').ok_or_else(|| bad("expected `group: topics`".into()))?;
            let group = group.trim().to_owned();
            let mut ids = Vec::new();
            for m in members.split(',').map(str::trim).filter(|m| !m.is_empty()) {
                let id = bag.index_of(m).ok_or_else(|| bad(format!("unknown topic {m:?}")))?;
                if let Some(g) = &owner[id] {
                    return Err(bad(format!("topic {m:?} already in group {g:?}")));
                }
                owner[id] = Some(group.clone());
                ids.push(id);
            }
            groups.push((group, ids));
        }
        let missing: Vec<&str> = (0..n).filter(|&i| owner[i].is_none()).map(|i| bag.names()[i].as_str()).collect();
        if !missing.is_empty() {
            return Err(TensorError::Contract(format!("topics not assigned to any group: {}", missing.join(", "))));
        }
        Self::from_groups(bag.names().to_vec(), groups)
    }

    /// Graph whose groups are cliques. Groups must partition the nodes.
    pub fn from_groups(node_names: Vec<String>, groups: Vec<(String, Vec<usize>)>) -> Result<Self> {
        let n = node_names.len();
        let mut seen = vec![false; n];
        for (g, ids) in &groups {
            for &i in ids {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(TensorError::Contract(format!("group {g:?}: node {i} out of range or repeated")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(TensorError::Contract(format!("node {:?} is not in any group", node_names[i])));
        }
        let mut adjacency = Tensor::zeros(n, n);
        for (_, ids) in &groups {
            for &a in ids {
                for &b in ids {
                    if a != b {
                        adjacency.data_mut()[a * n + b] = 1.0;
                    }
                }
            }
        }
        Ok(Self {
            node_names,
            groups,
            adjacency,
        })
    }

    pub fn default_for(bag: &TopicBag) -> Result<Self> {
        Self::parse(DEFAULT_GROUPS, bag)
    }

    /// Graph from an explicit symmetric 0/1 adjacency with zero diagonal.
    pub fn from_adjacency(node_names: Vec<String>, adjacency: Tensor) -> Result<Self> {
        let n = node_names.len();
        if adjacency.shape() != [n, n] {
            return Err(TensorError::Shape {
                op: "graph adjacency",
                left: adjacency.shape().to_vec(),
                right: vec![n, n],
            });
        }
        for i in 0..n {
            if adjacency.get(i, i) != 0.0 {
                return Err(TensorError::Contract(format!("adjacency diagonal at {i} must be zero")));
            }
            for j in 0..n {
                let a = adjacency.get(i, j);
                if a != adjacency.get(j, i) || (a != 0.0 && a != 1.0) {
                    return Err(TensorError::Contract("adjacency must be symmetric 0/1".into()));
                }
            }
        }
        Ok(Self {
            node_names,
            groups: Vec::new(),
            adjacency,
        })
    }

    pub fn len(&self) -> usize {
        self.node_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_names.is_empty()
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn groups(&self) -> &[(String, Vec<usize>)] {
        &self.groups
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    /// `Â = D̃^{-1/2} (A + I) D̃^{-1/2}`.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.len();
        let deg: Vec<f64> = (0..n).map(|i| 1.0 + self.adjacency.row_slice(i).iter().sum::<f64>()).collect();
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let a = self.adjacency.get(i, j) + if i == j { 1.0 } else { 0.0 };
                out.data_mut()[i * n + j] = a / (deg[i] * deg[j]).sqrt();
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GraphParams {
    /// Projects the pooled image feature onto every node's initial state.
    pub context: Linear,
    pub layers: Vec<ParamId>,
}

impl GraphParams {
    pub fn new(b: &mut ParamBuilder<'_>, d: usize, layers: usize) -> Result<Self> {
        Ok(Self {
            context: Linear::new(&mut b.scope("context"), d, d, true)?,
            layers: (0..layers).map(|l| b.matrix(&format!("layer{l}"), d, d)).collect::<Result<_>>()?,
        })
    }
}

/// `H⁰ = nodes + context`, `H^{l+1} = relu(Â H^l W^l)`.
///
/// `context` is a `1×d` row added to every node.
pub fn propagate<'t>(norm_adj: &Arc<Tensor>, h0: Var<'t>, layers: &[Var<'t>]) -> Result<Var<'t>> {
    let adj = h0.tape().constant(norm_adj.as_ref().clone());
    let mut h = h0;
    for &w in layers {
        h = adj.matmul(h)?.matmul(w)?.relu();
    }
    Ok(h)
}

/// Node features `G_Pr` guided by the pooled image feature.
pub fn graph_propagate<'t>(
    ctx: &Ctx<'t>,
    norm_adj: &Arc<Tensor>,
    nodes: Var<'t>,
    image_context: Var<'t>,
    p: &GraphParams,
) -> Result<Var<'t>> {
    let h0 = nodes.add_row(p.context.forward(ctx, image_context)?)?;
    let layers: Vec<Var<'t>> = p.layers.iter().map(|&w| ctx.p(w)).collect();
    propagate(norm_adj, h0, &layers)
}
