//! Mixture-of-experts encoder for the aggregated-level modalities: a global
//! GAT over the heterogeneous graph, one private expert GNN per modality and a
//! softmax gate computed from the raw modality features.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::graph::{HeteroGraph, Subgraph};
use crate::nn::{Bound, FeedForward, Linear, ParamId, ParamStore};
use crate::tape::{Activation, EdgeIndex, SparseMat, Tape, Var};

const GAT_LEAKY_SLOPE: f64 = 0.2;

/// Attention edges plus the gathers that lift node scores onto edges.
pub struct AttentionGraph {
    pub index: Rc<EdgeIndex>,
    gather_dst: Rc<SparseMat>,
    gather_src: Rc<SparseMat>,
}

impl AttentionGraph {
    pub fn new(index: EdgeIndex) -> Self {
        let gather_dst = Rc::new(SparseMat::gather(&index.dst, index.n_dst));
        let gather_src = Rc::new(SparseMat::gather(&index.src, index.n_src));
        Self { index: Rc::new(index), gather_dst, gather_src }
    }

    pub fn from_hetero(g: &HeteroGraph) -> Self {
        Self::new(g.attention_index())
    }

    pub fn n_nodes(&self) -> usize {
        self.index.n_dst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatHead {
    pub weight: ParamId,
    /// Scores the attending node (first half of the attention vector).
    pub attn_self: ParamId,
    /// Scores the neighbor (second half).
    pub attn_neighbor: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatLayerParams {
    pub heads: Vec<GatHead>,
}

impl GatLayerParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let heads = (0..heads)
            .map(|h| GatHead {
                weight: store.uniform(format!("{name}.head{h}.weight"), dim, dim, rng),
                attn_self: store.uniform(format!("{name}.head{h}.attn_self"), dim, 1, rng),
                attn_neighbor: store.uniform(format!("{name}.head{h}.attn_neighbor"), dim, 1, rng),
            })
            .collect();
        Self { heads }
    }
}

/// One multi-head GAT layer: per head `ELU(Σ_j α_ij W h_j)` over `N(i) ∪ {i}`
/// with `α = softmax_j LeakyReLU(a_self·W h_i + a_nb·W h_j)`; heads averaged.
pub fn gat_layer_forward(
    tape: &mut Tape,
    graph: &AttentionGraph,
    states: Var,
    layer: &GatLayerParams,
    p: &Bound,
) -> Var {
    let mut acc: Option<Var> = None;
    for head in &layer.heads {
        let wh = tape.matmul(states, p.var(head.weight));
        let s_self = tape.matmul(wh, p.var(head.attn_self));
        let s_nb = tape.matmul(wh, p.var(head.attn_neighbor));
        let e_self = tape.sparse(&graph.gather_dst, s_self);
        let e_nb = tape.sparse(&graph.gather_src, s_nb);
        let scores = tape.add(e_self, e_nb);
        let scores = tape.act(scores, Activation::LeakyRelu(GAT_LEAKY_SLOPE));
        let alpha = tape.edge_softmax(&graph.index, scores);
        let out = tape.edge_sum(&graph.index, alpha, wh);
        let out = tape.act(out, Activation::Elu);
        acc = Some(match acc {
            Some(a) => tape.add(a, out),
            None => out,
        });
    }
    let sum = acc.expect("GAT layer needs at least one head");
    tape.scale(sum, 1.0 / layer.heads.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalEncoderParams {
    /// 6N × d_in free node representations.
    pub node_embeddings: ParamId,
    pub layers: Vec<GatLayerParams>,
    /// One shared head, or one per node type.
    pub fnn: Vec<FeedForward>,
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalDims {
    pub n_regions: usize,
    pub d_in: usize,
    pub d_hid: usize,
    pub layers: usize,
    pub heads: usize,
    pub fnn_per_type: bool,
}

impl GlobalEncoderParams {
    pub fn new(store: &mut ParamStore, dims: GlobalDims, rng: &mut impl Rng) -> Self {
        let n_nodes = Modality::ALL.len() * dims.n_regions;
        let node_embeddings = store.uniform("global.nodes", n_nodes, dims.d_in, rng);
        // fan-in of 6N would make the free embeddings tiny; rescale to ±1/sqrt(d_in)
        let scale = (n_nodes as f64 / dims.d_in as f64).sqrt();
        store.get_mut(node_embeddings).mapv_inplace(|v| v * scale);
        let layers = (0..dims.layers)
            .map(|c| GatLayerParams::new(store, &format!("global.gat{c}"), dims.d_in, dims.heads, rng))
            .collect();
        let n_fnn = if dims.fnn_per_type { Modality::ALL.len() } else { 1 };
        let fnn = (0..n_fnn)
            .map(|k| FeedForward::new(store, &format!("global.fnn{k}"), (dims.d_in, 2 * dims.d_hid, dims.d_hid), rng))
            .collect();
        Self { node_embeddings, layers, fnn }
    }
}

/// Rows `[block·n, (block+1)·n)` of a 6N-row matrix.
pub fn block_selector(block: usize, n: usize, total: usize) -> SparseMat {
    let idx: Vec<usize> = (block * n..(block + 1) * n).collect();
    SparseMat::gather(&idx, total)
}

/// C GAT layers over the heterogeneous graph, the feed-forward head, then a
/// split into the six per-modality blocks (in [`Modality::ALL`] order).
pub fn global_encode(tape: &mut Tape, graph: &AttentionGraph, params: &GlobalEncoderParams, p: &Bound) -> Vec<Var> {
    let total = graph.n_nodes();
    let n = total / Modality::ALL.len();
    let mut h = p.var(params.node_embeddings);
    for layer in &params.layers {
        h = gat_layer_forward(tape, graph, h, layer, p);
    }
    let shared = (params.fnn.len() == 1).then(|| params.fnn[0].forward(tape, p, h));
    (0..Modality::ALL.len())
        .map(|b| {
            let sel = Rc::new(block_selector(b, n, total));
            match shared {
                Some(out) => tape.sparse(&sel, out),
                None => {
                    let block = tape.sparse(&sel, h);
                    params.fnn[b].forward(tape, p, block)
                }
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertLayerParams {
    pub weight: ParamId,
    pub edge_weight: ParamId,
    pub edge_bias: ParamId,
}

/// Private parameters of one modality's expert GNN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub modality: Modality,
    /// 1 × d_hid initial edge state.
    pub edge_init: ParamId,
    pub layers: Vec<ExpertLayerParams>,
}

impl ExpertParams {
    pub fn new(
        store: &mut ParamStore,
        modality: Modality,
        d_hid: usize,
        n_layers: usize,
        random_edge_init: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let name = format!("expert.{}", modality.name());
        let edge_init = if random_edge_init {
            store.uniform(format!("{name}.edge_init"), 1, d_hid, rng)
        } else {
            store.full(format!("{name}.edge_init"), 1, d_hid, 1.0)
        };
        let layers = (0..n_layers)
            .map(|l| ExpertLayerParams {
                weight: store.uniform(format!("{name}.layer{l}.weight"), d_hid, d_hid, rng),
                edge_weight: store.uniform(format!("{name}.layer{l}.edge_weight"), d_hid, d_hid, rng),
                edge_bias: store.zeros(format!("{name}.layer{l}.edge_bias"), 1, d_hid),
            })
            .collect();
        Self { modality, edge_init, layers }
    }
}

/// One expert layer on row vectors:
/// `x'_i = σ(Σ_{j ∈ N(i) ∪ {i}} ((x_j ∘ e) W) / sqrt(deg_i · deg_j))` and `e' = e E + b`,
/// with self-inclusive degrees baked into `propagation`.
pub fn expert_layer_forward(
    tape: &mut Tape,
    propagation: &Rc<SparseMat>,
    nodes: Var,
    edge_state: Var,
    layer: &ExpertLayerParams,
    activation: Activation,
    p: &Bound,
) -> (Var, Var) {
    let gated = tape.mul_row(nodes, edge_state);
    let agg = tape.sparse(propagation, gated);
    let pre = tape.matmul(agg, p.var(layer.weight));
    let out = tape.act(pre, activation);
    let e = tape.matmul(edge_state, p.var(layer.edge_weight));
    let e = tape.add_row(e, p.var(layer.edge_bias));
    (out, e)
}

/// Runs each modality's expert on its own subgraph starting from the matching
/// global block. `propagations[m]` is that subgraph's normalized operator.
pub fn expert_encode(
    tape: &mut Tape,
    propagations: &[Rc<SparseMat>],
    global_outputs: &[Var],
    experts: &[ExpertParams],
    activation: Activation,
    p: &Bound,
) -> Vec<Var> {
    assert_eq!(propagations.len(), experts.len());
    assert_eq!(global_outputs.len(), experts.len());
    experts
        .iter()
        .zip(propagations)
        .zip(global_outputs)
        .map(|((expert, prop), &x0)| {
            let mut x = x0;
            let mut e = p.var(expert.edge_init);
            for layer in &expert.layers {
                (x, e) = expert_layer_forward(tape, prop, x, e, layer, activation, p);
            }
            x
        })
        .collect()
}

pub fn expert_propagations(subgraphs: &[Subgraph]) -> Vec<Rc<SparseMat>> {
    subgraphs.iter().map(|g| Rc::new(g.normalized_propagation())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    /// Per-modality projections to d_hid, in [`Modality::ALL`] order.
    pub projections: Vec<Linear>,
    /// 6·d_hid → 6 logits.
    pub gate: Linear,
}

impl GatingParams {
    pub fn new(store: &mut ParamStore, widths: &[usize], d_hid: usize, rng: &mut impl Rng) -> Self {
        let projections = Modality::ALL
            .iter()
            .zip(widths)
            .map(|(m, &w)| Linear::new(store, &format!("gating.proj.{}", m.name()), w, d_hid, true, rng))
            .collect();
        let k = widths.len();
        let gate = Linear::new(store, "gating.gate", k * d_hid, k, true, rng);
        Self { projections, gate }
    }
}

/// N × 6 softmax gate from the six (preprocessed) feature tables.
pub fn gating_weights(tape: &mut Tape, tables: &[Var], params: &GatingParams, p: &Bound) -> Var {
    assert_eq!(tables.len(), params.projections.len());
    let projected: Vec<Var> =
        tables.iter().zip(&params.projections).map(|(&t, proj)| proj.forward(tape, p, t)).collect();
    let concat = tape.concat_cols(&projected);
    let logits = params.gate.forward(tape, p, concat);
    tape.softmax_rows(logits)
}

/// Scales every region's expert output by its gate weight.
pub fn apply_gating(tape: &mut Tape, gates: Var, tildes: &[Var]) -> Vec<Var> {
    tildes
        .iter()
        .enumerate()
        .map(|(m, &t)| {
            let g = tape.slice_cols(gates, m, 1);
            tape.mul_col(t, g)
        })
        .collect()
}
