//! Dual-level street-view encoder: image nodes exchange messages only with
//! their region's virtual node, and virtual nodes exchange messages with
//! adjacent regions.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::DualLevelGraph;
use crate::moe::{gat_layer_forward, AttentionGraph, GatLayerParams};
use crate::nn::{Bound, FeedForward, Linear, ParamId, ParamStore};
use crate::tape::{Activation, Mat, SparseMat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvLayerParams {
    /// virtual → image
    pub w_image: ParamId,
    /// images → virtual
    pub w_pool: ParamId,
    /// neighboring virtual → virtual
    pub w_neighbor: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvEncoderParams {
    pub input: Linear,
    pub layers: Vec<SvLayerParams>,
    pub head: FeedForward,
    /// Only present for the variant that replaces the dual-level layers by a
    /// GAT over averaged image features.
    pub gat: Vec<GatLayerParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct SvDims {
    pub d_raw: usize,
    pub d_feat: usize,
    pub d_hid: usize,
    pub layers: usize,
    /// Number of GAT layers for the averaged-feature variant (0 otherwise).
    pub gat_layers: usize,
    pub heads: usize,
}

impl SvEncoderParams {
    pub fn new(store: &mut ParamStore, dims: SvDims, rng: &mut impl Rng) -> Self {
        let input = Linear::new(store, "sv.input", dims.d_raw, dims.d_feat, false, rng);
        let layers = (0..dims.layers)
            .map(|l| SvLayerParams {
                w_image: store.uniform(format!("sv.layer{l}.w_image"), dims.d_feat, dims.d_feat, rng),
                w_pool: store.uniform(format!("sv.layer{l}.w_pool"), dims.d_feat, dims.d_feat, rng),
                w_neighbor: store.uniform(format!("sv.layer{l}.w_neighbor"), dims.d_feat, dims.d_feat, rng),
            })
            .collect();
        let gat = (0..dims.gat_layers)
            .map(|l| GatLayerParams::new(store, &format!("sv.gat{l}"), dims.d_feat, dims.heads, rng))
            .collect();
        let head = FeedForward::new(store, "sv.head", (dims.d_feat, 2 * dims.d_hid, dims.d_hid), rng);
        Self { input, layers, head, gat }
    }
}

/// Sparse operators derived from a [`DualLevelGraph`].
pub struct SvOperators {
    /// N × M: Σ (or mean) over a region's images.
    pub pool: Rc<SparseMat>,
    /// N × M: mean over a region's images; empty regions map to zero.
    pub mean: Rc<SparseMat>,
    /// M × N: owning virtual node of every image.
    pub broadcast: Rc<SparseMat>,
    /// N × N: Σ (or mean) over adjacent virtual nodes.
    pub neighbors: Rc<SparseMat>,
    /// Attention over the region boundary graph (averaged-feature variant).
    pub boundary_attention: AttentionGraph,
}

impl SvOperators {
    pub fn new(graph: &DualLevelGraph, mean_aggregate: bool) -> Self {
        Self {
            pool: Rc::new(graph.pool_images(mean_aggregate)),
            mean: Rc::new(graph.pool_images(true)),
            broadcast: Rc::new(graph.broadcast_to_images()),
            neighbors: Rc::new(graph.neighbor_sum(mean_aggregate)),
            boundary_attention: AttentionGraph::new(crate::graph::attention_index(graph.n_regions, &graph.inter_edges)),
        }
    }
}

/// Stacks every region's image features (M × d_raw) in dual-graph order.
pub fn stack_images(sets: &[crate::data::StreetViewSet], d_raw: usize) -> Mat {
    let total: usize = sets.iter().map(|s| s.features.nrows()).sum();
    let mut out = Mat::zeros((total, d_raw));
    let mut row = 0;
    for set in sets {
        for r in set.features.rows() {
            out.row_mut(row).assign(&r);
            row += 1;
        }
    }
    out
}

/// Projected image states and their per-region means.
pub fn init_sv_states(tape: &mut Tape, ops: &SvOperators, raw: Var, params: &SvEncoderParams, p: &Bound) -> (Var, Var) {
    let first = params.input.forward(tape, p, raw);
    let second = tape.sparse(&ops.mean, first);
    (first, second)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvLayerOptions {
    pub activation: Activation,
    /// Adds the image's previous state to its update.
    pub residual_image_update: bool,
}

/// One simultaneous update of both levels. Images read only their owner's
/// previous virtual state; virtual nodes read their images and neighbors.
pub fn dual_level_layer(
    tape: &mut Tape,
    ops: &SvOperators,
    first: Var,
    second: Var,
    layer: &SvLayerParams,
    opts: SvLayerOptions,
    p: &Bound,
) -> (Var, Var) {
    let owner = tape.sparse(&ops.broadcast, second);
    let img = tape.matmul(owner, p.var(layer.w_image));
    let mut img = tape.act(img, opts.activation);
    if opts.residual_image_update {
        img = tape.add(img, first);
    }

    let pooled = tape.sparse(&ops.pool, first);
    let from_images = tape.matmul(pooled, p.var(layer.w_pool));
    let nb = tape.sparse(&ops.neighbors, second);
    let from_neighbors = tape.matmul(nb, p.var(layer.w_neighbor));
    let virt = tape.add(from_images, from_neighbors);
    let virt = tape.act(virt, opts.activation);
    (img, virt)
}

/// Full street-view branch: N × d_hid region embeddings.
pub fn sv_encode(
    tape: &mut Tape,
    ops: &SvOperators,
    raw: Var,
    params: &SvEncoderParams,
    opts: SvLayerOptions,
    p: &Bound,
) -> Var {
    let (mut first, mut second) = init_sv_states(tape, ops, raw, params, p);
    for layer in &params.layers {
        (first, second) = dual_level_layer(tape, ops, first, second, layer, opts, p);
    }
    params.head.forward(tape, p, second)
}

/// Variant without image nodes: averaged projected features refined by a GAT
/// over the boundary graph.
pub fn sv_encode_averaged(tape: &mut Tape, ops: &SvOperators, raw: Var, params: &SvEncoderParams, p: &Bound) -> Var {
    let (_, mut second) = init_sv_states(tape, ops, raw, params, p);
    for layer in &params.gat {
        second = gat_layer_forward(tape, &ops.boundary_attention, second, layer, p);
    }
    params.head.forward(tape, p, second)
}
