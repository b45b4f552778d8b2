//! Model assembly, the end-to-end forward pass, Adam training and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Modality, UrbanDataset};
use crate::fusion::{
    cross_modal_attention, fuse, mean_over_channels, spatial_weights, EmbeddingTable, FusionError, FusionParams,
    TokenLayout,
};
use crate::graph::{
    assemble_hetero_graph, build_dual_level_sv_graph, build_modality_subgraphs, build_region_boundary_graph, EdgeMode,
    GraphBundle, GraphError, SubgraphOptions,
};
use crate::moe::{
    apply_gating, expert_encode, expert_propagations, gating_weights, global_encode, AttentionGraph, ExpertParams,
    GatingParams, GlobalDims, GlobalEncoderParams,
};
use crate::nn::{Bound, ParamStore};
use crate::objectives::{
    aggregated_anchor, batch_triplet_loss, fusion_bce_loss, sample_negative_map, sample_triplets_with, LossReduction,
    LossReport, MatcherParams, ObjectiveError, TripletBatch, TripletLevel,
};
use crate::sv::{stack_images, sv_encode, sv_encode_averaged, SvDims, SvEncoderParams, SvLayerOptions, SvOperators};
use crate::tape::{Activation, Gradients, Mat, SparseMat, Tape, Var};
use crate::walks::{region_positional_embeddings, WalkConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss or parameters at epoch {epoch}: {detail}")]
    NaNLoss { epoch: usize, detail: String },
    #[error("checkpoint incompatible: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d_in: usize,
    pub d_hid: usize,
    pub d_feat: usize,
    /// Global GAT layers.
    #[serde(alias = "C")]
    pub global_layers: usize,
    /// Expert layers per modality.
    #[serde(alias = "L")]
    pub expert_layers: usize,
    /// Dual-level street-view layers.
    #[serde(alias = "Z")]
    pub sv_layers: usize,
    pub edge_top_k: usize,
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub heads: usize,
    pub seed: u64,

    pub no_moe: bool,
    pub no_dlgnn: bool,
    pub no_sv: bool,
    pub no_samf: bool,
    pub no_l_sv: bool,
    pub no_l_f: bool,

    pub mean_aggregate: bool,
    pub residual_image_update: bool,
    pub edge_mode: EdgeMode,
    pub fnn_per_type: bool,
    pub freeze_node_init: bool,
    pub normalize_taxi: bool,
    pub random_edge_init: bool,
    pub loss_reduction: LossReduction,
    pub triplets_per_anchor: usize,
    pub walks: WalkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_in: 180,
            d_hid: 168,
            d_feat: 168,
            global_layers: 2,
            expert_layers: 3,
            sv_layers: 1,
            edge_top_k: 64,
            gamma: 2.0,
            lr: 1e-4,
            epochs: 300,
            heads: 4,
            seed: 0,
            no_moe: false,
            no_dlgnn: false,
            no_sv: false,
            no_samf: false,
            no_l_sv: false,
            no_l_f: false,
            mean_aggregate: false,
            residual_image_update: false,
            edge_mode: EdgeMode::GlobalThreshold,
            fnn_per_type: false,
            freeze_node_init: false,
            normalize_taxi: false,
            random_edge_init: false,
            loss_reduction: LossReduction::Mean,
            triplets_per_anchor: 1,
            walks: WalkConfig::default(),
        }
    }
}

/// Names accepted by [`TrainConfig::with_variant`].
pub const ABLATION_VARIANTS: [&str; 6] = ["no_moe", "no_dlgnn", "no_sv", "no_samf", "no_l_sv", "no_l_f"];

impl TrainConfig {
    /// Checks dimensions and applies implied flags (`no_sv` drops the street-view loss).
    pub fn resolved(&self) -> Result<Self, TrainError> {
        let mut c = self.clone();
        for (name, v) in [("d_in", c.d_in), ("d_hid", c.d_hid), ("d_feat", c.d_feat), ("heads", c.heads)] {
            if v == 0 {
                return Err(TrainError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if c.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if c.d_hid % c.heads != 0 {
            return Err(TrainError::InvalidConfig(format!(
                "d_hid ({}) must be divisible by heads ({})",
                c.d_hid, c.heads
            )));
        }
        if c.triplets_per_anchor == 0 {
            return Err(TrainError::InvalidConfig("triplets_per_anchor must be at least 1".into()));
        }
        if !(c.lr >= 0.0 && c.lr.is_finite()) || !(c.gamma >= 0.0) {
            return Err(TrainError::InvalidConfig("lr and gamma must be finite and nonnegative".into()));
        }
        if c.no_sv {
            c.no_l_sv = true;
        }
        Ok(c)
    }

    pub fn with_variant(&self, variant: &str) -> Result<Self, TrainError> {
        let mut c = self.clone();
        match variant {
            "full" => {}
            "no_moe" => c.no_moe = true,
            "no_dlgnn" => c.no_dlgnn = true,
            "no_sv" => c.no_sv = true,
            "no_samf" => c.no_samf = true,
            "no_l_sv" => c.no_l_sv = true,
            "no_l_f" => c.no_l_f = true,
            other => return Err(TrainError::InvalidConfig(format!("unknown variant {other}"))),
        }
        Ok(c)
    }

    pub fn n_channels(&self) -> usize {
        if self.no_sv {
            6
        } else {
            7
        }
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn subgraph_options(&self) -> SubgraphOptions {
        SubgraphOptions { top_k: self.edge_top_k, mode: self.edge_mode, normalize_taxi: self.normalize_taxi }
    }
}

/// Subgraphs, heterogeneous graph, dual-level graph and positional embeddings.
pub fn build_graphs(ds: &UrbanDataset, config: &TrainConfig) -> Result<GraphBundle, TrainError> {
    let subgraphs = build_modality_subgraphs(ds, config.subgraph_options())?;
    let hetero = assemble_hetero_graph(&subgraphs)?;
    let boundary = build_region_boundary_graph(ds);
    let positional = region_positional_embeddings(&boundary, config.d_in, &config.walks, config.seed ^ 0x0077_a1c5);
    Ok(GraphBundle { subgraphs, hetero, dual: build_dual_level_sv_graph(ds), positional })
}

/// log1p for count tables, then per-column z-scores (constant columns become 0).
pub fn preprocess_table(matrix: &Mat, counts: bool) -> Mat {
    let mut x = if counts { matrix.mapv(f64::ln_1p) } else { matrix.clone() };
    for mut col in x.columns_mut() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 1e-12 {
            col.mapv_inplace(|v| (v - mean) / sd);
        } else {
            col.fill(0.0);
        }
    }
    x
}

/// Shapes the parameter layout depends on besides the config.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_regions: usize,
    /// Gating input widths in [`Modality::ALL`] order.
    pub widths: Vec<usize>,
    pub d_raw: usize,
}

impl ModelDims {
    pub fn of(ds: &UrbanDataset, graphs: &GraphBundle) -> Self {
        let mut widths = vec![graphs.positional.ncols()];
        widths.extend(Modality::AGGREGATED.iter().map(|&m| ds.table(m).expect("table").width()));
        Self { n_regions: ds.n_regions(), widths, d_raw: ds.d_raw_sv }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub global: GlobalEncoderParams,
    /// Empty when the expert stage is ablated.
    pub experts: Vec<ExpertParams>,
    pub gating: Option<GatingParams>,
    pub sv: Option<SvEncoderParams>,
    pub fusion: FusionParams,
    pub matcher: MatcherParams,
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.ids().map(|id| Mat::zeros(store.get(id).raw_dim())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update of every non-frozen parameter that received a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, bound: &Bound, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(bound.var(id)) else {
                continue;
            };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(store.get_mut(id)).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub params: ModelParams,
    pub adam: Adam,
}

impl ModelState {
    /// Deterministic initialisation from `config.seed`.
    pub fn new(config: &TrainConfig, dims: ModelDims) -> Result<Self, TrainError> {
        let config = config.resolved()?;
        if dims.widths.len() != Modality::ALL.len() {
            return Err(TrainError::InvalidConfig(format!("expected 6 input widths, got {}", dims.widths.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let global = GlobalEncoderParams::new(
            &mut store,
            GlobalDims {
                n_regions: dims.n_regions,
                d_in: config.d_in,
                d_hid: config.d_hid,
                layers: config.global_layers,
                heads: config.heads,
                fnn_per_type: config.fnn_per_type,
            },
            &mut rng,
        );
        if config.freeze_node_init {
            store.set_frozen(global.node_embeddings, true);
        }
        let (experts, gating) = if config.no_moe {
            (Vec::new(), None)
        } else {
            let experts = Modality::ALL
                .iter()
                .map(|&m| {
                    ExpertParams::new(
                        &mut store,
                        m,
                        config.d_hid,
                        config.expert_layers,
                        config.random_edge_init,
                        &mut rng,
                    )
                })
                .collect();
            (experts, Some(GatingParams::new(&mut store, &dims.widths, config.d_hid, &mut rng)))
        };
        let sv = (!config.no_sv).then(|| {
            let (layers, gat_layers) =
                if config.no_dlgnn { (0, config.sv_layers.max(1)) } else { (config.sv_layers, 0) };
            SvEncoderParams::new(
                &mut store,
                SvDims {
                    d_raw: dims.d_raw,
                    d_feat: config.d_feat,
                    d_hid: config.d_hid,
                    layers,
                    gat_layers,
                    heads: config.heads,
                },
                &mut rng,
            )
        });
        let fusion = FusionParams::new(&mut store, config.n_channels(), config.d_hid, config.heads, &mut rng);
        let matcher = MatcherParams::new(&mut store, config.d_hid, &mut rng);
        let adam = Adam::new(&store);
        Ok(Self { config, dims, store, params: ModelParams { global, experts, gating, sv, fusion, matcher }, adam })
    }
}

/// Constant operators and tables for one (dataset, graphs, config) triple.
pub struct ModelInputs {
    pub n_regions: usize,
    pub hetero: AttentionGraph,
    pub propagations: Vec<Rc<SparseMat>>,
    pub gating_tables: Vec<Mat>,
    pub sv_ops: SvOperators,
    pub images: Mat,
    pub layout: TokenLayout,
    pub adjacency: Array2<bool>,
}

impl ModelInputs {
    pub fn new(ds: &UrbanDataset, graphs: &GraphBundle, config: &TrainConfig) -> Self {
        let mut gating_tables = vec![preprocess_table(&graphs.positional, false)];
        for m in Modality::AGGREGATED {
            gating_tables.push(preprocess_table(&ds.table(m).expect("table").matrix, m.is_count()));
        }
        Self {
            n_regions: ds.n_regions(),
            hetero: AttentionGraph::from_hetero(&graphs.hetero),
            propagations: expert_propagations(&graphs.subgraphs),
            gating_tables,
            sv_ops: SvOperators::new(&graphs.dual, config.mean_aggregate),
            images: stack_images(&ds.sv_sets, ds.d_raw_sv),
            layout: TokenLayout::new(ds.n_regions(), config.n_channels()),
            adjacency: ds.adjacency.clone(),
        }
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    /// The six aggregated-level channels.
    pub hats: Vec<Var>,
    pub sv: Option<Var>,
    /// Fusion inputs: `hats` followed by `sv` when present.
    pub channels: Vec<Var>,
    pub gates: Option<Var>,
    pub w_spa: Option<Var>,
    pub fused: Var,
}

pub fn forward(
    tape: &mut Tape,
    p: &Bound,
    state: &ModelState,
    inputs: &ModelInputs,
) -> Result<ForwardVars, TrainError> {
    let cfg = &state.config;
    let mp = &state.params;
    let globals = global_encode(tape, &inputs.hetero, &mp.global, p);
    let (hats, gates) = match &mp.gating {
        None => (globals, None),
        Some(gating) => {
            let tildes = expert_encode(tape, &inputs.propagations, &globals, &mp.experts, Activation::Relu, p);
            let tables: Vec<Var> = inputs.gating_tables.iter().map(|t| tape.leaf(t.clone())).collect();
            let g = gating_weights(tape, &tables, gating, p);
            (apply_gating(tape, g, &tildes), Some(g))
        }
    };
    let sv = match &mp.sv {
        None => None,
        Some(svp) => {
            let raw = tape.leaf(inputs.images.clone());
            Some(if cfg.no_dlgnn {
                sv_encode_averaged(tape, &inputs.sv_ops, raw, svp, p)
            } else {
                let opts =
                    SvLayerOptions { activation: Activation::Relu, residual_image_update: cfg.residual_image_update };
                sv_encode(tape, &inputs.sv_ops, raw, svp, opts, p)
            })
        }
    };
    let mut channels = hats.clone();
    channels.extend(sv);
    let hf = cross_modal_attention(tape, &inputs.layout, &channels, &mp.fusion, p)?;
    let (fused, w_spa) = if cfg.no_samf {
        (mean_over_channels(tape, &inputs.layout, hf), None)
    } else {
        let w = spatial_weights(tape, &inputs.layout, hf, &mp.fusion, p);
        (fuse(tape, &inputs.layout, hf, w, &mp.fusion, p).regions, Some(w))
    };
    Ok(ForwardVars { hats, sv, channels, gates, w_spa, fused })
}

/// Per-epoch random draws for the contrastive terms.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSamples {
    pub agg: TripletBatch,
    pub sv: TripletBatch,
    pub negatives: Vec<usize>,
}

impl EpochSamples {
    pub fn draw(adjacency: &Array2<bool>, per_anchor: usize, rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        let agg = sample_triplets_with(adjacency, per_anchor, rng)?;
        let sv = sample_triplets_with(adjacency, per_anchor, rng)?.with_level(TripletLevel::Sv);
        let negatives = sample_negative_map(adjacency.nrows(), rng)?;
        Ok(Self { agg, sv, negatives })
    }
}

pub struct LossVars {
    pub l_agg: Var,
    pub l_sv: Option<Var>,
    pub l_f: Option<Var>,
    pub total: Var,
    pub forward: ForwardVars,
}

/// Forward pass plus every active loss term.
pub fn compute_loss(
    tape: &mut Tape,
    p: &Bound,
    state: &ModelState,
    inputs: &ModelInputs,
    samples: &EpochSamples,
) -> Result<LossVars, TrainError> {
    let cfg = &state.config;
    let fw = forward(tape, p, state, inputs)?;
    let anchor = aggregated_anchor(tape, &fw.hats);
    let l_agg = batch_triplet_loss(tape, anchor, &samples.agg, cfg.gamma, cfg.loss_reduction);
    let l_sv = match (fw.sv, cfg.no_l_sv) {
        (Some(sv), false) => Some(batch_triplet_loss(tape, sv, &samples.sv, cfg.gamma, cfg.loss_reduction)),
        _ => None,
    };
    let l_f = if cfg.no_l_f {
        None
    } else {
        Some(fusion_bce_loss(
            tape,
            &fw.channels,
            fw.fused,
            &state.params.matcher,
            &samples.negatives,
            cfg.loss_reduction,
            p,
        )?)
    };
    let mut total = l_agg;
    for term in [l_sv, l_f].into_iter().flatten() {
        total = tape.add(total, term);
    }
    Ok(LossVars { l_agg, l_sv, l_f, total, forward: fw })
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        LossReport::new(tape.scalar(self.l_agg), get(self.l_sv), get(self.l_f))
    }
}

/// Largest |row sum − 1| and smallest entry of a row-stochastic matrix.
pub fn stochastic_deviation(m: &Mat) -> (f64, f64) {
    let dev = m.sum_axis(Axis(1)).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let min = m.iter().copied().fold(f64::INFINITY, f64::min);
    (dev, min)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub gate_row_dev: Option<f64>,
    pub gate_min: Option<f64>,
    pub w_spa_row_dev: Option<f64>,
    pub w_spa_min: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Losses of the forward pass that precedes each epoch's update.
    pub losses: Vec<LossReport>,
    pub seconds: Vec<f64>,
    pub diagnostics: Vec<EpochDiagnostics>,
}

fn sampling_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// Runs `state.config.epochs` full-batch Adam steps in place.
pub fn train_state(state: &mut ModelState, inputs: &ModelInputs) -> Result<TrainHistory, TrainError> {
    let mut rng = sampling_rng(state.config.seed);
    let mut history = TrainHistory::default();
    for epoch in 1..=state.config.epochs {
        let start = Instant::now();
        let samples = EpochSamples::draw(&inputs.adjacency, state.config.triplets_per_anchor, &mut rng)?;
        let mut tape = Tape::new();
        let p = state.store.bind(&mut tape);
        let lv = compute_loss(&mut tape, &p, state, inputs, &samples)?;
        let report = lv.report(&tape);
        if !report.l_total.is_finite() {
            return Err(TrainError::NaNLoss { epoch, detail: format!("{report:?}") });
        }
        let stoch = |v: Option<Var>| v.map(|v| stochastic_deviation(tape.value(v)));
        let (g, w) = (stoch(lv.forward.gates), stoch(lv.forward.w_spa));
        history.diagnostics.push(EpochDiagnostics {
            gate_row_dev: g.map(|x| x.0),
            gate_min: g.map(|x| x.1),
            w_spa_row_dev: w.map(|x| x.0),
            w_spa_min: w.map(|x| x.1),
        });
        let grads = tape.backward(lv.total);
        let lr = state.config.lr;
        state.adam.update(&mut state.store, &grads, &p, lr);
        if !state.store.all_finite() {
            let bad: Vec<&str> = state
                .store
                .ids()
                .filter(|&id| state.store.get(id).iter().any(|v| !v.is_finite()))
                .map(|id| state.store.name(id))
                .collect();
            return Err(TrainError::NaNLoss {
                epoch,
                detail: format!("non-finite parameters {bad:?} after {report:?}"),
            });
        }
        history.losses.push(report);
        history.seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(history)
}

pub fn train(
    ds: &UrbanDataset,
    graphs: &GraphBundle,
    config: &TrainConfig,
) -> Result<(ModelState, TrainHistory), TrainError> {
    let mut state = ModelState::new(config, ModelDims::of(ds, graphs))?;
    let inputs = ModelInputs::new(ds, graphs, &state.config);
    let history = train_state(&mut state, &inputs)?;
    Ok((state, history))
}

/// Final region embeddings and every fusion input channel.
pub fn embed(state: &ModelState, inputs: &ModelInputs) -> Result<EmbeddingTable, TrainError> {
    let mut tape = Tape::new();
    let p = state.store.bind(&mut tape);
    let fw = forward(&mut tape, &p, state, inputs)?;
    let mut names: Vec<String> = Modality::ALL.iter().map(|m| m.name().to_string()).collect();
    names.truncate(fw.hats.len());
    if fw.sv.is_some() {
        names.push("streetview".into());
    }
    Ok(EmbeddingTable {
        regions: tape.value(fw.fused).clone(),
        channels: names.into_iter().zip(fw.channels.iter().map(|&v| tape.value(v).clone())).collect(),
    })
}

pub fn embed_dataset(
    state: &ModelState,
    ds: &UrbanDataset,
    graphs: &GraphBundle,
) -> Result<EmbeddingTable, TrainError> {
    state.check_compatible(&ModelDims::of(ds, graphs))?;
    embed(state, &ModelInputs::new(ds, graphs, &state.config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    dtype: String,
    config_hash: String,
    config: TrainConfig,
    dims: ModelDims,
    blocks: Vec<BlockEntry>,
}

impl ModelState {
    /// Errors if the state was built for different data shapes.
    pub fn check_compatible(&self, dims: &ModelDims) -> Result<(), TrainError> {
        if &self.dims != dims {
            return Err(TrainError::VersionMismatch(format!(
                "checkpoint built for {:?}, data has {:?}",
                self.dims, dims
            )));
        }
        Ok(())
    }

    /// Errors if the state's hyperparameters differ from `config` in any key
    /// that changes parameter shapes.
    pub fn check_config(&self, config: &TrainConfig) -> Result<(), TrainError> {
        let c = &self.config;
        let keys = [
            ("d_in", c.d_in, config.d_in),
            ("d_hid", c.d_hid, config.d_hid),
            ("d_feat", c.d_feat, config.d_feat),
            ("global_layers", c.global_layers, config.global_layers),
            ("expert_layers", c.expert_layers, config.expert_layers),
            ("sv_layers", c.sv_layers, config.sv_layers),
            ("heads", c.heads, config.heads),
        ];
        for (name, have, want) in keys {
            if have != want {
                return Err(TrainError::VersionMismatch(format!("checkpoint has {name}={have}, expected {want}")));
            }
        }
        Ok(())
    }
}

/// Writes `<stem>.bin` (little-endian f64 blocks) and `<stem>.json`.
pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let mut blocks = Vec::new();
    let mut bytes = Vec::with_capacity(state.store.total_elements() * 8);
    for id in state.store.ids() {
        let m = state.store.get(id);
        blocks.push(BlockEntry {
            name: state.store.name(id).to_string(),
            shape: [m.nrows(), m.ncols()],
            offset: bytes.len(),
        });
        for v in m.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        dtype: "f64le".into(),
        config_hash: state.config.hash(),
        config: state.config.clone(),
        dims: state.dims.clone(),
        blocks,
    };
    fs::write(dir.join("checkpoint.bin"), &bytes)?;
    let mut f = fs::File::create(dir.join("checkpoint.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelState, TrainError> {
    let text = fs::read_to_string(dir.join("checkpoint.json"))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| TrainError::CorruptFile(format!("checkpoint.json: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch(format!(
            "format version {} (supported: {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.dtype != "f64le" {
        return Err(TrainError::VersionMismatch(format!("unsupported dtype {}", manifest.dtype)));
    }
    let bytes = fs::read(dir.join("checkpoint.bin"))?;
    let mut state = ModelState::new(&manifest.config, manifest.dims.clone())?;
    if state.store.len() != manifest.blocks.len() {
        return Err(TrainError::VersionMismatch(format!(
            "checkpoint has {} tensors, model layout has {}",
            manifest.blocks.len(),
            state.store.len()
        )));
    }
    for (id, block) in state.store.ids().collect::<Vec<_>>().into_iter().zip(&manifest.blocks) {
        let expected = state.store.get(id).dim();
        if block.name != state.store.name(id) || (block.shape[0], block.shape[1]) != expected {
            return Err(TrainError::VersionMismatch(format!(
                "tensor {} {:?} does not match layout {} {:?}",
                block.name,
                block.shape,
                state.store.name(id),
                expected
            )));
        }
        let len = expected.0 * expected.1 * 8;
        let raw = bytes
            .get(block.offset..block.offset + len)
            .ok_or_else(|| TrainError::CorruptFile(format!("checkpoint.bin truncated in {}", block.name)))?;
        let values: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        *state.store.get_mut(id) = Mat::from_shape_vec(expected, values).expect("shape checked");
    }
    let used = manifest.blocks.last().map_or(0, |b| b.offset + b.shape[0] * b.shape[1] * 8);
    if bytes.len() != used {
        return Err(TrainError::CorruptFile(format!("checkpoint.bin has {} bytes, expected {used}", bytes.len())));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_city, SynthSpec};

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            d_in: 8,
            d_hid: 8,
            d_feat: 8,
            heads: 2,
            edge_top_k: 6,
            epochs: 3,
            lr: 1e-3,
            walks: WalkConfig { walk_len: 6, walks_per_node: 2, epochs: 1, ..WalkConfig::default() },
            ..TrainConfig::default()
        }
    }

    fn city(seed: u64) -> UrbanDataset {
        let mut spec = SynthSpec::grid(3, 3, seed);
        spec.d_raw_sv = 12;
        generate_synthetic_city(&spec).unwrap().dataset
    }

    #[test]
    fn resolve_drops_sv_loss_with_sv() {
        let c = TrainConfig { no_sv: true, ..TrainConfig::default() }.resolved().unwrap();
        assert!(c.no_l_sv);
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.resolved().is_err());
        assert!(TrainConfig { d_hid: 10, heads: 4, ..TrainConfig::default() }.resolved().is_err());
    }

    #[test]
    fn default_config_matches_documented_values() {
        let c = TrainConfig::default();
        assert_eq!((c.d_in, c.d_hid, c.d_feat), (180, 168, 168));
        assert_eq!((c.global_layers, c.expert_layers, c.sv_layers), (2, 3, 1));
        assert_eq!((c.edge_top_k, c.gamma, c.lr, c.epochs, c.heads), (64, 2.0, 1e-4, 300, 4));
        let parsed: TrainConfig = serde_json::from_str(r#"{"C": 4, "L": 2, "Z": 0}"#).unwrap();
        assert_eq!((parsed.global_layers, parsed.expert_layers, parsed.sv_layers), (4, 2, 0));
    }

    #[test]
    fn preprocess_standardizes_columns() {
        let m = ndarray::array![[0.0, 5.0], [3.0, 5.0], [7.0, 5.0]];
        let x = preprocess_table(&m, true);
        let col0 = x.column(0);
        assert!(col0.sum().abs() < 1e-12);
        assert!(((col0.iter().map(|v| v * v).sum::<f64>() / 3.0) - 1.0).abs() < 1e-12);
        assert!(x.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = city(1);
        let cfg = tiny_config();
        let graphs = build_graphs(&ds, &cfg).unwrap();
        let (s1, h1) = train(&ds, &graphs, &cfg).unwrap();
        let (s2, h2) = train(&ds, &graphs, &cfg).unwrap();
        assert_eq!(h1.losses, h2.losses);
        assert_eq!(s1.store, s2.store);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let ds = city(2);
        let cfg = TrainConfig { lr: 0.0, ..tiny_config() };
        let graphs = build_graphs(&ds, &cfg).unwrap();
        let init = ModelState::new(&cfg, ModelDims::of(&ds, &graphs)).unwrap();
        let (state, history) = train(&ds, &graphs, &cfg).unwrap();
        assert_eq!(state.store, init.store);
        // samples change per epoch, so only the forward pass is flat, not the loss
        let inputs = ModelInputs::new(&ds, &graphs, &cfg);
        assert_eq!(embed(&state, &inputs).unwrap(), embed(&init, &inputs).unwrap());
        assert_eq!(history.losses.len(), 3);
    }

    #[test]
    fn frozen_node_embeddings_stay_fixed() {
        let ds = city(3);
        let cfg = TrainConfig { freeze_node_init: true, ..tiny_config() };
        let graphs = build_graphs(&ds, &cfg).unwrap();
        let init = ModelState::new(&cfg, ModelDims::of(&ds, &graphs)).unwrap();
        let (state, _) = train(&ds, &graphs, &cfg).unwrap();
        let id = state.params.global.node_embeddings;
        assert_eq!(state.store.get(id), init.store.get(id));
        assert_ne!(state.store, init.store);
    }

    #[test]
    fn variants_keep_output_shape() {
        let ds = city(4);
        let base = tiny_config();
        let graphs = build_graphs(&ds, &base).unwrap();
        for v in ["full"].into_iter().chain(ABLATION_VARIANTS) {
            let cfg = base.with_variant(v).unwrap();
            let state = ModelState::new(&cfg, ModelDims::of(&ds, &graphs)).unwrap();
            let table = embed(&state, &ModelInputs::new(&ds, &graphs, &state.config)).unwrap();
            assert_eq!(table.regions.dim(), (9, 8), "{v}");
            assert_eq!(table.channels.len(), if v == "no_sv" { 6 } else { 7 }, "{v}");
            assert!(table.regions.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn no_samf_is_channel_mean_of_attention_output() {
        let ds = city(5);
        let cfg = TrainConfig { no_samf: true, ..tiny_config() };
        let graphs = build_graphs(&ds, &cfg).unwrap();
        let state = ModelState::new(&cfg, ModelDims::of(&ds, &graphs)).unwrap();
        let inputs = ModelInputs::new(&ds, &graphs, &state.config);
        let mut tape = Tape::new();
        let p = state.store.bind(&mut tape);
        let fw = forward(&mut tape, &p, &state, &inputs).unwrap();
        let hf = cross_modal_attention(&mut tape, &inputs.layout, &fw.channels, &state.params.fusion, &p).unwrap();
        let hf = tape.value(hf);
        let fused = tape.value(fw.fused);
        for i in 0..9 {
            let mean = hf.slice(ndarray::s![i * 7..(i + 1) * 7, ..]).mean_axis(Axis(0)).unwrap();
            assert!((&fused.row(i) - &mean).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn loss_total_is_sum_of_components() {
        let ds = city(6);
        let cfg = tiny_config();
        let graphs = build_graphs(&ds, &cfg).unwrap();
        let state = ModelState::new(&cfg, ModelDims::of(&ds, &graphs)).unwrap();
        let inputs = ModelInputs::new(&ds, &graphs, &state.config);
        let samples = EpochSamples::draw(&inputs.adjacency, 1, &mut sampling_rng(0)).unwrap();
        let mut tape = Tape::new();
        let p = state.store.bind(&mut tape);
        let lv = compute_loss(&mut tape, &p, &state, &inputs, &samples).unwrap();
        let r = lv.report(&tape);
        assert!(r.l_agg > 0.0 && r.l_sv > 0.0 && r.l_f > 0.0);
        assert_eq!(tape.scalar(lv.total), r.l_agg + r.l_sv + r.l_f);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let ds = city(7);
        let cfg = tiny_config();
        let graphs = build_graphs(&ds, &cfg).unwrap();
        let (state, _) = train(&ds, &graphs, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.store, state.store);
        assert_eq!(embed_dataset(&back, &ds, &graphs).unwrap(), embed_dataset(&state, &ds, &graphs).unwrap());

        assert!(matches!(
            back.check_config(&TrainConfig { d_hid: 16, ..cfg.clone() }),
            Err(TrainError::VersionMismatch(_))
        ));

        let bin = dir.path().join("checkpoint.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(TrainError::CorruptFile(_))));

        let json = dir.path().join("checkpoint.json");
        let text = fs::read_to_string(&json).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&json, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(TrainError::VersionMismatch(_))));
    }

    #[test]
    fn dataset_with_other_shape_is_rejected() {
        let ds = city(8);
        let cfg = tiny_config();
        let graphs = build_graphs(&ds, &cfg).unwrap();
        let state = ModelState::new(&cfg, ModelDims::of(&ds, &graphs)).unwrap();
        let mut spec = SynthSpec::grid(2, 3, 8);
        spec.d_raw_sv = 12;
        let other = generate_synthetic_city(&spec).unwrap().dataset;
        let other_graphs = build_graphs(&other, &cfg).unwrap();
        assert!(matches!(embed_dataset(&state, &other, &other_graphs), Err(TrainError::VersionMismatch(_))));
    }
}
