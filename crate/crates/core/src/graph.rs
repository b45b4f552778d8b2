//! Modality subgraphs, the heterogeneous region graph and the dual-level
//! street-view graph.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Modality, ModalityFeatureTable, UrbanDataset};
use crate::tape::{EdgeIndex, Mat, SparseMat};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("k = {k} exceeds the {pairs} available node pairs")]
    KTooLarge { k: usize, pairs: usize },
    #[error("similarity graphs need k >= 1 and at least two nodes (k = {k}, n = {n})")]
    Degenerate { k: usize, n: usize },
    #[error("subgraph {modality} has {found} nodes, expected {expected}")]
    InconsistentN { modality: Modality, expected: usize, found: usize },
    #[error("expected one subgraph per modality in block order, got {0:?}")]
    WrongModalities(Vec<Modality>),
    #[error("graph file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How similarity thresholds are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// One threshold per modality: the k-th largest pairwise similarity.
    #[default]
    GlobalThreshold,
    /// One threshold per node: the k-th largest similarity in its row.
    PerNodeTopk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    pub modality: Modality,
    pub n_nodes: usize,
    /// Canonical: sorted, `i < j`, unique.
    pub edges: Vec<(usize, usize)>,
    /// Similarity threshold; `None` for graphs not built from similarities.
    pub threshold_used: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct SubgraphFile {
    n: usize,
    edges: Vec<[usize; 2]>,
    threshold: Option<f64>,
}

impl Subgraph {
    pub fn new(modality: Modality, n_nodes: usize, mut edges: Vec<(usize, usize)>, threshold: Option<f64>) -> Self {
        for e in edges.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.retain(|e| e.0 != e.1);
        edges.sort_unstable();
        edges.dedup();
        let g = Self { modality, n_nodes, edges, threshold_used: threshold };
        debug_assert!(g.is_canonical());
        g
    }

    pub fn is_canonical(&self) -> bool {
        self.edges.windows(2).all(|w| w[0] < w[1]) && self.edges.iter().all(|&(i, j)| i < j && j < self.n_nodes)
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_nodes];
        for &(i, j) in &self.edges {
            out[i].push(j);
            out[j].push(i);
        }
        out
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` with self-inclusive degrees.
    pub fn normalized_propagation(&self) -> SparseMat {
        let deg: Vec<f64> = self.degrees().iter().map(|&d| (d + 1) as f64).collect();
        let mut entries: Vec<(usize, usize, f64)> = (0..self.n_nodes).map(|i| (i, i, 1.0 / deg[i])).collect();
        for &(i, j) in &self.edges {
            let w = 1.0 / (deg[i] * deg[j]).sqrt();
            entries.push((i, j, w));
            entries.push((j, i, w));
        }
        SparseMat::new(self.n_nodes, self.n_nodes, entries)
    }

    /// Unnormalized adjacency as a sparse operator (sum over neighbors).
    pub fn adjacency_operator(&self) -> SparseMat {
        let mut entries = Vec::with_capacity(2 * self.edges.len());
        for &(i, j) in &self.edges {
            entries.push((i, j, 1.0));
            entries.push((j, i, 1.0));
        }
        SparseMat::new(self.n_nodes, self.n_nodes, entries)
    }

    /// Attention edges over `neighbors ∪ {self}`.
    pub fn attention_index(&self) -> EdgeIndex {
        attention_index(self.n_nodes, &self.edges)
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        let file = SubgraphFile {
            n: self.n_nodes,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
            threshold: self.threshold_used,
        };
        fs::write(path, serde_json::to_string(&file).expect("subgraph serializes"))?;
        Ok(())
    }

    pub fn load(modality: Modality, path: &Path) -> Result<Self, GraphError> {
        let label = path.display().to_string();
        let text = fs::read_to_string(path)?;
        let file: SubgraphFile = serde_json::from_str(&text)
            .map_err(|e| GraphError::Format { path: label.clone(), detail: e.to_string() })?;
        if let Some(bad) = file.edges.iter().find(|e| e[0] >= file.n || e[1] >= file.n || e[0] == e[1]) {
            return Err(GraphError::Format { path: label, detail: format!("invalid edge {bad:?}") });
        }
        Ok(Subgraph::new(modality, file.n, file.edges.iter().map(|e| (e[0], e[1])).collect(), file.threshold))
    }
}

/// Both directions of every edge plus a self loop per node.
pub fn attention_index(n: usize, edges: &[(usize, usize)]) -> EdgeIndex {
    let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    for &(i, j) in edges {
        pairs.push((i, j));
        pairs.push((j, i));
    }
    EdgeIndex::from_pairs(n, n, &pairs)
}

/// Cosine similarity; defined as 0 when either vector is all zeros.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity: length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn pairwise_similarities(matrix: &Mat) -> Vec<Vec<f64>> {
    let n = matrix.nrows();
    let rows: Vec<Vec<f64>> = matrix.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut sims = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine_similarity(&rows[i], &rows[j]);
            sims[i][j] = s;
            sims[j][i] = s;
        }
    }
    sims
}

fn kth_largest(mut values: Vec<f64>, k: usize) -> f64 {
    values.sort_unstable_by(|a, b| b.total_cmp(a));
    values[k - 1]
}

/// Connects pairs whose cosine similarity strictly exceeds the k-th largest
/// pairwise similarity (ties counted with multiplicity).
pub fn build_similarity_subgraph(table: &ModalityFeatureTable, k: usize) -> Result<Subgraph, GraphError> {
    build_similarity_subgraph_with(table, k, EdgeMode::GlobalThreshold)
}

pub fn build_similarity_subgraph_with(
    table: &ModalityFeatureTable,
    k: usize,
    mode: EdgeMode,
) -> Result<Subgraph, GraphError> {
    let n = table.matrix.nrows();
    if k == 0 || n < 2 {
        return Err(GraphError::Degenerate { k, n });
    }
    let sims = pairwise_similarities(&table.matrix);
    match mode {
        EdgeMode::GlobalThreshold => {
            let pairs = n * (n - 1) / 2;
            if k > pairs {
                return Err(GraphError::KTooLarge { k, pairs });
            }
            let all: Vec<f64> = (0..n).flat_map(|i| sims[i][i + 1..].to_vec()).collect();
            let eps = kth_largest(all, k);
            let mut edges = Vec::new();
            for (i, row) in sims.iter().enumerate() {
                for (j, &s) in row.iter().enumerate().skip(i + 1) {
                    if s > eps {
                        edges.push((i, j));
                    }
                }
            }
            Ok(Subgraph::new(table.modality, n, edges, Some(eps)))
        }
        EdgeMode::PerNodeTopk => {
            let k_row = k.min(n - 1);
            let mut edges = Vec::new();
            for (i, row) in sims.iter().enumerate() {
                let others: Vec<f64> = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &s)| s).collect();
                let eps = kth_largest(others, k_row);
                edges.extend(row.iter().enumerate().filter(|&(j, &s)| j != i && s > eps).map(|(j, _)| (i, j)));
            }
            Ok(Subgraph::new(table.modality, n, edges, None))
        }
    }
}

/// Divides every row by its sum (zero rows are left untouched).
pub fn row_normalized(table: &ModalityFeatureTable) -> ModalityFeatureTable {
    let mut out = table.clone();
    for mut row in out.matrix.rows_mut() {
        let s = row.sum();
        if s != 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
    out
}

pub fn build_region_boundary_graph(ds: &UrbanDataset) -> Subgraph {
    Subgraph::new(Modality::Region, ds.n_regions(), ds.adjacency_pairs(), None)
}

/// Options for [`build_modality_subgraphs`].
#[derive(Clone, Copy, Debug)]
pub struct SubgraphOptions {
    pub top_k: usize,
    pub mode: EdgeMode,
    pub normalize_taxi: bool,
}

/// The six subgraphs in [`Modality::ALL`] order. `k` is clamped to the number of
/// available pairs so tiny cities still build.
pub fn build_modality_subgraphs(ds: &UrbanDataset, opts: SubgraphOptions) -> Result<Vec<Subgraph>, GraphError> {
    let n = ds.n_regions();
    let pairs = n * n.saturating_sub(1) / 2;
    let k = opts.top_k.min(pairs).max(1);
    let mut out = vec![build_region_boundary_graph(ds)];
    for m in Modality::AGGREGATED {
        let table = ds.table(m).expect("validated dataset has every table");
        let g = if m == Modality::Taxi && opts.normalize_taxi {
            build_similarity_subgraph_with(&row_normalized(table), k, opts.mode)?
        } else {
            build_similarity_subgraph_with(table, k, opts.mode)?
        };
        out.push(g);
    }
    Ok(out)
}

/// Six blocks of N nodes in [`Modality::ALL`] order, joined by region-to-modality links.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub n_regions: usize,
    pub node_type: Vec<Modality>,
    pub intra_edges: Vec<(usize, usize)>,
    pub cross_edges: Vec<(usize, usize)>,
}

impl HeteroGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_type.len()
    }

    pub fn node(&self, modality: Modality, region: usize) -> usize {
        modality.block() * self.n_regions + region
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes()];
        for &(i, j) in self.intra_edges.iter().chain(&self.cross_edges) {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    pub fn all_edges(&self) -> Vec<(usize, usize)> {
        self.intra_edges.iter().chain(&self.cross_edges).copied().collect()
    }

    pub fn attention_index(&self) -> EdgeIndex {
        attention_index(self.n_nodes(), &self.all_edges())
    }
}

pub fn assemble_hetero_graph(subgraphs: &[Subgraph]) -> Result<HeteroGraph, GraphError> {
    let mods: Vec<Modality> = subgraphs.iter().map(|g| g.modality).collect();
    if mods != Modality::ALL {
        return Err(GraphError::WrongModalities(mods));
    }
    let n = subgraphs[0].n_nodes;
    for g in subgraphs {
        if g.n_nodes != n {
            return Err(GraphError::InconsistentN { modality: g.modality, expected: n, found: g.n_nodes });
        }
    }
    let node_type = Modality::ALL.iter().flat_map(|&m| std::iter::repeat_n(m, n)).collect();
    let mut intra_edges = Vec::new();
    for (b, g) in subgraphs.iter().enumerate() {
        intra_edges.extend(g.edges.iter().map(|&(i, j)| (b * n + i, b * n + j)));
    }
    let mut cross_edges = Vec::with_capacity(5 * n);
    for b in 1..Modality::ALL.len() {
        cross_edges.extend((0..n).map(|i| (i, b * n + i)));
    }
    Ok(HeteroGraph { n_regions: n, node_type, intra_edges, cross_edges })
}

/// Image nodes (first level) under one virtual node per region (second level).
#[derive(Clone, Debug, PartialEq)]
pub struct DualLevelGraph {
    pub n_regions: usize,
    /// Owning region of every image node, in dataset order.
    pub image_owner: Vec<usize>,
    /// `(image, region)` pairs.
    pub intra_edges: Vec<(usize, usize)>,
    /// Virtual-virtual edges `(i, j)`, `i < j`.
    pub inter_edges: Vec<(usize, usize)>,
    pub neighbors: Vec<Vec<usize>>,
}

impl DualLevelGraph {
    pub fn n_images(&self) -> usize {
        self.image_owner.len()
    }

    pub fn image_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_regions];
        for &o in &self.image_owner {
            c[o] += 1;
        }
        c
    }

    /// N × M operator summing each region's images (or averaging them when `mean`).
    pub fn pool_images(&self, mean: bool) -> SparseMat {
        let counts = self.image_counts();
        let entries = self
            .intra_edges
            .iter()
            .map(|&(img, r)| (r, img, if mean { 1.0 / counts[r] as f64 } else { 1.0 }))
            .collect();
        SparseMat::new(self.n_regions, self.n_images(), entries)
    }

    /// M × N operator copying each image's owning virtual node.
    pub fn broadcast_to_images(&self) -> SparseMat {
        SparseMat::gather(&self.image_owner, self.n_regions)
    }

    /// N × N operator summing (or averaging) the neighboring virtual nodes.
    pub fn neighbor_sum(&self, mean: bool) -> SparseMat {
        let mut entries = Vec::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                entries.push((i, j, if mean { 1.0 / nb.len() as f64 } else { 1.0 }));
            }
        }
        SparseMat::new(self.n_regions, self.n_regions, entries)
    }
}

pub fn build_dual_level_sv_graph(ds: &UrbanDataset) -> DualLevelGraph {
    let mut image_owner = Vec::with_capacity(ds.total_images());
    for set in &ds.sv_sets {
        image_owner.extend(std::iter::repeat_n(set.region_id, set.features.nrows()));
    }
    let intra_edges = image_owner.iter().enumerate().map(|(img, &r)| (img, r)).collect();
    let inter_edges = ds.adjacency_pairs();
    let neighbors = (0..ds.n_regions()).map(|i| ds.neighbors(i)).collect();
    DualLevelGraph { n_regions: ds.n_regions(), image_owner, intra_edges, inter_edges, neighbors }
}

/// Everything the model needs about graph structure, precomputed once.
#[derive(Clone, Debug)]
pub struct GraphBundle {
    pub subgraphs: Vec<Subgraph>,
    pub hetero: HeteroGraph,
    pub dual: DualLevelGraph,
    /// N × dims random-walk embeddings of the boundary graph.
    pub positional: Mat,
}

pub fn save_graphs(graphs: &GraphBundle, dir: &Path) -> Result<(), GraphError> {
    fs::create_dir_all(dir)?;
    for g in &graphs.subgraphs {
        g.save(&dir.join(format!("{}.json", g.modality.name())))?;
    }
    let mut w = csv::Writer::from_path(dir.join("positional.csv"))
        .map_err(|e| GraphError::Format { path: "positional.csv".into(), detail: e.to_string() })?;
    let header: Vec<String> = (0..graphs.positional.ncols()).map(|j| format!("p{j}")).collect();
    let io = |e: csv::Error| GraphError::Format { path: "positional.csv".into(), detail: e.to_string() };
    w.write_record(&header).map_err(io)?;
    for row in graphs.positional.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the six subgraphs and positional table written by [`save_graphs`].
pub fn load_graphs(dir: &Path, ds: &UrbanDataset) -> Result<GraphBundle, GraphError> {
    let subgraphs = Modality::ALL
        .iter()
        .map(|&m| Subgraph::load(m, &dir.join(format!("{}.json", m.name()))))
        .collect::<Result<Vec<_>, _>>()?;
    let hetero = assemble_hetero_graph(&subgraphs)?;
    if hetero.n_regions != ds.n_regions() {
        return Err(GraphError::InconsistentN {
            modality: Modality::Region,
            expected: ds.n_regions(),
            found: hetero.n_regions,
        });
    }
    let path = dir.join("positional.csv");
    let label = path.display().to_string();
    let fmt = |detail: String| GraphError::Format { path: label.clone(), detail };
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| fmt(e.to_string()))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let width = rdr.headers().map_err(|e| fmt(e.to_string()))?.len();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        for f in rec.iter() {
            data.push(f.parse::<f64>().map_err(|e| fmt(e.to_string()))?);
        }
        rows += 1;
    }
    let positional = Mat::from_shape_vec((rows, width), data).map_err(|e| fmt(e.to_string()))?;
    if rows != ds.n_regions() {
        return Err(fmt(format!("expected {} rows, found {rows}", ds.n_regions())));
    }
    Ok(GraphBundle { subgraphs, hetero, dual: build_dual_level_sv_graph(ds), positional })
}
