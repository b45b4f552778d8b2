//! Spatially-aware multimodal fusion: per-region self-attention over the
//! modality channels, region-specific softmax weights over channels, and a
//! learned mix of weighted and unweighted channels averaged into one vector.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Bound, ParamId, ParamStore};
use crate::tape::{Activation, EdgeIndex, Mat, SparseMat, Tape, Var};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("expected {expected} channels, got {found}")]
    ChannelCountMismatch { expected: usize, found: usize },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub n_channels: usize,
    pub heads: usize,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    /// d_hid × d_hid
    pub w1: ParamId,
    /// n_channels × d_hid
    pub w2: ParamId,
    pub w_proj: ParamId,
    pub p1: ParamId,
    pub p2: ParamId,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, n_channels: usize, d_hid: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && d_hid % heads == 0, "d_hid ({d_hid}) must be divisible by heads ({heads})");
        Self {
            n_channels,
            heads,
            query: store.uniform("fusion.attn.query", d_hid, d_hid, rng),
            key: store.uniform("fusion.attn.key", d_hid, d_hid, rng),
            value: store.uniform("fusion.attn.value", d_hid, d_hid, rng),
            output: store.uniform("fusion.attn.output", d_hid, d_hid, rng),
            w1: store.uniform("fusion.w1", d_hid, d_hid, rng),
            w2: store.uniform("fusion.w2", n_channels, d_hid, rng),
            w_proj: store.uniform("fusion.w_proj", d_hid, d_hid, rng),
            p1: store.full("fusion.p1", 1, 1, 0.5),
            p2: store.full("fusion.p2", 1, 1, 0.5),
        }
    }
}

/// Constant structure for N regions with C channel tokens each. Token
/// `i·C + m` is channel `m` of region `i`.
pub struct TokenLayout {
    pub n_regions: usize,
    pub n_channels: usize,
    /// All ordered token pairs within each region (self included).
    pub attention: Rc<EdgeIndex>,
    /// N × NC: mean over a region's tokens.
    pub mean: Rc<SparseMat>,
}

impl TokenLayout {
    pub fn new(n_regions: usize, n_channels: usize) -> Self {
        let c = n_channels;
        let mut pairs = Vec::with_capacity(n_regions * c * c);
        for i in 0..n_regions {
            for a in 0..c {
                for b in 0..c {
                    pairs.push((i * c + a, i * c + b));
                }
            }
        }
        let nt = n_regions * c;
        let mean = (0..nt).map(|t| (t / c, t, 1.0 / c as f64)).collect();
        Self {
            n_regions,
            n_channels,
            attention: Rc::new(EdgeIndex::from_pairs(nt, nt, &pairs)),
            mean: Rc::new(SparseMat::new(n_regions, nt, mean)),
        }
    }
}

/// Stacks C channel matrices (each N × d) into an NC × d token matrix.
pub fn stack_channels(tape: &mut Tape, channels: &[Var]) -> Var {
    let n = tape.value(channels[0]).nrows();
    let d = tape.value(channels[0]).ncols();
    let wide = tape.concat_cols(channels);
    tape.reshape(wide, (n * channels.len(), d))
}

/// Multi-head scaled dot-product self-attention within each region, with a
/// residual connection. Returns H^f as NC × d_hid tokens.
pub fn cross_modal_attention(
    tape: &mut Tape,
    layout: &TokenLayout,
    channels: &[Var],
    params: &FusionParams,
    p: &Bound,
) -> Result<Var, FusionError> {
    if channels.len() != params.n_channels || channels.len() != layout.n_channels {
        return Err(FusionError::ChannelCountMismatch { expected: params.n_channels, found: channels.len() });
    }
    let x = stack_channels(tape, channels);
    let d = tape.value(x).ncols();
    let dh = d / params.heads;
    let q = tape.matmul(x, p.var(params.query));
    let k = tape.matmul(x, p.var(params.key));
    let v = tape.matmul(x, p.var(params.value));
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.edge_dot(&layout.attention, qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let alpha = tape.edge_softmax(&layout.attention, scores);
        heads.push(tape.edge_sum(&layout.attention, alpha, vh));
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
    let out = tape.matmul(merged, p.var(params.output));
    Ok(tape.add(out, x))
}

/// `W_spa = softmax(sigmoid(mean_m(H^f) W1) W2ᵀ)`, N × C.
pub fn spatial_weights(tape: &mut Tape, layout: &TokenLayout, hf: Var, params: &FusionParams, p: &Bound) -> Var {
    let context = tape.sparse(&layout.mean, hf);
    let hidden = tape.matmul(context, p.var(params.w1));
    let hidden = tape.act(hidden, Activation::Sigmoid);
    let w2t = tape.transpose(p.var(params.w2));
    let logits = tape.matmul(hidden, w2t);
    tape.softmax_rows(logits)
}

pub struct Fused {
    pub weighted: Var,
    pub combined: Var,
    /// N × d_hid final region representations.
    pub regions: Var,
}

/// `H^w = (W_spa ⊙ H^f) W_proj`, `H^c = p1 H^w + p2 H^f`, `ℋ = mean_m H^c`.
pub fn fuse(tape: &mut Tape, layout: &TokenLayout, hf: Var, w_spa: Var, params: &FusionParams, p: &Bound) -> Fused {
    let nt = layout.n_regions * layout.n_channels;
    let per_token = tape.reshape(w_spa, (nt, 1));
    let scaled = tape.mul_col(hf, per_token);
    let weighted = tape.matmul(scaled, p.var(params.w_proj));
    let a = tape.mul_scalar(weighted, p.var(params.p1));
    let b = tape.mul_scalar(hf, p.var(params.p2));
    let combined = tape.add(a, b);
    let regions = tape.sparse(&layout.mean, combined);
    Fused { weighted, combined, regions }
}

/// Plain mean over channels (used when spatial weighting is disabled).
pub fn mean_over_channels(tape: &mut Tape, layout: &TokenLayout, hf: Var) -> Var {
    tape.sparse(&layout.mean, hf)
}

/// Final region representations plus the channel inputs they were fused from.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub regions: Mat,
    pub channels: Vec<(String, Mat)>,
}

/// `region,e0,..,e{d-1}` with one row per region.
pub fn write_embeddings_csv(regions: &Mat, path: &Path) -> Result<(), FusionError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..regions.ncols()).map(|j| format!("e{j}")).collect();
    writeln!(f, "region,{}", header.join(","))?;
    for (i, row) in regions.rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{i},{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_embeddings_csv(path: &Path) -> Result<Mat, FusionError> {
    let label = path.display().to_string();
    let fmt = |detail: String| FusionError::Format { path: label.clone(), detail };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    let width = rdr.headers().map_err(|e| fmt(e.to_string()))?.len();
    if width < 2 {
        return Err(fmt("expected a region column and at least one embedding column".into()));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let id: usize = rec[0].parse().map_err(|e| fmt(format!("row {i}: {e}")))?;
        if id != i {
            return Err(fmt(format!("row {i} has region id {id}")));
        }
        for cell in rec.iter().skip(1) {
            data.push(cell.parse::<f64>().map_err(|e| fmt(format!("row {i}: {e}")))?);
        }
        rows += 1;
    }
    Mat::from_shape_vec((rows, width - 1), data).map_err(|e| fmt(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct ChannelIndexEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

/// `channels.bin` of little-endian f32 blocks and a `channels.json` index.
pub fn write_channel_bundle(table: &EmbeddingTable, dir: &Path) -> Result<(), FusionError> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut index = Vec::new();
    let all = std::iter::once(("fused", &table.regions)).chain(table.channels.iter().map(|(n, m)| (n.as_str(), m)));
    for (name, m) in all {
        index.push(ChannelIndexEntry { name: name.to_string(), shape: [m.nrows(), m.ncols()], offset: bytes.len() });
        for v in m.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(dir.join("channels.bin"), bytes)?;
    fs::write(dir.join("channels.json"), serde_json::to_string_pretty(&index).expect("index serializes"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mat;
    use ndarray::{array, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, c: usize, d: usize) -> (ParamStore, FusionParams, TokenLayout) {
        let mut store = ParamStore::new();
        let params = FusionParams::new(&mut store, c, d, 2, &mut ChaCha8Rng::seed_from_u64(4));
        (store, params, TokenLayout::new(n, c))
    }

    fn channels(tape: &mut Tape, n: usize, c: usize, d: usize, shift: f64) -> Vec<Var> {
        (0..c)
            .map(|m| tape.leaf(Mat::from_shape_fn((n, d), |(i, j)| ((i * 7 + j * 3 + m) as f64 * 0.37 + shift).sin())))
            .collect()
    }

    #[test]
    fn zeroed_value_maps_leave_residual_only() {
        let (mut store, params, layout) = setup(3, 7, 4);
        store.get_mut(params.value).fill(0.0);
        store.get_mut(params.output).fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let ch = channels(&mut tape, 3, 7, 4, 0.0);
        let hf = cross_modal_attention(&mut tape, &layout, &ch, &params, &p).unwrap();
        for i in 0..3 {
            for m in 0..7 {
                assert_eq!(tape.value(hf).row(i * 7 + m), tape.value(ch[m]).row(i));
            }
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let (store, params, layout) = setup(2, 7, 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let ch = channels(&mut tape, 2, 6, 4, 0.0);
        assert!(matches!(
            cross_modal_attention(&mut tape, &layout, &ch, &params, &p),
            Err(FusionError::ChannelCountMismatch { expected: 7, found: 6 })
        ));
    }

    #[test]
    fn attention_does_not_mix_regions() {
        let (store, params, layout) = setup(3, 7, 4);
        let run = |perturb: bool| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let mut ch: Vec<Mat> = (0..7).map(|m| Mat::from_elem((3, 4), 0.1 * m as f64)).collect();
            if perturb {
                ch[2][[1, 0]] += 3.0;
            }
            let vars: Vec<Var> = ch.into_iter().map(|m| tape.leaf(m)).collect();
            let hf = cross_modal_attention(&mut tape, &layout, &vars, &params, &p).unwrap();
            tape.value(hf).clone()
        };
        let (a, b) = (run(false), run(true));
        for t in 0..21 {
            if t / 7 != 1 {
                assert_eq!(a.row(t), b.row(t));
            }
        }
    }

    #[test]
    fn zero_w2_gives_uniform_weights() {
        let (mut store, params, layout) = setup(2, 7, 4);
        store.get_mut(params.w2).fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let hf = tape.leaf(Mat::from_shape_fn((14, 4), |(i, j)| (i + j) as f64));
        let w = spatial_weights(&mut tape, &layout, hf, &params, &p);
        assert!(tape.value(w).iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn spatial_weights_single_region_arithmetic() {
        let mut store = ParamStore::new();
        let params = FusionParams::new(&mut store, 2, 2, 1, &mut ChaCha8Rng::seed_from_u64(1));
        *store.get_mut(params.w1) = array![[1.0, 0.0], [0.0, 2.0]];
        *store.get_mut(params.w2) = array![[1.0, -1.0], [0.5, 0.5]];
        let layout = TokenLayout::new(1, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let hf = tape.leaf(array![[1.0, 0.0], [0.0, 1.0]]);
        let w = spatial_weights(&mut tape, &layout, hf, &params, &p);
        // context = [0.5, 0.5]; hidden = sigmoid([0.5, 1.0])
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (h0, h1) = (sig(0.5), sig(1.0));
        let (o0, o1) = (h0 - h1, 0.5 * h0 + 0.5 * h1);
        let z = o0.exp() + o1.exp();
        let got = tape.value(w);
        assert!((got[[0, 0]] - o0.exp() / z).abs() < 1e-12);
        assert!((got[[0, 1]] - o1.exp() / z).abs() < 1e-12);
    }

    #[test]
    fn fuse_degenerate_mixes() {
        let (mut store, params, layout) = setup(2, 7, 4);
        let hf_m = Mat::from_shape_fn((14, 4), |(i, j)| ((i * 4 + j) as f64).cos());
        let mean_hf = |m: &Mat| {
            let mut out = Mat::zeros((2, 4));
            for i in 0..2 {
                out.row_mut(i).assign(&m.slice(ndarray::s![i * 7..(i + 1) * 7, ..]).mean_axis(Axis(0)).unwrap());
            }
            out
        };

        *store.get_mut(params.p1) = array![[0.0]];
        *store.get_mut(params.p2) = array![[1.0]];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let hf = tape.leaf(hf_m.clone());
        let w = tape.leaf(Mat::from_elem((2, 7), 1.0 / 7.0));
        let out = fuse(&mut tape, &layout, hf, w, &params, &p);
        assert!((tape.value(out.regions) - &mean_hf(&hf_m)).iter().all(|d| d.abs() < 1e-12));

        *store.get_mut(params.p1) = array![[1.0]];
        *store.get_mut(params.p2) = array![[0.0]];
        *store.get_mut(params.w_proj) = Mat::eye(4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let hf = tape.leaf(hf_m.clone());
        let w = tape.leaf(Mat::from_elem((2, 7), 1.0 / 7.0));
        let out = fuse(&mut tape, &layout, hf, w, &params, &p);
        let expected = mean_hf(&hf_m) / 7.0;
        assert!((tape.value(out.regions) - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn embeddings_csv_round_trips() {
        let m = Mat::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) / 3.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.csv");
        write_embeddings_csv(&m, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("region,e0,e1,e2,e3\n0,"));
        assert_eq!(read_embeddings_csv(&path).unwrap(), m);
    }

    #[test]
    fn channel_bundle_blocks_are_f32() {
        let table = EmbeddingTable { regions: Mat::ones((2, 3)), channels: vec![("poi".into(), Mat::zeros((2, 3)))] };
        let dir = tempfile::tempdir().unwrap();
        write_channel_bundle(&table, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("channels.bin")).unwrap().len(), 2 * 6 * 4);
        let index: Vec<ChannelIndexEntry> =
            serde_json::from_str(&fs::read_to_string(dir.path().join("channels.json")).unwrap()).unwrap();
        assert_eq!(index[1].offset, 24);
    }
}
