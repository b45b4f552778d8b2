//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.
//!
//! Run with `cargo test --test acceptance`.

use std::process::Command as Process;
use std::rc::Rc;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtgrr::data::{generate_synthetic_city, Modality, ModalityFeatureTable, SynthSpec, UrbanDataset};
use mtgrr::eval::{cross_validate, evaluate_metrics, ridge_fit};
use mtgrr::fusion::{cross_modal_attention, fuse, spatial_weights, FusionParams, TokenLayout};
use mtgrr::graph::{
    assemble_hetero_graph, attention_index, build_dual_level_sv_graph, build_modality_subgraphs,
    build_region_boundary_graph, build_similarity_subgraph, DualLevelGraph, EdgeMode, Subgraph, SubgraphOptions,
};
use mtgrr::moe::{expert_layer_forward, gat_layer_forward, AttentionGraph, ExpertLayerParams, GatLayerParams};
use mtgrr::nn::ParamStore;
use mtgrr::sv::{dual_level_layer, SvLayerOptions, SvLayerParams, SvOperators};
use mtgrr::tape::{Activation, Mat, Tape};
use mtgrr::trainer::{
    build_graphs, compute_loss, embed, train, EpochSamples, ModelDims, ModelInputs, ModelState, TrainConfig,
    ABLATION_VARIANTS,
};
use mtgrr::walks::WalkConfig;

const TRIALS: u64 = 100;
const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn random_edges(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    edges
}

fn dense_adjacency(n: usize, edges: &[(usize, usize)]) -> Array2<f64> {
    let mut a = Array2::zeros((n, n));
    for &(i, j) in edges {
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    a
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn expert_oracle_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let d = rng.random_range(1..=5);
    let edges = random_edges(&mut rng, n, 0.5);
    let g = Subgraph::new(Modality::Poi, n, edges.clone(), None);
    let x = random_mat(&mut rng, n, d);
    let e = random_mat(&mut rng, 1, d);
    let w = random_mat(&mut rng, d, d);
    let ew = random_mat(&mut rng, d, d);
    let eb = random_mat(&mut rng, 1, d);

    let mut store = ParamStore::new();
    let layer = ExpertLayerParams {
        weight: store.add("w", w.clone()),
        edge_weight: store.add("e", ew.clone()),
        edge_bias: store.add("b", eb.clone()),
    };
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let ev = tape.leaf(e.clone());
    let prop = Rc::new(g.normalized_propagation());
    let (out, e_next) = expert_layer_forward(&mut tape, &prop, xv, ev, &layer, Activation::Relu, &p);

    let a = dense_adjacency(n, &edges) + Array2::<f64>::eye(n);
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    let mut expected = Mat::zeros((n, d));
    for i in 0..n {
        let mut acc = Array1::<f64>::zeros(d);
        for j in 0..n {
            if a[[i, j]] > 0.0 {
                let gated = &x.row(j) * &e.row(0);
                acc += &(gated.dot(&w) / (deg[i] * deg[j]).sqrt());
            }
        }
        expected.row_mut(i).assign(&acc.mapv(relu));
    }
    let expected_e = e.dot(&ew) + &eb;
    max_abs_diff(tape.value(out), &expected).max(max_abs_diff(tape.value(e_next), &expected_e))
}

fn dual_level_oracle_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let d = rng.random_range(1..=5);
    let mut image_owner = Vec::new();
    for i in 0..n {
        for _ in 0..rng.random_range(0..=3) {
            image_owner.push(i);
        }
    }
    let inter_edges = random_edges(&mut rng, n, 0.5);
    let mut neighbors = vec![Vec::new(); n];
    for &(i, j) in &inter_edges {
        neighbors[i].push(j);
        neighbors[j].push(i);
    }
    let intra_edges = image_owner.iter().enumerate().map(|(k, &r)| (k, r)).collect();
    let graph = DualLevelGraph { n_regions: n, image_owner: image_owner.clone(), intra_edges, inter_edges, neighbors };
    let m = image_owner.len();
    let first = random_mat(&mut rng, m, d);
    let second = random_mat(&mut rng, n, d);
    let w1 = random_mat(&mut rng, d, d);
    let w2 = random_mat(&mut rng, d, d);
    let w3 = random_mat(&mut rng, d, d);

    let mut store = ParamStore::new();
    let layer = SvLayerParams {
        w_image: store.add("w1", w1.clone()),
        w_pool: store.add("w2", w2.clone()),
        w_neighbor: store.add("w3", w3.clone()),
    };
    let ops = SvOperators::new(&graph, false);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let fv = tape.leaf(first.clone());
    let sv = tape.leaf(second.clone());
    let opts = SvLayerOptions { activation: Activation::Relu, residual_image_update: false };
    let (img, virt) = dual_level_layer(&mut tape, &ops, fv, sv, &layer, opts, &p);

    let mut expected_img = Mat::zeros((m, d));
    for k in 0..m {
        expected_img.row_mut(k).assign(&second.row(image_owner[k]).dot(&w1).mapv(relu));
    }
    let adj = dense_adjacency(n, &graph.inter_edges);
    let mut expected_virt = Mat::zeros((n, d));
    for i in 0..n {
        let mut acc = Array1::<f64>::zeros(d);
        for k in 0..m {
            if image_owner[k] == i {
                acc += &first.row(k).dot(&w2);
            }
        }
        for s in 0..n {
            if adj[[i, s]] > 0.0 {
                acc += &second.row(s).dot(&w3);
            }
        }
        expected_virt.row_mut(i).assign(&acc.mapv(relu));
    }
    max_abs_diff(tape.value(img), &expected_img).max(max_abs_diff(tape.value(virt), &expected_virt))
}

fn gat_oracle_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let d = rng.random_range(1..=5);
    let heads = rng.random_range(1..=3);
    let edges = random_edges(&mut rng, n, 0.5);
    let h = random_mat(&mut rng, n, d);
    let mut store = ParamStore::new();
    let layer = GatLayerParams::new(&mut store, "gat", d, heads, &mut rng);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let hv = tape.leaf(h.clone());
    let graph = AttentionGraph::new(attention_index(n, &edges));
    let out = gat_layer_forward(&mut tape, &graph, hv, &layer, &p);

    let adj = dense_adjacency(n, &edges) + Array2::<f64>::eye(n);
    let mut expected = Mat::zeros((n, d));
    for head in &layer.heads {
        let wh = h.dot(store.get(head.weight));
        let a_self = store.get(head.attn_self).column(0).to_owned();
        let a_nb = store.get(head.attn_neighbor).column(0).to_owned();
        for i in 0..n {
            let nbrs: Vec<usize> = (0..n).filter(|&j| adj[[i, j]] > 0.0).collect();
            let scores: Vec<f64> = nbrs
                .iter()
                .map(|&j| {
                    let s = wh.row(i).dot(&a_self) + wh.row(j).dot(&a_nb);
                    if s > 0.0 {
                        s
                    } else {
                        0.2 * s
                    }
                })
                .collect();
            let alpha = softmax(&scores);
            let mut acc = Array1::<f64>::zeros(d);
            for (a, &j) in alpha.iter().zip(&nbrs) {
                acc += &(&wh.row(j) * *a);
            }
            let mut row = expected.row_mut(i);
            row += &(acc.mapv(elu) / heads as f64);
        }
    }
    max_abs_diff(tape.value(out), &expected)
}

fn fusion_oracle_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let c = 7;
    let heads = rng.random_range(1..=3);
    let d = heads * rng.random_range(1..=3);
    let channels: Vec<Mat> = (0..c).map(|_| random_mat(&mut rng, n, d)).collect();
    let mut store = ParamStore::new();
    let params = FusionParams::new(&mut store, c, d, heads, &mut rng);
    *store.get_mut(params.p1) = Mat::from_elem((1, 1), rng.random_range(-1.0..1.0));
    *store.get_mut(params.p2) = Mat::from_elem((1, 1), rng.random_range(-1.0..1.0));
    let layout = TokenLayout::new(n, c);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let vars: Vec<_> = channels.iter().map(|m| tape.leaf(m.clone())).collect();
    let hf = cross_modal_attention(&mut tape, &layout, &vars, &params, &p).expect("seven channels");
    let w_spa = spatial_weights(&mut tape, &layout, hf, &params, &p);
    let fused = fuse(&mut tape, &layout, hf, w_spa, &params, &p);

    let (wq, wk, wv, wo) =
        (store.get(params.query), store.get(params.key), store.get(params.value), store.get(params.output));
    let (w1, w2, wp) = (store.get(params.w1), store.get(params.w2), store.get(params.w_proj));
    let (p1, p2) = (store.get(params.p1)[[0, 0]], store.get(params.p2)[[0, 0]]);
    let dh = d / heads;
    let mut expected_hf = Mat::zeros((n * c, d));
    let mut expected_w = Mat::zeros((n, c));
    let mut expected_h = Mat::zeros((n, d));
    for i in 0..n {
        let x = Mat::from_shape_fn((c, d), |(m, k)| channels[m][[i, k]]);
        let (q, k, v) = (x.dot(wq), x.dot(wk), x.dot(wv));
        let mut concat = Mat::zeros((c, d));
        for hd in 0..heads {
            for a in 0..c {
                let scores: Vec<f64> = (0..c)
                    .map(|b| {
                        (0..dh).map(|t| q[[a, hd * dh + t]] * k[[b, hd * dh + t]]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let alpha = softmax(&scores);
                for t in 0..dh {
                    concat[[a, hd * dh + t]] = (0..c).map(|b| alpha[b] * v[[b, hd * dh + t]]).sum();
                }
            }
        }
        let hf_i = concat.dot(wo) + &x;
        let ctx = hf_i.mean_axis(Axis(0)).unwrap();
        let hidden = ctx.dot(w1).mapv(sigmoid);
        let logits: Vec<f64> = (0..c).map(|m| hidden.dot(&w2.row(m))).collect();
        let w = softmax(&logits);
        let mut acc = Array1::<f64>::zeros(d);
        for m in 0..c {
            let weighted = (&hf_i.row(m) * w[m]).dot(wp);
            acc += &(&weighted * p1 + &(&hf_i.row(m) * p2));
            expected_hf.row_mut(i * c + m).assign(&hf_i.row(m));
            expected_w[[i, m]] = w[m];
        }
        expected_h.row_mut(i).assign(&(acc / c as f64));
    }
    max_abs_diff(tape.value(hf), &expected_hf)
        .max(max_abs_diff(tape.value(w_spa), &expected_w))
        .max(max_abs_diff(tape.value(fused.regions), &expected_h))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let checks: [(&str, fn(u64) -> f64); 4] = [
        ("expert", expert_oracle_trial),
        ("dual-level", dual_level_oracle_trial),
        ("gat", gat_oracle_trial),
        ("fusion", fusion_oracle_trial),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, trial) in checks {
        let worst = (0..TRIALS).map(trial).fold(0.0, f64::max);
        pass &= worst <= 1e-6;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    Outcome::new(pass, format!("max abs err over {TRIALS} trials: {}; {secs:.1}s", parts.join(", ")))
}

fn tiny_city(seed: u64) -> UrbanDataset {
    let mut spec = SynthSpec::grid(3, 3, seed);
    spec.d_raw_sv = 12;
    spec.images_per_region = (2, 4);
    generate_synthetic_city(&spec).unwrap().dataset
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let ds = tiny_city(11);
    let cfg = TrainConfig {
        d_in: 8,
        d_hid: 8,
        d_feat: 8,
        heads: 2,
        edge_top_k: 6,
        walks: WalkConfig { walk_len: 6, walks_per_node: 2, epochs: 1, ..WalkConfig::default() },
        seed: 5,
        ..TrainConfig::default()
    };
    let graphs = build_graphs(&ds, &cfg).unwrap();
    let mut state = ModelState::new(&cfg, ModelDims::of(&ds, &graphs)).unwrap();
    let inputs = ModelInputs::new(&ds, &graphs, &state.config);
    let samples = EpochSamples::draw(&inputs.adjacency, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();

    let loss_at = |state: &ModelState| {
        let mut tape = Tape::new();
        let p = state.store.bind(&mut tape);
        let lv = compute_loss(&mut tape, &p, state, &inputs, &samples).unwrap();
        tape.scalar(lv.total)
    };
    let mut tape = Tape::new();
    let p = state.store.bind(&mut tape);
    let lv = compute_loss(&mut tape, &p, &state, &inputs, &samples).unwrap();
    let grads = tape.backward(lv.total);

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ids: Vec<_> = state.store.ids().collect();
    ids.shuffle(&mut rng);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids.into_iter().take(30) {
        let shape = state.store.get(id).dim();
        let (r, c) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
        let analytic = grads.get_or_zeros(p.var(id), shape)[[r, c]];
        let orig = state.store.get(id)[[r, c]];
        state.store.get_mut(id)[[r, c]] = orig + h;
        let up = loss_at(&state);
        state.store.get_mut(id)[[r, c]] = orig - h;
        let down = loss_at(&state);
        state.store.get_mut(id)[[r, c]] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        checked >= 20 && worst <= 1e-3 && secs < 120.0,
        format!("{checked} parameters, worst relative error {worst:.2e}; {secs:.1}s"),
    )
}

/// Model and data settings shared by the synthetic-city criteria.
fn city_spec(seed: u64) -> SynthSpec {
    let mut spec = SynthSpec::grid(6, 6, seed);
    spec.noise_sigma = 0.1;
    spec
}

fn city_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig { d_in: 32, d_hid: 32, d_feat: 32, lr: 2e-3, epochs, seed, ..TrainConfig::default() }
}

const PROGRESS_EPOCHS: usize = 50;
const UTILITY_EPOCHS: usize = 300;

fn criterion_3() -> Outcome {
    let ds = generate_synthetic_city(&city_spec(0)).unwrap().dataset;
    let cfg = city_config(0, 10);
    let graphs = build_graphs(&ds, &cfg).unwrap();
    let (_, history) = train(&ds, &graphs, &cfg).unwrap();
    let mut worst = 0.0f64;
    let mut min_entry = f64::INFINITY;
    let mut complete = history.diagnostics.len() == 10;
    for d in &history.diagnostics {
        match (d.gate_row_dev, d.w_spa_row_dev, d.gate_min, d.w_spa_min) {
            (Some(g), Some(w), Some(gm), Some(wm)) => {
                worst = worst.max(g).max(w);
                min_entry = min_entry.min(gm).min(wm);
            }
            _ => complete = false,
        }
    }
    Outcome::new(
        complete && worst <= 1e-6 && min_entry > 0.0,
        format!(
            "{} forward passes, max |row sum - 1| {worst:.1e}, min entry {min_entry:.2e}",
            history.diagnostics.len()
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut failures = Vec::new();
    for trial in 0..50u64 {
        let rows = rng.random_range(2..=6);
        let cols = rng.random_range(2..=6);
        let mut spec = SynthSpec::grid(rows, cols, 1000 + trial);
        spec.d_raw_sv = 8;
        let ds = generate_synthetic_city(&spec).unwrap().dataset;
        let n = ds.n_regions();
        let top_k = rng.random_range(1..=n * (n - 1) / 2);
        let opts = SubgraphOptions { top_k, mode: EdgeMode::GlobalThreshold, normalize_taxi: false };
        let subgraphs = build_modality_subgraphs(&ds, opts).unwrap();
        let hetero = assemble_hetero_graph(&subgraphs).unwrap();
        let mut ok = hetero.n_nodes() == 6 * n && hetero.cross_edges.len() == 5 * n;
        let mut cross = hetero.cross_edges.clone();
        cross.sort_unstable();
        let mut expected: Vec<_> = (1..6).flat_map(|b| (0..n).map(move |i| (i, b * n + i))).collect();
        expected.sort_unstable();
        ok &= cross == expected;
        let intra: usize = subgraphs.iter().map(|g| g.edges.len()).sum();
        ok &= hetero.intra_edges.len() == intra;

        let dual = build_dual_level_sv_graph(&ds);
        let mut inter = dual.inter_edges.clone();
        inter.sort_unstable();
        ok &= inter == build_region_boundary_graph(&ds).edges;

        for m in Modality::AGGREGATED {
            let table = ds.table(m).unwrap();
            let k = top_k.min(n * (n - 1) / 2);
            let base = build_similarity_subgraph(table, k).unwrap();
            let factors: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..100.0)).collect();
            let scaled = Mat::from_shape_fn(table.matrix.dim(), |(i, j)| table.matrix[[i, j]] * factors[i]);
            let rescaled = build_similarity_subgraph(&ModalityFeatureTable::new(m, scaled), k).unwrap();
            ok &= base.edges == rescaled.edges;
        }
        if !ok {
            failures.push(trial);
        }
    }
    Outcome::new(failures.is_empty(), format!("50 datasets, failing trials {failures:?}"))
}

struct SeedRun {
    loss_ratio: f64,
    r2_trained: f64,
    r2_init: f64,
    r2_shuffled: f64,
}

fn mean_r2(emb: &Mat, ds: &UrbanDataset, seed: u64) -> f64 {
    cross_validate(emb, &ds.targets, &ds.task_names, 5, 1.0, seed).unwrap().mean_r2()
}

fn utility_run(seed: u64, epochs: usize) -> SeedRun {
    let ds = generate_synthetic_city(&city_spec(seed)).unwrap().dataset;
    let cfg = city_config(seed, epochs);
    let graphs = build_graphs(&ds, &cfg).unwrap();
    let init = ModelState::new(&cfg, ModelDims::of(&ds, &graphs)).unwrap();
    let inputs = ModelInputs::new(&ds, &graphs, &init.config);
    let (state, history) = train(&ds, &graphs, &cfg).unwrap();
    let trained = embed(&state, &inputs).unwrap().regions;
    let initial = embed(&init, &inputs).unwrap().regions;
    let mut perm: Vec<usize> = (0..ds.n_regions()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let shuffled = trained.select(Axis(0), &perm);
    let l = &history.losses;
    SeedRun {
        loss_ratio: l[l.len() - 1].l_total / l[0].l_total,
        r2_trained: mean_r2(&trained, &ds, seed),
        r2_init: mean_r2(&initial, &ds, seed),
        r2_shuffled: mean_r2(&shuffled, &ds, seed),
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let ratios: Vec<f64> = (0..SEEDS).map(|s| utility_run(s, PROGRESS_EPOCHS).loss_ratio).collect();
    let passing = ratios.iter().filter(|&&r| r < 0.5).count();
    let secs = start.elapsed().as_secs_f64();
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    Outcome::new(
        passing >= 4 && secs < 300.0,
        format!("final/first loss per seed [{}], {passing}/{SEEDS} below 0.5; {secs:.1}s", shown.join(", ")),
    )
}

fn criterion_6(runs: &[SeedRun], secs: f64) -> Outcome {
    let vs_init = runs.iter().filter(|r| r.r2_trained - r.r2_init >= 0.15).count();
    let vs_shuffled = runs.iter().filter(|r| r.r2_trained - r.r2_shuffled >= 0.15).count();
    let shown: Vec<String> =
        runs.iter().map(|r| format!("{:.3}/{:.3}/{:.3}", r.r2_trained, r.r2_init, r.r2_shuffled)).collect();
    Outcome::new(
        vs_init >= 4 && vs_shuffled >= 4 && secs < 600.0,
        format!(
            "R2 trained/init/shuffled [{}]; margin >= 0.15 vs init {vs_init}/{SEEDS}, vs shuffled {vs_shuffled}/{SEEDS}; {secs:.1}s",
            shown.join(", ")
        ),
    )
}

fn criterion_7(full: &[SeedRun]) -> Outcome {
    let full_mean = full.iter().map(|r| r.r2_trained).sum::<f64>() / full.len() as f64;
    let mut beaten = 0;
    let mut parts = vec![format!("full {full_mean:.3}")];
    for v in ABLATION_VARIANTS {
        let mut total = 0.0;
        for seed in 0..SEEDS {
            let ds = generate_synthetic_city(&city_spec(seed)).unwrap().dataset;
            let cfg = city_config(seed, UTILITY_EPOCHS).with_variant(v).unwrap();
            let graphs = build_graphs(&ds, &cfg).unwrap();
            let inputs = ModelInputs::new(&ds, &graphs, &cfg);
            let (state, _) = train(&ds, &graphs, &cfg).unwrap();
            total += mean_r2(&embed(&state, &inputs).unwrap().regions, &ds, seed);
        }
        let mean = total / SEEDS as f64;
        beaten += (full_mean >= mean) as usize;
        parts.push(format!("{v} {mean:.3}"));
    }
    Outcome::new(
        beaten >= 4,
        format!("mean R2 over {SEEDS} seeds: {}; full >= variant in {beaten}/6", parts.join(", ")),
    )
}

fn criterion_8() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_mtgrr");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"d_in":16,"d_hid":16,"d_feat":16,"heads":2,"epochs":20,"lr":0.001,"edge_top_k":16,"seed":7}"#,
    )
    .unwrap();
    let run = |args: &[&std::ffi::OsStr]| Process::new(bin).args(args).output().map(|o| o.status.success()).unwrap_or(false);
    let mut ok = run(&["gen-data".as_ref(), "--out".as_ref(), data.as_os_str()]);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        ok &= run(&[
            "train".as_ref(),
            "--data".as_ref(),
            data.as_os_str(),
            "--config".as_ref(),
            cfg_path.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        outputs.push(std::fs::read(out.join("embeddings.csv")).unwrap_or_default());
    }
    let identical = !outputs[0].is_empty() && outputs[0] == outputs[1];
    Outcome::new(ok && identical, format!("commands succeeded: {ok}, embeddings.csv bit-identical: {identical}"))
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn criterion_9() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (20, 5);
        let x = random_mat(&mut rng, n, d);
        let y = Array1::from_shape_fn(n, |_| rng.random_range(-3.0..3.0));
        let lambda = rng.random_range(0.01..10.0);
        let model = ridge_fit(&x, y.view(), lambda).unwrap();

        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[[i, j]]).sum::<f64>() / n as f64).collect();
        let sd: Vec<f64> =
            (0..d).map(|j| ((0..n).map(|i| (x[[i, j]] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt()).collect();
        let z = |i: usize, j: usize| (x[[i, j]] - mean[j]) / sd[j];
        let y_mean = y.sum() / n as f64;
        let gram: Vec<Vec<f64>> = (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| (0..n).map(|i| z(i, a) * z(i, b)).sum::<f64>() + if a == b { lambda } else { 0.0 })
                    .collect()
            })
            .collect();
        let rhs: Vec<f64> = (0..d).map(|a| (0..n).map(|i| z(i, a) * (y[i] - y_mean)).sum()).collect();
        let w = gauss_solve(gram, rhs);
        for j in 0..d {
            worst = worst.max((model.std_weights[j] - w[j]).abs());
        }
        let pred = model.predict(&x);
        for i in 0..n {
            let oracle: f64 = y_mean + (0..d).map(|j| z(i, j) * w[j]).sum::<f64>();
            worst = worst.max((pred[i] - oracle).abs());
        }
    }
    let m = evaluate_metrics(ndarray::array![1.0, 2.0, 3.0].view(), ndarray::array![2.0, 2.0, 2.0].view()).unwrap();
    let exact = m.mae == 2.0 / 3.0 && m.rmse == (2.0f64 / 3.0).sqrt() && m.r2 == 0.0 && m.r2_defined;
    Outcome::new(
        worst <= 1e-8 && exact,
        format!("ridge max deviation from normal equations {worst:.1e}; metrics example exact: {exact} ({m:?})"),
    )
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |id: usize, outcome: Outcome| {
        println!("criterion {id}: {} | {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
        results.push((id, outcome));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    let start = Instant::now();
    let runs: Vec<SeedRun> = (0..SEEDS).map(|s| utility_run(s, UTILITY_EPOCHS)).collect();
    report(6, criterion_6(&runs, start.elapsed().as_secs_f64()));
    report(7, criterion_7(&runs));
    report(8, criterion_8());
    report(9, criterion_9());
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(id, _)| *id).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
