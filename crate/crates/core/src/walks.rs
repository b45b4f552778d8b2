//! Random-walk positional embeddings for the region boundary graph
//! (uniform walks, i.e. node2vec with p = q = 1, plus skip-gram with negative sampling).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::Subgraph;
use crate::tape::{sigmoid, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    pub walk_len: usize,
    pub walks_per_node: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self { walk_len: 20, walks_per_node: 10, window: 5, negatives: 5, epochs: 5, learning_rate: 0.025 }
    }
}

fn uniform_walks(neighbors: &[Vec<usize>], cfg: &WalkConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut walks = Vec::with_capacity(neighbors.len() * cfg.walks_per_node);
    for _ in 0..cfg.walks_per_node {
        for start in 0..neighbors.len() {
            let mut walk = Vec::with_capacity(cfg.walk_len);
            walk.push(start);
            while walk.len() < cfg.walk_len.max(1) {
                let nb = &neighbors[*walk.last().expect("non-empty walk")];
                if nb.is_empty() {
                    break;
                }
                walk.push(nb[rng.random_range(0..nb.len())]);
            }
            walks.push(walk);
        }
    }
    walks
}

/// Cumulative unigram^0.75 table for negative sampling.
fn noise_distribution(walks: &[Vec<usize>], n: usize) -> Vec<f64> {
    let mut counts = vec![0.0f64; n];
    for w in walks {
        for &v in w {
            counts[v] += 1.0;
        }
    }
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for c in counts {
        acc += c.powf(0.75);
        cum.push(acc);
    }
    cum
}

fn sample_noise(cum: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u = rng.random_range(0.0..*cum.last().expect("non-empty"));
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

/// N × `dims` embeddings of the boundary graph. Isolated nodes train only on
/// their own (self, self) context pair. Deterministic given `seed`.
pub fn region_positional_embeddings(boundary: &Subgraph, dims: usize, cfg: &WalkConfig, seed: u64) -> Mat {
    assert!(dims >= 1, "positional embeddings need at least one dimension");
    let n = boundary.n_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let neighbors = boundary.neighbors();
    let walks = uniform_walks(&neighbors, cfg, &mut rng);

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for walk in &walks {
        for (pos, &center) in walk.iter().enumerate() {
            let lo = pos.saturating_sub(cfg.window);
            let hi = (pos + cfg.window + 1).min(walk.len());
            pairs.extend((lo..hi).filter(|&c| c != pos).map(|c| (center, walk[c])));
        }
    }
    for (i, nb) in neighbors.iter().enumerate() {
        if nb.is_empty() {
            pairs.extend(std::iter::repeat_n((i, i), cfg.walks_per_node.max(1)));
        }
    }
    let cum = noise_distribution(&walks, n);

    let bound = 0.5 / dims as f64;
    let mut input = Mat::from_shape_simple_fn((n, dims), || rng.random_range(-bound..bound));
    let mut output = Mat::zeros((n, dims));
    let total_steps = (cfg.epochs * pairs.len()).max(1) as f64;
    let mut step = 0usize;
    let mut grad_in = vec![0.0; dims];

    for _ in 0..cfg.epochs {
        // Fisher-Yates over the pair list
        for i in (1..pairs.len()).rev() {
            let j = rng.random_range(0..=i);
            pairs.swap(i, j);
        }
        for &(center, context) in &pairs {
            let lr = (cfg.learning_rate * (1.0 - step as f64 / total_steps)).max(cfg.learning_rate * 1e-4);
            step += 1;
            grad_in.iter_mut().for_each(|g| *g = 0.0);
            for k in 0..=cfg.negatives {
                let (target, label) = if k == 0 { (context, 1.0) } else { (sample_noise(&cum, &mut rng), 0.0) };
                if k > 0 && target == context {
                    continue;
                }
                let score = sigmoid(input.row(center).dot(&output.row(target)));
                let g = lr * (label - score);
                for d in 0..dims {
                    grad_in[d] += g * output[[target, d]];
                    output[[target, d]] += g * input[[center, d]];
                }
            }
            for d in 0..dims {
                input[[center, d]] += grad_in[d];
            }
        }
    }
    input
}
