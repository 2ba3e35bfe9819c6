//! Pivot-factorised operators against explicit dense `N x N` computations.

use pivotgsl::autodiff::Tape;
use pivotgsl::gnn::{gnn_forward, two_step_mp, EncoderMode, GnnParams};
use pivotgsl::graph::{homophily_ratio, Graph, Masks};
use pivotgsl::learner::{compute_gamma, LearnerParams, SimilarityMode};
use pivotgsl::objective::loss_supervised;
use pivotgsl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Dense = Vec<Vec<f64>>;

fn dense(t: &Tensor) -> Dense {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn dmm(a: &Dense, b: &Dense) -> Dense {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn max_diff(a: &Dense, b: &Dense) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn random_graph(n: usize, d: usize, c: usize, p_edge: f64, rng: &mut ChaCha8Rng) -> (Graph, Vec<(usize, usize)>) {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random_bool(p_edge) {
                edges.push((u, v));
            }
        }
    }
    let x = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut masks = Masks::empty(n);
    for i in 0..n / 2 {
        masks.train[i] = true;
    }
    let g = Graph::from_edges(n, &edges, x, labels, c, masks).unwrap();
    (g, edges)
}

fn random_gamma(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n * p)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    Tensor::from_vec(n, p, data).unwrap()
}

/// `D^{-1/2}(A + I)D^{-1/2}` built entry by entry.
fn dense_norm_adjacency(n: usize, edges: &[(usize, usize)]) -> Dense {
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v) in edges {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    for (u, row) in a.iter_mut().enumerate() {
        row[u] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    for u in 0..n {
        for v in 0..n {
            a[u][v] /= (deg[u] * deg[v]).sqrt();
        }
    }
    a
}

/// The latent `N x N` operator: `Σ_p Γ_up / rowsum_u · Γ_vp / colsum_p`.
fn dense_latent(gamma: &Tensor) -> Dense {
    let (n, p) = gamma.shape();
    let row: Vec<f64> = (0..n).map(|u| gamma.row(u).iter().sum()).collect();
    let col: Vec<f64> = (0..p).map(|j| (0..n).map(|u| gamma.get(u, j)).sum()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for u in 0..n {
        for v in 0..n {
            for j in 0..p {
                if row[u] > 0.0 && col[j] > 0.0 {
                    out[u][v] += gamma.get(u, j) / row[u] * gamma.get(v, j) / col[j];
                }
            }
        }
    }
    out
}

fn dense_forward(x: &Dense, a: &Dense, latent: &Dense, params: &GnnParams) -> (Dense, Dense) {
    let mut h = x.clone();
    let mut hidden = Vec::new();
    for (l, w) in params.layers.iter().enumerate() {
        let hw = dmm(&h, &dense(w));
        let obs = dmm(a, &hw);
        let lat = dmm(latent, &hw);
        let mixed: Dense = obs
            .iter()
            .zip(&lat)
            .map(|(o, c)| o.iter().zip(c).map(|(o, c)| params.lambda * o + (1.0 - params.lambda) * c).collect())
            .collect();
        if l + 1 == params.layers.len() {
            return (hidden, mixed);
        }
        h = mixed.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
        hidden = h.clone();
    }
    unreachable!()
}

#[test]
fn two_step_mp_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gamma = random_gamma(6, 2, &mut rng);
    let z = Tensor::from_vec(6, 3, (0..18).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let got = two_step_mp(&z, &gamma).unwrap();
    assert!(max_diff(&dense(&got), &dmm(&dense_latent(&gamma), &dense(&z))) < 1e-12);
}

#[test]
fn eight_node_forward_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (g, edges) = random_graph(8, 5, 3, 0.35, &mut rng);
    let mut params = GnnParams::init(5, 4, 3, 2, 0.5, EncoderMode::GcnLayer, &mut rng).unwrap();
    params.lambda = 0.5;
    let gamma = random_gamma(8, 3, &mut rng);
    let (hidden, logits) = gnn_forward(&g, Some(&gamma), &params).unwrap();
    let (dh, dl) = dense_forward(
        &dense(g.features()),
        &dense_norm_adjacency(8, &edges),
        &dense_latent(&gamma),
        &params,
    );
    assert!(max_diff(&dense(&hidden), &dh) < 1e-10);
    assert!(max_diff(&dense(&logits), &dl) < 1e-10);
}

#[test]
fn supervised_loss_matches_dense_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (g, edges) = random_graph(8, 4, 2, 0.4, &mut rng);
    let params = GnnParams::init(4, 3, 2, 3, 0.3, EncoderMode::GcnLayer, &mut rng).unwrap();
    let gamma = random_gamma(8, 3, &mut rng);
    let (_, logits) = dense_forward(
        &dense(g.features()),
        &dense_norm_adjacency(8, &edges),
        &dense_latent(&gamma),
        &params,
    );
    let train = g.masks().train_indices();
    let expected: f64 = train
        .iter()
        .map(|&i| {
            let row = &logits[i];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[g.labels()[i]]
        })
        .sum::<f64>()
        / train.len() as f64;
    let got = loss_supervised(&g, Some(&gamma), &params).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for (old, &new) in perm.iter().enumerate() {
        out.row_mut(new).copy_from_slice(t.row(old));
    }
    out
}

#[test]
fn forward_is_permutation_equivariant() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = 10;
        let (g, _) = random_graph(n, 4, 3, 0.3, &mut rng);
        let params = GnnParams::init(4, 5, 3, 2, 0.6, EncoderMode::GcnLayer, &mut rng).unwrap();
        let gamma = random_gamma(n, 3, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pg = g.permute_nodes(&perm).unwrap();
        let (h, y) = gnn_forward(&g, Some(&gamma), &params).unwrap();
        let (ph, py) = gnn_forward(&pg, Some(&permute_rows(&gamma, &perm)), &params).unwrap();
        assert!(max_diff(&dense(&permute_rows(&h, &perm)), &dense(&ph)) < 1e-10);
        assert!(max_diff(&dense(&permute_rows(&y, &perm)), &dense(&py)) < 1e-10);
        let h0 = homophily_ratio(&g, None).unwrap();
        let h1 = homophily_ratio(&pg, None).unwrap();
        assert!((h0 - h1).abs() < 1e-12);
    }
}

#[test]
fn gamma_matches_scalar_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z = Tensor::from_vec(7, 4, (0..28).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
    let mut learner = LearnerParams::init(3, 4, 0.2, SimilarityMode::WeightedCosine, &mut rng).unwrap();
    learner.w2 = Tensor::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let pivots = [1, 4, 6];
    let gamma = compute_gamma(&z, &pivots, &learner).unwrap();
    for u in 0..7 {
        for (j, &p) in pivots.iter().enumerate() {
            let mut s = 0.0;
            for h in 0..3 {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for i in 0..4 {
                    let a = z.get(u, i) * learner.w1.get(h, i);
                    let b = z.get(p, i) * learner.w2.get(h, i);
                    dot += a * b;
                    na += a * a;
                    nb += b * b;
                }
                s += dot / (na.sqrt() * nb.sqrt());
            }
            s /= 3.0;
            let expected = if s >= 0.2 { s } else { 0.0 };
            assert!((gamma.get(u, j) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn tape_two_step_matches_plain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gamma = random_gamma(9, 4, &mut rng);
    let z = Tensor::from_vec(9, 2, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let tape = Tape::new();
    let zv = tape.constant(z.clone());
    let gv = tape.constant(gamma.clone());
    let out = pivotgsl::gnn::two_step_mp_on_tape(&tape, zv, gv).unwrap();
    let on_tape = tape.value(out).clone();
    assert!(max_diff(&dense(&on_tape), &dense(&two_step_mp(&z, &gamma).unwrap())) < 1e-14);
}
