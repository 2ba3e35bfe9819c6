//! Finite-difference suites over every tape primitive and the three
//! training losses, on small seeded random fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::gradcheck::{check_gradients, check_gradients_multi, GradCheckReport};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::gnn::{encode_on_tape, forward_on_tape, EncoderMode, GnnVars};
use crate::graph::{Graph, Masks};
use crate::learner::{gamma_on_tape, select_pivots, LearnerParams, SimilarityMode};
use crate::objective::cross_entropy_on_tape;
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-4;

/// Outcome of one named suite over all fixtures.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub fixtures: usize,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Random sizes inside `N ≤ 12, P ≤ 4, d ≤ 5, H ≤ 3`.
#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    p: usize,
    d: usize,
    h: usize,
    c: usize,
    feat: usize,
}

fn dims(rng: &mut ChaCha8Rng) -> Dims {
    let n = rng.random_range(5..=12);
    Dims {
        n,
        p: rng.random_range(2..=4),
        d: rng.random_range(2..=5),
        h: rng.random_range(1..=3),
        c: rng.random_range(2..=3),
        feat: rng.random_range(2..=5),
    }
}

/// Entries bounded away from zero so `relu` kinks sit far from every
/// finite-difference probe.
fn away_from_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches")
}

fn positive(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(rows, cols, 0.1, 1.0, rng)
}

fn random_sparse(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SparseMatrix {
    let mut t = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if rng.random::<f64>() < 0.4 {
                t.push((r, c, rng.random_range(-1.0..1.0)));
            }
        }
    }
    SparseMatrix::from_triplets(rows, cols, &t).expect("distinct in-range triplets")
}

fn random_graph(dm: Dims, rng: &mut ChaCha8Rng) -> Result<Graph> {
    let mut edges = Vec::new();
    for u in 0..dm.n {
        for v in u + 1..dm.n {
            if rng.random::<f64>() < 0.3 {
                edges.push((u, v));
            }
        }
    }
    let features = positive(dm.n, dm.feat, rng);
    let labels: Vec<usize> = (0..dm.n).map(|i| i % dm.c).collect();
    let mut masks = Masks::empty(dm.n);
    for i in 0..dm.n {
        masks.train[i] = i % 2 == 0;
        masks.valid[i] = i % 2 == 1;
    }
    Graph::from_edges(dm.n, &edges, features, labels, dm.c, masks)
}

/// Weighted sum with fixed random coefficients, so every output entry
/// contributes a distinct amount to the scalar being differentiated.
fn probe<'a>(tape: &Tape<'a>, v: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::uniform(r, c, -1.0, 1.0, &mut rng);
    let m = tape.mul_const(v, w)?;
    tape.sum(m)
}

type Suite = fn(u64) -> Result<GradCheckReport>;

fn suite_list() -> Vec<(&'static str, Suite)> {
    vec![
        ("matmul", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let a = Tensor::uniform(dm.n, dm.d, -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(dm.d, dm.p, -1.0, 1.0, &mut rng);
            check_gradients_multi(|t, v| probe(t, t.matmul(v[0], v[1])?, s), &[a, b], SUITE_EPS, SUITE_TOL)
        }),
        ("t_matmul", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let a = Tensor::uniform(dm.n, dm.p, -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(dm.n, dm.d, -1.0, 1.0, &mut rng);
            check_gradients_multi(|t, v| probe(t, t.t_matmul(v[0], v[1])?, s), &[a, b], SUITE_EPS, SUITE_TOL)
        }),
        ("spmm", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let sp = random_sparse(dm.n, dm.n, &mut rng);
            let b = Tensor::uniform(dm.n, dm.d, -1.0, 1.0, &mut rng);
            check_gradients(|t, v| probe(t, t.spmm(&sp, v)?, s), &b, SUITE_EPS, SUITE_TOL)
        }),
        ("const_matmul", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let c = Tensor::uniform(dm.n, dm.feat, -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(dm.feat, dm.d, -1.0, 1.0, &mut rng);
            check_gradients(|t, v| probe(t, t.const_matmul(&c, v)?, s), &b, SUITE_EPS, SUITE_TOL)
        }),
        ("add_scale", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let a = Tensor::uniform(dm.n, dm.d, -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(dm.n, dm.d, -1.0, 1.0, &mut rng);
            check_gradients_multi(
                |t, v| {
                    let sb = t.scale(v[1], -0.7)?;
                    probe(t, t.add(v[0], sb)?, s)
                },
                &[a, b],
                SUITE_EPS,
                SUITE_TOL,
            )
        }),
        ("mul", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let a = Tensor::uniform(dm.n, dm.d, -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(dm.n, dm.d, -1.0, 1.0, &mut rng);
            check_gradients_multi(|t, v| probe(t, t.mul(v[0], v[1])?, s), &[a, b], SUITE_EPS, SUITE_TOL)
        }),
        ("mul_row", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let a = Tensor::uniform(dm.n, dm.d, -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(1, dm.d, -1.0, 1.0, &mut rng);
            check_gradients_multi(|t, v| probe(t, t.mul_row(v[0], v[1])?, s), &[a, w], SUITE_EPS, SUITE_TOL)
        }),
        ("relu", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let a = away_from_zero(dm.n, dm.d, &mut rng);
            check_gradients(|t, v| probe(t, t.relu(v)?, s), &a, SUITE_EPS, SUITE_TOL)
        }),
        ("row_col_normalize", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let a = positive(dm.n, dm.p, &mut rng);
            check_gradients(
                |t, v| {
                    let r = probe(t, t.row_normalize(v)?, s)?;
                    let c = probe(t, t.col_normalize(v)?, s + 1)?;
                    t.add(r, c)
                },
                &a,
                SUITE_EPS,
                SUITE_TOL,
            )
        }),
        ("gather_rows", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let a = Tensor::uniform(dm.n, dm.d, -1.0, 1.0, &mut rng);
            let idx: Vec<usize> = (0..dm.p).map(|_| rng.random_range(0..dm.n)).collect();
            check_gradients(|t, v| probe(t, t.gather_rows(v, &idx)?, s), &a, SUITE_EPS, SUITE_TOL)
        }),
        ("threshold", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let a = away_from_zero(dm.n, dm.p, &mut rng);
            check_gradients(|t, v| probe(t, t.threshold(v, 0.0)?, s), &a, SUITE_EPS, SUITE_TOL)
        }),
        ("multi_head_cosine", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let left = Tensor::uniform(dm.n, dm.d, -1.0, 1.0, &mut rng);
            let right = Tensor::uniform(dm.p, dm.d, -1.0, 1.0, &mut rng);
            let w1 = Tensor::uniform(dm.h, dm.d, 0.2, 1.5, &mut rng);
            let w2 = Tensor::uniform(dm.h, dm.d, 0.2, 1.5, &mut rng);
            // τ = -1 keeps every entry, so the check covers the smooth part
            check_gradients_multi(
                |t, v| probe(t, t.multi_head_cosine(v[0], v[1], v[2], v[3], -1.0)?, s),
                &[left, right, w1, w2],
                SUITE_EPS,
                SUITE_TOL,
            )
        }),
        ("log_softmax_nll", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let a = Tensor::uniform(dm.n, dm.c, -2.0, 2.0, &mut rng);
            let labels: Vec<usize> = (0..dm.n).map(|i| i % dm.c).collect();
            let rows: Vec<usize> = (0..dm.n).step_by(2).collect();
            check_gradients(
                |t, v| {
                    let lp = t.log_softmax(v)?;
                    let nll = t.nll(lp, &labels, &rows)?;
                    let pr = probe(t, lp, s)?;
                    t.add(nll, pr)
                },
                &a,
                SUITE_EPS,
                SUITE_TOL,
            )
        }),
        ("sum_mean", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let a = Tensor::uniform(dm.n, dm.d, -1.0, 1.0, &mut rng);
            check_gradients(
                |t, v| {
                    let sq = t.mul(v, v)?;
                    let m = t.mean(sq)?;
                    let sm = t.sum(v)?;
                    t.add(m, sm)
                },
                &a,
                SUITE_EPS,
                SUITE_TOL,
            )
        }),
        ("entropy_loss", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let gamma = Tensor::uniform(dm.n, dm.p, 0.05, 0.95, &mut rng);
            check_gradients(|t, v| t.bernoulli_neg_entropy(v), &gamma, SUITE_EPS, SUITE_TOL)
        }),
        ("log_prob", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let dm = dims(&mut rng);
            let gamma = Tensor::uniform(dm.n, dm.p, 0.05, 0.95, &mut rng);
            let b = Tensor::from_vec(
                dm.n,
                dm.p,
                (0..dm.n * dm.p).map(|_| f64::from(rng.random::<bool>() as u8)).collect(),
            )?;
            check_gradients(|t, v| t.bernoulli_log_prob(v, &b), &gamma, SUITE_EPS, SUITE_TOL)
        }),
        ("log_prob_learner", |s| learner_suite(s, LearnerLoss::LogProb)),
        ("entropy_learner", |s| learner_suite(s, LearnerLoss::Entropy)),
        ("supervised_loss", supervised_suite),
    ]
}

#[derive(Clone, Copy)]
enum LearnerLoss {
    LogProb,
    Entropy,
}

/// `log π_θ(B)` and the entropy term as functions of the learner weights
/// and the embeddings.
fn learner_suite(s: u64, which: LearnerLoss) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let dm = dims(&mut rng);
    let z = positive(dm.n, dm.d, &mut rng);
    let pivots = select_pivots(dm.n, dm.p, s)?;
    let params = LearnerParams {
        w1: Tensor::uniform(dm.h, dm.d, 0.2, 1.5, &mut rng),
        w2: Tensor::uniform(dm.h, dm.d, 0.2, 1.5, &mut rng),
        threshold: 0.0,
        mode: SimilarityMode::WeightedCosine,
        knn_k: 1,
    };
    let b = Tensor::from_vec(
        dm.n,
        dm.p,
        (0..dm.n * dm.p).map(|_| f64::from(rng.random::<bool>() as u8)).collect(),
    )?;
    check_gradients_multi(
        |t, v| {
            let g = gamma_on_tape(t, v[0], &pivots, &params, Some((v[1], v[2])), true)?;
            match which {
                LearnerLoss::LogProb => t.bernoulli_log_prob(g, &b),
                LearnerLoss::Entropy => t.bernoulli_neg_entropy(g),
            }
        },
        &[z, params.w1.clone(), params.w2.clone()],
        SUITE_EPS,
        SUITE_TOL,
    )
}

/// Supervised loss through encoder, learner and both propagation branches,
/// as a function of every weight.
fn supervised_suite(s: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let dm = dims(&mut rng);
    let g = random_graph(dm, &mut rng)?;
    let pivots = select_pivots(dm.n, dm.p, s)?;
    let params = LearnerParams {
        w1: Tensor::uniform(dm.h, dm.d, 0.2, 1.5, &mut rng),
        w2: Tensor::uniform(dm.h, dm.d, 0.2, 1.5, &mut rng),
        threshold: 0.0,
        mode: SimilarityMode::WeightedCosine,
        knn_k: 1,
    };
    // nonnegative features and weights keep every embedding row nonzero
    let enc = positive(dm.feat, dm.d, &mut rng);
    let w0 = Tensor::uniform(dm.feat, dm.d, -1.0, 1.0, &mut rng);
    let w1 = Tensor::uniform(dm.d, dm.c, -1.0, 1.0, &mut rng);
    let train = g.masks().train_indices();
    let lambda = 0.4;
    let g = &g;
    check_gradients_multi(
        |t, v| {
            let vars = GnnVars {
                encoder: v[0],
                layers: vec![v[1], v[2]],
            };
            let z = encode_on_tape(t, g, vars.encoder, EncoderMode::GcnLayer)?;
            let gamma = gamma_on_tape(t, z, &pivots, &params, Some((v[3], v[4])), true)?;
            let fwd = forward_on_tape(t, g, Some(gamma), &vars, lambda, None)?;
            cross_entropy_on_tape(t, fwd.logits, g.labels(), &train)
        },
        &[enc, w0, w1, params.w1.clone(), params.w2.clone()],
        SUITE_EPS,
        SUITE_TOL,
    )
}

/// Names of every suite, in run order.
pub fn suite_names() -> Vec<&'static str> {
    suite_list().into_iter().map(|(n, _)| n).collect()
}

/// Runs every suite on `fixtures` fixtures seeded from `seed`.
pub fn run_suites(fixtures: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    suite_list()
        .into_iter()
        .enumerate()
        .map(|(i, (name, suite))| {
            let reports = (0..fixtures)
                .map(|f| suite(seed.wrapping_mul(1_000_003).wrapping_add((i * 10_007 + f) as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok(SuiteResult {
                name,
                fixtures,
                report: GradCheckReport::combine(reports, SUITE_TOL),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_a_few_fixtures() {
        for r in run_suites(20, 11).unwrap() {
            assert!(r.passed(), "{}: {:?}", r.name, r.report);
        }
    }
}
