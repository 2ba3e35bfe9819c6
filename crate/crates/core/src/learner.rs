//! The shared structure learner: node-pivot affinities, Bernoulli
//! structure sampling and its log-probability.
//!
//! With `P` pivot nodes the latent `N x N` graph is factorised as
//! `B₁ B₁ᵀ` where `B₁ ~ Bernoulli(Γ)` is an `N x P` node-pivot bipartite
//! graph, so everything here is `O(NP)`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, MIN_NORM, PROB_EPS};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// How node-pivot affinities are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMode {
    /// Multi-head cosine over learnable elementwise scalings.
    #[default]
    WeightedCosine,
    /// `sigmoid(z_u · z_p)`.
    DotProduct,
    /// 1 for the `k` most cosine-similar pivots of each node, else 0.
    Knn,
    /// Plain cosine similarity.
    Cosine,
}

impl SimilarityMode {
    pub fn is_parametric(self) -> bool {
        matches!(self, SimilarityMode::WeightedCosine)
    }
}

impl std::str::FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted-cosine" => Ok(SimilarityMode::WeightedCosine),
            "dot-product" => Ok(SimilarityMode::DotProduct),
            "knn" => Ok(SimilarityMode::Knn),
            "cosine" => Ok(SimilarityMode::Cosine),
            other => Err(Error::Config(format!("unknown similarity mode {other:?}"))),
        }
    }
}

fn default_knn_k() -> usize {
    10
}

/// Shared learner parameters: `H` pairs of weight vectors of length `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerParams {
    /// `H x d`, applied to the node side
    pub w1: Tensor,
    /// `H x d`, applied to the pivot side
    pub w2: Tensor,
    pub threshold: f64,
    pub mode: SimilarityMode,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
}

impl LearnerParams {
    /// Glorot-initialised weights for `heads` heads over `dim`-dimensional embeddings.
    /// Glorot weights with `w2 = w1`, so every head starts as a genuine
    /// similarity (`Σ w_i² z_ui z_vi ≥ 0` on ReLU embeddings) rather than a
    /// random bilinear form; the two sides are free to drift apart.
    pub fn init<R: Rng + ?Sized>(heads: usize, dim: usize, threshold: f64, mode: SimilarityMode, rng: &mut R) -> Result<Self> {
        let w1 = Tensor::glorot(heads, dim, rng);
        let params = LearnerParams {
            w2: w1.clone(),
            w1,
            threshold,
            mode,
            knn_k: default_knn_k(),
        };
        params.validate()?;
        Ok(params)
    }

    /// All-ones weights; with `mode = WeightedCosine` this is plain cosine.
    pub fn uniform(heads: usize, dim: usize, threshold: f64, mode: SimilarityMode) -> Result<Self> {
        let params = LearnerParams {
            w1: Tensor::ones(heads, dim),
            w2: Tensor::ones(heads, dim),
            threshold,
            mode,
            knn_k: default_knn_k(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn heads(&self) -> usize {
        self.w1.rows()
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w1.rows() == 0 {
            return Err(Error::Config("learner needs at least one head".into()));
        }
        if self.w1.shape() != self.w2.shape() {
            return Err(Error::Config(format!(
                "head weight shapes differ: {:?} vs {:?}",
                self.w1.shape(),
                self.w2.shape()
            )));
        }
        if !self.w1.is_finite() || !self.w2.is_finite() {
            return Err(Error::Config("learner weights must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1)", self.threshold)));
        }
        if self.mode == SimilarityMode::Knn && self.knn_k == 0 {
            return Err(Error::Config("knn_k must be positive".into()));
        }
        Ok(())
    }

    /// Flat parameter vector (`w1` then `w2`), used for equality checks.
    pub fn flat(&self) -> Vec<f64> {
        self.w1.as_slice().iter().chain(self.w2.as_slice()).copied().collect()
    }
}

/// Truncation gate `δ`: values below the threshold (and all non-positive
/// values) become 0.
#[inline]
pub fn truncate(x: f64, threshold: f64) -> f64 {
    if x >= threshold && x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Pivot set, node-pivot affinities and sampled bipartite structures.
#[derive(Clone, Debug)]
pub struct PivotState {
    pub pivot_indices: Vec<usize>,
    /// `N x P`, entries in `[0, 1]`
    pub gamma: Tensor,
    /// `K` binary `N x P` samples of `B₁`
    pub samples: Vec<Tensor>,
}

/// `P` distinct node ids drawn uniformly without replacement, sorted.
pub fn select_pivots(n_nodes: usize, n_pivots: usize, seed: u64) -> Result<Vec<usize>> {
    if n_pivots == 0 || n_pivots >= n_nodes {
        return Err(Error::Config(format!(
            "need 1 <= pivots < nodes, got {n_pivots} pivots for {n_nodes} nodes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n_nodes, n_pivots).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(Error::Domain(format!(
            "cosine similarity of vectors with norms {na:e} and {nb:e}"
        )));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Affinity between one node embedding and one pivot embedding.
///
/// For `Knn` this returns the untruncated cosine score used for ranking;
/// the top-k selection only exists at matrix level in [`compute_gamma`].
pub fn edge_prob(z_u: &[f64], z_v: &[f64], params: &LearnerParams) -> Result<f64> {
    if z_u.len() != z_v.len() {
        return Err(Error::Shape(format!("embeddings of length {} and {}", z_u.len(), z_v.len())));
    }
    match params.mode {
        SimilarityMode::WeightedCosine => {
            if params.dim() != z_u.len() {
                return Err(Error::Shape(format!(
                    "learner dim {} but embeddings have length {}",
                    params.dim(),
                    z_u.len()
                )));
            }
            let h = params.heads();
            let mut acc = 0.0;
            for k in 0..h {
                let a: Vec<f64> = z_u.iter().zip(params.w1.row(k)).map(|(x, w)| x * w).collect();
                let b: Vec<f64> = z_v.iter().zip(params.w2.row(k)).map(|(x, w)| x * w).collect();
                acc += cosine(&a, &b)?;
            }
            Ok(truncate(acc / h as f64, params.threshold))
        }
        SimilarityMode::Cosine | SimilarityMode::Knn => Ok(truncate(cosine(z_u, z_v)?, params.threshold)),
        SimilarityMode::DotProduct => {
            let s = 1.0 / (1.0 + (-dot(z_u, z_v)).exp());
            Ok(truncate(s, params.threshold))
        }
    }
}

/// `Γ[u][p] = edge_prob(z_u, z_{pivot_p})` for every node and pivot.
pub fn compute_gamma(z: &Tensor, pivots: &[usize], params: &LearnerParams) -> Result<Tensor> {
    let tape = Tape::new();
    let zv = tape.constant(z.clone());
    let gamma = gamma_on_tape(&tape, zv, pivots, params, None, true)?;
    let out = tape.value(gamma).clone();
    Ok(out)
}

/// Records `Γ` on a tape. `weights` are the learner's `(w1, w2)` leaves;
/// when `None` (or for non-parametric modes) the weights are constants.
///
/// With `strict = false` a node whose scaled embedding vanishes (a fully
/// dead ReLU row, say) gets no pivot affinity instead of a domain error.
pub fn gamma_on_tape(
    tape: &Tape<'_>,
    z: Var,
    pivots: &[usize],
    params: &LearnerParams,
    weights: Option<(Var, Var)>,
    strict: bool,
) -> Result<Var> {
    let (n, _) = tape.shape(z);
    if let Some(&bad) = pivots.iter().find(|&&p| p >= n) {
        return Err(Error::Structure(format!("pivot {bad} out of range for {n} nodes")));
    }
    match params.mode {
        SimilarityMode::WeightedCosine => {
            let (w1, w2) = match weights {
                Some(w) => w,
                None => (tape.constant(params.w1.clone()), tape.constant(params.w2.clone())),
            };
            let zp = tape.gather_rows(z, pivots)?;
            if strict {
                tape.multi_head_cosine(z, zp, w1, w2, params.threshold)
            } else {
                tape.multi_head_cosine_lenient(z, zp, w1, w2, params.threshold)
            }
        }
        mode => {
            let value = {
                let zt = tape.value(z);
                nonparametric_gamma(&zt, pivots, params, mode, strict)?
            };
            Ok(tape.constant(value))
        }
    }
}

fn nonparametric_gamma(
    z: &Tensor,
    pivots: &[usize],
    params: &LearnerParams,
    mode: SimilarityMode,
    strict: bool,
) -> Result<Tensor> {
    let n = z.rows();
    let p = pivots.len();
    let mut gamma = Tensor::zeros(n, p);
    for u in 0..n {
        for (j, &piv) in pivots.iter().enumerate() {
            let v = match edge_prob(z.row(u), z.row(piv), params) {
                Err(Error::Domain(_)) if !strict => 0.0,
                other => other?,
            };
            gamma.set(u, j, v);
        }
    }
    if mode == SimilarityMode::Knn {
        let k = params.knn_k.min(p);
        for u in 0..n {
            let row = gamma.row_mut(u);
            let mut order: Vec<usize> = (0..p).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut keep = vec![false; p];
            for &j in &order[..k] {
                keep[j] = row[j] > 0.0;
            }
            for (v, k) in row.iter_mut().zip(keep) {
                *v = if k { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(gamma)
}

/// `K` independent draws of `B₁` with `B₁[u][p] ~ Bernoulli(Γ[u][p])`.
pub fn sample_structures(gamma: &Tensor, k: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_structures_with(gamma, k, &mut rng)
}

pub fn sample_structures_with<R: Rng + ?Sized>(gamma: &Tensor, k: usize, rng: &mut R) -> Vec<Tensor> {
    (0..k)
        .map(|_| {
            let data = gamma
                .as_slice()
                .iter()
                .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                .collect();
            Tensor::from_vec(gamma.rows(), gamma.cols(), data).expect("same shape as Γ")
        })
        .collect()
}

/// `log π(B₁) = Σ B₁ log Γ + (1 - B₁) log(1 - Γ)` with `Γ` clamped to `[ε, 1 - ε]`.
pub fn log_prob(b1: &Tensor, gamma: &Tensor) -> Result<f64> {
    gamma.check_same_shape(b1, "log_prob")?;
    Ok(gamma
        .as_slice()
        .iter()
        .zip(b1.as_slice())
        .map(|(&p, &b)| {
            let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if b != 0.0 {
                c.ln()
            } else {
                (1.0 - c).ln()
            }
        })
        .sum())
}

/// Pivot-pivot co-membership counts `Ê = B₁ᵀ B₁` (`P x P`).
pub fn pivot_pivot(b1: &Tensor) -> Tensor {
    b1.t_matmul(b1).expect("B₁ᵀ B₁ is always conformable")
}
