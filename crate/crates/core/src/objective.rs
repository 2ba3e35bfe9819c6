//! The three loss terms: supervised cross-entropy through the expected
//! structure, the smoothness/sparsity prior reward with its score-function
//! gradient, and the negative entropy of the structure distribution.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, PROB_EPS};
use crate::error::{Error, Result};
use crate::gnn::{gnn_forward, GnnParams};
use crate::graph::Graph;
use crate::learner::pivot_pivot;
use crate::tensor::Tensor;

/// Baseline subtracted from each sample's reward in the score-function
/// estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Mean of all `K` rewards, the sample's own included. Biased by a
    /// factor `(K - 1) / K`.
    Mean,
    /// Mean of the other `K - 1` rewards. Unbiased.
    #[default]
    LeaveOneOut,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Baseline::Mean),
            "leave-one-out" => Ok(Baseline::LeaveOneOut),
            other => Err(Error::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Per-sample weights `c_k` such that the estimator is
/// `-(1/K) Σ_k c_k ∇ log π(B_k)`.
pub fn centered_rewards(rewards: &[f64], baseline: Baseline) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::Config(format!("score-function baseline needs K >= 2 samples, got {k}")));
    }
    let total: f64 = rewards.iter().sum();
    Ok(match baseline {
        Baseline::Mean => {
            let mean = total / k as f64;
            rewards.iter().map(|r| r - mean).collect()
        }
        Baseline::LeaveOneOut => rewards
            .iter()
            .map(|r| r - (total - r) / (k - 1) as f64)
            .collect(),
    })
}

/// Mean cross-entropy over `rows` given logits recorded on a tape.
pub fn cross_entropy_on_tape(tape: &Tape<'_>, logits: Var, labels: &[usize], rows: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    tape.nll(logp, labels, rows)
}

/// `L_s`: cross-entropy over the training nodes of an evaluation-mode
/// forward pass that propagates over `Γ` itself.
pub fn loss_supervised(g: &Graph, gamma: Option<&Tensor>, params: &GnnParams) -> Result<f64> {
    let train = g.masks().train_indices();
    if train.is_empty() {
        return Err(Error::Domain("empty training mask".into()));
    }
    let (_, logits) = gnn_forward(g, gamma, params)?;
    let tape = Tape::new();
    let y = tape.constant(logits);
    let loss = cross_entropy_on_tape(&tape, y, g.labels(), &train)?;
    let v = tape.value(loss).item();
    Ok(v)
}

/// Per-graph constants for the prior reward: squared norms and Gram matrix
/// of the pivot feature rows.
#[derive(Clone, Debug)]
pub struct RewardContext {
    sq_norms: Vec<f64>,
    gram: Tensor,
}

impl RewardContext {
    pub fn new(pivot_features: &Tensor) -> Result<Self> {
        let gram = pivot_features.matmul_t(pivot_features)?;
        let sq_norms = (0..gram.rows()).map(|p| gram.get(p, p)).collect();
        Ok(RewardContext { sq_norms, gram })
    }

    pub fn n_pivots(&self) -> usize {
        self.sq_norms.len()
    }

    /// `Σ_{p,q} Ê_pq ‖x_p - x_q‖²` and `‖Ê‖²_F`.
    pub fn terms(&self, e_hat: &Tensor) -> Result<(f64, f64)> {
        let p = self.n_pivots();
        if e_hat.shape() != (p, p) {
            return Err(Error::Shape(format!(
                "Ê is {}x{} but there are {p} pivots",
                e_hat.rows(),
                e_hat.cols()
            )));
        }
        let mut smooth = 0.0;
        let mut frob = 0.0;
        for a in 0..p {
            for (b, &e) in e_hat.row(a).iter().enumerate() {
                if e != 0.0 {
                    let dist = (self.sq_norms[a] + self.sq_norms[b] - 2.0 * self.gram.get(a, b)).max(0.0);
                    smooth += e * dist;
                    frob += e * e;
                }
            }
        }
        Ok((smooth, frob))
    }

    pub fn reward(&self, e_hat: &Tensor, alpha: f64, rho: f64) -> Result<f64> {
        let (smooth, frob) = self.terms(e_hat)?;
        Ok(-alpha * smooth - rho * frob)
    }
}

/// `R(Ê) = -α Σ_{p,q} Ê_pq ‖x_p - x_q‖² - ρ ‖Ê‖²_F`.
pub fn reg_reward(e_hat: &Tensor, pivot_features: &Tensor, alpha: f64, rho: f64) -> Result<f64> {
    if alpha < 0.0 || rho < 0.0 {
        return Err(Error::Config(format!("prior weights must be nonnegative, got α={alpha}, ρ={rho}")));
    }
    RewardContext::new(pivot_features)?.reward(e_hat, alpha, rho)
}

/// Reward of a sampled node-pivot structure.
pub fn sample_reward(b1: &Tensor, ctx: &RewardContext, alpha: f64, rho: f64) -> Result<f64> {
    ctx.reward(&pivot_pivot(b1), alpha, rho)
}

/// Records the surrogate `-(1/K) Σ_k c_k log π(B_k)` whose gradient is
/// the score-function estimate of `∇(-E[R])`. Rewards are plain numbers,
/// so nothing flows through them.
pub fn grad_regularization(
    tape: &Tape<'_>,
    gamma: Var,
    samples: &[Tensor],
    rewards: &[f64],
    baseline: Baseline,
) -> Result<Var> {
    if samples.len() != rewards.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} rewards",
            samples.len(),
            rewards.len()
        )));
    }
    let weights = centered_rewards(rewards, baseline)?;
    let k = samples.len() as f64;
    let mut acc: Option<Var> = None;
    for (b, c) in samples.iter().zip(weights) {
        let lp = tape.bernoulli_log_prob(gamma, b)?;
        let term = tape.scale(lp, -c / k)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least two samples"))
}

/// The same estimator evaluated directly as a gradient w.r.t. `Γ`.
pub fn reinforce_gamma_gradient(gamma: &Tensor, samples: &[Tensor], rewards: &[f64], baseline: Baseline) -> Result<Tensor> {
    let weights = centered_rewards(rewards, baseline)?;
    let k = samples.len() as f64;
    let mut out = Tensor::zeros(gamma.rows(), gamma.cols());
    for (b, c) in samples.iter().zip(weights) {
        gamma.check_same_shape(b, "reinforce_gamma_gradient")?;
        for ((o, &p), &bb) in out.as_mut_slice().iter_mut().zip(gamma.as_slice()).zip(b.as_slice()) {
            if p > PROB_EPS && p < 1.0 - PROB_EPS {
                let score = if bb != 0.0 { 1.0 / p } else { -1.0 / (1.0 - p) };
                *o -= c * score / k;
            }
        }
    }
    Ok(out)
}

/// `L_e = (1/NP) Σ α log α + (1 - α) log(1 - α)` with clamped `α`.
pub fn loss_entropy(gamma: &Tensor) -> f64 {
    let tape = Tape::new();
    let g = tape.constant(gamma.clone());
    let l = tape
        .bernoulli_neg_entropy(g)
        .expect("clamped entropy of a finite matrix is finite");
    let v = tape.value(l).item();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert!((loss_entropy(&Tensor::filled(3, 4, 0.5)) + std::f64::consts::LN_2).abs() < 1e-15);
        let binary = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(loss_entropy(&binary).abs() < 2e-5);
        let oracle = 0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln();
        assert!((loss_entropy(&Tensor::filled(2, 2, 0.9)) - oracle).abs() < 1e-15);
        assert!((oracle + 0.325_083).abs() < 1e-6);
    }

    #[test]
    fn reward_examples() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, -1.0]]).unwrap();
        assert_eq!(reg_reward(&Tensor::zeros(3, 3), &x, 1.0, 1.0).unwrap(), 0.0);

        let same = Tensor::from_rows(&vec![vec![0.5, 0.5]; 3]).unwrap();
        let e = Tensor::from_rows(&[vec![2.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap();
        assert_eq!(reg_reward(&e, &same, 0.7, 0.1).unwrap(), -0.1 * 16.0);

        // ‖x0-x1‖² = 1, ‖x0-x2‖² = 8, ‖x1-x2‖² = 5
        let e = Tensor::from_rows(&[vec![2.0, 1.0, 2.0], vec![1.0, 1.0, 0.0], vec![2.0, 0.0, 3.0]]).unwrap();
        let smooth = 2.0 * (1.0 * 1.0 + 2.0 * 8.0 + 0.0 * 5.0);
        let frob = 4.0 + 1.0 + 4.0 + 1.0 + 1.0 + 0.0 + 4.0 + 0.0 + 9.0;
        let r = reg_reward(&e, &x, 0.5, 0.25).unwrap();
        assert!((r - (-0.5 * smooth - 0.25 * frob)).abs() < 1e-12);
    }

    #[test]
    fn centered_reward_identities() {
        assert!(centered_rewards(&[1.0], Baseline::Mean).is_err());
        for b in [Baseline::Mean, Baseline::LeaveOneOut] {
            assert!(centered_rewards(&[3.0, 3.0, 3.0], b).unwrap().iter().all(|&c| c == 0.0));
        }
        assert_eq!(centered_rewards(&[2.0, -2.0], Baseline::Mean).unwrap(), vec![2.0, -2.0]);
        assert_eq!(centered_rewards(&[2.0, -2.0], Baseline::LeaveOneOut).unwrap(), vec![4.0, -4.0]);
        // leave-one-out equals K/(K-1) times the mean-centred weights
        let r = [1.0, 4.0, -2.0, 0.5];
        let m = centered_rewards(&r, Baseline::Mean).unwrap();
        let l = centered_rewards(&r, Baseline::LeaveOneOut).unwrap();
        for (a, b) in m.iter().zip(&l) {
            assert!((a * 4.0 / 3.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_matches_closed_form() {
        let gamma = Tensor::from_rows(&[vec![0.3, 0.6], vec![0.8, 0.1]]).unwrap();
        let s1 = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let s2 = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let r = 1.7;
        let tape = Tape::new();
        let gv = tape.param(gamma.clone());
        let loss = grad_regularization(&tape, gv, &[s1.clone(), s2.clone()], &[r, -r], Baseline::Mean).unwrap();
        let grads = tape.backward(loss).unwrap();
        let got = grads.get(gv).unwrap();
        let closed = reinforce_gamma_gradient(&gamma, &[s1.clone(), s2.clone()], &[r, -r], Baseline::Mean).unwrap();
        assert!(got.max_abs_diff(&closed) < 1e-12);
        // -½ [∇log π₁ - ∇log π₂] r
        let score = |b: &Tensor| b.zip_map(&gamma, |bb, p| if bb != 0.0 { 1.0 / p } else { -1.0 / (1.0 - p) }).unwrap();
        let expected = score(&s1).sub(&score(&s2)).unwrap().scale(-0.5 * r);
        assert!(got.max_abs_diff(&expected) < 1e-12);
        // equal rewards cancel
        let tape = Tape::new();
        let gv = tape.param(gamma.clone());
        let loss = grad_regularization(&tape, gv, &[s1, s2], &[0.4, 0.4], Baseline::LeaveOneOut).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(gv).unwrap().max_abs() == 0.0);
    }
}
