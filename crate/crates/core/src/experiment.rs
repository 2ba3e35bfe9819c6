//! Multi-seed experiment protocols shared by the command-line driver, the
//! Python bindings and the acceptance harness: transfer and baseline runs,
//! edge-deletion attacks, structure diagnostics and ablations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{delete_edges, homophily_ratio, neighborhood_variance, Graph, Structure};
use crate::learner::LearnerParams;
use crate::train::{train_sources, train_target, EpochTrace, GraphSession, TargetOutcome, TrainConfig};

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, std, n }
    }
}

/// Which model a run trains on the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    /// frozen learner supplies latent structures
    Transfer,
    /// plain GCN on the observed graph
    Gcn,
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Model::Transfer => "transfer",
            Model::Gcn => "gcn",
        })
    }
}

/// Baseline configuration: all weight on the observed graph.
pub fn baseline_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        lambda: 1.0,
        ..cfg.clone()
    }
}

/// One target run of `model`.
pub fn run_model(
    g: &Graph,
    model: Model,
    learner: Option<&LearnerParams>,
    cfg: &TrainConfig,
    trace: &mut EpochTrace,
) -> Result<TargetOutcome> {
    match model {
        Model::Transfer => {
            let learner = learner.ok_or_else(|| Error::Config("transfer needs a trained learner".into()))?;
            train_target(g, Some(learner), cfg, trace)
        }
        Model::Gcn => train_target(g, None, &baseline_config(cfg), trace),
    }
}

/// `cfg` with its seed replaced.
pub fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

/// One row of an attack table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub fraction: f64,
    pub model: Model,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_runs: usize,
}

/// Removes each fraction of edges (one deletion draw per seed) and
/// trains both models on every perturbed graph.
pub fn attack(
    g: &Graph,
    learner: &LearnerParams,
    fractions: &[f64],
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<Vec<AttackRow>> {
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("attack fraction {f} outside [0, 1]")));
        }
    }
    let mut rows = Vec::with_capacity(fractions.len() * 2);
    for &fraction in fractions {
        let mut accs = [Vec::new(), Vec::new()];
        for &seed in seeds {
            let attacked = if fraction > 0.0 {
                delete_edges(g, fraction, seed)?
            } else {
                g.clone()
            };
            let run_cfg = with_seed(cfg, seed);
            for (i, model) in [Model::Transfer, Model::Gcn].into_iter().enumerate() {
                let out = run_model(&attacked, model, Some(learner), &run_cfg, &mut EpochTrace::default())?;
                accs[i].push(out.test_acc);
            }
        }
        for (i, model) in [Model::Transfer, Model::Gcn].into_iter().enumerate() {
            let s = Summary::of(&accs[i]);
            rows.push(AttackRow {
                fraction,
                model,
                mean_acc: s.mean,
                std_acc: s.std,
                n_runs: s.n,
            });
        }
    }
    Ok(rows)
}

/// Latent against input homophily at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub epoch: usize,
    pub latent_homophily: f64,
    pub input_homophily: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Diagnosis {
    /// every `every` epochs, starting from the untrained model at epoch 0
    pub rows: Vec<DiagnosticRow>,
    pub variance_input: f64,
    /// over `Γ` at the final epoch
    pub variance_learned: f64,
    pub final_latent_homophily: f64,
    pub input_homophily: f64,
    pub test_acc: f64,
}

/// Trains the transfer model on `g`, recording the homophily of the latent
/// structure every `every` epochs and the neighbourhood variance of the
/// input and final learned structures.
pub fn diagnose(g: &Graph, learner: &LearnerParams, cfg: &TrainConfig, every: usize) -> Result<Diagnosis> {
    if every == 0 {
        return Err(Error::Config("diagnostic interval must be positive".into()));
    }
    if cfg.lambda >= 1.0 {
        return Err(Error::Config("diagnose needs lambda < 1 so a latent structure exists".into()));
    }
    let input_homophily = homophily_ratio(g, None)?;
    let variance_input = neighborhood_variance(g, Structure::Adjacency(g.adjacency()))?;

    // same streams as the run below, so this is its epoch-0 state
    let session = GraphSession::new(g, cfg, true)?;
    let initial = session.evaluate(Some(learner), cfg)?;
    let gamma0 = initial.gamma.ok_or_else(|| Error::Domain("no latent structure at epoch 0".into()))?;
    let mut rows = vec![DiagnosticRow {
        epoch: 0,
        latent_homophily: homophily_ratio(g, Some(Structure::PivotFactor(&gamma0)))?,
        input_homophily,
    }];

    let mut trace = EpochTrace::default();
    let out = train_target(g, Some(learner), cfg, &mut trace)?;
    for r in &trace.rows {
        if r.epoch % every == 0 {
            rows.push(DiagnosticRow {
                epoch: r.epoch,
                latent_homophily: r.homophily,
                input_homophily,
            });
        }
    }
    let last = trace.rows.last().expect("at least one epoch");
    if rows.last().map(|r| r.epoch) != Some(last.epoch) {
        rows.push(DiagnosticRow {
            epoch: last.epoch,
            latent_homophily: last.homophily,
            input_homophily,
        });
    }
    let final_gamma = final_gamma(g, learner, cfg, &out)?;
    let variance_learned = neighborhood_variance(g, Structure::PivotFactor(&final_gamma))?;
    Ok(Diagnosis {
        final_latent_homophily: last.homophily,
        rows,
        variance_input,
        variance_learned,
        input_homophily,
        test_acc: out.test_acc,
    })
}

fn final_gamma(g: &Graph, learner: &LearnerParams, cfg: &TrainConfig, out: &TargetOutcome) -> Result<crate::Tensor> {
    match &out.gamma {
        Some(gm) => Ok(gm.clone()),
        None => {
            let eval = crate::train::evaluate_model(g, &out.gnn, Some(learner), &out.pivots, cfg)?;
            eval.gamma.ok_or_else(|| Error::Domain("no latent structure".into()))
        }
    }
}

/// Model variants removing one ingredient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// one-step structure prediction (`max_iters = 1`)
    NoIter,
    /// no structure prior (`alpha = rho = 0`)
    NoReg,
}

impl Ablation {
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::NoIter => c.max_iters = 1,
            Ablation::NoReg => {
                c.alpha = 0.0;
                c.rho = 0.0;
            }
        }
        c
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-iter" => Ok(Ablation::NoIter),
            "no-reg" => Ok(Ablation::NoReg),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::NoIter => "no-iter",
            Ablation::NoReg => "no-reg",
        })
    }
}

/// Learner training followed by transfer, both under `cfg`.
pub fn train_and_transfer(
    sources: &[&Graph],
    target: &Graph,
    cfg: &TrainConfig,
    source_trace: &mut EpochTrace,
    target_trace: &mut EpochTrace,
) -> Result<(LearnerParams, TargetOutcome)> {
    let src = train_sources(sources, cfg, source_trace)?;
    let out = train_target(target, Some(&src.learner), cfg, target_trace)?;
    Ok((src.learner, out))
}
