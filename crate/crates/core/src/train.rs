//! Training loops: iterative structure/representation refinement within
//! an epoch, episodic training of the shared learner over source graphs,
//! and GNN training on a target graph with the learner frozen.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::{encode, encode_on_tape, forward_on_tape, gnn_forward, Dropout, EncoderMode, GnnParams};
use crate::graph::{homophily_from_labels, Graph, Structure};
use crate::learner::{gamma_on_tape, pivot_pivot, sample_structures_with, select_pivots, LearnerParams, SimilarityMode};
use crate::objective::{cross_entropy_on_tape, grad_regularization, Baseline, RewardContext};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

/// Every hyperparameter of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// weight on the observed graph; `1 - lambda` goes to the latent structure
    pub lambda: f64,
    /// smoothness weight of the structure prior
    pub alpha: f64,
    /// sparsity weight of the structure prior
    pub rho: f64,
    pub pivots: usize,
    pub heads: usize,
    pub threshold: f64,
    /// structures sampled per iteration for the score-function estimator
    pub samples_k: usize,
    /// cap on refinement iterations per epoch
    pub max_iters: usize,
    /// relative Frobenius change of `Γ` that ends refinement early
    pub conv_tol: f64,
    pub episodes: usize,
    /// epochs per source graph per episode
    pub epochs: usize,
    /// epoch cap on a target graph
    pub target_epochs: usize,
    /// early-stopping patience on a target graph
    pub patience: usize,
    pub lr: f64,
    /// overrides `lr` for the structure learner
    pub learner_lr: Option<f64>,
    /// overrides `lr` for GNN weights
    pub gnn_lr: Option<f64>,
    /// L2 penalty on the first-layer and encoder weights
    pub weight_decay: f64,
    /// dropout on hidden activations
    pub dropout: f64,
    /// dropout on input features
    pub input_dropout: f64,
    /// hidden width, which is also the learner's embedding size
    pub hidden: usize,
    pub depth: usize,
    pub seed: u64,
    pub similarity: SimilarityMode,
    pub knn_k: usize,
    pub encoder: EncoderMode,
    pub optimizer: OptimizerKind,
    pub baseline: Baseline,
    /// weight of the negative-entropy term
    pub entropy_weight: f64,
    /// let prior/entropy gradients reach node embeddings as well as the learner
    pub reg_grad_to_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.7,
            alpha: 0.1,
            rho: 0.1,
            pivots: 1000,
            heads: 4,
            threshold: 4e-5,
            samples_k: 3,
            max_iters: 10,
            conv_tol: 1e-3,
            episodes: 1,
            epochs: 50,
            target_epochs: 500,
            patience: 100,
            lr: 0.01,
            learner_lr: None,
            gnn_lr: None,
            weight_decay: 5e-4,
            dropout: 0.5,
            input_dropout: 0.5,
            hidden: 32,
            depth: 2,
            seed: 0,
            similarity: SimilarityMode::WeightedCosine,
            knn_k: 10,
            encoder: EncoderMode::GcnLayer,
            optimizer: OptimizerKind::Adam,
            baseline: Baseline::LeaveOneOut,
            entropy_weight: 1.0,
            reg_grad_to_embeddings: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.alpha < 0.0 || self.rho < 0.0 {
            return bad(format!("alpha {} and rho {} must be nonnegative", self.alpha, self.rho));
        }
        if self.pivots == 0 || self.heads == 0 || self.hidden == 0 {
            return bad("pivots, heads and hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1)", self.threshold));
        }
        if self.uses_prior() && self.samples_k < 2 {
            return bad(format!("samples_k must be at least 2, got {}", self.samples_k));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if self.conv_tol < 0.0 {
            return bad(format!("conv_tol {} is negative", self.conv_tol));
        }
        if self.episodes == 0 || self.epochs == 0 || self.target_epochs == 0 {
            return bad("episodes, epochs and target_epochs must be positive".into());
        }
        for lr in [Some(self.lr), self.learner_lr, self.gnn_lr].into_iter().flatten() {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("learning rate {lr} is invalid"));
            }
        }
        if self.weight_decay < 0.0 || self.entropy_weight < 0.0 {
            return bad("weight_decay and entropy_weight must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.input_dropout) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.similarity == SimilarityMode::Knn && self.knn_k == 0 {
            return bad("knn_k must be positive".into());
        }
        Ok(())
    }

    pub fn uses_prior(&self) -> bool {
        self.alpha > 0.0 || self.rho > 0.0
    }

    fn learner_lr(&self) -> f64 {
        self.learner_lr.unwrap_or(self.lr)
    }

    fn gnn_lr(&self) -> f64 {
        self.gnn_lr.unwrap_or(self.lr)
    }

    /// Fresh learner parameters for this configuration.
    pub fn init_learner(&self) -> Result<LearnerParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0; 32], "learner"));
        let mut p = LearnerParams::init(self.heads, self.hidden, self.threshold, self.similarity, &mut rng)?;
        p.knn_k = self.knn_k;
        p.validate()?;
        Ok(p)
    }
}

/// Seed for one named random stream of one graph.
pub fn derive_seed(seed: u64, fingerprint: &[u8; 32], stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(fingerprint);
    h.update(stream.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// One row of the per-epoch trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// refinement iterations used
    pub iter: usize,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    pub val_acc: f64,
    /// homophily of the latent structure proxy `ΓΓᵀ` (NaN without one)
    pub homophily: f64,
    pub gamma_delta: f64,
}

/// One refinement iteration inside an epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterRecord {
    pub epoch: usize,
    pub iter: usize,
    pub l_s: f64,
    pub l_r: f64,
    pub l_e: f64,
    pub gamma_delta: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EpochTrace {
    pub rows: Vec<EpochRow>,
    pub iterations: Vec<IterRecord>,
}

impl EpochTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row).map_err(csv_error)?;
        }
        out.flush().map_err(|e| Error::Checkpoint(format!("writing trace: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRow>, _>>()
            .map_err(csv_error)?;
        Ok(EpochTrace {
            rows,
            iterations: Vec::new(),
        })
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Checkpoint(format!("trace csv: {e}"))
}

/// Loss components of one training epoch, aggregated the same way as
/// the loss that was back-propagated.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub iters: usize,
    pub l_s: f64,
    pub l_r: f64,
    pub l_e: f64,
    pub gamma_delta: f64,
    pub iterations: Vec<IterRecord>,
}

/// Evaluation-mode refinement result.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub logits: Tensor,
    pub gamma: Option<Tensor>,
    pub iters: usize,
    pub gamma_delta: f64,
}

/// How an epoch treats the structure learner.
pub enum LearnerArg<'l> {
    /// plain GCN on the observed graph
    Off,
    Frozen(&'l LearnerParams),
    Train(&'l mut LearnerParams, &'l mut Optimizer),
}

impl LearnerArg<'_> {
    fn params(&self) -> Option<&LearnerParams> {
        match self {
            LearnerArg::Off => None,
            LearnerArg::Frozen(p) => Some(p),
            LearnerArg::Train(p, _) => Some(p),
        }
    }
}

/// Fraction of `rows` whose argmax logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let pred = logits.argmax_rows();
    rows.iter().filter(|&&i| pred[i] == labels[i]).count() as f64 / rows.len() as f64
}

/// Mean cross-entropy of `logits` over `rows`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], rows: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let y = tape.constant(logits.clone());
    let l = cross_entropy_on_tape(&tape, y, labels, rows)?;
    let v = tape.value(l).item();
    Ok(v)
}

/// `‖cur - prev‖_F / ‖prev‖_F`, with `0/0 = 0`.
pub fn relative_change(cur: &Tensor, prev: &Tensor) -> f64 {
    let diff = cur.sub(prev).expect("Γ keeps its shape").frobenius_norm();
    let denom = prev.frobenius_norm();
    if diff == 0.0 {
        0.0
    } else if denom == 0.0 {
        f64::INFINITY
    } else {
        diff / denom
    }
}

fn lenient_gamma(z: &Tensor, pivots: &[usize], learner: &LearnerParams) -> Result<Tensor> {
    let tape = Tape::new();
    let zv = tape.constant(z.clone());
    let g = gamma_on_tape(&tape, zv, pivots, learner, None, false)?;
    let out = tape.value(g).clone();
    Ok(out)
}

/// Training reward on one sampled structure: the prior evaluated on
/// `Ê / N` and averaged over pivot pairs, so its scale does not grow with
/// graph size.
fn training_reward(b1: &Tensor, ctx: &RewardContext, alpha: f64, rho: f64) -> Result<f64> {
    let n = b1.rows() as f64;
    let p = b1.cols() as f64;
    let e = pivot_pivot(b1).scale(1.0 / n);
    Ok(ctx.reward(&e, alpha, rho)? / (p * p))
}

fn to_diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        Error::Numerical { layer, detail } => Error::Diverged {
            epoch,
            detail: format!("layer {layer}: {detail}"),
        },
        other => other,
    }
}

/// Per-graph training state: GNN weights, their optimiser, pivots and
/// random streams.
pub struct GraphSession<'g> {
    graph: &'g Graph,
    pub gnn: GnnParams,
    opt: Optimizer,
    pivots: Vec<usize>,
    reward: Option<RewardContext>,
    dropout_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
}

impl<'g> GraphSession<'g> {
    /// `structured` draws pivots for the latent branch.
    pub fn new(graph: &'g Graph, cfg: &TrainConfig, structured: bool) -> Result<Self> {
        cfg.validate()?;
        let train = graph.masks().train_indices();
        if train.is_empty() {
            return Err(Error::Domain("empty training mask".into()));
        }
        let fp = graph.fingerprint();
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &fp, "init"));
        let gnn = GnnParams::init(
            graph.feature_dim(),
            cfg.hidden,
            graph.n_classes(),
            cfg.depth,
            cfg.lambda,
            cfg.encoder,
            &mut init_rng,
        )?;
        let pivots = if structured {
            select_pivots(graph.n_nodes(), cfg.pivots, derive_seed(cfg.seed, &fp, "pivots"))?
        } else {
            Vec::new()
        };
        let reward = if structured && cfg.uses_prior() {
            Some(RewardContext::new(&graph.features().select_rows(&pivots))?)
        } else {
            None
        };
        Ok(GraphSession {
            graph,
            gnn,
            opt: Optimizer::new(cfg.optimizer, cfg.gnn_lr(), cfg.weight_decay)?,
            pivots,
            reward,
            dropout_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &fp, "dropout")),
            sample_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &fp, "samples")),
            train,
            valid: graph.masks().valid_indices(),
            test: graph.masks().test_indices(),
        })
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    fn structured(&self, learner: Option<&LearnerParams>) -> bool {
        learner.is_some() && self.gnn.lambda < 1.0 && !self.pivots.is_empty()
    }

    /// One optimisation step: refine structure and representations up to
    /// `max_iters` times, back-propagate the aggregated loss once, update.
    pub fn train_epoch(&mut self, learner: LearnerArg<'_>, cfg: &TrainConfig) -> Result<EpochStats> {
        let g = self.graph;
        let labels = g.labels();
        let tape = Tape::new();
        let gv = self.gnn.register(&tape, true);
        let lambda = self.gnn.lambda;
        let structured = self.structured(learner.params());
        let training = matches!(learner, LearnerArg::Train(..));

        let mut iter_losses: Vec<Var> = Vec::new();
        let mut records: Vec<IterRecord> = Vec::new();
        let mut gamma_delta = f64::NAN;
        let mut lw = None;

        if !structured {
            let fwd = forward_on_tape(
                &tape,
                g,
                None,
                &gv,
                lambda,
                Some(Dropout {
                    input: cfg.input_dropout,
                    hidden: cfg.dropout,
                    rng: &mut self.dropout_rng,
                }),
            )?;
            let ls = cross_entropy_on_tape(&tape, fwd.logits, labels, &self.train)?;
            records.push(IterRecord {
                epoch: 0,
                iter: 1,
                l_s: tape.value(ls).item(),
                l_r: 0.0,
                l_e: 0.0,
                gamma_delta,
            });
            iter_losses.push(ls);
        } else {
            let params = learner.params().expect("structured implies a learner");
            if training && params.mode.is_parametric() {
                lw = Some((tape.param(params.w1.clone()), tape.param(params.w2.clone())));
            }
            let mut z = encode_on_tape(&tape, g, gv.encoder, self.gnn.encoder_mode)?;
            let mut prev: Option<Tensor> = None;
            for t in 1..=cfg.max_iters {
                let gamma = gamma_on_tape(&tape, z, &self.pivots, params, lw, false)?;
                let gval = tape.value(gamma).clone();
                if let Some(p) = &prev {
                    gamma_delta = relative_change(&gval, p);
                }
                let fwd = forward_on_tape(
                    &tape,
                    g,
                    Some(gamma),
                    &gv,
                    lambda,
                    Some(Dropout {
                        input: cfg.input_dropout,
                        hidden: cfg.dropout,
                        rng: &mut self.dropout_rng,
                    }),
                )?;
                let ls = cross_entropy_on_tape(&tape, fwd.logits, labels, &self.train)?;
                let mut lt = ls;
                let (mut le_v, mut lr_v) = (0.0, 0.0);
                let wants_reg = lw.is_some() && (cfg.entropy_weight > 0.0 || self.reward.is_some());
                if wants_reg {
                    let greg = if cfg.reg_grad_to_embeddings {
                        gamma
                    } else {
                        let zd = tape.detach(z);
                        gamma_on_tape(&tape, zd, &self.pivots, params, lw, false)?
                    };
                    if cfg.entropy_weight > 0.0 {
                        let le = tape.bernoulli_neg_entropy(greg)?;
                        le_v = tape.value(le).item();
                        let weighted = tape.scale(le, cfg.entropy_weight)?;
                        lt = tape.add(lt, weighted)?;
                    }
                    if let Some(ctx) = &self.reward {
                        let samples = sample_structures_with(&gval, cfg.samples_k, &mut self.sample_rng);
                        let rewards = samples
                            .iter()
                            .map(|b| training_reward(b, ctx, cfg.alpha, cfg.rho))
                            .collect::<Result<Vec<f64>>>()?;
                        lr_v = -rewards.iter().sum::<f64>() / rewards.len() as f64;
                        let surrogate = grad_regularization(&tape, greg, &samples, &rewards, cfg.baseline)?;
                        lt = tape.add(lt, surrogate)?;
                    }
                }
                records.push(IterRecord {
                    epoch: 0,
                    iter: t,
                    l_s: tape.value(ls).item(),
                    l_r: lr_v,
                    l_e: le_v,
                    gamma_delta: if t == 1 { f64::NAN } else { gamma_delta },
                });
                iter_losses.push(lt);
                prev = Some(gval);
                z = fwd.hidden;
                if t >= 2 && gamma_delta < cfg.conv_tol {
                    break;
                }
            }
            if records.len() == 1 {
                gamma_delta = f64::NAN;
            }
        }

        // L¹ + Σ_{i≥2} Lⁱ / (t - 1)
        let t = iter_losses.len();
        let mut total = iter_losses[0];
        if t > 1 {
            let mut rest = iter_losses[1];
            for &l in &iter_losses[2..] {
                rest = tape.add(rest, l)?;
            }
            let rest = tape.scale(rest, 1.0 / (t - 1) as f64)?;
            total = tape.add(total, rest)?;
        }
        let agg = |f: fn(&IterRecord) -> f64| -> f64 {
            let first = f(&records[0]);
            if t == 1 {
                first
            } else {
                first + records[1..].iter().map(f).sum::<f64>() / (t - 1) as f64
            }
        };
        let stats = EpochStats {
            iters: t,
            l_s: agg(|r| r.l_s),
            l_r: agg(|r| r.l_r),
            l_e: agg(|r| r.l_e),
            gamma_delta,
            iterations: records.clone(),
        };
        let total_value = tape.value(total).item();
        if !total_value.is_finite() {
            return Err(Error::NonFinite { op: "total loss" });
        }

        let mut grads = tape.backward(total)?;
        let gnn_grads: Vec<Option<Tensor>> = std::iter::once(gv.encoder)
            .chain(gv.layers.iter().copied())
            .map(|v| grads.take(v))
            .collect();
        let mut decay = vec![false; gnn_grads.len()];
        decay[0] = true;
        decay[1] = true;
        {
            let GnnParams { encoder, layers, .. } = &mut self.gnn;
            let mut slots: Vec<&mut Tensor> = std::iter::once(encoder).chain(layers.iter_mut()).collect();
            self.opt.step(&mut slots, &gnn_grads, &decay)?;
        }
        if let (LearnerArg::Train(params, opt), Some((w1, w2))) = (learner, lw) {
            let lg = vec![grads.take(w1), grads.take(w2)];
            let mut slots: Vec<&mut Tensor> = vec![&mut params.w1, &mut params.w2];
            opt.step(&mut slots, &lg, &[false, false])?;
            params.validate()?;
        }
        Ok(stats)
    }

    /// Evaluation-mode refinement (no dropout, no gradients).
    pub fn evaluate(&self, learner: Option<&LearnerParams>, cfg: &TrainConfig) -> Result<Evaluation> {
        evaluate_model(self.graph, &self.gnn, learner.filter(|_| self.structured(learner)), &self.pivots, cfg)
    }

    pub fn train_rows(&self) -> &[usize] {
        &self.train
    }

    pub fn valid_rows(&self) -> &[usize] {
        &self.valid
    }

    pub fn test_rows(&self) -> &[usize] {
        &self.test
    }
}

/// Runs the refinement loop without gradients. `learner = None` is the
/// plain GCN forward.
pub fn evaluate_model(
    g: &Graph,
    gnn: &GnnParams,
    learner: Option<&LearnerParams>,
    pivots: &[usize],
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    let Some(params) = learner.filter(|_| gnn.lambda < 1.0 && !pivots.is_empty()) else {
        let (_, logits) = gnn_forward(g, None, gnn)?;
        return Ok(Evaluation {
            logits,
            gamma: None,
            iters: 1,
            gamma_delta: f64::NAN,
        });
    };
    let mut z = encode(g, gnn)?;
    let mut prev: Option<Tensor> = None;
    let mut delta = f64::NAN;
    let mut iters = 0;
    let mut logits = None;
    for t in 1..=cfg.max_iters {
        iters = t;
        let gamma = lenient_gamma(&z, pivots, params)?;
        if let Some(p) = &prev {
            delta = relative_change(&gamma, p);
        }
        let (hidden, y) = gnn_forward(g, Some(&gamma), gnn)?;
        z = hidden;
        logits = Some(y);
        prev = Some(gamma);
        if t >= 2 && delta < cfg.conv_tol {
            break;
        }
    }
    Ok(Evaluation {
        logits: logits.expect("at least one iteration"),
        gamma: prev,
        iters,
        gamma_delta: delta,
    })
}

/// Result of training a GNN on one graph with early stopping.
#[derive(Clone, Debug)]
pub struct TargetOutcome {
    pub test_acc: f64,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// weights at the best validation epoch
    pub gnn: GnnParams,
    /// `Γ` from the best epoch's evaluation pass
    pub gamma: Option<Tensor>,
    pub pivots: Vec<usize>,
    pub wall_clock_s: f64,
}

fn trace_row(epoch: usize, stats: &EpochStats, val_acc: f64, homophily: f64) -> EpochRow {
    EpochRow {
        epoch,
        iter: stats.iters,
        l_s: stats.l_s,
        l_r: stats.l_r,
        l_e: stats.l_e,
        val_acc,
        homophily,
        gamma_delta: stats.gamma_delta,
    }
}

fn latent_homophily(g: &Graph, gamma: Option<&Tensor>) -> Result<f64> {
    match gamma {
        Some(gm) => homophily_from_labels(g.labels(), g.n_classes(), Structure::PivotFactor(gm)),
        None => Ok(f64::NAN),
    }
}

fn push_epoch(trace: &mut EpochTrace, epoch: usize, stats: &EpochStats, val_acc: f64, homophily: f64) {
    trace.rows.push(trace_row(epoch, stats, val_acc, homophily));
    trace.iterations.extend(stats.iterations.iter().cloned().map(|mut r| {
        r.epoch = epoch;
        r
    }));
}

fn fit(g: &Graph, mut learner: LearnerArg<'_>, cfg: &TrainConfig, trace: &mut EpochTrace) -> Result<TargetOutcome> {
    let start = Instant::now();
    let structured = learner.params().is_some() && cfg.lambda < 1.0;
    let mut session = GraphSession::new(g, cfg, structured)?;
    if session.valid.is_empty() {
        return Err(Error::Domain("empty validation mask".into()));
    }
    let mut best: Option<(f64, f64, usize, GnnParams, Option<Tensor>, f64)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.target_epochs {
        epochs_run = epoch;
        let arg = match &mut learner {
            LearnerArg::Off => LearnerArg::Off,
            LearnerArg::Frozen(p) => LearnerArg::Frozen(*p),
            LearnerArg::Train(p, o) => LearnerArg::Train(&mut **p, &mut **o),
        };
        let stats = session.train_epoch(arg, cfg).map_err(|e| to_diverged(epoch, e))?;
        let eval = session
            .evaluate(learner.params(), cfg)
            .map_err(|e| to_diverged(epoch, e))?;
        let val_acc = accuracy(&eval.logits, g.labels(), &session.valid);
        let val_loss = cross_entropy(&eval.logits, g.labels(), &session.valid)?;
        let homophily = latent_homophily(g, eval.gamma.as_ref())?;
        push_epoch(trace, epoch, &stats, val_acc, homophily);
        let improved = match &best {
            None => true,
            Some((acc, loss, ..)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if improved {
            let test_acc = accuracy(&eval.logits, g.labels(), &session.test);
            best = Some((val_acc, val_loss, epoch, session.gnn.clone(), eval.gamma, test_acc));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_acc, _, best_epoch, gnn, gamma, test_acc) = best.expect("at least one epoch");
    Ok(TargetOutcome {
        test_acc,
        best_val_acc,
        best_epoch,
        epochs_run,
        gnn,
        gamma,
        pivots: session.pivots.clone(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Trains a fresh GNN on `g`. With `learner = Some` the learner is frozen
/// and supplies latent structures; with `None` this is the plain GCN
/// baseline.
pub fn train_target(
    g: &Graph,
    learner: Option<&LearnerParams>,
    cfg: &TrainConfig,
    trace: &mut EpochTrace,
) -> Result<TargetOutcome> {
    if let Some(p) = learner {
        check_learner_dim(p, cfg)?;
    }
    let arg = match learner {
        Some(p) => LearnerArg::Frozen(p),
        None => LearnerArg::Off,
    };
    fit(g, arg, cfg, trace)
}

/// Trains the learner and a GNN jointly on a single graph, with the same
/// early stopping as [`train_target`].
pub fn train_joint(g: &Graph, cfg: &TrainConfig, trace: &mut EpochTrace) -> Result<(LearnerParams, TargetOutcome)> {
    let mut learner = cfg.init_learner()?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learner_lr(), 0.0)?;
    let out = fit(g, LearnerArg::Train(&mut learner, &mut opt), cfg, trace)?;
    Ok((learner, out))
}

fn check_learner_dim(p: &LearnerParams, cfg: &TrainConfig) -> Result<()> {
    if p.dim() != cfg.hidden {
        return Err(Error::Checkpoint(format!(
            "learner works on {}-dimensional embeddings but hidden = {}",
            p.dim(),
            cfg.hidden
        )));
    }
    Ok(())
}

/// Result of episodic training over source graphs.
#[derive(Clone, Debug)]
pub struct SourceOutcome {
    pub learner: LearnerParams,
    pub gnns: Vec<GnnParams>,
    /// validation accuracy of each source after its last epoch
    pub final_val_accs: Vec<f64>,
    pub wall_clock_s: f64,
}

/// For each episode, for each source graph, `epochs` epochs of joint
/// training; the learner is shared, each graph keeps its own GNN.
pub fn train_sources(graphs: &[&Graph], cfg: &TrainConfig, trace: &mut EpochTrace) -> Result<SourceOutcome> {
    train_sources_from(graphs, cfg.init_learner()?, cfg, trace)
}

/// [`train_sources`] starting from given learner parameters.
pub fn train_sources_from(
    graphs: &[&Graph],
    mut learner: LearnerParams,
    cfg: &TrainConfig,
    trace: &mut EpochTrace,
) -> Result<SourceOutcome> {
    cfg.validate()?;
    if graphs.is_empty() {
        return Err(Error::Config("need at least one source graph".into()));
    }
    check_learner_dim(&learner, cfg)?;
    let start = Instant::now();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learner_lr(), 0.0)?;
    let mut sessions = graphs
        .iter()
        .map(|g| GraphSession::new(g, cfg, cfg.lambda < 1.0))
        .collect::<Result<Vec<_>>>()?;
    let mut final_val_accs = vec![f64::NAN; graphs.len()];
    let mut epoch = 0;
    for _ in 0..cfg.episodes {
        for (i, session) in sessions.iter_mut().enumerate() {
            for _ in 0..cfg.epochs {
                epoch += 1;
                let stats = session
                    .train_epoch(LearnerArg::Train(&mut learner, &mut opt), cfg)
                    .map_err(|e| to_diverged(epoch, e))?;
                let eval = session
                    .evaluate(Some(&learner), cfg)
                    .map_err(|e| to_diverged(epoch, e))?;
                let g = session.graph();
                let val_acc = if session.valid.is_empty() {
                    f64::NAN
                } else {
                    accuracy(&eval.logits, g.labels(), &session.valid)
                };
                let homophily = latent_homophily(g, eval.gamma.as_ref())?;
                push_epoch(trace, epoch, &stats, val_acc, homophily);
                final_val_accs[i] = val_acc;
            }
        }
    }
    Ok(SourceOutcome {
        learner,
        gnns: sessions.into_iter().map(|s| s.gnn).collect(),
        final_val_accs,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized trained learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub learner: LearnerParams,
    pub embedding_dim: usize,
    pub config: TrainConfig,
    /// content hashes of the source datasets
    pub sources: Vec<String>,
}

impl Checkpoint {
    pub fn new(learner: LearnerParams, config: TrainConfig, sources: Vec<String>) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            embedding_dim: learner.dim(),
            learner,
            config,
            sources,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(s)?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        ck.learner.validate()?;
        if ck.learner.dim() != ck.embedding_dim {
            return Err(Error::Checkpoint(format!(
                "learner dimension {} disagrees with recorded embedding_dim {}",
                ck.learner.dim(),
                ck.embedding_dim
            )));
        }
        Ok(ck)
    }

    /// Errors unless the learner can consume `cfg.hidden`-dimensional embeddings.
    pub fn check_compatible(&self, cfg: &TrainConfig) -> Result<()> {
        check_learner_dim(&self.learner, cfg)
    }
}

/// Final metrics of one run, with the configuration echoed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetrics {
    pub test_acc: f64,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub epochs_run: usize,
    pub wall_clock_s: f64,
    pub config: TrainConfig,
}

impl RunMetrics {
    pub fn from_outcome(out: &TargetOutcome, cfg: &TrainConfig) -> Self {
        RunMetrics {
            test_acc: out.test_acc,
            best_epoch: out.best_epoch,
            best_val_acc: out.best_val_acc,
            epochs_run: out.epochs_run,
            wall_clock_s: out.wall_clock_s,
            config: cfg.clone(),
        }
    }
}
