//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Real-data criteria read exported datasets from
//! `$PIVOTGSL_DATA_DIR/{cora,citeseer,pubmed}` and fail when they are absent.
//! `PIVOTGSL_ACCEPTANCE_ONLY=1,3,12` restricts the run to some criteria and
//! `PIVOTGSL_ACCEPTANCE_STRICT=1` turns any failure into a nonzero exit.

use std::path::PathBuf;
use std::time::Instant;

use pivotgsl::autodiff::suites::run_suites;
use pivotgsl::autodiff::{Tape, PROB_EPS};
use pivotgsl::data::{generate_synthetic, load_dataset, make_splits, DatasetBundle, SplitSpec, SynthSpec};
use pivotgsl::experiment::{attack, baseline_config, diagnose, run_model, Ablation, Model, Summary};
use pivotgsl::gnn::{gnn_forward, two_step_mp, EncoderMode, GnnParams};
use pivotgsl::graph::{add_random_edges, homophily_ratio, Graph, Masks};
use pivotgsl::learner::{compute_gamma, log_prob, sample_structures_with, LearnerParams, SimilarityMode};
use pivotgsl::objective::{reinforce_gamma_gradient, sample_reward, Baseline, RewardContext};
use pivotgsl::train::{train_joint, train_sources, EpochTrace, TrainConfig};
use pivotgsl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, start: Instant, v: Verdict) -> bool {
    println!(
        "[{}] {id:>2} {name}: {} ({:.1}s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.pass
}

fn selected(id: usize) -> bool {
    match std::env::var("PIVOTGSL_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|t| t.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

fn guarded(f: impl FnOnce() -> pivotgsl::Result<Verdict>) -> Verdict {
    f().unwrap_or_else(|e| verdict(false, format!("error: {e}")))
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> pivotgsl::Result<Verdict> {
    let t = Instant::now();
    let results = run_suites(20, 20_240_501)?;
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let worst = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let needed = ["supervised_loss", "entropy_loss", "log_prob", "log_prob_learner"];
    let missing: Vec<_> = needed
        .iter()
        .filter(|n| !results.iter().any(|r| r.name == **n))
        .collect();
    Ok(verdict(
        failed.is_empty() && missing.is_empty() && secs < 60.0,
        format!(
            "{} suites x 20 fixtures, worst rel err {worst:.2e}, failed {failed:?}, missing {missing:?}, {secs:.1}s",
            results.len()
        ),
    ))
}

// ---------------------------------------------------------------- 2

/// Exact `∇_Γ(-E[R])` by enumerating every binary `N x P` structure.
fn exact_gamma_gradient(gamma: &Tensor, ctx: &RewardContext, alpha: f64, rho: f64) -> pivotgsl::Result<Tensor> {
    let (n, p) = gamma.shape();
    let cells = n * p;
    let mut grad = vec![0.0; cells];
    for code in 0u32..(1 << cells) {
        let bits: Vec<f64> = (0..cells).map(|i| ((code >> i) & 1) as f64).collect();
        let b = Tensor::from_vec(n, p, bits.clone())?;
        let prob = log_prob(&b, gamma)?.exp();
        let r = sample_reward(&b, ctx, alpha, rho)?;
        for (i, (&g, &bit)) in gamma.as_slice().iter().zip(&bits).enumerate() {
            // ∂π/∂γ = π · score
            let score = if bit != 0.0 { 1.0 / g } else { -1.0 / (1.0 - g) };
            grad[i] -= prob * r * score;
        }
    }
    Tensor::from_vec(n, p, grad)
}

/// `J[i]` = gradient of `Γ_i` w.r.t. the flattened learner weights.
fn gamma_jacobian(z: &Tensor, pivots: &[usize], learner: &LearnerParams) -> pivotgsl::Result<Vec<Vec<f64>>> {
    let cells = z.rows() * pivots.len();
    let mut rows = Vec::with_capacity(cells);
    for i in 0..cells {
        let tape = Tape::new();
        let zv = tape.constant(z.clone());
        let w1 = tape.param(learner.w1.clone());
        let w2 = tape.param(learner.w2.clone());
        let gamma = pivotgsl::learner::gamma_on_tape(&tape, zv, pivots, learner, Some((w1, w2)), true)?;
        let mut pick = Tensor::zeros(z.rows(), pivots.len());
        pick.as_mut_slice()[i] = 1.0;
        let picked = tape.mul_const(gamma, pick)?;
        let s = tape.sum(picked)?;
        let grads = tape.backward(s)?;
        let mut row: Vec<f64> = grads.get(w1).map(|t| t.as_slice().to_vec()).unwrap_or_default();
        row.extend(grads.get(w2).map(|t| t.as_slice().to_vec()).unwrap_or_default());
        rows.push(row);
    }
    Ok(rows)
}

fn estimator_unbiasedness() -> pivotgsl::Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, d, heads) = (3, 4, 2);
    let pivots = [0usize, 2];
    let z = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(0.2..1.0)).collect())?;
    let learner = LearnerParams {
        w1: Tensor::from_vec(heads, d, (0..heads * d).map(|_| rng.random_range(0.2..1.5)).collect())?,
        w2: Tensor::from_vec(heads, d, (0..heads * d).map(|_| rng.random_range(0.2..1.5)).collect())?,
        threshold: 0.0,
        mode: SimilarityMode::WeightedCosine,
        knn_k: 1,
    };
    let gamma = compute_gamma(&z, &pivots, &learner)?;
    if gamma
        .as_slice()
        .iter()
        .any(|&g| g <= PROB_EPS || g >= 1.0 - PROB_EPS)
    {
        return Ok(verdict(false, format!("fixture Γ not interior: {:?}", gamma.as_slice())));
    }
    let pivot_x = Tensor::from_vec(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let ctx = RewardContext::new(&pivot_x)?;
    let (alpha, rho) = (0.7, 0.3);
    let exact = exact_gamma_gradient(&gamma, &ctx, alpha, rho)?;
    let jac = gamma_jacobian(&z, &pivots, &learner)?;
    let n_theta = jac[0].len();
    let exact_theta: Vec<f64> = (0..n_theta)
        .map(|j| jac.iter().zip(exact.as_slice()).map(|(row, g)| row[j] * g).sum())
        .collect();

    // 50 000 samples as 25 000 leave-one-out estimates with K = 2
    let k = 2;
    let draws = 25_000;
    let cells = gamma.len();
    let mut sum = vec![0.0; cells + n_theta];
    let mut sum_sq = vec![0.0; cells + n_theta];
    for _ in 0..draws {
        let samples = sample_structures_with(&gamma, k, &mut rng);
        let rewards = samples
            .iter()
            .map(|b| sample_reward(b, &ctx, alpha, rho))
            .collect::<pivotgsl::Result<Vec<_>>>()?;
        let est = reinforce_gamma_gradient(&gamma, &samples, &rewards, Baseline::LeaveOneOut)?;
        let g = est.as_slice();
        for i in 0..cells {
            sum[i] += g[i];
            sum_sq[i] += g[i] * g[i];
        }
        for j in 0..n_theta {
            let v: f64 = jac.iter().zip(g).map(|(row, gi)| row[j] * gi).sum();
            sum[cells + j] += v;
            sum_sq[cells + j] += v * v;
        }
    }
    let m = draws as f64;
    let exact_all: Vec<f64> = exact.as_slice().iter().copied().chain(exact_theta).collect();
    let mut worst_z: f64 = 0.0;
    let mut outside = 0;
    for i in 0..exact_all.len() {
        let mean = sum[i] / m;
        let var = (sum_sq[i] / m - mean * mean).max(0.0) * m / (m - 1.0);
        let se = (var / m).sqrt();
        let zscore = if se > 0.0 {
            (mean - exact_all[i]).abs() / se
        } else if (mean - exact_all[i]).abs() < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        worst_z = worst_z.max(zscore);
        if zscore > 3.0 {
            outside += 1;
        }
    }
    Ok(verdict(
        outside == 0,
        format!(
            "{} coordinates (Γ and θ), {} samples, worst |z| = {worst_z:.2}, {outside} beyond 3 SE",
            exact_all.len(),
            draws * k
        ),
    ))
}

// ---------------------------------------------------------------- 3

type Dense = Vec<Vec<f64>>;

fn dense(t: &Tensor) -> Dense {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn dmm(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

/// Latent propagation matrix written out as an `N x N` matrix: row-normalised
/// node-to-pivot weights times column-normalised pivot-to-node weights.
fn dense_latent(gamma: &Dense) -> Dense {
    let n = gamma.len();
    let p = gamma[0].len();
    let row_sum: Vec<f64> = gamma.iter().map(|r| r.iter().sum()).collect();
    let col_sum: Vec<f64> = (0..p).map(|j| gamma.iter().map(|r| r[j]).sum()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for u in 0..n {
        for v in 0..n {
            let mut s = 0.0;
            for j in 0..p {
                if row_sum[u] > 0.0 && col_sum[j] > 0.0 {
                    s += gamma[u][j] / row_sum[u] * gamma[v][j] / col_sum[j];
                }
            }
            out[u][v] = s;
        }
    }
    out
}

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

fn dense_forward(x: &Dense, a: &Dense, latent: Option<&Dense>, params: &GnnParams) -> (Dense, Dense) {
    let lambda = params.lambda;
    let mut h = x.clone();
    let mut hidden = Vec::new();
    for (l, w) in params.layers.iter().enumerate() {
        let hw = dmm(&h, &dense(w));
        let mut mixed = dmm(a, &hw);
        if let Some(lat) = latent {
            let c = dmm(lat, &hw);
            for (mr, cr) in mixed.iter_mut().zip(&c) {
                for (m, cv) in mr.iter_mut().zip(cr) {
                    *m = lambda * *m + (1.0 - lambda) * cv;
                }
            }
        }
        if l + 1 == params.layers.len() {
            return (hidden, mixed);
        }
        h = mixed
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        hidden = h.clone();
    }
    unreachable!()
}

fn naive_gamma(z: &Tensor, pivots: &[usize], learner: &LearnerParams) -> Dense {
    let h = learner.heads();
    (0..z.rows())
        .map(|u| {
            pivots
                .iter()
                .map(|&p| {
                    let mut acc = 0.0;
                    for k in 0..h {
                        let a: Vec<f64> = z.row(u).iter().zip(learner.w1.row(k)).map(|(x, w)| x * w).collect();
                        let b: Vec<f64> = z.row(p).iter().zip(learner.w2.row(k)).map(|(x, w)| x * w).collect();
                        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                        acc += dot / (na * nb);
                    }
                    let s = acc / h as f64;
                    if s >= learner.threshold && s > 0.0 {
                        s
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

fn max_diff(a: &Dense, b: &Dense) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn pivot_path_equivalence() -> pivotgsl::Result<Verdict> {
    let mut worst: f64 = 0.0;
    for fixture in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + fixture);
        let n = rng.random_range(6..=12);
        let d = rng.random_range(2..=5);
        let c = 3;
        let p = rng.random_range(2..=4);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random_bool(0.3) {
                    edges.push((u, v));
                }
            }
        }
        let x = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let labels = (0..n).map(|i| i % c).collect();
        let g = Graph::from_edges(n, &edges, x.clone(), labels, c, Masks::empty(n))?;
        let depth = 2 + (fixture % 2) as usize;
        let mut params = GnnParams::init(d, 4, c, depth, rng.random_range(0.05..0.95), EncoderMode::GcnLayer, &mut rng)?;
        params.lambda = rng.random_range(0.05..0.95);
        let pivots: Vec<usize> = rand::seq::index::sample(&mut rng, n, p).into_vec();

        let gamma = if fixture % 2 == 0 {
            // learner output on the encoder embeddings
            let z = pivotgsl::gnn::encode(&g, &params)?;
            let learner = LearnerParams::init(3, 4, 0.05, SimilarityMode::WeightedCosine, &mut rng)?;
            match compute_gamma(&z, &pivots, &learner) {
                Ok(gm) => {
                    worst = worst.max(max_diff(&dense(&gm), &naive_gamma(&z, &pivots, &learner)));
                    gm
                }
                // a dead ReLU row has no direction; fall back to a random Γ
                Err(pivotgsl::Error::Domain(_)) => random_gamma(n, p, &mut rng)?,
                Err(e) => return Err(e),
            }
        } else {
            random_gamma(n, p, &mut rng)?
        };
        let (hidden, logits) = gnn_forward(&g, Some(&gamma), &params)?;
        let a = dense_norm_adjacency(n, &edges);
        let lat = dense_latent(&dense(&gamma));
        let (dh, dl) = dense_forward(&dense(&x), &a, Some(&lat), &params);
        worst = worst.max(max_diff(&dense(&hidden), &dh));
        worst = worst.max(max_diff(&dense(&logits), &dl));
        // the two-step product alone
        let zz = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        worst = worst.max(max_diff(&dense(&two_step_mp(&zz, &gamma)?), &dmm(&lat, &dense(&zz))));
    }
    Ok(verdict(worst <= 1e-10, format!("20 fixtures, max |pivot - dense| = {worst:.2e}")))
}

/// Random `Γ` with some exact zeros, including a whole zero row and column.
fn random_gamma(n: usize, p: usize, rng: &mut ChaCha8Rng) -> pivotgsl::Result<Tensor> {
    let mut data: Vec<f64> = (0..n * p)
        .map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    for j in 0..p {
        data[j] = 0.0;
    }
    for u in 0..n {
        data[u * p + p - 1] = 0.0;
    }
    Tensor::from_vec(n, p, data)
}

// ---------------------------------------------------------------- real data

fn data_dir(name: &str) -> Option<PathBuf> {
    let root = std::env::var_os("PIVOTGSL_DATA_DIR")?;
    let dir = PathBuf::from(root).join(name);
    dir.join("edges.tsv").exists().then_some(dir)
}

fn load_with_split(name: &str) -> pivotgsl::Result<Option<DatasetBundle>> {
    let Some(dir) = data_dir(name) else {
        return Ok(None);
    };
    let b = load_dataset(&dir)?;
    if b.graph.masks().train.iter().any(|&m| m) {
        Ok(Some(b))
    } else {
        Ok(Some(b.with_splits(SplitSpec::planetoid(), 0)?))
    }
}

fn missing(name: &str) -> Verdict {
    verdict(
        false,
        format!("no exported {name} dataset under $PIVOTGSL_DATA_DIR/{name}"),
    )
}

fn cora_baseline(cora: &Graph) -> pivotgsl::Result<Summary> {
    let cfg = baseline_config(&TrainConfig::default());
    let mut accs = Vec::new();
    for &seed in &SEEDS {
        let c = TrainConfig { seed, ..cfg.clone() };
        accs.push(run_model(cora, Model::Gcn, None, &c, &mut EpochTrace::default())?.test_acc);
    }
    Ok(Summary::of(&accs))
}

// ---------------------------------------------------------------- synthetic regime

const SOURCE_PARAMS: [(f64, f64, f64); 3] = [(0.010, 0.005, 3.0), (0.008, 0.008, 2.5), (0.012, 0.006, 3.5)];

fn regime_split() -> SplitSpec {
    SplitSpec::PerClass {
        train_per_class: 20,
        valid: 200,
        test: None,
    }
}

fn regime_config(seed: u64) -> TrainConfig {
    TrainConfig {
        pivots: 100,
        lambda: 0.5,
        encoder: EncoderMode::MlpLayer,
        max_iters: 3,
        epochs: 60,
        target_epochs: 300,
        patience: 100,
        learner_lr: Some(0.01),
        threshold: 4e-5,
        alpha: 0.1,
        rho: 0.1,
        entropy_weight: 1.0,
        hidden: 32,
        heads: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn regime_sources(seed: u64) -> pivotgsl::Result<Vec<Graph>> {
    SOURCE_PARAMS
        .iter()
        .enumerate()
        .map(|(i, &(p_in, p_out, snr))| {
            let b = generate_synthetic(&SynthSpec {
                n_nodes: 800,
                n_classes: 4,
                p_in,
                p_out,
                feature_dim: 16,
                snr,
                seed: 100 + 10 * seed + i as u64,
            })?;
            Ok(b.with_splits(regime_split(), seed)?.graph)
        })
        .collect()
}

fn regime_target(seed: u64) -> pivotgsl::Result<Graph> {
    let b = generate_synthetic(&SynthSpec {
        n_nodes: 800,
        n_classes: 4,
        p_in: 0.010,
        p_out: 0.005,
        feature_dim: 16,
        snr: 3.0,
        seed: 999 + seed,
    })?;
    let noisy = add_random_edges(&b.graph, 0.3, seed)?;
    let masks = make_splits(&noisy, &regime_split(), seed)?;
    noisy.with_masks(masks)
}

struct SeedRun {
    seed: u64,
    target: Graph,
    learner: LearnerParams,
    transfer_acc: f64,
    gcn_acc: f64,
    diagnosis: pivotgsl::experiment::Diagnosis,
}

fn run_regime_seed(seed: u64) -> pivotgsl::Result<SeedRun> {
    let cfg = regime_config(seed);
    let sources = regime_sources(seed)?;
    let refs: Vec<&Graph> = sources.iter().collect();
    let src = train_sources(&refs, &cfg, &mut EpochTrace::default())?;
    let target = regime_target(seed)?;
    // the diagnostic run is the transfer run, with homophily recorded along the way
    let diagnosis = diagnose(&target, &src.learner, &cfg, 5)?;
    let gcn = run_model(&target, Model::Gcn, None, &cfg, &mut EpochTrace::default())?;
    Ok(SeedRun {
        seed,
        transfer_acc: diagnosis.test_acc,
        gcn_acc: gcn.test_acc,
        target,
        learner: src.learner,
        diagnosis,
    })
}

fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(window - 1);
            let s = &values[lo..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

fn homophily_trend(runs: &[SeedRun]) -> Verdict {
    let mut ok = 0;
    let mut notes = Vec::new();
    for r in runs {
        let latent: Vec<f64> = r.diagnosis.rows.iter().map(|x| x.latent_homophily).collect();
        let sm = smoothed(&latent, 3);
        let drops = sm.windows(2).filter(|w| w[1] < w[0]).count();
        let above = r.diagnosis.final_latent_homophily > r.diagnosis.input_homophily;
        if above && drops == 0 {
            ok += 1;
        }
        notes.push(format!(
            "s{}: {:.3}>{:.3} {} drops",
            r.seed, r.diagnosis.final_latent_homophily, r.diagnosis.input_homophily, drops
        ));
    }
    verdict(ok >= 4, format!("{ok}/{} seeds [{}]", runs.len(), notes.join("; ")))
}

fn variance_trend(runs: &[SeedRun]) -> Verdict {
    let ok = runs
        .iter()
        .filter(|r| r.diagnosis.variance_learned < r.diagnosis.variance_input)
        .count();
    let notes: Vec<_> = runs
        .iter()
        .map(|r| format!("s{}: {:.4}<{:.4}", r.seed, r.diagnosis.variance_learned, r.diagnosis.variance_input))
        .collect();
    verdict(ok >= 4, format!("{ok}/{} seeds [{}]", runs.len(), notes.join("; ")))
}

fn robustness_trend(runs: &[SeedRun]) -> pivotgsl::Result<Verdict> {
    let fractions = [0.1, 0.3, 0.5];
    // gaps[f][seed]
    let mut gaps = vec![Vec::new(); fractions.len()];
    for r in runs {
        let cfg = regime_config(r.seed);
        let rows = attack(&r.target, &r.learner, &fractions, &[r.seed], &cfg)?;
        for (i, &f) in fractions.iter().enumerate() {
            let acc = |m: Model| {
                rows.iter()
                    .find(|x| x.fraction == f && x.model == m)
                    .map(|x| x.mean_acc)
                    .expect("attack row")
            };
            gaps[i].push(acc(Model::Transfer) - acc(Model::Gcn));
        }
    }
    let lo = Summary::of(&gaps[0]);
    let hi = Summary::of(&gaps[2]);
    let diff = hi.mean - lo.mean;
    let pooled = ((lo.std * lo.std + hi.std * hi.std) / 2.0).sqrt();
    Ok(verdict(
        diff > 0.0,
        format!(
            "gap@0.1 {:+.4}, gap@0.3 {:+.4}, gap@0.5 {:+.4}; increase {diff:+.4} (pooled std {pooled:.4})",
            lo.mean,
            Summary::of(&gaps[1]).mean,
            hi.mean
        ),
    ))
}

fn ablation_direction(runs: &[SeedRun]) -> pivotgsl::Result<Verdict> {
    let full = Summary::of(&runs.iter().map(|r| r.transfer_acc).collect::<Vec<_>>());
    let mut pass = true;
    let mut notes = vec![format!("full {:.4}", full.mean)];
    for which in [Ablation::NoIter, Ablation::NoReg] {
        let mut accs = Vec::new();
        for r in runs {
            let cfg = which.apply(&regime_config(r.seed));
            let sources = regime_sources(r.seed)?;
            let refs: Vec<&Graph> = sources.iter().collect();
            let src = train_sources(&refs, &cfg, &mut EpochTrace::default())?;
            let out = run_model(&r.target, Model::Transfer, Some(&src.learner), &cfg, &mut EpochTrace::default())?;
            accs.push(out.test_acc);
        }
        let s = Summary::of(&accs);
        pass &= s.mean <= full.mean;
        notes.push(format!("{which} {:.4}", s.mean));
    }
    Ok(verdict(pass, notes.join(", ")))
}

// ---------------------------------------------------------------- 12

fn complexity() -> pivotgsl::Result<Verdict> {
    let (n, d) = (5000, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let learner = LearnerParams::init(4, d, 4e-5, SimilarityMode::WeightedCosine, &mut rng)?;
    let ps = [250usize, 500, 1000, 2000];
    let mut times = Vec::new();
    for &p in &ps {
        let pivots = rand::seq::index::sample(&mut rng, n, p).into_vec();
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let t = Instant::now();
            let gamma = compute_gamma(&z, &pivots, &learner)?;
            let out = two_step_mp(&z, &gamma)?;
            std::hint::black_box(out);
            best = best.min(t.elapsed().as_secs_f64());
        }
        times.push(best);
    }
    let xs: Vec<f64> = ps.iter().map(|&p| p as f64).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = times.iter().sum::<f64>() / times.len() as f64;
    let sxy: f64 = xs.iter().zip(&times).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let icept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(&times).map(|(x, y)| (y - icept - slope * x).powi(2)).sum();
    let ss_tot: f64 = times.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let pretty: Vec<String> = ps.iter().zip(&times).map(|(p, t)| format!("P={p}: {t:.3}s")).collect();
    Ok(verdict(r2 >= 0.95, format!("R² = {r2:.4} [{}]", pretty.join(", "))))
}

fn main() {
    // cargo passes harness flags such as --nocapture; nothing to parse
    let total = Instant::now();
    let mut results = Vec::new();
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        if selected(id) {
            let t = Instant::now();
            results.push((id, report(id, name, t, f())));
        }
    };

    run(1, "gradient correctness", &mut || guarded(gradient_correctness));
    run(2, "estimator unbiasedness", &mut || guarded(estimator_unbiasedness));
    run(3, "pivot-path equivalence", &mut || guarded(pivot_path_equivalence));

    let cora = if selected(4) || selected(5) {
        load_with_split("cora").unwrap_or_else(|e| {
            eprintln!("cora: {e}");
            None
        })
    } else {
        None
    };
    let mut cora_gcn = None;
    run(4, "GCN baseline on Cora", &mut || match &cora {
        None => missing("cora"),
        Some(b) => guarded(|| {
            let s = cora_baseline(&b.graph)?;
            cora_gcn = Some(s);
            Ok(verdict(
                (0.801..=0.831).contains(&s.mean),
                format!("{:.2} ± {:.2} over {} seeds, window [80.1, 83.1]", 100.0 * s.mean, 100.0 * s.std, s.n),
            ))
        }),
    });
    run(5, "single-graph training on Cora", &mut || match &cora {
        None => missing("cora"),
        Some(b) => guarded(|| {
            let base = match cora_gcn {
                Some(s) => s,
                None => cora_baseline(&b.graph)?,
            };
            let mut accs = Vec::new();
            for &seed in &SEEDS {
                let cfg = TrainConfig { seed, ..TrainConfig::default() };
                accs.push(train_joint(&b.graph, &cfg, &mut EpochTrace::default())?.1.test_acc);
            }
            let s = Summary::of(&accs);
            Ok(verdict(
                s.mean >= base.mean + 0.005,
                format!("{:.2} ± {:.2} vs GCN {:.2} (+0.5 required)", 100.0 * s.mean, 100.0 * s.std, 100.0 * base.mean),
            ))
        }),
    });

    let need_regime = (6..=10).any(selected);
    let mut regime: Result<Vec<SeedRun>, String> = Err("not run".into());
    if need_regime {
        let t = Instant::now();
        regime = SEEDS
            .iter()
            .map(|&s| run_regime_seed(s))
            .collect::<pivotgsl::Result<Vec<_>>>()
            .map_err(|e| e.to_string());
        eprintln!("synthetic regime: {:.1}s", t.elapsed().as_secs_f64());
    }
    run(6, "synthetic cross-graph transfer", &mut || match &regime {
        Err(e) => verdict(false, format!("error: {e}")),
        Ok(runs) => {
            let tr = Summary::of(&runs.iter().map(|r| r.transfer_acc).collect::<Vec<_>>());
            let gc = Summary::of(&runs.iter().map(|r| r.gcn_acc).collect::<Vec<_>>());
            let gap = 100.0 * (tr.mean - gc.mean);
            verdict(
                gap >= 2.0,
                format!(
                    "transfer {:.2} ± {:.2}, GCN {:.2} ± {:.2}, gap {gap:+.2} points (≥ 2 required)",
                    100.0 * tr.mean,
                    100.0 * tr.std,
                    100.0 * gc.mean,
                    100.0 * gc.std
                ),
            )
        }
    });
    run(7, "latent homophily trend", &mut || match &regime {
        Err(e) => verdict(false, format!("error: {e}")),
        Ok(runs) => homophily_trend(runs),
    });
    run(8, "neighbourhood variance trend", &mut || match &regime {
        Err(e) => verdict(false, format!("error: {e}")),
        Ok(runs) => variance_trend(runs),
    });
    run(9, "robustness to edge deletion", &mut || match &regime {
        Err(e) => verdict(false, format!("error: {e}")),
        Ok(runs) => guarded(|| robustness_trend(runs)),
    });
    run(10, "ablation direction", &mut || match &regime {
        Err(e) => verdict(false, format!("error: {e}")),
        Ok(runs) => guarded(|| ablation_direction(runs)),
    });
    run(11, "homophily metric calibration", &mut || {
        guarded(|| {
            let mut notes = Vec::new();
            let mut pass = true;
            for (name, expected) in [("cora", 0.77), ("citeseer", 0.63), ("pubmed", 0.66)] {
                match data_dir(name) {
                    None => {
                        pass = false;
                        notes.push(format!("{name}: missing"));
                    }
                    Some(dir) => {
                        let h = homophily_ratio(&load_dataset(&dir)?.graph, None)?;
                        pass &= (h - expected).abs() <= 0.05;
                        notes.push(format!("{name}: {h:.3} (expected {expected:.2} ± 0.05)"));
                    }
                }
            }
            Ok(verdict(pass, notes.join(", ")))
        })
    });
    run(12, "O(NP) scaling", &mut || guarded(complexity));

    let passed = results.iter().filter(|(_, p)| *p).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.1}s",
        results.len(),
        total.elapsed().as_secs_f64()
    );
    // failures are reported above; a nonzero exit would stop `cargo test`
    // before the remaining test targets run
    if passed != results.len() && std::env::var_os("PIVOTGSL_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
