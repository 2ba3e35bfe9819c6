use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pivotgsl::autodiff::suites::{run_suites, SuiteResult};
use pivotgsl::data::{generate_synthetic, load_dataset, save_dataset, DatasetBundle, SplitSpec, SynthSpec};
use pivotgsl::experiment::{attack, diagnose, run_model, Ablation, Model, Summary};
use pivotgsl::graph::{add_random_edges, homophily_ratio};
use pivotgsl::train::{train_sources, Checkpoint, EpochTrace, TrainConfig};
use serde::Serialize;

use crate::output::{write_atomic, write_csv, write_json};
use crate::settings::Settings;

#[derive(Clone, Debug, Serialize)]
pub struct DatasetInfo {
    pub path: PathBuf,
    pub name: String,
    pub sha256: String,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub dropped_self_loops: usize,
}

/// Loads `dir`, drawing masks from the configured split when the dataset
/// ships without them.
pub fn load(dir: &Path, settings: &Settings) -> Result<(DatasetBundle, DatasetInfo)> {
    let mut bundle = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let m = bundle.graph.masks();
    let has_masks = m.train.iter().any(|&b| b);
    if !has_masks {
        bundle = bundle
            .with_splits(settings.split.clone(), settings.split_seed)
            .with_context(|| format!("splitting {}", dir.display()))?;
    }
    let g = &bundle.graph;
    let info = DatasetInfo {
        path: dir.to_path_buf(),
        name: bundle.name.clone(),
        sha256: bundle.content_hash(),
        n_nodes: g.n_nodes(),
        n_edges: g.n_edges(),
        n_classes: g.n_classes(),
        feature_dim: g.feature_dim(),
        dropped_self_loops: bundle.dropped_self_loops,
    };
    Ok((bundle, info))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(Checkpoint::from_json(&text).with_context(|| format!("checkpoint {}", path.display()))?)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub test_acc: f64,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Failure {
    pub command: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Datasets {
    pub target: Option<DatasetInfo>,
    pub sources: Vec<DatasetInfo>,
}

/// Schema shared by `transfer`, `baseline` and `ablate`.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsRecord {
    pub command: String,
    pub model: Model,
    pub ablation: Option<Ablation>,
    pub settings: Settings,
    pub datasets: Datasets,
    pub checkpoint: Option<PathBuf>,
    pub runs: Vec<RunRecord>,
    pub failed: Vec<Failure>,
    pub test_acc: Summary,
    pub wall_clock_s: f64,
}

/// What a command produced; `failed` non-empty means exit status 1.
pub struct Outcome {
    pub message: String,
    pub failed: Vec<Failure>,
}

fn failure(command: &str, seed: u64, e: &anyhow::Error) -> Failure {
    eprintln!("{command} seed {seed} failed: {e:#}");
    Failure {
        command: command.to_string(),
        seed,
        error: format!("{e:#}"),
    }
}

pub fn cmd_train(sources: &[PathBuf], settings: &Settings, out: &Path) -> Result<Outcome> {
    let loaded = sources.iter().map(|p| load(p, settings)).collect::<Result<Vec<_>>>()?;
    let graphs: Vec<_> = loaded.iter().map(|(b, _)| &b.graph).collect();
    let mut trace = EpochTrace::default();
    let src = train_sources(&graphs, &settings.train, &mut trace).context("training on sources")?;
    let infos: Vec<DatasetInfo> = loaded.iter().map(|(_, i)| i.clone()).collect();
    let ck = Checkpoint::new(
        src.learner.clone(),
        settings.train.clone(),
        infos.iter().map(|i| i.sha256.clone()).collect(),
    );
    write_atomic(&out.join("learner.json"), ck.to_json()?.as_bytes())?;
    write_atomic(&out.join("source_trace.csv"), trace.to_csv_string()?.as_bytes())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        command: &'static str,
        settings: &'a Settings,
        sources: &'a [DatasetInfo],
        final_val_accs: &'a [f64],
        epochs: usize,
        wall_clock_s: f64,
    }
    write_json(
        &out.join("summary.json"),
        &Summary {
            command: "train",
            settings,
            sources: &infos,
            final_val_accs: &src.final_val_accs,
            epochs: trace.rows.len(),
            wall_clock_s: src.wall_clock_s,
        },
    )?;
    Ok(Outcome {
        message: format!(
            "trained learner on {} source(s) in {:.1}s; final validation accuracy {:?}; wrote {}",
            sources.len(),
            src.wall_clock_s,
            src.final_val_accs,
            out.join("learner.json").display()
        ),
        failed: Vec::new(),
    })
}

/// Runs `model` on `target` for every seed, writing one trace per seed.
fn run_seeds(
    command: &str,
    model: Model,
    ablation: Option<Ablation>,
    target: &Path,
    learner_for: &mut dyn FnMut(&TrainConfig) -> Result<Option<pivotgsl::learner::LearnerParams>>,
    settings: &Settings,
    sources: Vec<DatasetInfo>,
    checkpoint: Option<PathBuf>,
    out: &Path,
) -> Result<Outcome> {
    let start = Instant::now();
    let (bundle, info) = load(target, settings)?;
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for &seed in &settings.seeds {
        let cfg = settings.for_seed(seed);
        let result = (|| -> Result<RunRecord> {
            let learner = learner_for(&cfg)?;
            let mut trace = EpochTrace::default();
            let out_run = run_model(&bundle.graph, model, learner.as_ref(), &cfg, &mut trace)?;
            write_atomic(&out.join(format!("trace_seed{seed}.csv")), trace.to_csv_string()?.as_bytes())?;
            Ok(RunRecord {
                seed,
                test_acc: out_run.test_acc,
                best_val_acc: out_run.best_val_acc,
                best_epoch: out_run.best_epoch,
                epochs_run: out_run.epochs_run,
                wall_clock_s: out_run.wall_clock_s,
            })
        })();
        match result {
            Ok(r) => runs.push(r),
            Err(e) => failed.push(failure(command, seed, &e)),
        }
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
    let record = MetricsRecord {
        command: command.to_string(),
        model,
        ablation,
        settings: settings.clone(),
        datasets: Datasets {
            target: Some(info),
            sources,
        },
        checkpoint,
        runs,
        failed: failed.clone(),
        test_acc: Summary::of(&accs),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join("metrics.json"), &record)?;
    Ok(Outcome {
        message: format!(
            "{command}: test accuracy {:.4} ± {:.4} over {} seed(s); wrote {}",
            record.test_acc.mean,
            record.test_acc.std,
            record.test_acc.n,
            out.join("metrics.json").display()
        ),
        failed,
    })
}

pub fn cmd_transfer(target: &Path, checkpoint: &Path, settings: &Settings, out: &Path) -> Result<Outcome> {
    let ck = read_checkpoint(checkpoint)?;
    ck.check_compatible(&settings.train)?;
    let learner = ck.learner.clone();
    run_seeds(
        "transfer",
        Model::Transfer,
        None,
        target,
        &mut |_| Ok(Some(learner.clone())),
        settings,
        Vec::new(),
        Some(checkpoint.to_path_buf()),
        out,
    )
}

pub fn cmd_baseline(target: &Path, settings: &Settings, out: &Path) -> Result<Outcome> {
    run_seeds(
        "baseline",
        Model::Gcn,
        None,
        target,
        &mut |_| Ok(None),
        settings,
        Vec::new(),
        None,
        out,
    )
}

pub fn cmd_ablate(target: &Path, sources: &[PathBuf], settings: &Settings, out: &Path) -> Result<Outcome> {
    let which = settings.which.context("ablate needs --which no-iter|no-reg")?;
    let mut ablated = settings.clone();
    ablated.train = which.apply(&settings.train);
    ablated.train.validate()?;
    let loaded = sources.iter().map(|p| load(p, settings)).collect::<Result<Vec<_>>>()?;
    let infos = loaded.iter().map(|(_, i)| i.clone()).collect();
    let graphs: Vec<_> = loaded.iter().map(|(b, _)| &b.graph).collect();
    run_seeds(
        "ablate",
        Model::Transfer,
        Some(which),
        target,
        &mut |cfg| {
            let src = train_sources(&graphs, cfg, &mut EpochTrace::default())?;
            Ok(Some(src.learner))
        },
        &ablated,
        infos,
        None,
        out,
    )
}

pub fn cmd_attack(target: &Path, checkpoint: &Path, settings: &Settings, out: &Path) -> Result<Outcome> {
    let ck = read_checkpoint(checkpoint)?;
    ck.check_compatible(&settings.train)?;
    let (bundle, info) = load(target, settings)?;
    let start = Instant::now();
    let rows = attack(&bundle.graph, &ck.learner, &settings.fractions, &settings.seeds, &settings.train)?;
    write_csv(&out.join("attack.csv"), &rows)?;
    #[derive(Serialize)]
    struct Record<'a> {
        command: &'static str,
        settings: &'a Settings,
        target: &'a DatasetInfo,
        checkpoint: &'a Path,
        rows: &'a [pivotgsl::experiment::AttackRow],
        wall_clock_s: f64,
    }
    write_json(
        &out.join("attack.json"),
        &Record {
            command: "attack",
            settings,
            target: &info,
            checkpoint,
            rows: &rows,
            wall_clock_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(Outcome {
        message: format!(
            "attack: {} rows over {} seed(s); wrote {}",
            rows.len(),
            settings.seeds.len(),
            out.join("attack.csv").display()
        ),
        failed: Vec::new(),
    })
}

pub fn cmd_diagnose(target: &Path, checkpoint: &Path, settings: &Settings, out: &Path) -> Result<Outcome> {
    let ck = read_checkpoint(checkpoint)?;
    ck.check_compatible(&settings.train)?;
    let (bundle, info) = load(target, settings)?;
    #[derive(Serialize)]
    struct SeedDiagnosis {
        seed: u64,
        variance_input: f64,
        variance_learned: f64,
        input_homophily: f64,
        final_latent_homophily: f64,
        test_acc: f64,
    }
    let mut per_seed = Vec::new();
    let mut failed = Vec::new();
    for &seed in &settings.seeds {
        let cfg = settings.for_seed(seed);
        match diagnose(&bundle.graph, &ck.learner, &cfg, settings.every) {
            Ok(d) => {
                let name = if settings.seeds.len() == 1 {
                    "diagnose.csv".to_string()
                } else {
                    format!("diagnose_seed{seed}.csv")
                };
                write_csv(&out.join(name), &d.rows)?;
                per_seed.push(SeedDiagnosis {
                    seed,
                    variance_input: d.variance_input,
                    variance_learned: d.variance_learned,
                    input_homophily: d.input_homophily,
                    final_latent_homophily: d.final_latent_homophily,
                    test_acc: d.test_acc,
                });
            }
            Err(e) => failed.push(failure("diagnose", seed, &e.into())),
        }
    }
    let vi: Vec<f64> = per_seed.iter().map(|d| d.variance_input).collect();
    let vl: Vec<f64> = per_seed.iter().map(|d| d.variance_learned).collect();
    #[derive(Serialize)]
    struct Record<'a> {
        command: &'static str,
        settings: &'a Settings,
        target: &'a DatasetInfo,
        checkpoint: &'a Path,
        variance_input: f64,
        variance_learned: f64,
        seeds: &'a [SeedDiagnosis],
        failed: &'a [Failure],
    }
    let record = Record {
        command: "diagnose",
        settings,
        target: &info,
        checkpoint,
        variance_input: Summary::of(&vi).mean,
        variance_learned: Summary::of(&vl).mean,
        seeds: &per_seed,
        failed: &failed,
    };
    write_json(&out.join("diagnose.json"), &record)?;
    Ok(Outcome {
        message: format!(
            "diagnose: neighbourhood variance input {:.4}, learned {:.4}; wrote {}",
            record.variance_input,
            record.variance_learned,
            out.join("diagnose.json").display()
        ),
        failed,
    })
}

pub struct SynthArgs {
    pub spec: SynthSpec,
    pub noise_edges: f64,
    pub split: Option<SplitSpec>,
    pub split_seed: u64,
}

pub fn cmd_synth(args: &SynthArgs, out: &Path) -> Result<Outcome> {
    let mut bundle = generate_synthetic(&args.spec)?;
    if args.noise_edges > 0.0 {
        bundle.graph = add_random_edges(&bundle.graph, args.noise_edges, args.spec.seed)?;
    }
    if let Some(split) = &args.split {
        bundle = bundle.with_splits(split.clone(), args.split_seed)?;
    }
    save_dataset(&bundle, out)?;
    let h = homophily_ratio(&bundle.graph, None)?;
    Ok(Outcome {
        message: format!(
            "wrote {} nodes, {} edges (homophily {h:.3}) to {}",
            bundle.graph.n_nodes(),
            bundle.graph.n_edges(),
            out.display()
        ),
        failed: Vec::new(),
    })
}

pub fn cmd_gradcheck(fixtures: usize, seed: u64, out: &Path) -> Result<Outcome> {
    if fixtures == 0 {
        bail!("need at least one fixture");
    }
    let start = Instant::now();
    let results: Vec<SuiteResult> = run_suites(fixtures, seed)?;
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for r in &results {
        lines.push(format!(
            "{:<20} {} coords={:<6} max_rel={:.2e}",
            r.name,
            if r.passed() { "ok  " } else { "FAIL" },
            r.report.n_coords,
            r.report.max_rel_error
        ));
        if !r.passed() {
            failed.push(Failure {
                command: format!("gradcheck:{}", r.name),
                seed,
                error: format!("{} coordinate(s) above tolerance", r.report.failures.len()),
            });
        }
    }
    write_json(&out.join("gradcheck.json"), &results)?;
    lines.push(format!(
        "{} suites x {fixtures} fixtures in {:.2}s",
        results.len(),
        start.elapsed().as_secs_f64()
    ));
    Ok(Outcome {
        message: lines.join("\n"),
        failed,
    })
}
