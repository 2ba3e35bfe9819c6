//! Layered run settings: built-in defaults, then a flat `key = value`
//! config file, then command-line flags. Keys are the long flag names.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use pivotgsl::data::SplitSpec;
use pivotgsl::experiment::Ablation;
use pivotgsl::train::TrainConfig;
use serde::Serialize;

/// Hyperparameter flags. Every field is optional so that an unset flag
/// leaves the config-file (or default) value alone.
macro_rules! hyper_flags {
    ($($field:ident : $ty:ty => $key:literal),* $(,)?) => {
        #[derive(Args, Clone, Debug, Default)]
        pub struct HyperArgs {
            $(
                #[arg(long = $key)]
                pub $field: Option<$ty>,
            )*
        }

        impl HyperArgs {
            /// `(flag name, value)` for every flag given on the command line.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push(($key, v.to_string()));
                    }
                )*
                out
            }
        }
    };
}

hyper_flags! {
    lambda: f64 => "lambda",
    alpha: f64 => "alpha",
    rho: f64 => "rho",
    pivots: usize => "pivots",
    heads: usize => "heads",
    threshold: f64 => "threshold",
    samples_k: usize => "samples-k",
    max_iters: usize => "max-iters",
    conv_tol: f64 => "conv-tol",
    episodes: usize => "episodes",
    epochs: usize => "epochs",
    target_epochs: usize => "target-epochs",
    patience: usize => "patience",
    lr: f64 => "lr",
    learner_lr: f64 => "learner-lr",
    gnn_lr: f64 => "gnn-lr",
    weight_decay: f64 => "weight-decay",
    dropout: f64 => "dropout",
    input_dropout: f64 => "input-dropout",
    hidden: usize => "hidden",
    depth: usize => "depth",
    similarity: String => "similarity",
    knn_k: usize => "knn-k",
    encoder: String => "encoder",
    optimizer: String => "optimizer",
    baseline: String => "baseline",
    entropy_weight: f64 => "entropy-weight",
    reg_grad_to_embeddings: bool => "reg-grad-to-embeddings",
}

/// Flags shared by every training command.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// flat `key = value` file; keys are flag names without dashes
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// comma-separated seed list
    #[arg(long)]
    pub seeds: Option<String>,
    /// shorthand for `--seeds 0,1,..,N-1`
    #[arg(long)]
    pub repeats: Option<usize>,
    /// `planetoid`, `ratio:a,b,c` or `per-class:k,valid,test|*`; used for
    /// datasets without masks
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long = "split-seed")]
    pub split_seed: Option<u64>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

impl RunArgs {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if let Some(v) = &self.seeds {
            out.push(("seeds", v.clone()));
        }
        if let Some(v) = self.repeats {
            out.push(("repeats", v.to_string()));
        }
        if let Some(v) = &self.split {
            out.push(("split", v.clone()));
        }
        if let Some(v) = self.split_seed {
            out.push(("split-seed", v.to_string()));
        }
        out.extend(self.hyper.pairs());
        out
    }
}

/// Fully resolved settings; serialized into every output file.
#[derive(Clone, Debug, Serialize)]
pub struct Settings {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub split: SplitSpec,
    pub split_seed: u64,
    pub fractions: Vec<f64>,
    pub which: Option<Ablation>,
    pub every: usize,
}

impl Settings {
    pub fn new(train: TrainConfig) -> Self {
        Settings {
            seeds: vec![train.seed],
            train,
            split: SplitSpec::planetoid(),
            split_seed: 0,
            fractions: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            which: None,
            every: 5,
        }
    }

    /// Layers `config_file` and then `flags` over `self`.
    pub fn layered(mut self, config_file: Option<&Path>, flags: &[(&'static str, String)]) -> Result<Self> {
        if let Some(path) = config_file {
            for (line, key, value) in read_config(path)? {
                self.apply(&key, &value)
                    .with_context(|| format!("{}:{line}: {key}", path.display()))?;
            }
        }
        for (key, value) in flags {
            self.apply(key, value).with_context(|| format!("--{key}"))?;
        }
        self.train.validate()?;
        Ok(self)
    }

    /// Sets one key. Unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "lambda" => t.lambda = value.parse()?,
            "alpha" => t.alpha = value.parse()?,
            "rho" => t.rho = value.parse()?,
            "pivots" => t.pivots = value.parse()?,
            "heads" => t.heads = value.parse()?,
            "threshold" => t.threshold = value.parse()?,
            "samples-k" => t.samples_k = value.parse()?,
            "max-iters" => t.max_iters = value.parse()?,
            "conv-tol" => t.conv_tol = value.parse()?,
            "episodes" => t.episodes = value.parse()?,
            "epochs" => t.epochs = value.parse()?,
            "target-epochs" => t.target_epochs = value.parse()?,
            "patience" => t.patience = value.parse()?,
            "lr" => t.lr = value.parse()?,
            "learner-lr" => t.learner_lr = Some(value.parse()?),
            "gnn-lr" => t.gnn_lr = Some(value.parse()?),
            "weight-decay" => t.weight_decay = value.parse()?,
            "dropout" => t.dropout = value.parse()?,
            "input-dropout" => t.input_dropout = value.parse()?,
            "hidden" => t.hidden = value.parse()?,
            "depth" => t.depth = value.parse()?,
            "similarity" => t.similarity = value.parse()?,
            "knn-k" => t.knn_k = value.parse()?,
            "encoder" => t.encoder = value.parse()?,
            "optimizer" => t.optimizer = value.parse()?,
            "baseline" => t.baseline = value.parse()?,
            "entropy-weight" => t.entropy_weight = value.parse()?,
            "reg-grad-to-embeddings" => t.reg_grad_to_embeddings = value.parse()?,
            "seed" => {
                t.seed = value.parse()?;
                self.seeds = vec![t.seed];
            }
            "seeds" => {
                self.seeds = parse_list(value)?;
                if self.seeds.is_empty() {
                    bail!("empty seed list");
                }
                self.train.seed = self.seeds[0];
            }
            "repeats" => {
                let n: u64 = value.parse()?;
                if n == 0 {
                    bail!("repeats must be positive");
                }
                self.seeds = (0..n).collect();
                self.train.seed = 0;
            }
            "split" => self.split = value.parse()?,
            "split-seed" => self.split_seed = value.parse()?,
            "fractions" => self.fractions = parse_list(value)?,
            "which" => self.which = Some(value.parse()?),
            "every" => self.every = value.parse()?,
            other => bail!("unknown setting {other:?}"),
        }
        Ok(())
    }

    /// Training config for one seed.
    pub fn for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().with_context(|| format!("cannot parse {t:?}")))
        .collect()
}

/// `(line number, key, value)` for each setting. Blank lines and lines
/// starting with `#` are skipped; keys may be written with `_` or `-`.
pub fn read_config(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value", i + 1);
        };
        out.push((i + 1, k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nlambda = 0.4\npivots=64\nsamples_k = 5\n").unwrap();
        let s = Settings::new(TrainConfig::default())
            .layered(Some(&path), &[("pivots", "32".into())])
            .unwrap();
        assert_eq!(s.train.lambda, 0.4);
        assert_eq!(s.train.pivots, 32);
        assert_eq!(s.train.samples_k, 5);
        assert_eq!(s.train.heads, TrainConfig::default().heads);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut s = Settings::new(TrainConfig::default());
        assert!(s.apply("pivot", "3").is_err());
        assert!(parse_config("lambda 0.5").is_err());
    }

    #[test]
    fn seeds_and_repeats() {
        let mut s = Settings::new(TrainConfig::default());
        s.apply("repeats", "3").unwrap();
        assert_eq!(s.seeds, vec![0, 1, 2]);
        s.apply("seeds", "7, 9").unwrap();
        assert_eq!(s.seeds, vec![7, 9]);
        assert_eq!(s.for_seed(9).seed, 9);
    }
}
