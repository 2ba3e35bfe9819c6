//! Dataset directories, split generation and a stochastic-block-model
//! generator.
//!
//! A dataset directory holds
//!
//! - `edges.tsv`: one undirected edge `u<TAB>v` per line, 0-indexed
//! - `features.tsv`: one tab-separated row of reals per node
//! - `labels.tsv`: one class id per line
//! - `masks.tsv` (optional): `train`, `valid`, `test` or `none` per line
//! - `meta.json` (optional on read): `n_nodes`, `n_classes`,
//!   `feature_dim` and the SHA-256 of the three required files

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{adjacency_from_edges, Graph, Masks};
use crate::tensor::Tensor;

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const MASKS_FILE: &str = "masks.tsv";
pub const META_FILE: &str = "meta.json";

/// How train/valid/test nodes are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SplitSpec {
    /// `train_per_class` nodes of every class for training, then `valid`
    /// and `test` nodes drawn from the rest (`test = None` takes all
    /// remaining nodes).
    PerClass {
        train_per_class: usize,
        valid: usize,
        test: Option<usize>,
    },
    /// Fractions of all nodes.
    Ratio { train: f64, valid: f64, test: f64 },
}

impl SplitSpec {
    /// 20 per class / 500 / 1000, the usual citation-network protocol.
    pub fn planetoid() -> Self {
        SplitSpec::PerClass {
            train_per_class: 20,
            valid: 500,
            test: Some(1000),
        }
    }

    /// 50% / 25% / 25%.
    pub fn half_quarter_quarter() -> Self {
        SplitSpec::Ratio {
            train: 0.5,
            valid: 0.25,
            test: 0.25,
        }
    }
}

impl std::str::FromStr for SplitSpec {
    type Err = Error;

    /// `planetoid`, `ratio:0.5,0.25,0.25` or `per-class:20,500,1000`
    /// (a `*` test count takes all remaining nodes).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse split {s:?}"));
        if s == "planetoid" {
            return Ok(SplitSpec::planetoid());
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        match kind {
            "ratio" => {
                let v = parts
                    .iter()
                    .map(|p| p.parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SplitSpec::Ratio {
                    train: v[0],
                    valid: v[1],
                    test: v[2],
                })
            }
            "per-class" => Ok(SplitSpec::PerClass {
                train_per_class: parts[0].parse().map_err(|_| bad())?,
                valid: parts[1].parse().map_err(|_| bad())?,
                test: if parts[2] == "*" {
                    None
                } else {
                    Some(parts[2].parse().map_err(|_| bad())?)
                },
            }),
            _ => Err(bad()),
        }
    }
}

/// Draws disjoint masks; deterministic under `seed`.
pub fn make_splits(g: &Graph, spec: &SplitSpec, seed: u64) -> Result<Masks> {
    let n = g.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Masks::empty(n);
    match *spec {
        SplitSpec::Ratio { train, valid, test } => {
            for f in [train, valid, test] {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::Config(format!("split fraction {f} outside [0, 1]")));
                }
            }
            if train + valid + test > 1.0 + 1e-12 {
                return Err(Error::Config("split fractions sum to more than 1".into()));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let n_train = (train * n as f64 + 1e-9).floor() as usize;
            let n_valid = (valid * n as f64 + 1e-9).floor() as usize;
            let n_test = ((test * n as f64 + 1e-9).floor() as usize).min(n - n_train - n_valid);
            for &i in &order[..n_train] {
                masks.train[i] = true;
            }
            for &i in &order[n_train..n_train + n_valid] {
                masks.valid[i] = true;
            }
            for &i in &order[n_train + n_valid..n_train + n_valid + n_test] {
                masks.test[i] = true;
            }
        }
        SplitSpec::PerClass {
            train_per_class,
            valid,
            test,
        } => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); g.n_classes()];
            for (i, &y) in g.labels().iter().enumerate() {
                by_class[y].push(i);
            }
            for (class, members) in by_class.iter_mut().enumerate() {
                if members.len() < train_per_class {
                    return Err(Error::ClassTooSmall {
                        class,
                        available: members.len(),
                        requested: train_per_class,
                    });
                }
                members.shuffle(&mut rng);
                for &i in &members[..train_per_class] {
                    masks.train[i] = true;
                }
            }
            let mut rest: Vec<usize> = (0..n).filter(|&i| !masks.train[i]).collect();
            rest.shuffle(&mut rng);
            let n_test = test.unwrap_or(rest.len().saturating_sub(valid));
            if valid + n_test > rest.len() {
                return Err(Error::Config(format!(
                    "{valid} validation and {n_test} test nodes requested but only {} remain",
                    rest.len()
                )));
            }
            for &i in &rest[..valid] {
                masks.valid[i] = true;
            }
            for &i in &rest[valid..valid + n_test] {
                masks.test[i] = true;
            }
        }
    }
    Ok(masks)
}

/// A graph with its name and the rule its masks came from.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub name: String,
    pub graph: Graph,
    pub split: Option<SplitSpec>,
    /// self-loops found in `edges.tsv` and dropped on load
    pub dropped_self_loops: usize,
}

impl DatasetBundle {
    /// SHA-256 over the canonical TSV encoding.
    pub fn content_hash(&self) -> String {
        let files = encode_files(&self.graph);
        let mut h = Sha256::new();
        for body in [&files.edges, &files.features, &files.labels] {
            h.update(Sha256::digest(body.as_bytes()));
        }
        hex::encode(h.finalize())
    }

    pub fn with_splits(mut self, spec: SplitSpec, seed: u64) -> Result<Self> {
        let masks = make_splits(&self.graph, &spec, seed)?;
        self.graph = self.graph.with_masks(masks)?;
        self.split = Some(spec);
        Ok(self)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    n_nodes: usize,
    n_classes: usize,
    feature_dim: usize,
    sha256: BTreeMap<String, String>,
}

struct Encoded {
    edges: String,
    features: String,
    labels: String,
    masks: Option<String>,
}

fn encode_files(g: &Graph) -> Encoded {
    let mut edges = String::new();
    for (u, v) in g.edges() {
        writeln!(edges, "{u}\t{v}").expect("writing to a String");
    }
    let mut features = String::new();
    let x = g.features();
    for r in 0..x.rows() {
        for (c, v) in x.row(r).iter().enumerate() {
            if c > 0 {
                features.push('\t');
            }
            // `{}` prints the shortest string that round-trips exactly
            write!(features, "{v}").expect("writing to a String");
        }
        features.push('\n');
    }
    let mut labels = String::new();
    for y in g.labels() {
        writeln!(labels, "{y}").expect("writing to a String");
    }
    let m = g.masks();
    let any = m.train.iter().chain(&m.valid).chain(&m.test).any(|&b| b);
    let masks = any.then(|| {
        let mut s = String::new();
        for i in 0..g.n_nodes() {
            let tag = if m.train[i] {
                "train"
            } else if m.valid[i] {
                "valid"
            } else if m.test[i] {
                "test"
            } else {
                "none"
            };
            s.push_str(tag);
            s.push('\n');
        }
        s
    });
    Encoded {
        edges,
        features,
        labels,
        masks,
    }
}

fn sha_hex(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

fn write_atomic(path: &Path, body: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes the canonical encoding of `bundle.graph` into `dir`.
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &bundle.graph;
    let files = encode_files(g);
    let mut sha256 = BTreeMap::new();
    for (name, body) in [
        (EDGES_FILE, &files.edges),
        (FEATURES_FILE, &files.features),
        (LABELS_FILE, &files.labels),
    ] {
        write_atomic(&dir.join(name), body.as_bytes())?;
        sha256.insert(name.to_string(), sha_hex(body.as_bytes()));
    }
    let masks_path = dir.join(MASKS_FILE);
    match &files.masks {
        Some(body) => write_atomic(&masks_path, body.as_bytes())?,
        None if masks_path.exists() => fs::remove_file(&masks_path).map_err(|e| Error::io(&masks_path, e))?,
        None => {}
    }
    let meta = Meta {
        n_nodes: g.n_nodes(),
        n_classes: g.n_classes(),
        feature_dim: g.feature_dim(),
        sha256,
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    write_atomic(&dir.join(META_FILE), json.as_bytes())
}

fn read_required(dir: &Path, name: &str) -> Result<(PathBuf, String)> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, body))
}

fn content_lines(body: &str) -> impl Iterator<Item = (usize, &str)> {
    body.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Reads a dataset directory. Edges are symmetrised and deduplicated;
/// self-loops are dropped and counted.
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let (features_path, features_body) = read_required(dir, FEATURES_FILE)?;
    let (labels_path, labels_body) = read_required(dir, LABELS_FILE)?;
    let (edges_path, edges_body) = read_required(dir, EDGES_FILE)?;

    let meta_path = dir.join(META_FILE);
    let meta: Option<Meta> = if meta_path.is_file() {
        let s = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(serde_json::from_str(&s)?)
    } else {
        None
    };
    if let Some(m) = &meta {
        for (path, body) in [
            (&edges_path, &edges_body),
            (&features_path, &features_body),
            (&labels_path, &labels_body),
        ] {
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            if let Some(expected) = m.sha256.get(name) {
                let actual = sha_hex(body.as_bytes());
                if &actual != expected {
                    return Err(Error::HashMismatch {
                        file: path.clone(),
                        expected: expected.clone(),
                        actual,
                    });
                }
            }
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim = None;
    for (line, text) in content_lines(&features_body) {
        let row = text
            .split('\t')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| Error::Parse {
                    file: features_path.clone(),
                    line,
                    detail: format!("not a number: {t:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                file: features_path.clone(),
                line,
                detail: "non-finite feature value".into(),
            });
        }
        let expected = *dim.get_or_insert(row.len());
        if row.len() != expected {
            return Err(Error::RaggedFeatures {
                file: features_path.clone(),
                line,
                found: row.len(),
                expected,
            });
        }
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Parse {
            file: features_path,
            line: 1,
            detail: "no feature rows".into(),
        });
    }

    let mut raw_labels: Vec<(usize, i64)> = Vec::with_capacity(n);
    for (line, text) in content_lines(&labels_body) {
        let y = text.parse::<i64>().map_err(|_| Error::Parse {
            file: labels_path.clone(),
            line,
            detail: format!("not an integer label: {text:?}"),
        })?;
        raw_labels.push((line, y));
    }
    if raw_labels.len() != n {
        return Err(Error::Parse {
            file: labels_path,
            line: raw_labels.len() + 1,
            detail: format!("{} labels for {n} feature rows", raw_labels.len()),
        });
    }
    let n_classes = match &meta {
        Some(m) => m.n_classes,
        None => raw_labels.iter().map(|&(_, y)| y.max(0) as usize + 1).max().unwrap_or(0),
    };
    let mut labels = Vec::with_capacity(n);
    for (line, y) in raw_labels {
        if y < 0 || y as usize >= n_classes {
            return Err(Error::LabelOutOfRange {
                file: labels_path.clone(),
                line,
                label: y,
                n_classes,
            });
        }
        labels.push(y as usize);
    }

    let mut edges = BTreeSet::new();
    let mut dropped_self_loops = 0;
    for (line, text) in content_lines(&edges_body) {
        let parts: Vec<&str> = text.split_whitespace().collect();
        let parse = |t: &str| -> Result<usize> {
            t.parse::<usize>().map_err(|_| Error::Parse {
                file: edges_path.clone(),
                line,
                detail: format!("not a node id: {t:?}"),
            })
        };
        if parts.len() != 2 {
            return Err(Error::Parse {
                file: edges_path.clone(),
                line,
                detail: format!("expected two node ids, found {}", parts.len()),
            });
        }
        let (u, v) = (parse(parts[0])?, parse(parts[1])?);
        if u >= n || v >= n {
            return Err(Error::Parse {
                file: edges_path.clone(),
                line,
                detail: format!("edge ({u}, {v}) references a node outside 0..{n}"),
            });
        }
        if u == v {
            dropped_self_loops += 1;
            continue;
        }
        edges.insert((u.min(v), u.max(v)));
    }
    if dropped_self_loops > 0 {
        eprintln!(
            "warning: dropped {dropped_self_loops} self-loop(s) from {}",
            edges_path.display()
        );
    }

    let masks_path = dir.join(MASKS_FILE);
    let masks = if masks_path.is_file() {
        let body = fs::read_to_string(&masks_path).map_err(|e| Error::io(&masks_path, e))?;
        let mut masks = Masks::empty(n);
        let mut count = 0;
        for (line, text) in content_lines(&body) {
            if count >= n {
                return Err(Error::Parse {
                    file: masks_path.clone(),
                    line,
                    detail: format!("more than {n} mask lines"),
                });
            }
            match text {
                "train" => masks.train[count] = true,
                "valid" => masks.valid[count] = true,
                "test" => masks.test[count] = true,
                "none" => {}
                other => {
                    return Err(Error::Parse {
                        file: masks_path.clone(),
                        line,
                        detail: format!("unknown mask {other:?}"),
                    })
                }
            }
            count += 1;
        }
        if count != n {
            return Err(Error::Parse {
                file: masks_path,
                line: count + 1,
                detail: format!("{count} mask lines for {n} nodes"),
            });
        }
        masks
    } else {
        Masks::empty(n)
    };

    if let Some(m) = &meta {
        let dim = dim.unwrap_or(0);
        if m.n_nodes != n || m.feature_dim != dim {
            return Err(Error::Parse {
                file: meta_path,
                line: 1,
                detail: format!(
                    "meta.json declares {} nodes x {} features, files hold {n} x {dim}",
                    m.n_nodes, m.feature_dim
                ),
            });
        }
    }

    let features = Tensor::from_rows(&rows)?;
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    let adjacency = adjacency_from_edges(n, &edges)?;
    let graph = Graph::new(adjacency, features, labels, n_classes, masks)?;
    let name = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok(DatasetBundle {
        name,
        graph,
        split: None,
        dropped_self_loops,
    })
}

/// Stochastic block model with Gaussian class-mean features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_nodes: usize,
    pub n_classes: usize,
    /// edge probability within a class
    pub p_in: f64,
    /// edge probability across classes
    pub p_out: f64,
    pub feature_dim: usize,
    /// class-mean separation over noise standard deviation
    pub snr: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_nodes < self.n_classes {
            return Err(Error::Config(format!(
                "need at least 2 classes and one node per class, got {} nodes / {} classes",
                self.n_nodes, self.n_classes
            )));
        }
        for p in [self.p_in, self.p_out] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("edge probability {p} outside [0, 1]")));
            }
        }
        if self.feature_dim < self.n_classes {
            return Err(Error::Config(format!(
                "feature_dim {} must be at least n_classes {}",
                self.feature_dim, self.n_classes
            )));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::Config(format!("snr {} must be positive", self.snr)));
        }
        Ok(())
    }
}

/// Samples an SBM graph: labels are balanced (sizes differ by at most one)
/// and randomly placed; `x_u = e_{y_u} + N(0, 1/snr²)` over `feature_dim`
/// coordinates. Masks are left empty.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let n = spec.n_nodes;
    let c = spec.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let noise = Normal::new(0.0, 1.0 / spec.snr).map_err(|e| Error::Config(format!("noise scale: {e}")))?;
    let mut features = Tensor::zeros(n, spec.feature_dim);
    for (u, &y) in labels.iter().enumerate() {
        let row = features.row_mut(u);
        for v in row.iter_mut() {
            *v = noise.sample(&mut rng);
        }
        row[y] += 1.0;
    }
    let graph = Graph::from_edges(n, &edges, features, labels, c, Masks::empty(n))?;
    Ok(DatasetBundle {
        name: format!("sbm-n{}-c{}-s{}", n, c, spec.seed),
        graph,
        split: None,
        dropped_self_loops: 0,
    })
}
