//! GCN backbone with blended propagation over the observed graph and the
//! latent pivot structure, plus the one-layer encoder whose output seeds
//! the structure learner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{row_normalize, Graph};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// `relu(Â X W)`
    #[default]
    GcnLayer,
    /// `relu(X W)`
    MlpLayer,
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn-layer" | "gcn" => Ok(EncoderMode::GcnLayer),
            "mlp-layer" | "mlp" => Ok(EncoderMode::MlpLayer),
            other => Err(Error::Config(format!("unknown encoder mode {other:?}"))),
        }
    }
}

/// Per-graph GNN weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnParams {
    /// `D x d`
    pub encoder: Tensor,
    pub encoder_mode: EncoderMode,
    /// `D x d`, then `d x d` hidden layers, then `d x C`
    pub layers: Vec<Tensor>,
    /// weight on the observed-graph branch
    pub lambda: f64,
}

impl GnnParams {
    pub fn init<R: Rng + ?Sized>(
        feature_dim: usize,
        hidden: usize,
        n_classes: usize,
        depth: usize,
        lambda: f64,
        encoder_mode: EncoderMode,
        rng: &mut R,
    ) -> Result<Self> {
        if depth < 2 {
            return Err(Error::Config(format!("GNN depth must be at least 2, got {depth}")));
        }
        let encoder = Tensor::glorot(feature_dim, hidden, rng);
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let rows = if l == 0 { feature_dim } else { hidden };
            let cols = if l + 1 == depth { n_classes } else { hidden };
            layers.push(Tensor::glorot(rows, cols, rng));
        }
        let params = GnnParams {
            encoder,
            encoder_mode,
            layers,
            lambda,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.rows()
    }

    /// Width of the embeddings the structure learner sees.
    pub fn embedding_dim(&self) -> usize {
        self.encoder.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.layers.len() < 2 {
            return Err(Error::Config("GNN needs at least two layers".into()));
        }
        if self.layers[0].rows() != self.encoder.rows() {
            return Err(Error::Shape(format!(
                "first layer takes {} inputs but encoder takes {}",
                self.layers[0].rows(),
                self.encoder.rows()
            )));
        }
        for (l, w) in self.layers.windows(2).enumerate() {
            if w[0].cols() != w[1].rows() {
                return Err(Error::Shape(format!(
                    "layer {l} emits {} columns but layer {} takes {}",
                    w[0].cols(),
                    l + 1,
                    w[1].rows()
                )));
            }
        }
        if self.layers[0].cols() != self.encoder.cols() {
            return Err(Error::Shape(format!(
                "hidden width {} differs from encoder width {}",
                self.layers[0].cols(),
                self.encoder.cols()
            )));
        }
        Ok(())
    }

    /// Registers every weight on `tape`, trainable or not.
    pub fn register(&self, tape: &Tape<'_>, trainable: bool) -> GnnVars {
        GnnVars {
            encoder: tape.leaf(self.encoder.clone(), trainable),
            layers: self.layers.iter().map(|w| tape.leaf(w.clone(), trainable)).collect(),
        }
    }
}

/// Tape handles for the weights of one [`GnnParams`].
#[derive(Clone, Debug)]
pub struct GnnVars {
    pub encoder: Var,
    pub layers: Vec<Var>,
}

/// Output of a forward pass recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// penultimate representation (pre-dropout); the input embeddings for
    /// layer `L - 1`
    pub hidden: Var,
    pub logits: Var,
}

/// Dropout settings for a training-mode forward pass.
pub struct Dropout<'r> {
    /// rate on the input features
    pub input: f64,
    /// rate on hidden activations
    pub hidden: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("mask length matches shape")
}

fn sparse_dropout(s: &SparseMatrix, p: f64, rng: &mut ChaCha8Rng) -> Result<SparseMatrix> {
    let keep = 1.0 / (1.0 - p);
    let kept: Vec<(usize, usize, f64)> = s
        .triplets()
        .into_iter()
        .filter_map(|(r, c, v)| (rng.random::<f64>() >= p).then_some((r, c, v * keep)))
        .collect();
    SparseMatrix::from_triplets(s.rows(), s.cols(), &kept)
}

/// `X W`, using the sparse feature copy when the graph keeps one.
fn features_times<'a>(tape: &Tape<'a>, g: &'a Graph, w: Var, drop: Option<(f64, &mut ChaCha8Rng)>) -> Result<Var> {
    match (drop, g.sparse_features()) {
        (Some((p, rng)), Some(sx)) if p > 0.0 => tape.spmm_owned(sparse_dropout(sx, p, rng)?, w),
        (Some((p, rng)), None) if p > 0.0 => {
            let x = g.features();
            let mask = dropout_mask(x.rows(), x.cols(), p, rng);
            tape.const_matmul_owned(x.hadamard(&mask)?, w)
        }
        (_, Some(sx)) => tape.spmm(sx, w),
        (_, None) => tape.const_matmul(g.features(), w),
    }
}

fn at_layer<T>(layer: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::Numerical {
            layer,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    })
}

/// Records the encoder `Z⁰` on a tape.
pub fn encode_on_tape<'a>(tape: &Tape<'a>, g: &'a Graph, encoder: Var, mode: EncoderMode) -> Result<Var> {
    let (rows, _) = tape.shape(encoder);
    if rows != g.feature_dim() {
        return Err(Error::Shape(format!(
            "encoder takes {rows} features but graph has {}",
            g.feature_dim()
        )));
    }
    let xw = features_times(tape, g, encoder, None)?;
    let pre = match mode {
        EncoderMode::GcnLayer => tape.spmm(g.norm_adjacency(), xw)?,
        EncoderMode::MlpLayer => xw,
    };
    tape.relu(pre)
}

/// Initial embeddings `Z⁰` for the structure learner.
pub fn encode(g: &Graph, params: &GnnParams) -> Result<Tensor> {
    let tape = Tape::new();
    let enc = tape.constant(params.encoder.clone());
    let z = encode_on_tape(&tape, g, enc, params.encoder_mode)?;
    let out = tape.value(z).clone();
    Ok(out)
}

/// Node-to-pivot then pivot-to-node averaging:
/// `RowNorm(Γ) · (RowNorm(Γᵀ) · Z)`, computed in `O(NPd)`.
pub fn two_step_mp(z: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    if z.rows() != gamma.rows() {
        return Err(Error::Shape(format!(
            "two_step_mp: Z has {} rows but Γ has {}",
            z.rows(),
            gamma.rows()
        )));
    }
    let pivot_side = row_normalize(&gamma.transpose())?.matmul(z)?;
    row_normalize(gamma)?.matmul(&pivot_side)
}

/// [`two_step_mp`] recorded on a tape; differentiable in both arguments.
pub fn two_step_mp_on_tape(tape: &Tape<'_>, z: Var, gamma: Var) -> Result<Var> {
    let to_pivots = tape.col_normalize(gamma)?;
    let pivot_side = tape.t_matmul(to_pivots, z)?;
    let to_nodes = tape.row_normalize(gamma)?;
    tape.matmul(to_nodes, pivot_side)
}

/// Records a full forward pass. The latent branch is skipped entirely when
/// `gamma` is `None` or `lambda == 1`.
pub fn forward_on_tape<'a>(
    tape: &Tape<'a>,
    g: &'a Graph,
    gamma: Option<Var>,
    vars: &GnnVars,
    lambda: f64,
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardVars> {
    if let Some(d) = &dropout {
        check_rate(d.input)?;
        check_rate(d.hidden)?;
    }
    let latent = gamma.filter(|_| lambda < 1.0);
    let depth = vars.layers.len();
    if depth < 2 {
        return Err(Error::Config("GNN needs at least two layers".into()));
    }
    let mut input: Option<Var> = None;
    let mut hidden = None;
    for (l, &w) in vars.layers.iter().enumerate() {
        let xw = at_layer(
            l,
            match input {
                None => features_times(tape, g, w, dropout.as_mut().map(|d| (d.input, &mut *d.rng))),
                Some(h) => tape.matmul(h, w),
            },
        )?;
        let observed = at_layer(l, tape.spmm(g.norm_adjacency(), xw))?;
        let mixed = match latent {
            Some(gm) => {
                let c = at_layer(l, two_step_mp_on_tape(tape, xw, gm))?;
                let a = at_layer(l, tape.scale(observed, lambda))?;
                let b = at_layer(l, tape.scale(c, 1.0 - lambda))?;
                at_layer(l, tape.add(a, b))?
            }
            None => observed,
        };
        if l + 1 == depth {
            let hidden = hidden.expect("depth >= 2 leaves a hidden layer");
            return Ok(ForwardVars { hidden, logits: mixed });
        }
        let act = at_layer(l, tape.relu(mixed))?;
        hidden = Some(act);
        input = Some(match dropout.as_mut() {
            Some(d) if d.hidden > 0.0 => {
                let (r, c) = tape.shape(act);
                let mask = dropout_mask(r, c, d.hidden, d.rng);
                at_layer(l, tape.mul_const(act, mask))?
            }
            _ => act,
        });
    }
    unreachable!("the last layer returns")
}

/// Evaluation-mode forward: `(Z, logits)` where `Z` is the penultimate
/// representation.
pub fn gnn_forward(g: &Graph, gamma: Option<&Tensor>, params: &GnnParams) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    let tape = Tape::new();
    let vars = params.register(&tape, false);
    let gv = gamma.map(|t| tape.constant(t.clone()));
    let out = forward_on_tape(&tape, g, gv, &vars, params.lambda, None)?;
    let z = tape.value(out.hidden).clone();
    let y = tape.value(out.logits).clone();
    Ok((z, y))
}

/// Fresh RNG for dropout masks.
pub fn dropout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
