//! Progressive information chaining: each checkpoint's CLS prefix, mapped by
//! a small MLP, must identify the next checkpoint's CLS prefix of the same
//! sentence among the batch.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Checkpoint;
use crate::encoder::LayerStates;
use crate::error::{Error, Result};
use crate::params::{scaled_normal_matrix, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Graph, Matrix, Var};

/// `Linear(d_in → h) → GELU → Linear(h → d_out)` with `h = max(d_in, d_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainProjector {
    pub step: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ChainProjector {
    pub fn init(step: usize, in_dim: usize, out_dim: usize, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let hidden = in_dim.max(out_dim);
        let g = ParamGroup::ChainProjector;
        let w1 = params.add(format!("chain{step}.w1"), g, scaled_normal_matrix(in_dim, hidden, rng));
        let b1 = params.add(format!("chain{step}.b1"), g, Matrix::zeros(1, hidden));
        let w2 = params.add(format!("chain{step}.w2"), g, scaled_normal_matrix(hidden, out_dim, rng));
        let b2 = params.add(format!("chain{step}.b2"), g, Matrix::zeros(1, out_dim));
        ChainProjector {
            step,
            in_dim,
            out_dim,
            hidden,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn apply(&self, graph: &Graph, params: &ParamStore, z: Var) -> Result<Var> {
        let (_, cols) = graph.shape(z);
        if cols != self.in_dim {
            return Err(Error::shape("chain projector input", (0, self.in_dim), graph.shape(z)));
        }
        let p = |id| graph.param(params, id);
        let h = graph.add_row(graph.matmul(z, p(self.w1))?, p(self.b1))?;
        let h = graph.gelu(h);
        graph.add_row(graph.matmul(h, p(self.w2))?, p(self.b2))
    }
}

/// CLS state at each checkpoint's layer, truncated to its width (`batch × d_i`).
pub fn checkpoint_embeddings(graph: &Graph, states: &LayerStates, checkpoints: &[Checkpoint]) -> Result<Vec<Var>> {
    checkpoints
        .iter()
        .map(|c| {
            if c.dim > states.width() {
                return Err(Error::Config(format!(
                    "checkpoint width {} exceeds hidden width {}",
                    c.dim,
                    states.width()
                )));
            }
            graph.prefix_cols(states.pool_cls(graph, c.layer)?, c.dim)
        })
        .collect()
}

/// In-batch InfoNCE: row `i` of `anchors` should match row `i` of `targets`
/// under cosine similarity at temperature `tau`.
pub fn info_nce(graph: &Graph, anchors: Var, targets: Var, tau: f64) -> Result<Var> {
    if graph.shape(anchors) != graph.shape(targets) {
        return Err(Error::shape("info_nce", graph.shape(anchors), graph.shape(targets)));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let a = graph.l2_normalize_rows(anchors)?;
    let b = graph.l2_normalize_rows(targets)?;
    let logits = graph.scale(graph.matmul(a, graph.transpose(b))?, 1.0 / tau);
    graph.diag_cross_entropy(logits)
}

/// One link of the chain: `φ(z_lo)` against `z_hi`.
pub fn chain_infonce(
    graph: &Graph,
    params: &ParamStore,
    z_lo: Var,
    z_hi: Var,
    projector: &ChainProjector,
    tau: f64,
) -> Result<Var> {
    let mapped = projector.apply(graph, params, z_lo)?;
    info_nce(graph, mapped, z_hi, tau)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainTerm {
    pub step: usize,
    pub from: Checkpoint,
    pub to: Checkpoint,
    pub loss: f64,
}

pub struct PicLoss {
    pub total: Var,
    pub terms: Vec<ChainTerm>,
}

/// Sum of chain losses over consecutive checkpoints.
pub fn pic_total(
    graph: &Graph,
    states: &LayerStates,
    params: &ParamStore,
    checkpoints: &[Checkpoint],
    projectors: &[ChainProjector],
    tau: f64,
) -> Result<PicLoss> {
    if checkpoints.len() < 2 {
        return Err(Error::Config("chaining needs at least two checkpoints".into()));
    }
    if projectors.len() != checkpoints.len() - 1 {
        return Err(Error::Contract(format!(
            "{} projectors for {} checkpoints",
            projectors.len(),
            checkpoints.len()
        )));
    }
    let z = checkpoint_embeddings(graph, states, checkpoints)?;
    let mut parts = Vec::with_capacity(projectors.len());
    let mut terms = Vec::with_capacity(projectors.len());
    for (i, proj) in projectors.iter().enumerate() {
        let loss = chain_infonce(graph, params, z[i], z[i + 1], proj, tau)?;
        terms.push(ChainTerm {
            step: i,
            from: checkpoints[i],
            to: checkpoints[i + 1],
            loss: graph.scalar_value(loss),
        });
        parts.push(loss);
    }
    Ok(PicLoss {
        total: graph.add_n(&parts)?,
        terms,
    })
}
