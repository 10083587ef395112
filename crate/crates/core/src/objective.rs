//! Contrastive task loss, multi-prefix supervision and the composite objective.

use serde::{Deserialize, Serialize};

use crate::config::Ablation;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::pic::{info_nce, pic_total, ChainTerm};
use crate::sia::{sia_total, LayerTeacher, SiaTerm};
use crate::tensor::{Graph, Matrix, Var};
use crate::vocab::TokenBatch;

/// Unsupervised SimCSE: two dropout views of the same sentences are
/// positives, every other sentence in the batch a negative.
pub fn simcse_loss(graph: &Graph, z_view1: Var, z_view2: Var, tau_sim: f64) -> Result<Var> {
    info_nce(graph, z_view1, z_view2, tau_sim)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimLoss {
    pub dim: usize,
    pub loss: f64,
}

pub struct MrlLoss {
    pub total: Var,
    pub per_dim: Vec<DimLoss>,
}

/// `Σ_d w_d · SimCSE(view1[:, :d], view2[:, :d])`; weights default to ones.
pub fn mrl_loss(
    graph: &Graph,
    full_view1: Var,
    full_view2: Var,
    dims: &[usize],
    weights: Option<&[f64]>,
    tau_sim: f64,
) -> Result<MrlLoss> {
    if dims.is_empty() {
        return Err(Error::Config("no nested dims".into()));
    }
    if let Some(w) = weights {
        if w.len() != dims.len() {
            return Err(Error::Config(format!(
                "{} weights for {} nested dims",
                w.len(),
                dims.len()
            )));
        }
    }
    let mut parts = Vec::with_capacity(dims.len());
    let mut per_dim = Vec::with_capacity(dims.len());
    for (i, &d) in dims.iter().enumerate() {
        let a = graph.prefix_cols(full_view1, d)?;
        let b = graph.prefix_cols(full_view2, d)?;
        let loss = simcse_loss(graph, a, b, tau_sim)?;
        per_dim.push(DimLoss {
            dim: d,
            loss: graph.scalar_value(loss),
        });
        parts.push(match weights {
            Some(w) if w[i] != 1.0 => graph.scale(loss, w[i]),
            _ => loss,
        });
    }
    Ok(MrlLoss {
        total: graph.add_n(&parts)?,
        per_dim,
    })
}

/// Every value that makes up one step's objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub alpha: f64,
    pub simcse: Vec<DimLoss>,
    pub mrl: f64,
    pub sia_terms: Vec<SiaTerm>,
    pub sia: f64,
    pub chain: Vec<ChainTerm>,
    pub pic: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `α·L_MRL + (1−α)(L_SIA + L_PIC)` from the logged values.
    pub fn recompose(&self) -> f64 {
        if self.alpha == 1.0 {
            return self.mrl;
        }
        self.alpha * self.mrl + (1.0 - self.alpha) * (self.sia + self.pic)
    }

    /// Name of the first non-finite term, in evaluation order.
    pub fn first_non_finite(&self) -> Option<String> {
        for d in &self.simcse {
            if !d.loss.is_finite() {
                return Some(format!("simcse[dim={}]", d.dim));
            }
        }
        if !self.mrl.is_finite() {
            return Some("mrl".into());
        }
        for t in &self.sia_terms {
            if !t.att.is_finite() {
                return Some(format!("att[layer={},dim={}]", t.layer, t.dim));
            }
            if !t.cka.is_finite() {
                return Some(format!("cka[layer={},dim={}]", t.layer, t.dim));
            }
        }
        if !self.sia.is_finite() {
            return Some("sia".into());
        }
        for c in &self.chain {
            if !c.loss.is_finite() {
                return Some(format!("chain[step={}]", c.step));
            }
        }
        if !self.pic.is_finite() {
            return Some("pic".into());
        }
        if !self.total.is_finite() {
            return Some("total".into());
        }
        None
    }
}

/// Graph handles of each objective term, for backward passes and checks.
/// Absent terms are constant zeros.
pub struct ObjectiveTerms {
    pub mrl: Var,
    pub att: Var,
    pub cka: Var,
    pub sia: Var,
    pub pic: Var,
    pub total: Var,
}

/// Builds the full objective for one batch. `views` seeds the two dropout
/// realizations; `teachers` optionally overrides the alignment teachers
/// derived from view 1.
pub fn mipic_loss(
    graph: &Graph,
    model: &Model,
    batch: &TokenBatch,
    ablation: Ablation,
    views: [Option<u64>; 2],
    teachers: Option<&[LayerTeacher]>,
) -> Result<(ObjectiveTerms, LossBreakdown)> {
    let cfg = &model.config;
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::Config(format!("alpha {} outside [0, 1]", cfg.alpha)));
    }
    let alpha = if ablation.mrl_only { 1.0 } else { cfg.alpha };
    let last = cfg.num_layers;

    let view1 = model.encode(graph, batch, views[0])?;
    let view2 = model.encode(graph, batch, views[1])?;
    for (v, states) in [&view1, &view2].into_iter().enumerate() {
        for l in 0..states.len() {
            if !graph.value(states.layer(l)?).is_finite() {
                return Err(Error::NonFinite {
                    term: format!("encoder view {} layer {l}", v + 1),
                    step: 0,
                });
            }
        }
    }
    let z1 = view1.pool_cls(graph, last)?;
    let z2 = view2.pool_cls(graph, last)?;
    let mrl = mrl_loss(graph, z1, z2, &cfg.nested_dims, cfg.mrl_weights.as_deref(), cfg.tau_sim)?;

    let zero = graph.constant(Matrix::scalar(0.0));
    let aux = alpha < 1.0;
    let (mut att, mut cka, mut sia, mut sia_terms, mut sia_value) = (zero, zero, zero, Vec::new(), 0.0);
    if aux && ablation.sia_enabled() {
        let loss = sia_total(graph, &view1, &model.params, &model.bank, cfg, teachers)?;
        att = loss.att;
        cka = loss.cka;
        sia = loss.total;
        sia_terms = loss.terms;
        sia_value = graph.scalar_value(sia);
    }
    let (mut pic, mut chain, mut pic_value) = (zero, Vec::new(), 0.0);
    if aux && ablation.pic_enabled() {
        let loss = pic_total(graph, &view1, &model.params, &cfg.checkpoints, &model.bank.chain, cfg.tau_nce)?;
        pic = loss.total;
        chain = loss.terms;
        pic_value = graph.scalar_value(pic);
    }

    let total = if aux {
        let rest = graph.scale(graph.add(sia, pic)?, 1.0 - alpha);
        graph.add(graph.scale(mrl.total, alpha), rest)?
    } else {
        mrl.total
    };
    let breakdown = LossBreakdown {
        step: 0,
        alpha,
        simcse: mrl.per_dim,
        mrl: graph.scalar_value(mrl.total),
        sia_terms,
        sia: sia_value,
        chain,
        pic: pic_value,
        total: graph.scalar_value(total),
    };
    Ok((
        ObjectiveTerms {
            mrl: mrl.total,
            att,
            cka,
            sia,
            pic,
            total,
        },
        breakdown,
    ))
}
