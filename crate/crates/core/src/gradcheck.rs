//! End-to-end finite-difference check of every objective term.
//!
//! Stop-gradient teacher quantities (importance, top-k sets, full-width
//! targets) are frozen at the base point, so the numeric derivative sees the
//! same function the analytic pass differentiates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ModelConfig};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::objective::{mipic_loss, ObjectiveTerms};
use crate::sia::{layer_teachers, LayerTeacher};
use crate::tensor::{relative_error, Fault, Graph, Matrix};
use crate::vocab::{TokenBatch, CLS_ID, UNK_ID};

pub const MAX_PARAMS: usize = 20_000;
pub const TERMS: [&str; 6] = ["L_MRL", "L_att", "L_CKA", "L_SIA", "L_PIC", "L_MIPIC"];

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub batch_size: usize,
    /// Refine each central difference with one Richardson step (`h`, `h/2`).
    pub richardson: bool,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-5,
            batch_size: 3,
            richardson: true,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: String,
    pub worst_rel_err: f64,
    /// `name[row,col]` of the worst entry.
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    /// Worst error against the plain central difference at step `h`.
    pub central_worst_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub param_count: usize,
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub terms: Vec<TermReport>,
    pub passed: bool,
}

impl GradcheckReport {
    /// First failing term and its worst parameter.
    pub fn failure(&self) -> Option<String> {
        self.terms.iter().find(|t| !t.passed).map(|t| {
            format!(
                "{} fails at {}: analytic {:e} vs numeric {:e} (relative error {:e})",
                t.term, t.worst_param, t.analytic, t.numeric, t.worst_rel_err
            )
        })
    }
}

/// Batch of full-length and shorter sentences drawn from `rng`.
fn random_batch(cfg: &ModelConfig, size: usize, rng: &mut ChaCha8Rng) -> Result<TokenBatch> {
    let seqs: Vec<Vec<usize>> = (0..size)
        .map(|i| {
            // every third sentence is one token short to exercise padding
            let len = if i % 3 == 2 { cfg.max_len - 1 } else { cfg.max_len };
            std::iter::once(CLS_ID)
                .chain((1..len).map(|_| rng.random_range(UNK_ID + 1..cfg.vocab_size)))
                .collect()
        })
        .collect();
    TokenBatch::new(&seqs)
}

fn term_values(graph: &Graph, t: &ObjectiveTerms) -> [f64; 6] {
    [t.mrl, t.att, t.cka, t.sia, t.pic, t.total].map(|v| graph.scalar_value(v))
}

fn evaluate(model: &Model, batch: &TokenBatch, views: [Option<u64>; 2], teachers: &[LayerTeacher]) -> Result<[f64; 6]> {
    let g = Graph::new();
    let (terms, _) = mipic_loss(&g, model, batch, Ablation::default(), views, Some(teachers))?;
    Ok(term_values(&g, &terms))
}

pub fn gradcheck(cfg: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut model = Model::new(cfg)?;
    let param_count = model.parameter_count();
    if param_count >= MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradcheck needs fewer than {MAX_PARAMS} parameters, config has {param_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let batch = random_batch(&model.config, opts.batch_size, &mut rng)?;
    let views = [Some(rng.random()), Some(rng.random())];

    let g = Graph::new();
    let teachers = layer_teachers(&g, &model.encode(&g, &batch, views[0])?, &model.config)?;

    let g = Graph::new();
    if let Some(f) = opts.fault {
        g.inject_fault(f);
    }
    let (terms, _) = mipic_loss(&g, &model, &batch, Ablation::default(), views, Some(&teachers))?;
    let roots = [terms.mrl, terms.att, terms.cka, terms.sia, terms.pic, terms.total];
    let mut analytic: Vec<Vec<Matrix>> = Vec::with_capacity(roots.len());
    for root in roots {
        g.zero_grad();
        g.backward(root)?;
        let mut per_param: Vec<Matrix> = model
            .params
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        for (id, grad) in g.param_grads() {
            per_param[id.0] = grad;
        }
        analytic.push(per_param);
    }

    let mut reports: Vec<TermReport> = TERMS
        .iter()
        .map(|t| TermReport {
            term: t.to_string(),
            worst_rel_err: 0.0,
            worst_param: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            central_worst_rel_err: 0.0,
            passed: true,
        })
        .collect();
    let h = opts.step;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let (rows, cols) = model.params.value(id).shape();
        for r in 0..rows {
            for c in 0..cols {
                let orig = model.params.value(id)[(r, c)];
                let idx = r * cols + c;
                let central = |model: &mut Model, step: f64| -> Result<[f64; 6]> {
                    model.params.value_mut(id).data_mut()[idx] = orig + step;
                    let plus = evaluate(model, &batch, views, &teachers)?;
                    model.params.value_mut(id).data_mut()[idx] = orig - step;
                    let minus = evaluate(model, &batch, views, &teachers)?;
                    model.params.value_mut(id).data_mut()[idx] = orig;
                    Ok(std::array::from_fn(|t| (plus[t] - minus[t]) / (2.0 * step)))
                };
                let coarse = central(&mut model, h)?;
                let refined = if opts.richardson {
                    let fine = central(&mut model, h / 2.0)?;
                    std::array::from_fn(|t| (4.0 * fine[t] - coarse[t]) / 3.0)
                } else {
                    coarse
                };
                for (t, report) in reports.iter_mut().enumerate() {
                    let a = analytic[t][id.0][(r, c)];
                    let numeric = refined[t];
                    let err = relative_error(a, numeric, opts.floor);
                    report.central_worst_rel_err = report
                        .central_worst_rel_err
                        .max(relative_error(a, coarse[t], opts.floor));
                    if err > report.worst_rel_err || report.worst_param.is_empty() {
                        report.worst_rel_err = err;
                        report.worst_param = format!("{}[{r},{c}]", model.params.name(id));
                        report.analytic = a;
                        report.numeric = numeric;
                    }
                }
            }
        }
    }
    for r in &mut reports {
        r.passed = r.worst_rel_err < opts.tolerance;
    }
    Ok(GradcheckReport {
        seed,
        param_count,
        step: opts.step,
        tolerance: opts.tolerance,
        floor: opts.floor,
        passed: reports.iter().all(|r| r.passed),
        terms: reports,
    })
}
