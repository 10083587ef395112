//! Self-distilled intra-relational alignment.
//!
//! At each alignment layer the full-width hidden states act as a frozen
//! teacher for every narrower prefix:
//!
//! * attention matching: CLS-to-token importance computed from the prefix
//!   (up-projected by a learned `P`) is pulled toward the full-width
//!   importance with `KL(student ‖ teacher)`;
//! * structural matching: on the teacher's top-`k` tokens, the prefix states
//!   are aligned to the full states with `1 − CKA`.
//!
//! Teacher quantities are plain matrices, never graph nodes, so no gradient
//! can reach them.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::LayerStates;
use crate::error::{Error, Result};
use crate::params::{scaled_normal_matrix, ParamGroup, ParamId, ParamStore};
use crate::pic::ChainProjector;
use crate::similarity::cka_loss;
use crate::tensor::{softmax_into, Graph, Matrix, Var};

/// Up-projection `P` (`d_i × D`) for one (layer, prefix) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SiaProjection {
    pub layer: usize,
    pub prefix: usize,
    pub dim: usize,
    pub param: ParamId,
}

/// Auxiliary trainable maps used only by the alignment objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBank {
    pub sia: Vec<SiaProjection>,
    pub chain: Vec<ChainProjector>,
}

impl ProjectionBank {
    pub fn init(cfg: &ModelConfig, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.hidden_dim;
        let mut sia = Vec::new();
        for &layer in &cfg.sia_layers {
            for (prefix, &dim) in cfg.prefix_dims().iter().enumerate() {
                let param = params.add(
                    format!("sia.layer{layer}.p{dim}"),
                    ParamGroup::SiaProjection,
                    scaled_normal_matrix(dim, d, rng),
                );
                sia.push(SiaProjection {
                    layer,
                    prefix,
                    dim,
                    param,
                });
            }
        }
        let chain = cfg
            .checkpoints
            .windows(2)
            .enumerate()
            .map(|(step, w)| ChainProjector::init(step, w[0].dim, w[1].dim, params, rng))
            .collect();
        Ok(ProjectionBank { sia, chain })
    }

    pub fn sia_projection(&self, layer: usize, prefix: usize) -> Option<&SiaProjection> {
        self.sia
            .iter()
            .find(|p| p.layer == layer && p.prefix == prefix)
    }
}

/// Probability over a sentence's contextual tokens (CLS and padding excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceDistribution {
    pub probs: Vec<f64>,
    pub source_layer: usize,
    pub temperature: f64,
}

/// Nested top-`k` token index sets; indices count contextual tokens from 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NestedSelection {
    pub k_values: Vec<usize>,
    /// Each set is a prefix of the same descending-importance ordering.
    pub index_sets: Vec<Vec<usize>>,
}

/// Teacher importance `softmax(h_CLS·h_j / √D / τ)` over contextual tokens.
/// `cls` is `1 × D`; `tokens` is `n × D`.
pub fn teacher_importance(
    cls: &Matrix,
    tokens: &Matrix,
    layer: usize,
    tau_att: f64,
) -> Result<ImportanceDistribution> {
    if tokens.rows() == 0 {
        return Err(Error::Degenerate(
            "sentence has no contextual tokens to rank".into(),
        ));
    }
    if cls.shape() != (1, tokens.cols()) {
        return Err(Error::shape("teacher_importance", cls.shape(), tokens.shape()));
    }
    let scale = 1.0 / (tokens.cols() as f64).sqrt();
    let scores: Vec<f64> = tokens.matmul_nt(cls)?.data().iter().map(|s| s * scale).collect();
    let mut probs = vec![0.0; scores.len()];
    softmax_into(&scores, tau_att, None, &mut probs)
        .map_err(|_| Error::Degenerate("empty importance distribution".into()))?;
    Ok(ImportanceDistribution {
        probs,
        source_layer: layer,
        temperature: tau_att,
    })
}

/// Student importance `softmax(h_CLS · Pᵀ h_j[..d] / √D / τ)` as a `1 × n`
/// node. `tokens` is the `n × D` state of the contextual tokens, `cls` the
/// fixed full-width CLS row and `projection` a `d × D` node.
pub fn student_importance(
    graph: &Graph,
    tokens: Var,
    cls: &Matrix,
    projection: Var,
    tau_att: f64,
) -> Result<Var> {
    let (d, full) = graph.shape(projection);
    let (_, width) = graph.shape(tokens);
    if full != width || d > width || cls.shape() != (1, width) {
        return Err(Error::shape("student_importance", (d, full), (1, width)));
    }
    let prefix = graph.prefix_cols(tokens, d)?;
    // P·h_CLSᵀ first: d × 1 instead of n × D
    let anchor = graph.matmul(projection, graph.constant(cls.transpose()))?;
    let scores = graph.matmul(prefix, anchor)?;
    let scores = graph.scale(graph.transpose(scores), 1.0 / (width as f64).sqrt());
    graph.softmax_rows(scores, tau_att, None)
}

/// `KL(student ‖ teacher)` over a shared support.
pub fn attention_kl(graph: &Graph, student: Var, teacher: &ImportanceDistribution) -> Result<Var> {
    graph.kl_div(student, &teacher.probs)
}

/// `k_i = min(m, max(k_min, ⌈γ_i·m⌉))` for each ratio.
pub fn topk_schedule(m_effective: usize, gamma: &[f64], k_min: usize) -> Result<Vec<usize>> {
    if gamma.is_empty() {
        return Err(Error::Config("empty top-k ratio schedule".into()));
    }
    if gamma.windows(2).any(|w| w[0] > w[1]) || gamma.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
        return Err(Error::Config(format!(
            "top-k ratios {gamma:?} must be non-decreasing within (0, 1]"
        )));
    }
    Ok(gamma
        .iter()
        .map(|&g| {
            // products like 0.3·10 land a few ulps above the integer
            let raw = (g * m_effective as f64 - 1e-9).ceil() as usize;
            raw.max(k_min).min(m_effective)
        })
        .collect())
}

/// Nested top-`k` sets taken as prefixes of one descending ordering; ties go
/// to the smaller index.
pub fn select_topk(teacher: &ImportanceDistribution, k_values: &[usize]) -> Result<NestedSelection> {
    if k_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract(format!(
            "k values {k_values:?} must be non-decreasing"
        )));
    }
    let mut order: Vec<usize> = (0..teacher.probs.len()).collect();
    order.sort_by(|&a, &b| {
        teacher.probs[b]
            .partial_cmp(&teacher.probs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let index_sets = k_values
        .iter()
        .map(|&k| order[..k.min(order.len())].to_vec())
        .collect();
    Ok(NestedSelection {
        k_values: k_values.to_vec(),
        index_sets,
    })
}

/// Frozen teacher quantities for one sentence at one layer.
#[derive(Clone, Debug)]
pub struct SentenceTeacher {
    pub cls: Matrix,
    pub tokens: Matrix,
    pub importance: ImportanceDistribution,
    pub selection: NestedSelection,
}

/// Frozen teacher quantities for every sentence at one layer.
#[derive(Clone, Debug)]
pub struct LayerTeacher {
    pub layer: usize,
    pub sentences: Vec<SentenceTeacher>,
}

impl LayerTeacher {
    pub fn from_states(graph: &Graph, states: &LayerStates, layer: usize, cfg: &ModelConfig) -> Result<Self> {
        let value = graph.value(states.layer(layer)?);
        let mut sentences = Vec::with_capacity(states.batch_size());
        for b in 0..states.batch_size() {
            let cls = value.select_rows(&[states.row(b, 0)]);
            let tokens = value.select_rows(&states.contextual_rows(b));
            let importance = teacher_importance(&cls, &tokens, layer, cfg.tau_att)?;
            let k_values = topk_schedule(tokens.rows(), &cfg.gamma_schedule, cfg.k_min)?;
            let selection = select_topk(&importance, &k_values)?;
            sentences.push(SentenceTeacher {
                cls,
                tokens,
                importance,
                selection,
            });
        }
        Ok(LayerTeacher { layer, sentences })
    }
}

/// Batch-averaged values of one (layer, prefix) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiaTerm {
    pub layer: usize,
    pub dim: usize,
    pub att: f64,
    pub cka: f64,
    /// Sentences whose CKA term was skipped because fewer than 2 tokens were selected.
    pub cka_skipped: usize,
    /// Sentences whose CKA hit the degenerate guard (counted as loss 1).
    pub cka_degenerate: usize,
}

pub struct SiaLoss {
    /// Attention-matching part, summed over layers.
    pub att: Var,
    /// Structural part, summed over layers.
    pub cka: Var,
    pub total: Var,
    pub terms: Vec<SiaTerm>,
}

/// Alignment loss at one layer, summed over prefixes and averaged over the
/// batch. The full-width prefix is excluded.
pub fn sia_layer_loss(
    graph: &Graph,
    states: &LayerStates,
    layer: usize,
    params: &ParamStore,
    bank: &ProjectionBank,
    cfg: &ModelConfig,
    teacher: &LayerTeacher,
) -> Result<SiaLoss> {
    if !cfg.sia_layers.contains(&layer) {
        return Err(Error::Config(format!("layer {layer} is not an alignment layer")));
    }
    let n = states.batch_size();
    if teacher.sentences.len() != n || teacher.layer != layer {
        return Err(Error::Contract("teacher does not match the batch".into()));
    }
    let state = states.layer(layer)?;
    let inv_batch = 1.0 / n as f64;
    let prefixes = cfg.prefix_dims();
    let mut att_parts = Vec::new();
    let mut cka_parts = Vec::new();
    let mut terms: Vec<SiaTerm> = prefixes
        .iter()
        .map(|&dim| SiaTerm {
            layer,
            dim,
            att: 0.0,
            cka: 0.0,
            cka_skipped: 0,
            cka_degenerate: 0,
        })
        .collect();

    for (b, t) in teacher.sentences.iter().enumerate() {
        let tokens = graph.gather_rows(state, &states.contextual_rows(b))?;
        for (i, &dim) in prefixes.iter().enumerate() {
            let proj = bank.sia_projection(layer, i).ok_or_else(|| {
                Error::Contract(format!("missing projection for layer {layer} prefix {dim}"))
            })?;
            let p = graph.param(params, proj.param);
            let student = student_importance(graph, tokens, &t.cls, p, cfg.tau_att)?;
            let att = attention_kl(graph, student, &t.importance)?;
            terms[i].att += graph.scalar_value(att) * inv_batch;
            att_parts.push(att);

            let set = &t.selection.index_sets[i];
            if set.len() < 2 {
                terms[i].cka_skipped += 1;
                log::debug!("layer {layer} dim {dim} sentence {b}: {} token(s) selected, CKA skipped", set.len());
                continue;
            }
            let student_rows = graph.prefix_cols(graph.gather_rows(tokens, set)?, dim)?;
            let target = t.tokens.select_rows(set);
            let (cka, degenerate) = cka_loss(graph, student_rows, &target)?;
            if degenerate {
                terms[i].cka_degenerate += 1;
            }
            terms[i].cka += graph.scalar_value(cka) * inv_batch;
            cka_parts.push(cka);
        }
    }
    let att = mean_of(graph, &att_parts, inv_batch)?;
    let cka = mean_of(graph, &cka_parts, inv_batch)?;
    let total = graph.add(att, cka)?;
    Ok(SiaLoss {
        att,
        cka,
        total,
        terms,
    })
}

fn mean_of(graph: &Graph, parts: &[Var], scale: f64) -> Result<Var> {
    if parts.is_empty() {
        return Ok(graph.constant(Matrix::scalar(0.0)));
    }
    Ok(graph.scale(graph.add_n(parts)?, scale))
}

/// Sum of [`sia_layer_loss`] over all alignment layers. `teachers`, when
/// given, replaces the teacher quantities derived from `states` (one entry
/// per alignment layer, in order).
pub fn sia_total(
    graph: &Graph,
    states: &LayerStates,
    params: &ParamStore,
    bank: &ProjectionBank,
    cfg: &ModelConfig,
    teachers: Option<&[LayerTeacher]>,
) -> Result<SiaLoss> {
    let mut atts = Vec::new();
    let mut ckas = Vec::new();
    let mut terms = Vec::new();
    for (idx, &layer) in cfg.sia_layers.iter().enumerate() {
        let derived;
        let teacher = match teachers {
            Some(t) => t.get(idx).ok_or_else(|| Error::Contract("missing layer teacher".into()))?,
            None => {
                derived = LayerTeacher::from_states(graph, states, layer, cfg)?;
                &derived
            }
        };
        let loss = sia_layer_loss(graph, states, layer, params, bank, cfg, teacher)?;
        atts.push(loss.att);
        ckas.push(loss.cka);
        terms.extend(loss.terms);
    }
    if atts.is_empty() {
        let zero = graph.constant(Matrix::scalar(0.0));
        return Ok(SiaLoss {
            att: zero,
            cka: zero,
            total: zero,
            terms,
        });
    }
    let att = graph.add_n(&atts)?;
    let cka = graph.add_n(&ckas)?;
    let total = graph.add(att, cka)?;
    Ok(SiaLoss {
        att,
        cka,
        total,
        terms,
    })
}

/// Teachers for every alignment layer, computed from `states`.
pub fn layer_teachers(graph: &Graph, states: &LayerStates, cfg: &ModelConfig) -> Result<Vec<LayerTeacher>> {
    cfg.sia_layers
        .iter()
        .map(|&l| LayerTeacher::from_states(graph, states, l, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Model;
    use crate::tensor::{central_difference, relative_error};
    use crate::vocab::{TokenBatch, CLS_ID};
    use rand::{Rng, SeedableRng};

    fn dist(p: &[f64]) -> ImportanceDistribution {
        ImportanceDistribution {
            probs: p.to_vec(),
            source_layer: 1,
            temperature: 1.0,
        }
    }

    #[test]
    fn teacher_uniform_when_tokens_identical() {
        let cls = Matrix::from_rows(&[[0.3, -0.2, 0.5]]);
        let tokens = Matrix::from_rows(&[[1.0, 2.0, 3.0]; 4]);
        let t = teacher_importance(&cls, &tokens, 1, 1.0).unwrap();
        for p in &t.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn teacher_prefers_aligned_token() {
        let cls = Matrix::from_rows(&[[1.0, 0.0]]);
        let tokens = Matrix::from_rows(&[[0.0, 1.0], [5.0, 0.0], [0.0, -1.0]]);
        let t = teacher_importance(&cls, &tokens, 1, 1.0).unwrap();
        assert!(t.probs[1] > t.probs[0] && t.probs[1] > t.probs[2]);
    }

    #[test]
    fn teacher_matches_direct_evaluation() {
        // D = 2: scores are dot/√2
        let cls = Matrix::from_rows(&[[0.5, -1.0]]);
        let tokens = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]);
        let t = teacher_importance(&cls, &tokens, 1, 1.0).unwrap();
        let s = [0.5 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for (p, v) in t.probs.iter().zip(s) {
            assert!((p - v.exp() / z).abs() < 1e-15);
        }
        assert!(teacher_importance(&cls, &Matrix::zeros(0, 2), 1, 1.0).is_err());
    }

    #[test]
    fn identity_projection_reproduces_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let cls = Matrix::from_rows(&[[0.2, 0.9, -0.4]]);
        let teacher = teacher_importance(&cls, &tokens, 1, 0.7).unwrap();
        let g = Graph::new();
        let tv = g.leaf(tokens);
        let p = g.leaf(Matrix::identity(3));
        let student = student_importance(&g, tv, &cls, p, 0.7).unwrap();
        let kl = attention_kl(&g, student, &teacher).unwrap();
        assert!(g.scalar_value(kl).abs() < 1e-14);

        let zero = g.leaf(Matrix::zeros(2, 3));
        let uniform = student_importance(&g, tv, &cls, zero, 0.7).unwrap();
        assert!(g.value(uniform).data().iter().all(|p| (p - 0.25).abs() < 1e-15));
        let bad = g.leaf(Matrix::zeros(2, 4));
        assert!(student_importance(&g, tv, &cls, bad, 0.7).is_err());
    }

    #[test]
    fn student_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tokens = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let cls = Matrix::from_fn(1, 4, |_, _| rng.random_range(-1.0..1.0));
        let p0 = Matrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
        let teacher = teacher_importance(&cls, &tokens, 1, 1.0).unwrap();
        let eval = |p: &Matrix| {
            let g = Graph::new();
            let tv = g.constant(tokens.clone());
            let pv = g.leaf(p.clone());
            let s = student_importance(&g, tv, &cls, pv, 1.0).unwrap();
            (g.scalar_value(attention_kl(&g, s, &teacher).unwrap()), g, pv, s)
        };
        let (_, g, pv, s) = eval(&p0);
        let kl = attention_kl(&g, s, &teacher).unwrap();
        g.backward(kl).unwrap();
        let numeric = central_difference(&p0, 1e-4, |p| eval(p).0);
        for (a, n) in g.grad(pv).data().iter().zip(numeric.data()) {
            assert!(relative_error(*a, *n, 1e-6) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn kl_examples() {
        let g = Graph::new();
        let s = g.leaf(Matrix::from_rows(&[[0.9, 0.1]]));
        let kl = attention_kl(&g, s, &dist(&[0.5, 0.5])).unwrap();
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((g.scalar_value(kl) - expected).abs() < 1e-15);
        assert!((expected - 0.3681).abs() < 1e-4);
        let same = attention_kl(&g, s, &dist(&[0.9, 0.1])).unwrap();
        assert_eq!(g.scalar_value(same), 0.0);
        assert!(attention_kl(&g, s, &dist(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(topk_schedule(50, &[0.2], 8).unwrap(), vec![10]);
        assert_eq!(topk_schedule(20, &[0.2], 8).unwrap(), vec![8]);
        assert_eq!(topk_schedule(5, &[0.2, 0.7], 8).unwrap(), vec![5, 5]);
        assert_eq!(topk_schedule(10, &[0.3], 1).unwrap(), vec![3]);
        let ratios = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        assert_eq!(
            topk_schedule(100, &ratios, 8).unwrap(),
            vec![20, 30, 40, 50, 60, 70]
        );
        assert!(topk_schedule(10, &[], 8).is_err());
    }

    #[test]
    fn selection_examples() {
        let s = select_topk(&dist(&[0.5, 0.3, 0.2]), &[1, 2]).unwrap();
        assert_eq!(s.index_sets, vec![vec![0], vec![0, 1]]);
        let tied = select_topk(&dist(&[0.4, 0.4, 0.2]), &[1]).unwrap();
        assert_eq!(tied.index_sets, vec![vec![0]]);
        let tail = select_topk(&dist(&[0.1, 0.2, 0.7]), &[1, 2]).unwrap();
        assert_eq!(tail.index_sets, vec![vec![2], vec![2, 1]]);
    }

    fn setup() -> (Model, TokenBatch) {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let batch = TokenBatch::new(&[
            vec![CLS_ID, 3, 4, 5, 6, 7, 8],
            vec![CLS_ID, 9, 10, 11, 4],
            vec![CLS_ID, 5, 6],
        ])
        .unwrap();
        (model, batch)
    }

    #[test]
    fn total_is_sum_of_layers() {
        let (model, batch) = setup();
        let g = Graph::new();
        let states = model.encode(&g, &batch, None).unwrap();
        let total = sia_total(&g, &states, &model.params, &model.bank, &model.config, None).unwrap();
        let mut sum = 0.0;
        for &l in &model.config.sia_layers {
            let t = LayerTeacher::from_states(&g, &states, l, &model.config).unwrap();
            let layer = sia_layer_loss(&g, &states, l, &model.params, &model.bank, &model.config, &t).unwrap();
            sum += g.scalar_value(layer.total);
        }
        assert!((g.scalar_value(total.total) - sum).abs() < 1e-12);
        assert_eq!(total.terms.len(), 2 * 2);
        for t in &total.terms {
            assert!(t.att >= 0.0);
            assert!((0.0..=1.0).contains(&t.cka));
        }
    }

    #[test]
    fn single_layer_total_equals_layer_loss() {
        let (mut model, batch) = setup();
        model.config.sia_layers = vec![2];
        let g = Graph::new();
        let states = model.encode(&g, &batch, None).unwrap();
        let total = sia_total(&g, &states, &model.params, &model.bank, &model.config, None).unwrap();
        let t = LayerTeacher::from_states(&g, &states, 2, &model.config).unwrap();
        let layer = sia_layer_loss(&g, &states, 2, &model.params, &model.bank, &model.config, &t).unwrap();
        assert_eq!(g.scalar_value(total.total), g.scalar_value(layer.total));
        assert!(sia_layer_loss(&g, &states, 1, &model.params, &model.bank, &model.config, &t).is_err());
    }

    #[test]
    fn short_selections_skip_cka() {
        let (mut model, _) = setup();
        model.config.k_min = 1;
        model.config.gamma_schedule = vec![0.1, 0.1];
        let batch = TokenBatch::new(&[vec![CLS_ID, 3, 4], vec![CLS_ID, 5, 6]]).unwrap();
        let g = Graph::new();
        let states = model.encode(&g, &batch, None).unwrap();
        let loss = sia_total(&g, &states, &model.params, &model.bank, &model.config, None).unwrap();
        assert!(loss.terms.iter().all(|t| t.cka_skipped == 2 && t.cka == 0.0));
    }

    #[test]
    fn teacher_path_receives_no_gradient() {
        // Gradient computed with teacher derived from the live states equals
        // the one computed with an externally frozen copy: nothing flows
        // through the teacher.
        let (model, batch) = setup();
        let grads = |frozen: bool| {
            let g = Graph::new();
            let states = model.encode(&g, &batch, None).unwrap();
            let teachers = layer_teachers(&g, &states, &model.config).unwrap();
            let t = frozen.then_some(teachers.as_slice());
            let loss = sia_total(&g, &states, &model.params, &model.bank, &model.config, t).unwrap();
            g.backward(loss.total).unwrap();
            g.param_grads()
        };
        assert_eq!(grads(true), grads(false));
    }

    mod props {
        use super::*;
        use rand::Rng;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn selections_are_nested(raw in prop::collection::vec(0.0f64..1.0, 1..40), m_scale in 1usize..3) {
                let z: f64 = raw.iter().sum::<f64>() + 1e-9;
                let probs: Vec<f64> = raw.iter().map(|v| v / z).collect();
                let m = probs.len();
                let k = topk_schedule(m * m_scale / m_scale, &[0.2, 0.3, 0.4, 0.5, 0.6, 0.7], 8).unwrap();
                let s = select_topk(&dist(&probs), &k).unwrap();
                for w in s.index_sets.windows(2) {
                    prop_assert!(w[0].iter().all(|i| w[1].contains(i)));
                }
                for (set, &k) in s.index_sets.iter().zip(&k) {
                    prop_assert_eq!(set.len(), k.min(m));
                }
            }

            #[test]
            fn kl_is_non_negative(a in prop::collection::vec(0.01f64..1.0, 2..8), seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b: Vec<f64> = a.iter().map(|_| rng.random_range(0.01..1.0)).collect();
                let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
                let (p, q) = (norm(&a), norm(&b));
                let g = Graph::new();
                let s = g.leaf(Matrix::from_vec(1, p.len(), p).unwrap());
                let kl = attention_kl(&g, s, &dist(&q)).unwrap();
                prop_assert!(g.scalar_value(kl) >= -1e-15);
            }
        }
    }
}
