//! Pre-norm transformer encoder exposing every layer's hidden states.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{scaled_normal_matrix, uniform_matrix, ParamGroup, ParamId, ParamStore};
use crate::sia::ProjectionBank;
use crate::tensor::{AttentionLayout, Graph, Matrix, Var};
use crate::vocab::TokenBatch;

const EMBEDDING_INIT_BOUND: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerWeights>,
}

/// Encoder plus the auxiliary projections used only by the training objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: EncoderWeights,
    pub bank: ProjectionBank,
}

impl Model {
    /// Seeded initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.vocab_size <= crate::vocab::UNK_ID {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the special tokens",
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoder = init_encoder(&config, &mut params, &mut rng);
        let bank = ProjectionBank::init(&config, &mut params, &mut rng)?;
        Ok(Model {
            config,
            params,
            encoder,
            bank,
        })
    }

    /// Encoder-only scalar count (what ships for inference).
    pub fn backbone_parameter_count(&self) -> usize {
        self.params.scalar_count_in(ParamGroup::Backbone)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Runs the encoder. `view_seed` seeds the dropout masks; `None` disables
    /// dropout (evaluation mode).
    pub fn encode(&self, graph: &Graph, batch: &TokenBatch, view_seed: Option<u64>) -> Result<LayerStates> {
        let cfg = &self.config;
        let n = batch.batch_size();
        let t = batch.seq_len();
        if n == 0 || t == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if t > cfg.max_len {
            return Err(Error::Input(format!(
                "sequence length {t} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let mut ids = Vec::with_capacity(n * t);
        for row in &batch.token_ids {
            for &id in row {
                if id >= cfg.vocab_size {
                    return Err(Error::Input(format!(
                        "token id {id} outside vocabulary of {}",
                        cfg.vocab_size
                    )));
                }
                ids.push(id);
            }
        }
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();
        let mut dropout = view_seed
            .filter(|_| cfg.dropout > 0.0)
            .map(|s| DropoutSource::new(s, cfg.dropout));

        let p = |id| graph.param(&self.params, id);
        let tok = graph.gather_rows(p(self.encoder.token_embedding), &ids)?;
        let pos = graph.gather_rows(p(self.encoder.position_embedding), &positions)?;
        let mut x = graph.add(tok, pos)?;
        if let Some(d) = dropout.as_mut() {
            x = d.apply(graph, x)?;
        }

        let layout = Rc::new(AttentionLayout {
            batch: n,
            seq: t,
            heads: cfg.num_heads,
            key_mask: batch.attn_mask.iter().flatten().copied().collect(),
        });
        let mut states = Vec::with_capacity(cfg.num_layers + 1);
        states.push(x);
        for lw in &self.encoder.layers {
            let h = graph.layer_norm(x, p(lw.ln1_gamma), p(lw.ln1_beta))?;
            let q = linear(graph, h, p(lw.wq), p(lw.bq))?;
            let k = linear(graph, h, p(lw.wk), p(lw.bk))?;
            let v = linear(graph, h, p(lw.wv), p(lw.bv))?;
            let a = graph.attention(q, k, v, Rc::clone(&layout))?;
            let mut o = linear(graph, a, p(lw.wo), p(lw.bo))?;
            if let Some(d) = dropout.as_mut() {
                o = d.apply(graph, o)?;
            }
            x = graph.add(x, o)?;

            let h2 = graph.layer_norm(x, p(lw.ln2_gamma), p(lw.ln2_beta))?;
            let f = graph.gelu(linear(graph, h2, p(lw.w1), p(lw.b1))?);
            let mut f = linear(graph, f, p(lw.w2), p(lw.b2))?;
            if let Some(d) = dropout.as_mut() {
                f = d.apply(graph, f)?;
            }
            x = graph.add(x, f)?;
            states.push(x);
        }
        Ok(LayerStates {
            states,
            batch: n,
            seq: t,
            lengths: batch.effective_lengths.clone(),
            width: cfg.hidden_dim,
        })
    }
}

fn linear(graph: &Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = graph.matmul(x, w)?;
    graph.add_row(y, b)
}

fn init_encoder(cfg: &ModelConfig, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> EncoderWeights {
    let d = cfg.hidden_dim;
    let mut add = |name: String, m: Matrix| params.add(name, ParamGroup::Backbone, m);
    let token_embedding = add(
        "embed.token".into(),
        uniform_matrix(cfg.vocab_size, d, EMBEDDING_INIT_BOUND, rng),
    );
    let position_embedding = add(
        "embed.position".into(),
        uniform_matrix(cfg.max_len, d, EMBEDDING_INIT_BOUND, rng),
    );
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 1..=cfg.num_layers {
        let name = |s: &str| format!("layer{l}.{s}");
        layers.push(LayerWeights {
            ln1_gamma: add(name("ln1.gamma"), Matrix::filled(1, d, 1.0)),
            ln1_beta: add(name("ln1.beta"), Matrix::zeros(1, d)),
            wq: add(name("attn.wq"), scaled_normal_matrix(d, d, rng)),
            bq: add(name("attn.bq"), Matrix::zeros(1, d)),
            wk: add(name("attn.wk"), scaled_normal_matrix(d, d, rng)),
            bk: add(name("attn.bk"), Matrix::zeros(1, d)),
            wv: add(name("attn.wv"), scaled_normal_matrix(d, d, rng)),
            bv: add(name("attn.bv"), Matrix::zeros(1, d)),
            wo: add(name("attn.wo"), scaled_normal_matrix(d, d, rng)),
            bo: add(name("attn.bo"), Matrix::zeros(1, d)),
            ln2_gamma: add(name("ln2.gamma"), Matrix::filled(1, d, 1.0)),
            ln2_beta: add(name("ln2.beta"), Matrix::zeros(1, d)),
            w1: add(name("ffn.w1"), scaled_normal_matrix(d, cfg.ffn_dim, rng)),
            b1: add(name("ffn.b1"), Matrix::zeros(1, cfg.ffn_dim)),
            w2: add(name("ffn.w2"), scaled_normal_matrix(cfg.ffn_dim, d, rng)),
            b2: add(name("ffn.b2"), Matrix::zeros(1, d)),
        });
    }
    EncoderWeights {
        token_embedding,
        position_embedding,
        layers,
    }
}

/// Bernoulli(keep) masks scaled by `1/keep`, drawn from one seeded stream in
/// a fixed order.
struct DropoutSource {
    rng: ChaCha8Rng,
    keep: f64,
}

impl DropoutSource {
    fn new(seed: u64, p: f64) -> Self {
        DropoutSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
            keep: 1.0 - p,
        }
    }

    fn apply(&mut self, graph: &Graph, x: Var) -> Result<Var> {
        let (r, c) = graph.shape(x);
        let keep = self.keep;
        let rng = &mut self.rng;
        let mask = Matrix::from_fn(r, c, |_, _| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        graph.dropout_with_mask(x, mask)
    }
}

/// Hidden states of every layer for one batch; entry 0 is the embedding
/// output. Each entry is `(batch·seq) × width`, sentence `b` occupying rows
/// `b·seq .. (b+1)·seq`.
#[derive(Clone, Debug)]
pub struct LayerStates {
    states: Vec<Var>,
    batch: usize,
    seq: usize,
    lengths: Vec<usize>,
    width: usize,
}

impl LayerStates {
    /// Number of entries (`num_layers + 1`).
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq
    }

    /// Non-pad tokens of sentence `b`, CLS included.
    pub fn effective_len(&self, b: usize) -> usize {
        self.lengths[b]
    }

    pub fn layer(&self, layer: usize) -> Result<Var> {
        self.states.get(layer).copied().ok_or_else(|| {
            Error::Input(format!(
                "layer {layer} out of range 0..={}",
                self.states.len() - 1
            ))
        })
    }

    /// Absolute row of position `pos` in sentence `b`.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.seq + pos
    }

    /// Rows of sentence `b`'s contextual tokens (positions `1..len`).
    pub fn contextual_rows(&self, b: usize) -> Vec<usize> {
        (1..self.lengths[b]).map(|p| self.row(b, p)).collect()
    }

    /// CLS row of every sentence at `layer`, `batch × width`.
    pub fn pool_cls(&self, graph: &Graph, layer: usize) -> Result<Var> {
        let state = self.layer(layer)?;
        let rows: Vec<usize> = (0..self.batch).map(|b| self.row(b, 0)).collect();
        graph.gather_rows(state, &rows)
    }
}
