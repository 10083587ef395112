//! Corpus loading and the seeded training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::TrainConfig;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::objective::{mipic_loss, LossBreakdown};
use crate::optim::{learning_rate, AdamW};
use crate::tensor::Graph;
use crate::vocab::{TokenBatch, Vocabulary};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.json";

/// Tokenized training sentences with the vocabulary that produced them.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub sentences: Vec<Vec<usize>>,
}

/// Reads one sentence per line (blank lines skipped). The vocabulary is
/// built from the corpus unless one is given.
pub fn load_corpus(path: &Path, vocab: Option<&Vocabulary>, max_len: usize) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::Input(format!("{}: corpus is empty", path.display())));
    }
    if max_len < 2 {
        return Err(Error::Config("max_len must leave room for CLS and one token".into()));
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocabulary::build(lines.iter().copied()),
    };
    let sentences = lines.iter().map(|l| vocab.encode(l, max_len)).collect();
    Ok(Corpus { vocab, sentences })
}

/// Dropout seed for one view of one step, mixed with SplitMix64 so nearby
/// steps get unrelated masks.
pub fn view_seed(seed: u64, step: usize, view: u64) -> u64 {
    let mut z = seed
        .wrapping_add((step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(view.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One trace line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub learning_rate: f64,
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub trace: Vec<TraceRecord>,
    /// Mean wall time per optimizer step, seconds. Kept out of the trace.
    pub seconds_per_step: f64,
    pub optimizer: AdamW,
    pub checkpoints: Vec<PathBuf>,
}

/// Number of optimizer steps the config asks for on `n` sentences.
pub fn total_steps(cfg: &TrainConfig, n: usize) -> usize {
    let per_epoch = n.div_ceil(cfg.batch_size);
    let steps = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(steps, |m| m.min(steps))
}

/// Trains `model` in place. With `out`, writes the trace, periodic
/// checkpoints and the final checkpoint there.
pub fn train(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    if corpus.vocab.len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary has {} entries, model expects {}",
            corpus.vocab.len(),
            model.config.vocab_size
        )));
    }
    let ablation = cfg.ablation();
    let n = corpus.sentences.len();
    let total = total_steps(cfg, n);
    let mut optimizer = AdamW::new(&model.params, cfg.betas, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace_out = match out {
        Some(dir) => {
            let path = dir.join(TRACE_FILE);
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let mut trace = Vec::with_capacity(total);
    let mut checkpoints = Vec::new();
    let started = Instant::now();
    let mut step = 0;
    log::info!(
        "training {} ({} sentences, {total} steps, batch {})",
        ablation.label(),
        n,
        cfg.batch_size
    );

    'epochs: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| corpus.sentences[i].clone()).collect();
            let batch = TokenBatch::new(&seqs)?;
            let views = [Some(view_seed(cfg.seed, step, 0)), Some(view_seed(cfg.seed, step, 1))];
            let graph = Graph::new();
            let (terms, mut loss) =
                mipic_loss(&graph, model, &batch, ablation, views, None).map_err(|e| match e {
                    Error::NonFinite { term, .. } => Error::NonFinite { term, step },
                    other => other,
                })?;
            loss.step = step;
            if let Some(term) = loss.first_non_finite() {
                return Err(Error::NonFinite { term, step });
            }
            graph.backward(terms.total)?;
            let grads = graph.param_grads();
            if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
                return Err(Error::NonFinite {
                    term: format!("gradient of {}", model.params.name(*id)),
                    step,
                });
            }
            let lr = learning_rate(cfg.schedule, cfg.learning_rate, step, total);
            optimizer.update(&mut model.params, &grads, lr)?;

            let record = TraceRecord {
                loss,
                learning_rate: lr,
            };
            if let Some((w, path)) = trace_out.as_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            }
            if step % 50 == 0 {
                log::info!("step {step}: loss {:.4} lr {lr:.2e}", record.loss.total);
            }
            trace.push(record);
            step += 1;
            if let Some(dir) = out {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < total {
                    let path = dir.join(format!("checkpoint-{step}.json"));
                    let opt = cfg.save_optimizer_state.then_some(&optimizer);
                    save_checkpoint(&path, model, &corpus.vocab, step, opt)?;
                    checkpoints.push(path);
                }
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    if let Some((mut w, path)) = trace_out {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out {
        let path = dir.join(FINAL_CHECKPOINT);
        let opt = cfg.save_optimizer_state.then_some(&optimizer);
        save_checkpoint(&path, model, &corpus.vocab, step, opt)?;
        checkpoints.push(path);
    }
    Ok(TrainSummary {
        steps: step,
        trace,
        seconds_per_step: elapsed / step.max(1) as f64,
        optimizer,
        checkpoints,
    })
}

/// Median of `window`-step blocks of total loss (the last block may be shorter).
pub fn block_medians(trace: &[TraceRecord], window: usize) -> Vec<f64> {
    trace
        .chunks(window.max(1))
        .map(|c| {
            let mut v: Vec<f64> = c.iter().map(|r| r.loss.total).collect();
            v.sort_by(f64::total_cmp);
            let m = v.len();
            if m % 2 == 1 {
                v[m / 2]
            } else {
                0.5 * (v[m / 2 - 1] + v[m / 2])
            }
        })
        .collect()
}
