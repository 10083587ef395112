//! Prefix-embedding evaluation: STS Spearman, pair threshold accuracy and a
//! logistic-regression probe for classification.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix};
use crate::vocab::{TokenBatch, Vocabulary};

const EMBED_CHUNK: usize = 64;

pub const PROBE_LAMBDA: f64 = 1e-3;
pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
/// Every `PROBE_TEST_EVERY`-th classification row is held out for testing.
pub const PROBE_TEST_EVERY: usize = 5;

/// Final-layer CLS embeddings truncated to `dim` and L2-normalized, one row
/// per sentence. Dropout is off.
pub fn embed(model: &Model, vocab: &Vocabulary, sentences: &[String], dim: usize) -> Result<Matrix> {
    let raw = embed_raw(model, vocab, sentences)?;
    normalize_prefix(&raw, dim, &model.config.nested_dims)
}

/// Unnormalized full-width final-layer CLS rows.
pub fn embed_raw(model: &Model, vocab: &Vocabulary, sentences: &[String]) -> Result<Matrix> {
    let d = model.config.hidden_dim;
    let mut out = Matrix::zeros(sentences.len(), d);
    for (c, chunk) in sentences.chunks(EMBED_CHUNK).enumerate() {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|s| vocab.encode(s, model.config.max_len)).collect();
        let batch = TokenBatch::new(&seqs)?;
        let g = Graph::new();
        let states = model.encode(&g, &batch, None)?;
        let cls = g.value(states.pool_cls(&g, model.config.num_layers)?);
        for r in 0..chunk.len() {
            out.row_mut(c * EMBED_CHUNK + r).copy_from_slice(cls.row(r));
        }
    }
    Ok(out)
}

/// First `dim` columns of `raw`, rows scaled to unit norm.
pub fn normalize_prefix(raw: &Matrix, dim: usize, nested_dims: &[usize]) -> Result<Matrix> {
    if !nested_dims.contains(&dim) {
        return Err(Error::Config(format!("dim {dim} is not one of {nested_dims:?}")));
    }
    let mut m = raw.slice_cols(0, dim);
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > crate::tensor::NORM_EPS) {
            return Err(Error::Degenerate(format!("embedding {r} has zero norm at dim {dim}")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(m)
}

/// Cosine similarity of matching rows of two unit-norm matrices.
pub fn row_cosines(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..a.rows())
        .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum())
        .collect()
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input(format!(
            "correlation needs two equal-length inputs of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant vector is undefined".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson of average ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in correlation input".into()));
    }
    pearson(&average_ranks(pred), &average_ranks(gold))
}

/// Best accuracy of `sim > t` as a positive prediction, over `t` in
/// {−∞, midpoints of sorted unique sims, +∞}. Ties go to the lower threshold.
pub fn pair_threshold_accuracy(sims: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if sims.is_empty() || sims.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} similarities for {} labels",
            sims.len(),
            labels.len()
        )));
    }
    let mut pairs: Vec<(f64, bool)> = sims.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    // threshold below everything: all predicted positive
    let mut correct = pairs.iter().filter(|p| p.1).count();
    let mut best = (f64::NEG_INFINITY, correct);
    let mut i = 0;
    while i < n {
        let v = pairs[i].0;
        let mut j = i;
        // moving the threshold past this group flips it to negative
        while j < n && pairs[j].0 == v {
            correct = if pairs[j].1 { correct - 1 } else { correct + 1 };
            j += 1;
        }
        let threshold = if j < n { 0.5 * (v + pairs[j].0) } else { f64::INFINITY };
        if correct > best.1 {
            best = (threshold, correct);
        }
        i = j;
    }
    Ok((best.0, best.1 as f64 / n as f64))
}

/// Multinomial logistic regression on frozen features; returns macro-F1 on
/// the test rows. Classes absent from training can never be predicted.
pub fn logistic_probe(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
) -> Result<f64> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() || train_x.cols() != test_x.cols() {
        return Err(Error::Input("probe features and labels do not line up".into()));
    }
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = train_y.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return Err(Error::Input("probe needs at least two classes in training".into()));
    }
    for y in test_y {
        if !classes.contains(y) {
            log::warn!("class {y} appears in test but not in training; it is always scored wrong");
        }
    }
    let k = classes.len();
    let (n, d) = (train_x.rows(), train_x.cols());
    let target: Vec<usize> = train_y
        .iter()
        .map(|y| classes.binary_search(y).expect("class from training set"))
        .collect();
    let (train_x, test_x) = standardize(train_x, test_x);
    let mut w = Matrix::zeros(d, k);
    let mut b = vec![0.0; k];
    let mut probs = Matrix::zeros(n, k);
    for _ in 0..PROBE_ITERATIONS {
        let logits = train_x.matmul(&w)?;
        for r in 0..n {
            let row: Vec<f64> = logits.row(r).iter().zip(&b).map(|(l, bb)| l + bb).collect();
            crate::tensor::softmax_into(&row, 1.0, None, probs.row_mut(r))
                .map_err(|_| Error::Degenerate("empty probe logits".into()))?;
            probs.row_mut(r)[target[r]] -= 1.0;
        }
        let gw = train_x.matmul_tn(&probs)?;
        for (wv, g) in w.data_mut().iter_mut().zip(gw.data()) {
            *wv -= PROBE_LR * (g / n as f64 + PROBE_LAMBDA * *wv);
        }
        for c in 0..k {
            let gb: f64 = (0..n).map(|r| probs[(r, c)]).sum::<f64>() / n as f64;
            b[c] -= PROBE_LR * gb;
        }
    }
    let logits = test_x.matmul(&w)?;
    let predicted: Vec<usize> = (0..test_x.rows())
        .map(|r| {
            let mut best = 0;
            for c in 1..k {
                if logits[(r, c)] + b[c] > logits[(r, best)] + b[best] {
                    best = c;
                }
            }
            classes[best]
        })
        .collect();
    Ok(macro_f1(test_y, &predicted))
}

/// Z-scores both splits with the training split's per-feature mean and
/// standard deviation; constant features become 0.
fn standardize(train: &Matrix, test: &Matrix) -> (Matrix, Matrix) {
    let n = train.rows() as f64;
    let mut mean = vec![0.0; train.cols()];
    for r in 0..train.rows() {
        mean.iter_mut().zip(train.row(r)).for_each(|(m, v)| *m += v / n);
    }
    let mut inv_std = vec![0.0; train.cols()];
    for (c, s) in inv_std.iter_mut().enumerate() {
        let var = (0..train.rows()).map(|r| (train[(r, c)] - mean[c]).powi(2)).sum::<f64>() / n;
        *s = if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 };
    }
    let apply = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |r, c| (m[(r, c)] - mean[c]) * inv_std[c]);
    (apply(train), apply(test))
}

/// Unweighted mean of per-class F1 over every class seen in `truth` or
/// `predicted`.
pub fn macro_f1(truth: &[usize], predicted: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(predicted) {
        if t == p {
            counts.entry(t).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(t).or_default().2 += 1;
        }
    }
    if counts.is_empty() {
        return 0.0;
    }
    let total: f64 = counts
        .values()
        .map(|&(tp, fp, fneg)| {
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
            }
        })
        .sum();
    total / counts.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentencePair {
    pub a: String,
    pub b: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub sentence: String,
    pub label: String,
}

fn read_rows(path: &Path, fields: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<String> = line.split('\t').map(str::to_string).collect();
        if parts.len() != fields {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {fields} tab-separated fields, found {}", parts.len()),
            });
        }
        rows.push((i + 1, parts));
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}

/// `sent1<TAB>sent2<TAB>score`.
pub fn read_sts(path: &Path) -> Result<Vec<SentencePair>> {
    read_rows(path, 3)?
        .into_iter()
        .map(|(line, mut p)| {
            let value = p[2].trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("score {:?} is not a real number", p[2]),
            })?;
            let b = p.swap_remove(1);
            let a = p.swap_remove(0);
            Ok(SentencePair { a, b, value })
        })
        .collect()
}

/// `sent1<TAB>sent2<TAB>0|1`.
pub fn read_pairs(path: &Path) -> Result<Vec<SentencePair>> {
    read_rows(path, 3)?
        .into_iter()
        .map(|(line, mut p)| {
            let value = match p[2].trim() {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        msg: format!("label {other:?} is not 0 or 1"),
                    })
                }
            };
            let b = p.swap_remove(1);
            let a = p.swap_remove(0);
            Ok(SentencePair { a, b, value })
        })
        .collect()
}

/// `sentence<TAB>label`.
pub fn read_classification(path: &Path) -> Result<Vec<Labeled>> {
    read_rows(path, 2)?
        .into_iter()
        .map(|(line, mut p)| {
            let label = p.pop().expect("two fields").trim().to_string();
            if label.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: "empty label".into(),
                });
            }
            Ok(Labeled {
                sentence: p.pop().expect("two fields"),
                label,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Spearman,
    PairAccuracy,
    ProbeF1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Spearman => "spearman",
            Metric::PairAccuracy => "pair_accuracy",
            Metric::ProbeF1 => "probe_f1",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimValue {
    pub dim: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub dataset: String,
    pub metric: Metric,
    pub rows: Vec<DimValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// sha256 of the checkpoint file.
    pub checkpoint: String,
    pub seed: u64,
    pub tables: Vec<MetricTable>,
}

impl EvalReport {
    pub fn value(&self, metric: Metric, dim: usize) -> Option<f64> {
        self.tables
            .iter()
            .find(|t| t.metric == metric)?
            .rows
            .iter()
            .find(|r| r.dim == dim)
            .map(|r| r.value)
    }

    /// `dataset,metric,dim,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,metric,dim,value\n");
        for t in &self.tables {
            for r in &t.rows {
                let _ = writeln!(s, "{},{},{},{}", t.dataset, t.metric.name(), r.dim, r.value);
            }
        }
        s
    }

    /// `metric<TAB>dim<TAB>value` series for plotting.
    pub fn plot_data(&self) -> String {
        let mut s = String::from("# dataset\tmetric\tdim\tvalue\n");
        for t in &self.tables {
            for r in &t.rows {
                let _ = writeln!(s, "{}\t{}\t{}\t{}", t.dataset, t.metric.name(), r.dim, r.value);
            }
        }
        s
    }
}

/// Dataset files to evaluate; any subset may be given.
#[derive(Clone, Debug, Default)]
pub struct EvalInputs {
    pub sts: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub classification: Option<PathBuf>,
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Runs each given dataset's metric at every dim in `dims`.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    inputs: &EvalInputs,
    dims: &[usize],
    checkpoint: &str,
    seed: u64,
) -> Result<EvalReport> {
    if dims.is_empty() {
        return Err(Error::Config("no evaluation dims".into()));
    }
    for d in dims {
        if !model.config.nested_dims.contains(d) {
            return Err(Error::Config(format!(
                "dim {d} is not one of {:?}",
                model.config.nested_dims
            )));
        }
    }
    let mut tables = Vec::new();
    let pair_tables = [(&inputs.sts, Metric::Spearman), (&inputs.pairs, Metric::PairAccuracy)];
    for (path, metric) in pair_tables {
        let Some(path) = path else { continue };
        let rows = match metric {
            Metric::Spearman => read_sts(path)?,
            _ => read_pairs(path)?,
        };
        let a: Vec<String> = rows.iter().map(|r| r.a.clone()).collect();
        let b: Vec<String> = rows.iter().map(|r| r.b.clone()).collect();
        let gold: Vec<f64> = rows.iter().map(|r| r.value).collect();
        let (ra, rb) = (embed_raw(model, vocab, &a)?, embed_raw(model, vocab, &b)?);
        let mut out = Vec::with_capacity(dims.len());
        for &dim in dims {
            let ea = normalize_prefix(&ra, dim, &model.config.nested_dims)?;
            let eb = normalize_prefix(&rb, dim, &model.config.nested_dims)?;
            let sims = row_cosines(&ea, &eb);
            let value = match metric {
                Metric::Spearman => spearman(&sims, &gold)?,
                _ => {
                    let labels: Vec<bool> = gold.iter().map(|&g| g == 1.0).collect();
                    pair_threshold_accuracy(&sims, &labels)?.1
                }
            };
            out.push(DimValue { dim, value });
        }
        tables.push(MetricTable {
            dataset: dataset_name(path),
            metric,
            rows: out,
        });
    }
    if let Some(path) = &inputs.classification {
        let rows = read_classification(path)?;
        let mut label_ids: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &rows {
            let next = label_ids.len();
            label_ids.entry(r.label.as_str()).or_insert(next);
        }
        let sentences: Vec<String> = rows.iter().map(|r| r.sentence.clone()).collect();
        let raw = embed_raw(model, vocab, &sentences)?;
        let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
        for i in 0..rows.len() {
            if i % PROBE_TEST_EVERY == PROBE_TEST_EVERY - 1 {
                test_idx.push(i);
            } else {
                train_idx.push(i);
            }
        }
        if test_idx.is_empty() {
            return Err(Error::Input(format!(
                "{}: need at least {PROBE_TEST_EVERY} rows to hold out a test split",
                path.display()
            )));
        }
        let ids = |idx: &[usize]| idx.iter().map(|&i| label_ids[rows[i].label.as_str()]).collect::<Vec<_>>();
        let mut out = Vec::with_capacity(dims.len());
        for &dim in dims {
            let e = normalize_prefix(&raw, dim, &model.config.nested_dims)?;
            let value = logistic_probe(
                &e.select_rows(&train_idx),
                &ids(&train_idx),
                &e.select_rows(&test_idx),
                &ids(&test_idx),
            )?;
            out.push(DimValue { dim, value });
        }
        tables.push(MetricTable {
            dataset: dataset_name(path),
            metric: Metric::ProbeF1,
            rows: out,
        });
    }
    if tables.is_empty() {
        return Err(Error::Config("no evaluation dataset given".into()));
    }
    Ok(EvalReport {
        checkpoint: checkpoint.to_string(),
        seed,
        tables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ranks [1, 2.5, 2.5, 4] against [1, 2, 3, 4]
        let expected = 4.5 / (5.0f64.sqrt() * 4.5f64.sqrt());
        assert!((spearman(&[1.0, 2.0, 2.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &a[..3]), Err(Error::Degenerate(_))));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_monotone_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = spearman(&x, &y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| (3.0 * v).exp()).collect();
        assert!((spearman(&tx, &y).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let (t, acc) = pair_threshold_accuracy(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(acc, 1.0);
        assert!((t - 0.5).abs() < 1e-15);
        let (t, acc) = pair_threshold_accuracy(&[0.5, 0.5], &[true, true]).unwrap();
        assert_eq!((t, acc), (f64::NEG_INFINITY, 1.0));
        let (t, acc) = pair_threshold_accuracy(&[0.5, 0.6], &[false, false]).unwrap();
        assert_eq!((t, acc), (f64::INFINITY, 1.0));
        assert!(pair_threshold_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn probe_separable_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut make = |n: usize| {
            let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let x = Matrix::from_fn(n, 3, |r, c| {
                let centre = if y[r] == 0 { -1.0 } else { 1.0 };
                if c == 0 { centre + rng.random_range(-0.3..0.3) } else { rng.random_range(-1.0..1.0) }
            });
            (x, y)
        };
        let (tx, ty) = make(60);
        let (vx, vy) = make(20);
        let f1 = logistic_probe(&tx, &ty, &vx, &vy).unwrap();
        assert!(f1 > 0.95, "{f1}");
        assert_eq!(f1, logistic_probe(&tx, &ty, &vx, &vy).unwrap());
        assert!(logistic_probe(&tx, &vec![0; 60], &vx, &vy).is_err());
    }

    #[test]
    fn probe_ignores_feature_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::from_fn(40, 3, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<usize> = (0..40).map(|r| usize::from(x[(r, 0)] + 0.5 * x[(r, 1)] > 0.0)).collect();
        let (tx, vx) = (x.select_rows(&(0..30).collect::<Vec<_>>()), x.select_rows(&(30..40).collect::<Vec<_>>()));
        let base = logistic_probe(&tx, &y[..30], &vx, &y[30..]).unwrap();
        let stretch = |m: &Matrix| Matrix::from_fn(m.rows(), 3, |r, c| m[(r, c)] * [0.01, 50.0, 1.0][c] + 3.0);
        let scaled = logistic_probe(&stretch(&tx), &y[..30], &stretch(&vx), &y[30..]).unwrap();
        assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
        assert!(base > 0.7, "{base}");
    }

    #[test]
    fn unseen_test_class_scores_zero() {
        let x = Matrix::from_rows(&[[1.0], [-1.0], [1.0], [-1.0]]);
        let test = Matrix::from_rows(&[[1.0], [0.0]]);
        let f1 = logistic_probe(&x, &[0, 1, 0, 1], &test, &[0, 2]).unwrap();
        // class 0 right (F1 1), class 2 never predicted (F1 0), the wrong guess lands on 0 or 1
        assert!(f1 < 0.7, "{f1}");
    }

    #[test]
    fn macro_f1_example() {
        // class 0: tp 1, fp 1, fn 0 -> 2/3; class 1: tp 1, fp 0, fn 1 -> 2/3
        let f = macro_f1(&[0, 1, 1], &[0, 0, 1]);
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    fn fixture() -> (Model, Vocabulary) {
        let vocab = Vocabulary::build(["a b c d e f g h"]);
        let mut cfg = ModelConfig::tiny();
        cfg.vocab_size = vocab.len();
        (Model::new(cfg).unwrap(), vocab)
    }

    #[test]
    fn embeddings_are_nested_prefixes() {
        let (model, vocab) = fixture();
        let s: Vec<String> = ["a b c", "d e", "f g h a"].iter().map(|s| s.to_string()).collect();
        let raw = embed_raw(&model, &vocab, &s).unwrap();
        let small = embed(&model, &vocab, &s, 4).unwrap();
        for r in 0..3 {
            let norm = raw.row(r)[..4].iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..4 {
                assert!((small[(r, c)] * norm - raw[(r, c)]).abs() < 1e-12);
            }
        }
        assert_eq!(embed(&model, &vocab, &s, 8).unwrap(), embed(&model, &vocab, &s, 8).unwrap());
        assert!(embed(&model, &vocab, &s, 3).is_err());
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sts.tsv");
        std::fs::write(&p, "a b\tc d\t0.5\nbroken line\n").unwrap();
        match read_sts(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "a\tb\tx\n").unwrap();
        assert!(matches!(read_sts(&p), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&p, "a\tb\t2\n").unwrap();
        assert!(matches!(read_pairs(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn evaluate_shapes_and_repeatability() {
        let (model, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let sts = dir.path().join("sts.tsv");
        std::fs::write(&sts, "a b c\ta b d\t1.0\na b\tg h\t0.0\nc d e\tc d f\t0.5\n").unwrap();
        let cls = dir.path().join("cls.tsv");
        let mut text = String::new();
        for i in 0..10 {
            text.push_str(if i % 2 == 0 { "a b c\tx\n" } else { "f g h\ty\n" });
        }
        std::fs::write(&cls, text).unwrap();
        let inputs = EvalInputs {
            sts: Some(sts),
            pairs: None,
            classification: Some(cls),
        };
        let r1 = evaluate(&model, &vocab, &inputs, &[2, 4, 8], "abc", 0).unwrap();
        assert_eq!(r1.tables.len(), 2);
        assert_eq!(r1.tables[0].rows.len(), 3);
        assert_eq!(r1, evaluate(&model, &vocab, &inputs, &[2, 4, 8], "abc", 0).unwrap());
        assert!(r1.to_csv().lines().count() == 7);
        assert!(evaluate(&model, &vocab, &EvalInputs::default(), &[2], "abc", 0).is_err());
    }
}
