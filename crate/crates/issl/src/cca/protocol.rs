//! Layer-probing protocol: token pooling, per-type sampling caps,
//! stratified train/dev/test splits, and the 3 samples x 3 splits
//! epsilon-grid evaluation that yields one probing score per layer.

use super::{cov_stats, held_out_score, CovStats};
use crate::error::{Error, Result};
use crate::features::corpus::WordSpan;
use crate::numcore::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TokenUnit {
    Phoneme,
    Word,
    Speaker,
}

impl TokenUnit {
    pub fn name(&self) -> &'static str {
        match self {
            TokenUnit::Phoneme => "phoneme",
            TokenUnit::Word => "word",
            TokenUnit::Speaker => "speaker",
        }
    }
}

impl fmt::Display for TokenUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One pooled representation vector with its class label.
#[derive(Debug, Clone)]
pub struct Token {
    pub vector: Vec<f64>,
    pub label: usize,
}

/// A single layer's activations together with alignments already expressed
/// at the activation frame rate.
pub struct AlignedActs<'a> {
    /// T x d activations.
    pub acts: &'a Matrix,
    /// Per-frame phoneme ids, length T.
    pub phone_frames: &'a [usize],
    /// Word spans in activation frames, end exclusive.
    pub word_spans: &'a [WordSpan],
    pub speaker_id: usize,
}

fn mean_span(acts: &Matrix, lo: usize, hi: usize) -> Vec<f64> {
    let d = acts.cols();
    let mut v = vec![0.0f64; d];
    for i in lo..hi {
        for (j, acc) in v.iter_mut().enumerate() {
            *acc += acts.get(i, j);
        }
    }
    let len = (hi - lo) as f64;
    for acc in v.iter_mut() {
        *acc /= len;
    }
    v
}

/// Middle third of a span of length `len`, as offsets within the span.
/// Spans shorter than 3 frames take the single centermost frame.
fn middle_third(len: usize) -> (usize, usize) {
    if len < 3 {
        let c = (len - 1) / 2;
        (c, c + 1)
    } else {
        (len / 3, len - len / 3)
    }
}

/// Pool one utterance's activations into unit tokens: phoneme tokens mean
/// the middle third of each contiguous phoneme run, word tokens mean the
/// whole span, the speaker token means the whole utterance.
pub fn pool_tokens(a: &AlignedActs, unit: TokenUnit) -> Result<Vec<Token>> {
    let t = a.acts.rows();
    let mut tokens = Vec::new();
    match unit {
        TokenUnit::Phoneme => {
            if a.phone_frames.len() != t {
                return Err(Error::Contract(format!(
                    "{} phoneme frames for {} activation frames",
                    a.phone_frames.len(),
                    t
                )));
            }
            let mut start = 0usize;
            while start < t {
                let label = a.phone_frames[start];
                let mut end = start + 1;
                while end < t && a.phone_frames[end] == label {
                    end += 1;
                }
                let (lo, hi) = middle_third(end - start);
                tokens.push(Token { vector: mean_span(a.acts, start + lo, start + hi), label });
                start = end;
            }
        }
        TokenUnit::Word => {
            for span in a.word_spans {
                if span.start >= span.end {
                    log::warn!("skipping empty word span at {}", span.start);
                    continue;
                }
                if span.end > t {
                    return Err(Error::Contract(format!(
                        "word span {}..{} exceeds {} frames",
                        span.start, span.end, t
                    )));
                }
                tokens.push(Token {
                    vector: mean_span(a.acts, span.start, span.end),
                    label: span.word_id,
                });
            }
        }
        TokenUnit::Speaker => {
            if t == 0 {
                log::warn!("skipping empty utterance for speaker pooling");
            } else {
                tokens.push(Token { vector: mean_span(a.acts, 0, t), label: a.speaker_id });
            }
        }
    }
    Ok(tokens)
}

/// Per-unit sampling caps: phonemes keep at most 200 tokens over at most 39
/// types, words 15 over the 500 most frequent types, speakers everything.
fn caps_for(unit: TokenUnit) -> (Option<usize>, Option<usize>) {
    match unit {
        TokenUnit::Phoneme => (Some(200), Some(39)),
        TokenUnit::Word => (Some(15), Some(500)),
        TokenUnit::Speaker => (None, None),
    }
}

/// Sampled evaluation set: one-hot labels over the classes present.
#[derive(Debug, Clone)]
pub struct TokenPool {
    pub vectors: Matrix,
    pub labels: Matrix,
    /// Original class id per one-hot column, ascending.
    pub class_ids: Vec<usize>,
    pub unit: TokenUnit,
}

impl TokenPool {
    pub fn n(&self) -> usize {
        self.vectors.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vectors.rows() != self.labels.rows() {
            return Err(Error::Contract(format!(
                "{} vectors vs {} label rows",
                self.vectors.rows(),
                self.labels.rows()
            )));
        }
        for i in 0..self.labels.rows() {
            let s: f64 = self.labels.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!("label row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    fn class_of(&self, row: usize) -> usize {
        let r = self.labels.row(row);
        r.iter().position(|&v| v == 1.0).expect("one-hot row")
    }
}

/// Apply the unit's caps to a token inventory: keep the most frequent types
/// (ties to the lower id), subsample types over the per-type cap.
pub fn sample_pool<R: Rng>(tokens: &[Token], unit: TokenUnit, rng: &mut R) -> Result<TokenPool> {
    if tokens.is_empty() {
        return Err(Error::InsufficientPoints("empty token inventory".into()));
    }
    let d = tokens[0].vector.len();
    if tokens.iter().any(|t| t.vector.len() != d) {
        return Err(Error::Dimension("tokens have mixed widths".into()));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in tokens.iter().enumerate() {
        by_label.entry(t.label).or_default().push(i);
    }
    let (per_type, max_types) = caps_for(unit);
    let mut types: Vec<usize> = by_label.keys().copied().collect();
    types.sort_by_key(|l| (std::cmp::Reverse(by_label[l].len()), *l));
    if let Some(cap) = max_types {
        types.truncate(cap);
    }
    types.sort_unstable();

    let mut chosen: Vec<usize> = Vec::new();
    for &label in &types {
        let idx = &by_label[&label];
        match per_type {
            Some(cap) if idx.len() > cap => {
                let mut shuffled = idx.clone();
                shuffled.shuffle(rng);
                shuffled.truncate(cap);
                shuffled.sort_unstable();
                chosen.extend_from_slice(&shuffled);
            }
            _ => chosen.extend_from_slice(idx),
        }
    }
    chosen.sort_unstable();

    let n = chosen.len();
    let d_y = types.len();
    if n < d_y {
        log::warn!("token pool has {n} tokens for {d_y} classes");
    }
    let mut vectors = Matrix::zeros(n, d);
    let mut labels = Matrix::zeros(n, d_y);
    for (row, &i) in chosen.iter().enumerate() {
        for (j, &v) in tokens[i].vector.iter().enumerate() {
            vectors.set(row, j, v);
        }
        let col = types.binary_search(&tokens[i].label).expect("label in kept types");
        labels.set(row, col, 1.0);
    }
    Ok(TokenPool { vectors, labels, class_ids: types, unit })
}

#[derive(Debug, Clone)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// 70/15/15 split, stratified by class: each class contributes at least one
/// training token, and its remainder is halved between dev and test.
fn stratified_split<R: Rng>(pool: &TokenPool, rng: &mut R) -> SplitIndices {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..pool.n() {
        by_class.entry(pool.class_of(i)).or_default().push(i);
    }
    let mut split = SplitIndices { train: Vec::new(), dev: Vec::new(), test: Vec::new() };
    for (_, mut idx) in by_class {
        idx.shuffle(rng);
        let n_train = ((idx.len() as f64 * 0.7).floor() as usize).max(1).min(idx.len());
        let rest = idx.len() - n_train;
        let n_dev = rest / 2;
        split.train.extend_from_slice(&idx[..n_train]);
        split.dev.extend_from_slice(&idx[n_train..n_train + n_dev]);
        split.test.extend_from_slice(&idx[n_train + n_dev..]);
    }
    split.train.sort_unstable();
    split.dev.sort_unstable();
    split.test.sort_unstable();
    split
}

fn split_is_degenerate(pool: &TokenPool, s: &SplitIndices) -> bool {
    if s.dev.len() < 2 || s.test.len() < 2 {
        return true;
    }
    let mut seen = vec![false; pool.class_ids.len()];
    for &i in &s.train {
        seen[pool.class_of(i)] = true;
    }
    seen.iter().any(|&v| !v)
}

fn gather(pool: &TokenPool, idx: &[usize]) -> (Matrix, Matrix) {
    let x = Matrix::from_fn(idx.len(), pool.vectors.cols(), |i, j| pool.vectors.get(idx[i], j));
    let y = Matrix::from_fn(idx.len(), pool.labels.cols(), |i, j| pool.labels.get(idx[i], j));
    (x, y)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProtocolConfig {
    pub n_samples: usize,
    pub n_splits: usize,
    pub eps_grid: Vec<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_samples: 3,
            n_splits: 3,
            eps_grid: vec![1e-8, 1e-6, 1e-4, 1e-2, 1e-1],
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FitRecord {
    pub fit_index: usize,
    pub sample_index: usize,
    pub split_index: usize,
    pub eps_x: f64,
    pub eps_y: f64,
    pub score: f64,
}

/// Result of the full evaluation on one (layer, unit): the mean over all
/// sample x split fits plus the per-fit records behind it.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CcaScore {
    pub mean: f64,
    pub fits: Vec<FitRecord>,
}

fn grid_search_fit(
    stats: &CovStats,
    dev_x: &Matrix,
    dev_y: &Matrix,
    grid: &[f64],
) -> Result<(super::CcaModel, f64, f64)> {
    // both eigendecompositions are shared by the whole ridge grid
    let prepared = super::prepare_stats(stats)?;
    let mut best: Option<(f64, f64, f64, super::CcaModel)> = None;
    for &ex in grid {
        for &ey in grid {
            let model = super::cca_fit_prepared(&prepared, ex, ey)?;
            let dev = held_out_score(&model, dev_x, dev_y)?;
            // strict > keeps the first grid pair on ties
            if best.as_ref().map_or(true, |(s, _, _, _)| dev > *s) {
                best = Some((dev, ex, ey, model));
            }
        }
    }
    let (_, ex, ey, model) = best.expect("non-empty grid");
    Ok((model, ex, ey))
}

/// Run the probing protocol on a token inventory: for each of `n_samples`
/// cap-samplings and `n_splits` stratified splits, fit on train over the
/// epsilon grid, select the pair by dev score, and record the test score.
/// The returned mean averages all sample x split fits. A degenerate split
/// is resampled once, then reported as an error.
pub fn cca_evaluate<R: Rng>(
    tokens: &[Token],
    unit: TokenUnit,
    cfg: &ProtocolConfig,
    rng: &mut R,
) -> Result<CcaScore> {
    if cfg.n_samples == 0 || cfg.n_splits == 0 || cfg.eps_grid.is_empty() {
        return Err(Error::Config("protocol needs samples, splits and a grid".into()));
    }
    let mut fits = Vec::with_capacity(cfg.n_samples * cfg.n_splits);
    for sample_index in 0..cfg.n_samples {
        let pool = sample_pool(tokens, unit, rng)?;
        pool.validate()?;
        for split_index in 0..cfg.n_splits {
            let mut split = stratified_split(&pool, rng);
            if split_is_degenerate(&pool, &split) {
                split = stratified_split(&pool, rng);
                if split_is_degenerate(&pool, &split) {
                    return Err(Error::Degenerate(format!(
                        "sample {sample_index} split {split_index}: dev/test too small or class missing from train"
                    )));
                }
            }
            let (train_x, train_y) = gather(&pool, &split.train);
            let (dev_x, dev_y) = gather(&pool, &split.dev);
            let (test_x, test_y) = gather(&pool, &split.test);
            let stats = cov_stats(&train_x, &train_y)?;
            let (model, eps_x, eps_y) = grid_search_fit(&stats, &dev_x, &dev_y, &cfg.eps_grid)?;
            let score = held_out_score(&model, &test_x, &test_y)?;
            fits.push(FitRecord {
                fit_index: fits.len(),
                sample_index,
                split_index,
                eps_x,
                eps_y,
                score,
            });
        }
    }
    let mean = fits.iter().map(|f| f.score).sum::<f64>() / fits.len() as f64;
    Ok(CcaScore { mean, fits })
}

/// Per-layer probing scores for one (model, unit) pair.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CcaReport {
    pub model_id: String,
    pub unit: TokenUnit,
    /// (layer index, score with per-fit records), ascending layers.
    pub layer_scores: Vec<(usize, CcaScore)>,
}

impl CcaReport {
    /// The stored mean must equal the average of its fit records.
    pub fn validate(&self) -> Result<()> {
        for (layer, score) in &self.layer_scores {
            let mean = score.fits.iter().map(|f| f.score).sum::<f64>() / score.fits.len() as f64;
            if mean != score.mean {
                return Err(Error::Contract(format!(
                    "layer {layer}: stored mean {} vs fit mean {mean}",
                    score.mean
                )));
            }
        }
        Ok(())
    }
}

/// One row per fit: model_id, unit, layer, fit_index, sample_index,
/// split_index, eps_x, eps_y, score.
pub fn write_report_csv(path: &Path, reports: &[CcaReport]) -> Result<()> {
    let mut out = String::from("model_id,unit,layer,fit_index,sample_index,split_index,eps_x,eps_y,score\n");
    for rep in reports {
        for (layer, score) in &rep.layer_scores {
            for f in &score.fits {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    rep.model_id,
                    rep.unit,
                    layer,
                    f.fit_index,
                    f.sample_index,
                    f.split_index,
                    f.eps_x,
                    f.eps_y,
                    f.score
                ));
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// One row per (model, unit, layer) with the mean of the fits.
pub fn write_summary_csv(path: &Path, reports: &[CcaReport]) -> Result<()> {
    let mut out = String::from("model_id,unit,layer,score\n");
    for rep in reports {
        for (layer, score) in &rep.layer_scores {
            out.push_str(&format!("{},{},{},{}\n", rep.model_id, rep.unit, layer, score.mean));
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}
