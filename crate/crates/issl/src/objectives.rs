//! Masked-prediction loss over a codebook of pseudo-label embeddings, with
//! two candidate policies: predictive (candidates = whole vocabulary) and
//! contrastive (target plus K negatives drawn from the labels of other
//! masked frames in the same utterance).
//!
//! Per frame the loss is -log softmax of cosine similarities divided by the
//! temperature, taken at the target; reduction is the mean over the masked
//! frames supplied (one utterance per call).

use crate::clustering::PseudoLabelSequence;
use crate::encoder::MaskSpec;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Matrix, NodeId};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Codebook {
    /// V x E trainable label embeddings.
    pub embeddings: Matrix,
    pub temperature: f64,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Seeded codebook init; rows are guaranteed non-zero.
pub fn init_codebook<R: Rng>(v: usize, e: usize, rng: &mut R) -> Result<Matrix> {
    if v < 2 {
        return Err(Error::Config(format!("codebook needs V >= 2, got {v}")));
    }
    let m = Matrix::from_fn(v, e, |_, _| rng.gen::<f64>() * 0.2 - 0.1);
    for i in 0..v {
        if m.row(i).iter().all(|&x| x == 0.0) {
            return Err(Error::Degenerate(format!("codebook row {i} is zero")));
        }
    }
    Ok(m)
}

/// Candidate labels for one masked frame; the target sits at `target_pos`.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub target: usize,
    pub candidates: Vec<usize>,
    pub target_pos: usize,
    /// Frame indices the negatives came from (contrastive policy only).
    pub source_frames: Option<Vec<usize>>,
}

impl CandidateSet {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.target_pos >= self.candidates.len()
            || self.candidates[self.target_pos] != self.target
        {
            return Err(Error::Contract(format!(
                "target {} not at candidate position {}",
                self.target, self.target_pos
            )));
        }
        if let Some(&bad) = self.candidates.iter().find(|&&c| c >= vocab) {
            return Err(Error::Contract(format!("candidate label {bad} outside vocabulary {vocab}")));
        }
        Ok(())
    }
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("cosine_sim: {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine_sim: zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Whole vocabulary as candidates.
pub fn predictive_candidates(vocab: usize, target: usize) -> CandidateSet {
    CandidateSet {
        target,
        candidates: (0..vocab).collect(),
        target_pos: target,
        source_frames: None,
    }
}

/// Target plus K negatives sampled uniformly with replacement from the
/// other masked frames of the same utterance (mapped to their labels).
/// Falls back to the predictive policy when the frame is alone in the mask.
pub fn contrastive_candidates<R: Rng>(
    mask: &MaskSpec,
    labels: &PseudoLabelSequence,
    t: usize,
    k: usize,
    rng: &mut R,
) -> Result<CandidateSet> {
    if !mask.masked_indices.contains(&t) {
        return Err(Error::Contract(format!("frame {t} is not masked")));
    }
    if let Some(&bad) = mask.masked_indices.iter().find(|&&i| i >= labels.labels.len()) {
        return Err(Error::Contract(format!(
            "masked frame {bad} outside {} labels",
            labels.labels.len()
        )));
    }
    let others: Vec<usize> = mask.masked_indices.iter().copied().filter(|&i| i != t).collect();
    if others.is_empty() {
        log::warn!("frame {t}: no other masked frame; falling back to predictive candidates");
        return Ok(predictive_candidates(labels.vocab_size, labels.labels[t]));
    }
    let mut candidates = Vec::with_capacity(k + 1);
    let mut source_frames = Vec::with_capacity(k);
    candidates.push(labels.labels[t]);
    for _ in 0..k {
        let src = others[rng.gen_range(0..others.len())];
        source_frames.push(src);
        candidates.push(labels.labels[src]);
    }
    Ok(CandidateSet {
        target: labels.labels[t],
        candidates,
        target_pos: 0,
        source_frames: Some(source_frames),
    })
}

/// Sorted-accumulation log-sum-exp: permutation-invariant bitwise.
fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut terms: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mx + terms.iter().sum::<f64>().ln()
}

/// Single-frame loss value (no gradients): the test and oracle path.
pub fn masked_loss_value(x: &[f64], cand: &CandidateSet, cb: &Codebook) -> Result<f64> {
    cand.validate(cb.embeddings.rows())?;
    if cb.temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let logits: Vec<f64> = cand
        .candidates
        .iter()
        .map(|&c| cosine_sim(x, cb.embeddings.row(c)).map(|s| s / cb.temperature))
        .collect::<Result<_>>()?;
    Ok(logsumexp(&logits) - logits[cand.target_pos])
}

/// Batched gradient-tracked loss over one utterance's masked frames:
/// mean over frames of -log softmax at the target.
///
/// `x` is n x E (model outputs at the masked frames, row i for cands[i]);
/// `codebook` is the V x E embedding leaf. Frames whose candidate lists
/// share a width are batched together; the result is identical either way.
pub fn masked_loss_graph(
    g: &mut Graph,
    x: NodeId,
    cands: &[CandidateSet],
    codebook: NodeId,
    temperature: f64,
) -> Result<NodeId> {
    let n = g.value(x).rows();
    if n == 0 || cands.len() != n {
        return Err(Error::Contract(format!(
            "masked_loss_graph: {} candidate sets for {n} rows",
            cands.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let vocab = g.value(codebook).rows();
    for c in cands {
        c.validate(vocab)?;
    }
    let xn = g.l2_normalize_rows(x)?;
    let en = g.l2_normalize_rows(codebook)?;
    let et = g.transpose(en);
    let s = g.matmul(xn, et)?;
    let s = g.scale(s, 1.0 / temperature);

    // group frame rows by candidate-list width
    let mut widths: Vec<usize> = cands.iter().map(|c| c.candidates.len()).collect();
    widths.sort_unstable();
    widths.dedup();
    let mut total: Option<NodeId> = None;
    for w in widths {
        let rows: Vec<usize> =
            (0..n).filter(|&i| cands[i].candidates.len() == w).collect();
        let index: Vec<Vec<usize>> = rows.iter().map(|&i| cands[i].candidates.clone()).collect();
        let targets: Vec<usize> = rows.iter().map(|&i| cands[i].target_pos).collect();
        let sub = g.gather_rows(s, rows)?;
        let logits = g.gather_cols_2d(sub, index)?;
        let ls = g.log_softmax_rows(logits);
        let picked = g.pick_entries(ls, targets)?;
        let part = g.sum_all(picked);
        total = Some(match total {
            None => part,
            Some(t) => g.add(t, part)?,
        });
    }
    Ok(g.scale(total.unwrap(), -1.0 / n as f64))
}
