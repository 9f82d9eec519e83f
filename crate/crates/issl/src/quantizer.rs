//! Online pseudo-label learner: product quantization over G codebook groups
//! selected by Gumbel softmax, plus the codeword-usage diversity loss.
//!
//! Selection uses Gumbel-perturbed logits at the annealed temperature; the
//! forward value is the hard codeword, the gradient follows the soft
//! distribution (straight-through). Usage statistics for the diversity loss
//! come from the noise-free softmax of the raw logits at temperature 1, so
//! the diversity signal does not depend on the annealing schedule.

use crate::encoder::{BoundParams, ParamSet};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Matrix, NodeId};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerConfig {
    /// G codebook groups.
    pub groups: usize,
    /// V_g codewords per group.
    pub entries_per_group: usize,
    /// Input frame width (conv encoder channels).
    pub input_dim: usize,
    /// Codeword width per group; concatenated width = groups * codeword_dim.
    pub codeword_dim: usize,
    /// Projected target width (the loss compares against this space).
    pub output_dim: usize,
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups < 1 {
            return Err(Error::Config("quantizer needs G >= 1".into()));
        }
        if self.entries_per_group < 2 {
            return Err(Error::Config("quantizer needs V_g >= 2".into()));
        }
        if self.input_dim == 0 || self.codeword_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("quantizer dims must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_vocabulary(&self) -> usize {
        self.entries_per_group.pow(self.groups as u32)
    }

    fn total_entries(&self) -> usize {
        self.groups * self.entries_per_group
    }
}

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_TEMP_START: f64 = 2.0;
pub const DEFAULT_TEMP_END: f64 = 0.5;

/// Linear anneal from `start` at step 0 to `end` at step `total`.
pub fn temperature_at(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let frac = (step as f64 / total as f64).clamp(0.0, 1.0);
    start + (end - start) * frac
}

/// Append the quantizer's trainable matrices to a parameter set.
pub fn push_quantizer_params<R: Rng>(p: &mut ParamSet, cfg: &QuantizerConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let gv = cfg.total_entries();
    let a = (6.0 / (cfg.input_dim + gv) as f64).sqrt();
    p.push("quant.logits.w", Matrix::from_fn(cfg.input_dim, gv, |_, _| rng.gen::<f64>() * 2.0 * a - a));
    p.push("quant.logits.b", Matrix::zeros(1, gv));
    p.push(
        "quant.codewords",
        Matrix::from_fn(gv, cfg.codeword_dim, |_, _| rng.gen::<f64>() * 0.2 - 0.1),
    );
    let d = cfg.groups * cfg.codeword_dim;
    let b = (6.0 / (d + cfg.output_dim) as f64).sqrt();
    p.push("quant.out.w", Matrix::from_fn(d, cfg.output_dim, |_, _| rng.gen::<f64>() * 2.0 * b - b));
    p.push("quant.out.b", Matrix::zeros(1, cfg.output_dim));
    Ok(())
}

/// Standard Gumbel(0,1) noise matrix.
pub fn gumbel_noise<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let u = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
        -(-u.ln()).ln()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Differentiable relaxation: embeddings weighted by the soft
    /// distribution. The finite-difference reference path.
    Soft,
    /// Hard codeword forward, soft gradient (training default).
    StraightThrough,
    /// Hard codeword, no gradient intent (evaluation).
    Hard,
}

pub struct QuantizeNodes {
    /// n x output_dim projected targets.
    pub targets: NodeId,
    /// n x (groups * codeword_dim) concatenated codeword embeddings before
    /// the output projection.
    pub pre_proj: NodeId,
    /// Per group: n x V_g noise-free softmax(logits) at temperature 1.
    pub usage_probs: Vec<NodeId>,
    /// Selected codeword index per frame per group.
    pub codes: Vec<Vec<usize>>,
}

/// Quantize a batch of frames (n x input_dim) in the graph.
/// `noise` must be n x (G * V_g) when present; None selects by raw logits.
pub fn quantize_graph(
    g: &mut Graph,
    bound: &BoundParams,
    frames: NodeId,
    cfg: &QuantizerConfig,
    temperature: f64,
    noise: Option<&Matrix>,
    mode: QuantizeMode,
) -> Result<QuantizeNodes> {
    cfg.validate()?;
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let n = g.value(frames).rows();
    let gv = cfg.total_entries();
    let logits = g.matmul(frames, bound.node("quant.logits.w"))?;
    let logits = g.add_row(logits, bound.node("quant.logits.b"))?;
    let noisy = match noise {
        Some(m) => {
            if m.shape() != (n, gv) {
                return Err(Error::Dimension(format!(
                    "noise {}x{} for {n} frames x {gv} logits",
                    m.rows(),
                    m.cols()
                )));
            }
            let nz = g.leaf(m.clone());
            g.add(logits, nz)?
        }
        None => logits,
    };
    let codewords = bound.node("quant.codewords");
    let vg = cfg.entries_per_group;
    let mut codes = vec![Vec::with_capacity(cfg.groups); n];
    let mut usage_probs = Vec::with_capacity(cfg.groups);
    let mut parts = Vec::with_capacity(cfg.groups);
    for grp in 0..cfg.groups {
        let raw_g = g.slice_cols(logits, grp * vg, vg)?;
        let usage = g.softmax_rows(raw_g);
        usage_probs.push(usage);

        let noisy_g = g.slice_cols(noisy, grp * vg, vg)?;
        let scaled = g.scale(noisy_g, 1.0 / temperature);
        let soft = g.softmax_rows(scaled);
        // selection by the perturbed logits
        let mut hard = Matrix::zeros(n, vg);
        for i in 0..n {
            let row = g.value(noisy_g).row(i);
            let mut best = 0usize;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            codes[i].push(best);
            hard.set(i, best, 1.0);
        }
        let group_rows: Vec<usize> = (grp * vg..(grp + 1) * vg).collect();
        let cw_g = g.gather_rows(codewords, group_rows)?;
        let emb = match mode {
            QuantizeMode::Soft => g.matmul(soft, cw_g)?,
            QuantizeMode::StraightThrough => {
                let gap = hard.sub(g.value(soft))?;
                let gap = g.leaf(gap);
                let st = g.add(soft, gap)?;
                g.matmul(st, cw_g)?
            }
            QuantizeMode::Hard => {
                let h = g.leaf(hard);
                g.matmul(h, cw_g)?
            }
        };
        parts.push(emb);
    }
    let pre_proj = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
    let t = g.matmul(pre_proj, bound.node("quant.out.w"))?;
    let targets = g.add_row(t, bound.node("quant.out.b"))?;
    Ok(QuantizeNodes { targets, pre_proj, usage_probs, codes })
}

/// Single-frame quantization at the value level. With an RNG, selection is
/// Gumbel-perturbed; without one it is the plain argmax (evaluation mode).
/// Returns (codes per group, concatenated codeword embedding, usage probs).
pub fn quantize<R: Rng>(
    frame: &[f64],
    params: &ParamSet,
    cfg: &QuantizerConfig,
    temperature: f64,
    rng: Option<&mut R>,
) -> Result<(Vec<usize>, Vec<f64>, Matrix)> {
    cfg.validate()?;
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let w = params.get("quant.logits.w");
    let b = params.get("quant.logits.b");
    if frame.len() != w.rows() {
        return Err(Error::Dimension(format!("frame dim {} vs {}", frame.len(), w.rows())));
    }
    let gv = cfg.total_entries();
    let mut logits = vec![0.0f64; gv];
    for (j, l) in logits.iter_mut().enumerate() {
        let mut acc = b.get(0, j);
        for (i, &x) in frame.iter().enumerate() {
            acc += x * w.get(i, j);
        }
        *l = acc;
    }
    let noisy: Vec<f64> = match rng {
        Some(r) => logits
            .iter()
            .map(|&l| {
                let u = r.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
                l - (-u.ln()).ln()
            })
            .collect(),
        None => logits.clone(),
    };
    let vg = cfg.entries_per_group;
    let codewords = params.get("quant.codewords");
    let mut codes = Vec::with_capacity(cfg.groups);
    let mut embedding = Vec::with_capacity(cfg.groups * cfg.codeword_dim);
    let mut probs = Matrix::zeros(cfg.groups, vg);
    for grp in 0..cfg.groups {
        let lo = grp * vg;
        let mut best = 0usize;
        for j in 1..vg {
            if noisy[lo + j] > noisy[lo + best] {
                best = j;
            }
        }
        codes.push(best);
        embedding.extend_from_slice(codewords.row(lo + best));
        let mx = logits[lo..lo + vg].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits[lo..lo + vg].iter().map(|&l| (l - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            probs.set(grp, j, e / z);
        }
    }
    Ok((codes, embedding, probs))
}

/// Batch-averaged codeword probabilities, one row per group.
#[derive(Debug, Clone)]
pub struct UsageStats {
    pub mean_probs: Matrix,
}

impl UsageStats {
    pub fn new(mean_probs: Matrix) -> Self {
        UsageStats { mean_probs }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.mean_probs.rows() {
            let s: f64 = self.mean_probs.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("usage row {i} sums to {s}")));
            }
            if self.mean_probs.row(i).iter().any(|&p| p < 0.0) {
                return Err(Error::Contract(format!("usage row {i} has negative entries")));
            }
        }
        Ok(())
    }
}

/// L_d = (G V_g - sum_g exp(H(p_g))) / (G V_g) with natural-log entropy.
pub fn diversity_loss(stats: &UsageStats) -> Result<f64> {
    stats.validate()?;
    let (g, vg) = stats.mean_probs.shape();
    let mut total = 0.0;
    for i in 0..g {
        let h: f64 = stats.mean_probs.row(i).iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
        total += h.exp();
    }
    Ok((g as f64 * vg as f64 - total) / (g as f64 * vg as f64))
}

/// Gradient-tracked diversity loss from per-group probability nodes
/// (each n x V_g).
pub fn diversity_loss_graph(g: &mut Graph, usage_probs: &[NodeId]) -> Result<NodeId> {
    if usage_probs.is_empty() {
        return Err(Error::Contract("diversity_loss_graph: no groups".into()));
    }
    let means: Vec<NodeId> = usage_probs.iter().map(|&p| g.mean_rows(p)).collect();
    diversity_loss_from_mean_probs(g, &means)
}

/// Same loss from per-group mean probability nodes (each 1 x V_g), for
/// callers that pool the per-frame probabilities themselves (e.g. a
/// frame-weighted mean over several utterances).
pub fn diversity_loss_from_mean_probs(g: &mut Graph, mean_probs: &[NodeId]) -> Result<NodeId> {
    if mean_probs.is_empty() {
        return Err(Error::Contract("diversity_loss_from_mean_probs: no groups".into()));
    }
    let vg = g.value(mean_probs[0]).cols();
    let groups = mean_probs.len();
    let mut total: Option<NodeId> = None;
    for &mean in mean_probs {
        if g.value(mean).rows() != 1 {
            return Err(Error::Contract("mean probability node must have one row".into()));
        }
        let lnp = g.ln(mean);
        let plnp = g.hadamard(mean, lnp)?;
        let s = g.sum_all(plnp);
        let ent = g.scale(s, -1.0);
        let e = g.exp(ent);
        total = Some(match total {
            None => e,
            Some(t) => g.add(t, e)?,
        });
    }
    let scaled = g.scale(total.unwrap(), -1.0 / (groups * vg) as f64);
    Ok(g.add_scalar(scaled, 1.0))
}

/// masked + alpha * diversity.
pub fn combined_loss(masked: f64, diversity: f64, alpha: f64) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    Ok(masked + alpha * diversity)
}
