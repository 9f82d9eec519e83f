//! Waveform encoder: strided 1-D convolutions, span masking with a learned
//! mask embedding, sinusoidal positions, pre-norm Transformer blocks, and a
//! projection head for the similarity losses.
//!
//! Parameters live in a [`ParamSet`] (stable name order); a forward pass
//! binds them as graph leaves so one backward call yields every gradient.
//! Utterances are processed one at a time, so cross-utterance leakage is
//! structurally impossible.

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numcore::{Graph, Matrix, NodeId};
use rand::Rng;
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// (out_channels, kernel, stride) per conv layer; input has 1 channel.
    pub conv_layers: Vec<(usize, usize, usize)>,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub final_proj_dim: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            // total stride 40 = the feature hop at 4 kHz, so model frames
            // line up 1:1 with 100 Hz alignment frames; receptive field 105
            // samples, about one analysis window
            conv_layers: vec![(24, 10, 5), (32, 8, 4), (32, 4, 2)],
            model_dim: 32,
            num_layers: 6,
            num_heads: 4,
            ffn_dim: 128,
            // wide enough that random-direction cosines stay small and the
            // first predictive loss lands near log V
            final_proj_dim: 128,
            mask_prob: 0.08,
            // about half the frames of a typical short utterance end up
            // masked, HuBERT-like coverage at 100 Hz
            mask_span: 6,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::Config("encoder needs at least one conv layer".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.mask_span == 0 || !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask_span >= 1 and mask_prob in [0,1] required".into()));
        }
        Ok(())
    }

    /// Product of conv strides: waveform samples per output frame.
    pub fn total_stride(&self) -> usize {
        self.conv_layers.iter().map(|&(_, _, s)| s).product()
    }

    /// Output frame count for a waveform of `n` samples, if any.
    pub fn conv_output_len(&self, n: usize) -> Option<usize> {
        let mut t = n;
        for &(_, k, s) in &self.conv_layers {
            if t < k {
                return None;
            }
            t = (t - k) / s + 1;
        }
        Some(t)
    }

    /// Samples consumed by one output frame (receptive field).
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        for &(_, k, s) in self.conv_layers.iter().rev() {
            rf = (rf - 1) * s + k;
        }
        rf
    }
}

/// Named trainable matrices in stable insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: &str, value: Matrix) {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Matrix {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.values[i]
    }

    pub fn get(&self, name: &str) -> &Matrix {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.values[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }
}

/// Graph leaves for every parameter, bound in ParamSet order.
pub struct BoundParams {
    pub ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ParamSet) -> Self {
        let mut ids = Vec::with_capacity(params.len());
        let mut index = HashMap::new();
        for i in 0..params.len() {
            ids.push(g.leaf(params.value(i).clone()));
            index.insert(params.name(i).to_string(), i);
        }
        BoundParams { ids, index }
    }

    /// Bind pre-existing leaves by name. Gradcheck harnesses rebuild the
    /// graph around fixed input slots and need to name them.
    pub fn from_parts(ids: Vec<NodeId>, names: &[String]) -> Self {
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            index.insert(n.clone(), i);
        }
        BoundParams { ids, index }
    }

    pub fn node(&self, name: &str) -> NodeId {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no bound parameter named {name}"));
        self.ids[i]
    }
}

fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen::<f64>() * 2.0 * a - a)
}

/// Fresh encoder parameters; mask embedding from uniform(-0.1, 0.1).
pub fn init_encoder_params<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let mut in_ch = 1usize;
    for (i, &(out_ch, k, _)) in cfg.conv_layers.iter().enumerate() {
        p.push(&format!("conv{i}.w"), xavier(k * in_ch, out_ch, rng));
        p.push(&format!("conv{i}.b"), Matrix::zeros(1, out_ch));
        in_ch = out_ch;
    }
    let d = cfg.model_dim;
    p.push("in_proj.w", xavier(in_ch, d, rng));
    p.push("in_proj.b", Matrix::zeros(1, d));
    p.push("mask_emb", Matrix::from_fn(1, d, |_, _| rng.gen::<f64>() * 0.2 - 0.1));
    p.push("in_ln.g", Matrix::filled(1, d, 1.0));
    p.push("in_ln.b", Matrix::zeros(1, d));
    for l in 0..cfg.num_layers {
        p.push(&format!("block{l}.ln1.g"), Matrix::filled(1, d, 1.0));
        p.push(&format!("block{l}.ln1.b"), Matrix::zeros(1, d));
        for nm in ["q", "k", "v", "o"] {
            p.push(&format!("block{l}.{nm}.w"), xavier(d, d, rng));
            p.push(&format!("block{l}.{nm}.b"), Matrix::zeros(1, d));
        }
        p.push(&format!("block{l}.ln2.g"), Matrix::filled(1, d, 1.0));
        p.push(&format!("block{l}.ln2.b"), Matrix::zeros(1, d));
        p.push(&format!("block{l}.ffn1.w"), xavier(d, cfg.ffn_dim, rng));
        p.push(&format!("block{l}.ffn1.b"), Matrix::zeros(1, cfg.ffn_dim));
        p.push(&format!("block{l}.ffn2.w"), xavier(cfg.ffn_dim, d, rng));
        p.push(&format!("block{l}.ffn2.b"), Matrix::zeros(1, d));
    }
    p.push("final_ln.g", Matrix::filled(1, d, 1.0));
    p.push("final_ln.b", Matrix::zeros(1, d));
    p.push("final_proj.w", xavier(d, cfg.final_proj_dim, rng));
    p.push("final_proj.b", Matrix::zeros(1, cfg.final_proj_dim));
    Ok(p)
}

/// Span mask over T frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// Sorted, deduplicated.
    pub masked_indices: Vec<usize>,
    /// Merged (start, length) spans whose union equals masked_indices.
    pub spans: Vec<(usize, usize)>,
}

impl MaskSpec {
    pub fn empty() -> Self {
        MaskSpec { masked_indices: Vec::new(), spans: Vec::new() }
    }
}

/// Sample round(mask_prob * T) span starts (at least one when mask_prob > 0)
/// without replacement from [0, T - mask_span]; overlapping spans merge.
pub fn sample_mask<R: Rng>(t: usize, cfg: &EncoderConfig, rng: &mut R) -> Result<MaskSpec> {
    if t < cfg.mask_span {
        return Err(Error::Contract(format!(
            "cannot mask {t} frames with span {}",
            cfg.mask_span
        )));
    }
    if cfg.mask_prob == 0.0 {
        return Ok(MaskSpec::empty());
    }
    let mut n_starts = (cfg.mask_prob * t as f64).round() as usize;
    n_starts = n_starts.max(1);
    let hi = t - cfg.mask_span; // inclusive upper start
    n_starts = n_starts.min(hi + 1);
    // partial Fisher-Yates over the start range
    let mut pool: Vec<usize> = (0..=hi).collect();
    for i in 0..n_starts {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut starts: Vec<usize> = pool[..n_starts].to_vec();
    starts.sort_unstable();
    let mut flags = vec![false; t];
    for &s in &starts {
        for f in flags.iter_mut().skip(s).take(cfg.mask_span) {
            *f = true;
        }
    }
    let masked_indices: Vec<usize> = (0..t).filter(|&i| flags[i]).collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < t {
        if flags[i] {
            let start = i;
            while i < t && flags[i] {
                i += 1;
            }
            spans.push((start, i - start));
        } else {
            i += 1;
        }
    }
    Ok(MaskSpec { masked_indices, spans })
}

/// Standard sinusoidal positional table, T x d.
pub fn sinusoidal_positions(t: usize, d: usize) -> Matrix {
    Matrix::from_fn(t, d, |pos, j| {
        let i = j / 2;
        let rate = (10000f64).powf(2.0 * i as f64 / d as f64);
        let ang = pos as f64 / rate;
        if j % 2 == 0 {
            ang.sin()
        } else {
            ang.cos()
        }
    })
}

/// Conv stack as graph nodes: wave (T0 x 1) to frames (T x channels).
pub fn conv_forward(
    g: &mut Graph,
    bound: &BoundParams,
    wave: NodeId,
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    let mut h = wave;
    for (i, &(_, k, s)) in cfg.conv_layers.iter().enumerate() {
        let cols = g.im2col(h, k, s).map_err(|_| {
            Error::Degenerate(format!(
                "waveform too short for conv layer {i} (kernel {k})"
            ))
        })?;
        let lin = g.matmul(cols, bound.node(&format!("conv{i}.w")))?;
        let lin = g.add_row(lin, bound.node(&format!("conv{i}.b")))?;
        h = g.gelu(lin);
    }
    Ok(h)
}

pub struct TransformerNodes {
    /// L+1 entries: index 0 is the block-1 input (post masking and
    /// positions); entry i is block i's output residual stream.
    pub acts: Vec<NodeId>,
    /// T x final_proj_dim head output (after the final layer norm).
    pub final_proj: NodeId,
    /// Attention softmax nodes, [layer][head]; each row sums to 1.
    pub attention: Vec<Vec<NodeId>>,
}

const LN_EPS: f64 = 1e-5;

/// Masking, positions, and the Transformer stack over conv frames.
pub fn transformer_forward(
    g: &mut Graph,
    bound: &BoundParams,
    frames: NodeId,
    mask: &MaskSpec,
    cfg: &EncoderConfig,
) -> Result<TransformerNodes> {
    let t = g.value(frames).rows();
    let d = cfg.model_dim;
    let proj = g.matmul(frames, bound.node("in_proj.w"))?;
    let proj = g.add_row(proj, bound.node("in_proj.b"))?;
    let masked = if mask.masked_indices.is_empty() {
        proj
    } else {
        if let Some(&bad) = mask.masked_indices.iter().find(|&&i| i >= t) {
            return Err(Error::Contract(format!("mask index {bad} outside {t} frames")));
        }
        g.replace_rows(proj, bound.node("mask_emb"), mask.masked_indices.clone())?
    };
    // normalize the content stream before adding unit-amplitude positions;
    // raw conv features are orders of magnitude smaller and would otherwise
    // drown in the positional signal
    let normed = g.layer_norm(masked, bound.node("in_ln.g"), bound.node("in_ln.b"), LN_EPS)?;
    let pos = g.leaf(sinusoidal_positions(t, d));
    let mut h = g.add(normed, pos)?;

    let mut acts = vec![h];
    let mut attention = Vec::new();
    let dh = d / cfg.num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.num_layers {
        let pre = format!("block{l}");
        let ln1 = g.layer_norm(h, bound.node(&format!("{pre}.ln1.g")), bound.node(&format!("{pre}.ln1.b")), LN_EPS)?;
        let q = g.matmul(ln1, bound.node(&format!("{pre}.q.w")))?;
        let q = g.add_row(q, bound.node(&format!("{pre}.q.b")))?;
        let k = g.matmul(ln1, bound.node(&format!("{pre}.k.w")))?;
        let k = g.add_row(k, bound.node(&format!("{pre}.k.b")))?;
        let v = g.matmul(ln1, bound.node(&format!("{pre}.v.w")))?;
        let v = g.add_row(v, bound.node(&format!("{pre}.v.b")))?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        let mut attn_nodes = Vec::with_capacity(cfg.num_heads);
        for hd in 0..cfg.num_heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            attn_nodes.push(attn);
            heads.push(g.matmul(attn, vh)?);
        }
        attention.push(attn_nodes);
        let cat = g.concat_cols(&heads)?;
        let o = g.matmul(cat, bound.node(&format!("{pre}.o.w")))?;
        let o = g.add_row(o, bound.node(&format!("{pre}.o.b")))?;
        let h_attn = g.add(h, o)?;

        let ln2 = g.layer_norm(h_attn, bound.node(&format!("{pre}.ln2.g")), bound.node(&format!("{pre}.ln2.b")), LN_EPS)?;
        let f1 = g.matmul(ln2, bound.node(&format!("{pre}.ffn1.w")))?;
        let f1 = g.add_row(f1, bound.node(&format!("{pre}.ffn1.b")))?;
        let f1 = g.gelu(f1);
        let f2 = g.matmul(f1, bound.node(&format!("{pre}.ffn2.w")))?;
        let f2 = g.add_row(f2, bound.node(&format!("{pre}.ffn2.b")))?;
        h = g.add(h_attn, f2)?;
        if !g.value(h).is_finite() {
            return Err(Error::Numerical(format!("non-finite activations after block {}", l + 1)));
        }
        acts.push(h);
    }
    let lnf = g.layer_norm(h, bound.node("final_ln.g"), bound.node("final_ln.b"), LN_EPS)?;
    let fp = g.matmul(lnf, bound.node("final_proj.w"))?;
    let final_proj = g.add_row(fp, bound.node("final_proj.b"))?;
    Ok(TransformerNodes { acts, final_proj, attention })
}

/// End-to-end graph forward from a waveform.
pub fn forward_wave(
    g: &mut Graph,
    bound: &BoundParams,
    wave: &Matrix,
    mask: &MaskSpec,
    cfg: &EncoderConfig,
) -> Result<TransformerNodes> {
    let w = g.leaf(wave.clone());
    let frames = conv_forward(g, bound, w, cfg)?;
    transformer_forward(g, bound, frames, mask, cfg)
}

/// Evaluation-mode activations as plain values.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    /// L+1 matrices, all T x d.
    pub layers: Vec<Matrix>,
    /// T x final_proj_dim.
    pub final_proj: Matrix,
}

/// Conv features only (inference): T x channels at rate sample_rate / stride.
pub fn conv_encode(params: &ParamSet, samples: &[f64], sample_rate: u32, cfg: &EncoderConfig) -> Result<FeatureSequence> {
    if cfg.conv_output_len(samples.len()).is_none() {
        return Err(Error::Degenerate(format!(
            "{} samples yield no conv output frames",
            samples.len()
        )));
    }
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let wave = Matrix::from_fn(samples.len(), 1, |i, _| samples[i]);
    let w = g.leaf(wave);
    let frames = conv_forward(&mut g, &bound, w, cfg)?;
    Ok(FeatureSequence {
        frames: g.value(frames).clone(),
        frame_rate: sample_rate as f64 / cfg.total_stride() as f64,
    })
}

/// Full evaluation-mode forward from a waveform.
pub fn forward(params: &ParamSet, samples: &[f64], mask: &MaskSpec, cfg: &EncoderConfig) -> Result<LayerActivations> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let wave = Matrix::from_fn(samples.len(), 1, |i, _| samples[i]);
    let nodes = forward_wave(&mut g, &bound, &wave, mask, cfg)?;
    Ok(LayerActivations {
        layers: nodes.acts.iter().map(|&n| g.value(n).clone()).collect(),
        final_proj: g.value(nodes.final_proj).clone(),
    })
}

const ACT_MAGIC: &[u8; 4] = b"ISAC";

/// Dump the L+1 activation stack as 32-bit floats, layer-major row-major.
pub fn write_activations(path: &Path, layers: &[Matrix]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Contract("write_activations: empty stack".into()));
    }
    let (t, d) = layers[0].shape();
    if layers.iter().any(|m| m.shape() != (t, d)) {
        return Err(Error::Contract("write_activations: ragged stack".into()));
    }
    let mut buf = Vec::with_capacity(16 + layers.len() * t * d * 4);
    buf.extend_from_slice(ACT_MAGIC);
    buf.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for m in layers {
        for i in 0..t {
            for &v in m.row(i) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_activations(path: &Path) -> Result<Vec<Matrix>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != ACT_MAGIC {
        return Err(Error::Parse(format!("{}: not an ISAC activation file", path.display())));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * n * t * d {
        return Err(Error::Parse(format!("{}: payload size mismatch", path.display())));
    }
    let mut layers = Vec::with_capacity(n);
    let mut off = 16;
    for _ in 0..n {
        let mut m = Matrix::zeros(t, d);
        for i in 0..t {
            for j in 0..d {
                m.set(i, j, f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
                off += 4;
            }
        }
        layers.push(m);
    }
    Ok(layers)
}
