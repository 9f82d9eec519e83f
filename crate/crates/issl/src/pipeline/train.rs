//! The pretraining loop: masked prediction over pseudo-labels (or an online
//! quantizer), one utterance-packed batch per update, plus the label
//! refinement step that re-clusters a trained model's activations.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{self, PseudoLabelSequence};
use crate::encoder::{self, BoundParams, EncoderConfig, MaskSpec};
use crate::error::{Error, Result};
use crate::features::corpus::{ManifestEntry, Utterance, WordSpan};
use crate::numcore::{Graph, Matrix, NodeId};
use crate::objectives::{self, CandidateSet};
use crate::pipeline::checkpoint::{save_checkpoint, Checkpoint};
use crate::pipeline::optim::{AdamConfig, AdamState};
use crate::pipeline::{LabelSource, Policy, RunConfig};
use crate::quantizer::{self, QuantizeMode, QuantizerConfig};

/// Distinct stream for data order / mask / negative draws so changing the
/// schedule never perturbs initialization.
const TRAIN_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Feature frame whose analysis window center lies closest to model frame
/// `j`'s receptive-field center, clamped into the alignment.
pub fn feature_frame_for(
    j: usize,
    enc: &EncoderConfig,
    window: usize,
    hop: usize,
    t_feat: usize,
) -> usize {
    let center = (j * enc.total_stride() + enc.receptive_field() / 2) as f64;
    let f = ((center - window as f64 / 2.0) / hop as f64).round();
    (f.max(0.0) as usize).min(t_feat.saturating_sub(1))
}

/// Re-express per-feature-frame labels at the model frame rate.
pub fn resolve_labels(
    seq: &PseudoLabelSequence,
    t_model: usize,
    enc: &EncoderConfig,
    window: usize,
    hop: usize,
) -> Result<PseudoLabelSequence> {
    seq.validate()?;
    if seq.labels.is_empty() && t_model > 0 {
        return Err(Error::Contract("no feature labels to resolve".into()));
    }
    let t_feat = seq.labels.len();
    let labels = (0..t_model)
        .map(|j| seq.labels[feature_frame_for(j, enc, window, hop, t_feat)])
        .collect();
    Ok(PseudoLabelSequence { labels, vocab_size: seq.vocab_size })
}

/// Re-express feature-frame word spans at the model frame rate. Input spans
/// must be sorted, abutting and cover every mapped frame.
pub fn resolve_word_spans(
    spans: &[WordSpan],
    t_model: usize,
    enc: &EncoderConfig,
    window: usize,
    hop: usize,
    t_feat: usize,
) -> Result<Vec<WordSpan>> {
    let mut out: Vec<WordSpan> = Vec::new();
    let mut p = 0usize;
    let mut cur: Option<(usize, usize)> = None; // (span index, model start)
    for j in 0..t_model {
        let f = feature_frame_for(j, enc, window, hop, t_feat);
        while p < spans.len() && f >= spans[p].end {
            p += 1;
        }
        if p >= spans.len() || f < spans[p].start {
            return Err(Error::Contract(format!("feature frame {f} not covered by word spans")));
        }
        match cur {
            Some((idx, _)) if idx == p => {}
            Some((idx, start)) => {
                out.push(WordSpan { start, end: j, word_id: spans[idx].word_id });
                cur = Some((p, j));
            }
            None => cur = Some((p, j)),
        }
    }
    if let Some((idx, start)) = cur {
        out.push(WordSpan { start, end: t_model, word_id: spans[idx].word_id });
    }
    Ok(out)
}

/// Labels file: `vocab <V>` header, then one `<utterance_id> <l0> <l1> ...`
/// line per utterance.
pub fn write_labels(path: &Path, ids: &[String], labels: &[PseudoLabelSequence]) -> Result<()> {
    if ids.len() != labels.len() {
        return Err(Error::Contract(format!("{} ids for {} label rows", ids.len(), labels.len())));
    }
    let vocab = labels.first().map(|l| l.vocab_size).unwrap_or(0);
    let mut out = format!("vocab {vocab}\n");
    for (id, seq) in ids.iter().zip(labels) {
        if seq.vocab_size != vocab {
            return Err(Error::Contract(format!(
                "{id}: vocabulary {} differs from {vocab}",
                seq.vocab_size
            )));
        }
        seq.validate()?;
        out.push_str(id);
        for &l in &seq.labels {
            out.push(' ');
            out.push_str(&l.to_string());
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, PseudoLabelSequence)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty labels file".into()))?;
    let vocab: usize = header
        .strip_prefix("vocab ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad labels header {header:?}")))?;
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_ascii_whitespace();
        let id = parts.next().ok_or_else(|| Error::Parse(format!("labels line {}", ln + 2)))?;
        let labels: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| Error::Parse(format!("bad label {p:?} on line {}", ln + 2))))
            .collect::<Result<_>>()?;
        let seq = PseudoLabelSequence { labels, vocab_size: vocab };
        seq.validate()?;
        out.push((id.to_string(), seq));
    }
    Ok(out)
}

/// Reorder labels read from disk into manifest order.
pub fn labels_for_manifest(
    read: &[(String, PseudoLabelSequence)],
    entries: &[ManifestEntry],
) -> Result<Vec<PseudoLabelSequence>> {
    entries
        .iter()
        .map(|e| {
            read.iter()
                .find(|(id, _)| *id == e.utterance_id)
                .map(|(_, seq)| seq.clone())
                .ok_or_else(|| Error::Contract(format!("no labels for {}", e.utterance_id)))
        })
        .collect()
}

/// Greedy packing: consecutive utterances while the frame budget holds, at
/// least one per batch, never wrapping past the epoch boundary.
pub fn pack_epoch(order: &[usize], t_model: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = 0usize;
    for &i in order {
        let t = t_model[i];
        if !cur.is_empty() && used + t > budget {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += t;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// A finished training run: the final checkpoint plus the per-step loss
/// trace (combined loss for quantizer runs).
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    /// Utterances excluded up front (too short to mask).
    pub skipped: usize,
}

struct QuantSetup {
    cfg: QuantizerConfig,
}

fn quantizer_config(cfg: &RunConfig) -> Result<QuantizerConfig> {
    let conv_dim = cfg
        .encoder
        .conv_layers
        .last()
        .ok_or_else(|| Error::Config("encoder has no conv layers".into()))?
        .0;
    let out_dim = cfg.encoder.final_proj_dim;
    if out_dim % cfg.quantizer_groups != 0 {
        return Err(Error::Config(format!(
            "final_proj_dim {out_dim} not divisible by {} quantizer groups",
            cfg.quantizer_groups
        )));
    }
    let q = QuantizerConfig {
        groups: cfg.quantizer_groups,
        entries_per_group: cfg.quantizer_entries,
        input_dim: conv_dim,
        codeword_dim: out_dim / cfg.quantizer_groups,
        output_dim: out_dim,
    };
    q.validate()?;
    Ok(q)
}

/// Candidates for quantized targets: the frame's own code plus negatives
/// drawn with replacement from the utterance's other masked frames. A frame
/// alone in the mask keeps only itself (zero loss) and is logged.
fn quantized_candidates<R: Rng>(
    n_masked: usize,
    masked_indices: &[usize],
    negatives: usize,
    rng: &mut R,
) -> Vec<CandidateSet> {
    (0..n_masked)
        .map(|i| {
            if n_masked == 1 {
                log::warn!("frame {}: no other masked frame to draw negatives from", masked_indices[0]);
                return CandidateSet {
                    target: 0,
                    candidates: vec![0],
                    target_pos: 0,
                    source_frames: Some(vec![masked_indices[0]]),
                };
            }
            let mut candidates = vec![i];
            let mut sources = vec![masked_indices[i]];
            for _ in 0..negatives {
                let j = loop {
                    let j = rng.gen_range(0..n_masked);
                    if j != i {
                        break j;
                    }
                };
                candidates.push(j);
                sources.push(masked_indices[j]);
            }
            CandidateSet { target: i, candidates, target_pos: 0, source_frames: Some(sources) }
        })
        .collect()
}

fn wrap_divergence(e: Error, step: usize, lr: f64) -> Error {
    match e {
        Error::Numerical(detail) => Error::Divergence { step, lr, detail },
        other => other,
    }
}

/// Pretrain one model from scratch. `labels` must be present for k-means
/// sources (model-rate, aligned with `utts`) and absent for the online
/// quantizer. The final checkpoint also lands in `out_dir/ckpt.isck`,
/// rewritten at every 10% of updates.
pub fn train_iteration(
    cfg: &RunConfig,
    utts: &[Utterance],
    labels: Option<&[PseudoLabelSequence]>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.encoder.mask_prob <= 0.0 {
        return Err(Error::Config("training needs mask_prob > 0".into()));
    }
    if utts.is_empty() {
        return Err(Error::Contract("no utterances to train on".into()));
    }
    let quant = match cfg.label_source {
        LabelSource::Kmeans => None,
        LabelSource::OnlineQuantizer => Some(QuantSetup { cfg: quantizer_config(cfg)? }),
    };
    let labels = match (&quant, labels) {
        (None, Some(l)) => {
            if l.len() != utts.len() {
                return Err(Error::Contract(format!(
                    "{} label sequences for {} utterances",
                    l.len(),
                    utts.len()
                )));
            }
            Some(l)
        }
        (None, None) => return Err(Error::Contract("k-means source needs labels".into())),
        (Some(_), None) => None,
        (Some(_), Some(_)) => {
            return Err(Error::Contract("online quantizer takes no offline labels".into()))
        }
    };

    // fresh init per iteration; the previous model only contributes labels
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = encoder::init_encoder_params(&cfg.encoder, &mut init_rng)?;
    if let Some(l) = labels {
        let vocab = l.iter().map(|s| s.vocab_size).max().unwrap_or(0);
        if l.iter().any(|s| s.vocab_size != vocab) {
            return Err(Error::Contract("label vocabularies disagree across utterances".into()));
        }
        if vocab < 2 {
            return Err(Error::Contract("label vocabulary must have at least 2 entries".into()));
        }
        params.push(
            "codebook.emb",
            objectives::init_codebook(vocab, cfg.encoder.final_proj_dim, &mut init_rng)?,
        );
    } else {
        let q = &quant.as_ref().unwrap().cfg;
        quantizer::push_quantizer_params(&mut params, q, &mut init_rng)?;
    }

    // usable utterances: long enough to mask, with labels covering them
    let mut usable: Vec<usize> = Vec::new();
    let mut t_model = vec![0usize; utts.len()];
    let mut skipped = 0usize;
    for (i, u) in utts.iter().enumerate() {
        let t = cfg.encoder.conv_output_len(u.samples.len()).unwrap_or(0);
        t_model[i] = t;
        if t < cfg.encoder.mask_span.max(1) {
            log::warn!("{}: {t} model frames, too short to train on", u.utterance_id);
            skipped += 1;
            continue;
        }
        if let Some(l) = labels {
            if l[i].labels.len() != t {
                return Err(Error::Contract(format!(
                    "{}: {} labels for {t} model frames",
                    u.utterance_id,
                    l[i].labels.len()
                )));
            }
        }
        usable.push(i);
    }
    if usable.is_empty() {
        return Err(Error::Degenerate("every utterance is too short to train on".into()));
    }
    let waves: Vec<Matrix> = utts
        .iter()
        .map(|u| Matrix::from_fn(u.samples.len(), 1, |i, _| u.samples[i]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM);
    let adam_cfg = AdamConfig::default();
    let mut opt = AdamState::new(&params);
    let config_hash = cfg.config_hash();
    let ckpt_path = out_dir.join("ckpt.isck");
    let interval = (cfg.total_updates / 10).max(1);

    let mut losses = Vec::with_capacity(cfg.total_updates);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for step in 1..=cfg.total_updates {
        if queue.is_empty() {
            let mut order = usable.clone();
            for i in 0..order.len() {
                let j = rng.gen_range(i..order.len());
                order.swap(i, j);
            }
            queue = pack_epoch(&order, &t_model, cfg.batch_frames);
            queue.reverse(); // pop() consumes epoch order front-first
        }
        let batch = queue.pop().unwrap();
        let lr = cfg.lr_at(step)?;

        let step_result = (|| -> Result<f64> {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &params);
            let mut per_utt: Vec<NodeId> = Vec::with_capacity(batch.len());
            // (masked frame count, per-group mean usage probs)
            let mut usage: Vec<(usize, Vec<NodeId>)> = Vec::new();
            for &ui in &batch {
                let mask = encoder::sample_mask(t_model[ui], &cfg.encoder, &mut rng)?;
                let wave = g.leaf(waves[ui].clone());
                let conv = encoder::conv_forward(&mut g, &bound, wave, &cfg.encoder)?;
                let nodes = encoder::transformer_forward(&mut g, &bound, conv, &mask, &cfg.encoder)?;
                let student = g.gather_rows(nodes.final_proj, mask.masked_indices.clone())?;
                let n_masked = mask.masked_indices.len();
                let loss_u = match (&quant, labels) {
                    (None, Some(l)) => {
                        let seq = &l[ui];
                        let cands: Vec<CandidateSet> = mask
                            .masked_indices
                            .iter()
                            .map(|&t| match cfg.policy {
                                Policy::Predictive => {
                                    Ok(objectives::predictive_candidates(seq.vocab_size, seq.labels[t]))
                                }
                                Policy::Contrastive => objectives::contrastive_candidates(
                                    &mask,
                                    seq,
                                    t,
                                    cfg.negatives,
                                    &mut rng,
                                ),
                            })
                            .collect::<Result<_>>()?;
                        objectives::masked_loss_graph(
                            &mut g,
                            student,
                            &cands,
                            bound.node("codebook.emb"),
                            cfg.temperature,
                        )?
                    }
                    (Some(qs), None) => {
                        let teacher_in = g.gather_rows(conv, mask.masked_indices.clone())?;
                        let (t0, t1) = cfg.quantizer_temp;
                        let tau = quantizer::temperature_at(step, cfg.total_updates, t0, t1);
                        let noise = quantizer::gumbel_noise(
                            n_masked,
                            qs.cfg.groups * qs.cfg.entries_per_group,
                            &mut rng,
                        );
                        let q = quantizer::quantize_graph(
                            &mut g,
                            &bound,
                            teacher_in,
                            &qs.cfg,
                            tau,
                            Some(&noise),
                            QuantizeMode::StraightThrough,
                        )?;
                        let cands =
                            quantized_candidates(n_masked, &mask.masked_indices, cfg.negatives, &mut rng);
                        let means: Vec<NodeId> =
                            q.usage_probs.iter().map(|&p| g.mean_rows(p)).collect();
                        usage.push((n_masked, means));
                        objectives::masked_loss_graph(&mut g, student, &cands, q.targets, cfg.temperature)?
                    }
                    _ => unreachable!("validated above"),
                };
                per_utt.push(loss_u);
            }
            let mut acc = per_utt[0];
            for &l in &per_utt[1..] {
                acc = g.add(acc, l)?;
            }
            let mut loss = g.scale(acc, 1.0 / per_utt.len() as f64);
            if let Some(qs) = &quant {
                let total_frames: usize = usage.iter().map(|(n, _)| n).sum();
                let mut pooled: Vec<NodeId> = Vec::with_capacity(qs.cfg.groups);
                for gi in 0..qs.cfg.groups {
                    let mut sum: Option<NodeId> = None;
                    for (n, means) in &usage {
                        let w = g.scale(means[gi], *n as f64 / total_frames as f64);
                        sum = Some(match sum {
                            None => w,
                            Some(s) => g.add(s, w)?,
                        });
                    }
                    pooled.push(sum.expect("batch is non-empty"));
                }
                let div = quantizer::diversity_loss_from_mean_probs(&mut g, &pooled)?;
                let scaled = g.scale(div, cfg.alpha_diversity);
                loss = g.add(loss, scaled)?;
            }
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss is {value}")));
            }
            g.backward(loss)?;
            let grads: Vec<Matrix> = bound.ids.iter().map(|&id| g.grad(id).clone()).collect();
            opt.step(&mut params, &grads, lr, &adam_cfg)?;
            Ok(value)
        })();
        let value = step_result.map_err(|e| wrap_divergence(e, step, lr))?;
        losses.push(value);

        if step % interval == 0 || step == cfg.total_updates {
            let ckpt = Checkpoint {
                params: params.clone(),
                opt: opt.clone(),
                step,
                config_hash: config_hash.clone(),
            };
            save_checkpoint(&ckpt_path, &ckpt)?;
        }
    }

    let checkpoint = Checkpoint { params, opt, step: cfg.total_updates, config_hash };
    Ok(TrainOutcome { checkpoint, losses, skipped })
}

/// Cluster one activation stack entry of a trained model over the corpus and
/// assign every frame: the pseudo-labels for the next iteration.
pub fn refine_labels(
    ckpt: &Checkpoint,
    enc: &EncoderConfig,
    utts: &[Utterance],
    layer: usize,
    k: usize,
    seed: u64,
    kmeans_max_iter: usize,
    subsample_cap: usize,
) -> Result<Vec<PseudoLabelSequence>> {
    if layer > enc.num_layers {
        return Err(Error::Config(format!(
            "layer {layer} outside activation stack 0..={}",
            enc.num_layers
        )));
    }
    let mut acts: Vec<Option<Matrix>> = Vec::with_capacity(utts.len());
    for u in utts {
        if enc.conv_output_len(u.samples.len()).is_none() {
            acts.push(None);
            continue;
        }
        let la = encoder::forward(&ckpt.params, &u.samples, &MaskSpec::empty(), enc)?;
        acts.push(Some(la.layers[layer].clone()));
    }
    let dim = acts
        .iter()
        .flatten()
        .map(|m| m.cols())
        .next()
        .ok_or_else(|| Error::Degenerate("no utterance yields activations".into()))?;
    let total: usize = acts.iter().flatten().map(|m| m.rows()).sum();
    let mut pool = Matrix::zeros(total, dim);
    let mut r = 0usize;
    for m in acts.iter().flatten() {
        for i in 0..m.rows() {
            pool.row_mut(r).copy_from_slice(m.row(i));
            r += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sub = clustering::subsample_rows(&pool, subsample_cap, &mut rng);
    let centroids = clustering::kmeans_fit(&sub, k, &mut rng, kmeans_max_iter)?;
    acts.iter()
        .map(|m| match m {
            Some(m) => clustering::assign(m, &centroids),
            None => Ok(PseudoLabelSequence { labels: Vec::new(), vocab_size: k }),
        })
        .collect()
}
