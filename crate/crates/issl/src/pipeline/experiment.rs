//! The full experiment: pretrain the model matrix (two objectives, two
//! label-refinement iterations, plus optional third iteration, online
//! quantizer and random baselines), probe every layer of every model with
//! the CCA protocol, and write report CSVs and a layer-score plot. Stages
//! are cached on disk under a state file so interrupted runs resume.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cca::protocol::{
    cca_evaluate, pool_tokens, write_report_csv, write_summary_csv, AlignedActs, CcaReport,
    ProtocolConfig, Token, TokenUnit,
};
use crate::clustering::{self, PseudoLabelSequence};
use crate::encoder::{self, EncoderConfig, MaskSpec};
use crate::error::{Error, Result};
use crate::features::corpus::{load_utterance, read_manifest, ManifestEntry, Utterance};
use crate::features::{append_deltas, frame_geometry, mfcc, FeatureConfig};
use crate::numcore::Matrix;
use crate::pipeline::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::pipeline::optim::{AdamConfig, AdamState};
use crate::pipeline::train::{
    feature_frame_for, labels_for_manifest, read_labels, refine_labels, resolve_labels,
    resolve_word_spans, train_iteration, write_labels,
};
use crate::pipeline::{derive_seed, hex_digest, LabelSource, Policy, RunConfig};
use crate::synthcorpus::{self, SynthConfig};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    /// Existing corpus root (with manifest.txt); None synthesizes one under
    /// the output directory from `synth`.
    pub corpus_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub updates_per_iteration: usize,
    pub batch_frames: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub temperature: f64,
    pub negatives: usize,
    pub alpha_diversity: f64,
    pub quantizer_groups: usize,
    pub quantizer_entries: usize,
    pub quantizer_temp: (f64, f64),
    pub k_iter1: usize,
    pub k_iter2: usize,
    pub k_iter3: usize,
    pub cluster_layer_iter2: usize,
    pub cluster_layer_iter3: usize,
    pub include_iteration3: bool,
    pub include_quantizer: bool,
    pub include_random: bool,
    pub kmeans_max_iter: usize,
    pub cluster_subsample: usize,
    pub protocol: ProtocolConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus_dir: None,
            synth: SynthConfig::default(),
            features: FeatureConfig::default(),
            encoder: EncoderConfig::default(),
            updates_per_iteration: 5000,
            batch_frames: 256,
            peak_lr: 5e-4,
            warmup_frac: 0.08,
            temperature: 0.1,
            negatives: 100,
            alpha_diversity: 0.1,
            quantizer_groups: 2,
            quantizer_entries: 10,
            quantizer_temp: (2.0, 0.5),
            k_iter1: 100,
            k_iter2: 500,
            k_iter3: 500,
            cluster_layer_iter2: 6,
            cluster_layer_iter3: 9,
            include_iteration3: false,
            include_quantizer: true,
            include_random: true,
            kmeans_max_iter: 50,
            cluster_subsample: 100_000,
            protocol: ProtocolConfig::default(),
            seed: 17,
        }
    }
}

fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn p_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("bad value {v:?} for {key} (true|false)"))),
    }
}

fn p_conv(v: &str) -> Result<Vec<(usize, usize, usize)>> {
    v.split(',')
        .map(|layer| {
            let parts: Vec<&str> = layer.trim().split('x').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "conv layer {layer:?} is not channels x kernel x stride"
                )));
            }
            Ok((
                p::<usize>("encoder_conv_layers", parts[0])?,
                p::<usize>("encoder_conv_layers", parts[1])?,
                p::<usize>("encoder_conv_layers", parts[2])?,
            ))
        })
        .collect()
}

/// Apply `key = value` lines (with `#` comments) on top of a base config.
/// Unknown keys are errors.
pub fn parse_experiment_config(text: &str, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", ln + 1)))?;
        let (k, v) = (key.trim(), value.trim());
        match k {
            "corpus_dir" => cfg.corpus_dir = Some(PathBuf::from(v)),
            "corpus_phonemes" => cfg.synth.n_phonemes = p(k, v)?,
            "corpus_words" => cfg.synth.n_words = p(k, v)?,
            "corpus_word_len_min" => cfg.synth.word_len_range.0 = p(k, v)?,
            "corpus_word_len_max" => cfg.synth.word_len_range.1 = p(k, v)?,
            "corpus_speakers" => cfg.synth.n_speakers = p(k, v)?,
            "corpus_utterances_per_speaker" => cfg.synth.utterances_per_speaker = p(k, v)?,
            "corpus_words_per_utterance_min" => cfg.synth.words_per_utterance.0 = p(k, v)?,
            "corpus_words_per_utterance_max" => cfg.synth.words_per_utterance.1 = p(k, v)?,
            "corpus_duration_min" => cfg.synth.duration_range.0 = p(k, v)?,
            "corpus_duration_max" => cfg.synth.duration_range.1 = p(k, v)?,
            "corpus_sample_rate" => cfg.synth.sample_rate = p(k, v)?,
            "corpus_seed" => cfg.synth.seed = p(k, v)?,
            "encoder_conv_layers" => cfg.encoder.conv_layers = p_conv(v)?,
            "encoder_model_dim" => cfg.encoder.model_dim = p(k, v)?,
            "encoder_num_layers" => cfg.encoder.num_layers = p(k, v)?,
            "encoder_num_heads" => cfg.encoder.num_heads = p(k, v)?,
            "encoder_ffn_dim" => cfg.encoder.ffn_dim = p(k, v)?,
            "encoder_final_proj_dim" => cfg.encoder.final_proj_dim = p(k, v)?,
            "encoder_mask_prob" => cfg.encoder.mask_prob = p(k, v)?,
            "encoder_mask_span" => cfg.encoder.mask_span = p(k, v)?,
            "updates_per_iteration" => cfg.updates_per_iteration = p(k, v)?,
            "batch_frames" => cfg.batch_frames = p(k, v)?,
            "peak_lr" => cfg.peak_lr = p(k, v)?,
            "warmup_frac" => cfg.warmup_frac = p(k, v)?,
            "temperature" => cfg.temperature = p(k, v)?,
            "negatives" => cfg.negatives = p(k, v)?,
            "alpha_diversity" => cfg.alpha_diversity = p(k, v)?,
            "quantizer_groups" => cfg.quantizer_groups = p(k, v)?,
            "quantizer_entries" => cfg.quantizer_entries = p(k, v)?,
            "quantizer_temp_start" => cfg.quantizer_temp.0 = p(k, v)?,
            "quantizer_temp_end" => cfg.quantizer_temp.1 = p(k, v)?,
            "k_iter1" => cfg.k_iter1 = p(k, v)?,
            "k_iter2" => cfg.k_iter2 = p(k, v)?,
            "k_iter3" => cfg.k_iter3 = p(k, v)?,
            "cluster_layer_iter2" => cfg.cluster_layer_iter2 = p(k, v)?,
            "cluster_layer_iter3" => cfg.cluster_layer_iter3 = p(k, v)?,
            "include_iteration3" => cfg.include_iteration3 = p_bool(k, v)?,
            "include_quantizer" => cfg.include_quantizer = p_bool(k, v)?,
            "include_random" => cfg.include_random = p_bool(k, v)?,
            "kmeans_max_iter" => cfg.kmeans_max_iter = p(k, v)?,
            "cluster_subsample" => cfg.cluster_subsample = p(k, v)?,
            "protocol_samples" => cfg.protocol.n_samples = p(k, v)?,
            "protocol_splits" => cfg.protocol.n_splits = p(k, v)?,
            "protocol_eps_grid" => {
                cfg.protocol.eps_grid =
                    v.split(',').map(|e| p::<f64>(k, e.trim())).collect::<Result<_>>()?
            }
            "seed" => cfg.seed = p(k, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
    }
    Ok(cfg)
}

impl ExperimentConfig {
    /// RunConfig for one model of the matrix.
    pub fn run_config_for(
        &self,
        corpus_dir: &Path,
        policy: Policy,
        source: LabelSource,
        updates: usize,
        seed: u64,
    ) -> RunConfig {
        RunConfig {
            corpus_dir: corpus_dir.to_path_buf(),
            encoder: self.encoder.clone(),
            policy,
            label_source: source,
            k_per_iteration: vec![self.k_iter1, self.k_iter2, self.k_iter3],
            cluster_layers: vec![self.cluster_layer_iter2, self.cluster_layer_iter3],
            total_updates: updates,
            peak_lr: self.peak_lr,
            warmup_frac: self.warmup_frac,
            batch_frames: self.batch_frames,
            negatives: self.negatives,
            temperature: self.temperature,
            alpha_diversity: self.alpha_diversity,
            quantizer_groups: self.quantizer_groups,
            quantizer_entries: self.quantizer_entries,
            quantizer_temp: self.quantizer_temp,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
struct StageEntry {
    status: String,
    hash: String,
    #[serde(default)]
    detail: String,
}

#[derive(Debug, Default, serde::Serialize, serde::Deserialize)]
struct StateFile {
    stages: BTreeMap<String, StageEntry>,
}

struct Stages {
    path: PathBuf,
    file: StateFile,
}

impl Stages {
    fn open(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join("state.json");
        let file = if path.exists() {
            serde_json::from_str(&fs::read_to_string(&path)?)
                .map_err(|e| Error::Parse(format!("state.json: {e}")))?
        } else {
            StateFile::default()
        };
        Ok(Stages { path, file })
    }

    fn save(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.file).expect("state serializes");
        fs::write(&self.path, json)?;
        Ok(())
    }

    fn record(&mut self, name: &str, hash: &str, status: &str, detail: &str) -> Result<()> {
        self.file.stages.insert(
            name.to_string(),
            StageEntry { status: status.into(), hash: hash.into(), detail: detail.into() },
        );
        self.save()
    }

    /// Reload a completed stage's artifacts or recompute them. A failed
    /// compute is recorded before the error propagates.
    fn run<T>(
        &mut self,
        name: &str,
        hash: &str,
        reload: impl FnOnce() -> Result<T>,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        if let Some(e) = self.file.stages.get(name) {
            if e.status == "done" && e.hash == hash {
                match reload() {
                    Ok(v) => {
                        log::info!("stage {name}: reusing cached artifacts");
                        return Ok(v);
                    }
                    Err(err) => log::warn!("stage {name}: cache unusable ({err}); recomputing"),
                }
            }
        }
        log::info!("stage {name}: running");
        match compute() {
            Ok(v) => {
                self.record(name, hash, "done", "")?;
                Ok(v)
            }
            Err(e) => {
                let _ = self.record(name, hash, "failed", &e.to_string());
                Err(e)
            }
        }
    }
}

/// One probed model of the matrix.
struct ModelPlan {
    id: String,
    ckpt_path: PathBuf,
    config_hash: String,
}

pub struct ExperimentOutcome {
    /// Model-major, units ordered phoneme, word, speaker.
    pub reports: Vec<CcaReport>,
    pub report_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub plot_svg: PathBuf,
    pub manifest_json: PathBuf,
}

/// Mean score of the last two layers, the quantity the directional trend
/// checks compare.
pub fn mean_final_two(report: &CcaReport) -> f64 {
    let n = report.layer_scores.len();
    assert!(n >= 2, "need at least two probed layers");
    (report.layer_scores[n - 1].1.mean + report.layer_scores[n - 2].1.mean) / 2.0
}

/// Iteration-1 pseudo-labels: k-means over pooled MFCC+delta frames,
/// assigned per utterance and re-expressed at the model frame rate. Writes
/// `iter1.txt` and `iter1.centroids` under `labels_dir` and returns the
/// label sequences in corpus order.
pub fn compute_iter1_labels(
    cfg: &ExperimentConfig,
    utts: &[Utterance],
    ids: &[String],
    labels_dir: &Path,
) -> Result<Vec<PseudoLabelSequence>> {
    let sample_rate = sample_rate_of(utts)?;
    let (window, hop, _) = frame_geometry(&cfg.features, sample_rate);
    let t_model = model_frames(utts, &cfg.encoder);
    let feats: Vec<Matrix> = utts
        .iter()
        .map(|u| {
            let f = mfcc(u, &cfg.features)?;
            Ok(append_deltas(&f, cfg.features.delta_radius)?.frames)
        })
        .collect::<Result<_>>()?;
    let total: usize = feats.iter().map(|m| m.rows()).sum();
    let mut pool = Matrix::zeros(total, feats[0].cols());
    let mut r = 0;
    for m in &feats {
        for i in 0..m.rows() {
            pool.row_mut(r).copy_from_slice(m.row(i));
            r += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "labels-iter1"));
    let sub = clustering::subsample_rows(&pool, cfg.cluster_subsample, &mut rng);
    let centroids = clustering::kmeans_fit(&sub, cfg.k_iter1, &mut rng, cfg.kmeans_max_iter)?;
    fs::create_dir_all(labels_dir)?;
    clustering::write_centroids(&labels_dir.join("iter1.centroids"), &centroids)?;
    let labels: Vec<PseudoLabelSequence> = feats
        .iter()
        .zip(&t_model)
        .map(|(m, &t)| {
            let feat = clustering::assign(m, &centroids)?;
            resolve_labels(&feat, t, &cfg.encoder, window, hop)
        })
        .collect::<Result<_>>()?;
    write_labels(&labels_dir.join("iter1.txt"), ids, &labels)?;
    Ok(labels)
}

fn sample_rate_of(utts: &[Utterance]) -> Result<u32> {
    let sr = utts.first().ok_or_else(|| Error::Degenerate("empty corpus".into()))?.sample_rate;
    if utts.iter().any(|u| u.sample_rate != sr) {
        return Err(Error::Contract("mixed sample rates in corpus".into()));
    }
    Ok(sr)
}

/// Model-frame count per utterance (0 for waves too short to encode).
fn model_frames(utts: &[Utterance], enc: &EncoderConfig) -> Vec<usize> {
    utts.iter().map(|u| enc.conv_output_len(u.samples.len()).unwrap_or(0)).collect()
}

fn load_corpus(root: &Path) -> Result<(Vec<ManifestEntry>, Vec<Utterance>)> {
    let entries = read_manifest(&root.join("manifest.txt"))?;
    let utts = entries.iter().map(|e| load_utterance(root, e)).collect::<Result<Vec<_>>>()?;
    Ok((entries, utts))
}

fn stage_hash(parts: &serde_json::Value) -> String {
    hex_digest(parts.to_string().as_bytes())
}

pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.encoder.validate()?;
    if cfg.updates_per_iteration == 0 {
        return Err(Error::Config("updates_per_iteration must be positive".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut stages = Stages::open(out_dir)?;

    // ---- corpus ----
    let corpus_dir = match &cfg.corpus_dir {
        Some(dir) => dir.clone(),
        None => {
            let dir = out_dir.join("corpus");
            let hash = stage_hash(&serde_json::json!({ "synth": cfg.synth }));
            let synth = cfg.synth.clone();
            let dir2 = dir.clone();
            stages.run(
                "corpus",
                &hash,
                || {
                    if dir.join("manifest.txt").exists() {
                        Ok(())
                    } else {
                        Err(Error::Contract("no manifest".into()))
                    }
                },
                move || synthcorpus::generate(&synth, &dir2).map(|_| ()),
            )?;
            dir
        }
    };
    let (entries, utts) = load_corpus(&corpus_dir)?;
    let ids: Vec<String> = entries.iter().map(|e| e.utterance_id.clone()).collect();
    sample_rate_of(&utts)?;

    // ---- run manifest: every default this run resolves to ----
    let manifest_json = out_dir.join("run_manifest.json");
    let model_ids = planned_model_ids(cfg);
    let manifest = serde_json::json!({
        "config": cfg,
        "optimizer": AdamConfig::default(),
        "corpus_dir": corpus_dir,
        "models": model_ids,
    });
    fs::write(&manifest_json, serde_json::to_string_pretty(&manifest).expect("manifest"))?;

    // ---- iteration-1 labels: k-means over MFCC+deltas ----
    let labels_dir = out_dir.join("labels");
    fs::create_dir_all(&labels_dir)?;
    let labels1_path = labels_dir.join("iter1.txt");
    let labels1_hash = stage_hash(&serde_json::json!({
        "corpus": corpus_dir,
        "features": cfg.features,
        "encoder": cfg.encoder,
        "k": cfg.k_iter1,
        "kmeans_max_iter": cfg.kmeans_max_iter,
        "subsample": cfg.cluster_subsample,
        "seed": derive_seed(cfg.seed, "labels-iter1"),
    }));
    let labels1 = stages.run(
        "labels-iter1",
        &labels1_hash,
        || labels_for_manifest(&read_labels(&labels1_path)?, &entries),
        || compute_iter1_labels(cfg, &utts, &ids, &labels_dir),
    )?;

    // ---- model matrix ----
    let updates = cfg.updates_per_iteration;
    let mut plans: Vec<ModelPlan> = Vec::new();

    let train_stage = |stages: &mut Stages,
                           id: &str,
                           run_cfg: &RunConfig,
                           labels: Option<&[PseudoLabelSequence]>|
     -> Result<ModelPlan> {
        let dir = out_dir.join("models").join(id);
        let ckpt_path = dir.join("ckpt.isck");
        let hash = run_cfg.config_hash();
        stages.run(
            &format!("train-{id}"),
            &hash,
            || {
                let ckpt = load_checkpoint(&ckpt_path)?;
                if ckpt.config_hash != hash {
                    return Err(Error::Contract("checkpoint from a different config".into()));
                }
                Ok(())
            },
            || train_iteration(run_cfg, &utts, labels, &dir).map(|_| ()),
        )?;
        Ok(ModelPlan { id: id.to_string(), ckpt_path, config_hash: hash })
    };

    let refine_stage = |stages: &mut Stages,
                            tag: &str,
                            parent: &ModelPlan,
                            layer: usize,
                            k: usize|
     -> Result<Vec<PseudoLabelSequence>> {
        let path = labels_dir.join(format!("{tag}.txt"));
        let seed = derive_seed(cfg.seed, &format!("labels-{tag}"));
        let hash = stage_hash(&serde_json::json!({
            "parent": parent.config_hash,
            "layer": layer,
            "k": k,
            "kmeans_max_iter": cfg.kmeans_max_iter,
            "subsample": cfg.cluster_subsample,
            "seed": seed,
        }));
        stages.run(
            &format!("labels-{tag}"),
            &hash,
            || labels_for_manifest(&read_labels(&path)?, &entries),
            || {
                let ckpt = load_checkpoint(&parent.ckpt_path)?;
                let labels = refine_labels(
                    &ckpt,
                    &cfg.encoder,
                    &utts,
                    layer,
                    k,
                    seed,
                    cfg.kmeans_max_iter,
                    cfg.cluster_subsample,
                )?;
                write_labels(&path, &ids, &labels)?;
                Ok(labels)
            },
        )
    };

    for (policy, tag) in [(Policy::Predictive, "pred"), (Policy::Contrastive, "contr")] {
        let id1 = format!("{tag}-iter1");
        let run1 = cfg.run_config_for(
            &corpus_dir,
            policy,
            LabelSource::Kmeans,
            updates,
            derive_seed(cfg.seed, &format!("train-{id1}")),
        );
        let plan1 = train_stage(&mut stages, &id1, &run1, Some(&labels1))?;

        // each lineage re-clusters its own first-iteration model
        let layer2 = run1.cluster_layer_for(2)?;
        let labels2 = refine_stage(&mut stages, &format!("{tag}-iter2"), &plan1, layer2, cfg.k_iter2)?;

        let id2 = format!("{tag}-iter2");
        let run2 = cfg.run_config_for(
            &corpus_dir,
            policy,
            LabelSource::Kmeans,
            updates,
            derive_seed(cfg.seed, &format!("train-{id2}")),
        );
        let plan2 = train_stage(&mut stages, &id2, &run2, Some(&labels2))?;

        if policy == Policy::Predictive && cfg.include_iteration3 {
            let layer3 = run2.cluster_layer_for(3)?;
            let labels3 =
                refine_stage(&mut stages, "pred-iter3", &plan2, layer3, cfg.k_iter3)?;
            let run3 = cfg.run_config_for(
                &corpus_dir,
                policy,
                LabelSource::Kmeans,
                updates,
                derive_seed(cfg.seed, "train-pred-iter3"),
            );
            plans.push(train_stage(&mut stages, "pred-iter3", &run3, Some(&labels3))?);
        }
        plans.push(plan1);
        plans.push(plan2);
    }
    // fixed report order: predictive lineage, contrastive lineage, baselines
    plans.sort_by_key(|p| {
        ["pred-iter1", "pred-iter2", "pred-iter3", "contr-iter1", "contr-iter2"]
            .iter()
            .position(|id| *id == p.id)
            .unwrap_or(usize::MAX)
    });

    if cfg.include_quantizer {
        // trained for twice one iteration's updates: its cumulative budget
        // matches a two-iteration lineage
        let run = cfg.run_config_for(
            &corpus_dir,
            Policy::Contrastive,
            LabelSource::OnlineQuantizer,
            2 * updates,
            derive_seed(cfg.seed, "train-quant"),
        );
        plans.push(train_stage(&mut stages, "quant", &run, None)?);
    }

    if cfg.include_random {
        let dir = out_dir.join("models").join("random");
        let ckpt_path = dir.join("ckpt.isck");
        let seed = derive_seed(cfg.seed, "random-init");
        let hash = stage_hash(&serde_json::json!({ "encoder": cfg.encoder, "seed": seed }));
        let enc = cfg.encoder.clone();
        let ckpt_path2 = ckpt_path.clone();
        let hash2 = hash.clone();
        stages.run(
            "random-init",
            &hash,
            || load_checkpoint(&ckpt_path).map(|_| ()),
            move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = encoder::init_encoder_params(&enc, &mut rng)?;
                let opt = AdamState::new(&params);
                save_checkpoint(
                    &ckpt_path2,
                    &Checkpoint { params, opt, step: 0, config_hash: hash2 },
                )
            },
        )?;
        plans.push(ModelPlan { id: "random".into(), ckpt_path, config_hash: hash });
    }

    // ---- probing ----
    let units = [TokenUnit::Phoneme, TokenUnit::Word, TokenUnit::Speaker];
    let probe_dir = out_dir.join("probe");
    fs::create_dir_all(&probe_dir)?;
    let mut reports: Vec<CcaReport> = Vec::new();
    for plan in &plans {
        let json_path = probe_dir.join(format!("{}.json", plan.id));
        let hash = stage_hash(&serde_json::json!({
            "model": plan.config_hash,
            "protocol": cfg.protocol,
            "features": cfg.features,
            "seed": cfg.seed,
        }));
        let model_reports = stages.run(
            &format!("probe-{}", plan.id),
            &hash,
            || {
                let reps: Vec<CcaReport> =
                    serde_json::from_str(&fs::read_to_string(&json_path)?)
                        .map_err(|e| Error::Parse(format!("{}: {e}", json_path.display())))?;
                if reps.len() != units.len() {
                    return Err(Error::Contract("stale probe cache".into()));
                }
                for r in &reps {
                    r.validate()?;
                }
                Ok(reps)
            },
            || {
                let ckpt = load_checkpoint(&plan.ckpt_path)?;
                let reps = probe_model(&plan.id, &ckpt, cfg, &utts)?;
                let json = serde_json::to_string(&reps).expect("reports serialize");
                fs::write(&json_path, json)?;
                Ok(reps)
            },
        )?;
        reports.extend(model_reports);
    }

    // ---- outputs ----
    let report_csv = out_dir.join("report.csv");
    let summary_csv = out_dir.join("summary.csv");
    let plot_svg = out_dir.join("layer_scores.svg");
    write_report_csv(&report_csv, &reports)?;
    write_summary_csv(&summary_csv, &reports)?;
    render_plot(&plot_svg, &reports, cfg.encoder.num_layers)?;
    Ok(ExperimentOutcome { reports, report_csv, summary_csv, plot_svg, manifest_json })
}

fn planned_model_ids(cfg: &ExperimentConfig) -> Vec<String> {
    let mut ids = vec!["pred-iter1".to_string(), "pred-iter2".to_string()];
    if cfg.include_iteration3 {
        ids.push("pred-iter3".into());
    }
    ids.push("contr-iter1".into());
    ids.push("contr-iter2".into());
    if cfg.include_quantizer {
        ids.push("quant".into());
    }
    if cfg.include_random {
        ids.push("random".into());
    }
    ids
}

/// Probe one model: CCA scores for every unit at every activation stack
/// entry, with a per-(model, unit) derived random stream.
pub fn probe_model(
    model_id: &str,
    ckpt: &Checkpoint,
    cfg: &ExperimentConfig,
    utts: &[Utterance],
) -> Result<Vec<CcaReport>> {
    let sample_rate = sample_rate_of(utts)?;
    let (window, hop, _) = frame_geometry(&cfg.features, sample_rate);
    let t_model = model_frames(utts, &cfg.encoder);
    let speaker_index: BTreeMap<&str, usize> = {
        let mut names: Vec<&str> = utts.iter().map(|u| u.speaker_id.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    };
    let n_layers = cfg.encoder.num_layers + 1;
    // token inventories: [unit][layer]
    let mut tokens: Vec<Vec<Vec<Token>>> = vec![vec![Vec::new(); n_layers]; 3];
    let units = [TokenUnit::Phoneme, TokenUnit::Word, TokenUnit::Speaker];
    for (u, t) in utts.iter().zip(t_model) {
        if t == 0 {
            log::warn!("{}: too short to probe", u.utterance_id);
            continue;
        }
        let acts = encoder::forward(&ckpt.params, &u.samples, &MaskSpec::empty(), &cfg.encoder)?;
        let t_feat = u.phone_align.len();
        let phones: Vec<usize> = (0..t)
            .map(|j| u.phone_align[feature_frame_for(j, &cfg.encoder, window, hop, t_feat)])
            .collect();
        let spans = resolve_word_spans(&u.word_align, t, &cfg.encoder, window, hop, t_feat)?;
        let speaker = *speaker_index
            .get(u.speaker_id.as_str())
            .ok_or_else(|| Error::Contract(format!("unknown speaker {}", u.speaker_id)))?;
        for (layer, acts) in acts.layers.iter().enumerate() {
            let aligned = AlignedActs {
                acts,
                phone_frames: &phones,
                word_spans: &spans,
                speaker_id: speaker,
            };
            for (ui, &unit) in units.iter().enumerate() {
                tokens[ui][layer].extend(pool_tokens(&aligned, unit)?);
            }
        }
    }
    let mut reports = Vec::with_capacity(units.len());
    for (ui, &unit) in units.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &format!("probe-{model_id}-{}", unit.name()),
        ));
        let mut layer_scores = Vec::with_capacity(n_layers);
        for (layer, toks) in tokens[ui].iter().enumerate() {
            let score = cca_evaluate(toks, unit, &cfg.protocol, &mut rng)?;
            layer_scores.push((layer, score));
        }
        let report = CcaReport { model_id: model_id.to_string(), unit, layer_scores };
        report.validate()?;
        reports.push(report);
    }
    Ok(reports)
}

/// Per-unit panels of layer index vs mean CCA score, one line per model.
/// The quantizer baseline is dashed, the random baseline dotted with point
/// markers.
pub fn render_plot(path: &Path, reports: &[CcaReport], num_layers: usize) -> Result<()> {
    const PANEL_W: f64 = 300.0;
    const PANEL_H: f64 = 240.0;
    const ML: f64 = 46.0;
    const MT: f64 = 34.0;
    const GAP: f64 = 26.0;
    let units = [TokenUnit::Phoneme, TokenUnit::Word, TokenUnit::Speaker];
    let mut model_ids: Vec<&str> = Vec::new();
    for r in reports {
        if !model_ids.contains(&r.model_id.as_str()) {
            model_ids.push(&r.model_id);
        }
    }
    let palette = [
        "#6baed6", "#08519c", "#084081", "#fdae6b", "#d94801", "#31a354", "#636363", "#9e9ac8",
    ];
    let color_for = |id: &str| -> &str {
        match id {
            "pred-iter1" => "#6baed6",
            "pred-iter2" => "#08519c",
            "pred-iter3" => "#084081",
            "contr-iter1" => "#fdae6b",
            "contr-iter2" => "#d94801",
            "quant" => "#31a354",
            "random" => "#636363",
            other => {
                let i = model_ids.iter().position(|m| *m == other).unwrap_or(0);
                palette[i % palette.len()]
            }
        }
    };
    let dash_for = |id: &str| -> &str {
        match id {
            "quant" => " stroke-dasharray=\"7 4\"",
            "random" => " stroke-dasharray=\"2 4\"",
            _ => "",
        }
    };
    let total_w = ML + 3.0 * PANEL_W + 2.0 * GAP + 20.0;
    let legend_h = 22.0 * ((model_ids.len() as f64) / 2.0).ceil() + 16.0;
    let total_h = MT + PANEL_H + 46.0 + legend_h;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w:.0}\" height=\"{total_h:.0}\" \
         viewBox=\"0 0 {total_w:.0} {total_h:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{total_w:.0}\" height=\"{total_h:.0}\" fill=\"white\"/>\n"
    ));
    let x_of = |panel: usize, layer: usize| -> f64 {
        let x0 = ML + panel as f64 * (PANEL_W + GAP);
        if num_layers == 0 {
            x0
        } else {
            x0 + layer as f64 / num_layers as f64 * PANEL_W
        }
    };
    let y_of = |score: f64| -> f64 { MT + (1.0 - score.clamp(0.0, 1.0)) * PANEL_H };
    for (panel, &unit) in units.iter().enumerate() {
        let x0 = ML + panel as f64 * (PANEL_W + GAP);
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-weight=\"bold\">{}</text>\n",
            x0 + PANEL_W / 2.0,
            MT - 12.0,
            unit.name()
        ));
        svg.push_str(&format!(
            "<rect x=\"{x0:.1}\" y=\"{MT:.1}\" width=\"{PANEL_W:.1}\" height=\"{PANEL_H:.1}\" \
             fill=\"none\" stroke=\"#999\"/>\n"
        ));
        for tick in 0..=5 {
            let s = tick as f64 / 5.0;
            let y = y_of(s);
            svg.push_str(&format!(
                "<line x1=\"{x0:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#eee\"/>\n",
                x0 + PANEL_W
            ));
            if panel == 0 {
                svg.push_str(&format!(
                    "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{s:.1}</text>\n",
                    x0 - 6.0,
                    y + 4.0
                ));
            }
        }
        for layer in 0..=num_layers {
            let x = x_of(panel, layer);
            svg.push_str(&format!(
                "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{layer}</text>\n",
                MT + PANEL_H + 16.0
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">layer</text>\n",
            x0 + PANEL_W / 2.0,
            MT + PANEL_H + 34.0
        ));
        for r in reports.iter().filter(|r| r.unit == unit) {
            let pts: Vec<String> = r
                .layer_scores
                .iter()
                .map(|(layer, s)| format!("{:.1},{:.1}", x_of(panel, *layer), y_of(s.mean)))
                .collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"{}/>\n",
                pts.join(" "),
                color_for(&r.model_id),
                dash_for(&r.model_id)
            ));
            if r.model_id == "random" {
                for (layer, s) in &r.layer_scores {
                    svg.push_str(&format!(
                        "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{}\"/>\n",
                        x_of(panel, *layer),
                        y_of(s.mean),
                        color_for(&r.model_id)
                    ));
                }
            }
        }
    }
    let legend_y = MT + PANEL_H + 52.0;
    for (i, id) in model_ids.iter().enumerate() {
        let lx = ML + (i % 2) as f64 * 220.0;
        let ly = legend_y + (i / 2) as f64 * 22.0;
        svg.push_str(&format!(
            "<line x1=\"{lx:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{}\" \
             stroke-width=\"2\"{}/>\n",
            ly - 4.0,
            lx + 28.0,
            ly - 4.0,
            color_for(id),
            dash_for(id)
        ));
        svg.push_str(&format!("<text x=\"{:.1}\" y=\"{ly:.1}\">{id}</text>\n", lx + 34.0));
    }
    svg.push_str("</svg>\n");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, svg)?;
    Ok(())
}
