//! Command-line front end. Every stage of the experiment is runnable on its
//! own against a shared output directory, and `experiment` runs the whole
//! matrix end to end. Configuration comes from one `key = value` file; the
//! only flags are `--config`, `--seed`, and `--out-dir`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use issl::cca::protocol::CcaReport;
use issl::encoder::MaskSpec;
use issl::error::{Error, Result};
use issl::features::corpus::{load_utterance, read_manifest, ManifestEntry, Utterance};
use issl::features::{append_deltas, mfcc};
use issl::numcore::Matrix;
use issl::pipeline::experiment::render_plot;
use issl::pipeline::train::{labels_for_manifest, read_labels, write_labels};
use issl::pipeline::{
    compute_iter1_labels, derive_seed, load_checkpoint, parse_experiment_config, probe_model,
    refine_labels, run_experiment, train_iteration, AdamConfig, ExperimentConfig, LabelSource,
    Policy,
};
use issl::{cca, encoder, synthcorpus};

#[derive(Parser)]
#[command(
    name = "issl",
    about = "Masked-prediction speech pretraining with pseudo-label refinement and layer probes",
    version
)]
struct Cli {
    /// key = value configuration file (defaults apply when omitted)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all outputs
    #[arg(long, global = true, default_value = "issl-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus under OUT_DIR/corpus
    Synth,
    /// Write MFCC+delta feature matrices under OUT_DIR/features
    Featurize,
    /// Fit iteration-1 k-means labels (OUT_DIR/labels/iter1.txt)
    Cluster,
    /// Train one model (config keys: policy, iteration)
    Pretrain,
    /// Dump one layer's activations (config keys: model, layer)
    Extract,
    /// Re-cluster a trained model's activations into new labels (keys: model, iteration)
    Refine,
    /// Probe one model's layers with the CCA protocol (key: model)
    Probe,
    /// Run the full model matrix end to end
    Experiment,
    /// Assemble OUT_DIR/probe/*.json into CSV reports and the layer plot
    Plot,
}

/// Keys consumed by individual stage subcommands rather than the shared
/// experiment schema.
const STAGE_KEYS: &[&str] = &["policy", "iteration", "model", "layer"];

fn split_stage_keys(text: &str) -> (String, BTreeMap<String, String>) {
    let mut stage = BTreeMap::new();
    let mut rest = String::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some((k, v)) = line.split_once('=') {
            if STAGE_KEYS.contains(&k.trim()) {
                stage.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
        }
        rest.push_str(raw);
        rest.push('\n');
    }
    (rest, stage)
}

struct App {
    cfg: ExperimentConfig,
    stage: BTreeMap<String, String>,
    out: PathBuf,
}

impl App {
    fn new(cli: &Cli) -> Result<App> {
        let (rest, stage) = match &cli.config {
            Some(path) => split_stage_keys(&fs::read_to_string(path)?),
            None => (String::new(), BTreeMap::new()),
        };
        let mut cfg = parse_experiment_config(&rest, ExperimentConfig::default())?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        Ok(App { cfg, stage, out: cli.out_dir.clone() })
    }

    fn stage_key(&self, key: &str) -> Result<&str> {
        self.stage
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Config(format!("this subcommand needs a `{key} = ...` config key")))
    }

    fn stage_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.stage.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}"))),
        }
    }

    /// The corpus this run works on: an explicit directory or one synthesized
    /// earlier into the output directory.
    fn corpus_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.cfg.corpus_dir {
            return Ok(dir.clone());
        }
        let local = self.out.join("corpus");
        if local.join("manifest.txt").exists() {
            return Ok(local);
        }
        Err(Error::Config(
            "no corpus: set `corpus_dir = ...` or run `issl synth` into this out-dir first".into(),
        ))
    }

    fn load_corpus(&self) -> Result<(PathBuf, Vec<ManifestEntry>, Vec<Utterance>)> {
        let root = self.corpus_dir()?;
        let entries = read_manifest(&root.join("manifest.txt"))?;
        let utts = entries.iter().map(|e| load_utterance(&root, e)).collect::<Result<Vec<_>>>()?;
        Ok((root, entries, utts))
    }

    /// Record the exact configuration a stage invocation resolved to.
    fn write_manifest(&self, command: &str) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let manifest = serde_json::json!({
            "command": command,
            "config": self.cfg,
            "stage": self.stage,
            "optimizer": AdamConfig::default(),
        });
        fs::write(
            self.out.join("run_manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }
}

fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut s = format!("{} {}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn short_tag(policy: Policy) -> &'static str {
    match policy {
        Policy::Predictive => "pred",
        Policy::Contrastive => "contr",
    }
}

fn cmd_synth(app: &App) -> Result<()> {
    app.write_manifest("synth")?;
    let corpus = synthcorpus::generate(&app.cfg.synth, &app.out.join("corpus"))?;
    println!(
        "wrote {} utterances ({} speakers) under {}",
        corpus.entries.len(),
        app.cfg.synth.n_speakers,
        corpus.root.display()
    );
    Ok(())
}

fn cmd_featurize(app: &App) -> Result<()> {
    app.write_manifest("featurize")?;
    let (_, entries, utts) = app.load_corpus()?;
    let dir = app.out.join("features");
    fs::create_dir_all(&dir)?;
    for (e, u) in entries.iter().zip(&utts) {
        let f = mfcc(u, &app.cfg.features)?;
        let f = append_deltas(&f, app.cfg.features.delta_radius)?;
        write_matrix(&dir.join(format!("{}.txt", e.utterance_id)), &f.frames)?;
    }
    println!("wrote {} feature matrices under {}", entries.len(), dir.display());
    Ok(())
}

fn cmd_cluster(app: &App) -> Result<()> {
    app.write_manifest("cluster")?;
    let (_, entries, utts) = app.load_corpus()?;
    let ids: Vec<String> = entries.iter().map(|e| e.utterance_id.clone()).collect();
    let labels_dir = app.out.join("labels");
    let labels = compute_iter1_labels(&app.cfg, &utts, &ids, &labels_dir)?;
    let vocab = labels.first().map(|l| l.vocab_size).unwrap_or(0);
    println!("k={vocab} labels for {} utterances: {}", ids.len(), labels_dir.join("iter1.txt").display());
    Ok(())
}

fn cmd_pretrain(app: &App) -> Result<()> {
    app.write_manifest("pretrain")?;
    let policy_key = app.stage_key("policy")?;
    let (corpus_dir, entries, utts) = app.load_corpus()?;
    let cfg = &app.cfg;
    let (id, run, labels) = if policy_key == "quantizer" {
        let run = cfg.run_config_for(
            &corpus_dir,
            Policy::Contrastive,
            LabelSource::OnlineQuantizer,
            2 * cfg.updates_per_iteration,
            derive_seed(cfg.seed, "train-quant"),
        );
        ("quant".to_string(), run, None)
    } else {
        let policy = Policy::parse(policy_key)?;
        let iteration = app.stage_usize("iteration", 1)?;
        let id = format!("{}-iter{iteration}", short_tag(policy));
        let labels_file = if iteration == 1 {
            app.out.join("labels").join("iter1.txt")
        } else {
            app.out.join("labels").join(format!("{id}.txt"))
        };
        let labels = labels_for_manifest(&read_labels(&labels_file)?, &entries)?;
        let run = cfg.run_config_for(
            &corpus_dir,
            policy,
            LabelSource::Kmeans,
            cfg.updates_per_iteration,
            derive_seed(cfg.seed, &format!("train-{id}")),
        );
        (id, run, Some(labels))
    };
    let dir = app.out.join("models").join(&id);
    let outcome = train_iteration(&run, &utts, labels.as_deref(), &dir)?;
    println!(
        "{id}: {} updates, final loss {:.4}, checkpoint {}",
        run.total_updates,
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        dir.join("ckpt.isck").display()
    );
    Ok(())
}

fn cmd_extract(app: &App) -> Result<()> {
    app.write_manifest("extract")?;
    let model = app.stage_key("model")?;
    let layer = app.stage_usize("layer", usize::MAX)?;
    if layer > app.cfg.encoder.num_layers {
        return Err(Error::Config(format!(
            "layer = 0..={} required (the conv front end is layer 0)",
            app.cfg.encoder.num_layers
        )));
    }
    let (_, entries, utts) = app.load_corpus()?;
    let ckpt = load_checkpoint(&app.out.join("models").join(model).join("ckpt.isck"))?;
    let dir = app.out.join("extract").join(format!("{model}-layer{layer}"));
    fs::create_dir_all(&dir)?;
    let mut written = 0;
    for (e, u) in entries.iter().zip(&utts) {
        if app.cfg.encoder.conv_output_len(u.samples.len()).is_none() {
            log::warn!("{}: too short to encode, skipped", e.utterance_id);
            continue;
        }
        let acts = encoder::forward(&ckpt.params, &u.samples, &MaskSpec::empty(), &app.cfg.encoder)?;
        write_matrix(&dir.join(format!("{}.txt", e.utterance_id)), &acts.layers[layer])?;
        written += 1;
    }
    println!("wrote {written} activation matrices under {}", dir.display());
    Ok(())
}

fn cmd_refine(app: &App) -> Result<()> {
    app.write_manifest("refine")?;
    let model = app.stage_key("model")?;
    let iteration = app.stage_usize("iteration", 2)?;
    let (layer, k) = match iteration {
        2 => (app.cfg.cluster_layer_iter2, app.cfg.k_iter2),
        3 => (app.cfg.cluster_layer_iter3, app.cfg.k_iter3),
        n => return Err(Error::Config(format!("iteration = 2|3 required, got {n}"))),
    };
    let tag = model.split('-').next().unwrap_or(model);
    let (_, entries, utts) = app.load_corpus()?;
    let ids: Vec<String> = entries.iter().map(|e| e.utterance_id.clone()).collect();
    let ckpt = load_checkpoint(&app.out.join("models").join(model).join("ckpt.isck"))?;
    let seed = derive_seed(app.cfg.seed, &format!("labels-{tag}-iter{iteration}"));
    let labels = refine_labels(
        &ckpt,
        &app.cfg.encoder,
        &utts,
        layer,
        k,
        seed,
        app.cfg.kmeans_max_iter,
        app.cfg.cluster_subsample,
    )?;
    let path = app.out.join("labels").join(format!("{tag}-iter{iteration}.txt"));
    write_labels(&path, &ids, &labels)?;
    println!("k={k} labels from {model} layer {layer}: {}", path.display());
    Ok(())
}

fn cmd_probe(app: &App) -> Result<()> {
    app.write_manifest("probe")?;
    let model = app.stage_key("model")?;
    let (_, _, utts) = app.load_corpus()?;
    let ckpt = load_checkpoint(&app.out.join("models").join(model).join("ckpt.isck"))?;
    let reports = probe_model(model, &ckpt, &app.cfg, &utts)?;
    let dir = app.out.join("probe");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{model}.json"));
    fs::write(&path, serde_json::to_string(&reports).expect("reports serialize"))?;
    for r in &reports {
        let means: Vec<String> =
            r.layer_scores.iter().map(|(l, s)| format!("{l}:{:.3}", s.mean)).collect();
        println!("{model} {}: {}", r.unit.name(), means.join(" "));
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_experiment(app: &App) -> Result<()> {
    let outcome = run_experiment(&app.cfg, &app.out)?;
    println!("report:  {}", outcome.report_csv.display());
    println!("summary: {}", outcome.summary_csv.display());
    println!("plot:    {}", outcome.plot_svg.display());
    println!("manifest: {}", outcome.manifest_json.display());
    Ok(())
}

/// Canonical report order; anything else sorts after, alphabetically.
fn model_order(id: &str) -> (usize, String) {
    const ORDER: &[&str] =
        &["pred-iter1", "pred-iter2", "pred-iter3", "contr-iter1", "contr-iter2", "quant", "random"];
    match ORDER.iter().position(|m| *m == id) {
        Some(i) => (i, String::new()),
        None => (ORDER.len(), id.to_string()),
    }
}

fn cmd_plot(app: &App) -> Result<()> {
    app.write_manifest("plot")?;
    let dir = app.out.join("probe");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort_by_key(|p| {
        model_order(p.file_stem().and_then(|s| s.to_str()).unwrap_or_default())
    });
    let mut reports: Vec<CcaReport> = Vec::new();
    for f in &files {
        let reps: Vec<CcaReport> = serde_json::from_str(&fs::read_to_string(f)?)
            .map_err(|e| Error::Parse(format!("{}: {e}", f.display())))?;
        reports.extend(reps);
    }
    if reports.is_empty() {
        return Err(Error::Config(format!("no probe reports under {}", dir.display())));
    }
    let report_csv = app.out.join("report.csv");
    let summary_csv = app.out.join("summary.csv");
    let plot_svg = app.out.join("layer_scores.svg");
    cca::protocol::write_report_csv(&report_csv, &reports)?;
    cca::protocol::write_summary_csv(&summary_csv, &reports)?;
    render_plot(&plot_svg, &reports, app.cfg.encoder.num_layers)?;
    println!("{}", report_csv.display());
    println!("{}", summary_csv.display());
    println!("{}", plot_svg.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let app = App::new(cli)?;
    match cli.cmd {
        Cmd::Synth => cmd_synth(&app),
        Cmd::Featurize => cmd_featurize(&app),
        Cmd::Cluster => cmd_cluster(&app),
        Cmd::Pretrain => cmd_pretrain(&app),
        Cmd::Extract => cmd_extract(&app),
        Cmd::Refine => cmd_refine(&app),
        Cmd::Probe => cmd_probe(&app),
        Cmd::Experiment => cmd_experiment(&app),
        Cmd::Plot => cmd_plot(&app),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
