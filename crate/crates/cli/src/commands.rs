use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use bgcl::downstream::{classify, embed, EmbedMode, LogRegConfig};
use bgcl::encoder::Checkpoint;
use bgcl::evalmetrics::{
    astd_khop_experiment, pavpu_protocol, write_astd_csv, write_pavpu_csv, write_summary_json,
    ASTD_CSV, PAVPU_CSV, SUMMARY_JSON,
};
use bgcl::graphdata::{
    choose_nodes, generate_sbm, inject_noise, load_graph, save_graph, Graph, SbmSpec, EDGES_FILE,
    FEATURES_FILE, LABELS_FILE, SPLITS_FILE,
};
use bgcl::trainer::{train, RunConfig};
use log::info;
use serde_json::json;

use super::{AstdArgs, ClassifyArgs, Command, EmbedArgs, Mode, PavpuArgs, SynthArgs, TrainArgs};
use crate::manifest::RunManifest;

pub const MODEL_FILE: &str = "model.bgcl";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bgce";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const NOISY_MODEL_FILE: &str = "noisy_model.bgcl";

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Embed(a) => embed_cmd(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Pavpu(a) => pavpu_cmd(a),
        Command::Astd(a) => astd_cmd(a),
    }
}

fn out_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating output directory {}", path.display()))
}

fn read_graph(dir: &Path) -> anyhow::Result<Graph> {
    load_graph(dir).with_context(|| format!("loading graph from {}", dir.display()))
}

fn read_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_json_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn synth(a: SynthArgs) -> Outcome {
    let spec = SbmSpec {
        n_per_block: a.nodes_per_block,
        n_blocks: a.blocks,
        p_in: a.p_in,
        p_out: a.p_out,
        feature_dim: a.feature_dim,
        signal: a.signal,
        seed: a.seed,
    };
    if a.blocks == 0 || a.nodes_per_block == 0 || a.feature_dim == 0 {
        return Err(usage("--blocks, --nodes-per-block and --feature-dim must be positive"));
    }
    if !(0.0..=1.0).contains(&a.p_in) || !(0.0..=1.0).contains(&a.p_out) {
        return Err(usage("--p-in and --p-out must lie in [0, 1]"));
    }
    out_dir(&a.out)?;
    let config = json!({
        "blocks": a.blocks,
        "nodes_per_block": a.nodes_per_block,
        "p_in": a.p_in,
        "p_out": a.p_out,
        "feature_dim": a.feature_dim,
        "signal": a.signal,
    });
    let manifest = RunManifest::new("synth", config, a.seed)
        .outputs(&[EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLITS_FILE]);
    manifest.write(&a.out)?;
    let g = generate_sbm(&spec)?;
    save_graph(&g, &a.out)?;
    info!("wrote {} nodes, {} edges to {}", g.n_nodes(), g.n_edges(), a.out.display());
    manifest.finish(&a.out)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut cfg = read_config(a.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let g = read_graph(&a.data)?;
    out_dir(&a.out)?;
    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg)?, cfg.seed)
        .input("data", &a.data)
        .outputs(&[MODEL_FILE, TRAIN_LOG_FILE]);
    if let Some(c) = &a.config {
        manifest = manifest.input("config", c);
    }
    manifest.write(&a.out)?;

    let mut log = String::new();
    let mut line_error = None;
    let result = train(&g, &cfg, |rec| {
        info!(
            "epoch {}: L_CNT {:.6} KL_aug {:.3e}",
            rec.epoch, rec.phase1.l_cnt, rec.phase1.kl_aug
        );
        match serde_json::to_string(rec) {
            Ok(s) => {
                log.push_str(&s);
                log.push('\n');
            }
            Err(e) => line_error = Some(e),
        }
    });
    if let Some(e) = line_error {
        return Err(e.into());
    }
    fs::write(a.out.join(TRAIN_LOG_FILE), &log)?;
    match result {
        Ok(ck) => {
            ck.save(a.out.join(MODEL_FILE))?;
            manifest.finish(&a.out)?;
            Ok(())
        }
        Err((e, last_good)) => {
            if let Some(ck) = last_good {
                ck.save(a.out.join(MODEL_FILE))?;
                manifest.finish(&a.out)?;
                return Err(anyhow!("training aborted: {e}; last finite state saved to {MODEL_FILE}").into());
            }
            Err(anyhow!("training failed: {e}").into())
        }
    }
}

fn embed_cmd(a: EmbedArgs) -> Outcome {
    if a.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let ck = read_checkpoint(&a.checkpoint)?;
    let g = read_graph(&a.data)?;
    out_dir(&a.out)?;
    let mode: EmbedMode = a.mode.into();
    let config = json!({ "samples": a.samples, "mode": mode });
    let manifest = RunManifest::new("embed", config, a.seed)
        .input("checkpoint", &a.checkpoint)
        .input("data", &a.data)
        .outputs(&[EMBEDDINGS_FILE]);
    manifest.write(&a.out)?;
    let samples = embed(&ck, &g, mode, a.samples, a.seed)?;
    samples.save(a.out.join(EMBEDDINGS_FILE))?;
    manifest.finish(&a.out)?;
    Ok(())
}

fn classify_cmd(a: ClassifyArgs) -> Outcome {
    let (samples, k) = match a.mode {
        Mode::Bayesian => (a.samples, a.k),
        Mode::Deterministic => (1, 1),
    };
    if k == 0 || k > samples {
        return Err(usage(format!("--k must lie in [1, --samples], got k = {k}, samples = {samples}")));
    }
    let ck = read_checkpoint(&a.checkpoint)?;
    let g = read_graph(&a.data)?;
    out_dir(&a.out)?;
    let mode: EmbedMode = a.mode.into();
    let lr = LogRegConfig::default();
    let config = json!({ "samples": samples, "k": k, "mode": mode, "classifier": lr });
    let manifest = RunManifest::new("classify", config, a.seed)
        .input("checkpoint", &a.checkpoint)
        .input("data", &a.data)
        .outputs(&[PREDICTIONS_FILE, SUMMARY_JSON]);
    manifest.write(&a.out)?;
    let emb = embed(&ck, &g, mode, samples, a.seed)?;
    let c = classify(&emb, &g, k, &lr)?;
    let labels = g.labels().ok_or_else(|| anyhow!("graph has no labels"))?;
    let mut csv = String::from("node,predicted,label\n");
    for (v, (&p, &y)) in c.predicted.iter().zip(labels).enumerate() {
        writeln!(csv, "{v},{p},{y}").expect("string write");
    }
    fs::write(a.out.join(PREDICTIONS_FILE), csv)?;
    let summary = json!({
        "train_accuracy": c.train_accuracy,
        "test_accuracy": c.test_accuracy,
    });
    write_summary_json(&summary, a.out.join(SUMMARY_JSON))?;
    println!("test accuracy {:.4}", c.test_accuracy);
    manifest.finish(&a.out)?;
    Ok(())
}

fn pavpu_cmd(a: PavpuArgs) -> Outcome {
    let ck = read_checkpoint(&a.checkpoint)?;
    let g = read_graph(&a.data)?;
    out_dir(&a.out)?;
    let manifest = RunManifest::new("pavpu", json!({}), a.seed)
        .input("checkpoint", &a.checkpoint)
        .input("data", &a.data)
        .outputs(&[PAVPU_CSV, SUMMARY_JSON]);
    manifest.write(&a.out)?;
    let report = pavpu_protocol(&ck, &g, a.seed)?;
    write_pavpu_csv(&report, a.out.join(PAVPU_CSV))?;
    let summary = json!({
        "accuracy": report.accuracy,
        "evaluated": report.evaluated.len(),
        "mean_entropy": report.mean_entropy(&report.evaluated),
        "thresholds": report.thresholds,
    });
    write_summary_json(&summary, a.out.join(SUMMARY_JSON))?;
    manifest.finish(&a.out)?;
    Ok(())
}

fn astd_cmd(a: AstdArgs) -> Outcome {
    if a.samples < 2 {
        return Err(usage("--samples must be at least 2"));
    }
    if a.sigma.is_nan() || a.sigma < 0.0 {
        return Err(usage("--sigma must be non-negative"));
    }
    let mut cfg = read_config(a.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    cfg.seed = a.seed;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let clean = read_checkpoint(&a.checkpoint)?;
    let g = read_graph(&a.data)?;
    if a.noise_nodes == 0 || a.noise_nodes > g.n_nodes() {
        return Err(usage(format!("--noise-nodes must lie in [1, {}]", g.n_nodes())));
    }
    out_dir(&a.out)?;
    let config = json!({
        "sigma": a.sigma,
        "noise_nodes": a.noise_nodes,
        "samples": a.samples,
        "k_max": a.k_max,
        "train": cfg,
    });
    let mut manifest = RunManifest::new("astd", config, a.seed)
        .input("checkpoint", &a.checkpoint)
        .input("data", &a.data)
        .outputs(&[NOISY_MODEL_FILE, ASTD_CSV, SUMMARY_JSON]);
    if let Some(c) = &a.config {
        manifest = manifest.input("config", c);
    }
    manifest.write(&a.out)?;

    let noised = choose_nodes(g.n_nodes(), a.noise_nodes, a.seed)?;
    let noisy_graph = inject_noise(&g, &noised, a.sigma, a.seed.wrapping_add(1))?;
    let noisy = train(&noisy_graph, &cfg, |_| {}).map_err(|(e, _)| anyhow!("training on the noisy graph failed: {e}"))?;
    noisy.save(a.out.join(NOISY_MODEL_FILE))?;
    let table = astd_khop_experiment(&clean, &noisy, &g, &noisy_graph, &noised, a.k_max, a.samples, a.seed)?;
    write_astd_csv(&table, a.out.join(ASTD_CSV))?;
    let means: Vec<Option<f64>> = (0..=a.k_max).map(|k| table.mean(k)).collect();
    let summary = json!({ "noised_nodes": noised, "mean_difference_by_hop": means });
    write_summary_json(&summary, a.out.join(SUMMARY_JSON))?;
    manifest.finish(&a.out)?;
    Ok(())
}
