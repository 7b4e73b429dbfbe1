//! One test per acceptance criterion. Each prints a single PASS, FAIL or
//! SKIPPED line to stderr, bypassing the test harness's output capture.

#[allow(dead_code)]
#[path = "../../core/tests/common/gradients.rs"]
mod gradients;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use bgcl::augment::{sample_masks, special_case_masks, MaskMode, SpecialCase};
use bgcl::downstream::{classify, mc_logreg_train, mc_predict, sample_embeddings, EmbedMode, LogRegConfig};
use bgcl::encoder::{connection_weight_view, encode_view, gcn_aug_layer, Activation, Checkpoint, EncoderConfig, EncoderParams};
use bgcl::evalmetrics::{
    astd_khop_experiment, pavpu, pavpu_csv, pavpu_from_samples, pavpu_protocol, predictive_entropy,
    sample_groups, PAVPU_GROUP, PAVPU_SAMPLES,
};
use bgcl::graphdata::{choose_nodes, generate_sbm, inject_noise, load_graph, normalize_adjacency, Graph, SbmSpec};
use bgcl::numcore::rng::stream;
use bgcl::numcore::Tensor;
use bgcl::objective::contrastive_loss;
use bgcl::oracles::{kl_quadrature, naive_gcn_masked, naive_grace_loss};
use bgcl::trainer::{train, RunConfig};
use rand::Rng;

fn report(criterion: &str, pass: bool, detail: impl std::fmt::Display) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{verdict} criterion {criterion}: {detail}");
}

fn skip(criterion: &str, why: &str) {
    let _ = writeln!(std::io::stderr().lock(), "SKIPPED criterion {criterion}: {why}");
}

fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_graph<R: Rng>(rng: &mut R, n: usize, f: usize) -> Graph {
    let p = rng.random_range(0.1..0.7);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::new(n, edges, random_tensor(rng, n, f), None, BTreeMap::new()).unwrap()
}

fn dense_mask(adj: &bgcl::numcore::CsrMatrix, row: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(&[adj.n(), adj.n()]);
    for r in 0..adj.n() {
        for e in adj.row_range(r) {
            out.set(r, adj.col_indices()[e], row[e]);
        }
    }
    out
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    for p in gradients::primitives() {
        for s in 0..50 {
            let e = (p.error)(s);
            if e.is_nan() || e > worst.0 {
                worst = (e, p.name.to_string());
            }
        }
    }
    for act in [Activation::Relu, Activation::Prelu] {
        for seed in 0..3 {
            let (cnt, kl) = gradients::PipelineFixture::new(seed, act).errors();
            for (e, name) in [(cnt, "pipeline contrastive"), (kl, "pipeline kl")] {
                if e.is_nan() || e > worst.0 {
                    worst = (e, format!("{name} ({act:?})"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-4 && secs < 60.0;
    report("1", pass, format!("max relative error {:.2e} ({}), {secs:.1} s", worst.0, worst.1));
    assert!(pass);
}

#[test]
fn criterion_02_structural_equivalence() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = stream(seed, 2);
        let n = rng.random_range(1..=8);
        let f_in = rng.random_range(1..5);
        let f_out = rng.random_range(1..7);
        let blocks = rng.random_range(1..=f_out.min(3));
        let g = random_graph(&mut rng, n, f_in);
        let adj = normalize_adjacency(&g);
        let csr = adj.matrix();
        let mode = if seed % 2 == 0 { MaskMode::Hard } else { MaskMode::Relaxed { temperature: 0.4 } };
        let pi = rng.random_range(0.2..0.9);
        let set = sample_masks(csr, blocks, &[pi], mode, seed % 3 == 0, &mut rng).unwrap();
        let mask = &set.layers[0];
        let w = random_tensor(&mut rng, f_in, f_out);
        let act = if seed % 4 < 2 { Activation::Relu } else { Activation::Prelu };
        let fast = gcn_aug_layer(g.features(), &adj, Some(mask), &w, blocks, act, 0.25).unwrap();
        let view = connection_weight_view(&w, Some(mask), &adj, g.features(), blocks, act, 0.25).unwrap();
        let dense: Vec<Tensor> = (0..blocks).map(|b| dense_mask(csr, mask.blocks.row(b))).collect();
        let naive = naive_gcn_masked(&csr.to_dense(), g.features(), &dense, None, &w, |x| act.apply(x, 0.25));
        worst = worst.max(fast.max_abs_diff(&view)).max(fast.max_abs_diff(&naive));
    }
    let pass = worst < 1e-12;
    report("2", pass, format!("max abs diff {worst:.2e} over 100 graphs"));
    assert!(pass);
}

fn path5() -> Graph {
    let x = Tensor::matrix(5, 3, (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect());
    Graph::new(5, [(0, 1), (1, 2), (2, 3), (3, 4)], x, None, BTreeMap::new()).unwrap()
}

fn five_node_params(cfg: &EncoderConfig) -> EncoderParams {
    EncoderParams::init(cfg, &mut stream(5, 5)).unwrap()
}

/// NodeDrop on the 5-node path: the node draws are the first five uniforms
/// of the stream; the layer output must equal a plain GCN on the adjacency
/// with the dropped nodes' rows and columns zeroed.
fn nodedrop_trace() -> bool {
    let g = path5();
    let adj = normalize_adjacency(&g);
    let csr = adj.matrix();
    let mut rng = stream(42, 0);
    let keep: Vec<bool> = (0..5).map(|_| rng.random::<f64>() < 0.5).collect();
    let set = special_case_masks(SpecialCase::NodeDrop, csr, 3, 1, 2, 0.5, &mut stream(42, 0)).unwrap();
    let mut a = csr.to_dense();
    for v in 0..5 {
        for u in 0..5 {
            if !keep[v] || !keep[u] {
                a.set(v, u, 0.0);
            }
        }
    }
    let w = random_tensor(&mut stream(1, 1), 3, 4);
    let got = gcn_aug_layer(g.features(), &adj, Some(&set.layers[0]), &w, 2, Activation::Relu, 0.0).unwrap();
    let expected = a.matmul(&g.features().matmul(&w).unwrap()).unwrap().map(|x| x.max(0.0));
    let dropped_rows_zero = (0..5).filter(|&v| !keep[v]).all(|v| got.row(v).iter().all(|&x| x == 0.0));
    keep.iter().any(|k| !k) && keep.iter().any(|&k| k) && got.max_abs_diff(&expected) < 1e-12 && dropped_rows_zero
}

/// Dropout on the 5-node path with 2 blocks: draw `z[v·B + b]` zeroes node
/// `v`'s outputs in block `b` and leaves the rest of the row as the plain
/// GCN output.
fn dropout_trace() -> bool {
    let g = path5();
    let adj = normalize_adjacency(&g);
    let csr = adj.matrix();
    let mut rng = stream(9, 0);
    let z: Vec<bool> = (0..10).map(|_| rng.random::<f64>() < 0.5).collect();
    let set = special_case_masks(SpecialCase::Dropout, csr, 3, 1, 2, 0.5, &mut stream(9, 0)).unwrap();
    let w = random_tensor(&mut stream(2, 2), 3, 4);
    let got = gcn_aug_layer(g.features(), &adj, Some(&set.layers[0]), &w, 2, Activation::Relu, 0.0).unwrap();
    let plain = gcn_aug_layer(g.features(), &adj, None, &w, 2, Activation::Relu, 0.0).unwrap();
    let mut ok = z.iter().any(|k| !k) && z.iter().any(|&k| k);
    for v in 0..5 {
        for j in 0..4 {
            let b = j / 2;
            let expected = if z[v * 2 + b] { plain.get(v, j) } else { 0.0 };
            ok &= (got.get(v, j) - expected).abs() < 1e-12;
        }
    }
    ok
}

#[test]
fn criterion_03_special_case_reduction() {
    let g = path5();
    let adj = normalize_adjacency(&g);
    let cfg = EncoderConfig::new(3, 4, 4, 2, 2, Activation::Prelu).unwrap();
    let params = five_node_params(&cfg);

    let set = special_case_masks(SpecialCase::FeatureDrop, adj.matrix(), 3, 2, 2, 0.5, &mut stream(3, 0)).unwrap();
    let col = set.layers[0].features.as_ref().unwrap().row(0).to_vec();
    let dropped = g.features().zip_map(set.layers[0].features.as_ref().unwrap(), |x, m| if m == 0.0 { 0.0 } else { x });
    let masked = encode_view(&cfg, &params, &adj, g.features(), Some(&set)).unwrap();
    let vanilla = encode_view(&cfg, &params, &adj, &dropped, None).unwrap();
    let feature_drop = masked == vanilla && col.contains(&0.0);

    let ones = sample_masks(adj.matrix(), 2, &[1.0, 1.0], MaskMode::Hard, false, &mut stream(4, 0)).unwrap();
    let with_ones = encode_view(&cfg, &params, &adj, g.features(), Some(&ones)).unwrap();
    let without = encode_view(&cfg, &params, &adj, g.features(), None).unwrap();
    let unit_keep = with_ones.data().iter().zip(without.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let node_drop = nodedrop_trace();
    let dropout = dropout_trace();
    let pass = feature_drop && unit_keep && node_drop && dropout;
    report(
        "3",
        pass,
        format!("FeatureDrop {feature_drop}, pi=1 bitwise {unit_keep}, NodeDrop trace {node_drop}, Dropout trace {dropout}"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_kl_correctness() {
    let mut worst = 0.0f64;
    for i in 0..10 {
        for j in 0..10 {
            let a = 0.5 + 3.5 * i as f64 / 9.0;
            let b = 0.5 + 3.5 * j as f64 / 9.0;
            let closed = bgcl::augment::kl_kuma_beta(a, b, 2.0, 2);
            let numeric = kl_quadrature(a, b, 1.0, 1.0).unwrap();
            worst = worst.max((closed - numeric).abs());
        }
    }
    let zero = [2usize, 3, 4].iter().all(|&l| bgcl::augment::kl_kuma_beta(1.0, 1.0, l as f64, l) == 0.0);
    let pass = worst < 1e-3 && zero;
    report("4", pass, format!("max |closed form - quadrature| {worst:.2e} on 10x10 grid, KL(1,1,c=L) exactly 0: {zero}"));
    assert!(pass);
}

#[test]
fn criterion_05_loss_oracle() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = stream(seed, 5);
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..8);
        let tau = rng.random_range(0.2..1.5);
        let a = random_tensor(&mut rng, n, d);
        let b = random_tensor(&mut rng, n, d);
        worst = worst.max((contrastive_loss(&a, &b, tau).unwrap() - naive_grace_loss(&a, &b, tau)).abs());
    }
    let e = Tensor::identity(2);
    let ortho = contrastive_loss(&e, &e, 1.0).unwrap();
    let pass = worst < 1e-10 && (ortho - 0.55144).abs() < 1e-4;
    report("5", pass, format!("max diff {worst:.2e} over 100 fixtures, orthonormal N=2 loss {ortho:.5}"));
    assert!(pass);
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn desk_graph(seed: u64) -> Graph {
    generate_sbm(&SbmSpec {
        n_per_block: 100,
        n_blocks: 3,
        p_in: 0.04,
        p_out: 0.004,
        feature_dim: 32,
        signal: 2.0,
        seed,
    })
    .unwrap()
}

fn desk_config(seed: u64) -> RunConfig {
    RunConfig {
        lr_w: 0.001,
        blocks: 4,
        epochs: 100,
        hidden_dim: 64,
        latent_dim: 32,
        seed,
        ..RunConfig::default()
    }
}

fn train_ok(g: &Graph, cfg: &RunConfig) -> Checkpoint {
    train(g, cfg, |_| {}).map_err(|(e, _)| e).expect("training")
}

/// Clean-graph models for every seed, shared by criteria 6 and 8, with the
/// time spent training them.
fn clean_models() -> &'static (Vec<Checkpoint>, f64) {
    static MODELS: OnceLock<(Vec<Checkpoint>, f64)> = OnceLock::new();
    MODELS.get_or_init(|| {
        let start = Instant::now();
        let models = SEEDS.iter().map(|&s| train_ok(&desk_graph(s), &desk_config(s))).collect();
        (models, start.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_06_desk_scale_learning() {
    let (models, train_secs) = clean_models();
    let start = Instant::now();
    let accs: Vec<f64> = SEEDS
        .iter()
        .zip(models)
        .map(|(&s, ck)| {
            let g = desk_graph(s);
            let samples = bgcl::downstream::embed(ck, &g, EmbedMode::Bayesian, 20, s).unwrap();
            classify(&samples, &g, 10, &LogRegConfig::default()).unwrap().test_accuracy
        })
        .collect();
    let secs = train_secs + start.elapsed().as_secs_f64();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let pass = mean >= 0.85 && secs < 300.0;
    report("6", pass, format!("mean test accuracy {mean:.4} over seeds {accs:.3?}, {secs:.0} s"));
    assert!(pass);
}

#[test]
fn criterion_07_cora_spot_check() {
    let Ok(dir) = std::env::var("BGCL_CORA_DIR") else {
        skip("7", "set BGCL_CORA_DIR to a Cora graph directory to run the optional check");
        return;
    };
    let g = load_graph(&dir).expect("loading Cora");
    let cfg = RunConfig::default();
    let start = Instant::now();
    let ck = train_ok(&g, &cfg);
    let samples = bgcl::downstream::embed(&ck, &g, EmbedMode::Bayesian, 20, 0).unwrap();
    let acc = classify(&samples, &g, 10, &LogRegConfig::default()).unwrap().test_accuracy;
    let secs = start.elapsed().as_secs_f64();
    let pass = acc >= 0.78 && secs < 3600.0;
    report("7", pass, format!("Cora test accuracy {acc:.4}, {secs:.0} s"));
    assert!(pass);
}

#[test]
fn criterion_08_uncertainty_direction() {
    let (models, _) = clean_models();
    let mut entropy_wins = 0;
    let mut astd_wins = 0;
    let mut lines = Vec::new();
    for (&s, clean) in SEEDS.iter().zip(models) {
        let g = desk_graph(s);
        let noised = choose_nodes(g.n_nodes(), 10, s + 100).unwrap();
        let ng = inject_noise(&g, &noised, 1.0, s + 200).unwrap();
        let noisy = train_ok(&ng, &desk_config(s));

        let rep = pavpu_protocol(&noisy, &ng, s).unwrap();
        let others: Vec<usize> = (0..g.n_nodes()).filter(|v| !noised.contains(v)).collect();
        let (h_noised, h_clean) = (rep.mean_entropy(&noised), rep.mean_entropy(&others));
        entropy_wins += usize::from(h_noised > h_clean);

        let table = astd_khop_experiment(clean, &noisy, &g, &ng, &noised, 3, 100, s).unwrap();
        let (hop0, hop3) = (table.mean(0), table.mean(3));
        astd_wins += usize::from(matches!((hop0, hop3), (Some(a), Some(b)) if a > b));
        lines.push(format!(
            "seed {s}: entropy {h_noised:.4} vs {h_clean:.4}, ASTD diff hop0 {hop0:.4?} hop3 {hop3:.4?}"
        ));
    }
    let (pass_a, pass_b) = (entropy_wins >= 4, astd_wins >= 4);
    report(
        "8",
        pass_a && pass_b,
        format!(
            "(a) noised entropy higher on {entropy_wins}/5 seeds, (b) hop-0 ASTD difference above hop 3 on {astd_wins}/5 seeds; {}",
            lines.join("; ")
        ),
    );
    assert!(pass_a, "entropy direction held on {entropy_wins}/5 seeds");
    assert!(pass_b, "ASTD direction held on {astd_wins}/5 seeds");
}

fn small_labeled(seed: u64) -> (Graph, Checkpoint) {
    let g = generate_sbm(&SbmSpec {
        n_per_block: 20,
        n_blocks: 3,
        p_in: 0.2,
        p_out: 0.02,
        feature_dim: 8,
        signal: 2.0,
        seed,
    })
    .unwrap();
    let cfg = RunConfig {
        epochs: 10,
        hidden_dim: 16,
        latent_dim: 8,
        blocks: 2,
        seed,
        ..RunConfig::default()
    };
    let ck = train_ok(&g, &cfg);
    (g, ck)
}

#[test]
fn criterion_09_pavpu_protocol_mechanics() {
    let groups = sample_groups(PAVPU_SAMPLES, PAVPU_GROUP);
    let covered: Vec<usize> = groups.iter().flat_map(|r| r.clone()).collect();
    let partition = groups.len() == 50
        && groups.iter().all(|r| r.len() == 10)
        && covered == (0..500).collect::<Vec<_>>();

    let (g, ck) = small_labeled(3);
    let samples = sample_embeddings(&ck, &g, PAVPU_SAMPLES, 11).unwrap();
    let rep = pavpu_from_samples(&samples, &g, PAVPU_GROUP, &LogRegConfig::default()).unwrap();

    // independent replay: classifier on group 0, mean over groups 1..50
    let labels = g.labels().unwrap();
    let (params, _) = mc_logreg_train(
        &samples.slice(0..10).unwrap(),
        g.split("train").unwrap(),
        labels,
        3,
        10,
        &LogRegConfig::default(),
    )
    .unwrap();
    let mut mean = Tensor::zeros(&[g.n_nodes(), 3]);
    for r in &groups[1..] {
        let p = mc_predict(&samples.slice(r.clone()).unwrap(), &params).unwrap();
        mean = mean.zip_map(&p, |a, b| a + b);
    }
    let mean = mean.scale(1.0 / 49.0);
    let replay = rep.nodes.iter().all(|n| {
        let row = mean.row(n.node);
        let best = (0..3).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        best == n.predicted && (predictive_entropy(row).unwrap() - n.entropy).abs() < 1e-12
    });

    let test = g.split("test").unwrap();
    let correct: Vec<bool> = test.iter().map(|&v| rep.nodes[v].correct).collect();
    let ent: Vec<f64> = test.iter().map(|&v| rep.nodes[v].entropy).collect();
    let at_one = (pavpu(&correct, &ent, 1.0) - rep.accuracy).abs();

    let first = pavpu_protocol(&ck, &g, 21).unwrap();
    let second = pavpu_protocol(&ck, &g, 21).unwrap();
    let reproducible = first == second && pavpu_csv(&first).as_bytes() == pavpu_csv(&second).as_bytes();

    let pass = partition && replay && at_one < 1e-12 && reproducible;
    report(
        "9",
        pass,
        format!("1+49 groups of 10: {partition}, replay matches: {replay}, |PAVPU(1.0) - accuracy| {at_one:.1e}, bit-exact rerun: {reproducible}"),
    );
    assert!(pass);
}

fn run_bgcl(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_bgcl")).args(args).output().expect("spawn bgcl");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn run_pipeline(root: &Path, data: &str, cfg: &str, threads: &str) {
    let out = root.to_str().unwrap();
    let ck = root.join("model.bgcl");
    let ck = ck.to_str().unwrap();
    let astd_out = root.join("astd");
    let astd_out = astd_out.to_str().unwrap();
    run_bgcl(&["--threads", threads, "train", "--config", cfg, "--data", data, "--out", out, "--seed", "5"]);
    run_bgcl(&["--threads", threads, "embed", "--checkpoint", ck, "--data", data, "--out", out, "--samples", "20", "--seed", "5"]);
    run_bgcl(&["--threads", threads, "pavpu", "--checkpoint", ck, "--data", data, "--out", out, "--seed", "5"]);
    run_bgcl(&[
        "--threads", threads, "astd", "--checkpoint", ck, "--data", data, "--config", cfg, "--out", astd_out,
        "--noise-nodes", "5", "--samples", "10", "--seed", "5",
    ]);
}

#[test]
fn criterion_10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let data_s = data.to_str().unwrap();
    run_bgcl(&[
        "synth", "--blocks", "3", "--nodes-per-block", "20", "--p-in", "0.2", "--p-out", "0.02", "--feature-dim",
        "8", "--seed", "1", "--out", data_s,
    ]);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 8, "hidden_dim": 16, "latent_dim": 8, "blocks": 2}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_pipeline(&a, data_s, cfg, "1");
    run_pipeline(&b, data_s, cfg, "2");
    let artifacts = [
        "model.bgcl",
        "train_log.jsonl",
        "embeddings.bgce",
        "pavpu.csv",
        "astd/astd.csv",
        "astd/noisy_model.bgcl",
    ];
    let differing: Vec<&str> = artifacts
        .iter()
        .copied()
        .filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap())
        .collect();
    let pass = differing.is_empty();
    report(
        "10",
        pass,
        format!("{} artifacts compared across reruns (1 vs 2 threads), differing: {differing:?}", artifacts.len()),
    );
    assert!(pass);
}
