//! Accuracy, predictive entropy, PAVPU and ASTD, plus their report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::{
    argmax_rows, mc_logreg_train, mc_predict, sample_embeddings, EmbeddingSamples, LogRegConfig,
};
use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::graphdata::{khop_rings, Graph};
use crate::numcore::Tensor;

pub const PAVPU_SAMPLES: usize = 500;
pub const PAVPU_GROUP: usize = 10;

pub const PAVPU_CSV: &str = "pavpu.csv";
pub const ASTD_CSV: &str = "astd.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Certainty thresholds as fractions of the maximum entropy.
pub fn pavpu_thresholds() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

pub fn accuracy(predicted: &[usize], truth: &[usize], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::invalid("accuracy over an empty node set"));
    }
    let mut correct = 0usize;
    for &v in nodes {
        let (p, t) = predicted
            .get(v)
            .zip(truth.get(v))
            .ok_or_else(|| Error::invalid(format!("node {v} out of range")))?;
        correct += usize::from(p == t);
    }
    Ok(correct as f64 / nodes.len() as f64)
}

/// `−Σ p ln p / ln C`, in `[0, 1]`.
pub fn predictive_entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("probabilities must be finite and non-negative"));
    }
    if p.len() < 2 {
        return Ok(0.0);
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    Ok(h / (p.len() as f64).ln())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PavpuCounts {
    pub n_ac: usize,
    pub n_au: usize,
    pub n_ic: usize,
    pub n_iu: usize,
}

impl PavpuCounts {
    pub fn total(&self) -> usize {
        self.n_ac + self.n_au + self.n_ic + self.n_iu
    }

    pub fn value(&self) -> f64 {
        (self.n_ac + self.n_iu) as f64 / self.total() as f64
    }
}

/// A prediction is certain when its normalized entropy is at most `threshold`.
pub fn pavpu_counts(correct: &[bool], entropies: &[f64], threshold: f64) -> PavpuCounts {
    assert_eq!(correct.len(), entropies.len(), "pavpu inputs differ in length");
    let mut c = PavpuCounts::default();
    for (&ok, &h) in correct.iter().zip(entropies) {
        match (ok, h <= threshold) {
            (true, true) => c.n_ac += 1,
            (true, false) => c.n_au += 1,
            (false, true) => c.n_ic += 1,
            (false, false) => c.n_iu += 1,
        }
    }
    c
}

pub fn pavpu(correct: &[bool], entropies: &[f64], threshold: f64) -> f64 {
    pavpu_counts(correct, entropies, threshold).value()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    #[serde(flatten)]
    pub counts: PavpuCounts,
    pub pavpu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeUncertainty {
    pub node: usize,
    pub predicted: usize,
    pub label: usize,
    pub correct: bool,
    pub entropy: f64,
}

/// PAVPU per threshold over the evaluated nodes, and per-node detail for
/// every node of the graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub evaluated: Vec<usize>,
    pub accuracy: f64,
    pub thresholds: Vec<ThresholdRow>,
    pub nodes: Vec<NodeUncertainty>,
}

impl UncertaintyReport {
    /// Builds the report from per-node class probabilities.
    pub fn from_probabilities(
        probs: &Tensor,
        labels: &[usize],
        evaluated: &[usize],
        thresholds: &[f64],
    ) -> Result<Self> {
        if labels.len() != probs.rows() {
            return Err(Error::Dimension("labels and probabilities differ in length".into()));
        }
        let predicted = argmax_rows(probs);
        let nodes = (0..probs.rows())
            .map(|v| {
                Ok(NodeUncertainty {
                    node: v,
                    predicted: predicted[v],
                    label: labels[v],
                    correct: predicted[v] == labels[v],
                    entropy: predictive_entropy(probs.row(v))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let accuracy = accuracy(&predicted, labels, evaluated)?;
        let correct: Vec<bool> = evaluated.iter().map(|&v| nodes[v].correct).collect();
        let ent: Vec<f64> = evaluated.iter().map(|&v| nodes[v].entropy).collect();
        let thresholds = thresholds
            .iter()
            .map(|&t| {
                let counts = pavpu_counts(&correct, &ent, t);
                ThresholdRow {
                    threshold: t,
                    counts,
                    pavpu: counts.value(),
                }
            })
            .collect();
        Ok(Self {
            evaluated: evaluated.to_vec(),
            accuracy,
            thresholds,
            nodes,
        })
    }

    pub fn mean_entropy(&self, nodes: &[usize]) -> f64 {
        nodes.iter().map(|&v| self.nodes[v].entropy).sum::<f64>() / nodes.len() as f64
    }
}

/// Disjoint groups of `group` samples: the first trains the classifier,
/// the rest are evaluation groups.
pub fn sample_groups(total: usize, group: usize) -> Vec<std::ops::Range<usize>> {
    (0..total / group).map(|g| g * group..(g + 1) * group).collect()
}

/// Runs the group protocol on precomputed samples: classifier on the first
/// group, mean of per-group MC predictions over the remaining groups.
pub fn pavpu_from_samples(
    samples: &EmbeddingSamples,
    g: &Graph,
    group: usize,
    classifier: &LogRegConfig,
) -> Result<UncertaintyReport> {
    let labels = g
        .labels()
        .ok_or_else(|| Error::invalid("graph has no labels"))?;
    let train = g
        .split("train")
        .ok_or_else(|| Error::invalid("graph has no train split"))?;
    let test = g
        .split("test")
        .ok_or_else(|| Error::invalid("graph has no test split"))?;
    let groups = sample_groups(samples.len(), group);
    if groups.len() < 2 {
        return Err(Error::invalid("need at least two sample groups"));
    }
    let first = samples.slice(groups[0].clone())?;
    let (params, _) = mc_logreg_train(&first, train, labels, g.num_classes(), group, classifier)?;
    let mut mean = Tensor::zeros(&[g.n_nodes(), g.num_classes()]);
    for r in &groups[1..] {
        let p = mc_predict(&samples.slice(r.clone())?, &params)?;
        for (a, b) in mean.data_mut().iter_mut().zip(p.data()) {
            *a += b;
        }
    }
    let mean = mean.scale(1.0 / (groups.len() - 1) as f64);
    UncertaintyReport::from_probabilities(&mean, labels, test, &pavpu_thresholds())
}

/// 500 samples, one training group of 10, 49 evaluation groups of 10.
pub fn pavpu_protocol(ck: &Checkpoint, g: &Graph, seed: u64) -> Result<UncertaintyReport> {
    let samples = sample_embeddings(ck, g, PAVPU_SAMPLES, seed)?;
    if samples.len() < PAVPU_SAMPLES {
        return Err(Error::invalid("fewer than 500 samples available"));
    }
    pavpu_from_samples(&samples, g, PAVPU_GROUP, &LogRegConfig::default())
}

/// Per node: population standard deviation across samples per dimension,
/// averaged over dimensions.
pub fn astd(samples: &EmbeddingSamples, nodes: &[usize]) -> Result<Vec<f64>> {
    let s = samples.len();
    if s < 2 {
        return Err(Error::invalid("ASTD needs at least two samples"));
    }
    let d = samples.dim();
    nodes
        .iter()
        .map(|&v| {
            if v >= samples.n_nodes() {
                return Err(Error::invalid(format!("node {v} out of range")));
            }
            let mut total = 0.0;
            for j in 0..d {
                let mean = samples.samples.iter().map(|h| h.get(v, j)).sum::<f64>() / s as f64;
                let var = samples
                    .samples
                    .iter()
                    .map(|h| (h.get(v, j) - mean).powi(2))
                    .sum::<f64>()
                    / s as f64;
                total += var.sqrt();
            }
            Ok(total / d as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AstdRing {
    pub hop: usize,
    pub nodes: Vec<usize>,
    /// ASTD(noisy model) − ASTD(clean model) per node.
    pub differences: Vec<f64>,
    /// `None` for an empty ring.
    pub mean_difference: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AstdTable {
    pub rings: Vec<AstdRing>,
}

impl AstdTable {
    pub fn mean(&self, hop: usize) -> Option<f64> {
        self.rings.get(hop).and_then(|r| r.mean_difference)
    }
}

/// ASTD differences between a model trained on noisy features and one
/// trained on clean features, grouped by hop distance from the noised nodes
/// in the clean graph.
#[allow(clippy::too_many_arguments)]
pub fn astd_khop_experiment(
    clean: &Checkpoint,
    noisy: &Checkpoint,
    clean_graph: &Graph,
    noisy_graph: &Graph,
    noised: &[usize],
    k_max: usize,
    s: usize,
    seed: u64,
) -> Result<AstdTable> {
    let rings = khop_rings(clean_graph, noised, k_max)?;
    let clean_samples = sample_embeddings(clean, clean_graph, s, seed)?;
    let noisy_samples = sample_embeddings(noisy, noisy_graph, s, seed)?;
    let all: Vec<usize> = (0..clean_graph.n_nodes()).collect();
    let a_clean = astd(&clean_samples, &all)?;
    let a_noisy = astd(&noisy_samples, &all)?;
    let rings = rings
        .into_iter()
        .enumerate()
        .map(|(hop, nodes)| {
            let differences: Vec<f64> = nodes.iter().map(|&v| a_noisy[v] - a_clean[v]).collect();
            let mean_difference = (!differences.is_empty())
                .then(|| differences.iter().sum::<f64>() / differences.len() as f64);
            AstdRing {
                hop,
                nodes,
                differences,
                mean_difference,
            }
        })
        .collect();
    Ok(AstdTable { rings })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn pavpu_csv(report: &UncertaintyReport) -> String {
    let mut out = String::from("threshold,n_ac,n_au,n_ic,n_iu,pavpu\n");
    for r in &report.thresholds {
        let c = r.counts;
        writeln!(out, "{},{},{},{},{},{}", r.threshold, c.n_ac, c.n_au, c.n_ic, c.n_iu, r.pavpu)
            .expect("write to string");
    }
    out
}

pub fn astd_csv(table: &AstdTable) -> String {
    let mut out = String::from("hop,nodes,mean_difference\n");
    for r in &table.rings {
        let mean = r.mean_difference.map_or_else(|| "missing".to_string(), |m| m.to_string());
        writeln!(out, "{},{},{}", r.hop, r.nodes.len(), mean).expect("write to string");
    }
    out
}

pub fn write_pavpu_csv(report: &UncertaintyReport, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &pavpu_csv(report))
}

pub fn write_astd_csv(table: &AstdTable, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &astd_csv(table))
}

pub fn write_summary_json<T: Serialize>(summary: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    write_file(path.as_ref(), &text)
}
