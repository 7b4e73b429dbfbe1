//! Monte-Carlo embedding samples and the mixture-likelihood logistic
//! regression classifier.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_masks, MaskMode, View};
use crate::encoder::{encode_view, Checkpoint};
use crate::error::{Error, Result};
use crate::graphdata::{normalize_adjacency, Graph};
use crate::numcore::rng::{stream, stream_id};
use crate::numcore::{AdamConfig, AdamState, Tensor};
use crate::trainer::sampled_pi;

const TAG_SAMPLE: u8 = 3;

/// `S` Monte-Carlo draws of the `N × D` embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSamples {
    pub samples: Vec<Tensor>,
    pub seed: u64,
}

const SAMPLES_MAGIC: &[u8; 4] = b"BGCE";
const SAMPLES_VERSION: u32 = 1;

impl EmbeddingSamples {
    pub fn new(samples: Vec<Tensor>, seed: u64) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("at least one embedding sample is required"))?;
        if samples.iter().any(|s| s.shape() != first.shape()) {
            return Err(Error::Dimension("embedding samples differ in shape".into()));
        }
        Ok(Self { samples, seed })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.samples[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].cols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = [
            SAMPLES_VERSION,
            self.len() as u32,
            self.n_nodes() as u32,
            self.dim() as u32,
        ];
        let mut out = Vec::with_capacity(20 + 8 * self.len() * self.n_nodes() * self.dim());
        out.extend_from_slice(SAMPLES_MAGIC);
        for h in header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for s in &self.samples {
            for v in s.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// The file format does not carry the generating seed; it is set to 0.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("embedding file: {m}"));
        if bytes.len() < 20 || &bytes[..4] != SAMPLES_MAGIC {
            return Err(bad("missing BGCE magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
        if word(1) != SAMPLES_VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let (s, n, d) = (word(2), word(3), word(4));
        if bytes.len() != 20 + 8 * s * n * d {
            return Err(bad("length does not match header"));
        }
        let values: Vec<f64> = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let samples = values
            .chunks_exact(n * d)
            .map(|c| Tensor::new(vec![n, d], c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, 0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Samples `range` as a new set.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let part = self
            .samples
            .get(range)
            .ok_or_else(|| Error::invalid("sample range out of bounds"))?;
        Self::new(part.to_vec(), self.seed)
    }
}

fn check_graph(ck: &Checkpoint, g: &Graph) -> Result<()> {
    if ck.config.input_dim() != g.feature_dim() {
        return Err(Error::Dimension(format!(
            "checkpoint expects {} input features, graph has {}",
            ck.config.input_dim(),
            g.feature_dim()
        )));
    }
    Ok(())
}

/// `S` forward passes with hard Bernoulli masks drawn from view `o`'s
/// posterior. Sample `s` uses its own RNG stream, so the result does not
/// depend on how the passes are scheduled across threads.
pub fn sample_embeddings(ck: &Checkpoint, g: &Graph, s: usize, seed: u64) -> Result<EmbeddingSamples> {
    if s == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    check_graph(ck, g)?;
    let adj = normalize_adjacency(g);
    let layers = ck.config.layers();
    let samples = (0..s)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, stream_id(TAG_SAMPLE, i as u64, 0));
            let pi: Vec<f64> = (0..layers)
                .map(|l| sampled_pi(&ck.augmentation, View::Online, l, &mut rng))
                .collect();
            let masks = sample_masks(adj.matrix(), ck.config.n_blocks, &pi, MaskMode::Hard, false, &mut rng)?;
            encode_view(&ck.config, &ck.params, &adj, g.features(), Some(&masks))
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSamples::new(samples, seed)
}

/// Mask-free embeddings.
pub fn deterministic_embed(ck: &Checkpoint, g: &Graph) -> Result<Tensor> {
    check_graph(ck, g)?;
    let adj = normalize_adjacency(g);
    encode_view(&ck.config, &ck.params, &adj, g.features(), None)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixture {
    /// `Σ_v log (1/K) Σ_i p(y_v | H_v^{(i)})`
    #[default]
    PerNode,
    /// `log (1/K) Σ_i Π_v p(y_v | H_v^{(i)})`
    Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegConfig {
    pub epochs: usize,
    pub lr: f64,
    pub mixture: Mixture,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 0.1,
            mixture: Mixture::PerNode,
        }
    }
}

/// Multinomial logistic regression weights, `(D + 1) × C` with the bias
/// in the last row.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub w: Tensor,
}

impl ClassifierParams {
    pub fn n_classes(&self) -> usize {
        self.w.cols()
    }
}

/// Rows `nodes` of `h` with a trailing constant-1 column.
fn with_bias(h: &Tensor, nodes: &[usize]) -> Tensor {
    let d = h.cols();
    let mut out = Vec::with_capacity(nodes.len() * (d + 1));
    for &v in nodes {
        out.extend_from_slice(h.row(v));
        out.push(1.0);
    }
    Tensor::matrix(nodes.len(), d + 1, out)
}

fn softmax_rows(mut logits: Tensor) -> Tensor {
    for r in 0..logits.rows() {
        let row = logits.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    logits
}

fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits[y] - lse
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Training data prepared for the mixture objective.
struct Design {
    /// One biased design matrix per sample, rows = training nodes.
    x: Vec<Tensor>,
    y: Vec<usize>,
}

/// Mixture log-likelihood averaged over training nodes, and its gradient.
fn objective_and_grad(design: &Design, w: &Tensor, mixture: Mixture) -> (f64, Tensor) {
    let k = design.x.len();
    let n = design.y.len();
    let logits: Vec<Tensor> = design.x.iter().map(|x| x.matmul(w).expect("shapes checked")).collect();
    // log p_iv for every sample i and node v
    let logp: Vec<Vec<f64>> = logits
        .iter()
        .map(|l| (0..n).map(|v| log_softmax_at(l.row(v), design.y[v])).collect())
        .collect();
    let probs: Vec<Tensor> = logits.into_iter().map(softmax_rows).collect();
    let ln_k = (k as f64).ln();
    // responsibility of sample i for node v
    let mut resp = vec![vec![0.0; n]; k];
    let value = match mixture {
        Mixture::PerNode => {
            let mut total = 0.0;
            for v in 0..n {
                let col: Vec<f64> = (0..k).map(|i| logp[i][v]).collect();
                let lse = log_sum_exp(&col);
                total += lse - ln_k;
                for i in 0..k {
                    resp[i][v] = (col[i] - lse).exp();
                }
            }
            total / n as f64
        }
        Mixture::Dataset => {
            let sums: Vec<f64> = logp.iter().map(|l| l.iter().sum()).collect();
            let lse = log_sum_exp(&sums);
            for i in 0..k {
                let r = (sums[i] - lse).exp();
                resp[i].iter_mut().for_each(|x| *x = r);
            }
            (lse - ln_k) / n as f64
        }
    };
    let mut grad = Tensor::zeros(w.shape());
    let c = w.cols();
    for i in 0..k {
        // residual r_iv (e_y − softmax)
        let mut delta = probs[i].scale(-1.0);
        for v in 0..n {
            let r = resp[i][v];
            let row = delta.row_mut(v);
            row[design.y[v]] += 1.0;
            row.iter_mut().for_each(|x| *x *= r);
        }
        let g = design.x[i].transpose().matmul(&delta).expect("shapes checked");
        for (a, b) in grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
    debug_assert_eq!(grad.cols(), c);
    (value, grad.scale(1.0 / n as f64))
}

fn design(samples: &[Tensor], nodes: &[usize], labels: &[usize]) -> Result<Design> {
    if nodes.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let n = samples[0].rows();
    let mut y = Vec::with_capacity(nodes.len());
    for &v in nodes {
        if v >= n || v >= labels.len() {
            return Err(Error::invalid(format!("training node {v} out of range")));
        }
        y.push(labels[v]);
    }
    Ok(Design {
        x: samples.iter().map(|h| with_bias(h, nodes)).collect(),
        y,
    })
}

/// Mixture log-likelihood (mean over `nodes`) of the first `k` samples.
pub fn mixture_log_likelihood(
    samples: &EmbeddingSamples,
    nodes: &[usize],
    labels: &[usize],
    k: usize,
    params: &ClassifierParams,
    mixture: Mixture,
) -> Result<(f64, Tensor)> {
    if k == 0 || k > samples.len() {
        return Err(Error::invalid(format!("K = {k} with {} samples", samples.len())));
    }
    if params.w.rows() != samples.dim() + 1 {
        return Err(Error::Dimension("classifier width does not match embeddings".into()));
    }
    let d = design(&samples.samples[..k], nodes, labels)?;
    if d.y.iter().any(|&y| y >= params.n_classes()) {
        return Err(Error::invalid("label exceeds class count"));
    }
    Ok(objective_and_grad(&d, &params.w, mixture))
}

/// Fits `W_c` by Adam ascent on the mixture likelihood of the first `k`
/// samples. Weights start at zero. Returns the parameters and the
/// objective value before each epoch plus the final value.
pub fn mc_logreg_train(
    samples: &EmbeddingSamples,
    nodes: &[usize],
    labels: &[usize],
    n_classes: usize,
    k: usize,
    cfg: &LogRegConfig,
) -> Result<(ClassifierParams, Vec<f64>)> {
    if k == 0 || k > samples.len() {
        return Err(Error::invalid(format!("K = {k} with {} samples", samples.len())));
    }
    let d = design(&samples.samples[..k], nodes, labels)?;
    if n_classes < 2 || d.y.iter().any(|&y| y >= n_classes) {
        return Err(Error::invalid("labels must lie in [0, classes) with at least two classes"));
    }
    let mut w = Tensor::zeros(&[samples.dim() + 1, n_classes]);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &[&w]);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let (value, grad) = objective_and_grad(&d, &w, cfg.mixture);
        trace.push(value);
        adam.step(&mut [&mut w], &[grad.scale(-1.0)])?;
    }
    trace.push(objective_and_grad(&d, &w, cfg.mixture).0);
    Ok((ClassifierParams { w }, trace))
}

/// Mean over samples of `softmax(H^{(i)} W_c)`, one row per node.
pub fn mc_predict(samples: &EmbeddingSamples, params: &ClassifierParams) -> Result<Tensor> {
    if params.w.rows() != samples.dim() + 1 {
        return Err(Error::Dimension("classifier width does not match embeddings".into()));
    }
    let nodes: Vec<usize> = (0..samples.n_nodes()).collect();
    let mut acc = Tensor::zeros(&[samples.n_nodes(), params.n_classes()]);
    for h in &samples.samples {
        let p = softmax_rows(with_bias(h, &nodes).matmul(&params.w)?);
        for (a, b) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += b;
        }
    }
    Ok(acc.scale(1.0 / samples.len() as f64))
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(p: &Tensor) -> Vec<usize> {
    (0..p.rows())
        .map(|r| {
            let row = p.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// How embeddings are produced for downstream use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedMode {
    /// Monte-Carlo samples with hard masks.
    #[default]
    Bayesian,
    /// One mask-free pass.
    Deterministic,
}

/// Draws embeddings in the given mode; deterministic mode yields one sample.
pub fn embed(ck: &Checkpoint, g: &Graph, mode: EmbedMode, s: usize, seed: u64) -> Result<EmbeddingSamples> {
    match mode {
        EmbedMode::Bayesian => sample_embeddings(ck, g, s, seed),
        EmbedMode::Deterministic => EmbeddingSamples::new(vec![deterministic_embed(ck, g)?], seed),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub params: ClassifierParams,
    /// Mean class probabilities over all samples, one row per node.
    pub probabilities: Tensor,
    pub predicted: Vec<usize>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn split_accuracy(predicted: &[usize], labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return f64::NAN;
    }
    let hits = nodes.iter().filter(|&&v| predicted[v] == labels[v]).count();
    hits as f64 / nodes.len() as f64
}

/// Fits the classifier on the train split with the first `k` samples and
/// predicts every node with the mean over all samples.
pub fn classify(samples: &EmbeddingSamples, g: &Graph, k: usize, cfg: &LogRegConfig) -> Result<Classification> {
    let labels = g.labels().ok_or_else(|| Error::invalid("graph has no labels"))?;
    let train = g.split("train").ok_or_else(|| Error::invalid("graph has no train split"))?;
    let test = g.split("test").unwrap_or(&[]);
    if samples.n_nodes() != g.n_nodes() {
        return Err(Error::Dimension(format!(
            "{} embedding rows for {} nodes",
            samples.n_nodes(),
            g.n_nodes()
        )));
    }
    let (params, _) = mc_logreg_train(samples, train, labels, g.num_classes(), k, cfg)?;
    let probabilities = mc_predict(samples, &params)?;
    let predicted = argmax_rows(&probabilities);
    Ok(Classification {
        train_accuracy: split_accuracy(&predicted, labels, train),
        test_accuracy: split_accuracy(&predicted, labels, test),
        params,
        probabilities,
        predicted,
    })
}
