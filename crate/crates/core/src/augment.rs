//! Stochastic mask machinery: Kumaraswamy keep-probability posteriors,
//! concrete relaxation, per-layer per-block edge masks, the classical
//! augmentations expressed as mask patterns, and the Kumaraswamy–Beta KL.
//!
//! Throughout, `π` is the probability of KEEPING an entry: a mask value of
//! one leaves the corresponding adjacency entry untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::special::{digamma_unchecked, ln_beta, EULER_GAMMA};
use crate::numcore::{sigmoid, CsrMatrix, Tape, Tensor, Var};

/// Uniform draws are clamped into `[UNIFORM_CLAMP, 1 − UNIFORM_CLAMP]`
/// before any logit or inverse CDF.
pub const UNIFORM_CLAMP: f64 = 1e-7;

/// Bounds applied to `exp(log_a)` and `exp(log_b)` after every update.
pub const KUMA_PARAM_MIN: f64 = 1e-4;
pub const KUMA_PARAM_MAX: f64 = 1e4;

pub fn clamp_unit(u: f64) -> f64 {
    u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
}

/// The two contrastive views (subscripts `o` and `t`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Online,
    Target,
}

impl View {
    pub const BOTH: [View; 2] = [View::Online, View::Target];

    pub fn index(self) -> usize {
        match self {
            View::Online => 0,
            View::Target => 1,
        }
    }
}

/// Variational parameters of the keep-probability posteriors plus the
/// Beta prior strength and the concrete temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    /// `log_a[view][layer]`
    pub log_a: [Vec<f64>; 2],
    /// `log_b[view][layer]`
    pub log_b: [Vec<f64>; 2],
    pub prior_c: f64,
    pub temperature: f64,
}

impl AugmentationParams {
    /// `a = b = 1` everywhere: the uniform posterior.
    pub fn uniform(layers: usize, prior_c: f64, temperature: f64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::invalid("at least one layer is required"));
        }
        if !(prior_c > 0.0) || !(temperature > 0.0) {
            return Err(Error::invalid("prior c and temperature must be positive"));
        }
        Ok(Self {
            log_a: [vec![0.0; layers], vec![0.0; layers]],
            log_b: [vec![0.0; layers], vec![0.0; layers]],
            prior_c,
            temperature,
        })
    }

    pub fn layers(&self) -> usize {
        self.log_a[0].len()
    }

    pub fn a(&self, view: View, layer: usize) -> f64 {
        self.log_a[view.index()][layer].exp()
    }

    pub fn b(&self, view: View, layer: usize) -> f64 {
        self.log_b[view.index()][layer].exp()
    }

    /// Clamps `a` and `b` into their allowed range; returns how many values
    /// were moved.
    pub fn clamp_params(&mut self) -> usize {
        let (lo, hi) = (KUMA_PARAM_MIN.ln(), KUMA_PARAM_MAX.ln());
        let mut clamped = 0;
        for v in self.log_a.iter_mut().chain(self.log_b.iter_mut()) {
            for x in v.iter_mut() {
                let c = x.clamp(lo, hi);
                if c != *x {
                    clamped += 1;
                    *x = c;
                }
            }
        }
        clamped
    }

    pub fn is_finite(&self) -> bool {
        self.log_a
            .iter()
            .chain(&self.log_b)
            .flatten()
            .all(|v| v.is_finite())
    }
}

/// Reparameterized Kumaraswamy draw `(1 − (1−u)^{1/b})^{1/a}`.
pub fn kumaraswamy_sample(a: f64, b: f64, u: f64) -> f64 {
    let u = clamp_unit(u);
    let inner = 1.0 - (1.0 - u).powf(1.0 / b);
    inner.powf(1.0 / a)
}

/// [`kumaraswamy_sample`] recorded on a tape, differentiable in the log
/// parameters.
pub fn kumaraswamy_sample_on(tape: &mut Tape, log_a: Var, log_b: Var, u: f64) -> Var {
    let u = clamp_unit(u);
    let log_tail = (1.0 - u).ln();
    // (1−u)^{1/b} = exp(ln(1−u) · e^{−log b})
    let inv_b = {
        let n = tape.neg(log_b);
        tape.exp(n)
    };
    let t = tape.scale(inv_b, log_tail);
    let t = tape.exp(t);
    let t = tape.neg(t);
    let inner = tape.add_const(t, 1.0);
    let inv_a = {
        let n = tape.neg(log_a);
        tape.exp(n)
    };
    let l = tape.log(inner);
    let p = tape.mul(l, inv_a);
    tape.exp(p)
}

pub fn kumaraswamy_cdf(x: f64, a: f64, b: f64) -> f64 {
    1.0 - (1.0 - x.powf(a)).powf(b)
}

/// Mean of Kumaraswamy(a, b): `b · B(1 + 1/a, b)`.
pub fn kumaraswamy_mean(a: f64, b: f64) -> f64 {
    b * ln_beta(1.0 + 1.0 / a, b).exp()
}

/// Binary concrete relaxation of a Bernoulli(π) draw at temperature `t`.
pub fn concrete_sample(pi: f64, u: f64, t: f64) -> f64 {
    let pi = clamp_unit(pi);
    let u = clamp_unit(u);
    let logits = (pi / (1.0 - pi)).ln() + (u / (1.0 - u)).ln();
    sigmoid(logits / t)
}

/// Relaxed masks for a whole `[B, nnz]` block of entries sharing one `π`.
/// `uniforms` must already be clamped.
pub fn concrete_masks_on(tape: &mut Tape, pi: Var, uniforms: &Tensor, t: f64) -> Var {
    let pi = tape.clamp(pi, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    let lp = tape.log(pi);
    let one_minus = {
        let n = tape.neg(pi);
        tape.add_const(n, 1.0)
    };
    let lq = tape.log(one_minus);
    let logit = tape.sub(lp, lq);
    let spread = tape.broadcast(logit, uniforms.shape());
    let noise = tape.constant(uniforms.map(|u| (u / (1.0 - u)).ln()));
    let z = tape.add(spread, noise);
    let z = tape.scale(z, 1.0 / t);
    tape.sigmoid(z)
}

/// `n` clamped uniform draws shaped `[rows, cols]`.
pub fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| clamp_unit(rng.random())).collect();
    Tensor::matrix(rows, cols, data)
}

/// Prior `Beta(c/L, c(L−1)/L)` parameters.
pub fn prior_beta(c: f64, layers: usize) -> (f64, f64) {
    let l = layers as f64;
    (c / l, c * (l - 1.0) / l)
}

/// KL(Kumaraswamy(a, b) ‖ Beta(c/L, ·)) in the closed form
/// `((a − c/L)/a)(−γ − Ψ(b) − 1/b) + ln(ab/(c/L)) − (b−1)/b`.
///
/// The series term weighted by `β − 1` is omitted; it vanishes for the
/// uniform prior (`c = L = 2`). See [`kl_kuma_beta_series`].
pub fn kl_kuma_beta(a: f64, b: f64, c: f64, layers: usize) -> f64 {
    let alpha = c / layers as f64;
    ((a - alpha) / a) * (-EULER_GAMMA - digamma_unchecked(b) - 1.0 / b) + (a * b / alpha).ln()
        - (b - 1.0) / b
}

/// KL(Kumaraswamy(a, b) ‖ Beta(α, β)) with the infinite series truncated at
/// `terms`.
pub fn kl_kuma_beta_series(a: f64, b: f64, alpha: f64, beta: f64, terms: usize) -> f64 {
    let series: f64 = (1..=terms)
        .map(|m| {
            let m = m as f64;
            ln_beta(m / a, b).exp() / (m + a * b)
        })
        .sum();
    ((a - alpha) / a) * (-EULER_GAMMA - digamma_unchecked(b) - 1.0 / b)
        + (a * b).ln()
        + ln_beta(alpha, beta)
        - (b - 1.0) / b
        + (beta - 1.0) * b * series
}

/// [`kl_kuma_beta`] on a tape, differentiable in `log_a` and `log_b`.
pub fn kl_kuma_beta_on(tape: &mut Tape, log_a: Var, log_b: Var, c: f64, layers: usize) -> Var {
    let alpha = c / layers as f64;
    let a = tape.exp(log_a);
    let b = tape.exp(log_b);
    let inv_a = tape.recip(a);
    let inv_b = tape.recip(b);
    // (a − α)/a = 1 − α/a
    let lead = tape.scale(inv_a, -alpha);
    let lead = tape.add_const(lead, 1.0);
    let psi = tape.digamma(b);
    let bracket = tape.add(psi, inv_b);
    let bracket = tape.neg(bracket);
    let bracket = tape.add_const(bracket, -EULER_GAMMA);
    let first = tape.mul(lead, bracket);
    // ln(ab/α) − (b−1)/b = log_a + log_b − ln α − 1 + 1/b
    let logs = tape.add(log_a, log_b);
    let rest = tape.add(logs, inv_b);
    let rest = tape.add_const(rest, -alpha.ln() - 1.0);
    tape.add(first, rest)
}

/// Series-corrected KL on a tape for a general `Beta(α, β)` prior.
pub fn kl_kuma_beta_series_on(
    tape: &mut Tape,
    log_a: Var,
    log_b: Var,
    alpha: f64,
    beta: f64,
    terms: usize,
) -> Var {
    let a = tape.exp(log_a);
    let b = tape.exp(log_b);
    let inv_a = tape.recip(a);
    let inv_b = tape.recip(b);
    let lead = tape.scale(inv_a, -alpha);
    let lead = tape.add_const(lead, 1.0);
    let psi = tape.digamma(b);
    let bracket = tape.add(psi, inv_b);
    let bracket = tape.neg(bracket);
    let bracket = tape.add_const(bracket, -EULER_GAMMA);
    let mut total = tape.mul(lead, bracket);
    let logs = tape.add(log_a, log_b);
    total = tape.add(total, logs);
    total = tape.add(total, inv_b);
    total = tape.add_const(total, ln_beta(alpha, beta) - 1.0);
    if terms > 0 && beta != 1.0 {
        let ab = tape.mul(a, b);
        let lg_b = tape.ln_gamma(b);
        let mut series: Option<Var> = None;
        for m in 1..=terms {
            let m = m as f64;
            let x = tape.scale(inv_a, m);
            let lg_x = tape.ln_gamma(x);
            let xb = tape.add(x, b);
            let lg_xb = tape.ln_gamma(xb);
            let lb = tape.add(lg_x, lg_b);
            let lb = tape.sub(lb, lg_xb);
            let beta_fn = tape.exp(lb);
            let denom = tape.add_const(ab, m);
            let term = tape.div(beta_fn, denom);
            series = Some(match series {
                Some(s) => tape.add(s, term),
                None => term,
            });
        }
        let series = series.expect("at least one term");
        let weighted = tape.mul(series, b);
        let weighted = tape.scale(weighted, beta - 1.0);
        total = tape.add(total, weighted);
    }
    total
}

/// Shannon entropy of Bernoulli(π) in nats, with `0 ln 0 = 0`.
pub fn bernoulli_entropy(pi: f64) -> f64 {
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    h(pi) + h(1.0 - pi)
}

/// Masks for one encoder layer.
///
/// The effective mask on adjacency entry `(v, u)` for input feature `i` and
/// output feature `j` is `blocks[block(j), (v,u)] · features[u, i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMask {
    /// `[B, nnz]`, one mask over the stored adjacency entries per output block.
    pub blocks: Tensor,
    /// Optional `[N, F_in]` factor on the sending node's input features.
    pub features: Option<Tensor>,
}

impl LayerMask {
    pub fn ones(n_blocks: usize, nnz: usize) -> Self {
        Self {
            blocks: Tensor::ones(&[n_blocks, nnz]),
            features: None,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.rows()
    }

    pub fn value(&self, block: usize, entry: usize) -> f64 {
        self.blocks.get(block, entry)
    }
}

/// Masks for every layer of one encoder pass, with the keep probabilities
/// they were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub layers: Vec<LayerMask>,
    pub keep_probs: Vec<f64>,
}

impl MaskSet {
    pub fn all_ones(n_layers: usize, n_blocks: usize, nnz: usize) -> Self {
        Self {
            layers: (0..n_layers).map(|_| LayerMask::ones(n_blocks, nnz)).collect(),
            keep_probs: vec![1.0; n_layers],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// Bernoulli(π) draws in `{0, 1}`.
    Hard,
    /// Concrete relaxation at the given temperature, values in `(0, 1)`.
    Relaxed { temperature: f64 },
}

/// Draws one mask per `(layer, block)` over the stored entries of `adj`.
///
/// With `symmetric`, entry `(u, v)` reuses the draw of `(v, u)`; otherwise
/// every directed entry is drawn independently.
pub fn sample_masks<R: Rng + ?Sized>(
    adj: &CsrMatrix,
    n_blocks: usize,
    keep_probs: &[f64],
    mode: MaskMode,
    symmetric: bool,
    rng: &mut R,
) -> Result<MaskSet> {
    if n_blocks < 1 {
        return Err(Error::invalid("block count must be at least 1"));
    }
    let nnz = adj.nnz();
    let mirror = symmetric.then(|| adj.mirror_positions());
    let mut layers = Vec::with_capacity(keep_probs.len());
    for &pi in keep_probs {
        match mode {
            MaskMode::Hard if !(0.0..=1.0).contains(&pi) => {
                return Err(Error::invalid(format!("keep probability {pi} outside [0, 1]")));
            }
            MaskMode::Relaxed { temperature } if !(temperature > 0.0) => {
                return Err(Error::invalid("temperature must be positive"));
            }
            _ => {}
        }
        let mut data = vec![0.0; n_blocks * nnz];
        for b in 0..n_blocks {
            let row = &mut data[b * nnz..(b + 1) * nnz];
            for e in 0..nnz {
                if let Some(Some(m)) = mirror.as_ref().map(|m| m[e]) {
                    if m < e {
                        row[e] = row[m];
                        continue;
                    }
                }
                let u: f64 = rng.random();
                row[e] = match mode {
                    MaskMode::Hard => f64::from(u8::from(u < pi)),
                    MaskMode::Relaxed { temperature } => concrete_sample(pi, u, temperature),
                };
            }
        }
        layers.push(LayerMask {
            blocks: Tensor::matrix(n_blocks, nnz, data),
            features: None,
        });
    }
    Ok(MaskSet {
        layers,
        keep_probs: keep_probs.to_vec(),
    })
}

/// Classical augmentations written as generalized mask patterns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialCase {
    /// Drops whole input-feature columns at the first layer.
    FeatureDrop,
    /// Drops undirected edges, identically in every block and layer.
    EdgeDrop,
    /// Removes nodes: zeroes their rows and columns in every layer.
    NodeDrop,
    /// Zeroes each node's output block by block in every layer.
    Dropout,
}

/// Hard mask set realizing `kind` with keep probability `pi`.
#[allow(clippy::too_many_arguments)]
pub fn special_case_masks<R: Rng + ?Sized>(
    kind: SpecialCase,
    adj: &CsrMatrix,
    input_dim: usize,
    n_layers: usize,
    n_blocks: usize,
    pi: f64,
    rng: &mut R,
) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::invalid(format!("keep probability {pi} outside [0, 1]")));
    }
    if n_layers == 0 || n_blocks == 0 {
        return Err(Error::invalid("layer and block counts must be positive"));
    }
    let n = adj.n();
    let nnz = adj.nnz();
    let rows = adj.row_indices();
    let cols = adj.col_indices();
    let keep = |rng: &mut R| f64::from(u8::from(rng.random::<f64>() < pi));
    let mut set = MaskSet::all_ones(n_layers, n_blocks, nnz);
    match kind {
        SpecialCase::FeatureDrop => {
            let column: Vec<f64> = (0..input_dim).map(|_| keep(rng)).collect();
            let data = (0..n).flat_map(|_| column.iter().copied()).collect();
            set.layers[0].features = Some(Tensor::matrix(n, input_dim, data));
            set.keep_probs[0] = pi;
        }
        SpecialCase::EdgeDrop => {
            let mirror = adj.mirror_positions();
            let mut edge = vec![1.0; nnz];
            for e in 0..nnz {
                if rows[e] == cols[e] {
                    continue;
                }
                match mirror[e] {
                    Some(m) if m < e => edge[e] = edge[m],
                    _ => edge[e] = keep(rng),
                }
            }
            for layer in &mut set.layers {
                let data = (0..n_blocks).flat_map(|_| edge.iter().copied()).collect();
                layer.blocks = Tensor::matrix(n_blocks, nnz, data);
            }
            set.keep_probs = vec![pi; n_layers];
        }
        SpecialCase::NodeDrop => {
            let node: Vec<f64> = (0..n).map(|_| keep(rng)).collect();
            let entry: Vec<f64> = (0..nnz).map(|e| node[rows[e]] * node[cols[e]]).collect();
            for layer in &mut set.layers {
                let data = (0..n_blocks).flat_map(|_| entry.iter().copied()).collect();
                layer.blocks = Tensor::matrix(n_blocks, nnz, data);
            }
            set.keep_probs = vec![pi; n_layers];
        }
        SpecialCase::Dropout => {
            for layer in &mut set.layers {
                let per_node: Vec<f64> = (0..n * n_blocks).map(|_| keep(rng)).collect();
                let mut data = vec![0.0; n_blocks * nnz];
                for b in 0..n_blocks {
                    for e in 0..nnz {
                        data[b * nnz + e] = per_node[rows[e] * n_blocks + b];
                    }
                }
                layer.blocks = Tensor::matrix(n_blocks, nnz, data);
            }
            set.keep_probs = vec![pi; n_layers];
        }
    }
    Ok(set)
}
