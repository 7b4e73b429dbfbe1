//! Contrastive loss, weight decay, and the two KL terms.

use serde::{Deserialize, Serialize};

use crate::augment::{
    bernoulli_entropy, kl_kuma_beta, kl_kuma_beta_on, kl_kuma_beta_series, kl_kuma_beta_series_on,
    prior_beta, AugmentationParams, View,
};
use crate::encoder::{project, EncoderParams, EncoderVars, ProjectionHead};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Floor on the product of norms in the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Cosine similarity matrix `S[i, k] = cos(a_i, b_k)`.
pub fn pairwise_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let s = similarity_on(&mut tape, av, bv);
    Ok(tape.value(s).clone())
}

pub fn similarity_on(tape: &mut Tape, a: Var, b: Var) -> Var {
    let bt = tape.transpose(b);
    let dots = tape.matmul(a, bt);
    let na = tape.row_norm(a);
    let nb = tape.row_norm(b);
    let nbt = tape.transpose(nb);
    let outer = tape.matmul(na, nbt);
    let outer = tape.clamp(outer, COSINE_EPS, f64::INFINITY);
    tape.div(dots, outer)
}

/// `Σ_i ℓ(a_i, b_i)` with cross-view and intra-view negatives.
fn directional_sum(tape: &mut Tape, a: Var, b: Var, tau: f64, eye: Var, off_diag: Var) -> Var {
    let cross = similarity_on(tape, a, b);
    let cross = tape.scale(cross, 1.0 / tau);
    let intra = similarity_on(tape, a, a);
    let intra = tape.scale(intra, 1.0 / tau);
    let pos = tape.mul(cross, eye);
    let pos = tape.row_sum(pos);
    let e_cross = tape.exp(cross);
    let e_cross = tape.row_sum(e_cross);
    let e_intra = tape.exp(intra);
    let e_intra = tape.mul(e_intra, off_diag);
    let e_intra = tape.row_sum(e_intra);
    let denom = tape.add(e_cross, e_intra);
    let log_denom = tape.log(denom);
    let l = tape.sub(pos, log_denom);
    tape.sum(l)
}

/// Symmetrized contrastive loss on projections `p_o`, `p_t`.
pub fn contrastive_loss_on(tape: &mut Tape, p_o: Var, p_t: Var, tau: f64) -> Var {
    let n = tape.shape(p_o)[0];
    let eye = tape.constant(Tensor::identity(n));
    let off = tape.constant(Tensor::identity(n).map(|v| 1.0 - v));
    let lo = directional_sum(tape, p_o, p_t, tau, eye, off);
    let lt = directional_sum(tape, p_t, p_o, tau, eye, off);
    let total = tape.add(lo, lt);
    tape.scale(total, -1.0 / (2.0 * n as f64))
}

pub fn contrastive_loss(p_o: &Tensor, p_t: &Tensor, tau: f64) -> Result<f64> {
    if p_o.shape() != p_t.shape() {
        return Err(Error::ShapeMismatch {
            expected: p_o.shape().to_vec(),
            actual: p_t.shape().to_vec(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut tape = Tape::new();
    let a = tape.constant(p_o.clone());
    let b = tape.constant(p_t.clone());
    let l = contrastive_loss_on(&mut tape, a, b, tau);
    Ok(tape.scalar_value(l))
}

/// Contrastive loss of two embedding matrices through the projection head.
pub fn grace_loss(h_o: &Tensor, h_t: &Tensor, head: &ProjectionHead, tau: f64) -> Result<f64> {
    contrastive_loss(&project(h_o, head)?, &project(h_t, head)?, tau)
}

/// Which weight matrices weight decay covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WdScope {
    /// Encoder layers plus projection-head weight matrices (not biases).
    #[default]
    Full,
    EncoderOnly,
}

fn decayed(params_weights: usize, scope: WdScope) -> impl Iterator<Item = usize> {
    let head = match scope {
        WdScope::Full => 2,
        WdScope::EncoderOnly => 0,
    };
    0..params_weights + head
}

pub fn weight_decay(params: &EncoderParams, lambda: f64, scope: WdScope) -> f64 {
    let mut mats: Vec<&Tensor> = params.weights.iter().collect();
    mats.extend([&params.head.w1, &params.head.w2]);
    let total: f64 = decayed(params.weights.len(), scope)
        .map(|i| mats[i].frobenius_sq())
        .sum();
    lambda * total
}

pub fn weight_decay_on(tape: &mut Tape, vars: &EncoderVars, lambda: f64, scope: WdScope) -> Var {
    let mut mats = vars.weights.clone();
    mats.extend([vars.head.w1, vars.head.w2]);
    let mut total: Option<Var> = None;
    for i in decayed(vars.weights.len(), scope) {
        let sq = tape.mul(mats[i], mats[i]);
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    let total = total.expect("at least one layer");
    tape.scale(total, lambda)
}

/// `((1 − m)/2)‖M‖² − H(m)` for zero-atom mass `m`.
pub fn weight_kl_term(norm_sq: f64, zero_atom_mass: f64) -> f64 {
    0.5 * (1.0 - zero_atom_mass) * norm_sq - bernoulli_entropy(zero_atom_mass)
}

/// Weight-space KL diagnostic summed over layers and both views, with
/// zero-atom mass `1 − π_keep`.
pub fn weight_kl_diag(weights: &[Tensor], keep_probs: &[Vec<f64>; 2]) -> f64 {
    keep_probs
        .iter()
        .map(|view| {
            weights
                .iter()
                .zip(view)
                .map(|(w, &pi)| weight_kl_term(w.frobenius_sq(), 1.0 - pi))
                .sum::<f64>()
        })
        .sum()
}

/// KL settings: prior strength and the optional series correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlSettings {
    pub layers: usize,
    pub prior_c: f64,
    /// Zero selects the closed form; otherwise the number of series terms.
    pub series_terms: usize,
}

impl KlSettings {
    pub fn per_layer(&self, a: f64, b: f64) -> f64 {
        if self.series_terms == 0 {
            kl_kuma_beta(a, b, self.prior_c, self.layers)
        } else {
            let (alpha, beta) = prior_beta(self.prior_c, self.layers);
            kl_kuma_beta_series(a, b, alpha, beta, self.series_terms)
        }
    }

    pub fn per_layer_on(&self, tape: &mut Tape, log_a: Var, log_b: Var) -> Var {
        if self.series_terms == 0 {
            kl_kuma_beta_on(tape, log_a, log_b, self.prior_c, self.layers)
        } else {
            let (alpha, beta) = prior_beta(self.prior_c, self.layers);
            kl_kuma_beta_series_on(tape, log_a, log_b, alpha, beta, self.series_terms)
        }
    }
}

/// `edge_count · B · Σ_view Σ_l KL(a, b)`.
pub fn augmentation_kl(
    aug: &AugmentationParams,
    edge_count: usize,
    n_blocks: usize,
    settings: &KlSettings,
) -> f64 {
    let per_view: f64 = View::BOTH
        .iter()
        .map(|&v| {
            (0..aug.layers())
                .map(|l| settings.per_layer(aug.a(v, l), aug.b(v, l)))
                .sum::<f64>()
        })
        .sum();
    (edge_count * n_blocks) as f64 * per_view
}

/// Tape handles for the log Kumaraswamy parameters, `[view][layer]`.
#[derive(Clone, Debug)]
pub struct AugVars {
    pub log_a: [Vec<Var>; 2],
    pub log_b: [Vec<Var>; 2],
}

impl AugVars {
    pub fn register(tape: &mut Tape, aug: &AugmentationParams, trainable: bool) -> Self {
        let mut put = |v: &f64| {
            if trainable {
                tape.param(Tensor::scalar(*v))
            } else {
                tape.scalar(*v)
            }
        };
        let log_a = [
            aug.log_a[0].iter().map(&mut put).collect(),
            aug.log_a[1].iter().map(&mut put).collect(),
        ];
        let log_b = [
            aug.log_b[0].iter().map(&mut put).collect(),
            aug.log_b[1].iter().map(&mut put).collect(),
        ];
        Self { log_a, log_b }
    }
}

pub fn augmentation_kl_on(
    tape: &mut Tape,
    vars: &AugVars,
    edge_count: usize,
    n_blocks: usize,
    settings: &KlSettings,
) -> Var {
    let mut total: Option<Var> = None;
    for view in 0..2 {
        for (&la, &lb) in vars.log_a[view].iter().zip(&vars.log_b[view]) {
            let kl = settings.per_layer_on(tape, la, lb);
            total = Some(match total {
                Some(t) => tape.add(t, kl),
                None => kl,
            });
        }
    }
    let total = total.expect("at least one layer");
    tape.scale(total, (edge_count * n_blocks) as f64)
}

/// Loss terms of one training epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cnt: f64,
    pub l_wd: f64,
    pub kl_aug: f64,
    pub kl_weights_diag: f64,
    pub total_phase1: f64,
    pub phase2_objective: f64,
}

impl LossBreakdown {
    pub fn new(l_cnt: f64, l_wd: f64, kl_aug: f64, kl_weights_diag: f64) -> Self {
        Self {
            l_cnt,
            l_wd,
            kl_aug,
            kl_weights_diag,
            total_phase1: l_cnt + l_wd,
            phase2_objective: l_cnt - kl_aug,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_cnt,
            self.l_wd,
            self.kl_aug,
            self.kl_weights_diag,
            self.total_phase1,
            self.phase2_objective,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
