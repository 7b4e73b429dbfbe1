//! Brute-force reference implementations for tests. None of these share
//! arithmetic with the code they check.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Trapezoid rule settings on `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureSpec {
    pub nodes: usize,
    pub endpoint_clamp: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            nodes: 20_001,
            endpoint_clamp: 1e-9,
        }
    }
}

fn kuma_ln_density(x: f64, one_minus_x: f64, a: f64, b: f64) -> f64 {
    let ln_x = if x < 0.5 { x.ln() } else { (-one_minus_x).ln_1p() };
    // 1 − x^a, accurate near both ends
    let tail = -(a * ln_x).exp_m1();
    a.ln() + b.ln() + (a - 1.0) * ln_x + (b - 1.0) * tail.ln()
}

fn beta_ln_density(x: f64, one_minus_x: f64, alpha: f64, beta: f64) -> f64 {
    let ln_b = ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta);
    (alpha - 1.0) * x.ln() + (beta - 1.0) * one_minus_x.ln() - ln_b
}

/// `∫ q ln(q/p)` for `q = Kumaraswamy(a, b)` and `p = Beta(α, β)`.
///
/// Integrates in `s` with `x = 10s³ − 15s⁴ + 6s⁵`, whose Jacobian
/// `30 s² (1−s)²` vanishes at both ends and tames the endpoint
/// singularities of densities with parameters below one.
pub fn kl_quadrature_with(a: f64, b: f64, alpha: f64, beta: f64, spec: QuadratureSpec) -> Result<f64> {
    if [a, b, alpha, beta].iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("quadrature parameters must be positive"));
    }
    if spec.nodes < 3 || spec.nodes.is_multiple_of(2) {
        return Err(Error::invalid("node count must be odd and at least 3"));
    }
    let h = 1.0 / (spec.nodes - 1) as f64;
    let grade = |s: f64| s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let mut total = 0.0;
    for k in 0..spec.nodes {
        let s = k as f64 * h;
        let jac = 30.0 * s * s * (1.0 - s) * (1.0 - s);
        if jac == 0.0 {
            continue;
        }
        let lo = spec.endpoint_clamp;
        let x = grade(s).clamp(lo, 1.0 - lo);
        let one_minus_x = grade(1.0 - s).clamp(lo, 1.0 - lo);
        let lq = kuma_ln_density(x, one_minus_x, a, b);
        let lp = beta_ln_density(x, one_minus_x, alpha, beta);
        let f = lq.exp() * (lq - lp) * jac;
        let w = if k == 0 || k == spec.nodes - 1 { 0.5 } else { 1.0 };
        total += w * f;
    }
    Ok(total * h)
}

pub fn kl_quadrature(a: f64, b: f64, alpha: f64, beta: f64) -> Result<f64> {
    kl_quadrature_with(a, b, alpha, beta, QuadratureSpec::default())
}

fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for i in 0..x.len() {
        dot += x[i] * y[i];
        nx += x[i] * x[i];
        ny += y[i] * y[i];
    }
    dot / (nx.sqrt() * ny.sqrt()).max(1e-8)
}

fn naive_l(a: &Tensor, b: &Tensor, i: usize, tau: f64) -> f64 {
    let n = a.rows();
    let pos = (cosine(a.row(i), b.row(i)) / tau).exp();
    let mut denom = pos;
    for k in 0..n {
        if k != i {
            // cross-view negatives
            denom += (cosine(a.row(i), b.row(k)) / tau).exp();
            // intra-view negatives
            denom += (cosine(a.row(i), a.row(k)) / tau).exp();
        }
    }
    (pos / denom).ln()
}

/// Symmetrized contrastive loss by explicit loops over positives and both
/// negative sets.
pub fn naive_grace_loss(h_o: &Tensor, h_t: &Tensor, tau: f64) -> f64 {
    let n = h_o.rows();
    let mut total = 0.0;
    for i in 0..n {
        total += naive_l(h_o, h_t, i, tau) + naive_l(h_t, h_o, i, tau);
    }
    -total / (2 * n) as f64
}

/// Output-column block index: the first `width % count` blocks hold one
/// extra column.
fn column_block(j: usize, width: usize, count: usize) -> usize {
    let base = width / count;
    let extra = width % count;
    let big = extra * (base + 1);
    if j < big {
        j / (base + 1)
    } else {
        extra + (j - big) / base
    }
}

/// Dense masked layer: for every output block `β`,
/// `act((A ⊙ M_β) ((U ⊙ F) W))` restricted to the block's columns.
///
/// `masks[β]` is a dense `N × N` mask; `feature_mask`, when given, is
/// `N × F_in`.
pub fn naive_gcn_masked(
    adj: &Tensor,
    features: &Tensor,
    masks: &[Tensor],
    feature_mask: Option<&Tensor>,
    weights: &Tensor,
    act: impl Fn(f64) -> f64,
) -> Tensor {
    let n = adj.rows();
    let (f_in, f_out) = (weights.rows(), weights.cols());
    let count = masks.len();
    let mut out = Tensor::zeros(&[n, f_out]);
    for beta in 0..count {
        let mut masked = Tensor::zeros(&[n, n]);
        for v in 0..n {
            for u in 0..n {
                masked.set(v, u, adj.get(v, u) * masks[beta].get(v, u));
            }
        }
        for j in (0..f_out).filter(|&j| column_block(j, f_out, count) == beta) {
            for v in 0..n {
                let mut acc = 0.0;
                for u in 0..n {
                    let mut xw = 0.0;
                    for i in 0..f_in {
                        let f = feature_mask.map_or(1.0, |m| m.get(u, i));
                        xw += features.get(u, i) * f * weights.get(i, j);
                    }
                    acc += masked.get(v, u) * xw;
                }
                out.set(v, j, act(acc));
            }
        }
    }
    out
}

/// All-pairs hop distances by Floyd–Warshall; `None` when unreachable.
pub fn floyd_warshall(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<Option<usize>>> {
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (v, row) in d.iter_mut().enumerate() {
        row[v] = 0;
    }
    for &(u, v) in edges {
        if u != v {
            d[u][v] = 1;
            d[v][u] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d.into_iter()
        .map(|row| row.into_iter().map(|x| (x < inf).then_some(x)).collect())
        .collect()
}
