//! Tape-versus-finite-difference cases shared by the gradient tests and the
//! acceptance suite.

use std::sync::Arc;

use bgcl::augment::{concrete_masks_on, kl_kuma_beta_on, kl_kuma_beta_series_on, kumaraswamy_sample_on, uniform_tensor};
use bgcl::encoder::{encode_view_on, gcn_aug_layer_on, project_on, Activation, EncoderConfig, EncoderParams, EncoderVars, HeadVars, LayerMaskVars};
use bgcl::graphdata::{normalize_adjacency, Graph};
use bgcl::numcore::rng::{stream, StreamRng};
use bgcl::numcore::{block_ranges, tape_gradient_error, Tape, Tensor, Var};
use bgcl::objective::{augmentation_kl_on, contrastive_loss_on, similarity_on, weight_decay_on, AugVars, KlSettings, WdScope};
use rand::Rng;

pub const EPS: f64 = 1e-6;
pub const FLOOR: f64 = 1e-6;

pub struct Primitive {
    pub name: &'static str,
    pub error: fn(u64) -> f64,
}

fn uniform(rng: &mut StreamRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Values with magnitude in `[gap, 1]` and random sign, away from kinks.
fn away_from_zero(rng: &mut StreamRng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

fn shape(rng: &mut StreamRng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry is exercised.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let s = tape.shape(out).to_vec();
    if s.len() < 2 {
        return out;
    }
    let r = uniform(&mut stream(seed, 99), s[0], s[1], -1.0, 1.0);
    let rv = tape.constant(r);
    let m = tape.mul(out, rv);
    tape.sum(m)
}

fn unary(seed: u64, lo: f64, hi: f64, op: fn(&mut Tape, Var) -> Var) -> f64 {
    let mut rng = stream(seed, 0);
    let (r, c) = shape(&mut rng);
    let x = uniform(&mut rng, r, c, lo, hi);
    tape_gradient_error(|t, v| { let o = op(t, v[0]); contract(t, o, seed) }, &[x], EPS, FLOOR).unwrap()
}

fn kinked(seed: u64, op: fn(&mut Tape, Var) -> Var) -> f64 {
    let mut rng = stream(seed, 0);
    let (r, c) = shape(&mut rng);
    let x = away_from_zero(&mut rng, r, c, 0.05);
    tape_gradient_error(|t, v| { let o = op(t, v[0]); contract(t, o, seed) }, &[x], EPS, FLOOR).unwrap()
}

fn binary(seed: u64, op: fn(&mut Tape, Var, Var) -> Var, positive_rhs: bool) -> f64 {
    let mut rng = stream(seed, 0);
    let (r, c) = shape(&mut rng);
    let x = uniform(&mut rng, r, c, -2.0, 2.0);
    let y = if positive_rhs { uniform(&mut rng, r, c, 0.5, 2.0) } else { uniform(&mut rng, r, c, -2.0, 2.0) };
    tape_gradient_error(|t, v| { let o = op(t, v[0], v[1]); contract(t, o, seed) }, &[x, y], EPS, FLOOR).unwrap()
}

fn scalar_pair(seed: u64, f: impl Fn(&mut Tape, Var, Var) -> Var) -> f64 {
    let mut rng = stream(seed, 0);
    let la = Tensor::scalar(rng.random_range(-0.8..1.2));
    let lb = Tensor::scalar(rng.random_range(-0.8..1.2));
    tape_gradient_error(|t, v| f(t, v[0], v[1]), &[la, lb], EPS, FLOOR).unwrap()
}

fn random_graph(rng: &mut StreamRng, n: usize, p: f64, f: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::new(n, edges, uniform(rng, n, f, -1.0, 1.0), None, Default::default()).unwrap()
}

pub fn primitives() -> Vec<Primitive> {
    vec![
        Primitive { name: "add", error: |s| binary(s, |t, a, b| t.add(a, b), false) },
        Primitive { name: "sub", error: |s| binary(s, |t, a, b| t.sub(a, b), false) },
        Primitive { name: "mul", error: |s| binary(s, |t, a, b| t.mul(a, b), false) },
        Primitive { name: "div", error: |s| binary(s, |t, a, b| t.div(a, b), true) },
        Primitive { name: "neg", error: |s| unary(s, -2.0, 2.0, |t, a| t.neg(a)) },
        Primitive { name: "scale", error: |s| unary(s, -2.0, 2.0, |t, a| t.scale(a, -1.7)) },
        Primitive { name: "add_const", error: |s| unary(s, -2.0, 2.0, |t, a| t.add_const(a, 0.3)) },
        Primitive { name: "recip", error: |s| unary(s, 0.5, 2.0, |t, a| t.recip(a)) },
        Primitive { name: "exp", error: |s| unary(s, -2.0, 2.0, |t, a| t.exp(a)) },
        Primitive { name: "log", error: |s| unary(s, 0.2, 3.0, |t, a| t.log(a)) },
        Primitive { name: "sigmoid", error: |s| unary(s, -4.0, 4.0, |t, a| t.sigmoid(a)) },
        Primitive { name: "relu", error: |s| kinked(s, |t, a| t.relu(a)) },
        Primitive { name: "elu", error: |s| kinked(s, |t, a| t.elu(a)) },
        Primitive { name: "clamp", error: |s| kinked(s, |t, a| t.clamp(a, -0.5, 0.5)) },
        Primitive { name: "digamma", error: |s| unary(s, 0.3, 5.0, |t, a| t.digamma(a)) },
        Primitive { name: "ln_gamma", error: |s| unary(s, 0.3, 5.0, |t, a| t.ln_gamma(a)) },
        Primitive { name: "sum", error: |s| unary(s, -2.0, 2.0, |t, a| { let o = t.sum(a); t.mul(o, o) }) },
        Primitive { name: "row_sum", error: |s| unary(s, -2.0, 2.0, |t, a| t.row_sum(a)) },
        Primitive { name: "row_norm", error: |s| unary(s, 0.1, 2.0, |t, a| t.row_norm(a)) },
        Primitive { name: "softmax", error: |s| unary(s, -3.0, 3.0, |t, a| t.softmax(a)) },
        Primitive { name: "transpose", error: |s| unary(s, -2.0, 2.0, |t, a| t.transpose(a)) },
        Primitive {
            name: "prelu",
            error: |seed| {
                let mut rng = stream(seed, 0);
                let (r, c) = shape(&mut rng);
                let x = away_from_zero(&mut rng, r, c, 0.05);
                let slope = Tensor::scalar(rng.random_range(0.0..0.5));
                tape_gradient_error(|t, v| { let o = t.prelu(v[0], v[1]); contract(t, o, seed) }, &[x, slope], EPS, FLOOR).unwrap()
            },
        },
        Primitive {
            name: "matmul",
            error: |seed| {
                let mut rng = stream(seed, 0);
                let (r, k) = shape(&mut rng);
                let c = rng.random_range(1..5);
                let a = uniform(&mut rng, r, k, -1.0, 1.0);
                let b = uniform(&mut rng, k, c, -1.0, 1.0);
                tape_gradient_error(|t, v| { let o = t.matmul(v[0], v[1]); contract(t, o, seed) }, &[a, b], EPS, FLOOR).unwrap()
            },
        },
        Primitive {
            name: "broadcast",
            error: |seed| {
                let mut rng = stream(seed, 0);
                let (r, c) = shape(&mut rng);
                let s = Tensor::scalar(rng.random_range(-1.0..1.0));
                tape_gradient_error(|t, v| { let o = t.broadcast(v[0], &[r, c]); contract(t, o, seed) }, &[s], EPS, FLOOR).unwrap()
            },
        },
        Primitive {
            name: "add_row",
            error: |seed| {
                let mut rng = stream(seed, 0);
                let (r, c) = shape(&mut rng);
                let a = uniform(&mut rng, r, c, -1.0, 1.0);
                let row = uniform(&mut rng, 1, c, -1.0, 1.0);
                tape_gradient_error(|t, v| { let o = t.add_row(v[0], v[1]); contract(t, o, seed) }, &[a, row], EPS, FLOOR).unwrap()
            },
        },
        Primitive {
            name: "propagate",
            error: |seed| {
                let mut rng = stream(seed, 0);
                let n = rng.random_range(1..7);
                let g = random_graph(&mut rng, n, 0.5, 1);
                let adj = Arc::clone(normalize_adjacency(&g).matrix());
                let d = rng.random_range(1..6);
                let b = rng.random_range(1..=d.min(3));
                let blocks = block_ranges(d, b).unwrap();
                let x = uniform(&mut rng, n, d, -1.0, 1.0);
                let m = uniform(&mut rng, b, adj.nnz(), 0.0, 1.0);
                tape_gradient_error(
                    |t, v| { let o = t.propagate(&adj, Some(v[1]), v[0], &blocks); contract(t, o, seed) },
                    &[x, m],
                    EPS,
                    FLOOR,
                )
                .unwrap()
            },
        },
        Primitive {
            name: "kumaraswamy_sample",
            error: |seed| {
                let u = stream(seed, 1).random_range(0.05..0.95);
                scalar_pair(seed, move |t, a, b| kumaraswamy_sample_on(t, a, b, u))
            },
        },
        Primitive {
            name: "concrete_masks",
            error: |seed| {
                let mut rng = stream(seed, 0);
                let pi = Tensor::scalar(rng.random_range(0.2..0.8));
                let u = uniform_tensor(&mut rng, 2, 5);
                tape_gradient_error(|t, v| { let o = concrete_masks_on(t, v[0], &u, 0.5); contract(t, o, seed) }, &[pi], EPS, FLOOR).unwrap()
            },
        },
        Primitive { name: "kl_kuma_beta", error: |s| scalar_pair(s, |t, a, b| kl_kuma_beta_on(t, a, b, 2.0, 2)) },
        Primitive {
            name: "kl_kuma_beta_series",
            error: |s| scalar_pair(s, |t, a, b| kl_kuma_beta_series_on(t, a, b, 0.7, 1.6, 30)),
        },
        Primitive {
            name: "similarity",
            error: |seed| {
                let mut rng = stream(seed, 0);
                let (r, c) = shape(&mut rng);
                let a = uniform(&mut rng, r, c, -1.0, 1.0);
                let b = uniform(&mut rng, r, c, -1.0, 1.0);
                tape_gradient_error(|t, v| { let o = similarity_on(t, v[0], v[1]); contract(t, o, seed) }, &[a, b], EPS, FLOOR).unwrap()
            },
        },
        Primitive {
            name: "contrastive_loss",
            error: |seed| {
                let mut rng = stream(seed, 0);
                let (r, c) = shape(&mut rng);
                let a = uniform(&mut rng, r + 1, c, -1.0, 1.0);
                let b = uniform(&mut rng, r + 1, c, -1.0, 1.0);
                tape_gradient_error(|t, v| contrastive_loss_on(t, v[0], v[1], 0.4), &[a, b], EPS, FLOOR).unwrap()
            },
        },
        Primitive {
            name: "gcn_aug_layer",
            error: |seed| {
                let mut rng = stream(seed, 0);
                let n = rng.random_range(2..7);
                let g = random_graph(&mut rng, n, 0.5, 3);
                let adj = normalize_adjacency(&g);
                let blocks = block_ranges(4, 2).unwrap();
                let w = uniform(&mut rng, 3, 4, -1.0, 1.0);
                let m = uniform(&mut rng, 2, adj.nnz(), 0.0, 1.0);
                let f = uniform(&mut rng, n, 3, 0.0, 1.0);
                let slope = Tensor::scalar(0.25);
                tape_gradient_error(
                    |t, v| {
                        let mask = LayerMaskVars { blocks: v[2], features: Some(v[3]) };
                        let o = gcn_aug_layer_on(t, &adj, v[0], Some(mask), v[1], &blocks, Activation::Prelu, Some(v[4]));
                        contract(t, o, seed)
                    },
                    &[g.features().clone(), w, m, f, slope],
                    EPS,
                    FLOOR,
                )
                .unwrap()
            },
        },
    ]
}

/// Gradient of `α f + β g` equals `α ∇f + β ∇g` on the tape.
pub fn linearity_error(seed: u64) -> f64 {
    let mut rng = stream(seed, 0);
    let x = uniform(&mut rng, 3, 3, 0.2, 2.0);
    let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let grad = |build: &dyn Fn(&mut Tape, Var) -> Var| {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let r = build(&mut t, v);
        t.backward(r).unwrap().get(v)
    };
    let f = |t: &mut Tape, v: Var| { let e = t.exp(v); t.sum(e) };
    let g = |t: &mut Tape, v: Var| { let l = t.log(v); let m = t.mul(l, v); t.sum(m) };
    let combined = grad(&|t, v| {
        let a = f(t, v);
        let b = g(t, v);
        let a = t.scale(a, alpha);
        let b = t.scale(b, beta);
        t.add(a, b)
    });
    let expected = grad(&f).scale(alpha).zip_map(&grad(&g).scale(beta), |p, q| p + q);
    combined.max_abs_diff(&expected)
}

/// Six-node, two-layer, two-view fixture with all randomness frozen.
pub struct PipelineFixture {
    pub graph: Graph,
    pub config: EncoderConfig,
    pub params: EncoderParams,
    pub log_a: [Vec<f64>; 2],
    pub log_b: [Vec<f64>; 2],
    pub pi_draws: [Vec<f64>; 2],
    pub mask_draws: [Vec<Tensor>; 2],
}

impl PipelineFixture {
    pub fn new(seed: u64, activation: Activation) -> Self {
        let mut rng = stream(seed, 0);
        let edges = vec![(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5), (5, 3)];
        let x = uniform(&mut rng, 6, 4, -1.0, 1.0);
        let graph = Graph::new(6, edges, x, None, Default::default()).unwrap();
        let config = EncoderConfig::new(4, 4, 4, 2, 2, activation).unwrap();
        let mut params = EncoderParams::init(&config, &mut rng).unwrap();
        for b in [&mut params.head.b1, &mut params.head.b2] {
            *b = uniform(&mut rng, 1, 4, -0.2, 0.2);
        }
        let nnz = normalize_adjacency(&graph).nnz();
        let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<f64>>();
        let log_a = [draw(2), draw(2)];
        let log_b = [draw(2), draw(2)];
        let pi_draws = [draw(2).iter().map(|v| v + 0.5).collect(), draw(2).iter().map(|v| v + 0.5).collect()];
        let mask_draws = [0, 1].map(|_| (0..2).map(|_| uniform_tensor(&mut rng, 2, nnz)).collect());
        Self { graph, config, params, log_a, log_b, pi_draws, mask_draws }
    }

    /// Flat parameter list: weights, slopes, head, then log a and log b per
    /// view and layer.
    pub fn flat(&self) -> Vec<Tensor> {
        let mut out = self.params.weights.clone();
        out.extend(self.params.slopes.iter().map(|&s| Tensor::scalar(s)));
        let h = &self.params.head;
        out.extend([h.w1.clone(), h.b1.clone(), h.w2.clone(), h.b2.clone()]);
        for side in [&self.log_a, &self.log_b] {
            for view in side {
                out.extend(view.iter().map(|&v| Tensor::scalar(v)));
            }
        }
        out
    }

    fn split(&self, v: &[Var]) -> (EncoderVars, AugVars) {
        let l = self.config.layers();
        let s = self.params.slopes.len();
        let weights = v[..l].to_vec();
        let slopes = v[l..l + s].to_vec();
        let h = &v[l + s..l + s + 4];
        let head = HeadVars { w1: h[0], b1: h[1], w2: h[2], b2: h[3] };
        let rest = &v[l + s + 4..];
        let aug = AugVars {
            log_a: [rest[..l].to_vec(), rest[l..2 * l].to_vec()],
            log_b: [rest[2 * l..3 * l].to_vec(), rest[3 * l..4 * l].to_vec()],
        };
        (EncoderVars { weights, slopes, head }, aug)
    }

    /// `L_CNT + L_WD` through relaxed masks drawn from the posteriors.
    pub fn contrastive_objective(&self, tape: &mut Tape, v: &[Var]) -> Var {
        let adj = normalize_adjacency(&self.graph);
        let (enc, aug) = self.split(v);
        let x = tape.constant(self.graph.features().clone());
        let mut proj = Vec::new();
        for view in 0..2 {
            let masks: Vec<LayerMaskVars> = (0..self.config.layers())
                .map(|l| {
                    let p = kumaraswamy_sample_on(tape, aug.log_a[view][l], aug.log_b[view][l], self.pi_draws[view][l]);
                    let m = concrete_masks_on(tape, p, &self.mask_draws[view][l], 0.3);
                    LayerMaskVars { blocks: m, features: None }
                })
                .collect();
            let h = encode_view_on(tape, &self.config, &adj, x, &enc, Some(&masks));
            proj.push(project_on(tape, h, &enc.head));
        }
        let l_cnt = contrastive_loss_on(tape, proj[0], proj[1], 0.4);
        let l_wd = weight_decay_on(tape, &enc, 1e-3, WdScope::Full);
        tape.add(l_cnt, l_wd)
    }

    pub fn kl_objective(&self, tape: &mut Tape, v: &[Var]) -> Var {
        let adj = normalize_adjacency(&self.graph);
        let (_, aug) = self.split(v);
        let settings = KlSettings { layers: self.config.layers(), prior_c: 2.0, series_terms: 0 };
        augmentation_kl_on(tape, &aug, adj.nnz(), self.config.n_blocks, &settings)
    }

    pub fn errors(&self) -> (f64, f64) {
        let flat = self.flat();
        let cnt = tape_gradient_error(|t, v| self.contrastive_objective(t, v), &flat, EPS, FLOOR).unwrap();
        let kl = tape_gradient_error(|t, v| self.kl_objective(t, v), &flat, EPS, FLOOR).unwrap();
        (cnt, kl)
    }
}
