//! Two-phase alternating training: Adam descent on the encoder with relaxed
//! masks, then Adam ascent on the augmentation posteriors.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    concrete_masks_on, kumaraswamy_mean, kumaraswamy_sample, kumaraswamy_sample_on, sample_masks,
    uniform_tensor, AugmentationParams, MaskMode, View,
};
use crate::encoder::{
    encode_view_on, mask_constants, project_on, Activation, Checkpoint, EncoderConfig,
    EncoderParams, EncoderVars, LayerMaskVars,
};
use crate::error::{Error, Result};
use crate::graphdata::{normalize_adjacency, Graph, NormalizedAdjacency};
use crate::numcore::rng::{stream, stream_id};
use crate::numcore::{AdamConfig, AdamState, CsrMatrix, Tape, Tensor, Var};
use crate::objective::{
    augmentation_kl, augmentation_kl_on, contrastive_loss_on, weight_decay, weight_decay_on,
    weight_kl_diag, AugVars, KlSettings, LossBreakdown, WdScope,
};

const TAG_INIT: u8 = 1;
const TAG_EPOCH: u8 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugMode {
    /// Learn keep probabilities through the Kumaraswamy posteriors.
    #[default]
    LearnedAug,
    /// Hard masks at fixed keep probabilities; the posteriors are untouched.
    FixedAug,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lr_w: f64,
    pub lr_a: f64,
    /// ℓ2 weight-decay coefficient.
    pub l2: f64,
    pub blocks: usize,
    pub epochs: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub activation: Activation,
    pub tau: f64,
    pub prior_c: f64,
    pub temperature: f64,
    pub layers: usize,
    pub seed: u64,
    pub mode: AugMode,
    /// Keep probability per layer (or one value for all layers) in fixed-aug mode.
    pub fixed_pi: Option<Vec<f64>>,
    pub wd_scope: WdScope,
    /// Number of series terms in the KL; 0 uses the closed form.
    pub kl_series_terms: usize,
    /// Share one mask draw between entries (u, v) and (v, u).
    pub symmetric_masks: bool,
    /// Record per-epoch wall-clock time in the log (breaks byte-identical logs).
    pub record_wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lr_w: 0.0005,
            lr_a: 0.001,
            l2: 5e-9,
            blocks: 8,
            epochs: 250,
            hidden_dim: 256,
            latent_dim: 128,
            activation: Activation::Relu,
            tau: 0.4,
            prior_c: 2.0,
            temperature: 0.3,
            layers: 2,
            seed: 0,
            mode: AugMode::LearnedAug,
            fixed_pi: None,
            wd_scope: WdScope::Full,
            kl_series_terms: 0,
            symmetric_masks: false,
            record_wall_clock: false,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_w", self.lr_w >= 0.0),
            ("lr_a", self.lr_a >= 0.0),
            ("l2", self.l2 >= 0.0),
            ("tau", self.tau > 0.0),
            ("prior_c", self.prior_c > 0.0),
            ("temperature", self.temperature > 0.0),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::invalid(format!("{name} out of range")));
            }
        }
        if self.blocks < 1 || self.layers < 1 || self.hidden_dim < 1 || self.latent_dim < 1 {
            return Err(Error::invalid("blocks, layers and dimensions must be at least 1"));
        }
        if self.kl_series_terms > 0 && self.layers < 2 {
            return Err(Error::invalid("series KL needs a proper Beta prior (layers ≥ 2)"));
        }
        if self.mode == AugMode::FixedAug {
            self.fixed_keep_probs()?;
        }
        Ok(())
    }

    /// Fixed keep probabilities expanded to one per layer.
    pub fn fixed_keep_probs(&self) -> Result<Vec<f64>> {
        let pis = self
            .fixed_pi
            .as_ref()
            .ok_or_else(|| Error::invalid("fixed-aug mode requires fixed_pi"))?;
        let pis = match pis.len() {
            1 => vec![pis[0]; self.layers],
            n if n == self.layers => pis.clone(),
            n => {
                return Err(Error::invalid(format!(
                    "fixed_pi has {n} entries for {} layers",
                    self.layers
                )))
            }
        };
        if pis.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("fixed_pi values must lie in [0, 1]"));
        }
        Ok(pis)
    }

    pub fn encoder_config(&self, input_dim: usize) -> Result<EncoderConfig> {
        EncoderConfig::new(
            input_dim,
            self.hidden_dim,
            self.latent_dim,
            self.layers,
            self.blocks,
            self.activation,
        )
    }

    pub fn kl_settings(&self) -> KlSettings {
        KlSettings {
            layers: self.layers,
            prior_c: self.prior_c,
            series_terms: self.kl_series_terms,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub phase1: LossBreakdown,
    pub phase2: Option<LossBreakdown>,
    /// Keep probabilities drawn in phase 1, `[view][layer]`.
    pub pi_sampled: [Vec<f64>; 2],
    /// Posterior mean keep probability after the epoch, `[view][layer]`.
    pub pi_mean: [Vec<f64>; 2],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<f64>,
}

/// One reparameterized draw of the keep probability for `(view, layer)`.
pub fn sampled_pi<R: Rng + ?Sized>(
    aug: &AugmentationParams,
    view: View,
    layer: usize,
    rng: &mut R,
) -> f64 {
    kumaraswamy_sample(aug.a(view, layer), aug.b(view, layer), rng.random())
}

/// Deterministic initial weights for a configuration.
pub fn init_params(cfg: &RunConfig, enc: &EncoderConfig) -> Result<EncoderParams> {
    EncoderParams::init(enc, &mut stream(cfg.seed, stream_id(TAG_INIT, 0, 0)))
}

/// Mask handles for both views plus the keep probabilities drawn.
struct ViewMasks {
    masks: [Vec<LayerMaskVars>; 2],
    pi: [Vec<f64>; 2],
}

/// Uniform draws for one relaxed mask; mirrored entries share a draw when
/// `mirror` is given.
fn mask_uniforms<R: Rng + ?Sized>(
    rng: &mut R,
    n_blocks: usize,
    nnz: usize,
    mirror: Option<&[Option<usize>]>,
) -> Tensor {
    let mut u = uniform_tensor(rng, n_blocks, nnz);
    if let Some(mirror) = mirror {
        for b in 0..n_blocks {
            for (e, m) in mirror.iter().enumerate() {
                if let Some(m) = *m {
                    if m < e {
                        let v = u.get(b, m);
                        u.set(b, e, v);
                    }
                }
            }
        }
    }
    u
}

pub struct Trainer {
    cfg: RunConfig,
    enc: EncoderConfig,
    adj: NormalizedAdjacency,
    mirror: Option<Vec<Option<usize>>>,
    features: Tensor,
    params: EncoderParams,
    aug: AugmentationParams,
    adam_w: AdamState,
    adam_a: AdamState,
    epoch: usize,
}

fn encoder_tensors(p: &EncoderParams) -> Vec<Tensor> {
    let mut v = p.weights.clone();
    v.extend(p.slopes.iter().map(|&s| Tensor::scalar(s)));
    v.extend([p.head.w1.clone(), p.head.b1.clone(), p.head.w2.clone(), p.head.b2.clone()]);
    v
}

fn set_encoder_tensors(p: &mut EncoderParams, mut t: Vec<Tensor>) {
    let l = p.weights.len();
    let s = p.slopes.len();
    let head: Vec<Tensor> = t.drain(l + s..).collect();
    let slopes: Vec<Tensor> = t.drain(l..).collect();
    p.weights = t;
    p.slopes = slopes.iter().map(Tensor::item).collect();
    let [w1, b1, w2, b2]: [Tensor; 4] = head.try_into().expect("four head tensors");
    p.head.w1 = w1;
    p.head.b1 = b1;
    p.head.w2 = w2;
    p.head.b2 = b2;
}

fn aug_tensors(a: &AugmentationParams) -> Vec<Tensor> {
    a.log_a
        .iter()
        .chain(&a.log_b)
        .flatten()
        .map(|&v| Tensor::scalar(v))
        .collect()
}

fn set_aug_tensors(a: &mut AugmentationParams, t: &[Tensor]) {
    let mut it = t.iter().map(Tensor::item);
    for v in a.log_a.iter_mut().chain(a.log_b.iter_mut()) {
        for x in v.iter_mut() {
            *x = it.next().expect("one value per parameter");
        }
    }
}

impl Trainer {
    pub fn new(g: &Graph, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let enc = cfg.encoder_config(g.feature_dim())?;
        let params = init_params(cfg, &enc)?;
        let aug = AugmentationParams::uniform(cfg.layers, cfg.prior_c, cfg.temperature)?;
        Self::resume(g, cfg, Checkpoint {
            config: enc,
            params,
            augmentation: aug,
        })
    }

    /// Continues training from `checkpoint` with fresh optimizer state.
    pub fn resume(g: &Graph, cfg: &RunConfig, checkpoint: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let enc = checkpoint.config;
        if enc.input_dim() != g.feature_dim() || enc.layers() != cfg.layers {
            return Err(Error::Dimension("checkpoint does not match graph or config".into()));
        }
        let adj = normalize_adjacency(g);
        let mirror = cfg.symmetric_masks.then(|| adj.matrix().mirror_positions());
        let params = checkpoint.params;
        let aug = checkpoint.augmentation;
        let wt = encoder_tensors(&params);
        let at = aug_tensors(&aug);
        let adam_w = AdamState::new(AdamConfig::with_lr(cfg.lr_w), &wt.iter().collect::<Vec<_>>());
        let adam_a = AdamState::new(AdamConfig::with_lr(cfg.lr_a), &at.iter().collect::<Vec<_>>());
        Ok(Self {
            cfg: cfg.clone(),
            enc,
            adj,
            mirror,
            features: g.features().clone(),
            params,
            aug,
            adam_w,
            adam_a,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn augmentation(&self) -> &AugmentationParams {
        &self.aug
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.enc.clone(),
            params: self.params.clone(),
            augmentation: self.aug.clone(),
        }
    }

    fn adjacency(&self) -> &Arc<CsrMatrix> {
        self.adj.matrix()
    }

    /// Draws `π` and masks for both views on `tape`. Relaxed masks are
    /// differentiable in `aug_vars`; fixed-aug mode places hard constants.
    fn draw_masks<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        aug_vars: &AugVars,
        rng: &mut R,
    ) -> Result<ViewMasks> {
        let nnz = self.adj.nnz();
        let b = self.cfg.blocks;
        let mut masks: [Vec<LayerMaskVars>; 2] = [Vec::new(), Vec::new()];
        let mut pi: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for view in View::BOTH {
            let vi = view.index();
            match self.cfg.mode {
                AugMode::FixedAug => {
                    let keep = self.cfg.fixed_keep_probs()?;
                    let set = sample_masks(
                        self.adjacency(),
                        b,
                        &keep,
                        MaskMode::Hard,
                        self.cfg.symmetric_masks,
                        rng,
                    )?;
                    masks[vi] = mask_constants(tape, &set);
                    pi[vi] = keep;
                }
                AugMode::LearnedAug => {
                    for l in 0..self.cfg.layers {
                        let u: f64 = rng.random();
                        let p = kumaraswamy_sample_on(
                            tape,
                            aug_vars.log_a[vi][l],
                            aug_vars.log_b[vi][l],
                            u,
                        );
                        pi[vi].push(tape.scalar_value(p));
                        let uniforms = mask_uniforms(rng, b, nnz, self.mirror.as_deref());
                        let m = concrete_masks_on(tape, p, &uniforms, self.cfg.temperature);
                        masks[vi].push(LayerMaskVars {
                            blocks: m,
                            features: None,
                        });
                    }
                }
            }
        }
        Ok(ViewMasks { masks, pi })
    }

    fn contrastive(&self, tape: &mut Tape, enc_vars: &EncoderVars, vm: &ViewMasks) -> Var {
        let x = tape.constant(self.features.clone());
        let h_o = encode_view_on(tape, &self.enc, &self.adj, x, enc_vars, Some(&vm.masks[0]));
        let h_t = encode_view_on(tape, &self.enc, &self.adj, x, enc_vars, Some(&vm.masks[1]));
        let p_o = project_on(tape, h_o, &enc_vars.head);
        let p_t = project_on(tape, h_t, &enc_vars.head);
        contrastive_loss_on(tape, p_o, p_t, self.cfg.tau)
    }

    fn breakdown(&self, l_cnt: f64, pi: &[Vec<f64>; 2]) -> LossBreakdown {
        let l_wd = weight_decay(&self.params, self.cfg.l2, self.cfg.wd_scope);
        let kl_aug = self.kl_aug_value();
        let kl_w = weight_kl_diag(&self.params.weights, pi);
        LossBreakdown::new(l_cnt, l_wd, kl_aug, kl_w)
    }

    fn kl_aug_value(&self) -> f64 {
        match self.cfg.mode {
            AugMode::FixedAug => 0.0,
            AugMode::LearnedAug => augmentation_kl(
                &self.aug,
                self.adj.nnz(),
                self.cfg.blocks,
                &self.cfg.kl_settings(),
            ),
        }
    }

    /// Runs one epoch. On error the trainer keeps its pre-epoch state.
    pub fn step(&mut self) -> Result<TrainLogRecord> {
        let start = Instant::now();
        let epoch = self.epoch;

        // Phase 1: encoder weights.
        let mut rng = stream(self.cfg.seed, stream_id(TAG_EPOCH, epoch as u64, 0));
        let mut tape = Tape::new();
        let enc_vars = self.params.register(&mut tape, true);
        let aug_vars = AugVars::register(&mut tape, &self.aug, false);
        let vm = self.draw_masks(&mut tape, &aug_vars, &mut rng)?;
        let l_cnt = self.contrastive(&mut tape, &enc_vars, &vm);
        let l_wd = weight_decay_on(&mut tape, &enc_vars, self.cfg.l2, self.cfg.wd_scope);
        let total = tape.add(l_cnt, l_wd);
        let l_cnt_value = tape.scalar_value(l_cnt);
        let phase1 = self.breakdown(l_cnt_value, &vm.pi);
        if !phase1.is_finite() {
            return Err(Error::NonFiniteValue(format!("phase-1 loss at epoch {epoch}")));
        }
        let grads = tape.backward(total)?;
        let grads: Vec<Tensor> = enc_vars.all().into_iter().map(|v| grads.get(v)).collect();
        let mut new_w = encoder_tensors(&self.params);
        let mut adam_w = self.adam_w.clone();
        adam_w.step(&mut new_w.iter_mut().collect::<Vec<_>>(), &grads)?;
        if new_w.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteValue(format!("encoder weights at epoch {epoch}")));
        }
        let mut params = self.params.clone();
        set_encoder_tensors(&mut params, new_w);

        // Phase 2: augmentation posteriors, with fresh draws.
        let (phase2, aug, adam_a) = match self.cfg.mode {
            AugMode::FixedAug => (None, self.aug.clone(), self.adam_a.clone()),
            AugMode::LearnedAug => {
                let mut rng = stream(self.cfg.seed, stream_id(TAG_EPOCH, epoch as u64, 1));
                let mut tape = Tape::new();
                let enc_vars = params.register(&mut tape, false);
                let aug_vars = AugVars::register(&mut tape, &self.aug, true);
                let vm = self.draw_masks(&mut tape, &aug_vars, &mut rng)?;
                let l_cnt = self.contrastive(&mut tape, &enc_vars, &vm);
                let kl = augmentation_kl_on(
                    &mut tape,
                    &aug_vars,
                    self.adj.nnz(),
                    self.cfg.blocks,
                    &self.cfg.kl_settings(),
                );
                // ascend L_CNT − KL by descending KL − L_CNT
                let objective = tape.sub(kl, l_cnt);
                let l_cnt_value = tape.scalar_value(l_cnt);
                let kl_value = tape.scalar_value(kl);
                let l_wd = weight_decay(&params, self.cfg.l2, self.cfg.wd_scope);
                let kl_w = weight_kl_diag(&params.weights, &vm.pi);
                let phase2 = LossBreakdown::new(l_cnt_value, l_wd, kl_value, kl_w);
                if !phase2.is_finite() {
                    return Err(Error::NonFiniteValue(format!("phase-2 objective at epoch {epoch}")));
                }
                let grads = tape.backward(objective)?;
                let order: Vec<Var> = aug_vars
                    .log_a
                    .iter()
                    .chain(&aug_vars.log_b)
                    .flatten()
                    .copied()
                    .collect();
                let grads: Vec<Tensor> = order.into_iter().map(|v| grads.get(v)).collect();
                let mut new_a = aug_tensors(&self.aug);
                let mut adam_a = self.adam_a.clone();
                adam_a.step(&mut new_a.iter_mut().collect::<Vec<_>>(), &grads)?;
                let mut aug = self.aug.clone();
                set_aug_tensors(&mut aug, &new_a);
                if !aug.is_finite() {
                    return Err(Error::NonFiniteValue(format!(
                        "augmentation parameters at epoch {epoch}"
                    )));
                }
                let clamped = aug.clamp_params();
                if clamped > 0 {
                    warn!("epoch {epoch}: clamped {clamped} Kumaraswamy parameters into [1e-4, 1e4]");
                }
                (Some(phase2), aug, adam_a)
            }
        };

        self.params = params;
        self.aug = aug;
        self.adam_w = adam_w;
        self.adam_a = adam_a;
        self.epoch += 1;

        let pi_mean = [0, 1].map(|v| {
            let view = View::BOTH[v];
            (0..self.cfg.layers)
                .map(|l| kumaraswamy_mean(self.aug.a(view, l), self.aug.b(view, l)))
                .collect()
        });
        let wall_ms = self
            .cfg
            .record_wall_clock
            .then(|| start.elapsed().as_secs_f64() * 1e3);
        Ok(TrainLogRecord {
            epoch,
            phase1,
            phase2,
            pi_sampled: vm.pi,
            pi_mean,
            wall_ms,
        })
    }
}

/// Trains for `cfg.epochs` epochs, passing every record to `on_record`.
///
/// On a non-finite loss the error is returned together with the last
/// checkpoint whose parameters were all finite.
#[allow(clippy::result_large_err)]
pub fn train(
    g: &Graph,
    cfg: &RunConfig,
    mut on_record: impl FnMut(&TrainLogRecord),
) -> std::result::Result<Checkpoint, (Error, Option<Checkpoint>)> {
    let mut trainer = Trainer::new(g, cfg).map_err(|e| (e, None))?;
    for _ in 0..cfg.epochs {
        match trainer.step() {
            Ok(rec) => on_record(&rec),
            Err(e) => return Err((e, Some(trainer.checkpoint()))),
        }
    }
    Ok(trainer.checkpoint())
}
