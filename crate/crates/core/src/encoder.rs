//! Two-view GCN encoder with masked propagation, the projection head, and
//! the binary checkpoint format.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationParams, LayerMask, MaskSet};
use crate::error::{Error, Result};
use crate::graphdata::NormalizedAdjacency;
use crate::numcore::{block_ranges, xavier_uniform, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Prelu,
}

impl Activation {
    pub fn apply(self, x: f64, slope: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Prelu if x > 0.0 => x,
            Activation::Prelu => slope * x,
        }
    }
}

pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `[F_0, F_1, …, F_L]`; the last entry is the latent dimension.
    pub dims: Vec<usize>,
    pub n_blocks: usize,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        latent_dim: usize,
        layers: usize,
        n_blocks: usize,
        activation: Activation,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(hidden_dim, layers - 1));
        dims.push(latent_dim);
        let cfg = Self {
            dims,
            n_blocks,
            activation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer dimensions {:?}", self.dims)));
        }
        for &d in &self.dims[1..] {
            block_ranges(d, self.n_blocks)?;
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn latent_dim(&self) -> usize {
        *self.dims.last().expect("validated")
    }

    pub fn blocks(&self, layer: usize) -> Vec<Range<usize>> {
        block_ranges(self.dims[layer + 1], self.n_blocks).expect("validated")
    }
}

/// `P = ELU(H W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ProjectionHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            w1: xavier_uniform(dim, dim, rng),
            b1: Tensor::zeros(&[1, dim]),
            w2: xavier_uniform(dim, dim, rng),
            b2: Tensor::zeros(&[1, dim]),
        }
    }
}

/// Shared encoder weights (`θ_w`): layer matrices, PReLU slopes, head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub weights: Vec<Tensor>,
    /// One slope per layer; empty for ReLU.
    pub slopes: Vec<f64>,
    pub head: ProjectionHead,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let weights = cfg
            .dims
            .windows(2)
            .map(|w| xavier_uniform(w[0], w[1], rng))
            .collect();
        let slopes = match cfg.activation {
            Activation::Prelu => vec![PRELU_INIT; cfg.layers()],
            Activation::Relu => Vec::new(),
        };
        let head = ProjectionHead::init(cfg.latent_dim(), rng);
        Ok(Self {
            weights,
            slopes,
            head,
        })
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.weights.len() != cfg.layers() {
            return Err(Error::Dimension(format!(
                "{} weight matrices for {} layers",
                self.weights.len(),
                cfg.layers()
            )));
        }
        for (l, w) in self.weights.iter().enumerate() {
            if w.shape() != [cfg.dims[l], cfg.dims[l + 1]] {
                return Err(Error::ShapeMismatch {
                    expected: vec![cfg.dims[l], cfg.dims[l + 1]],
                    actual: w.shape().to_vec(),
                });
            }
        }
        let want_slopes = match cfg.activation {
            Activation::Prelu => cfg.layers(),
            Activation::Relu => 0,
        };
        if self.slopes.len() != want_slopes {
            return Err(Error::Dimension("PReLU slope count".into()));
        }
        let d = cfg.latent_dim();
        let h = &self.head;
        if h.w1.shape() != [d, d] || h.w2.shape() != [d, d] || h.b1.shape() != [1, d] || h.b2.shape() != [1, d] {
            return Err(Error::Dimension("projection head shape".into()));
        }
        Ok(())
    }

    pub fn slope(&self, layer: usize) -> f64 {
        self.slopes.get(layer).copied().unwrap_or(0.0)
    }

    /// Tensors in checkpoint order with their names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .weights
            .iter()
            .enumerate()
            .map(|(l, w)| (format!("weight.{l}"), w.clone()))
            .collect();
        if !self.slopes.is_empty() {
            out.push((
                "prelu".into(),
                Tensor::matrix(1, self.slopes.len(), self.slopes.clone()),
            ));
        }
        out.push(("head.w1".into(), self.head.w1.clone()));
        out.push(("head.b1".into(), self.head.b1.clone()));
        out.push(("head.w2".into(), self.head.w2.clone()));
        out.push(("head.b2".into(), self.head.b2.clone()));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Places every parameter on `tape`, as trainable leaves if `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let weights = self.weights.iter().map(&mut put).collect();
        let slopes = self.slopes.iter().map(|&s| put(&Tensor::scalar(s))).collect();
        let head = HeadVars {
            w1: put(&self.head.w1),
            b1: put(&self.head.b1),
            w2: put(&self.head.w2),
            b2: put(&self.head.b2),
        };
        EncoderVars {
            weights,
            slopes,
            head,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub weights: Vec<Var>,
    pub slopes: Vec<Var>,
    pub head: HeadVars,
}

impl EncoderVars {
    /// Handles in the same order as the fields of [`EncoderParams`]:
    /// weights, slopes, w1, b1, w2, b2.
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.weights.clone();
        v.extend(&self.slopes);
        v.extend([self.head.w1, self.head.b1, self.head.w2, self.head.b2]);
        v
    }
}

/// Mask handles for one layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerMaskVars {
    /// `[B, nnz]`
    pub blocks: Var,
    /// `[N, F_in]`
    pub features: Option<Var>,
}

/// Puts a sampled mask set on the tape as constants.
pub fn mask_constants(tape: &mut Tape, masks: &MaskSet) -> Vec<LayerMaskVars> {
    masks
        .layers
        .iter()
        .map(|m| LayerMaskVars {
            blocks: tape.constant(m.blocks.clone()),
            features: m.features.as_ref().map(|f| tape.constant(f.clone())),
        })
        .collect()
}

fn activate(tape: &mut Tape, x: Var, act: Activation, slope: Option<Var>) -> Var {
    match (act, slope) {
        (Activation::Relu, _) => tape.relu(x),
        (Activation::Prelu, Some(s)) => tape.prelu(x, s),
        (Activation::Prelu, None) => panic!("PReLU layer without slope"),
    }
}

/// One masked GCN layer on a tape:
/// `out[:, β] = act((Â ⊙ M_β) · ((U ⊙ F) W)[:, β])`.
#[allow(clippy::too_many_arguments)]
pub fn gcn_aug_layer_on(
    tape: &mut Tape,
    adj: &NormalizedAdjacency,
    u: Var,
    mask: Option<LayerMaskVars>,
    w: Var,
    blocks: &[Range<usize>],
    act: Activation,
    slope: Option<Var>,
) -> Var {
    let input = match mask.and_then(|m| m.features) {
        Some(f) => tape.mul(u, f),
        None => u,
    };
    let xw = tape.matmul(input, w);
    let z = tape.propagate(adj.matrix(), mask.map(|m| m.blocks), xw, blocks);
    activate(tape, z, act, slope)
}

fn check_layer(
    adj: &NormalizedAdjacency,
    u: &Tensor,
    mask: Option<&LayerMask>,
    w: &Tensor,
    n_blocks: usize,
) -> Result<Vec<Range<usize>>> {
    if u.rows() != adj.matrix().n() || u.cols() != w.rows() {
        return Err(Error::Dimension(format!(
            "layer input {}x{} against {} nodes and weight {}x{}",
            u.rows(),
            u.cols(),
            adj.matrix().n(),
            w.rows(),
            w.cols()
        )));
    }
    if let Some(m) = mask {
        if m.blocks.shape() != [n_blocks, adj.nnz()] {
            return Err(Error::ShapeMismatch {
                expected: vec![n_blocks, adj.nnz()],
                actual: m.blocks.shape().to_vec(),
            });
        }
        if let Some(f) = &m.features {
            if f.shape() != u.shape() {
                return Err(Error::ShapeMismatch {
                    expected: u.shape().to_vec(),
                    actual: f.shape().to_vec(),
                });
            }
        }
    }
    block_ranges(w.cols(), n_blocks)
}

/// Plain-value version of [`gcn_aug_layer_on`].
pub fn gcn_aug_layer(
    u: &Tensor,
    adj: &NormalizedAdjacency,
    mask: Option<&LayerMask>,
    w: &Tensor,
    n_blocks: usize,
    act: Activation,
    slope: f64,
) -> Result<Tensor> {
    let blocks = check_layer(adj, u, mask, w, n_blocks)?;
    let mut tape = Tape::new();
    let uv = tape.constant(u.clone());
    let wv = tape.constant(w.clone());
    let sv = (act == Activation::Prelu).then(|| tape.scalar(slope));
    let mv = mask.map(|m| LayerMaskVars {
        blocks: tape.constant(m.blocks.clone()),
        features: m.features.as_ref().map(|f| tape.constant(f.clone())),
    });
    let out = gcn_aug_layer_on(&mut tape, adj, uv, mv, wv, &blocks, act, sv);
    Ok(tape.value(out).clone())
}

/// The same layer evaluated node by node with connection-specific weights
/// `W̃^{(u,v)}[i, j] = Z̃_{[v,u]} W[i, j]`.
pub fn connection_weight_view(
    w: &Tensor,
    mask: Option<&LayerMask>,
    adj: &NormalizedAdjacency,
    u: &Tensor,
    n_blocks: usize,
    act: Activation,
    slope: f64,
) -> Result<Tensor> {
    let blocks = check_layer(adj, u, mask, w, n_blocks)?;
    let a = adj.matrix();
    let (f_in, f_out) = (w.rows(), w.cols());
    let mut block_of = vec![0; f_out];
    for (b, r) in blocks.iter().enumerate() {
        for j in r.clone() {
            block_of[j] = b;
        }
    }
    let mut out = Tensor::zeros(&[a.n(), f_out]);
    let cols = a.col_indices();
    for v in 0..a.n() {
        for j in 0..f_out {
            let mut acc = 0.0;
            for e in a.row_range(v) {
                let src = cols[e];
                let mut inner = 0.0;
                for i in 0..f_in {
                    let z = match mask {
                        Some(m) => {
                            let f = m.features.as_ref().map_or(1.0, |f| f.get(src, i));
                            m.blocks.get(block_of[j], e) * f
                        }
                        None => 1.0,
                    };
                    inner += u.get(src, i) * (z * w.get(i, j));
                }
                acc += a.values()[e] * inner;
            }
            out.set(v, j, act.apply(acc, slope));
        }
    }
    Ok(out)
}

/// Full encoder pass on a tape. `masks` must cover every layer when given.
pub fn encode_view_on(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    adj: &NormalizedAdjacency,
    features: Var,
    vars: &EncoderVars,
    masks: Option<&[LayerMaskVars]>,
) -> Var {
    let mut h = features;
    for l in 0..cfg.layers() {
        let blocks = cfg.blocks(l);
        let mask = masks.map(|m| m[l]);
        h = gcn_aug_layer_on(
            tape,
            adj,
            h,
            mask,
            vars.weights[l],
            &blocks,
            cfg.activation,
            vars.slopes.get(l).copied(),
        );
    }
    h
}

/// Projection head on a tape.
pub fn project_on(tape: &mut Tape, h: Var, head: &HeadVars) -> Var {
    let z = tape.matmul(h, head.w1);
    let z = tape.add_row(z, head.b1);
    let z = tape.elu(z);
    let z = tape.matmul(z, head.w2);
    tape.add_row(z, head.b2)
}

fn check_masks(cfg: &EncoderConfig, adj: &NormalizedAdjacency, masks: &MaskSet) -> Result<()> {
    if masks.layers.len() != cfg.layers() {
        return Err(Error::Dimension(format!(
            "mask set has {} layers, encoder has {}",
            masks.layers.len(),
            cfg.layers()
        )));
    }
    for (l, m) in masks.layers.iter().enumerate() {
        if m.blocks.shape() != [cfg.n_blocks, adj.nnz()] {
            return Err(Error::ShapeMismatch {
                expected: vec![cfg.n_blocks, adj.nnz()],
                actual: m.blocks.shape().to_vec(),
            });
        }
        if let Some(f) = &m.features {
            if f.shape() != [adj.matrix().n(), cfg.dims[l]] {
                return Err(Error::ShapeMismatch {
                    expected: vec![adj.matrix().n(), cfg.dims[l]],
                    actual: f.shape().to_vec(),
                });
            }
        }
    }
    Ok(())
}

/// Embeddings `H` for one view; `masks = None` is the mask-free pass.
pub fn encode_view(
    cfg: &EncoderConfig,
    params: &EncoderParams,
    adj: &NormalizedAdjacency,
    features: &Tensor,
    masks: Option<&MaskSet>,
) -> Result<Tensor> {
    params.check(cfg)?;
    if features.shape() != [adj.matrix().n(), cfg.input_dim()] {
        return Err(Error::ShapeMismatch {
            expected: vec![adj.matrix().n(), cfg.input_dim()],
            actual: features.shape().to_vec(),
        });
    }
    if let Some(m) = masks {
        check_masks(cfg, adj, m)?;
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(features.clone());
    let mv = masks.map(|m| mask_constants(&mut tape, m));
    let h = encode_view_on(&mut tape, cfg, adj, x, &vars, mv.as_deref());
    Ok(tape.value(h).clone())
}

/// Projections `P` of embeddings `H`.
pub fn project(h: &Tensor, head: &ProjectionHead) -> Result<Tensor> {
    if h.cols() != head.w1.rows() {
        return Err(Error::Dimension(format!(
            "embedding width {} against head input {}",
            h.cols(),
            head.w1.rows()
        )));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let vars = HeadVars {
        w1: tape.constant(head.w1.clone()),
        b1: tape.constant(head.b1.clone()),
        w2: tape.constant(head.w2.clone()),
        b2: tape.constant(head.b2.clone()),
    };
    let p = project_on(&mut tape, hv, &vars);
    Ok(tape.value(p).clone())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"BGCL";
const CHECKPOINT_VERSION: u32 = 1;

/// Trained model: encoder configuration and weights plus the augmentation
/// posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: EncoderParams,
    pub augmentation: AugmentationParams,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dims: Vec<usize>,
    layers: usize,
    n_blocks: usize,
    activation: Activation,
    augmentation: AugmentationParams,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check(&self.config)?;
        let tensors = self.params.named_tensors();
        let header = CheckpointHeader {
            dims: self.config.dims.clone(),
            layers: self.config.layers(),
            n_blocks: self.config.n_blocks,
            activation: self.config.activation,
            augmentation: self.augmentation.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(json.len()).expect("header fits u32").to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing BGCL magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let config = EncoderConfig {
            dims: header.dims,
            n_blocks: header.n_blocks,
            activation: header.activation,
        };
        config.validate()?;
        if header.layers != config.layers() || header.augmentation.layers() != config.layers() {
            return Err(bad("layer count disagrees with dimensions"));
        }
        let mut cursor = 12 + hlen;
        let mut read = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let end = cursor + 8 * n;
            let raw = bytes.get(cursor..end).ok_or_else(|| bad("truncated tensor data"))?;
            cursor = end;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut weights = Vec::new();
        let mut slopes = Vec::new();
        let mut head = [None, None, None, None];
        for entry in &header.tensors {
            let t = read(&entry.shape)?;
            match entry.name.as_str() {
                "prelu" => slopes = t.into_data(),
                "head.w1" => head[0] = Some(t),
                "head.b1" => head[1] = Some(t),
                "head.w2" => head[2] = Some(t),
                "head.b2" => head[3] = Some(t),
                name if name.starts_with("weight.") => weights.push(t),
                other => return Err(Error::Checkpoint(format!("unknown tensor {other}"))),
            }
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let [w1, b1, w2, b2] = head;
        let missing = || bad("projection head incomplete");
        let params = EncoderParams {
            weights,
            slopes,
            head: ProjectionHead {
                w1: w1.ok_or_else(missing)?,
                b1: b1.ok_or_else(missing)?,
                w2: w2.ok_or_else(missing)?,
                b2: b2.ok_or_else(missing)?,
            },
        };
        params.check(&config)?;
        Ok(Self {
            config,
            params,
            augmentation: header.augmentation,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
