//! Graph containers, the on-disk directory format, adjacency
//! normalization, synthetic stochastic-block-model graphs, attribute noise
//! injection and k-hop rings.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numcore::rng::stream;
use crate::numcore::{CsrMatrix, Tensor};

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.json";

/// Undirected attributed graph.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted; self-loops are
/// never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor,
    labels: Option<Vec<usize>>,
    splits: BTreeMap<String, Vec<usize>>,
}

impl Graph {
    /// Validates and canonicalizes: reversed and duplicate edges merge,
    /// self-loops are dropped.
    pub fn new(
        n_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Tensor,
        labels: Option<Vec<usize>>,
        splits: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n_nodes || v >= n_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) out of range for {n_nodes} nodes"
                )));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        if features.shape().len() != 2 || features.rows() != n_nodes {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has shape {:?}, expected {n_nodes} rows",
                features.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n_nodes {
                return Err(Error::InvalidGraph(format!(
                    "{} labels for {n_nodes} nodes",
                    l.len()
                )));
            }
        }
        for (name, nodes) in &splits {
            if let Some(&bad) = nodes.iter().find(|&&v| v >= n_nodes) {
                return Err(Error::InvalidGraph(format!(
                    "split `{name}` references node {bad}"
                )));
            }
        }
        Ok(Self {
            n_nodes,
            edges: set.into_iter().collect(),
            features,
            labels,
            splits,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn splits(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.splits
    }

    pub fn split(&self, name: &str) -> Option<&[usize]> {
        self.splits.get(name).map(Vec::as_slice)
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        Self::new(
            self.n_nodes,
            self.edges.iter().copied(),
            features,
            self.labels.clone(),
            self.splits.clone(),
        )
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_index(path: &Path, line: usize, tok: &str) -> Result<usize> {
    tok.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("expected a node index, found `{tok}`")))
}

fn non_blank(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Reads `edges.tsv` and `features.csv`, plus `labels.csv` and
/// `splits.json` when present.
pub fn load_graph(dir: impl AsRef<Path>) -> Result<Graph> {
    let dir = dir.as_ref();

    let fpath = dir.join(FEATURES_FILE);
    let text = read_text(&fpath)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, l) in non_blank(&text) {
        let row = l
            .split(',')
            .map(|tok| {
                let v: f64 = tok.trim().parse().map_err(|_| {
                    parse_err(&fpath, line, format!("expected a real number, found `{tok}`"))
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(&fpath, line, "non-finite feature value"))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    &fpath,
                    line,
                    format!("{} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(&fpath, 1, "no feature rows"));
    }
    let n = rows.len();
    let features = Tensor::from_rows(&rows)?;

    let epath = dir.join(EDGES_FILE);
    let text = read_text(&epath)?;
    let mut edges = Vec::new();
    for (line, l) in non_blank(&text) {
        let mut toks = l.split('\t');
        let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(parse_err(&epath, line, "expected `u<TAB>v`"));
        };
        let (u, v) = (parse_index(&epath, line, a)?, parse_index(&epath, line, b)?);
        if u >= n || v >= n {
            return Err(parse_err(
                &epath,
                line,
                format!("node index out of range for {n} nodes"),
            ));
        }
        edges.push((u, v));
    }

    let lpath = dir.join(LABELS_FILE);
    let labels = if lpath.exists() {
        let text = read_text(&lpath)?;
        let mut labels: Vec<Option<usize>> = vec![None; n];
        for (line, l) in non_blank(&text) {
            let mut toks = l.split(',');
            let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
                return Err(parse_err(&lpath, line, "expected `node_id,class_id`"));
            };
            let node = parse_index(&lpath, line, a)?;
            let class = b.trim().parse::<usize>().map_err(|_| {
                parse_err(&lpath, line, format!("expected a class id, found `{b}`"))
            })?;
            if node >= n {
                return Err(parse_err(&lpath, line, format!("node {node} out of range")));
            }
            if labels[node].replace(class).is_some() {
                return Err(parse_err(&lpath, line, format!("node {node} labeled twice")));
            }
        }
        let labels: Option<Vec<usize>> = labels.into_iter().collect();
        Some(labels.ok_or_else(|| {
            parse_err(&lpath, 1, "every node needs exactly one label".to_string())
        })?)
    } else {
        None
    };

    let spath = dir.join(SPLITS_FILE);
    let splits = if spath.exists() {
        let text = read_text(&spath)?;
        serde_json::from_str::<BTreeMap<String, Vec<usize>>>(&text).map_err(|e| {
            parse_err(&spath, e.line(), e.to_string())
        })?
    } else {
        BTreeMap::new()
    };

    Graph::new(n, edges, features, labels, splits)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes the directory format read by [`load_graph`].
pub fn save_graph(g: &Graph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut edges = String::new();
    for (u, v) in g.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write_file(&dir.join(EDGES_FILE), edges.as_bytes())?;

    let mut feats = String::new();
    for r in 0..g.n_nodes() {
        let row: Vec<String> = g.features().row(r).iter().map(|v| format!("{v:?}")).collect();
        feats.push_str(&row.join(","));
        feats.push('\n');
    }
    write_file(&dir.join(FEATURES_FILE), feats.as_bytes())?;

    if let Some(labels) = g.labels() {
        let mut s = String::new();
        for (i, c) in labels.iter().enumerate() {
            s.push_str(&format!("{i},{c}\n"));
        }
        write_file(&dir.join(LABELS_FILE), s.as_bytes())?;
    }
    if !g.splits().is_empty() {
        let mut s = serde_json::to_string(g.splits())?;
        s.push('\n');
        write_file(&dir.join(SPLITS_FILE), s.as_bytes())?;
    }
    Ok(())
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` stored sparsely, with `d̃` the degree in `A + I`.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    matrix: Arc<CsrMatrix>,
    degrees: Vec<usize>,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Arc<CsrMatrix> {
        &self.matrix
    }

    /// Degrees counting the added self-loop.
    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Number of stored (directed, self-loop-augmented) entries.
    pub fn nnz(&self) -> usize {
        self.matrix.nnz()
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.matrix.get(u, v)
    }
}

pub fn normalize_adjacency(g: &Graph) -> NormalizedAdjacency {
    let n = g.n_nodes();
    let mut degrees = vec![1usize; n];
    for &(u, v) in g.edges() {
        degrees[u] += 1;
        degrees[v] += 1;
    }
    let coef = |u: usize, v: usize| 1.0 / ((degrees[u] * degrees[v]) as f64).sqrt();
    let mut triplets = Vec::with_capacity(2 * g.n_edges() + n);
    for v in 0..n {
        triplets.push((v, v, coef(v, v)));
    }
    for &(u, v) in g.edges() {
        let c = coef(u, v);
        triplets.push((u, v, c));
        triplets.push((v, u, c));
    }
    let matrix = CsrMatrix::from_triplets(n, triplets).expect("canonical edge list");
    NormalizedAdjacency {
        matrix: Arc::new(matrix),
        degrees,
    }
}

/// Stochastic block model with block-indicator features.
#[derive(Clone, Debug, PartialEq)]
pub struct SbmSpec {
    pub n_per_block: usize,
    pub n_blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Amplitude of the block-indicator pattern added to unit Gaussian noise.
    pub signal: f64,
    pub seed: u64,
}

/// Fraction of nodes assigned to the `train` split; the rest go to `test`.
pub const TRAIN_FRACTION: f64 = 0.1;

pub fn generate_sbm(spec: &SbmSpec) -> Result<Graph> {
    let SbmSpec {
        n_per_block,
        n_blocks,
        p_in,
        p_out,
        feature_dim,
        signal,
        seed,
    } = *spec;
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    if !(signal >= 0.0) {
        return Err(Error::invalid("signal must be non-negative"));
    }
    if n_per_block == 0 || n_blocks == 0 || feature_dim == 0 {
        return Err(Error::invalid("block size, block count and feature dim must be positive"));
    }
    let n = n_per_block * n_blocks;
    let block = |v: usize| v / n_per_block;

    let mut rng = stream(seed, 0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block(u) == block(v) { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let mut rng = stream(seed, 1);
    let mut feats = Vec::with_capacity(n * feature_dim);
    for v in 0..n {
        for d in 0..feature_dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let pattern = if d % n_blocks == block(v) { signal } else { 0.0 };
            feats.push(pattern + noise);
        }
    }
    let features = Tensor::matrix(n, feature_dim, feats);
    let labels: Vec<usize> = (0..n).map(block).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, 2));
    let n_train = ((n as f64) * TRAIN_FRACTION).round().max(1.0) as usize;
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    let splits = BTreeMap::from([("train".to_string(), train), ("test".to_string(), test)]);

    Graph::new(n, edges, features, Some(labels), splits)
}

/// Replaces the attribute rows of `nodes` with i.i.d. `N(0, sigma²)` draws.
pub fn inject_noise(g: &Graph, nodes: &[usize], sigma: f64, seed: u64) -> Result<Graph> {
    if nodes.is_empty() {
        return Err(Error::invalid("noise node set is empty"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma must be non-negative"));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut feats = g.features().clone();
    let mut rng = stream(seed, 0);
    let unique: BTreeSet<usize> = nodes.iter().copied().collect();
    for &v in &unique {
        if v >= g.n_nodes() {
            return Err(Error::invalid(format!("node {v} out of range")));
        }
        for x in feats.row_mut(v) {
            *x = normal.sample(&mut rng);
        }
    }
    g.with_features(feats)
}

/// Picks `count` distinct nodes uniformly at random, sorted.
pub fn choose_nodes(n_nodes: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count > n_nodes {
        return Err(Error::invalid(format!(
            "cannot choose {count} of {n_nodes} nodes"
        )));
    }
    let mut order: Vec<usize> = (0..n_nodes).collect();
    order.shuffle(&mut stream(seed, 0));
    let mut out = order[..count].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// `rings[k]` holds the nodes at shortest-path distance exactly `k` from the
/// seed set, for `k = 0..=k_max`.
pub fn khop_rings(g: &Graph, seeds: &[usize], k_max: usize) -> Result<Vec<Vec<usize>>> {
    if seeds.is_empty() {
        return Err(Error::invalid("seed set is empty"));
    }
    let adj = g.neighbors();
    let mut dist = vec![usize::MAX; g.n_nodes()];
    let mut queue = VecDeque::new();
    for &s in seeds {
        if s >= g.n_nodes() {
            return Err(Error::invalid(format!("seed {s} out of range")));
        }
        if dist[s] != 0 {
            dist[s] = 0;
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        if dist[u] >= k_max {
            continue;
        }
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut rings = vec![Vec::new(); k_max + 1];
    for (v, &d) in dist.iter().enumerate() {
        if d <= k_max {
            rings[d].push(v);
        }
    }
    Ok(rings)
}
