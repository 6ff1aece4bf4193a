//! Graph data model, the on-disk dataset format, synthetic block-model
//! generation and adjacency normalization.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{CsrMatrix, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: unknown node id `{id}`")]
    UnknownNode { file: String, line: usize, id: String },
    #[error("{file}:{line}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        file: String,
        line: usize,
        label: i64,
        classes: usize,
    },
    #[error("node `{0}` has no label")]
    MissingLabel(String),
    #[error("node `{0}` appears in more than one split")]
    OverlappingSplits(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
}

/// Train/validation/test node sets (dense ids, sorted).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Immutable attributed graph with undirected, self-loop-free edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    ids: Vec<String>,
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    splits: Splits,
}

impl Graph {
    /// Validates and normalizes the inputs: self-loops are dropped, duplicate
    /// and reversed edges merged, split lists sorted.
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        edges: &[(usize, usize)],
        splits: Splits,
    ) -> Result<Self, GraphError> {
        let n = features.rows();
        let ids = (0..n).map(|i| i.to_string()).collect();
        Self::with_ids(ids, features, labels, num_classes, edges, splits)
    }

    pub fn with_ids(
        ids: Vec<String>,
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        edges: &[(usize, usize)],
        mut splits: Splits,
    ) -> Result<Self, GraphError> {
        let n = features.rows();
        if labels.len() != n || ids.len() != n {
            return Err(GraphError::Invalid(format!(
                "{n} feature rows but {} labels and {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(GraphError::Invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let mut set = BTreeSet::new();
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(GraphError::Invalid(format!("edge ({u}, {v}) out of range")));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        let mut seen = vec![false; n];
        for list in [&mut splits.train, &mut splits.val, &mut splits.test] {
            list.sort_unstable();
            for &i in list.iter() {
                if i >= n {
                    return Err(GraphError::Invalid(format!("split node {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(GraphError::OverlappingSplits(ids[i].clone()));
                }
            }
        }

        Ok(Self {
            ids,
            features,
            labels,
            num_classes,
            edges,
            neighbors,
            splits,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Undirected edges as `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted neighbor list of `i` (never contains `i`).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn train_nodes(&self) -> &[usize] {
        &self.splits.train
    }

    pub fn val_nodes(&self) -> &[usize] {
        &self.splits.val
    }

    pub fn test_nodes(&self) -> &[usize] {
        &self.splits.test
    }

    /// Copy with every feature row scaled to unit L1 norm (zero rows kept).
    pub fn row_normalized(&self) -> Graph {
        let mut g = self.clone();
        let d = g.features.cols();
        for row in g.features.data_mut().chunks_mut(d.max(1)) {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        g
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph, GraphError> {
        let n = self.num_nodes();
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let features = self.features.select_rows(&inv);
        let labels = inv.iter().map(|&i| self.labels[i]).collect();
        let ids = inv.iter().map(|&i| self.ids[i].clone()).collect();
        let edges: Vec<_> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let map = |xs: &[usize]| xs.iter().map(|&i| perm[i]).collect::<Vec<_>>();
        let splits = Splits {
            train: map(&self.splits.train),
            val: map(&self.splits.val),
            test: map(&self.splits.test),
        };
        Graph::with_ids(ids, features, labels, self.num_classes, &edges, splits)
    }
}

/// `D^-1/2 (A + I) D^-1/2`, with `D` the degree matrix of `A + I`.
pub fn normalized_adjacency(graph: &Graph) -> CsrMatrix {
    let n = graph.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((graph.neighbors(i).len() + 1) as f64).sqrt())
        .collect();
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let mut cols: Vec<usize> = graph.neighbors(i).to_vec();
            cols.push(i);
            cols.sort_unstable();
            cols.into_iter().map(|j| (j, inv_sqrt[i] * inv_sqrt[j])).collect()
        })
        .collect();
    CsrMatrix::from_rows(n, &rows)
}

/// Row `i` lists `neighbors(i)`; values are 1.
pub fn neighbor_pattern(graph: &Graph, self_loops: bool) -> Arc<CsrMatrix> {
    let rows: Vec<Vec<(usize, f64)>> = (0..graph.num_nodes())
        .map(|i| {
            let mut cols = graph.neighbors(i).to_vec();
            if self_loops {
                cols.push(i);
                cols.sort_unstable();
            }
            cols.into_iter().map(|j| (j, 1.0)).collect()
        })
        .collect();
    Arc::new(CsrMatrix::from_rows(graph.num_nodes(), &rows))
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Class count; inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
}

fn read(dir: &Path, name: &str) -> Result<String, GraphError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(GraphError::MissingFile(path));
    }
    fs::read_to_string(&path).map_err(|source| GraphError::Io { path, source })
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split('\t').map(str::trim).collect()))
}

/// Loads a dataset directory (see [`save_dataset`] for the layout).
pub fn load_dataset(dir: &Path) -> Result<Graph, GraphError> {
    load_dataset_with(dir, &LoadOptions::default())
}

pub fn load_dataset_with(dir: &Path, opts: &LoadOptions) -> Result<Graph, GraphError> {
    let nodes = read(dir, "nodes.tsv")?;
    let edges_txt = read(dir, "edges.tsv")?;
    let labels_txt = read(dir, "labels.tsv")?;
    let split_txt = [
        read(dir, "splits/train.txt")?,
        read(dir, "splits/val.txt")?,
        read(dir, "splits/test.txt")?,
    ];

    let mut ids = Vec::new();
    let mut index = HashMap::new();
    let mut rows = Vec::new();
    let mut width = None;
    for (line, fields) in data_lines(&nodes) {
        let parse_err = |message: String| GraphError::Parse {
            file: "nodes.tsv".into(),
            line,
            message,
        };
        let id = fields[0].to_string();
        let feats = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(format!("non-numeric feature `{f}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(parse_err(format!("expected {w} features, found {}", feats.len())))
            }
            _ => {}
        }
        if index.insert(id.clone(), ids.len()).is_some() {
            return Err(parse_err(format!("duplicate node id `{id}`")));
        }
        ids.push(id);
        rows.push(feats);
    }
    if ids.is_empty() {
        return Err(GraphError::Invalid("nodes.tsv has no rows".into()));
    }
    let features = Tensor::from_rows(&rows);

    let lookup = |file: &str, line: usize, id: &str| {
        index.get(id).copied().ok_or_else(|| GraphError::UnknownNode {
            file: file.into(),
            line,
            id: id.into(),
        })
    };

    let mut edges = Vec::new();
    for (line, fields) in data_lines(&edges_txt) {
        if fields.len() != 2 {
            return Err(GraphError::Parse {
                file: "edges.tsv".into(),
                line,
                message: format!("expected 2 columns, found {}", fields.len()),
            });
        }
        edges.push((lookup("edges.tsv", line, fields[0])?, lookup("edges.tsv", line, fields[1])?));
    }

    let mut raw_labels: Vec<Option<(usize, i64)>> = vec![None; ids.len()];
    for (line, fields) in data_lines(&labels_txt) {
        if fields.len() != 2 {
            return Err(GraphError::Parse {
                file: "labels.tsv".into(),
                line,
                message: format!("expected 2 columns, found {}", fields.len()),
            });
        }
        let node = lookup("labels.tsv", line, fields[0])?;
        let label = fields[1].parse::<i64>().map_err(|_| GraphError::Parse {
            file: "labels.tsv".into(),
            line,
            message: format!("non-integer label `{}`", fields[1]),
        })?;
        raw_labels[node] = Some((line, label));
    }
    let inferred = raw_labels
        .iter()
        .flatten()
        .map(|&(_, l)| l.max(0) as usize + 1)
        .max()
        .unwrap_or(0);
    let num_classes = opts.num_classes.unwrap_or(inferred);
    let mut labels = Vec::with_capacity(ids.len());
    for (i, entry) in raw_labels.iter().enumerate() {
        let (line, label) = entry.ok_or_else(|| GraphError::MissingLabel(ids[i].clone()))?;
        if label < 0 || label as usize >= num_classes {
            return Err(GraphError::LabelOutOfRange {
                file: "labels.tsv".into(),
                line,
                label,
                classes: num_classes,
            });
        }
        labels.push(label as usize);
    }

    let names = ["splits/train.txt", "splits/val.txt", "splits/test.txt"];
    let mut parts: Vec<Vec<usize>> = Vec::new();
    for (name, text) in names.iter().zip(&split_txt) {
        let mut list = Vec::new();
        for (line, fields) in data_lines(text) {
            list.push(lookup(name, line, fields[0])?);
        }
        parts.push(list);
    }
    let splits = Splits {
        test: parts.pop().unwrap_or_default(),
        val: parts.pop().unwrap_or_default(),
        train: parts.pop().unwrap_or_default(),
    };

    Graph::with_ids(ids, features, labels, num_classes, &edges, splits)
}

/// Writes the tab-separated dataset layout:
/// `nodes.tsv` (`id`, features...), `edges.tsv` (`src`, `dst`),
/// `labels.tsv` (`id`, `label`) and `splits/{train,val,test}.txt`.
pub fn save_dataset(graph: &Graph, dir: &Path) -> Result<(), GraphError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| GraphError::Io { path, source }
    };
    fs::create_dir_all(dir.join("splits")).map_err(io(dir))?;

    let mut nodes = String::new();
    for (i, id) in graph.ids.iter().enumerate() {
        nodes.push_str(id);
        for v in graph.features.row(i) {
            nodes.push('\t');
            nodes.push_str(&v.to_string());
        }
        nodes.push('\n');
    }
    let edges: String = graph
        .edges
        .iter()
        .map(|&(u, v)| format!("{}\t{}\n", graph.ids[u], graph.ids[v]))
        .collect();
    let labels: String = graph
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}\t{l}\n", graph.ids[i]))
        .collect();
    let list = |xs: &[usize]| -> String { xs.iter().map(|&i| format!("{}\n", graph.ids[i])).collect() };

    for (name, text) in [
        ("nodes.tsv", nodes),
        ("edges.tsv", edges),
        ("labels.tsv", labels),
        ("splits/train.txt", list(&graph.splits.train)),
        ("splits/val.txt", list(&graph.splits.val)),
        ("splits/test.txt", list(&graph.splits.test)),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io(&path))?;
    }
    Ok(())
}

/// Stochastic block model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub nodes_per_block: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
    pub train_per_class: usize,
    pub val_size: usize,
    /// Test nodes; `None` takes every node not in train or validation.
    pub test_size: Option<usize>,
}

impl Default for SbmParams {
    fn default() -> Self {
        Self {
            nodes_per_block: 150,
            blocks: 4,
            p_in: 0.08,
            p_out: 0.01,
            feature_dim: 16,
            feature_noise: 1.0,
            seed: 0,
            train_per_class: 20,
            val_size: 120,
            test_size: None,
        }
    }
}

impl SbmParams {
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: &str| Err(GraphError::Invalid(m.into()));
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_out) {
            return bad("edge probabilities must lie in [0, 1]");
        }
        if self.blocks == 0 || self.nodes_per_block == 0 {
            return bad("need at least one block with at least one node");
        }
        if self.feature_dim < self.blocks {
            return bad("feature_dim must be at least the number of blocks");
        }
        if !(self.feature_noise >= 0.0) {
            return bad("feature_noise must be non-negative");
        }
        if self.train_per_class > self.nodes_per_block {
            return bad("train_per_class exceeds block size");
        }
        let n = self.blocks * self.nodes_per_block;
        let used = self.train_per_class * self.blocks + self.val_size + self.test_size.unwrap_or(0);
        if used > n {
            return bad("split sizes exceed node count");
        }
        Ok(())
    }
}

/// Samples a block-structured graph. Node `i` belongs to block
/// `i / nodes_per_block`; its features are the one-hot block centroid plus
/// Gaussian noise, its label is the block id.
pub fn generate_sbm(params: &SbmParams) -> Result<Graph, GraphError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.blocks * params.nodes_per_block;
    let labels: Vec<usize> = (0..n).map(|i| i / params.nodes_per_block).collect();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] {
                params.p_in
            } else {
                params.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let noise = Normal::new(0.0, params.feature_noise).map_err(|e| GraphError::Invalid(e.to_string()))?;
    let d = params.feature_dim;
    let mut features = Tensor::zeros(n, d);
    for i in 0..n {
        for c in 0..d {
            let centroid = if c == labels[i] { 1.0 } else { 0.0 };
            features.set(i, c, centroid + noise.sample(&mut rng));
        }
    }

    let splits = stratified_split(
        &labels,
        params.blocks,
        params.train_per_class,
        params.val_size,
        params.test_size,
        &mut rng,
    );
    Graph::new(features, labels, params.blocks, &edges, splits)
}

/// `train_per_class` labeled nodes per class, then `val_size` and
/// `test_size` nodes drawn uniformly from the remainder.
pub fn stratified_split<R: Rng + ?Sized>(
    labels: &[usize],
    classes: usize,
    train_per_class: usize,
    val_size: usize,
    test_size: Option<usize>,
    rng: &mut R,
) -> Splits {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let mut taken = vec![0usize; classes];
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for i in order {
        if taken[labels[i]] < train_per_class {
            taken[labels[i]] += 1;
            train.push(i);
        } else {
            rest.push(i);
        }
    }
    let val: Vec<usize> = rest.iter().take(val_size).copied().collect();
    let remaining = rest.len() - val.len();
    let test = rest
        .iter()
        .skip(val.len())
        .take(test_size.unwrap_or(remaining))
        .copied()
        .collect();
    Splits { train, val, test }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_graph() -> Graph {
        Graph::new(
            Tensor::zeros(3, 2),
            vec![0, 1, 0],
            2,
            &[(0, 1), (1, 2), (2, 1), (1, 1)],
            Splits {
                train: vec![0],
                val: vec![1],
                test: vec![2],
            },
        )
        .unwrap()
    }

    #[test]
    fn edges_are_deduplicated_and_symmetric() {
        let g = line_graph();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(0), &[1]);
    }

    #[test]
    fn overlapping_splits_rejected() {
        let err = Graph::new(
            Tensor::zeros(2, 1),
            vec![0, 0],
            1,
            &[],
            Splits {
                train: vec![0],
                val: vec![0],
                test: vec![],
            },
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::OverlappingSplits(_)));
    }

    #[test]
    fn isolated_node_adjacency_is_one() {
        let g = Graph::new(Tensor::zeros(1, 1), vec![0], 1, &[], Splits::default()).unwrap();
        assert_eq!(normalized_adjacency(&g).to_dense().data(), &[1.0]);
    }

    #[test]
    fn single_edge_adjacency_is_half_everywhere() {
        let g = Graph::new(Tensor::zeros(2, 1), vec![0, 0], 1, &[(0, 1)], Splits::default()).unwrap();
        let a = normalized_adjacency(&g).to_dense();
        for v in a.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn sbm_without_cross_probability_keeps_edges_in_blocks() {
        let params = SbmParams {
            p_out: 0.0,
            nodes_per_block: 30,
            seed: 9,
            val_size: 10,
            ..SbmParams::default()
        };
        let g = generate_sbm(&params).unwrap();
        assert!(g.num_edges() > 0);
        for &(u, v) in g.edges() {
            assert_eq!(g.labels()[u], g.labels()[v]);
        }
    }

    #[test]
    fn sbm_is_deterministic_in_seed() {
        let params = SbmParams {
            nodes_per_block: 40,
            val_size: 20,
            seed: 17,
            ..SbmParams::default()
        };
        assert_eq!(generate_sbm(&params).unwrap(), generate_sbm(&params).unwrap());
        let other = SbmParams { seed: 18, ..params.clone() };
        assert_ne!(generate_sbm(&params).unwrap().edges(), generate_sbm(&other).unwrap().edges());
    }

    #[test]
    fn sbm_rejects_bad_probability() {
        let params = SbmParams {
            p_in: 1.5,
            ..SbmParams::default()
        };
        assert!(generate_sbm(&params).is_err());
    }

    #[test]
    fn stratified_split_is_disjoint_and_balanced() {
        let params = SbmParams::default();
        let g = generate_sbm(&params).unwrap();
        let s = g.splits();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.val.len(), 120);
        assert_eq!(s.test.len(), 400);
        let mut per_class = [0; 4];
        for &i in &s.train {
            per_class[g.labels()[i]] += 1;
        }
        assert_eq!(per_class, [20; 4]);
    }

    #[test]
    fn row_normalization_gives_unit_l1_rows() {
        let g = Graph::new(
            Tensor::from_rows(&[vec![1.0, 3.0], vec![0.0, 0.0]]),
            vec![0, 0],
            1,
            &[],
            Splits::default(),
        )
        .unwrap()
        .row_normalized();
        assert_eq!(g.features().row(0), &[0.25, 0.75]);
        assert_eq!(g.features().row(1), &[0.0, 0.0]);
    }
}
