//! Graph storage, symmetric adjacency normalization, dataset files, and
//! vertical partitioning into per-client shards.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GlasuError, Result};
use crate::linalg::{Matrix, RngState};

/// Undirected simple graph: deduplicated (u,v) pairs, u != v.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    edges: BTreeSet<(u32, u32)>,
}

impl Graph {
    pub fn new(num_nodes: usize) -> Self {
        Graph { num_nodes, edges: BTreeSet::new() }
    }

    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut g = Graph::new(num_nodes);
        for (u, v) in edges {
            g.add_edge(u, v)?;
        }
        Ok(g)
    }

    /// Inserts an undirected edge; self-pairs are ignored (self-loops are
    /// introduced during normalization instead).
    pub fn add_edge(&mut self, u: u32, v: u32) -> Result<()> {
        if u as usize >= self.num_nodes || v as usize >= self.num_nodes {
            return Err(GlasuError::Data(format!(
                "edge ({u},{v}) out of range for {} nodes",
                self.num_nodes
            )));
        }
        if u != v {
            self.edges.insert((u.min(v), u.max(v)));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edges.iter().copied()
    }
}

/// CSR layout of the symmetric-normalized adjacency with self-loops:
/// A_hat = D~^{-1/2} (A + I) D~^{-1/2}, D~ the degree of A + I.
#[derive(Clone, Debug)]
pub struct NormalizedAdj {
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
    /// Full row sums of A_hat, used for sampling-loss rescaling.
    row_sums: Vec<f64>,
}

impl NormalizedAdj {
    pub fn num_nodes(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (s, e) = (self.row_offsets[i], self.row_offsets[i + 1]);
        (&self.col_indices[s..e], &self.values[s..e])
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row_sums[i]
    }

    /// Neighbor ids of node i excluding i itself.
    pub fn neighbors_excl_self(&self, i: usize) -> impl Iterator<Item = u32> + '_ {
        let (cols, _) = self.row(i);
        let i = i as u32;
        cols.iter().copied().filter(move |&j| j != i)
    }

    pub fn value_at(&self, i: usize, j: u32) -> Option<f64> {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).ok().map(|k| vals[k])
    }
}

/// A_hat = D~^{-1/2}(A+I)D~^{-1/2}; entry (i,j) = 1/sqrt(d~_i * d~_j). The
/// degree product commutes bitwise, so the matrix is symmetric in value.
pub fn normalize_adjacency(g: &Graph) -> NormalizedAdj {
    let n = g.num_nodes();
    let mut adj: Vec<BTreeSet<u32>> = (0..n).map(|i| BTreeSet::from([i as u32])).collect();
    for (u, v) in g.edges() {
        adj[u as usize].insert(v);
        adj[v as usize].insert(u);
    }
    let degrees: Vec<f64> = adj.iter().map(|row| row.len() as f64).collect();

    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    let mut row_sums = Vec::with_capacity(n);
    row_offsets.push(0);
    for i in 0..n {
        let mut sum = 0.0;
        for &j in &adj[i] {
            let v = 1.0 / (degrees[i] * degrees[j as usize]).sqrt();
            col_indices.push(j);
            values.push(v);
            sum += v;
        }
        row_sums.push(sum);
        row_offsets.push(col_indices.len());
    }
    NormalizedAdj { row_offsets, col_indices, values, row_sums }
}

/// Dense |s_out| x |s_in| block of A_hat with row-sum-preserving rescaling:
/// each retained row is scaled by full-row-sum / retained-sum, except rows
/// where only the self entry survives, which pass through unchanged.
pub fn bipartite_adjacency(adj: &NormalizedAdj, s_out: &[u32], s_in: &[u32]) -> Result<Matrix> {
    let mut out = Matrix::zeros(s_out.len(), s_in.len());
    for (k, &i) in s_out.iter().enumerate() {
        let (cols, vals) = adj.row(i as usize);
        let mut retained: Vec<(usize, f64)> = Vec::new();
        let mut retained_sum = 0.0;
        // Both cols and s_in are sorted ascending; merge scan.
        let mut a = 0;
        let mut b = 0;
        while a < cols.len() && b < s_in.len() {
            match cols[a].cmp(&s_in[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    retained.push((b, vals[a]));
                    retained_sum += vals[a];
                    a += 1;
                    b += 1;
                }
            }
        }
        if retained.is_empty() || retained_sum <= 0.0 {
            return Err(GlasuError::Protocol(format!(
                "bipartite row for node {i} has no retained mass; in-set must contain its self entry"
            )));
        }
        let only_self = retained.len() == 1 && s_in[retained[0].0] == i;
        let factor = if only_self { 1.0 } else { adj.row_sum(i as usize) / retained_sum };
        for (j, v) in retained {
            out.set(k, j, v * factor);
        }
    }
    Ok(out)
}

/// Full dataset: graph + features + labels + disjoint train/val/test masks.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: Graph,
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub train_mask: Vec<u32>,
    pub val_mask: Vec<u32>,
    pub test_mask: Vec<u32>,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.features.rows() != n {
            return Err(GlasuError::Data(format!(
                "feature rows {} != num nodes {n}",
                self.features.rows()
            )));
        }
        if self.labels.len() != n {
            return Err(GlasuError::Data(format!("label count {} != num nodes {n}", self.labels.len())));
        }
        let mut seen = vec![false; n];
        for mask in [&self.train_mask, &self.val_mask, &self.test_mask] {
            for &id in mask {
                if id as usize >= n {
                    return Err(GlasuError::Data(format!("mask id {id} out of range")));
                }
                if seen[id as usize] {
                    return Err(GlasuError::Data(format!("masks overlap at node {id}")));
                }
                seen[id as usize] = true;
            }
        }
        Ok(())
    }
}

/// One client's shard: private edge set plus a contiguous feature block.
#[derive(Clone, Debug)]
pub struct Shard {
    pub graph: Graph,
    pub features: Matrix,
    /// First column of this block within the full feature matrix.
    pub col_offset: usize,
}

/// Vertically partitioned dataset: per-client shards over one shared node
/// set, with shared labels and masks.
#[derive(Clone, Debug)]
pub struct PartitionedDataset {
    pub shards: Vec<Shard>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub train_mask: Vec<u32>,
    pub val_mask: Vec<u32>,
    pub test_mask: Vec<u32>,
}

impl PartitionedDataset {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.shards[0].graph.num_nodes()
    }

    /// A single-client view of one shard, used by standalone training.
    pub fn solo(&self, m: usize) -> PartitionedDataset {
        PartitionedDataset {
            shards: vec![self.shards[m].clone()],
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            train_mask: self.train_mask.clone(),
            val_mask: self.val_mask.clone(),
            test_mask: self.test_mask.clone(),
        }
    }
}

/// Splits features into M contiguous blocks (first d mod M blocks one column
/// wider) and lets each client keep each edge independently with probability
/// `edge_keep_prob`, on its own RNG stream.
pub fn partition_dataset(
    ds: &Dataset,
    m_clients: usize,
    edge_keep_prob: f64,
    seed: u64,
) -> Result<PartitionedDataset> {
    if m_clients < 1 {
        return Err(GlasuError::Config("client count must be >= 1".into()));
    }
    if edge_keep_prob.is_nan() || edge_keep_prob <= 0.0 || edge_keep_prob > 1.0 {
        return Err(GlasuError::Config(format!("edge_keep_prob {edge_keep_prob} not in (0, 1]")));
    }
    let d = ds.feature_dim();
    if d < m_clients {
        return Err(GlasuError::Config(format!(
            "feature dim {d} smaller than client count {m_clients}"
        )));
    }

    let base = d / m_clients;
    let extra = d % m_clients;
    let root = RngState::new(seed, 0).child_named("partition-edges");
    let mut shards = Vec::with_capacity(m_clients);
    let mut col = 0;
    for m in 0..m_clients {
        let width = base + usize::from(m < extra);
        let mut feats = Matrix::zeros(ds.num_nodes(), width);
        for i in 0..ds.num_nodes() {
            for j in 0..width {
                feats.set(i, j, ds.features.get(i, col + j));
            }
        }
        let mut rng = root.child(m as u64);
        let mut g = Graph::new(ds.num_nodes());
        for (u, v) in ds.graph.edges() {
            if edge_keep_prob >= 1.0 || rng.next_f64() < edge_keep_prob {
                g.add_edge(u, v)?;
            }
        }
        shards.push(Shard { graph: g, features: feats, col_offset: col });
        col += width;
    }

    Ok(PartitionedDataset {
        shards,
        labels: ds.labels.clone(),
        num_classes: ds.num_classes,
        train_mask: ds.train_mask.clone(),
        val_mask: ds.val_mask.clone(),
        test_mask: ds.test_mask.clone(),
    })
}

const EDGE_FILE: &str = "edges.txt";
const FEATURE_FILE: &str = "features.csv";
const LABEL_FILE: &str = "labels.csv";
const MASK_FILE: &str = "masks.txt";

fn data_err(file: &str, line: usize, msg: impl std::fmt::Display) -> GlasuError {
    GlasuError::Data(format!("{file}:{line}: {msg}"))
}

/// Loads a dataset directory: edges.txt ("u v" per line), features.csv,
/// labels.csv (one integer per line), masks.txt ("train:"/"val:"/"test:" lines).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let dir = path.as_ref();

    let feat_text = std::fs::read_to_string(dir.join(FEATURE_FILE))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in feat_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| data_err(FEATURE_FILE, ln + 1, e))?;
        if let Some(prev) = rows.last() {
            if prev.len() != row.len() {
                return Err(data_err(FEATURE_FILE, ln + 1, "inconsistent column count"));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(GlasuError::Data(format!("{FEATURE_FILE}: no feature rows")));
    }
    let features = Matrix::from_rows(&rows);
    let n = features.rows();

    let edge_text = std::fs::read_to_string(dir.join(EDGE_FILE))?;
    let mut graph = Graph::new(n);
    for (ln, line) in edge_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (u, v) = match (it.next(), it.next(), it.next()) {
            (Some(u), Some(v), None) => (u, v),
            _ => return Err(data_err(EDGE_FILE, ln + 1, "expected exactly two node ids")),
        };
        let u: u32 = u.parse().map_err(|e| data_err(EDGE_FILE, ln + 1, e))?;
        let v: u32 = v.parse().map_err(|e| data_err(EDGE_FILE, ln + 1, e))?;
        graph
            .add_edge(u, v)
            .map_err(|e| data_err(EDGE_FILE, ln + 1, e))?;
    }

    let label_text = std::fs::read_to_string(dir.join(LABEL_FILE))?;
    let mut labels = Vec::with_capacity(n);
    for (ln, line) in label_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let y: u32 = line.parse().map_err(|e| data_err(LABEL_FILE, ln + 1, e))?;
        labels.push(y);
    }
    if labels.len() != n {
        return Err(GlasuError::Data(format!(
            "{LABEL_FILE}: {} labels for {n} nodes",
            labels.len()
        )));
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;

    let mask_text = std::fs::read_to_string(dir.join(MASK_FILE))?;
    let mut masks: [Option<Vec<u32>>; 3] = [None, None, None];
    for (ln, line) in mask_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| data_err(MASK_FILE, ln + 1, "expected 'name: ids'"))?;
        let idx = match name.trim() {
            "train" => 0,
            "val" => 1,
            "test" => 2,
            other => return Err(data_err(MASK_FILE, ln + 1, format!("unknown mask '{other}'"))),
        };
        let ids: std::result::Result<Vec<u32>, _> =
            rest.split_whitespace().map(|t| t.parse::<u32>()).collect();
        let mut ids = ids.map_err(|e| data_err(MASK_FILE, ln + 1, e))?;
        ids.sort_unstable();
        ids.dedup();
        masks[idx] = Some(ids);
    }
    let [train, val, test] = masks;
    let missing = |name: &str| GlasuError::Data(format!("{MASK_FILE}: missing '{name}:' line"));
    let ds = Dataset {
        graph,
        features,
        labels,
        num_classes,
        train_mask: train.ok_or_else(|| missing("train"))?,
        val_mask: val.ok_or_else(|| missing("val"))?,
        test_mask: test.ok_or_else(|| missing("test"))?,
    };
    ds.validate()?;
    Ok(ds)
}

/// Divides every feature row by its L1 mass (rows with zero mass pass
/// through). Useful for bag-of-words features.
pub fn row_normalize_features(ds: &mut Dataset) {
    let cols = ds.features.cols();
    for i in 0..ds.features.rows() {
        let sum: f64 = ds.features.row(i).iter().map(|v| v.abs()).sum();
        if sum > 0.0 {
            for j in 0..cols {
                let v = ds.features.get(i, j) / sum;
                ds.features.set(i, j, v);
            }
        }
    }
}

/// Writes a dataset in the same four-file layout `load_dataset` reads.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let mut edges = String::new();
    for (u, v) in ds.graph.edges() {
        writeln!(edges, "{u} {v}").unwrap();
    }
    std::fs::write(dir.join(EDGE_FILE), edges)?;

    let mut feats = String::new();
    for i in 0..ds.features.rows() {
        let row: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(feats, "{}", row.join(",")).unwrap();
    }
    std::fs::write(dir.join(FEATURE_FILE), feats)?;

    let mut labels = String::new();
    for y in &ds.labels {
        writeln!(labels, "{y}").unwrap();
    }
    std::fs::write(dir.join(LABEL_FILE), labels)?;

    let join = |ids: &[u32]| ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    let masks = format!(
        "train: {}\nval: {}\ntest: {}\n",
        join(&ds.train_mask),
        join(&ds.val_mask),
        join(&ds.test_mask)
    );
    std::fs::write(dir.join(MASK_FILE), masks)?;
    Ok(())
}
