//! Layer-0 embeddings, LightGCN propagation and inner-product scores.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::spgraph::{spmm, DenseMatrix, PropagationSpec, SparseMatrix};
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8] = b"CADEMB1";

/// Trainable layer-0 embeddings: users in rows `0..n_users`, items after.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    n_users: usize,
    n_items: usize,
    nodes: DenseMatrix,
}

impl EmbeddingTable {
    pub fn new(n_users: usize, n_items: usize, nodes: DenseMatrix) -> Result<Self> {
        if nodes.rows() != n_users + n_items {
            return Err(Error::Shape(format!("{} rows for {n_users} users + {n_items} items", nodes.rows())));
        }
        if nodes.cols() == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        if nodes.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(EmbeddingTable { n_users, n_items, nodes })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn dim(&self) -> usize {
        self.nodes.cols()
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.nodes.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.nodes.row(self.n_users + i)
    }

    pub fn item_node(&self, i: usize) -> usize {
        self.n_users + i
    }

    pub fn node(&self, x: usize) -> &[f64] {
        self.nodes.row(x)
    }

    pub fn node_mut(&mut self, x: usize) -> &mut [f64] {
        self.nodes.row_mut(x)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.nodes
    }

    pub fn matrix_mut(&mut self) -> &mut DenseMatrix {
        &mut self.nodes
    }
}

/// I.i.d. `N(0, scale²)` entries from a generator seeded with `seed`.
pub fn init_embeddings(n_users: usize, n_items: usize, dim: usize, seed: u64, scale: f64) -> Result<EmbeddingTable> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("init scale must be positive, got {scale}")));
    }
    let normal = Normal::new(0.0, scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..(n_users + n_items) * dim).map(|_| normal.sample(&mut rng)).collect();
    EmbeddingTable::new(n_users, n_items, DenseMatrix::from_vec(n_users + n_items, dim, data)?)
}

/// Per-layer embeddings `e^(k)` and their weighted combination.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedEmbeddings {
    n_users: usize,
    pub per_layer: Vec<DenseMatrix>,
    pub combined: DenseMatrix,
}

impl PropagatedEmbeddings {
    /// Wraps precomputed final embeddings (users first, then items).
    pub fn from_combined(n_users: usize, combined: DenseMatrix) -> Result<Self> {
        if n_users > combined.rows() {
            return Err(Error::Shape(format!("{n_users} users but only {} rows", combined.rows())));
        }
        Ok(PropagatedEmbeddings { n_users, per_layer: Vec::new(), combined })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.combined.rows() - self.n_users
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.combined.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.combined.row(self.n_users + i)
    }

    pub fn node(&self, x: usize) -> &[f64] {
        self.combined.row(x)
    }

    /// Item rows of the combined embeddings as their own matrix.
    pub fn item_matrix(&self) -> DenseMatrix {
        let d = self.combined.cols();
        let start = self.n_users * d;
        DenseMatrix::from_vec(self.n_items(), d, self.combined.as_slice()[start..].to_vec()).expect("consistent shape")
    }

    /// Inner product of the combined user and item embeddings.
    pub fn score(&self, u: usize, i: usize) -> Result<f64> {
        if u >= self.n_users {
            return Err(Error::OutOfRange { what: "users", index: u, len: self.n_users });
        }
        if i >= self.n_items() {
            return Err(Error::OutOfRange { what: "items", index: i, len: self.n_items() });
        }
        Ok(crate::dot(self.user(u), self.item(i)))
    }
}

/// `e^(k) = A e^(k-1)` for `k = 1..=L`, combined as `Σ α_k e^(k)`.
pub fn propagate(
    table: &EmbeddingTable,
    adjacency: &SparseMatrix,
    spec: &PropagationSpec,
) -> Result<PropagatedEmbeddings> {
    let n = table.n_nodes();
    if adjacency.n_rows() != n || adjacency.n_cols() != n {
        return Err(Error::Shape(format!(
            "adjacency is {}x{}, embeddings cover {n} nodes",
            adjacency.n_rows(),
            adjacency.n_cols()
        )));
    }
    let weights = spec.layer_weights();
    let mut per_layer = Vec::with_capacity(weights.len());
    per_layer.push(table.matrix().clone());
    for k in 1..weights.len() {
        let next = spmm(adjacency, &per_layer[k - 1])?;
        per_layer.push(next);
    }
    let mut combined = DenseMatrix::zeros(n, table.dim());
    for (layer, &w) in per_layer.iter().zip(weights) {
        combined.add_scaled(layer, w);
    }
    Ok(PropagatedEmbeddings { n_users: table.n_users(), per_layer, combined })
}

/// Column `node` of `M = Σ α_k A^k`, i.e. `∂e_x / ∂e_node^(0)` for every `x`.
pub fn m_column(adjacency: &SparseMatrix, spec: &PropagationSpec, node: usize) -> Result<Vec<f64>> {
    let n = adjacency.n_rows();
    if node >= n {
        return Err(Error::OutOfRange { what: "nodes", index: node, len: n });
    }
    let weights = spec.layer_weights();
    let mut cur = vec![0.0; n];
    cur[node] = 1.0;
    let mut out: Vec<f64> = cur.iter().map(|x| x * weights[0]).collect();
    for &w in &weights[1..] {
        cur = adjacency.spmv(&cur)?;
        for (o, c) in out.iter_mut().zip(&cur) {
            *o += w * c;
        }
    }
    Ok(out)
}

/// Row `node` of `M` as sorted `(column, value)` pairs: the weights with
/// which every layer-0 embedding contributes to the final embedding of
/// `node`. Structural zeros are omitted.
pub fn m_row(adjacency: &SparseMatrix, spec: &PropagationSpec, node: usize) -> Result<Vec<(usize, f64)>> {
    let n = adjacency.n_rows();
    if node >= n {
        return Err(Error::OutOfRange { what: "nodes", index: node, len: n });
    }
    Ok(MRowWorkspace::new(n).row(adjacency, spec, node))
}

/// Scratch space for repeated sparse `M`-row extraction without
/// reallocating dense buffers of the node count.
#[derive(Debug, Clone)]
pub struct MRowWorkspace {
    acc: Vec<f64>,
    seen: Vec<bool>,
    touched: Vec<usize>,
    layer: Vec<f64>,
    layer_seen: Vec<bool>,
    layer_touched: Vec<usize>,
}

impl MRowWorkspace {
    pub fn new(n_nodes: usize) -> Self {
        MRowWorkspace {
            acc: vec![0.0; n_nodes],
            seen: vec![false; n_nodes],
            touched: Vec::new(),
            layer: vec![0.0; n_nodes],
            layer_seen: vec![false; n_nodes],
            layer_touched: Vec::new(),
        }
    }

    pub fn row(&mut self, adjacency: &SparseMatrix, spec: &PropagationSpec, node: usize) -> Vec<(usize, f64)> {
        let weights = spec.layer_weights();
        let mut cur: Vec<(usize, f64)> = vec![(node, 1.0)];
        self.add(node, weights[0]);
        for &w in &weights[1..] {
            for &(r, x) in &cur {
                let (cols, vals) = adjacency.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    if !self.layer_seen[c] {
                        self.layer_seen[c] = true;
                        self.layer_touched.push(c);
                    }
                    self.layer[c] += x * v;
                }
            }
            self.layer_touched.sort_unstable();
            cur.clear();
            for &c in &self.layer_touched {
                cur.push((c, self.layer[c]));
                self.layer[c] = 0.0;
                self.layer_seen[c] = false;
            }
            self.layer_touched.clear();
            for &(c, x) in &cur {
                self.add(c, w * x);
            }
        }
        self.touched.sort_unstable();
        let out = self.touched.iter().map(|&c| (c, self.acc[c])).collect();
        for &c in &self.touched {
            self.acc[c] = 0.0;
            self.seen[c] = false;
        }
        self.touched.clear();
        out
    }

    fn add(&mut self, c: usize, v: f64) {
        if !self.seen[c] {
            self.seen[c] = true;
            self.touched.push(c);
        }
        self.acc[c] += v;
    }
}

/// Writes `CADEMB1\n<n_users> <n_items> <d>\n` followed by the table as
/// row-major little-endian `f64`, users before items.
pub fn write_checkpoint(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(32 + table.matrix().as_slice().len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(b'\n');
    writeln!(buf, "{} {} {}", table.n_users(), table.n_items(), table.dim()).expect("vec write");
    for x in table.matrix().as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|r| r.strip_prefix(b"\n"))
        .ok_or_else(|| bad("missing CADEMB1 magic"))?;
    let eol = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&rest[..eol]).map_err(|_| bad("header is not ASCII"))?;
    let dims: Vec<usize> = header
        .split_ascii_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("malformed header"))?;
    let [n_users, n_items, dim] = dims[..] else {
        return Err(bad("header must hold n_users n_items d"));
    };
    let body = &rest[eol + 1..];
    let expected = (n_users + n_items) * dim * 8;
    if body.len() != expected {
        return Err(bad(&format!("expected {expected} payload bytes, found {}", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    EmbeddingTable::new(n_users, n_items, DenseMatrix::from_vec(n_users + n_items, dim, data)?)
}
