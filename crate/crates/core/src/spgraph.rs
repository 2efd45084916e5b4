//! Compressed sparse-row matrices, the normalized user-item adjacency and
//! the propagation kernels built on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::corpus::Dataset;
use crate::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(DenseMatrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &DenseMatrix, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> DenseMatrix {
        DenseMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * scale).collect() }
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `D^-1 W`: every non-empty row sums to one.
    RandomWalk,
    /// `D^-1/2 W D^-1/2`.
    #[default]
    Symmetric,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_walk" | "random-walk" | "rw" => Ok(Normalization::RandomWalk),
            "symmetric" | "sym" => Ok(Normalization::Symmetric),
            other => Err(Error::InvalidArgument(format!("unknown normalization {other:?}"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::RandomWalk => "random_walk",
            Normalization::Symmetric => "symmetric",
        })
    }
}

/// Number of layers `L`, layer weights `α_0..α_L` and the adjacency
/// normalization used to build `M = Σ α_k A^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationSpec {
    layer_weights: Vec<f64>,
    pub normalization: Normalization,
}

impl PropagationSpec {
    pub fn new(layer_weights: Vec<f64>, normalization: Normalization) -> Result<Self> {
        if layer_weights.is_empty() {
            return Err(Error::InvalidArgument("at least one layer weight (alpha_0) is required".into()));
        }
        if layer_weights.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::InvalidArgument("layer weights must be finite and non-negative".into()));
        }
        let sum: f64 = layer_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("layer weights sum to {sum}, expected 1")));
        }
        Ok(PropagationSpec { layer_weights, normalization })
    }

    /// Uniform mean over `n_layers + 1` layers.
    pub fn uniform(n_layers: usize, normalization: Normalization) -> Self {
        let w = 1.0 / (n_layers + 1) as f64;
        PropagationSpec { layer_weights: vec![w; n_layers + 1], normalization }
    }

    pub fn n_layers(&self) -> usize {
        self.layer_weights.len() - 1
    }

    pub fn layer_weights(&self) -> &[f64] {
        &self.layer_weights
    }
}

/// CSR matrix with strictly increasing column indices inside each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut t: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, v) in &t {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Shape(format!("entry ({r}, {c}) outside {n_rows}x{n_cols}")));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("entry ({r}, {c})")));
            }
        }
        t.sort_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(t.len());
        let mut values: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseMatrix { n_rows, n_cols, row_ptr, col_idx, values })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        SparseMatrix { n_rows, n_cols, row_ptr: vec![0; n_rows + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..self.n_cols {
            counts[c + 1] += counts[c];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        // rows visited in increasing order keep each transposed row sorted
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = next[c];
                col_idx[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        SparseMatrix { n_rows: self.n_cols, n_cols: self.n_rows, row_ptr, col_idx, values }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                *out.row_mut(r).get_mut(c).unwrap() = v;
            }
        }
        out
    }

    /// Sparse matrix-vector product.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_cols {
            return Err(Error::Shape(format!("vector of length {} against {} columns", x.len(), self.n_cols)));
        }
        Ok((0..self.n_rows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect())
    }

    /// Row-vector product `xᵀ A` for a sparse `x` given as `(index, value)`
    /// pairs. Returns a dense vector of length `n_cols`.
    pub fn left_mul_sparse(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for &(r, w) in x {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[c] += w * v;
            }
        }
        out
    }
}

/// Sparse-dense product `A · X`. Each output row is computed independently,
/// so the result does not depend on how rows are scheduled across threads.
pub fn spmm(a: &SparseMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.rows() != a.n_cols {
        return Err(Error::Shape(format!("{}x{} sparse times {}x{} dense", a.n_rows, a.n_cols, x.rows(), x.cols())));
    }
    let d = x.cols();
    let mut out = DenseMatrix::zeros(a.n_rows, d);
    if d == 0 {
        return Ok(out);
    }
    out.as_mut_slice().par_chunks_mut(d).enumerate().for_each(|(r, dst)| {
        let (cols, vals) = a.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            for (o, s) in dst.iter_mut().zip(x.row(c)) {
                *o += v * s;
            }
        }
    });
    Ok(out)
}

/// Normalized adjacency of the user-item bipartite graph over
/// `n_users + n_items` nodes, users first. No self-loops are added.
pub fn build_bipartite_adjacency(dataset: &Dataset, normalization: Normalization) -> Result<SparseMatrix> {
    if dataset.train_edges.is_empty() {
        return Err(Error::EmptyDataset("no training edges".into()));
    }
    let n_users = dataset.n_users;
    let n = n_users + dataset.n_items;
    let mut degree = vec![0usize; n];
    for &(u, i) in &dataset.train_edges {
        degree[u] += 1;
        degree[n_users + i] += 1;
    }
    let weight = |a: usize, b: usize| -> f64 {
        match normalization {
            Normalization::RandomWalk => 1.0 / degree[a] as f64,
            Normalization::Symmetric => 1.0 / ((degree[a] * degree[b]) as f64).sqrt(),
        }
    };
    let triplets = dataset.train_edges.iter().flat_map(|&(u, i)| {
        let item = n_users + i;
        [(u, item, weight(u, item)), (item, u, weight(item, u))]
    });
    SparseMatrix::from_triplets(n, n, triplets.collect::<Vec<_>>())
}

/// Power-iteration estimate of the dominant eigenvalue magnitude.
///
/// Each iteration applies `A` twice, so dominant pairs `±ρ` (which every
/// bipartite adjacency has) converge instead of oscillating. The estimate is
/// `sqrt(‖A² v‖)` for the current unit vector `v`.
pub fn spectral_radius_estimate(a: &SparseMatrix, iterations: usize, seed: u64) -> Result<f64> {
    if a.n_rows != a.n_cols {
        return Err(Error::Shape("spectral radius needs a square matrix".into()));
    }
    let n = a.n_rows;
    if n == 0 || a.nnz() == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = crate::norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let w = a.spmv(&a.spmv(&v)?)?;
        let len = crate::norm(&w);
        if len == 0.0 {
            return Ok(0.0);
        }
        estimate = len.sqrt();
        v = w.into_iter().map(|x| x / len).collect();
    }
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_mul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for r in 0..a.rows() {
            for c in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(r, k) * b.get(k, c);
                }
                out.row_mut(r)[c] = s;
            }
        }
        out
    }

    fn one_user_two_items() -> Dataset {
        Dataset::from_edges(1, 2, [(0, 0), (0, 1)], []).unwrap()
    }

    #[test]
    fn single_edge_random_walk() {
        let ds = Dataset::from_edges(1, 1, [(0, 0)], []).unwrap();
        let a = build_bipartite_adjacency(&ds, Normalization::RandomWalk).unwrap();
        assert_eq!(a.to_dense(), DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
    }

    #[test]
    fn user_row_is_stochastic() {
        let a = build_bipartite_adjacency(&one_user_two_items(), Normalization::RandomWalk).unwrap();
        assert_eq!(a.row(0).1, &[0.5, 0.5]);
    }

    #[test]
    fn symmetric_weights() {
        let a = build_bipartite_adjacency(&one_user_two_items(), Normalization::Symmetric).unwrap();
        let w = 1.0 / 2f64.sqrt();
        assert!((a.get(0, 1) - w).abs() < 1e-15);
        assert!((a.get(2, 0) - w).abs() < 1e-15);
        assert!((w - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn spmm_identity_zero_swap() {
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(spmm(&SparseMatrix::identity(2), &x).unwrap(), x);
        assert_eq!(spmm(&SparseMatrix::zeros(2, 2), &x).unwrap(), DenseMatrix::zeros(2, 2));
        let swap = SparseMatrix::from_triplets(2, 2, [(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert_eq!(spmm(&swap, &x).unwrap(), DenseMatrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 2.0]]).unwrap());
    }

    #[test]
    fn spmm_shape_mismatch() {
        let x = DenseMatrix::zeros(3, 2);
        assert!(matches!(spmm(&SparseMatrix::identity(2), &x), Err(Error::Shape(_))));
    }

    #[test]
    fn spectral_radius_of_scaled_identity() {
        let i = SparseMatrix::identity(5);
        assert!((spectral_radius_estimate(&i, 10, 3).unwrap() - 1.0).abs() < 1e-9);
        let two = SparseMatrix::from_triplets(5, 5, (0..5).map(|k| (k, k, 2.0))).unwrap();
        assert!((spectral_radius_estimate(&two, 10, 3).unwrap() - 2.0).abs() < 1e-6);
        assert_eq!(spectral_radius_estimate(&SparseMatrix::zeros(4, 4), 10, 3).unwrap(), 0.0);
    }

    #[test]
    fn triplets_merge_duplicates() {
        let m = SparseMatrix::from_triplets(2, 2, [(0, 1, 1.0), (0, 1, 2.0), (1, 0, 1.0)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.0);
    }

    #[test]
    fn transpose_round_trip() {
        let m = SparseMatrix::from_triplets(2, 3, [(0, 2, 1.5), (1, 0, -2.0), (1, 2, 4.0)]).unwrap();
        let t = m.transpose();
        assert_eq!(t.n_rows(), 3);
        assert_eq!(t.get(2, 1), 4.0);
        assert_eq!(t.transpose(), m);
    }

    fn random_graph() -> impl Strategy<Value = Dataset> {
        (1usize..6, 1usize..6)
            .prop_flat_map(|(nu, ni)| (Just(nu), Just(ni), proptest::collection::vec(any::<bool>(), nu * ni)))
            .prop_filter_map("needs an edge", |(nu, ni, mask)| {
                let edges: Vec<(usize, usize)> = (0..nu * ni).filter(|&k| mask[k]).map(|k| (k / ni, k % ni)).collect();
                if edges.is_empty() {
                    None
                } else {
                    Some(Dataset::from_edges(nu, ni, edges, []).unwrap())
                }
            })
    }

    proptest! {
        #[test]
        fn spmm_matches_dense(
            rows in 1usize..9, cols in 1usize..9, d in 1usize..5,
            entries in proptest::collection::vec((0usize..8, 0usize..8, -3.0f64..3.0), 0..40),
            xs in proptest::collection::vec(-2.0f64..2.0, 64 * 4),
        ) {
            let t: Vec<_> = entries.into_iter().filter(|&(r, c, _)| r < rows && c < cols).collect();
            let a = SparseMatrix::from_triplets(rows, cols, t).unwrap();
            let x = DenseMatrix::from_vec(cols, d, xs[..cols * d].to_vec()).unwrap();
            let fast = spmm(&a, &x).unwrap();
            let slow = dense_mul(&a.to_dense(), &x);
            prop_assert!(fast.max_abs_diff(&slow) <= 1e-12);
        }

        #[test]
        fn random_walk_rows_sum_to_one(ds in random_graph()) {
            let a = build_bipartite_adjacency(&ds, Normalization::RandomWalk).unwrap();
            for r in 0..a.n_rows() {
                let (_, vals) = a.row(r);
                if !vals.is_empty() {
                    prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn csr_rows_strictly_increasing(ds in random_graph()) {
            let a = build_bipartite_adjacency(&ds, Normalization::Symmetric).unwrap();
            prop_assert_eq!(a.row_ptr()[a.n_rows()], a.nnz());
            for r in 0..a.n_rows() {
                let (cols, _) = a.row(r);
                prop_assert!(cols.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn normalized_spectral_radius_at_most_one() {
        let mut runner =
            proptest::test_runner::TestRunner::new(proptest::test_runner::Config { cases: 100, ..Default::default() });
        runner
            .run(&random_graph(), |ds| {
                for norm in [Normalization::RandomWalk, Normalization::Symmetric] {
                    let a = build_bipartite_adjacency(&ds, norm).unwrap();
                    let rho = spectral_radius_estimate(&a, 2000, 11).unwrap();
                    prop_assert!(rho <= 1.0 + 1e-6, "{norm}: {rho}");
                }
                Ok(())
            })
            .unwrap();
    }
}
