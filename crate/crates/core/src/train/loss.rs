//! BPR loss and its exact gradients with respect to final and layer-0
//! embeddings.

use crate::embed::{EmbeddingTable, MRowWorkspace, PropagatedEmbeddings};
use crate::spgraph::{PropagationSpec, SparseMatrix};
use crate::{dot, norm, sigmoid, softplus, Error, Result};

use super::Triplet;

/// `-ln σ(Δ) + λ·‖θ‖²` with `Δ = ⟨e_u, e_i⟩ - ⟨e_u, e_j⟩`.
pub fn bpr_loss(final_u: &[f64], final_i: &[f64], final_j: &[f64], l2: f64, param_sq_norm: f64) -> f64 {
    let delta = dot(final_u, final_i) - dot(final_u, final_j);
    softplus(-delta) + l2 * param_sq_norm
}

/// Rows of `M` for the three nodes of a triplet, as sorted `(node, weight)`
/// pairs. Row `x` holds `∂e_x / ∂e_y^(0)` for every `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletRows {
    pub nodes: [usize; 3],
    pub rows: [Vec<(usize, f64)>; 3],
}

impl TripletRows {
    pub fn new(
        adjacency: &SparseMatrix,
        spec: &PropagationSpec,
        n_users: usize,
        sample: &Triplet,
        workspace: &mut MRowWorkspace,
    ) -> Self {
        let nodes = [sample.user, n_users + sample.positive, n_users + sample.negative];
        let rows = nodes.map(|x| workspace.row(adjacency, spec, x));
        TripletRows { nodes, rows }
    }

    /// `M[x][y]` for `x` one of the triplet nodes (0 = user, 1 = positive,
    /// 2 = negative).
    pub fn weight(&self, which: usize, y: usize) -> f64 {
        let row = &self.rows[which];
        row.binary_search_by_key(&y, |&(c, _)| c).map_or(0.0, |k| row[k].1)
    }
}

/// Final embeddings of the three triplet nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletFinals {
    pub user: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl TripletFinals {
    pub fn from_propagated(p: &PropagatedEmbeddings, sample: &Triplet) -> Self {
        TripletFinals {
            user: p.user(sample.user).to_vec(),
            positive: p.item(sample.positive).to_vec(),
            negative: p.item(sample.negative).to_vec(),
        }
    }

    /// `e_x = Σ_y M_xy e_y^(0)` evaluated from the sparse rows.
    pub fn from_rows(table: &EmbeddingTable, rows: &TripletRows) -> Self {
        let d = table.dim();
        let combine = |row: &[(usize, f64)]| {
            let mut out = vec![0.0; d];
            for &(y, w) in row {
                for (o, v) in out.iter_mut().zip(table.node(y)) {
                    *o += w * v;
                }
            }
            out
        };
        TripletFinals {
            user: combine(&rows.rows[0]),
            positive: combine(&rows.rows[1]),
            negative: combine(&rows.rows[2]),
        }
    }

    pub fn delta(&self) -> f64 {
        dot(&self.user, &self.positive) - dot(&self.user, &self.negative)
    }
}

/// Sparse set of embedding rows, sorted by node index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRows {
    dim: usize,
    index: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn new(dim: usize) -> Self {
        SparseRows { dim, index: Vec::new(), values: Vec::new() }
    }

    /// Rows must be pushed in strictly increasing node order.
    pub fn push(&mut self, node: usize, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        debug_assert!(self.index.last().is_none_or(|&l| l < node));
        self.index.push(node);
        self.values.extend_from_slice(row);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, node: usize) -> Option<&[f64]> {
        self.index.binary_search(&node).ok().map(|k| &self.values[k * self.dim..(k + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.index.iter().copied().zip(self.values.chunks_exact(self.dim.max(1)))
    }

    pub fn nodes(&self) -> &[usize] {
        &self.index
    }
}

/// Gradients of the BPR term for one triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_final_user: Vec<f64>,
    pub d_final_positive: Vec<f64>,
    pub d_final_negative: Vec<f64>,
    /// `∂ℓ/∂e_y^(0) = Σ_{x∈{u,i,j}} M_xy ∂ℓ/∂e_x` for every reachable `y`.
    pub d_layer0: SparseRows,
    pub delta: f64,
    pub sigma_delta: f64,
}

/// Exact gradients of `ℓ = -ln σ(Δ)`. Regularization is not included; the
/// optimizer adds `2λe` at step time.
///
/// With `s = 1 - σ(Δ)`:
/// `∂ℓ/∂e_i = -s·e_u`, `∂ℓ/∂e_j = s·e_u`, `∂ℓ/∂e_u = s·(e_j - e_i)`.
pub fn bpr_gradients(finals: &TripletFinals, rows: &TripletRows) -> GradientBundle {
    let delta = finals.delta();
    let sigma_delta = sigmoid(delta);
    let s = 1.0 - sigma_delta;
    let d = finals.user.len();
    let d_user: Vec<f64> = finals.negative.iter().zip(&finals.positive).map(|(ej, ei)| s * (ej - ei)).collect();
    let d_pos: Vec<f64> = finals.user.iter().map(|eu| -s * eu).collect();
    let d_neg: Vec<f64> = finals.user.iter().map(|eu| s * eu).collect();
    let upstream = [&d_user, &d_pos, &d_neg];

    let mut d_layer0 = SparseRows::new(d);
    let mut cursor = [0usize; 3];
    let mut acc = vec![0.0; d];
    loop {
        let next = (0..3).filter_map(|k| rows.rows[k].get(cursor[k]).map(|&(y, _)| y)).min();
        let Some(y) = next else { break };
        acc.iter_mut().for_each(|a| *a = 0.0);
        for k in 0..3 {
            if let Some(&(c, w)) = rows.rows[k].get(cursor[k]) {
                if c == y {
                    for (a, g) in acc.iter_mut().zip(upstream[k]) {
                        *a += w * g;
                    }
                    cursor[k] += 1;
                }
            }
        }
        d_layer0.push(y, &acc);
    }
    GradientBundle {
        d_final_user: d_user,
        d_final_positive: d_pos,
        d_final_negative: d_neg,
        d_layer0,
        delta,
        sigma_delta,
    }
}

/// Geometry of the positive item's layer-0 gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientDiagnostics {
    /// Angle between the final user embedding and `e_i^(0)`.
    pub theta_ui: f64,
    /// `‖e_i‖ / ‖e_u‖` on final embeddings.
    pub rho_i: f64,
    /// Component of `∂ℓ/∂e_i^(0)` along `e_i^(0) / ‖e_i^(0)‖`.
    pub g_parallel: f64,
    /// The same component assembled from scalar summaries:
    /// `s·[M_ui·⟨e_j - e_i, ê⟩ - (M_ii - M_ji)·‖e_u‖·cos θ]`.
    pub g_parallel_closed_form: f64,
    pub m_ii: f64,
    pub m_ui: f64,
    pub m_ji: f64,
    pub user_norm: f64,
    pub sigma_delta: f64,
}

pub fn gradient_diagnostics(
    bundle: &GradientBundle,
    table: &EmbeddingTable,
    finals: &TripletFinals,
    rows: &TripletRows,
) -> Result<GradientDiagnostics> {
    let item_node = rows.nodes[1];
    let e0 = table.node(item_node);
    let user_norm = norm(&finals.user);
    let e0_norm = norm(e0);
    if user_norm == 0.0 || e0_norm == 0.0 {
        return Err(Error::Degenerate("zero-norm user or item embedding".into()));
    }
    let cos = (dot(&finals.user, e0) / (user_norm * e0_norm)).clamp(-1.0, 1.0);
    let g = bundle.d_layer0.get(item_node).map_or(0.0, |g| dot(g, e0) / e0_norm);

    let m_ii = rows.weight(1, item_node);
    let m_ui = rows.weight(0, item_node);
    let m_ji = rows.weight(2, item_node);
    let s = 1.0 - bundle.sigma_delta;
    let proj_gap = (dot(&finals.negative, e0) - dot(&finals.positive, e0)) / e0_norm;
    let closed = s * (m_ui * proj_gap - (m_ii - m_ji) * user_norm * cos);

    Ok(GradientDiagnostics {
        theta_ui: cos.acos(),
        rho_i: norm(&finals.positive) / user_norm,
        g_parallel: g,
        g_parallel_closed_form: closed,
        m_ii,
        m_ui,
        m_ji,
        user_norm,
        sigma_delta: bundle.sigma_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spgraph::DenseMatrix;

    const LN2: f64 = std::f64::consts::LN_2;

    fn identity_rows(u: usize, i: usize, j: usize) -> TripletRows {
        TripletRows { nodes: [u, i, j], rows: [vec![(u, 1.0)], vec![(i, 1.0)], vec![(j, 1.0)]] }
    }

    #[test]
    fn loss_values() {
        assert!((bpr_loss(&[0.0], &[1.0], &[1.0], 0.0, 0.0) - LN2).abs() < 1e-15);
        assert!((bpr_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], 0.0, 0.0) - 0.3132617).abs() < 1e-7);
        let big = bpr_loss(&[1.0], &[0.0], &[50.0], 0.0, 0.0);
        assert!((big - 50.0).abs() < 1e-12);
        assert!((bpr_loss(&[1.0], &[0.0], &[1000.0], 0.0, 0.0) - 1000.0).abs() < 1e-9);
        assert!((bpr_loss(&[0.0], &[0.0], &[0.0], 0.5, 2.0) - (LN2 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn identity_operator_gradient() {
        let finals = TripletFinals {
            user: vec![0.3, -1.2, 0.5],
            positive: vec![1.0, 0.4, -0.2],
            negative: vec![-0.7, 0.1, 0.9],
        };
        let b = bpr_gradients(&finals, &identity_rows(0, 1, 2));
        let s = 1.0 - sigmoid(finals.delta());
        let expected: Vec<f64> = finals.user.iter().map(|x| -s * x).collect();
        assert_eq!(b.d_layer0.get(1).unwrap(), expected.as_slice());
        for (a, c) in b.d_final_positive.iter().zip(&b.d_final_negative) {
            assert_eq!(a + c, 0.0);
        }
    }

    #[test]
    fn zero_user_zeroes_item_gradients() {
        let finals = TripletFinals { user: vec![0.0, 0.0], positive: vec![1.0, 2.0], negative: vec![-1.0, 3.0] };
        let b = bpr_gradients(&finals, &identity_rows(0, 1, 2));
        assert_eq!(b.sigma_delta, 0.5);
        assert!(b.d_final_positive.iter().all(|&x| x == 0.0));
        assert!(b.d_final_negative.iter().all(|&x| x == 0.0));
        assert!(b.d_layer0.get(1).unwrap().iter().all(|&x| x == 0.0));
        assert!(b.d_layer0.get(2).unwrap().iter().all(|&x| x == 0.0));
        // the user still receives s * (e_j - e_i)
        assert_eq!(b.d_layer0.get(0).unwrap(), &[-1.0, 0.5]);
    }

    fn l0_table(rows: &[Vec<f64>]) -> EmbeddingTable {
        EmbeddingTable::new(1, rows.len() - 1, DenseMatrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn diagnostics_orthogonal_is_zero() {
        let table = l0_table(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
        let rows = identity_rows(0, 1, 2);
        let finals = TripletFinals::from_rows(&table, &rows);
        let b = bpr_gradients(&finals, &rows);
        let d = gradient_diagnostics(&b, &table, &finals, &rows).unwrap();
        assert_eq!(d.g_parallel, 0.0);
        assert!((d.theta_ui - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn diagnostics_aligned_unit_vectors() {
        let table = l0_table(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]]);
        let rows = identity_rows(0, 1, 2);
        let finals = TripletFinals::from_rows(&table, &rows);
        let b = bpr_gradients(&finals, &rows);
        let d = gradient_diagnostics(&b, &table, &finals, &rows).unwrap();
        // gradient descent direction: the loss falls as e_i grows along e_u
        assert!((d.g_parallel + 0.2689414).abs() < 1e-7);
        assert!((d.g_parallel - d.g_parallel_closed_form).abs() < 1e-15);
        assert_eq!(d.rho_i, 1.0);
    }

    #[test]
    fn diagnostics_rejects_zero_norms() {
        let table = l0_table(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let rows = identity_rows(0, 1, 2);
        let finals = TripletFinals::from_rows(&table, &rows);
        let b = bpr_gradients(&finals, &rows);
        assert!(gradient_diagnostics(&b, &table, &finals, &rows).is_err());
    }
}
