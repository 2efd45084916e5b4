use crate::embed::EmbeddingTable;
use crate::spgraph::DenseMatrix;
use crate::{Error, Result};

use super::SparseRows;

/// `e ← e - η (g + 2λe)` on every row present in `grad`. Rows absent from
/// `grad` are left alone, including their regularization. The table is not
/// modified if any updated value would be non-finite.
pub fn sgd_step(table: &mut EmbeddingTable, grad: &SparseRows, lr: f64, l2: f64) -> Result<()> {
    let mut staged = Vec::with_capacity(grad.len() * grad.dim());
    for (node, g) in grad.iter() {
        for (e, gv) in table.node(node).iter().zip(g) {
            let v = e - lr * (gv + 2.0 * l2 * e);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("sgd update of node {node}")));
            }
            staged.push(v);
        }
    }
    let d = grad.dim();
    for (k, &node) in grad.nodes().iter().enumerate() {
        table.node_mut(node).copy_from_slice(&staged[k * d..(k + 1) * d]);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, l2: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for every table entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: DenseMatrix,
    v: DenseMatrix,
    step: u64,
}

impl AdamState {
    pub fn new(table: &EmbeddingTable) -> Self {
        AdamState {
            m: DenseMatrix::zeros(table.n_nodes(), table.dim()),
            v: DenseMatrix::zeros(table.n_nodes(), table.dim()),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam over the whole table. The raw gradient of a row in
/// `grad` is `g + 2λe`; rows not in `grad` see a zero gradient but keep
/// moving with their accumulated momentum.
pub fn adam_step(
    table: &mut EmbeddingTable,
    grad: &SparseRows,
    config: &AdamConfig,
    state: &mut AdamState,
) -> Result<()> {
    if state.m.rows() != table.n_nodes() || state.m.cols() != table.dim() {
        return Err(Error::Shape("adam state does not match the embedding table".into()));
    }
    let d = table.dim();
    let mut raw = DenseMatrix::zeros(table.n_nodes(), d);
    for (node, g) in grad.iter() {
        for ((r, gv), e) in raw.row_mut(node).iter_mut().zip(g).zip(table.node(node)) {
            *r = gv + 2.0 * config.l2 * e;
        }
    }
    let t = state.step + 1;
    let bc1 = 1.0 - config.beta1.powf(t as f64);
    let bc2 = 1.0 - config.beta2.powf(t as f64);
    let mut next = table.matrix().clone();
    let params = next.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (k, &g) in raw.as_slice().iter().enumerate() {
        m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g;
        v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g;
        let update = config.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + config.eps);
        params[k] -= update;
        if !params[k].is_finite() {
            return Err(Error::NonFinite(format!("adam update of node {}", k / d)));
        }
    }
    state.step = t;
    *table.matrix_mut() = next;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm;

    fn table(rows: &[Vec<f64>]) -> EmbeddingTable {
        EmbeddingTable::new(1, rows.len() - 1, DenseMatrix::from_rows(rows).unwrap()).unwrap()
    }

    fn grad(dim: usize, rows: &[(usize, Vec<f64>)]) -> SparseRows {
        let mut g = SparseRows::new(dim);
        for (n, r) in rows {
            g.push(*n, r);
        }
        g
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut t = table(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let before = t.clone();
        sgd_step(&mut t, &grad(2, &[(0, vec![0.0, 0.0]), (1, vec![0.0, 0.0])]), 0.1, 0.0).unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn decay_factor() {
        let mut t = table(&[vec![1.0, 0.0], vec![3.0, 3.0]]);
        sgd_step(&mut t, &grad(2, &[(0, vec![0.0, 0.0])]), 0.1, 0.5).unwrap();
        assert!((t.node(0)[0] - 0.9).abs() < 1e-15);
        assert_eq!(t.node(0)[1], 0.0);
        // untouched rows keep their values
        assert_eq!(t.node(1), &[3.0, 3.0]);
    }

    #[test]
    fn norm_change_is_first_order() {
        let lr = 1e-2;
        let l2 = 0.3;
        let e = vec![0.6, -0.8];
        let g = vec![0.5, 0.7];
        let mut t = table(&[e.clone(), vec![0.0, 0.0]]);
        sgd_step(&mut t, &grad(2, &[(0, g.clone())]), lr, l2).unwrap();
        let g_par = crate::dot(&g, &e) / norm(&e);
        let predicted = -lr * g_par - 2.0 * lr * l2 * norm(&e);
        let realized = norm(t.node(0)) - norm(&e);
        assert!((realized - predicted).abs() <= 10.0 * lr * lr);
    }

    #[test]
    fn non_finite_update_aborts() {
        let mut t = table(&[vec![1.0], vec![1.0]]);
        let before = t.clone();
        let err = sgd_step(&mut t, &grad(1, &[(0, vec![0.0]), (1, vec![f64::INFINITY])]), 0.1, 0.0);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(t, before);
    }

    #[test]
    fn adam_zero_gradients() {
        let mut t = table(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let before = t.clone();
        let mut state = AdamState::new(&t);
        for _ in 0..5 {
            adam_step(&mut t, &grad(2, &[(1, vec![0.0, 0.0])]), &AdamConfig::default(), &mut state).unwrap();
        }
        assert_eq!(t, before);
        assert_eq!(state.steps(), 5);
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let mut t = table(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut state = AdamState::new(&t);
        adam_step(&mut t, &grad(3, &[(0, vec![4.0, -0.001, 0.0])]), &cfg, &mut state).unwrap();
        let moved: Vec<f64> = t.node(0).iter().zip([1.0, 2.0, 3.0]).map(|(a, b)| a - b).collect();
        assert!((moved[0] + 0.01).abs() < 1e-8);
        assert!((moved[1] - 0.01).abs() < 1e-6);
        assert_eq!(moved[2], 0.0);
    }

    #[test]
    fn adam_is_deterministic() {
        let g = grad(2, &[(0, vec![0.3, -0.2]), (1, vec![1.0, 0.1])]);
        let cfg = AdamConfig { lr: 0.05, l2: 0.01, ..Default::default() };
        let run = || {
            let mut t = table(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
            let mut s = AdamState::new(&t);
            adam_step(&mut t, &g, &cfg, &mut s).unwrap();
            adam_step(&mut t, &g, &cfg, &mut s).unwrap();
            (t, s)
        };
        assert_eq!(run(), run());
    }
}
