//! Mixing matrices for neighbor averaging.

use super::{FedError, Result, Topology};

/// Row-stochastic `n x n` weights together with the in-neighbor sets they
/// were built for (self excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMatrix {
    n: usize,
    a: Vec<f64>,
    in_neighbors: Vec<Vec<usize>>,
}

impl ConsensusMatrix {
    /// Checks support against `in_neighbors` and that rows sum to one.
    pub fn new(a: Vec<Vec<f64>>, in_neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = a.len();
        if in_neighbors.len() != n || a.iter().any(|r| r.len() != n) {
            return Err(FedError::Consensus(format!("matrix must be {n}x{n} with {n} neighbor sets")));
        }
        for (i, row) in a.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if !w.is_finite() || w < 0.0 {
                    return Err(FedError::Consensus(format!("a[{i}][{j}] = {w} is not a finite non-negative weight")));
                }
                if w > 0.0 && j != i && !in_neighbors[i].contains(&j) {
                    return Err(FedError::Consensus(format!("a[{i}][{j}] > 0 but {j} is not an in-neighbor of {i}")));
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(FedError::Consensus(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { n, a: a.concat(), in_neighbors })
    }

    /// All entries `1/n` over the complete graph.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(FedError::Consensus("empty matrix".into()));
        }
        let w = 1.0 / n as f64;
        let nb = (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect();
        Ok(Self { n, a: vec![w; n * n], in_neighbors: nb })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    pub fn max_row_residual(&self) -> f64 {
        (0..self.n).map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn max_col_residual(&self) -> f64 {
        (0..self.n).map(|j| ((0..self.n).map(|i| self.get(i, j)).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Metropolis weights on a symmetric topology: `1 / (1 + max(deg_i, deg_j))`
/// per edge, remainder on the diagonal. Asymmetric input is rejected when the
/// topology is strict and symmetrized otherwise.
pub fn metropolis_weights(t: &Topology) -> Result<ConsensusMatrix> {
    let t = if t.is_symmetric() {
        t.clone()
    } else if t.strict {
        return Err(FedError::Consensus(format!("topology {} is not symmetric", t.name)));
    } else {
        t.symmetrized()
    };
    let n = t.n_silos;
    let nb: Vec<Vec<usize>> = (0..n).map(|i| t.in_neighbors(i)).collect();
    let deg: Vec<usize> = nb.iter().map(Vec::len).collect();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for &j in &nb[i] {
            a[i][j] = 1.0 / (1 + deg[i].max(deg[j])) as f64;
        }
        let off: f64 = a[i].iter().sum();
        a[i][i] = 1.0 - off;
    }
    ConsensusMatrix::new(a, nb)
}
