//! Cyber graph among DER agents and the Laplacian spectral quantities that
//! bound the tolerable communication delay.
//!
//! The Laplacian is `L = D_in - A` with `d_j = sum_m a_jm`. For a fixed,
//! undirected, connected graph a uniform delay `tau` keeps consensus stable
//! iff `0 < tau < pi / (2 * lambda_max(L))`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::GraphError;

const SYMMETRY_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const POWER_MAX_ITERS: usize = 10_000;

/// Weighted adjacency among `n` agents. `weights[j][m]` is `a_jm`, the weight
/// of information flowing from agent `m` into agent `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyberGraph {
    weights: Vec<Vec<f64>>,
}

/// Spectral summary of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianReport {
    pub laplacian: Vec<Vec<f64>>,
    pub lambda_max: f64,
    pub delay_bound_s: f64,
    /// False for directed graphs, where the bound is computed but not
    /// guaranteed and `lambda_max` comes from the less accurate power route.
    pub bound_exact: bool,
}

impl CyberGraph {
    /// Validates and wraps an explicit weight matrix.
    pub fn from_weights(weights: Vec<Vec<f64>>) -> Result<Self, GraphError> {
        let n = weights.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        for (j, row) in weights.iter().enumerate() {
            if row.len() != n {
                return Err(GraphError::NotSquare {
                    row: j,
                    len: row.len(),
                    n,
                });
            }
            for (m, &w) in row.iter().enumerate() {
                if !w.is_finite() || w < 0.0 {
                    return Err(GraphError::BadWeight { j, m, w });
                }
                if j == m && w != 0.0 {
                    return Err(GraphError::SelfEdge(j));
                }
            }
        }
        Ok(Self { weights })
    }

    /// Undirected ring `0 - 1 - ... - (n-1) - 0` with weight `w`.
    pub fn ring(n: usize, w: f64) -> Result<Self, GraphError> {
        let mut a = vec![vec![0.0; n]; n];
        if n == 2 {
            a[0][1] = w;
            a[1][0] = w;
        } else if n > 2 {
            for j in 0..n {
                let next = (j + 1) % n;
                a[j][next] = w;
                a[next][j] = w;
            }
        }
        Self::from_weights(a)
    }

    /// Fully connected graph with weight `w` on every edge.
    pub fn complete(n: usize, w: f64) -> Result<Self, GraphError> {
        let a = (0..n)
            .map(|j| (0..n).map(|m| if j == m { 0.0 } else { w }).collect())
            .collect();
        Self::from_weights(a)
    }

    /// Undirected path `0 - 1 - ... - (n-1)`.
    pub fn line(n: usize, w: f64) -> Result<Self, GraphError> {
        let mut a = vec![vec![0.0; n]; n];
        for j in 1..n {
            a[j - 1][j] = w;
            a[j][j - 1] = w;
        }
        Self::from_weights(a)
    }

    /// Builds a preset by name: `ring`, `complete` or `line`.
    pub fn preset(name: &str, n: usize, w: f64) -> Result<Self, GraphError> {
        match name {
            "ring" => Self::ring(n, w),
            "complete" => Self::complete(n, w),
            "line" | "path" => Self::line(n, w),
            other => Err(GraphError::UnknownPreset(other.to_string())),
        }
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn weight(&self, j: usize, m: usize) -> f64 {
        self.weights[j][m]
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.n();
        (0..n).all(|j| (0..j).all(|m| (self.weights[j][m] - self.weights[m][j]).abs() <= SYMMETRY_TOL))
    }

    pub fn edge_count(&self) -> usize {
        self.weights
            .iter()
            .map(|r| r.iter().filter(|&&w| w > 0.0).count())
            .sum()
    }

    /// Neighbors of `j` (agents it receives from) in ascending order.
    pub fn neighbors(&self, j: usize) -> Result<Vec<(usize, f64)>, GraphError> {
        let row = self.weights.get(j).ok_or(GraphError::IndexOutOfRange {
            index: j,
            n: self.n(),
        })?;
        Ok(row
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(m, &w)| (m, w))
            .collect())
    }

    /// `L = D_in - A`.
    pub fn laplacian(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut l = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut deg = 0.0;
            for m in 0..n {
                if m != j {
                    l[j][m] = -self.weights[j][m];
                    deg += self.weights[j][m];
                }
            }
            l[j][j] = deg;
        }
        l
    }

    pub fn laplacian_report(&self) -> Result<LaplacianReport, GraphError> {
        let laplacian = self.laplacian();
        let symmetric = self.is_symmetric();
        let lambda_max = if symmetric {
            symmetric_eigenvalues(&laplacian)
                .into_iter()
                .fold(0.0_f64, f64::max)
        } else {
            spectral_radius_estimate(&laplacian)
        };
        if lambda_max <= 0.0 {
            return Err(GraphError::NoEdges);
        }
        Ok(LaplacianReport {
            laplacian,
            lambda_max,
            delay_bound_s: PI / (2.0 * lambda_max),
            bound_exact: symmetric,
        })
    }

    /// Same graph with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self, GraphError> {
        Self::from_weights(
            self.weights
                .iter()
                .map(|r| r.iter().map(|w| w * c).collect())
                .collect(),
        )
    }
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(matrix: &[Vec<f64>]) -> Vec<f64> {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let scale: f64 = a
        .iter()
        .flat_map(|r| r.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if scale == 0.0 {
        return vec![0.0; n];
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Largest-magnitude eigenvalue estimate for a non-symmetric matrix, taken as
/// the square root of the dominant eigenvalue of `MᵀM` (an upper bound on the
/// spectral radius that is exact for normal matrices).
fn spectral_radius_estimate(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut mtm = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            mtm[i][j] = (0..n).map(|k| m[k][i] * m[k][j]).sum();
        }
    }
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let y: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|k| mtm[i][k] * x[k]).sum())
            .collect();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm / x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x = y.into_iter().map(|v| v / norm).collect();
        if (next - lambda).abs() <= 1e-13 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn neighbors_of_small_graphs() {
        let g = CyberGraph::complete(2, 1.0).unwrap();
        assert_eq!(g.neighbors(0).unwrap(), vec![(1, 1.0)]);

        let ring = CyberGraph::ring(7, 1.0).unwrap();
        assert_eq!(ring.neighbors(3).unwrap(), vec![(2, 1.0), (4, 1.0)]);

        let isolated =
            CyberGraph::from_weights(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(isolated.neighbors(0).unwrap().is_empty());
        assert!(matches!(
            ring.neighbors(7),
            Err(GraphError::IndexOutOfRange { index: 7, n: 7 })
        ));
    }

    #[test]
    fn rejects_invalid_weights() {
        assert!(matches!(
            CyberGraph::from_weights(vec![]),
            Err(GraphError::Empty)
        ));
        assert!(matches!(
            CyberGraph::from_weights(vec![vec![1.0]]),
            Err(GraphError::SelfEdge(0))
        ));
        assert!(CyberGraph::from_weights(vec![vec![0.0, -1.0], vec![1.0, 0.0]]).is_err());
        assert!(CyberGraph::from_weights(vec![vec![0.0, 1.0]]).is_err());
        assert!(CyberGraph::preset("star", 3, 1.0).is_err());
    }

    #[test]
    fn two_node_path() {
        let g = CyberGraph::line(2, 1.0).unwrap();
        let r = g.laplacian_report().unwrap();
        assert_eq!(r.laplacian, vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
        assert_relative_eq!(r.lambda_max, 2.0, max_relative = 1e-12);
        assert_relative_eq!(r.delay_bound_s, PI / 4.0, max_relative = 1e-12);
        assert!(r.bound_exact);
    }

    #[test]
    fn edgeless_graph_has_no_bound() {
        let g = CyberGraph::from_weights(vec![vec![0.0; 3]; 3]).unwrap();
        assert!(matches!(g.laplacian_report(), Err(GraphError::NoEdges)));
        let single = CyberGraph::from_weights(vec![vec![0.0]]).unwrap();
        assert!(single.laplacian_report().is_err());
    }

    #[test]
    fn directed_graph_is_advisory() {
        // 0 -> 1 -> 2 -> 0 directed cycle: eigenvalues 1 - e^{2 pi i k / 3}, |.|max = sqrt(3)
        let g = CyberGraph::from_weights(vec![
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let r = g.laplacian_report().unwrap();
        assert!(!r.bound_exact);
        // circulant, hence normal: the singular-value route is exact here
        assert_relative_eq!(r.lambda_max, 3f64.sqrt(), max_relative = 1e-9);
    }
}
