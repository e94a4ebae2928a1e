//! Discrete optimal transport with squared Euclidean ground cost.
//!
//! [`sinkhorn`] solves the entropy-regularized problem in the log domain;
//! [`exact_ot_oracle`] solves the unregularized linear program for small
//! instances and is used to check the former.

mod exact;
mod sinkhorn;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, RaidError, Result};

pub use exact::{exact_ot_oracle, EXACT_MAX_CELLS};
pub use sinkhorn::{sinkhorn, sinkhorn_warm, DualPair, Epsilon, SinkhornConfig};

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// A discrete probability measure: atoms in R^d with nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    atoms: Array2<f64>,
    weights: Array1<f64>,
}

impl Histogram {
    pub fn new(atoms: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        let (n, d) = atoms.dim();
        if n == 0 || d == 0 {
            return Err(invalid("histogram needs at least one atom of dimension >= 1"));
        }
        if weights.len() != n {
            return Err(RaidError::DimensionMismatch {
                expected: n,
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("histogram weights must be finite and nonnegative"));
        }
        if atoms.iter().any(|x| !x.is_finite()) {
            return Err(invalid("histogram atoms must be finite"));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(invalid(format!("histogram weights sum to {total}, not 1")));
        }
        Ok(Self { atoms, weights })
    }

    /// Empirical measure with mass 1/n on every row of `atoms`.
    pub fn uniform(atoms: Array2<f64>) -> Result<Self> {
        let n = atoms.nrows();
        if n == 0 {
            return Err(invalid("histogram needs at least one atom"));
        }
        Self::new(atoms, Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        let atoms = Array2::from_shape_vec((1, point.len()), point.to_vec())
            .map_err(|e| invalid(e.to_string()))?;
        Self::new(atoms, Array1::from_elem(1, 1.0))
    }

    pub fn atoms(&self) -> ArrayView2<'_, f64> {
        self.atoms.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn len(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.atoms.ncols()
    }
}

/// Pairwise squared Euclidean costs `||x_i - y_j||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    /// Wraps an arbitrary nonnegative cost table.
    pub fn from_array(entries: Array2<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("cost matrix is empty"));
        }
        if entries.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(invalid("cost entries must be finite and nonnegative"));
        }
        Ok(Self(entries))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(0.0, f64::max)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

pub fn cost_matrix(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<CostMatrix> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(invalid("cost_matrix needs nonempty atom sets"));
    }
    if x.ncols() != y.ncols() {
        return Err(RaidError::DimensionMismatch {
            expected: x.ncols(),
            found: y.ncols(),
        });
    }
    let mut c = Array2::zeros((x.nrows(), y.nrows()));
    for (i, xi) in x.axis_iter(Axis(0)).enumerate() {
        for (j, yj) in y.axis_iter(Axis(0)).enumerate() {
            c[[i, j]] = squared_distance(xi, yj);
        }
    }
    Ok(CostMatrix(c))
}

pub(crate) fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// A transport plan together with the marginals it was solved for.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub plan: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    /// False when Sinkhorn hit `max_iter` before reaching `tol`.
    pub converged: bool,
    pub iterations: usize,
}

impl Coupling {
    /// Largest absolute deviation of the plan's row and column sums from the target marginals.
    pub fn marginal_violation(&self) -> f64 {
        let rows = self.plan.sum_axis(Axis(1));
        let cols = self.plan.sum_axis(Axis(0));
        let r = rows
            .iter()
            .zip(self.row_marginal.iter())
            .map(|(s, a)| (s - a).abs())
            .fold(0.0, f64::max);
        let c = cols
            .iter()
            .zip(self.col_marginal.iter())
            .map(|(s, b)| (s - b).abs())
            .fold(0.0, f64::max);
        r.max(c)
    }

    /// Projects the plan onto its target marginals (Altschuler, Weed and Rigollet, 2017).
    ///
    /// Rows and columns are first scaled down to at most their targets, then the
    /// leftover mass is spread as a rank-one correction. The L1 change is bounded by
    /// a multiple of the L1 marginal violation.
    pub fn round_to_marginals(&mut self) {
        let rows = self.plan.sum_axis(Axis(1));
        for (mut row, (&s, &a)) in self.plan.rows_mut().into_iter().zip(rows.iter().zip(&self.row_marginal)) {
            if s > a {
                row *= a / s;
            }
        }
        let cols = self.plan.sum_axis(Axis(0));
        for (mut col, (&s, &b)) in self.plan.columns_mut().into_iter().zip(cols.iter().zip(&self.col_marginal)) {
            if s > b {
                col *= b / s;
            }
        }
        let err_r = &self.row_marginal - &self.plan.sum_axis(Axis(1));
        let err_c = &self.col_marginal - &self.plan.sum_axis(Axis(0));
        let mass = err_r.sum();
        if mass > 0.0 {
            for ((i, j), t) in self.plan.indexed_iter_mut() {
                *t += err_r[i] * err_c[j] / mass;
            }
        }
    }

    /// `<T, C>`.
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        (&self.plan * &c.0).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum W2Method {
    Sinkhorn(SinkhornConfig),
    Exact,
}

impl Default for W2Method {
    fn default() -> Self {
        W2Method::Sinkhorn(SinkhornConfig::default())
    }
}

/// A transport cost with the solver's convergence status attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportCost {
    pub value: f64,
    pub converged: bool,
}

/// Squared 2-Wasserstein distance between two histograms.
pub fn w2_squared(p: &Histogram, q: &Histogram, method: W2Method) -> Result<TransportCost> {
    let c = cost_matrix(p.atoms(), q.atoms())?;
    match method {
        W2Method::Exact => {
            let (_, value) = exact_ot_oracle(p.weights(), q.weights(), &c)?;
            Ok(TransportCost {
                value: value.max(0.0),
                converged: true,
            })
        }
        W2Method::Sinkhorn(cfg) => {
            let t = sinkhorn(p.weights(), q.weights(), &c, &cfg)?;
            Ok(TransportCost {
                value: t.cost(&c).max(0.0),
                converged: t.converged,
            })
        }
    }
}

pub(crate) fn check_weights(w: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(invalid(format!("{what} weights are empty")));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(invalid(format!("{what} weights must be finite and nonnegative")));
    }
    let s = w.sum();
    if (s - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(invalid(format!("{what} weights sum to {s}, not 1")));
    }
    Ok(())
}
