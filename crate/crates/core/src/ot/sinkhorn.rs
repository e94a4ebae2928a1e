use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{check_weights, CostMatrix, Coupling};
use crate::error::{invalid, RaidError, Result};

/// Weights below this floor are raised to it (and renormalized) so their logs stay finite.
const WEIGHT_FLOOR: f64 = 1e-15;
/// Marginal accuracy demanded before an annealing stage hands over to a smaller epsilon.
const STAGE_TOL: f64 = 1e-3;
const STAGE_MAX_ITER: usize = 100;
/// Problems with at most this many rows plus columns get Newton steps when Sinkhorn alone runs out of budget.
const NEWTON_MAX_DIM: usize = 256;
const NEWTON_MAX_STEPS: usize = 50;

/// Entropic regularization strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    /// Multiple of the mean entry of the cost matrix.
    RelativeToMeanCost(f64),
    Absolute(f64),
}

impl Epsilon {
    pub fn resolve(self, c: &CostMatrix) -> f64 {
        match self {
            Epsilon::Absolute(e) => e,
            Epsilon::RelativeToMeanCost(r) => {
                let m = c.mean();
                if m > 0.0 {
                    r * m
                } else {
                    r
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: Epsilon,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: Epsilon::RelativeToMeanCost(1e-3),
            max_iter: 2000,
            tol: 1e-6,
        }
    }
}

/// Dual potentials `(f, g)` in cost units; the plan is `exp((f_i + g_j - C_ij) / eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPair {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
}

/// Entropy-regularized optimal coupling between `a` and `b` under cost `c`.
///
/// Iterates in the log domain with epsilon annealing: the regularization starts at
/// the largest cost and halves until it reaches the configured value, reusing the
/// potentials between stages. When `max_iter` runs out on a problem with at most 256
/// rows plus columns, up to 50 damped Newton steps on the dual follow. Running out is
/// not an error; the result carries `converged == false` instead.
pub fn sinkhorn(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    c: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<Coupling> {
    sinkhorn_warm(a, b, c, cfg, None).map(|(t, _)| t)
}

/// [`sinkhorn`] with optional starting potentials. A warm start skips annealing.
pub fn sinkhorn_warm(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    c: &CostMatrix,
    cfg: &SinkhornConfig,
    init: Option<&DualPair>,
) -> Result<(Coupling, DualPair)> {
    check_weights(a, "row")?;
    check_weights(b, "column")?;
    let (n, m) = c.dim();
    if a.len() != n {
        return Err(RaidError::DimensionMismatch {
            expected: n,
            found: a.len(),
        });
    }
    if b.len() != m {
        return Err(RaidError::DimensionMismatch {
            expected: m,
            found: b.len(),
        });
    }
    if !(cfg.tol > 0.0) {
        return Err(invalid("sinkhorn tol must be positive"));
    }
    let eps = cfg.epsilon.resolve(c);
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid(format!("sinkhorn epsilon must be positive, got {eps}")));
    }

    let a = floor_weights(a);
    let b = floor_weights(b);
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();

    let cost = c.view();
    let cost_rows: Vec<f64> = cost.iter().copied().collect();
    let cost_cols: Vec<f64> = cost.t().iter().copied().collect();

    let (mut f, mut g) = match init {
        Some(p) if p.f.len() == n && p.g.len() == m => (p.f.to_vec(), p.g.to_vec()),
        _ => (vec![0.0; n], vec![0.0; m]),
    };

    let mut schedule = Vec::new();
    if init.is_none() {
        let mut e = c.max();
        while e > eps * 2.0 {
            schedule.push(e);
            e *= 0.5;
        }
    }
    schedule.push(eps);

    let mut iterations = 0usize;
    let mut converged = false;
    let last = schedule.len() - 1;
    let mut scratch = vec![0.0; n.max(m)];
    for (stage, &e) in schedule.iter().enumerate() {
        let final_stage = stage == last;
        let (stage_tol, stage_cap) = if final_stage {
            (cfg.tol, usize::MAX)
        } else {
            (STAGE_TOL.max(cfg.tol), STAGE_MAX_ITER)
        };
        // Bring g in line with f at this epsilon so the row check below is meaningful.
        update_potential(&mut g, &f, &cost_cols, &log_b, e, n, &mut scratch);
        let mut stage_iter = 0usize;
        loop {
            if iterations >= cfg.max_iter {
                break;
            }
            let violation = update_potential(&mut f, &g, &cost_rows, &log_a, e, m, &mut scratch);
            iterations += 1;
            stage_iter += 1;
            update_potential(&mut g, &f, &cost_cols, &log_b, e, n, &mut scratch);
            if violation < stage_tol {
                if final_stage {
                    converged = true;
                }
                break;
            }
            if stage_iter >= stage_cap {
                break;
            }
        }
        if iterations >= cfg.max_iter && !converged {
            // The budget ran out mid-schedule; finish on the target epsilon.
            if !final_stage {
                update_potential(&mut f, &g, &cost_rows, &log_a, eps, m, &mut scratch);
                update_potential(&mut g, &f, &cost_cols, &log_b, eps, n, &mut scratch);
            }
            break;
        }
    }

    if !converged && n + m <= NEWTON_MAX_DIM {
        let problem = Dual {
            cost_rows: &cost_rows,
            a: &a,
            b: &b,
            eps,
            n,
            m,
        };
        for _ in 0..NEWTON_MAX_STEPS {
            problem.newton_step(&mut f, &mut g);
            let violation = update_potential(&mut f, &g, &cost_rows, &log_a, eps, m, &mut scratch);
            update_potential(&mut g, &f, &cost_cols, &log_b, eps, n, &mut scratch);
            iterations += 1;
            if violation < cfg.tol {
                converged = true;
                break;
            }
        }
    }

    let mut plan = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            plan[[i, j]] = ((f[i] + g[j] - cost_rows[i * m + j]) / eps).exp();
        }
    }
    let coupling = Coupling {
        plan,
        row_marginal: a,
        col_marginal: b,
        converged,
        iterations,
    };
    // The final column update makes columns exact; recheck rows against the returned plan.
    let converged = converged && coupling.marginal_violation() < cfg.tol;
    Ok((
        Coupling {
            converged,
            ..coupling
        },
        DualPair {
            f: Array1::from(f),
            g: Array1::from(g),
        },
    ))
}

/// Replaces `target` with its soft c-transform against `other` and returns the largest
/// marginal violation of the previous `target` (the plan's sums along this axis before the update).
fn update_potential(
    target: &mut [f64],
    other: &[f64],
    cost: &[f64],
    log_w: &[f64],
    eps: f64,
    width: usize,
    scratch: &mut [f64],
) -> f64 {
    let mut violation: f64 = 0.0;
    let scratch = &mut scratch[..width];
    for (i, t) in target.iter_mut().enumerate() {
        let row = &cost[i * width..(i + 1) * width];
        let mut mx = f64::NEG_INFINITY;
        for ((s, &o), &cij) in scratch.iter_mut().zip(other).zip(row) {
            *s = (o - cij) / eps;
            mx = mx.max(*s);
        }
        let sum: f64 = scratch.iter().map(|s| (s - mx).exp()).sum();
        let lse = mx + sum.ln();
        let current = (*t / eps + lse).exp();
        violation = violation.max((current - log_w[i].exp()).abs());
        *t = eps * (log_w[i] - lse);
    }
    violation
}

/// Entropic transport problem in dual form; the plan is `exp((f_i + g_j - C_ij) / eps)`.
struct Dual<'a> {
    cost_rows: &'a [f64],
    a: &'a Array1<f64>,
    b: &'a Array1<f64>,
    eps: f64,
    n: usize,
    m: usize,
}

impl Dual<'_> {
    fn plan(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n * self.m);
        for (i, fi) in f.iter().enumerate() {
            let row = &self.cost_rows[i * self.m..(i + 1) * self.m];
            p.extend(g.iter().zip(row).map(|(gj, c)| ((fi + gj - c) / self.eps).exp()));
        }
        p
    }

    /// One damped Newton step on the dual. The Hessian
    /// `[[diag(P1), P], [P^T, diag(P^T 1)]] / eps` is singular along `(1, -1)`, so a tiny
    /// ridge keeps the factorization defined.
    fn newton_step(&self, f: &mut [f64], g: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        let p = self.plan(f, g);
        let rows: Vec<f64> = (0..n).map(|i| p[i * m..(i + 1) * m].iter().sum()).collect();
        let cols: Vec<f64> = (0..m).map(|j| (0..n).map(|i| p[i * m + j]).sum()).collect();
        let grad: Vec<f64> = self
            .a
            .iter()
            .zip(&rows)
            .map(|(x, r)| x - r)
            .chain(self.b.iter().zip(&cols).map(|(x, c)| x - c))
            .collect();

        let dim = n + m;
        let mut h = vec![0.0; dim * dim];
        for i in 0..n {
            h[i * dim + i] = rows[i] / self.eps;
            for j in 0..m {
                let v = p[i * m + j] / self.eps;
                h[i * dim + n + j] = v;
                h[(n + j) * dim + i] = v;
            }
        }
        for j in 0..m {
            h[(n + j) * dim + n + j] = cols[j] / self.eps;
        }
        let ridge = 1e-12 * (0..dim).map(|k| h[k * dim + k]).fold(0.0, f64::max);
        for k in 0..dim {
            h[k * dim + k] += ridge;
        }
        let Some(x) = cholesky_solve(&mut h, &grad, dim) else {
            return;
        };
        if !x.iter().all(|v| v.is_finite()) {
            return;
        }
        // backtrack on the marginal residual
        let base = self.residual(f, g);
        let mut t = 1.0;
        while t > 1e-10 {
            let tf: Vec<f64> = f.iter().zip(&x[..n]).map(|(v, dv)| v + t * dv).collect();
            let tg: Vec<f64> = g.iter().zip(&x[n..]).map(|(v, dv)| v + t * dv).collect();
            let res = self.residual(&tf, &tg);
            if res < base {
                f.copy_from_slice(&tf);
                g.copy_from_slice(&tg);
                return;
            }
            t *= 0.5;
        }
    }

    /// `|a - P 1|_1 + |b - P^T 1|_1`.
    fn residual(&self, f: &[f64], g: &[f64]) -> f64 {
        let p = self.plan(f, g);
        let (n, m) = (self.n, self.m);
        let rows: f64 = (0..n)
            .map(|i| (self.a[i] - p[i * m..(i + 1) * m].iter().sum::<f64>()).abs())
            .sum();
        let cols: f64 = (0..m)
            .map(|j| (self.b[j] - (0..n).map(|i| p[i * m + j]).sum::<f64>()).abs())
            .sum();
        if rows.is_finite() && cols.is_finite() {
            rows + cols
        } else {
            f64::INFINITY
        }
    }
}

/// Solves `A x = b` for symmetric positive definite row-major `A`, overwriting `A`.
fn cholesky_solve(a: &mut [f64], b: &[f64], dim: usize) -> Option<Vec<f64>> {
    for j in 0..dim {
        let mut d = a[j * dim + j];
        for k in 0..j {
            d -= a[j * dim + k] * a[j * dim + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * dim + j] = d;
        for i in j + 1..dim {
            let mut v = a[i * dim + j];
            for k in 0..j {
                v -= a[i * dim + k] * a[j * dim + k];
            }
            a[i * dim + j] = v / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..dim {
        for k in 0..i {
            y[i] -= a[i * dim + k] * y[k];
        }
        y[i] /= a[i * dim + i];
    }
    for i in (0..dim).rev() {
        for k in i + 1..dim {
            y[i] -= a[k * dim + i] * y[k];
        }
        y[i] /= a[i * dim + i];
    }
    Some(y)
}

fn floor_weights(w: ArrayView1<'_, f64>) -> Array1<f64> {
    if w.iter().all(|&x| x >= WEIGHT_FLOOR) {
        return w.to_owned();
    }
    let raised = w.mapv(|x| x.max(WEIGHT_FLOOR));
    let s = raised.sum();
    raised / s
}
