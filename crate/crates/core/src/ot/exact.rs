use ndarray::{Array2, ArrayView1};

use super::{check_weights, CostMatrix, Coupling};
use crate::error::{invalid, RaidError, Result};

/// Largest `n * m` accepted by [`exact_ot_oracle`].
pub const EXACT_MAX_CELLS: usize = 64;

const PIVOT_EPS: f64 = 1e-12;

/// Exact minimizer of `<T, C>` over couplings of `a` and `b`.
///
/// Solves the transportation linear program with a dense two-phase simplex
/// (Bland's rule, so degenerate instances terminate). Desk-scale only.
pub fn exact_ot_oracle(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    c: &CostMatrix,
) -> Result<(Coupling, f64)> {
    check_weights(a, "row")?;
    check_weights(b, "column")?;
    let (n, m) = c.dim();
    if a.len() != n || b.len() != m {
        return Err(RaidError::DimensionMismatch {
            expected: n * m,
            found: a.len() * b.len(),
        });
    }
    if n * m > EXACT_MAX_CELLS {
        return Err(RaidError::TooLarge {
            rows: n,
            cols: m,
            limit: EXACT_MAX_CELLS,
        });
    }

    // Row constraints for every source, column constraints for all but the last sink
    // (the last one is implied by total mass).
    let vars = n * m;
    let mut rows = Vec::with_capacity(n + m - 1);
    let mut rhs = Vec::with_capacity(n + m - 1);
    for i in 0..n {
        let mut r = vec![0.0; vars];
        for j in 0..m {
            r[i * m + j] = 1.0;
        }
        rows.push(r);
        rhs.push(a[i]);
    }
    for j in 0..m.saturating_sub(1) {
        let mut r = vec![0.0; vars];
        for i in 0..n {
            r[i * m + j] = 1.0;
        }
        rows.push(r);
        rhs.push(b[j]);
    }
    let costs: Vec<f64> = c.view().iter().copied().collect();
    let x = simplex_min(rows, rhs, &costs)?;

    let mut plan = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            plan[[i, j]] = x[i * m + j].max(0.0);
        }
    }
    let value = (&plan * &c.view()).sum();
    Ok((
        Coupling {
            plan,
            row_marginal: a.to_owned(),
            col_marginal: b.to_owned(),
            converged: true,
            iterations: 0,
        },
        value,
    ))
}

/// min c·x subject to A x = rhs, x >= 0, with rhs >= 0.
fn simplex_min(a: Vec<Vec<f64>>, rhs: Vec<f64>, c: &[f64]) -> Result<Vec<f64>> {
    let rows = a.len();
    let vars = c.len();
    // Columns: original vars, then one artificial per row, then the right-hand side.
    let width = vars + rows + 1;
    let rhs_col = width - 1;
    let mut t = vec![vec![0.0; width]; rows];
    for (r, (row, &b)) in a.into_iter().zip(&rhs).enumerate() {
        if b < 0.0 {
            return Err(invalid("simplex right-hand side must be nonnegative"));
        }
        t[r][..vars].copy_from_slice(&row);
        t[r][vars + r] = 1.0;
        t[r][rhs_col] = b;
    }
    let mut basis: Vec<usize> = (vars..vars + rows).collect();

    // Phase I: minimize the sum of artificials.
    let phase1: Vec<f64> = (0..vars + rows)
        .map(|j| if j >= vars { 1.0 } else { 0.0 })
        .collect();
    run_simplex(&mut t, &mut basis, &phase1, vars + rows)?;
    let infeasibility: f64 = basis
        .iter()
        .enumerate()
        .filter(|(_, &j)| j >= vars)
        .map(|(r, _)| t[r][rhs_col])
        .sum();
    if infeasibility > 1e-9 {
        return Err(invalid(format!(
            "transport problem infeasible (residual {infeasibility})"
        )));
    }
    // Drive zero-level artificials out of the basis where possible.
    for r in 0..rows {
        if basis[r] >= vars {
            if let Some(j) = (0..vars).find(|&j| t[r][j].abs() > PIVOT_EPS) {
                pivot(&mut t, &mut basis, r, j);
            }
        }
    }

    // Phase II over the original columns only.
    run_simplex(&mut t, &mut basis, c, vars)?;
    let mut x = vec![0.0; vars];
    for (r, &j) in basis.iter().enumerate() {
        if j < vars {
            x[j] = t[r][rhs_col];
        }
    }
    Ok(x)
}

fn run_simplex(
    t: &mut [Vec<f64>],
    basis: &mut [usize],
    cost: &[f64],
    allowed: usize,
) -> Result<()> {
    let rows = t.len();
    let rhs_col = t.first().map(|r| r.len() - 1).unwrap_or(0);
    let cost_of = |j: usize| cost.get(j).copied().unwrap_or(0.0);
    // Generous cap; Bland's rule guarantees termination anyway.
    for _ in 0..100_000 {
        // Bland: first column with a negative reduced cost enters.
        let entering = (0..allowed).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let mut reduced = cost_of(j);
            for r in 0..rows {
                reduced -= cost_of(basis[r]) * t[r][j];
            }
            reduced < -PIVOT_EPS
        });
        let Some(j) = entering else {
            return Ok(());
        };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..rows {
            if t[r][j] > PIVOT_EPS {
                let ratio = t[r][rhs_col] / t[r][j];
                leave = match leave {
                    None => Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - PIVOT_EPS
                            || ((ratio - lratio).abs() <= PIVOT_EPS && basis[r] < basis[lr])
                        {
                            Some((r, ratio))
                        } else {
                            Some((lr, lratio))
                        }
                    }
                };
            }
        }
        let Some((r, _)) = leave else {
            return Err(invalid("transport linear program is unbounded"));
        };
        pivot(t, basis, r, j);
    }
    Err(invalid("simplex iteration cap reached"))
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], r: usize, j: usize) {
    let p = t[r][j];
    for v in t[r].iter_mut() {
        *v /= p;
    }
    let pivot_row = t[r].clone();
    for (k, row) in t.iter_mut().enumerate() {
        if k == r {
            continue;
        }
        let factor = row[j];
        if factor != 0.0 {
            for (v, pv) in row.iter_mut().zip(&pivot_row) {
                *v -= factor * pv;
            }
        }
    }
    basis[r] = j;
}
