mod common;

use common::{random_hist, random_points, random_weights, rel_err, rng};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use raid::ot::{
    cost_matrix, exact_ot_oracle, sinkhorn, w2_squared, CostMatrix, Epsilon, Histogram,
    SinkhornConfig, W2Method,
};

/// Minimum of `<T, C>` over every basic feasible solution of the transport polytope.
///
/// A basis is a set of `n + m - 1` cells; each candidate is solved by Gaussian
/// elimination on the marginal equations and kept when the solution is feasible.
fn vertex_enumeration(a: &[f64], b: &[f64], c: &Array2<f64>) -> f64 {
    let (n, m) = (a.len(), b.len());
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let k = n + m - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::new();
    subsets(&cells, k, 0, &mut chosen, &mut |basis| {
        // n + m equations; the last column equation is implied by the others.
        let rows = n + m - 1;
        let mut mat = vec![vec![0.0; k + 1]; rows];
        for (col, &(i, j)) in basis.iter().enumerate() {
            mat[i][col] = 1.0;
            if j + 1 < m {
                mat[n + j][col] = 1.0;
            }
        }
        for i in 0..n {
            mat[i][k] = a[i];
        }
        for j in 0..m - 1 {
            mat[n + j][k] = b[j];
        }
        if let Some(x) = solve(mat) {
            if x.iter().all(|&v| v >= -1e-12) {
                let cost: f64 = basis.iter().zip(&x).map(|(&(i, j), v)| v * c[[i, j]]).sum();
                best = best.min(cost);
            }
        }
    });
    best
}

fn subsets<T: Copy>(items: &[T], k: usize, start: usize, acc: &mut Vec<T>, f: &mut impl FnMut(&[T])) {
    if acc.len() == k {
        f(acc);
        return;
    }
    for i in start..items.len() {
        acc.push(items[i]);
        subsets(items, k, i + 1, acc, f);
        acc.pop();
    }
}

/// Solves a square augmented system; `None` when singular.
fn solve(mut m: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = m.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if m[piv][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

#[test]
fn two_by_two_optimum_is_one_point_four() {
    let c = array![[1.0, 2.0], [3.0, 1.0]];
    let enumerated = vertex_enumeration(&[0.3, 0.7], &[0.5, 0.5], &c);
    assert!((enumerated - 1.4).abs() < 1e-12);
    let cm = CostMatrix::from_array(c).unwrap();
    let (plan, cost) = exact_ot_oracle(array![0.3, 0.7].view(), array![0.5, 0.5].view(), &cm).unwrap();
    assert!((cost - 1.4).abs() < 1e-12);
    assert!((plan.plan[[0, 0]] - 0.3).abs() < 1e-12);
}

#[test]
fn simplex_matches_vertex_enumeration() {
    let mut r = rng(17);
    for _ in 0..60 {
        let n = 1 + (r.random_range(0..3usize));
        let m = 1 + (r.random_range(0..3usize));
        let a = random_weights(&mut r, n);
        let b = random_weights(&mut r, m);
        let c = cost_matrix(random_points(&mut r, n, 2).view(), random_points(&mut r, m, 2).view()).unwrap();
        let brute = vertex_enumeration(a.as_slice().unwrap(), b.as_slice().unwrap(), &c.view().to_owned());
        let (_, exact) = exact_ot_oracle(a.view(), b.view(), &c).unwrap();
        assert!((brute - exact).abs() < 1e-9, "{brute} vs {exact}");
    }
}

#[test]
fn sinkhorn_tracks_exact_three_by_four() {
    let mut r = rng(5);
    for _ in 0..20 {
        let p = random_hist(&mut r, 3, 2);
        let q = random_hist(&mut r, 4, 2);
        let s = w2_squared(&p, &q, W2Method::default()).unwrap();
        let e = w2_squared(&p, &q, W2Method::Exact).unwrap();
        assert!(rel_err(s.value, e.value) <= 0.02, "{} vs {}", s.value, e.value);
    }
}

#[test]
fn dirac_distances() {
    let p = Histogram::dirac(&[1.0, 2.0]).unwrap();
    let q = Histogram::dirac(&[4.0, -2.0]).unwrap();
    for method in [W2Method::Exact, W2Method::default()] {
        assert!((w2_squared(&p, &q, method).unwrap().value - 25.0).abs() < 1e-9);
    }
}

#[test]
fn self_distance_is_zero() {
    let mut r = rng(8);
    let p = random_hist(&mut r, 5, 3);
    assert!(w2_squared(&p, &p, W2Method::Exact).unwrap().value.abs() < 1e-12);
}

#[test]
fn entropic_cost_decreases_with_epsilon() {
    let mut r = rng(23);
    for _ in 0..10 {
        let p = random_hist(&mut r, 4, 2);
        let q = random_hist(&mut r, 5, 2);
        let c = cost_matrix(p.atoms(), q.atoms()).unwrap();
        let mut prev = f64::INFINITY;
        for e in [1e-1, 1e-2, 1e-3] {
            let cfg = SinkhornConfig {
                epsilon: Epsilon::RelativeToMeanCost(e),
                max_iter: 100_000,
                tol: 1e-12,
            };
            let t = sinkhorn(p.weights(), q.weights(), &c, &cfg).unwrap();
            assert!(t.converged);
            let cost = t.cost(&c);
            assert!(cost <= prev + 1e-6, "{cost} > {prev} at eps {e}");
            prev = cost;
        }
    }
}

fn hist_strategy(max_n: usize, d: usize) -> impl Strategy<Value = Histogram> {
    (1..=max_n).prop_flat_map(move |n| {
        (
            prop::collection::vec(-2.0f64..2.0, n * d),
            prop::collection::vec(0.05f64..1.0, n),
        )
            .prop_map(move |(xs, ws)| {
                let s: f64 = ws.iter().sum();
                Histogram::new(
                    Array2::from_shape_vec((n, d), xs).unwrap(),
                    Array1::from(ws) / s,
                )
                .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converged_plans_are_feasible(p in hist_strategy(6, 2), q in hist_strategy(6, 2)) {
        let c = cost_matrix(p.atoms(), q.atoms()).unwrap();
        let cfg = SinkhornConfig::default();
        let t = sinkhorn(p.weights(), q.weights(), &c, &cfg).unwrap();
        prop_assert!(t.plan.iter().all(|&x| x >= 0.0));
        if t.converged {
            prop_assert!(t.marginal_violation() < cfg.tol);
        }
    }

    #[test]
    fn exact_distance_is_symmetric(p in hist_strategy(4, 2), q in hist_strategy(4, 2)) {
        let pq = w2_squared(&p, &q, W2Method::Exact).unwrap().value;
        let qp = w2_squared(&q, &p, W2Method::Exact).unwrap().value;
        prop_assert!((pq - qp).abs() <= 1e-9);
        prop_assert!(pq >= 0.0);
    }

    #[test]
    fn exact_plan_has_exact_marginals(p in hist_strategy(5, 3), q in hist_strategy(5, 3)) {
        let c = cost_matrix(p.atoms(), q.atoms()).unwrap();
        let (t, cost) = exact_ot_oracle(p.weights(), q.weights(), &c).unwrap();
        prop_assert!(t.marginal_violation() < 1e-9);
        prop_assert!((t.cost(&c) - cost).abs() < 1e-9);
    }
}
