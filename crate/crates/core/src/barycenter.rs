//! Entropy-penalized Wasserstein-2 barycenter on a fixed support.
//!
//! The barycenter weights are never optimized directly. Instead the concave dual
//! over per-class potentials `g_i` (one value per support atom) is maximized by
//! plain supergradient ascent, and the weights are read off as
//! `alpha = softmax(-sum_i lambda_i g_i / tau)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, RaidError, Result};
use crate::ot::{cost_matrix, squared_distance, Histogram};

/// Dual potentials, one row per class and one column per support atom.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials(pub Array2<f64>);

impl DualPotentials {
    pub fn zeros(classes: usize, support: usize) -> Self {
        Self(Array2::zeros((classes, support)))
    }

    pub fn classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn support_len(&self) -> usize {
        self.0.ncols()
    }

    fn check(&self) -> Result<()> {
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("dual potentials must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BarycenterSolution {
    pub support: Array2<f64>,
    pub alpha: Array1<f64>,
    pub potentials: DualPotentials,
    pub dual_value: f64,
    pub lambda: Array1<f64>,
    pub tau: f64,
    /// Best dual value seen after each ascent step.
    pub best_trace: Vec<f64>,
}

impl BarycenterSolution {
    pub fn histogram(&self) -> Result<Histogram> {
        Histogram::new(self.support.clone(), self.alpha.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// `s0 / sqrt(t)` at step `t = 1, 2, ...`.
    InverseSqrt { s0: f64 },
}

impl StepSchedule {
    pub fn step(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::InverseSqrt { s0 } => s0 / (t.max(1) as f64).sqrt(),
        }
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::InverseSqrt { s0: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportStrategy {
    Subsample,
    Kmeans,
}

/// `min_p ||y - s_p||^2 - g[p]` and the first index attaining it.
pub fn c_transform(
    g: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    support: ArrayView2<'_, f64>,
) -> Result<(f64, usize)> {
    if support.nrows() == 0 {
        return Err(invalid("support is empty"));
    }
    if g.len() != support.nrows() {
        return Err(RaidError::DimensionMismatch {
            expected: support.nrows(),
            found: g.len(),
        });
    }
    if y.len() != support.ncols() {
        return Err(RaidError::DimensionMismatch {
            expected: support.ncols(),
            found: y.len(),
        });
    }
    let costs = support
        .axis_iter(Axis(0))
        .map(|s| squared_distance(y, s));
    Ok(argmin_shifted(costs, g))
}

fn argmin_shifted(costs: impl Iterator<Item = f64>, g: ArrayView1<'_, f64>) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (p, (c, gp)) in costs.zip(g.iter()).enumerate() {
        let v = c - gp;
        // strict comparison keeps the lowest index on ties
        if v < best.0 {
            best = (v, p);
        }
    }
    best
}

/// Class weights proportional to class sizes.
pub fn size_weights(sizes: &[usize]) -> Result<Array1<f64>> {
    let total: usize = sizes.iter().sum();
    if sizes.is_empty() || total == 0 {
        return Err(invalid("class sizes must be nonempty with positive total"));
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Barycenter weights `softmax(-c / tau)` with `c_q = sum_i lambda_i g_i[q]`, via log-sum-exp.
pub fn recover_alpha(
    potentials: &DualPotentials,
    lambda: ArrayView1<'_, f64>,
    tau: f64,
) -> Result<Array1<f64>> {
    if !(tau > 0.0) {
        return Err(invalid(format!("tau must be positive, got {tau}")));
    }
    if lambda.len() != potentials.classes() {
        return Err(RaidError::DimensionMismatch {
            expected: potentials.classes(),
            found: lambda.len(),
        });
    }
    let logits = weighted_potential(potentials, lambda).mapv(|c| -c / tau);
    let lse = log_sum_exp(logits.view());
    Ok(logits.mapv(|l| (l - lse).exp()))
}

fn weighted_potential(potentials: &DualPotentials, lambda: ArrayView1<'_, f64>) -> Array1<f64> {
    lambda.dot(&potentials.0)
}

fn log_sum_exp(v: ArrayView1<'_, f64>) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Precomputed costs between every class atom and every support atom.
struct DualProblem<'a> {
    costs: Vec<Array2<f64>>,
    class_weights: Vec<ArrayView1<'a, f64>>,
    lambda: ArrayView1<'a, f64>,
    tau: f64,
}

impl<'a> DualProblem<'a> {
    fn new(
        class_hists: &'a [Histogram],
        support: ArrayView2<'_, f64>,
        lambda: ArrayView1<'a, f64>,
        tau: f64,
    ) -> Result<Self> {
        if class_hists.is_empty() {
            return Err(invalid("need at least one class histogram"));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(invalid(format!("tau must be positive, got {tau}")));
        }
        if lambda.len() != class_hists.len() {
            return Err(RaidError::DimensionMismatch {
                expected: class_hists.len(),
                found: lambda.len(),
            });
        }
        if support.nrows() == 0 {
            return Err(invalid("support is empty"));
        }
        let costs = class_hists
            .iter()
            .map(|h| cost_matrix(h.atoms(), support).map(|c| c.into_inner()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            costs,
            class_weights: class_hists.iter().map(|h| h.weights()).collect(),
            lambda,
            tau,
        })
    }

    fn check(&self, g: &DualPotentials) -> Result<()> {
        let nbar = self.costs[0].ncols();
        if g.classes() != self.costs.len() || g.support_len() != nbar {
            return Err(RaidError::DimensionMismatch {
                expected: self.costs.len() * nbar,
                found: g.classes() * g.support_len(),
            });
        }
        g.check()
    }

    /// Objective value and a supergradient at `g`.
    fn evaluate(&self, g: &DualPotentials, with_grad: bool) -> (f64, Option<Array2<f64>>) {
        let nbar = g.support_len();
        let mut grad = with_grad.then(|| Array2::zeros((g.classes(), nbar)));
        let mut value = 0.0;
        for (i, (cost, w)) in self.costs.iter().zip(&self.class_weights).enumerate() {
            let gi = g.0.row(i);
            let mut class_sum = 0.0;
            for (row, &wn) in cost.axis_iter(Axis(0)).zip(w.iter()) {
                let (v, q) = argmin_shifted(row.iter().copied(), gi);
                class_sum += wn * v;
                if let Some(gr) = grad.as_mut() {
                    gr[[i, q]] -= self.lambda[i] * wn;
                }
            }
            value += self.lambda[i] * class_sum;
        }
        let logits = weighted_potential(g, self.lambda).mapv(|c| -c / self.tau);
        let lse = log_sum_exp(logits.view());
        value -= self.tau * lse;
        if let Some(gr) = grad.as_mut() {
            let alpha = logits.mapv(|l| (l - lse).exp());
            for (i, mut row) in gr.axis_iter_mut(Axis(0)).enumerate() {
                row.scaled_add(self.lambda[i], &alpha);
            }
        }
        (value, grad)
    }
}

/// `sum_i lambda_i sum_n w_n g_i^c(y_n^i) - tau * log sum_q exp(-sum_i lambda_i g_i[q] / tau)`.
///
/// For the uniform class histograms used in training `w_n = 1 / N_i`.
pub fn dual_objective(
    potentials: &DualPotentials,
    class_hists: &[Histogram],
    support: ArrayView2<'_, f64>,
    lambda: ArrayView1<'_, f64>,
    tau: f64,
) -> Result<f64> {
    let problem = DualProblem::new(class_hists, support, lambda, tau)?;
    problem.check(potentials)?;
    Ok(problem.evaluate(potentials, false).0)
}

/// Supergradient of [`dual_objective`]: `lambda_i (alpha_q - mass of class i whose c-transform picks q)`.
pub fn dual_supergradient(
    potentials: &DualPotentials,
    class_hists: &[Histogram],
    support: ArrayView2<'_, f64>,
    lambda: ArrayView1<'_, f64>,
    tau: f64,
) -> Result<Array2<f64>> {
    let problem = DualProblem::new(class_hists, support, lambda, tau)?;
    problem.check(potentials)?;
    Ok(problem.evaluate(potentials, true).1.expect("gradient requested"))
}

/// One supergradient ascent step of length `step_size`.
pub fn dual_ascent_step(
    potentials: &DualPotentials,
    class_hists: &[Histogram],
    support: ArrayView2<'_, f64>,
    lambda: ArrayView1<'_, f64>,
    tau: f64,
    step_size: f64,
) -> Result<DualPotentials> {
    if !(step_size > 0.0) {
        return Err(invalid("step size must be positive"));
    }
    let grad = dual_supergradient(potentials, class_hists, support, lambda, tau)?;
    Ok(DualPotentials(&potentials.0 + &(grad * step_size)))
}

/// Maximizes the dual by supergradient ascent from zero potentials and returns the best iterate.
pub fn solve_barycenter(
    class_hists: &[Histogram],
    support: ArrayView2<'_, f64>,
    lambda: ArrayView1<'_, f64>,
    tau: f64,
    steps: usize,
    schedule: StepSchedule,
) -> Result<BarycenterSolution> {
    let problem = DualProblem::new(class_hists, support, lambda, tau)?;
    let mut g = DualPotentials::zeros(class_hists.len(), support.nrows());
    let mut best_value = f64::NEG_INFINITY;
    let mut best = g.clone();
    let mut best_trace = Vec::with_capacity(steps);
    for t in 1..=steps + 1 {
        let (value, grad) = problem.evaluate(&g, t <= steps);
        if !value.is_finite() {
            return Err(invalid("dual objective became non-finite"));
        }
        if value > best_value {
            best_value = value;
            best = g.clone();
        }
        let Some(grad) = grad else { break };
        best_trace.push(best_value);
        g.0.scaled_add(schedule.step(t), &grad);
    }
    let alpha = recover_alpha(&best, lambda, tau)?;
    Ok(BarycenterSolution {
        support: support.to_owned(),
        alpha,
        potentials: best,
        dual_value: best_value,
        lambda: lambda.to_owned(),
        tau,
        best_trace,
    })
}

const KMEANS_ITERS: usize = 25;

/// Picks `size` fixed support atoms from the rows of `points`.
pub fn select_support(
    points: ArrayView2<'_, f64>,
    size: usize,
    strategy: SupportStrategy,
    seed: u64,
) -> Result<Array2<f64>> {
    if size == 0 {
        return Err(invalid("support size must be at least 1"));
    }
    let n = points.nrows();
    if size > n {
        return Err(invalid(format!(
            "support size {size} exceeds the {n} available points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let picked = points.select(Axis(0), &order[..size]);
    match strategy {
        SupportStrategy::Subsample => Ok(picked),
        SupportStrategy::Kmeans => Ok(kmeans(points, picked)),
    }
}

fn kmeans(points: ArrayView2<'_, f64>, mut centers: Array2<f64>) -> Array2<f64> {
    let (k, d) = centers.dim();
    for _ in 0..KMEANS_ITERS {
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for p in points.axis_iter(Axis(0)) {
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centers.axis_iter(Axis(0)).enumerate() {
                let dist = squared_distance(p, c);
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            sums.row_mut(best.1).scaled_add(1.0, &p);
            counts[best.1] += 1;
        }
        for (j, &cnt) in counts.iter().enumerate() {
            // an empty cluster keeps its previous center
            if cnt > 0 {
                let mean = &sums.row(j) / cnt as f64;
                centers.row_mut(j).assign(&mean);
            }
        }
    }
    centers
}
