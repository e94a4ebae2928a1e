use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use raid::attack::{evaluate_attack, AttackConfig, AttackDataset};
use raid::barycenter::{size_weights, solve_barycenter, StepSchedule};
use raid::model::EmbeddingModel;
use raid::ot::{cost_matrix, exact_ot_oracle, sinkhorn, Epsilon, Histogram, SinkhornConfig};
use raid::train::{train_raid_from, ClassLabels, TrainConfig, TrainData};
use raid::{RaidError, Result};

const GRID_SIDE: usize = 15;
const GRID_HALF_WIDTH: f64 = 3.0;
const BARYCENTER_STEPS: usize = 2000;
const CLASS_SIZE: usize = 30;
const DEFENSE_CLASS_SIZE: usize = 100;

type Points = Vec<[f64; 2]>;

fn rows(a: &Array2<f64>) -> Points {
    a.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

fn blob(rng: &mut ChaCha8Rng, n: usize, center: [f64; 2], std: f64) -> Array2<f64> {
    let noise = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((n, 2), |(_, j)| center[j] + noise.sample(rng))
}

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let w: Array1<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s = w.sum();
    w / s
}

#[derive(Debug, Clone, Serialize)]
pub struct TransportScene {
    pub sources: Points,
    pub targets: Points,
    pub source_weights: Vec<f64>,
    pub target_weights: Vec<f64>,
    /// Row-major `n x m` entropic plan.
    pub plan: Vec<Vec<f64>>,
    pub exact_plan: Vec<Vec<f64>>,
    pub cost: f64,
    pub exact_cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `epsilon` is relative to the mean squared distance.
pub fn transport_scene(n: usize, m: usize, epsilon: f64, seed: u64) -> Result<TransportScene> {
    if n == 0 || m == 0 {
        return Err(RaidError::InvalidInput("both clouds need at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = blob(&mut rng, n, [-1.0, 0.0], 0.7);
    let y = blob(&mut rng, m, [1.0, 0.0], 0.7);
    let (a, b) = (simplex(&mut rng, n), simplex(&mut rng, m));
    let c = cost_matrix(x.view(), y.view())?;
    let cfg = SinkhornConfig {
        epsilon: Epsilon::RelativeToMeanCost(epsilon),
        ..SinkhornConfig::default()
    };
    let t = sinkhorn(a.view(), b.view(), &c, &cfg)?;
    let (exact, exact_cost) = exact_ot_oracle(a.view(), b.view(), &c)?;
    let nested = |p: &Array2<f64>| p.rows().into_iter().map(|r| r.to_vec()).collect();
    Ok(TransportScene {
        sources: rows(&x),
        targets: rows(&y),
        source_weights: a.to_vec(),
        target_weights: b.to_vec(),
        plan: nested(&t.plan),
        exact_plan: nested(&exact.plan),
        cost: t.cost(&c),
        exact_cost,
        converged: t.converged,
        iterations: t.iterations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BarycenterScene {
    pub classes: Vec<Points>,
    pub grid: Points,
    pub alpha: Vec<f64>,
    pub dual_value: f64,
}

/// Two classes at `(+-separation / 2, 0)`, barycenter on a fixed square grid.
pub fn barycenter_scene(tau: f64, separation: f64, seed: u64) -> Result<BarycenterScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = separation / 2.0;
    let clouds = [
        blob(&mut rng, CLASS_SIZE, [-half, 0.0], 0.4),
        blob(&mut rng, CLASS_SIZE, [half, 0.0], 0.4),
    ];
    let step = 2.0 * GRID_HALF_WIDTH / (GRID_SIDE - 1) as f64;
    let grid = Array2::from_shape_fn((GRID_SIDE * GRID_SIDE, 2), |(k, j)| {
        let idx = if j == 0 { k % GRID_SIDE } else { k / GRID_SIDE };
        -GRID_HALF_WIDTH + step * idx as f64
    });
    let hists = clouds
        .iter()
        .map(|c| Histogram::uniform(c.clone()))
        .collect::<Result<Vec<_>>>()?;
    let lambda = size_weights(&[CLASS_SIZE, CLASS_SIZE])?;
    let sol = solve_barycenter(&hists, grid.view(), lambda.view(), tau, BARYCENTER_STEPS, StepSchedule::default())?;
    Ok(BarycenterScene {
        classes: clouds.iter().map(rows).collect(),
        grid: rows(&grid),
        alpha: sol.alpha.to_vec(),
        dual_value: sol.dual_value,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DefenseScene {
    pub labels: Vec<u32>,
    pub before: Points,
    pub after: Points,
    pub bacc_before: f64,
    pub bacc_after: f64,
    pub defense_loss: Vec<f64>,
}

/// Runs `epochs` defense-only epochs with step `step` on two planar classes.
pub fn defense_scene(epochs: usize, step: f64, seed: u64) -> Result<DefenseScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = ndarray::concatenate(
        ndarray::Axis(0),
        &[
            blob(&mut rng, DEFENSE_CLASS_SIZE, [-1.5, 0.0], 0.5).view(),
            blob(&mut rng, DEFENSE_CLASS_SIZE, [1.5, 0.0], 0.5).view(),
        ],
    )
    .expect("same width");
    let classes: Vec<u32> = (0..2 * DEFENSE_CLASS_SIZE)
        .map(|u| if u < DEFENSE_CLASS_SIZE { 1 } else { 2 })
        .collect();
    let labels = ClassLabels::new(classes.iter().copied().map(Some).collect(), 2)?;
    let model = EmbeddingModel::new(users, Array2::zeros((1, 2)))?;

    let mut cfg = TrainConfig {
        embedding_dim: 2,
        e1: 0,
        e2: epochs,
        mu: step,
        seed,
        ..TrainConfig::default()
    };
    cfg.barycenter.tau = 1.0;
    let data = TrainData {
        num_users: model.num_users(),
        num_items: 1,
        positives: Vec::new(),
    };
    let outcome = train_raid_from(model.clone(), &data, &labels, &cfg, |_, _| {})?;

    let attack = AttackConfig {
        repeats: 1,
        seed,
        ..AttackConfig::default()
    };
    let bacc = |m: &EmbeddingModel| -> Result<f64> {
        Ok(evaluate_attack(&AttackDataset::from_model(m, &labels)?, &attack)?.bacc)
    };
    Ok(DefenseScene {
        bacc_before: bacc(&model)?,
        bacc_after: bacc(&outcome.model)?,
        before: rows(&model.users),
        after: rows(&outcome.model.users),
        labels: classes,
        defense_loss: outcome.log.iter().filter_map(|e| e.defense_loss).collect(),
    })
}
