//! Dot-product embedding recommender trained with binary cross-entropy.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, RaidError, Result};

/// Lower and upper clamp applied to predicted scores.
pub const SCORE_FLOOR: f64 = 1e-7;

/// User and item embedding tables sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl EmbeddingModel {
    pub fn new(users: Array2<f64>, items: Array2<f64>) -> Result<Self> {
        if users.nrows() == 0 || items.nrows() == 0 {
            return Err(invalid("model needs at least one user and one item"));
        }
        if users.ncols() == 0 {
            return Err(invalid("embedding dimension must be at least 1"));
        }
        if users.ncols() != items.ncols() {
            return Err(RaidError::DimensionMismatch {
                expected: users.ncols(),
                found: items.ncols(),
            });
        }
        let model = Self { users, items };
        if !model.is_finite() {
            return Err(invalid("model parameters must be finite"));
        }
        Ok(model)
    }

    /// Every entry drawn from `N(0, std^2)`.
    pub fn gaussian(
        num_users: usize,
        num_items: usize,
        dim: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users = Array2::from_shape_simple_fn((num_users, dim), || normal.sample(&mut rng));
        let items = Array2::from_shape_simple_fn((num_items, dim), || normal.sample(&mut rng));
        Self::new(users, items)
    }

    pub fn num_users(&self) -> usize {
        self.users.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.items.nrows()
    }

    pub fn dim(&self) -> usize {
        self.users.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(self.items.iter()).all(|x| x.is_finite())
    }

    pub fn check_pair(&self, user: usize, item: usize) -> Result<()> {
        if user >= self.num_users() {
            return Err(invalid(format!(
                "user {user} out of range (model has {})",
                self.num_users()
            )));
        }
        if item >= self.num_items() {
            return Err(invalid(format!(
                "item {item} out of range (model has {})",
                self.num_items()
            )));
        }
        Ok(())
    }

    /// Raw dot product `P[u] . Q[v]`.
    pub fn logit(&self, user: usize, item: usize) -> Result<f64> {
        self.check_pair(user, item)?;
        Ok(self.logit_unchecked(user, item))
    }

    pub(crate) fn logit_unchecked(&self, user: usize, item: usize) -> f64 {
        dot(self.users.row(user), self.items.row(item))
    }
}

fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

pub(crate) fn clamped_sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)
}

/// `sigmoid(P[u] . Q[v])`, clamped to `[1e-7, 1 - 1e-7]`.
pub fn predict_score(model: &EmbeddingModel, user: usize, item: usize) -> Result<f64> {
    model.logit(user, item).map(clamped_sigmoid)
}

/// Observed (label 1) and sampled unobserved (label 0) user-item pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionSet {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl InteractionSet {
    pub fn new(positives: Vec<(usize, usize)>, negatives: Vec<(usize, usize)>) -> Result<Self> {
        let pos: HashSet<_> = positives.iter().collect();
        if let Some(p) = negatives.iter().find(|p| pos.contains(p)) {
            return Err(invalid(format!(
                "pair {p:?} is both a positive and a negative"
            )));
        }
        Ok(Self {
            positives,
            negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(user, item, label)` triples, positives first.
    pub fn labeled(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.positives
            .iter()
            .map(|&(u, v)| (u, v, 1.0))
            .chain(self.negatives.iter().map(|&(u, v)| (u, v, 0.0)))
    }

    fn check(&self, model: &EmbeddingModel) -> Result<()> {
        if self.is_empty() {
            return Err(invalid("batch is empty"));
        }
        for (u, v, _) in self.labeled() {
            model.check_pair(u, v)?;
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over the batch.
pub fn ce_loss(model: &EmbeddingModel, batch: &InteractionSet) -> Result<f64> {
    batch.check(model)?;
    let total: f64 = batch
        .labeled()
        .map(|(u, v, r)| {
            let s = clamped_sigmoid(model.logit_unchecked(u, v));
            -(r * s.ln() + (1.0 - r) * (1.0 - s).ln())
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Gradient with respect to every parameter; rows not touched by the batch are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

pub fn ce_gradient(model: &EmbeddingModel, batch: &InteractionSet) -> Result<ModelGradient> {
    batch.check(model)?;
    let mut grad = ModelGradient {
        users: Array2::zeros(model.users.raw_dim()),
        items: Array2::zeros(model.items.raw_dim()),
    };
    let scale = 1.0 / batch.len() as f64;
    for (u, v, r) in batch.labeled() {
        let coef = scale * (clamped_sigmoid(model.logit_unchecked(u, v)) - r);
        grad.users
            .row_mut(u)
            .scaled_add(coef, &model.items.row(v));
        grad.items
            .row_mut(v)
            .scaled_add(coef, &model.users.row(u));
    }
    Ok(grad)
}

/// Sparse mini-batch CE step: `theta -= mu * grad(mean CE over batch)`.
///
/// Every per-pair delta is evaluated at the pre-step parameters before any row moves,
/// so the update equals `mu * ce_gradient` without full-size gradient tables.
pub(crate) struct SparseCeStep {
    pairs: Vec<(usize, usize)>,
    user_deltas: Vec<f64>,
    item_deltas: Vec<f64>,
}

impl SparseCeStep {
    pub(crate) fn new() -> Self {
        Self {
            pairs: Vec::new(),
            user_deltas: Vec::new(),
            item_deltas: Vec::new(),
        }
    }

    /// Returns the summed (not averaged) loss of the batch at the pre-step parameters.
    pub(crate) fn prepare(&mut self, model: &EmbeddingModel, batch: &[(usize, usize, f64)]) -> f64 {
        self.pairs.clear();
        self.user_deltas.clear();
        self.item_deltas.clear();
        let mut loss = 0.0;
        let scale = 1.0 / batch.len().max(1) as f64;
        for &(u, v, r) in batch {
            let s = clamped_sigmoid(model.logit_unchecked(u, v));
            loss -= r * s.ln() + (1.0 - r) * (1.0 - s).ln();
            let coef = scale * (s - r);
            self.pairs.push((u, v));
            self.user_deltas
                .extend(model.items.row(v).iter().map(|q| coef * q));
            self.item_deltas
                .extend(model.users.row(u).iter().map(|p| coef * p));
        }
        loss
    }

    pub(crate) fn apply(&self, model: &mut EmbeddingModel, mu: f64) {
        let d = model.dim();
        for (k, &(u, v)) in self.pairs.iter().enumerate() {
            let du = &self.user_deltas[k * d..(k + 1) * d];
            let dv = &self.item_deltas[k * d..(k + 1) * d];
            for (x, g) in model.users.row_mut(u).iter_mut().zip(du) {
                *x -= mu * g;
            }
            for (x, g) in model.items.row_mut(v).iter_mut().zip(dv) {
                *x -= mu * g;
            }
        }
    }
}
