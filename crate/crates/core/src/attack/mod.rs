//! Attribute-inference attackers trained on user embeddings.

mod classifier;
mod metrics;

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use classifier::{train_classifier, Classifier, ClassifierConfig, ClassifierKind};
pub use metrics::{balanced_accuracy, f1_micro};

use crate::error::{invalid, Result};
use crate::model::EmbeddingModel;
use crate::train::{sub_seed, ClassLabels};

const STREAM_REPEAT: u64 = 11;

/// Minimum number of labeled users for cross-validated evaluation.
pub const MIN_ATTACK_USERS: usize = 10;

/// Leaked user embeddings paired with their attribute class (`1..=K`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttackDataset {
    features: Array2<f64>,
    labels: Vec<u32>,
}

impl AttackDataset {
    pub fn new(features: Array2<f64>, labels: Vec<u32>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.contains(&0) {
            return Err(invalid("class labels start at 1"));
        }
        Ok(Self { features, labels })
    }

    /// User embeddings of every labeled user, in user order.
    pub fn from_model(model: &EmbeddingModel, labels: &ClassLabels) -> Result<Self> {
        if labels.labels.len() != model.num_users() {
            return Err(invalid(format!(
                "{} labels for {} users",
                labels.labels.len(),
                model.num_users()
            )));
        }
        let (users, classes): (Vec<usize>, Vec<u32>) = labels.labeled().unzip();
        Self::new(model.users.select(Axis(0), &users), classes)
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub classifier: ClassifierConfig,
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::default(),
            folds: 5,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub repeat: usize,
    pub fold: usize,
    pub f1_micro: f64,
    pub bacc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Mean over all folds of all repeats.
    pub f1_micro: f64,
    pub bacc: f64,
    pub folds: Vec<FoldScore>,
    /// Seed of each repeat, driving both the fold split and classifier init.
    pub seeds: Vec<u64>,
    pub stratified: bool,
}

/// Fold index of every sample. Falls back to plain shuffled folds when some class
/// has fewer members than there are folds.
fn assign_folds(labels: &[u32], k: usize, seed: u64) -> (Vec<usize>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut fold = vec![0; labels.len()];
    if by_class.values().any(|m| m.len() < k) {
        warn!("a class has fewer than {k} members; using unstratified folds");
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        for (pos, &i) in order.iter().enumerate() {
            fold[i] = pos % k;
        }
        return (fold, false);
    }
    // Dealing continues across classes so fold sizes differ by at most one.
    let mut dealt = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold[i] = dealt % k;
            dealt += 1;
        }
    }
    (fold, true)
}

fn run_fold(
    data: &AttackDataset,
    fold_of: &[usize],
    fold: usize,
    cfg: &ClassifierConfig,
) -> Result<(f64, f64)> {
    let (train, test): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| fold_of[i] != fold);
    let y_train: Vec<u32> = train.iter().map(|&i| data.labels[i]).collect();
    let y_test: Vec<u32> = test.iter().map(|&i| data.labels[i]).collect();
    let x_test = data.features.select(Axis(0), &test);
    let pred = if y_train.iter().all(|&c| c == y_train[0]) {
        // Only reachable with unstratified folds.
        vec![y_train[0]; test.len()]
    } else {
        let x_train = data.features.select(Axis(0), &train);
        train_classifier(x_train.view(), &y_train, cfg)?.predict(x_test.view())
    };
    Ok((f1_micro(&y_test, &pred)?, balanced_accuracy(&y_test, &pred)?))
}

/// Repeated k-fold cross-validation of the configured attacker.
pub fn evaluate_attack(data: &AttackDataset, config: &AttackConfig) -> Result<AttackReport> {
    config.classifier.validate()?;
    if config.folds < 2 || config.repeats == 0 {
        return Err(invalid("need at least 2 folds and 1 repeat"));
    }
    if data.len() < MIN_ATTACK_USERS.max(config.folds) {
        return Err(invalid(format!(
            "attack evaluation needs at least {MIN_ATTACK_USERS} labeled users, got {}",
            data.len()
        )));
    }
    let seeds: Vec<u64> = (0..config.repeats)
        .map(|r| sub_seed(config.seed, STREAM_REPEAT, r as u64))
        .collect();
    let splits: Vec<(Vec<usize>, bool)> = seeds
        .iter()
        .map(|&s| assign_folds(&data.labels, config.folds, s))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..config.repeats)
        .flat_map(|r| (0..config.folds).map(move |f| (r, f)))
        .collect();
    let run = |&(r, f): &(usize, usize)| -> Result<FoldScore> {
        let cfg = ClassifierConfig {
            seed: seeds[r],
            ..config.classifier.clone()
        };
        let (f1, bacc) = run_fold(data, &splits[r].0, f, &cfg)?;
        Ok(FoldScore {
            repeat: r,
            fold: f,
            f1_micro: f1,
            bacc,
        })
    };
    #[cfg(feature = "parallel")]
    let folds: Vec<FoldScore> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let folds: Vec<FoldScore> = jobs.iter().map(run).collect::<Result<_>>()?;

    let n = folds.len() as f64;
    Ok(AttackReport {
        f1_micro: folds.iter().map(|f| f.f1_micro).sum::<f64>() / n,
        bacc: folds.iter().map(|f| f.bacc).sum::<f64>() / n,
        folds,
        seeds,
        stratified: splits.iter().all(|s| s.1),
    })
}
