//! Two-phase training: cross-entropy warm-up, then joint optimization of the
//! recommendation loss and the barycenter-alignment defense.

use std::collections::HashSet;

use log::{debug, warn};
use ndarray::{Array1, Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::barycenter::{
    select_support, size_weights, solve_barycenter, BarycenterSolution, StepSchedule,
    SupportStrategy,
};
use crate::error::{invalid, RaidError, Result};
use crate::model::{EmbeddingModel, InteractionSet, SparseCeStep};
use crate::ot::{
    cost_matrix, sinkhorn, sinkhorn_warm, Coupling, DualPair, Epsilon, Histogram,
    SinkhornConfig, TransportCost,
};

/// Largest tolerated deviation of a coupling from its prescribed marginals.
pub const COUPLING_MARGINAL_TOL: f64 = 1e-4;

/// Derives an independent stream seed from a base seed.
pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over a mixed key
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `sub_seed` stream of the per-epoch negative draw, indexed by epoch.
pub const STREAM_NEGATIVES: u64 = 1;
/// `sub_seed` stream of the per-epoch shuffle, indexed by epoch.
pub const STREAM_SHUFFLE: u64 = 2;
/// `sub_seed` stream of support selection, indexed by epoch.
pub const STREAM_SUPPORT: u64 = 3;

#[derive(Debug, Clone)]
pub struct NegativeSample {
    pub set: InteractionSet,
    /// Users skipped because they interacted with every item.
    pub skipped_users: usize,
}

/// Draws `ratio` uninteracted items per positive pair, without replacement within a draw.
pub fn negative_sample(
    positives: &[(usize, usize)],
    num_items: usize,
    ratio: usize,
    seed: u64,
) -> Result<NegativeSample> {
    if ratio == 0 {
        return Err(invalid("negative ratio must be at least 1"));
    }
    if let Some(&(_, v)) = positives.iter().find(|&&(_, v)| v >= num_items) {
        return Err(invalid(format!("item {v} out of range ({num_items} items)")));
    }
    let num_users = positives.iter().map(|&(u, _)| u + 1).max().unwrap_or(0);
    let mut seen: Vec<HashSet<usize>> = vec![HashSet::new(); num_users];
    for &(u, v) in positives {
        seen[u].insert(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut negatives = Vec::with_capacity(positives.len() * ratio);
    let mut skipped = HashSet::new();
    let mut draw = Vec::with_capacity(ratio);
    for &(u, _) in positives {
        let interacted = &seen[u];
        let free = num_items - interacted.len();
        if free == 0 {
            skipped.insert(u);
            continue;
        }
        let k = ratio.min(free);
        draw.clear();
        if interacted.len() * 2 < num_items {
            while draw.len() < k {
                let v = rng.random_range(0..num_items);
                if !interacted.contains(&v) && !draw.contains(&v) {
                    draw.push(v);
                }
            }
        } else {
            let complement: Vec<usize> = (0..num_items).filter(|v| !interacted.contains(v)).collect();
            draw.extend(index::sample(&mut rng, complement.len(), k).iter().map(|i| complement[i]));
        }
        negatives.extend(draw.iter().map(|&v| (u, v)));
    }
    if !skipped.is_empty() {
        warn!(
            "{} users interacted with every item; their negatives were skipped",
            skipped.len()
        );
    }
    Ok(NegativeSample {
        set: InteractionSet {
            positives: positives.to_vec(),
            negatives,
        },
        skipped_users: skipped.len(),
    })
}

/// Per-user attribute labels with classes numbered `1..=num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLabels {
    pub labels: Vec<Option<u32>>,
    pub num_classes: u32,
}

impl ClassLabels {
    pub fn new(labels: Vec<Option<u32>>, num_classes: u32) -> Result<Self> {
        if let Some(bad) = labels
            .iter()
            .flatten()
            .find(|&&c| c == 0 || c > num_classes)
        {
            return Err(invalid(format!(
                "class label {bad} outside 1..={num_classes}"
            )));
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn labeled(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(u, c)| c.map(|c| (u, c)))
    }
}

/// Users grouped by class, with their embeddings as uniform histograms.
#[derive(Debug, Clone)]
pub struct ClassGroups {
    pub class_ids: Vec<u32>,
    pub members: Vec<Vec<usize>>,
    pub histograms: Vec<Histogram>,
    /// Classes with no members, excluded from the defense.
    pub dropped: Vec<u32>,
}

impl ClassGroups {
    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn lambda(&self) -> Result<Array1<f64>> {
        size_weights(&self.sizes())
    }

    /// Embeddings of every grouped user, class by class.
    pub fn stacked_atoms(&self) -> Array2<f64> {
        let views: Vec<_> = self.histograms.iter().map(|h| h.atoms()).collect();
        ndarray::concatenate(Axis(0), &views).expect("histograms share a dimension")
    }
}

pub fn class_histograms(model: &EmbeddingModel, labels: &ClassLabels) -> Result<ClassGroups> {
    if labels.labels.len() > model.num_users() {
        return Err(invalid(format!(
            "{} labels for a model with {} users",
            labels.labels.len(),
            model.num_users()
        )));
    }
    let mut members = vec![Vec::new(); labels.num_classes as usize];
    for (u, c) in labels.labeled() {
        members[(c - 1) as usize].push(u);
    }
    let mut groups = ClassGroups {
        class_ids: Vec::new(),
        members: Vec::new(),
        histograms: Vec::new(),
        dropped: Vec::new(),
    };
    for (i, users) in members.into_iter().enumerate() {
        let class = i as u32 + 1;
        if users.is_empty() {
            warn!("class {class} has no labeled users; dropping it from the defense");
            groups.dropped.push(class);
            continue;
        }
        let atoms = model.users.select(Axis(0), &users);
        groups.histograms.push(Histogram::uniform(atoms)?);
        groups.class_ids.push(class);
        groups.members.push(users);
    }
    Ok(groups)
}

/// `sum_i W2^2(class_i, barycenter)` with every distance computed by Sinkhorn.
pub fn defense_loss(
    class_hists: &[Histogram],
    barycenter: &BarycenterSolution,
    sinkhorn_cfg: &SinkhornConfig,
) -> Result<TransportCost> {
    let mut total = TransportCost {
        value: 0.0,
        converged: true,
    };
    for h in class_hists {
        let c = cost_matrix(h.atoms(), barycenter.support.view())?;
        let t = sinkhorn(h.weights(), barycenter.alpha.view(), &c, sinkhorn_cfg)?;
        total.value += t.cost(&c);
        total.converged &= t.converged;
    }
    Ok(total)
}

/// Checks `t` against row marginal `1/n` and column marginal `alpha`.
fn validate_coupling(t: &Coupling, n: usize, alpha: &Array1<f64>) -> Result<()> {
    let (rows, cols) = t.plan.dim();
    if rows != n || cols != alpha.len() {
        return Err(invalid(format!(
            "coupling is {rows}x{cols}, expected {n}x{}",
            alpha.len()
        )));
    }
    let row_err = t
        .plan
        .sum_axis(Axis(1))
        .iter()
        .map(|s| (s - 1.0 / n as f64).abs())
        .fold(0.0, f64::max);
    let col_err = t
        .plan
        .sum_axis(Axis(0))
        .iter()
        .zip(alpha.iter())
        .map(|(s, a)| (s - a).abs())
        .fold(0.0, f64::max);
    let err = row_err.max(col_err);
    if err > COUPLING_MARGINAL_TOL {
        return Err(invalid(format!(
            "coupling marginals off by {err:.3e} (tolerance {COUPLING_MARGINAL_TOL:e})"
        )));
    }
    Ok(())
}

/// Gradient of the defense loss with respect to the user table.
///
/// For user `p` of class `i`: `2 (y_p / N_i - sum_q T_i(p, q) s_q)`, with `s_q` the
/// barycenter support. Unlabeled users and items receive no gradient.
pub fn defense_gradient(
    model: &EmbeddingModel,
    groups: &ClassGroups,
    barycenter: &BarycenterSolution,
    couplings: &[Coupling],
) -> Result<Array2<f64>> {
    if couplings.len() != groups.members.len() {
        return Err(RaidError::DimensionMismatch {
            expected: groups.members.len(),
            found: couplings.len(),
        });
    }
    let mut grad = Array2::zeros(model.users.raw_dim());
    for (users, t) in groups.members.iter().zip(couplings) {
        validate_coupling(t, users.len(), &barycenter.alpha)?;
        let anchors = t.plan.dot(&barycenter.support);
        let inv_n = 1.0 / users.len() as f64;
        for (&u, anchor) in users.iter().zip(anchors.axis_iter(Axis(0))) {
            let mut row = grad.row_mut(u);
            row.assign(&model.users.row(u));
            row *= inv_n;
            row -= &anchor;
            row *= 2.0;
        }
    }
    Ok(grad)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every user-embedding entry.
pub fn dp_perturb(model: &EmbeddingModel, sigma: f64, seed: u64) -> Result<EmbeddingModel> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let mut out = model.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.users.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarycenterConfig {
    pub tau: f64,
    pub steps: usize,
    pub schedule: StepSchedule,
    pub support_size: usize,
    pub strategy: SupportStrategy,
}

impl Default for BarycenterConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            steps: 500,
            schedule: StepSchedule::default(),
            support_size: 512,
            strategy: SupportStrategy::Subsample,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    pub init_std: f64,
    /// Defense weight.
    pub eta: f64,
    /// Barycenter refresh period, in Phase-II epochs.
    pub xi: usize,
    /// Cross-entropy-only epochs.
    pub e1: usize,
    /// Joint epochs.
    pub e2: usize,
    /// SGD step size.
    pub mu: f64,
    pub batch_size: usize,
    pub neg_ratio: usize,
    pub seed: u64,
    pub barycenter: BarycenterConfig,
    /// Sinkhorn settings for the per-epoch class-to-barycenter couplings.
    pub sinkhorn: SinkhornConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            init_std: 0.01,
            eta: 1.0,
            xi: 4,
            e1: 5,
            e2: 15,
            mu: 10.0,
            batch_size: 256,
            neg_ratio: 4,
            seed: 0,
            barycenter: BarycenterConfig::default(),
            sinkhorn: SinkhornConfig {
                epsilon: Epsilon::RelativeToMeanCost(1e-2),
                max_iter: 100,
                tol: 1e-5,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(invalid("eta must be >= 0"));
        }
        if self.xi == 0 {
            return Err(invalid("xi must be >= 1"));
        }
        if !(self.mu > 0.0) {
            return Err(invalid("mu must be > 0"));
        }
        if self.neg_ratio == 0 {
            return Err(invalid("neg_ratio must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.embedding_dim == 0 {
            return Err(invalid("embedding_dim must be >= 1"));
        }
        if !(self.barycenter.tau > 0.0) {
            return Err(invalid("tau must be > 0"));
        }
        if self.barycenter.support_size == 0 {
            return Err(invalid("support_size must be >= 1"));
        }
        Ok(())
    }
}

/// Implicit-feedback training pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub num_users: usize,
    pub num_items: usize,
    pub positives: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Recommend,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean CE over the epoch's batches; `None` when there are no interactions.
    pub ce_loss: Option<f64>,
    /// Defense loss at the start of the epoch, from that epoch's couplings.
    pub defense_loss: Option<f64>,
    pub barycenter_refreshed: bool,
    pub couplings_converged: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub log: Vec<EpochLog>,
    pub skipped_negative_users: usize,
}

/// Runs the full schedule from a Gaussian initialization.
pub fn train_raid(data: &TrainData, labels: &ClassLabels, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let model = EmbeddingModel::gaussian(
        data.num_users,
        data.num_items,
        config.embedding_dim,
        config.init_std,
        config.seed,
    )?;
    train_raid_from(model, data, labels, config, |_, _| {})
}

/// Per-class state frozen for the duration of one epoch.
struct EpochDefense {
    members: Vec<Vec<usize>>,
    inv_sizes: Vec<f64>,
    /// `sum_q T_i(p, q) s_q` for every member, class by class.
    anchors: Vec<Array2<f64>>,
}

impl EpochDefense {
    /// `y_p -= step * 2 (y_p / N_i - anchor_p)` for every labeled user.
    fn apply(&self, model: &mut EmbeddingModel, step: f64) {
        for ((users, anchors), &inv_n) in self.members.iter().zip(&self.anchors).zip(&self.inv_sizes) {
            for (&u, anchor) in users.iter().zip(anchors.axis_iter(Axis(0))) {
                for (y, a) in model.users.row_mut(u).iter_mut().zip(anchor) {
                    *y -= step * 2.0 * (*y * inv_n - a);
                }
            }
        }
    }
}

struct DefenseState {
    barycenter: Option<BarycenterSolution>,
    warm: Vec<Option<DualPair>>,
}

/// Runs the schedule starting from `model`; `on_epoch` sees every completed epoch.
///
/// With no training interactions each epoch is a single defense-only step, which
/// is how a frozen set of embeddings is defended.
pub fn train_raid_from(
    mut model: EmbeddingModel,
    data: &TrainData,
    labels: &ClassLabels,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &EmbeddingModel),
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.num_users() != data.num_users || model.num_items() != data.num_items {
        return Err(invalid(format!(
            "model is {}x{} but data declares {} users and {} items",
            model.num_users(),
            model.num_items(),
            data.num_users,
            data.num_items
        )));
    }
    for &(u, v) in &data.positives {
        model.check_pair(u, v)?;
    }

    let mut log = Vec::with_capacity(config.e1 + config.e2);
    let mut skipped_negative_users = 0;
    let mut state = DefenseState {
        barycenter: None,
        warm: Vec::new(),
    };
    let mut step = SparseCeStep::new();

    for epoch in 0..config.e1 + config.e2 {
        let phase = if epoch < config.e1 {
            Phase::Recommend
        } else {
            Phase::Joint
        };
        let defend = phase == Phase::Joint && config.eta > 0.0;

        let mut entry = EpochLog {
            epoch,
            phase,
            ce_loss: None,
            defense_loss: None,
            barycenter_refreshed: false,
            couplings_converged: true,
        };

        let defense = if defend {
            let refresh = (epoch - config.e1).is_multiple_of(config.xi);
            prepare_defense(&model, labels, config, epoch, refresh, &mut state, &mut entry)?
        } else {
            None
        };

        let mut triples: Vec<(usize, usize, f64)> = Vec::new();
        if !data.positives.is_empty() {
            let sample = negative_sample(
                &data.positives,
                data.num_items,
                config.neg_ratio,
                sub_seed(config.seed, STREAM_NEGATIVES, epoch as u64),
            )?;
            skipped_negative_users = skipped_negative_users.max(sample.skipped_users);
            triples = sample.set.labeled().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_SHUFFLE, epoch as u64));
            triples.shuffle(&mut rng);
        }

        let defense_step = config.mu * config.eta;
        if triples.is_empty() {
            if let Some(d) = &defense {
                d.apply(&mut model, defense_step);
            }
        } else {
            let mut loss_sum = 0.0;
            for batch in triples.chunks(config.batch_size) {
                loss_sum += step.prepare(&model, batch);
                if let Some(d) = &defense {
                    d.apply(&mut model, defense_step);
                }
                step.apply(&mut model, config.mu);
            }
            entry.ce_loss = Some(loss_sum / triples.len() as f64);
        }

        let bad_loss = entry
            .ce_loss
            .iter()
            .chain(entry.defense_loss.iter())
            .any(|l| !l.is_finite());
        if bad_loss || !model.is_finite() {
            return Err(RaidError::NumericalAbort {
                epoch,
                reason: format!(
                    "non-finite value (ce {:?}, defense {:?})",
                    entry.ce_loss, entry.defense_loss
                ),
            });
        }
        debug!(
            "epoch {epoch} {:?}: ce {:?} defense {:?}",
            phase, entry.ce_loss, entry.defense_loss
        );
        on_epoch(&entry, &model);
        log.push(entry);
    }

    Ok(TrainOutcome {
        model,
        log,
        skipped_negative_users,
    })
}

fn prepare_defense(
    model: &EmbeddingModel,
    labels: &ClassLabels,
    config: &TrainConfig,
    epoch: usize,
    refresh: bool,
    state: &mut DefenseState,
    entry: &mut EpochLog,
) -> Result<Option<EpochDefense>> {
    let groups = class_histograms(model, labels)?;
    if groups.histograms.is_empty() {
        return Ok(None);
    }
    if refresh || state.barycenter.is_none() {
        let pool = groups.stacked_atoms();
        let size = config.barycenter.support_size.min(pool.nrows());
        let support = select_support(
            pool.view(),
            size,
            config.barycenter.strategy,
            sub_seed(config.seed, STREAM_SUPPORT, epoch as u64),
        )?;
        let lambda = groups.lambda()?;
        let bary = solve_barycenter(
            &groups.histograms,
            support.view(),
            lambda.view(),
            config.barycenter.tau,
            config.barycenter.steps,
            config.barycenter.schedule,
        )?;
        state.barycenter = Some(bary);
        state.warm = vec![None; groups.histograms.len()];
        entry.barycenter_refreshed = true;
    }
    let bary = state.barycenter.as_ref().expect("barycenter prepared");
    if state.warm.len() != groups.histograms.len() {
        state.warm = vec![None; groups.histograms.len()];
    }

    let mut anchors = Vec::with_capacity(groups.histograms.len());
    let mut loss = 0.0;
    for (h, warm) in groups.histograms.iter().zip(state.warm.iter_mut()) {
        let c = cost_matrix(h.atoms(), bary.support.view())?;
        let (mut t, duals) = sinkhorn_warm(h.weights(), bary.alpha.view(), &c, &config.sinkhorn, warm.as_ref())?;
        if !t.converged {
            t.round_to_marginals();
        }
        validate_coupling(&t, h.len(), &bary.alpha)?;
        entry.couplings_converged &= t.converged;
        loss += t.cost(&c);
        anchors.push(t.plan.dot(&bary.support));
        *warm = Some(duals);
    }
    if !entry.couplings_converged {
        debug!("epoch {epoch}: Sinkhorn stopped before reaching its tolerance; plan rounded");
    }
    entry.defense_loss = Some(loss);
    Ok(Some(EpochDefense {
        inv_sizes: groups.members.iter().map(|m| 1.0 / m.len() as f64).collect(),
        members: groups.members,
        anchors,
    }))
}
