mod common;

use common::{rng, rel_err};
use ndarray::{array, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raid::barycenter::{solve_barycenter, BarycenterSolution, StepSchedule};
use raid::model::{ce_gradient, ce_loss, EmbeddingModel, InteractionSet};
use raid::ot::{cost_matrix, exact_ot_oracle, w2_squared, Coupling, Histogram, SinkhornConfig, W2Method};
use raid::train::{
    class_histograms, defense_gradient, defense_loss, dp_perturb, negative_sample, sub_seed,
    train_raid, train_raid_from, ClassLabels, TrainConfig, TrainData, STREAM_NEGATIVES,
    STREAM_SHUFFLE,
};

fn toy_data(users: usize, items: usize, per_user: usize, seed: u64) -> (TrainData, ClassLabels) {
    let mut r = rng(seed);
    let mut positives = Vec::new();
    for u in 0..users {
        let mut all: Vec<usize> = (0..items).collect();
        all.shuffle(&mut r);
        positives.extend(all[..per_user].iter().map(|&v| (u, v)));
    }
    let labels = (0..users).map(|_| Some(r.random_range(1..=2u32))).collect();
    (
        TrainData {
            num_users: users,
            num_items: items,
            positives,
        },
        ClassLabels::new(labels, 2).unwrap(),
    )
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig {
        embedding_dim: 6,
        e1: 3,
        e2: 5,
        xi: 2,
        batch_size: 32,
        mu: 1.0,
        seed: 5,
        ..TrainConfig::default()
    };
    c.barycenter.support_size = 16;
    c.barycenter.steps = 50;
    c
}

#[test]
fn eta_zero_matches_plain_recommender_bitwise() {
    let (data, labels) = toy_data(30, 25, 6, 1);
    let mut a = small_config();
    a.eta = 0.0;
    a.e1 = 3;
    a.e2 = 5;
    let mut b = a;
    b.e1 = 8;
    b.e2 = 0;
    let ma = train_raid(&data, &labels, &a).unwrap().model;
    let mb = train_raid(&data, &labels, &b).unwrap().model;
    assert_eq!(ma, mb);

    // With no joint epochs the trade-off weight is irrelevant.
    let mut c = b;
    c.eta = 3.0;
    assert_eq!(train_raid(&data, &labels, &c).unwrap().model, mb);
}

#[test]
fn eta_zero_matches_reference_sgd_loop() {
    let (data, labels) = toy_data(20, 15, 4, 2);
    let mut cfg = small_config();
    cfg.eta = 0.0;
    let trained = train_raid(&data, &labels, &cfg).unwrap().model;

    let mut m = EmbeddingModel::gaussian(20, 15, cfg.embedding_dim, cfg.init_std, cfg.seed).unwrap();
    for epoch in 0..(cfg.e1 + cfg.e2) as u64 {
        let sample = negative_sample(
            &data.positives,
            data.num_items,
            cfg.neg_ratio,
            sub_seed(cfg.seed, STREAM_NEGATIVES, epoch),
        )
        .unwrap();
        let mut triples: Vec<_> = sample.set.labeled().collect();
        triples.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_SHUFFLE, epoch)));
        for chunk in triples.chunks(cfg.batch_size) {
            let pos = chunk.iter().filter(|t| t.2 == 1.0).map(|t| (t.0, t.1)).collect();
            let neg = chunk.iter().filter(|t| t.2 == 0.0).map(|t| (t.0, t.1)).collect();
            let g = ce_gradient(&m, &InteractionSet::new(pos, neg).unwrap()).unwrap();
            m.users.scaled_add(-cfg.mu, &g.users);
            m.items.scaled_add(-cfg.mu, &g.items);
        }
    }
    for (x, y) in trained.users.iter().chain(trained.items.iter()).zip(m.users.iter().chain(m.items.iter())) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn training_is_deterministic() {
    let (data, labels) = toy_data(30, 25, 6, 3);
    let cfg = small_config();
    let a = train_raid(&data, &labels, &cfg).unwrap();
    let b = train_raid(&data, &labels, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
    let mut other = cfg;
    other.seed += 1;
    assert_ne!(train_raid(&data, &labels, &other).unwrap().model, a.model);
}

#[test]
fn refresh_schedule_and_phases() {
    let (data, labels) = toy_data(30, 25, 6, 4);
    let mut cfg = small_config();
    cfg.e1 = 2;
    cfg.e2 = 7;
    cfg.xi = 3;
    let out = train_raid(&data, &labels, &cfg).unwrap();
    let refreshed: Vec<usize> = out.log.iter().filter(|l| l.barycenter_refreshed).map(|l| l.epoch).collect();
    assert_eq!(refreshed, vec![2, 5, 8]);
    assert!(out.log[..2].iter().all(|l| l.defense_loss.is_none()));
    assert!(out.log[2..].iter().all(|l| l.defense_loss.is_some()));
}

fn ce_batch(users: usize, items: usize, seed: u64) -> (EmbeddingModel, InteractionSet) {
    let m = EmbeddingModel::gaussian(users, items, 3, 0.5, seed).unwrap();
    let pos = vec![(0, 0), (1, 2), (2, 1), (0, 3)];
    let neg = vec![(0, 1), (1, 0), (2, 3), (2, 2)];
    (m, InteractionSet::new(pos, neg).unwrap())
}

#[test]
fn ce_gradient_matches_finite_differences() {
    let (m, batch) = ce_batch(3, 4, 11);
    let g = ce_gradient(&m, &batch).unwrap();
    let h = 1e-6;
    for (table, grad) in [(0, &g.users), (1, &g.items)] {
        let shape = grad.dim();
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let bump = |delta: f64| {
                    let mut p = m.clone();
                    if table == 0 {
                        p.users[[i, j]] += delta;
                    } else {
                        p.items[[i, j]] += delta;
                    }
                    ce_loss(&p, &batch).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - grad[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad[[i, j]]);
            }
        }
    }
}

#[test]
fn small_ce_step_descends() {
    let (m, batch) = ce_batch(3, 4, 12);
    let g = ce_gradient(&m, &batch).unwrap();
    let mut next = m.clone();
    next.users.scaled_add(-1e-3, &g.users);
    next.items.scaled_add(-1e-3, &g.items);
    assert!(ce_loss(&next, &batch).unwrap() < ce_loss(&m, &batch).unwrap());
}

fn exact_defense(model: &EmbeddingModel, labels: &ClassLabels, bary: &BarycenterSolution) -> (f64, Vec<Coupling>) {
    let groups = class_histograms(model, labels).unwrap();
    let mut total = 0.0;
    let mut plans = Vec::new();
    for h in &groups.histograms {
        let c = cost_matrix(h.atoms(), bary.support.view()).unwrap();
        let (t, cost) = exact_ot_oracle(h.weights(), bary.alpha.view(), &c).unwrap();
        total += cost;
        plans.push(t);
    }
    (total, plans)
}

fn fixed_barycenter(model: &EmbeddingModel, labels: &ClassLabels, support: usize) -> BarycenterSolution {
    let groups = class_histograms(model, labels).unwrap();
    let pool = groups.stacked_atoms();
    let s = pool.slice(ndarray::s![..support, ..]).to_owned();
    solve_barycenter(&groups.histograms, s.view(), groups.lambda().unwrap().view(), 0.5, 200, StepSchedule::default())
        .unwrap()
}

#[test]
fn defense_gradient_matches_finite_differences() {
    let model = EmbeddingModel::gaussian(6, 1, 2, 1.0, 21).unwrap();
    let labels = ClassLabels::new(vec![Some(1), Some(2), Some(1), Some(2), Some(1), Some(2)], 2).unwrap();
    let bary = fixed_barycenter(&model, &labels, 4);
    let groups = class_histograms(&model, &labels).unwrap();
    let (_, plans) = exact_defense(&model, &labels, &bary);
    let grad = defense_gradient(&model, &groups, &bary, &plans).unwrap();
    let h = 1e-6;
    for u in 0..6 {
        for j in 0..2 {
            let bump = |delta: f64| {
                let mut p = model.clone();
                p.users[[u, j]] += delta;
                exact_defense(&p, &labels, &bary).0
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - grad[[u, j]]).abs() <= 1e-5 * (1.0 + fd.abs()), "user {u} dim {j}: {fd} vs {}", grad[[u, j]]);
        }
    }
}

#[test]
fn defense_steps_never_increase_exact_loss() {
    let mut model = EmbeddingModel::gaussian(16, 1, 2, 1.0, 8).unwrap();
    let labels = ClassLabels::new((0..16).map(|u| Some(1 + (u % 2) as u32)).collect(), 2).unwrap();
    for u in (0..16).step_by(2) {
        model.users[[u, 0]] += 2.0;
    }
    let bary = fixed_barycenter(&model, &labels, 8);
    let mu = 1e-2;
    let (mut prev, _) = exact_defense(&model, &labels, &bary);
    for _ in 0..20 {
        let groups = class_histograms(&model, &labels).unwrap();
        let (_, plans) = exact_defense(&model, &labels, &bary);
        let g = defense_gradient(&model, &groups, &bary, &plans).unwrap();
        model.users.scaled_add(-mu, &g);
        let (now, _) = exact_defense(&model, &labels, &bary);
        assert!(now <= prev + 1e-12, "{now} > {prev}");
        prev = now;
    }
}

#[test]
fn frozen_embeddings_move_towards_the_barycenter() {
    let mut model = EmbeddingModel::gaussian(40, 3, 2, 1.0, 9).unwrap();
    let labels = ClassLabels::new((0..40).map(|u| Some(1 + (u % 2) as u32)).collect(), 2).unwrap();
    for u in (0..40).step_by(2) {
        model.users[[u, 0]] += 2.0;
    }
    let data = TrainData {
        num_users: 40,
        num_items: 3,
        positives: vec![],
    };
    let mut cfg = small_config();
    cfg.e1 = 0;
    cfg.e2 = 20;
    cfg.xi = 100;
    cfg.mu = 1e-2;
    cfg.eta = 1.0;
    let out = train_raid_from(model.clone(), &data, &labels, &cfg, |_, _| {}).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|l| l.defense_loss.unwrap()).collect();
    assert!(losses.last().unwrap() < &losses[0]);
    assert!(out.log.iter().filter(|l| l.barycenter_refreshed).count() == 1);
    assert_eq!(out.model.items, model.items);
}

#[test]
fn defense_loss_sums_class_distances() {
    let model = EmbeddingModel::gaussian(12, 1, 3, 1.0, 30).unwrap();
    let labels = ClassLabels::new((0..12).map(|u| Some(1 + (u % 3) as u32)).collect(), 3).unwrap();
    let bary = fixed_barycenter(&model, &labels, 5);
    let groups = class_histograms(&model, &labels).unwrap();
    let cfg = SinkhornConfig::default();
    let loss = defense_loss(&groups.histograms, &bary, &cfg).unwrap();
    let target = bary.histogram().unwrap();
    let sum: f64 = groups
        .histograms
        .iter()
        .map(|h| w2_squared(h, &target, W2Method::Sinkhorn(cfg)).unwrap().value)
        .sum();
    assert!(rel_err(loss.value, sum) < 1e-12);
}

#[test]
fn dirac_classes_have_closed_form_loss() {
    let hists = vec![Histogram::dirac(&[1.0, 1.0]).unwrap(), Histogram::dirac(&[-2.0, 0.0]).unwrap()];
    let bary = BarycenterSolution {
        support: array![[0.0, 1.0]],
        alpha: array![1.0],
        potentials: raid::barycenter::DualPotentials::zeros(2, 1),
        dual_value: 0.0,
        lambda: array![0.5, 0.5],
        tau: 1.0,
        best_trace: vec![],
    };
    let loss = defense_loss(&hists, &bary, &SinkhornConfig::default()).unwrap();
    assert!((loss.value - (1.0 + 5.0)).abs() < 1e-9);
}

#[test]
fn dp_noise_has_requested_scale() {
    let model = EmbeddingModel::new(Array2::zeros((100, 100)), Array2::ones((3, 100))).unwrap();
    let sigma = 0.3;
    let noisy = dp_perturb(&model, sigma, 4).unwrap();
    let x: Array1<f64> = noisy.users.iter().copied().collect();
    let mean = x.mean().unwrap();
    let std = x.var(1.0).sqrt();
    assert!(mean.abs() < 0.05 * sigma);
    assert!((std - sigma).abs() <= 0.05 * sigma, "std {std}");
    assert_eq!(noisy.items, model.items);
    assert_eq!(dp_perturb(&model, 0.0, 4).unwrap(), model);
    assert!(dp_perturb(&model, -1.0, 4).is_err());
    assert_eq!(noisy.users.sum_axis(Axis(0)).len(), 100);
}
