use std::collections::HashSet;
use std::fs;

use raid::data::{
    build_splits, filter_kcore, ingest, parse_ratings, parse_users, AttributeScheme, Dataset, KCore,
    RatingFormat, RatingRecord, RawRatings,
};
use raid::synth::{generate, write_movielens, SynthConfig};

fn rec(user: &str, item: &str, ts: i64) -> RatingRecord {
    RatingRecord {
        user: user.into(),
        item: item.into(),
        rating: 4.0,
        timestamp: ts,
    }
}

fn pairs(r: &RawRatings) -> HashSet<(String, String)> {
    r.records.iter().map(|x| (x.user.clone(), x.item.clone())).collect()
}

#[test]
fn kcore_toy_cascades_to_fixed_point() {
    let raw = RawRatings {
        records: vec![
            rec("1", "a", 0),
            rec("1", "b", 1),
            rec("2", "a", 2),
            rec("2", "b", 3),
            rec("3", "a", 4),
            rec("3", "c", 5),
            rec("4", "c", 6),
            rec("5", "d", 7),
            rec("5", "e", 8),
            rec("6", "d", 9),
            rec("6", "d", 10),
        ],
    };
    let out = filter_kcore(&raw, 2, 2).unwrap();
    let expected: HashSet<(String, String)> = [("1", "a"), ("1", "b"), ("2", "a"), ("2", "b")]
        .iter()
        .map(|(u, i)| (u.to_string(), i.to_string()))
        .collect();
    assert_eq!(pairs(&out), expected);
    assert_eq!(filter_kcore(&out, 2, 2).unwrap(), out);
}

#[test]
fn kcore_is_idempotent_on_synthetic_data() {
    let data = generate(&SynthConfig {
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let once = filter_kcore(&data.ratings, 10, 20).unwrap();
    assert!(once.len() < data.ratings.len());
    assert_eq!(filter_kcore(&once, 10, 20).unwrap(), once);
}

fn synth_dataset(seed: u64) -> Dataset {
    let data = generate(&SynthConfig {
        num_users: 80,
        num_items: 60,
        interactions_per_user: 12,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    ingest(
        &data.ratings,
        Some((&data.users, AttributeScheme::Gender2)),
        KCore { min_user: 5, min_item: 5 },
        seed,
    )
    .unwrap()
}

#[test]
fn splits_conserve_interactions() {
    let ds = synth_dataset(1);
    let m = &ds.manifest;
    assert_eq!(ds.train.len() + ds.held_out.len() + 2 * ds.num_users(), m.num_interactions);
    assert_eq!(m.num_held_out, ds.held_out.len());
    assert_eq!(ds.held_out.len(), (m.num_interactions - 2 * ds.num_users()) / 10);
    let mut train_users = vec![0; ds.num_users()];
    for &(u, _) in &ds.train {
        train_users[u] += 1;
    }
    assert!(train_users.iter().all(|&c| c >= 1));
    let all: HashSet<(usize, usize)> = ds.train.iter().chain(&ds.held_out).copied().collect();
    assert_eq!(all.len(), ds.train.len() + ds.held_out.len());
    for u in 0..ds.num_users() {
        assert_ne!(ds.test[u], ds.validation[u]);
        assert!(!all.contains(&(u, ds.test[u])));
    }
}

#[test]
fn leave_one_out_follows_time() {
    let raw = RawRatings {
        records: vec![
            rec("7", "x", 30),
            rec("7", "y", 10),
            rec("7", "z", 20),
            rec("7", "w", 40),
            rec("7", "x", 5),
        ],
    };
    let ds = build_splits(&raw, 0).unwrap();
    let name = |v: usize| ds.item_ids[v].as_str();
    // x is deduplicated to its earliest time, 5.
    assert_eq!(name(ds.test[0]), "w");
    assert_eq!(name(ds.validation[0]), "z");
    assert_eq!(ds.manifest.duplicate_pairs, 1);
    assert_eq!(ds.train.len(), 2);
}

#[test]
fn short_users_are_dropped() {
    let raw = RawRatings {
        records: vec![rec("1", "a", 0), rec("1", "b", 1), rec("2", "a", 0), rec("2", "b", 1), rec("2", "c", 2)],
    };
    let ds = build_splits(&raw, 0).unwrap();
    assert_eq!(ds.user_ids, vec!["2".to_string()]);
    assert_eq!(ds.manifest.dropped_short_users, 1);
}

#[test]
fn splits_are_seed_deterministic() {
    let a = synth_dataset(4);
    assert_eq!(a, synth_dataset(4));
    let data = generate(&SynthConfig {
        num_users: 80,
        num_items: 60,
        interactions_per_user: 12,
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let other = ingest(&data.ratings, None, KCore { min_user: 5, min_item: 5 }, 99).unwrap();
    assert_eq!(other.test, a.test);
    assert_ne!(other.held_out, a.held_out);
}

#[test]
fn dataset_round_trips_through_disk() {
    let ds = synth_dataset(5);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    let first = fs::read(dir.path().join("manifest.json")).unwrap();
    back.save(dir.path()).unwrap();
    assert_eq!(fs::read(dir.path().join("manifest.json")).unwrap(), first);
}

#[test]
fn files_on_disk_parse_back() {
    let data = generate(&SynthConfig {
        num_users: 30,
        num_items: 40,
        interactions_per_user: 6,
        seed: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_movielens(&data, dir.path()).unwrap();
    let ratings = parse_ratings(dir.path().join("ratings.dat"), RatingFormat::MovielensDat).unwrap();
    assert_eq!(ratings, data.ratings);
    assert_eq!(parse_users(dir.path().join("users.dat")).unwrap(), data.users);

    let csv = dir.path().join("ratings.csv");
    let mut text = String::from("userId,movieId,rating,timestamp\n");
    for r in &data.ratings.records {
        text += &format!("{},{},{},{}\n", r.user, r.item, r.rating, r.timestamp);
    }
    fs::write(&csv, text).unwrap();
    assert_eq!(parse_ratings(&csv, RatingFormat::Csv).unwrap(), data.ratings);
}

#[test]
fn missing_and_garbage_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(parse_ratings(dir.path().join("nope.dat"), RatingFormat::MovielensDat).is_err());
    let bad = dir.path().join("bad.dat");
    fs::write(&bad, "1::2::3::4\nthis is not a rating\nneither::is\n").unwrap();
    assert!(parse_ratings(&bad, RatingFormat::MovielensDat).is_err());
}
