//! Synthetic MovieLens-format interactions with an attribute planted in user tastes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{RatingRecord, RawRatings, UserRecord};
use crate::error::{invalid, io_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    pub interactions_per_user: usize,
    /// Shift of each gender group's taste vector along the first latent axis.
    pub attribute_strength: f64,
    /// Inverse temperature of item choice.
    pub sharpness: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 300,
            num_items: 200,
            latent_dim: 8,
            interactions_per_user: 20,
            attribute_strength: 1.5,
            sharpness: 2.0,
            seed: 0,
        }
    }
}

/// Ratings and user attributes; user ids are `1..=N`, item ids `1..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub ratings: RawRatings,
    pub users: Vec<UserRecord>,
}

const AGES: [u32; 7] = [1, 18, 25, 35, 45, 50, 56];

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    let SynthConfig {
        num_users: n,
        num_items: m,
        latent_dim: d,
        interactions_per_user: k,
        ..
    } = *config;
    if n == 0 || m == 0 || d == 0 {
        return Err(invalid("synthetic sizes must be positive"));
    }
    if k == 0 || k > m {
        return Err(invalid(format!("interactions_per_user must be in 1..={m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let items = Array2::from_shape_simple_fn((m, d), || StandardNormal.sample(&mut rng));
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel");

    let mut ratings = Vec::with_capacity(n * k);
    let mut users = Vec::with_capacity(n);
    for u in 0..n {
        let female = rng.random_bool(0.5);
        let age = AGES[rng.random_range(0..AGES.len())];
        let mut taste: Array1<f64> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
        taste[0] += if female { config.attribute_strength } else { -config.attribute_strength };

        // Gumbel top-k draws k distinct items with probability proportional to exp(sharpness * score).
        let mut keys: Vec<(f64, usize)> = items
            .rows()
            .into_iter()
            .enumerate()
            .map(|(v, w)| (config.sharpness * taste.dot(&w) / (d as f64).sqrt() + gumbel.sample(&mut rng), v))
            .collect();
        keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = keys[..k].iter().map(|&(_, v)| v).collect();
        chosen.shuffle(&mut rng);
        for (t, v) in chosen.into_iter().enumerate() {
            ratings.push(RatingRecord {
                user: (u + 1).to_string(),
                item: (v + 1).to_string(),
                rating: f64::from(rng.random_range(1..=5u8)),
                timestamp: 978_300_000 + (t as i64) * 60 + u as i64,
            });
        }
        users.push(UserRecord {
            user: (u + 1).to_string(),
            gender: if female { "F" } else { "M" }.to_string(),
            age: age.to_string(),
        });
    }
    Ok(SynthData {
        ratings: RawRatings { records: ratings },
        users,
    })
}

/// Writes `ratings.dat` and `users.dat` in the ML-1M layout.
pub fn write_movielens(data: &SynthData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut text = String::new();
    for r in &data.ratings.records {
        writeln!(text, "{}::{}::{}::{}", r.user, r.item, r.rating, r.timestamp).expect("string write");
    }
    let path = dir.join("ratings.dat");
    fs::write(&path, &text).map_err(io_err(&path))?;
    text.clear();
    for u in &data.users {
        writeln!(text, "{}::{}::{}::0::00000", u.user, u.gender, u.age).expect("string write");
    }
    let path = dir.join("users.dat");
    fs::write(&path, &text).map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn shape_and_distinct_items() {
        let cfg = SynthConfig {
            num_users: 20,
            num_items: 30,
            interactions_per_user: 7,
            ..SynthConfig::default()
        };
        let d = generate(&cfg).unwrap();
        assert_eq!(d.ratings.len(), 140);
        assert_eq!(d.users.len(), 20);
        for u in 1..=20 {
            let items: HashSet<_> = d
                .ratings
                .records
                .iter()
                .filter(|r| r.user == u.to_string())
                .map(|r| r.item.clone())
                .collect();
            assert_eq!(items.len(), 7);
        }
    }

    #[test]
    fn seeded() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn too_many_interactions_rejected() {
        let cfg = SynthConfig {
            num_items: 5,
            interactions_per_user: 6,
            ..SynthConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }
}
