//! MovieLens-style ingest: parsing, k-core filtering, attribute binning and splits.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, RaidError, Result};
use crate::eval::EvalCase;
use crate::train::{ClassLabels, TrainData};

/// Largest tolerated share of malformed lines in an input file.
pub const MALFORMED_TOLERANCE: f64 = 0.01;
const MAX_REPORTED_LINES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingFormat {
    /// `user::item::rating::timestamp`
    MovielensDat,
    /// `user,item,rating,timestamp`, optional header row.
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawRatings {
    pub records: Vec<RatingRecord>,
}

impl RawRatings {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn split_line(line: &str, format: RatingFormat) -> Vec<String> {
    match format {
        RatingFormat::MovielensDat => line.split("::").map(|s| s.trim().to_string()).collect(),
        RatingFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(line.as_bytes());
            rdr.records()
                .next()
                .and_then(|r| r.ok())
                .map(|r| r.iter().map(str::to_string).collect())
                .unwrap_or_default()
        }
    }
}

fn rating_from_fields(fields: &[String]) -> Option<RatingRecord> {
    let [user, item, rating, ts] = fields else {
        return None;
    };
    if user.is_empty() || item.is_empty() {
        return None;
    }
    Some(RatingRecord {
        user: user.clone(),
        item: item.clone(),
        rating: rating.parse().ok().filter(|r: &f64| r.is_finite())?,
        timestamp: ts.parse().ok()?,
    })
}

/// Line-oriented parse shared by the ratings and users readers.
///
/// Blank lines are ignored. An unparseable first line containing letters is taken
/// as a header when `allow_header` is set.
fn parse_lines<T>(
    reader: impl BufRead,
    path: &Path,
    allow_header: bool,
    mut parse: impl FnMut(&str) -> Option<T>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    let mut total = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match parse(line) {
            Some(rec) => out.push(rec),
            None if idx == 0 && allow_header && line.chars().any(char::is_alphabetic) => continue,
            None => bad.push(idx + 1),
        }
        total += 1;
    }
    if total == 0 {
        warn!("{} contains no records", path.display());
    }
    if !bad.is_empty() {
        if bad.len() as f64 > MALFORMED_TOLERANCE * total as f64 {
            return Err(RaidError::Malformed {
                path: path.to_path_buf(),
                count: bad.len(),
                total,
                lines: bad.into_iter().take(MAX_REPORTED_LINES).collect(),
            });
        }
        warn!(
            "{}: skipped {} malformed lines (first at line {})",
            path.display(),
            bad.len(),
            bad[0]
        );
    }
    Ok(out)
}

pub fn parse_ratings_from(reader: impl Read, path: &Path, format: RatingFormat) -> Result<RawRatings> {
    let records = parse_lines(
        BufReader::new(reader),
        path,
        format == RatingFormat::Csv,
        |line| rating_from_fields(&split_line(line, format)),
    )?;
    Ok(RawRatings { records })
}

pub fn parse_ratings(path: impl AsRef<Path>, format: RatingFormat) -> Result<RawRatings> {
    let path = path.as_ref();
    parse_ratings_from(open(path)?, path, format)
}

/// One row of an ML-1M style `users.dat`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user: String,
    pub gender: String,
    pub age: String,
}

pub fn parse_users_from(reader: impl Read, path: &Path) -> Result<Vec<UserRecord>> {
    parse_lines(BufReader::new(reader), path, false, |line| {
        let fields = split_line(line, RatingFormat::MovielensDat);
        match fields.as_slice() {
            [user, gender, age, _occupation, _zip] if !user.is_empty() => Some(UserRecord {
                user: user.clone(),
                gender: gender.clone(),
                age: age.clone(),
            }),
            _ => None,
        }
    })
}

/// Reads `user::gender::age::occupation::zip` rows.
pub fn parse_users(path: impl AsRef<Path>) -> Result<Vec<UserRecord>> {
    let path = path.as_ref();
    parse_users_from(open(path)?, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeScheme {
    /// F -> 1, M -> 2.
    Gender2,
    /// Below 35 -> 1, 35 to 45 inclusive -> 2, above 45 -> 3.
    Age3,
}

impl AttributeScheme {
    pub fn num_classes(self) -> u32 {
        match self {
            Self::Gender2 => 2,
            Self::Age3 => 3,
        }
    }

    fn description(self) -> &'static str {
        match self {
            Self::Gender2 => "F=1, M=2",
            Self::Age3 => "age<35=1, 35<=age<=45=2, age>45=3",
        }
    }
}

/// Class index (1-based) of a raw attribute value.
pub fn bin_attribute(raw: &str, scheme: AttributeScheme) -> Result<u32> {
    let raw = raw.trim();
    match scheme {
        AttributeScheme::Gender2 => match raw {
            "F" | "f" => Ok(1),
            "M" | "m" => Ok(2),
            _ => Err(invalid(format!("unknown gender token {raw:?}"))),
        },
        AttributeScheme::Age3 => {
            let age: u32 = raw
                .parse()
                .map_err(|_| invalid(format!("unparseable age {raw:?}")))?;
            Ok(match age {
                0..35 => 1,
                35..=45 => 2,
                _ => 3,
            })
        }
    }
}

/// Repeats a user filter then an item filter until neither removes anything.
///
/// Counts are over distinct partners, so repeated ratings of one pair count once.
pub fn filter_kcore(ratings: &RawRatings, min_user: usize, min_item: usize) -> Result<RawRatings> {
    if min_user == 0 || min_item == 0 {
        return Err(invalid("k-core thresholds must be >= 1"));
    }
    let mut keep: Vec<&RatingRecord> = ratings.records.iter().collect();
    loop {
        let before = keep.len();
        let users = distinct_counts(&keep, |r| (&r.user, &r.item));
        keep.retain(|r| users[r.user.as_str()] >= min_user);
        let items = distinct_counts(&keep, |r| (&r.item, &r.user));
        keep.retain(|r| items[r.item.as_str()] >= min_item);
        if keep.len() == before {
            break;
        }
    }
    if keep.is_empty() {
        return Err(invalid(format!(
            "k-core filter ({min_user}, {min_item}) removed every interaction"
        )));
    }
    Ok(RawRatings {
        records: keep.into_iter().cloned().collect(),
    })
}

fn distinct_counts<'a>(
    records: &[&'a RatingRecord],
    key: impl Fn(&'a RatingRecord) -> (&'a String, &'a String),
) -> HashMap<&'a str, usize> {
    let mut partners: HashMap<&str, HashSet<&str>> = HashMap::new();
    for r in records {
        let (k, p) = key(r);
        partners.entry(k).or_default().insert(p);
    }
    partners.into_iter().map(|(k, s)| (k, s.len())).collect()
}

/// Numeric ids sort by value and precede non-numeric ids, which sort lexically.
fn id_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KCore {
    pub min_user: usize,
    pub min_item: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSummary {
    pub scheme: AttributeScheme,
    pub num_classes: u32,
    pub binning: String,
    pub labeled_users: usize,
    /// Retained users with no attribute row or an unusable value.
    pub unlabeled_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub kcore: Option<KCore>,
    pub num_users: usize,
    pub num_items: usize,
    /// Distinct retained interactions, including the two held out per user.
    pub num_interactions: usize,
    pub num_train: usize,
    pub num_held_out: usize,
    pub dropped_short_users: usize,
    pub duplicate_pairs: usize,
    pub attribute: Option<AttributeSummary>,
}

/// Indexed interactions with chronological leave-one-out targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub train: Vec<(usize, usize)>,
    /// Interaction-level 10% held out from training.
    pub held_out: Vec<(usize, usize)>,
    /// Second-to-last item of every user.
    pub validation: Vec<usize>,
    /// Last item of every user.
    pub test: Vec<usize>,
    pub labels: Option<ClassLabels>,
    pub manifest: Manifest,
}

const DATASET_FORMAT_VERSION: u32 = 1;

/// Chronological leave-two-out per user, then a seeded 90/10 split of the rest.
///
/// Each user keeps at least one training interaction.
pub fn build_splits(ratings: &RawRatings, seed: u64) -> Result<Dataset> {
    // Per user, the earliest occurrence of each item.
    let mut per_user: HashMap<&str, HashMap<&str, i64>> = HashMap::new();
    let mut duplicates = 0;
    for r in &ratings.records {
        let items = per_user.entry(&r.user).or_default();
        match items.get_mut(r.item.as_str()) {
            Some(t) => {
                duplicates += 1;
                *t = (*t).min(r.timestamp);
            }
            None => {
                items.insert(&r.item, r.timestamp);
            }
        }
    }
    let before = per_user.len();
    per_user.retain(|_, items| items.len() >= 3);
    let dropped = before - per_user.len();
    if dropped > 0 {
        warn!("dropped {dropped} users with fewer than 3 distinct interactions");
    }
    if per_user.is_empty() {
        return Err(invalid("no user has the 3 interactions needed for a split"));
    }

    let mut user_ids: Vec<String> = per_user.keys().map(|s| s.to_string()).collect();
    user_ids.sort_by(|a, b| id_order(a, b));
    let mut item_ids: Vec<String> = per_user
        .values()
        .flat_map(|m| m.keys())
        .collect::<HashSet<_>>()
        .into_iter()
        .map(|s| s.to_string())
        .collect();
    item_ids.sort_by(|a, b| id_order(a, b));
    let item_index: HashMap<&str, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut validation = Vec::with_capacity(user_ids.len());
    let mut test = Vec::with_capacity(user_ids.len());
    let mut rest = Vec::new();
    let mut total = 0;
    for (u, id) in user_ids.iter().enumerate() {
        let mut seq: Vec<(i64, usize)> = per_user[id.as_str()]
            .iter()
            .map(|(item, &t)| (t, item_index[item]))
            .collect();
        seq.sort_unstable();
        total += seq.len();
        test.push(seq.pop().expect("3 or more").1);
        validation.push(seq.pop().expect("3 or more").1);
        rest.extend(seq.into_iter().map(|(_, v)| (u, v)));
    }

    let mut remaining = vec![0usize; user_ids.len()];
    for &(u, _) in &rest {
        remaining[u] += 1;
    }
    let quota = rest.len() / 10;
    let mut order: Vec<usize> = (0..rest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = vec![false; rest.len()];
    let mut n_held = 0;
    for i in order {
        if n_held == quota {
            break;
        }
        let u = rest[i].0;
        if remaining[u] > 1 {
            held[i] = true;
            remaining[u] -= 1;
            n_held += 1;
        }
    }
    let (held_out, train): (Vec<_>, Vec<_>) = rest
        .iter()
        .zip(&held)
        .partition(|(_, &h)| h);
    let train: Vec<(usize, usize)> = train.into_iter().map(|(p, _)| *p).collect();
    let held_out: Vec<(usize, usize)> = held_out.into_iter().map(|(p, _)| *p).collect();

    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        seed,
        kcore: None,
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        num_interactions: total,
        num_train: train.len(),
        num_held_out: held_out.len(),
        dropped_short_users: dropped,
        duplicate_pairs: duplicates,
        attribute: None,
    };
    Ok(Dataset {
        user_ids,
        item_ids,
        train,
        held_out,
        validation,
        test,
        labels: None,
        manifest,
    })
}

/// Full pipeline: k-core filter, split, and optional attribute labels.
pub fn ingest(
    ratings: &RawRatings,
    users: Option<(&[UserRecord], AttributeScheme)>,
    kcore: KCore,
    seed: u64,
) -> Result<Dataset> {
    let filtered = filter_kcore(ratings, kcore.min_user, kcore.min_item)?;
    let mut ds = build_splits(&filtered, seed)?;
    ds.manifest.kcore = Some(kcore);
    if let Some((records, scheme)) = users {
        ds.attach_attributes(records, scheme)?;
    }
    Ok(ds)
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Bins `records` under `scheme` and stores the labels of retained users.
    pub fn attach_attributes(&mut self, records: &[UserRecord], scheme: AttributeScheme) -> Result<()> {
        let index: HashMap<&str, usize> = self
            .user_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut labels = vec![None; self.num_users()];
        let mut bad = 0;
        for r in records {
            let Some(&u) = index.get(r.user.as_str()) else {
                continue;
            };
            let raw = match scheme {
                AttributeScheme::Gender2 => &r.gender,
                AttributeScheme::Age3 => &r.age,
            };
            match bin_attribute(raw, scheme) {
                Ok(c) => labels[u] = Some(c),
                Err(e) => {
                    bad += 1;
                    warn!("user {}: {e}; left unlabeled", r.user);
                }
            }
        }
        if bad > 0 {
            warn!("{bad} users dropped from the labeled set");
        }
        let labeled = labels.iter().flatten().count();
        self.labels = Some(ClassLabels::new(labels, scheme.num_classes())?);
        self.manifest.attribute = Some(AttributeSummary {
            scheme,
            num_classes: scheme.num_classes(),
            binning: scheme.description().to_string(),
            labeled_users: labeled,
            unlabeled_users: self.num_users() - labeled,
        });
        Ok(())
    }

    pub fn train_data(&self) -> TrainData {
        TrainData {
            num_users: self.num_users(),
            num_items: self.num_items(),
            positives: self.train.clone(),
        }
    }

    /// Leave-one-out cases with each user's training items excluded from ranking.
    pub fn eval_cases(&self) -> Vec<Option<EvalCase>> {
        let mut seen: Vec<HashSet<usize>> = vec![HashSet::new(); self.num_users()];
        for &(u, v) in &self.train {
            seen[u].insert(v);
        }
        seen.into_iter()
            .enumerate()
            .map(|(u, train_items)| {
                Some(EvalCase {
                    user: u,
                    test_item: self.test[u],
                    train_items,
                })
            })
            .collect()
    }

    /// Writes `manifest.json` and CSV tables into `dir`, creating it if needed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)? + "\n";
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, manifest).map_err(io_err(&mpath))?;

        let label_of = |u: usize| {
            self.labels
                .as_ref()
                .and_then(|l| l.labels[u])
                .map(|c| c.to_string())
                .unwrap_or_default()
        };
        write_table(
            &dir.join(USERS),
            &["index", "raw_id", "label"],
            self.user_ids
                .iter()
                .enumerate()
                .map(|(i, id)| vec![i.to_string(), id.clone(), label_of(i)]),
        )?;
        write_table(
            &dir.join(ITEMS),
            &["index", "raw_id"],
            self.item_ids
                .iter()
                .enumerate()
                .map(|(i, id)| vec![i.to_string(), id.clone()]),
        )?;
        let pairs = |p: &[(usize, usize)]| -> Vec<Vec<String>> {
            p.iter().map(|(u, v)| vec![u.to_string(), v.to_string()]).collect()
        };
        write_table(&dir.join(TRAIN), &["user", "item"], pairs(&self.train))?;
        write_table(&dir.join(HELD_OUT), &["user", "item"], pairs(&self.held_out))?;
        write_table(
            &dir.join(LOO),
            &["user", "validation_item", "test_item"],
            (0..self.num_users())
                .map(|u| vec![u.to_string(), self.validation[u].to_string(), self.test[u].to_string()]),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(invalid(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }

        let users = read_table(&dir.join(USERS), 3)?;
        let items = read_table(&dir.join(ITEMS), 2)?;
        check_index(&users, &dir.join(USERS))?;
        check_index(&items, &dir.join(ITEMS))?;
        let user_ids: Vec<String> = users.iter().map(|r| r[1].clone()).collect();
        let item_ids: Vec<String> = items.iter().map(|r| r[1].clone()).collect();
        let (n, m) = (user_ids.len(), item_ids.len());

        let train = read_pairs(&dir.join(TRAIN), n, m)?;
        let held_out = read_pairs(&dir.join(HELD_OUT), n, m)?;
        let loo = read_table(&dir.join(LOO), 3)?;
        if loo.len() != n {
            return Err(invalid(format!("{LOO} has {} rows for {n} users", loo.len())));
        }
        let mut validation = vec![0; n];
        let mut test = vec![0; n];
        for row in &loo {
            let u = parse_index(&row[0], n)?;
            validation[u] = parse_index(&row[1], m)?;
            test[u] = parse_index(&row[2], m)?;
        }

        let labels = match &manifest.attribute {
            Some(a) => {
                let l = users
                    .iter()
                    .map(|r| {
                        if r[2].is_empty() {
                            Ok(None)
                        } else {
                            r[2].parse().map(Some).map_err(|_| invalid(format!("bad label {:?}", r[2])))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(ClassLabels::new(l, a.num_classes)?)
            }
            None => None,
        };
        if manifest.num_users != n || manifest.num_items != m || manifest.num_train != train.len() {
            return Err(invalid("dataset tables disagree with the manifest counts"));
        }
        Ok(Self {
            user_ids,
            item_ids,
            train,
            held_out,
            validation,
            test,
            labels,
            manifest,
        })
    }
}

pub const MANIFEST: &str = "manifest.json";
const USERS: &str = "users.csv";
const ITEMS: &str = "items.csv";
const TRAIN: &str = "train.csv";
const HELD_OUT: &str = "held_out.csv";
const LOO: &str = "loo.csv";

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> RaidError + '_ {
    move |e| RaidError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn write_table(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_table(path: &Path, width: usize) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        if rec.len() != width {
            return Err(invalid(format!(
                "{}: expected {width} columns, found {}",
                path.display(),
                rec.len()
            )));
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

fn parse_index(s: &str, bound: usize) -> Result<usize> {
    s.parse::<usize>()
        .ok()
        .filter(|&i| i < bound)
        .ok_or_else(|| invalid(format!("index {s:?} outside 0..{bound}")))
}

fn check_index(rows: &[Vec<String>], path: &Path) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r[0] != i.to_string() {
            return Err(invalid(format!("{}: row {i} has index {:?}", path.display(), r[0])));
        }
    }
    Ok(())
}

fn read_pairs(path: &Path, n: usize, m: usize) -> Result<Vec<(usize, usize)>> {
    read_table(path, 2)?
        .iter()
        .map(|r| Ok((parse_index(&r[0], n)?, parse_index(&r[1], m)?)))
        .collect()
}

/// Number of labeled users per class.
pub fn class_counts(labels: &ClassLabels) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for (_, c) in labels.labeled() {
        *out.entry(c).or_default() += 1;
    }
    out
}
