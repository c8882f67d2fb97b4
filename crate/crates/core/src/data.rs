//! Ratings ingestion and the user-split protocol.
//!
//! Ratings at or above a threshold become binary interactions, users with too
//! short a history are dropped, and users are split into train / validation /
//! test sets. Validation and test users are evaluated by fold-in: a random 80%
//! of their history is fed to the model and the rest is held out.
//!
//! Items are never filtered by count; an item disappears only if none of the
//! retained users interacted with it.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const DEFAULT_RATING_THRESHOLD: f64 = 4.0;
pub const DEFAULT_MIN_USER_INTERACTIONS: usize = 5;
pub const DEFAULT_FOLD_IN_FRACTION: f64 = 0.8;

const MATRIX_MAGIC: &[u8; 8] = b"GEOCFMX1";
const MATRIX_VERSION: u32 = 1;

/// Layout of a ratings file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingsFormat {
    /// Comma-separated with a `userId,itemId,rating,timestamp` header
    /// (`movieId` is accepted in place of `itemId`).
    #[default]
    Csv,
    /// Tab-separated `user item rating timestamp`, no header.
    Tsv,
}

/// One positive (user, item) pair with the raw ids from the ratings file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
}

/// Loads a MovieLens-style CSV, keeping ratings `>= rating_threshold`.
pub fn load_ratings(path: impl AsRef<Path>, rating_threshold: f64) -> Result<Vec<Interaction>> {
    load_ratings_with(path, rating_threshold, RatingsFormat::Csv)
}

/// Like [`load_ratings`] for either supported layout. The result is sorted by
/// `(user, item)` with duplicates removed.
pub fn load_ratings_with(
    path: impl AsRef<Path>,
    rating_threshold: f64,
    format: RatingsFormat,
) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let delimiter = match format {
        RatingsFormat::Csv => b',',
        RatingsFormat::Tsv => b'\t',
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));

    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut out = BTreeSet::new();
    let mut first = true;
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if first && format == RatingsFormat::Csv {
            first = false;
            let fields: Vec<&str> = record.iter().collect();
            let ok = fields.len() == 4
                && fields[0] == "userId"
                && (fields[1] == "itemId" || fields[1] == "movieId")
                && fields[2] == "rating"
                && fields[3] == "timestamp";
            if !ok {
                return Err(parse_err(
                    line,
                    format!(
                        "unknown header {:?}, expected userId,itemId,rating,timestamp",
                        fields.join(",")
                    ),
                ));
            }
            continue;
        }
        first = false;
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", record.len())));
        }
        let user: u64 = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("bad user id {:?}", &record[0])))?;
        let item: u64 = record[1]
            .parse()
            .map_err(|_| parse_err(line, format!("bad item id {:?}", &record[1])))?;
        let rating: f64 = record[2]
            .parse()
            .map_err(|_| parse_err(line, format!("bad rating {:?}", &record[2])))?;
        if !rating.is_finite() {
            return Err(parse_err(line, format!("bad rating {:?}", &record[2])));
        }
        if rating >= rating_threshold {
            out.insert(Interaction { user, item });
        }
    }
    Ok(out.into_iter().collect())
}

/// Sparse binary user × item matrix with the raw-id ↔ index maps.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    user_ids: Vec<u64>,
    item_ids: Vec<u64>,
    rows: Vec<Vec<usize>>,
    user_index: HashMap<u64, usize>,
    item_index: HashMap<u64, usize>,
}

impl InteractionMatrix {
    /// Indexes users and items densely in ascending raw-id order.
    pub fn from_interactions(interactions: &[Interaction]) -> Result<Self> {
        if interactions.is_empty() {
            return Err(Error::Empty("no interactions".into()));
        }
        let users: BTreeSet<u64> = interactions.iter().map(|x| x.user).collect();
        let items: BTreeSet<u64> = interactions.iter().map(|x| x.item).collect();
        let user_ids: Vec<u64> = users.into_iter().collect();
        let item_ids: Vec<u64> = items.into_iter().collect();
        let item_index: HashMap<u64, usize> =
            item_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let user_index: HashMap<u64, usize> =
            user_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let mut rows = vec![BTreeSet::new(); user_ids.len()];
        for x in interactions {
            rows[user_index[&x.user]].insert(item_index[&x.item]);
        }
        Ok(InteractionMatrix {
            user_ids,
            item_ids,
            rows: rows.into_iter().map(|s| s.into_iter().collect()).collect(),
            user_index,
            item_index,
        })
    }

    /// Builds a matrix directly from index rows over a fixed item catalogue.
    pub fn from_rows(user_ids: Vec<u64>, item_ids: Vec<u64>, rows: Vec<Vec<usize>>) -> Result<Self> {
        if user_ids.len() != rows.len() {
            return Err(Error::InvalidArgument(format!(
                "{} user ids for {} rows",
                user_ids.len(),
                rows.len()
            )));
        }
        let user_index: HashMap<u64, usize> =
            user_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let item_index: HashMap<u64, usize> =
            item_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        if user_index.len() != user_ids.len() || item_index.len() != item_ids.len() {
            return Err(Error::InvalidArgument("duplicate user or item id".into()));
        }
        let mut clean = Vec::with_capacity(rows.len());
        for (u, row) in rows.into_iter().enumerate() {
            let set: BTreeSet<usize> = row.into_iter().collect();
            if let Some(&bad) = set.iter().find(|&&i| i >= item_ids.len()) {
                return Err(Error::InvalidArgument(format!(
                    "user {} references item index {bad} of {}",
                    user_ids[u],
                    item_ids.len()
                )));
            }
            clean.push(set.into_iter().collect());
        }
        Ok(InteractionMatrix {
            user_ids,
            item_ids,
            rows: clean,
            user_index,
            item_index,
        })
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn user_ids(&self) -> &[u64] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[u64] {
        &self.item_ids
    }

    /// Sorted item indices of user `u` (by index, not id).
    pub fn row(&self, u: usize) -> &[usize] {
        &self.rows[u]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn user_index(&self, id: u64) -> Option<usize> {
        self.user_index.get(&id).copied()
    }

    pub fn item_index(&self, id: u64) -> Option<usize> {
        self.item_index.get(&id).copied()
    }

    /// Interaction count per item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_items()];
        for r in &self.rows {
            for &i in r {
                c[i] += 1;
            }
        }
        c
    }

    /// All (user id, item id) pairs in row order.
    pub fn pairs(&self) -> Vec<Interaction> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, r)| {
                r.iter().map(move |&i| Interaction {
                    user: self.user_ids[u],
                    item: self.item_ids[i],
                })
            })
            .collect()
    }

    /// The listed users (by id, in the given order) over the same item catalogue.
    pub fn subset(&self, users: &[u64]) -> Result<InteractionMatrix> {
        let mut rows = Vec::with_capacity(users.len());
        for id in users {
            let u = self
                .user_index(*id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown user {id}")))?;
            rows.push(self.rows[u].clone());
        }
        InteractionMatrix::from_rows(users.to_vec(), self.item_ids.clone(), rows)
    }

    pub fn write_bin(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&MATRIX_VERSION.to_le_bytes())?;
        w.write_all(&(self.num_users() as u64).to_le_bytes())?;
        w.write_all(&(self.num_items() as u64).to_le_bytes())?;
        for id in self.user_ids.iter().chain(&self.item_ids) {
            w.write_all(&id.to_le_bytes())?;
        }
        for r in &self.rows {
            w.write_all(&(r.len() as u32).to_le_bytes())?;
            for &i in r {
                w.write_all(&(i as u32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_bin(path: impl AsRef<Path>) -> Result<InteractionMatrix> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let fmt = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| fmt("truncated header"))? != MATRIX_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| fmt("truncated header"))?;
        if version != MATRIX_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let nu = cur.u64().ok_or_else(|| fmt("truncated header"))? as usize;
        let ni = cur.u64().ok_or_else(|| fmt("truncated header"))? as usize;
        let mut ids = Vec::with_capacity(nu + ni);
        for _ in 0..nu + ni {
            ids.push(cur.u64().ok_or_else(|| fmt("truncated ids"))?);
        }
        let item_ids = ids.split_off(nu);
        let mut rows = Vec::with_capacity(nu);
        for _ in 0..nu {
            let len = cur.u32().ok_or_else(|| fmt("truncated rows"))? as usize;
            let mut r = Vec::with_capacity(len);
            for _ in 0..len {
                r.push(cur.u32().ok_or_else(|| fmt("truncated rows"))? as usize);
            }
            rows.push(r);
        }
        if cur.pos != bytes.len() {
            return Err(fmt("trailing bytes"));
        }
        InteractionMatrix::from_rows(ids, item_ids, rows)
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Drops users with fewer than `min_user_interactions` items, repeating until no
/// user falls below the threshold, then indexes the survivors densely.
pub fn filter_users(interactions: &[Interaction], min_user_interactions: usize) -> Result<InteractionMatrix> {
    if interactions.is_empty() {
        return Err(Error::Empty("no interactions to filter".into()));
    }
    let mut current: Vec<Interaction> = interactions.to_vec();
    current.sort_unstable();
    current.dedup();
    loop {
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for x in &current {
            *counts.entry(x.user).or_default() += 1;
        }
        let before = current.len();
        current.retain(|x| counts[&x.user] >= min_user_interactions);
        if current.len() == before {
            break;
        }
    }
    if current.is_empty() {
        return Err(Error::Empty(format!(
            "no user has at least {min_user_interactions} interactions"
        )));
    }
    InteractionMatrix::from_interactions(&current)
}

/// User-level train / validation / test partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub fold_in_fraction: f64,
    pub train_users: Vec<u64>,
    pub validation_users: Vec<u64>,
    pub test_users: Vec<u64>,
}

impl SplitSpec {
    pub fn is_heldout(&self, user: u64) -> bool {
        self.validation_users.binary_search(&user).is_ok() || self.test_users.binary_search(&user).is_ok()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<SplitSpec> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SplitSpec = serde_json::from_str(&s)?;
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !(self.fold_in_fraction > 0.0 && self.fold_in_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fold_in_fraction {} outside (0,1)",
                self.fold_in_fraction
            )));
        }
        let mut seen = BTreeSet::new();
        for u in self
            .train_users
            .iter()
            .chain(&self.validation_users)
            .chain(&self.test_users)
        {
            if !seen.insert(*u) {
                return Err(Error::InvalidArgument(format!("user {u} appears in two splits")));
            }
        }
        Ok(())
    }
}

/// Seeded shuffle of the user ids followed by contiguous train/validation/test slices.
/// Each slice is stored sorted by id.
pub fn split_users(
    matrix: &InteractionMatrix,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitSpec> {
    if !(val_fraction > 0.0 && test_fraction > 0.0 && val_fraction + test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive with sum < 1, got {val_fraction}/{test_fraction}"
        )));
    }
    let n = matrix.num_users();
    let n_val = (n as f64 * val_fraction).round() as usize;
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(Error::InvalidArgument(format!(
            "{n} users are too few for nonempty splits at {val_fraction}/{test_fraction}"
        )));
    }
    let mut ids = matrix.user_ids().to_vec();
    Rng::new(seed).shuffle(&mut ids);
    let n_train = n - n_val - n_test;
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitSpec {
        seed,
        val_fraction,
        test_fraction,
        fold_in_fraction: DEFAULT_FOLD_IN_FRACTION,
        train_users: train,
        validation_users: val,
        test_users: test,
    })
}

/// A held-out user's history partitioned into model input and evaluation targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldInPair {
    pub user: u64,
    pub fold_in: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Number of fold-in items for a history of `len`: `⌈fraction·len⌉`, or
/// `⌊fraction·len⌋` when the ceiling would leave nothing to hold out.
pub fn fold_in_size(len: usize, fraction: f64) -> usize {
    let x = fraction * len as f64;
    // absorb representation error such as 0.8·5 = 4.000…01
    let up = (x - 1e-9).ceil() as usize;
    if up >= len {
        ((x + 1e-9).floor() as usize).min(len - 1)
    } else {
        up
    }
}

/// Samples `fold_in_size` items of the user's history uniformly at random as the
/// model input; the remainder is held out.
pub fn fold_in(matrix: &InteractionMatrix, spec: &SplitSpec, user: u64, rng: &mut Rng) -> Result<FoldInPair> {
    if !spec.is_heldout(user) {
        return Err(Error::InvalidArgument(format!(
            "user {user} is not in the validation or test split"
        )));
    }
    let u = matrix
        .user_index(user)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown user {user}")))?;
    let history = matrix.row(u);
    if history.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "user {user} has {} item(s); fold-in needs at least 2",
            history.len()
        )));
    }
    let k = fold_in_size(history.len(), spec.fold_in_fraction);
    let mut chosen = vec![false; history.len()];
    for idx in rng.sample_indices(history.len(), k) {
        chosen[idx] = true;
    }
    let (mut fold, mut held) = (Vec::with_capacity(k), Vec::new());
    for (pos, &item) in history.iter().enumerate() {
        if chosen[pos] {
            fold.push(item);
        } else {
            held.push(item);
        }
    }
    Ok(FoldInPair {
        user,
        fold_in: fold,
        held_out: held,
    })
}

/// Fold-in pairs for a list of held-out users, each drawn from its own
/// sub-stream of `seed` so the result does not depend on the list order.
pub fn fold_in_users(
    matrix: &InteractionMatrix,
    spec: &SplitSpec,
    users: &[u64],
    seed: u64,
) -> Result<Vec<FoldInPair>> {
    let base = Rng::new(seed);
    users
        .iter()
        .map(|&u| fold_in(matrix, spec, u, &mut base.derive(u)))
        .collect()
}
