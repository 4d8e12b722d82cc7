//! Interaction data: rating-log ingestion, the binary user-item matrix, the
//! fold-in split for held-out users, and minibatch ordering.

use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CORPUS_MAGIC: &[u8; 5] = b"MCOR1";
pub const CORPUS_FILE: &str = "corpus.mcor";
pub const USER_VOCAB_FILE: &str = "users.json";
pub const ITEM_VOCAB_FILE: &str = "items.json";
pub const SPLIT_FILE: &str = "split.json";

/// Sparse binary user×item adoption matrix with external-id vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    n_items: usize,
    rows: Vec<Vec<u32>>,
    user_vocab: Vec<String>,
    item_vocab: Vec<String>,
    user_lookup: HashMap<String, u32>,
    item_lookup: HashMap<String, u32>,
}

impl InteractionMatrix {
    /// Builds a matrix, checking that rows are nonempty, strictly increasing
    /// and in range, and that vocabularies match the dimensions.
    pub fn from_rows(
        n_items: usize,
        rows: Vec<Vec<u32>>,
        user_vocab: Vec<String>,
        item_vocab: Vec<String>,
    ) -> Result<Self> {
        if user_vocab.len() != rows.len() || item_vocab.len() != n_items {
            return Err(Error::Format(format!(
                "vocabulary sizes {}/{} do not match {} users, {} items",
                user_vocab.len(),
                item_vocab.len(),
                rows.len(),
                n_items
            )));
        }
        for (u, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::Format(format!("user {u} has no items")));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!("row of user {u} is not strictly increasing")));
            }
            if row.last().map_or(false, |&i| i as usize >= n_items) {
                return Err(Error::Format(format!("row of user {u} has an out-of-range item")));
            }
        }
        let user_lookup = index_vocab(&user_vocab)?;
        let item_lookup = index_vocab(&item_vocab)?;
        Ok(Self {
            n_items,
            rows,
            user_vocab,
            item_vocab,
            user_lookup,
            item_lookup,
        })
    }

    /// Matrix with synthetic ids `u0, u1, …` / `i0, i1, …`.
    pub fn from_rows_anonymous(n_items: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        let users = (0..rows.len()).map(|u| format!("u{u}")).collect();
        let items = (0..n_items).map(|i| format!("i{i}")).collect();
        Self::from_rows(n_items, rows, users, items)
    }

    pub fn n_users(&self) -> usize {
        self.rows.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_interactions(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row(&self, user: usize) -> &[u32] {
        &self.rows[user]
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn user_vocab(&self) -> &[String] {
        &self.user_vocab
    }

    pub fn item_vocab(&self) -> &[String] {
        &self.item_vocab
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_lookup.get(id).map(|&u| u as usize)
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_lookup.get(id).map(|&i| i as usize)
    }

    /// Writes `corpus.mcor`, `users.json` and `items.json` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(CORPUS_FILE))?);
        self.write_binary(&mut w)?;
        w.flush()?;
        std::fs::write(dir.join(USER_VOCAB_FILE), serde_json::to_vec(&self.user_vocab)?)?;
        std::fs::write(dir.join(ITEM_VOCAB_FILE), serde_json::to_vec(&self.item_vocab)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(dir.join(CORPUS_FILE))?);
        let (n_items, rows) = Self::read_binary(&mut r)?;
        let users: Vec<String> =
            serde_json::from_slice(&std::fs::read(dir.join(USER_VOCAB_FILE))?)?;
        let items: Vec<String> =
            serde_json::from_slice(&std::fs::read(dir.join(ITEM_VOCAB_FILE))?)?;
        Self::from_rows(n_items, rows, users, items)
    }

    /// Magic, `n_users` and `n_items` (u64 LE), an `n_users + 1` entry u64
    /// offset table, then the concatenated u32 item indices.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CORPUS_MAGIC)?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        w.write_all(&(self.n_items as u64).to_le_bytes())?;
        let mut off = 0u64;
        w.write_all(&off.to_le_bytes())?;
        for row in &self.rows {
            off += row.len() as u64;
            w.write_all(&off.to_le_bytes())?;
        }
        for row in &self.rows {
            for &i in row {
                w.write_all(&i.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<(usize, Vec<Vec<u32>>)> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != CORPUS_MAGIC {
            return Err(Error::Format("bad corpus magic".into()));
        }
        let n_users = read_u64(r)? as usize;
        let n_items = read_u64(r)? as usize;
        let mut offsets = Vec::with_capacity(n_users + 1);
        for _ in 0..=n_users {
            offsets.push(read_u64(r)?);
        }
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Format("corrupt offset table".into()));
        }
        let mut rows = Vec::with_capacity(n_users);
        let mut buf = [0u8; 4];
        for w in offsets.windows(2) {
            let mut row = Vec::with_capacity((w[1] - w[0]) as usize);
            for _ in w[0]..w[1] {
                r.read_exact(&mut buf)?;
                row.push(u32::from_le_bytes(buf));
            }
            rows.push(row);
        }
        Ok((n_items, rows))
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn index_vocab(v: &[String]) -> Result<HashMap<String, u32>> {
    let mut map = HashMap::with_capacity(v.len());
    for (i, id) in v.iter().enumerate() {
        if map.insert(id.clone(), i as u32).is_some() {
            return Err(Error::Format(format!("duplicate id {id:?} in vocabulary")));
        }
    }
    Ok(map)
}

/// Reads a `user, item, rating[, timestamp]` log (comma- or tab-delimited, an
/// optional header line is detected), keeps ratings `>= rating_threshold`,
/// drops users left with fewer than `min_items_per_user` items and drops
/// items nobody kept. Ids are indexed in first-appearance order.
pub fn load_ratings(
    path: &Path,
    rating_threshold: f64,
    min_items_per_user: usize,
) -> Result<InteractionMatrix> {
    let reader = BufReader::new(File::open(path)?);
    parse_ratings(reader, rating_threshold, min_items_per_user)
}

pub fn parse_ratings(
    reader: impl BufRead,
    rating_threshold: f64,
    min_items_per_user: usize,
) -> Result<InteractionMatrix> {
    let mut kept: Vec<(String, String)> = Vec::new();
    let mut first = true;
    for (no, line) in reader.lines().enumerate() {
        let line_no = no + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let delim = if line.contains('\t') { '\t' } else { ',' };
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        let rating = fields.get(2).map(|f| f.parse::<f64>());
        match rating {
            Some(Ok(r)) if fields.len() <= 4 && !fields[0].is_empty() && !fields[1].is_empty() => {
                if r >= rating_threshold {
                    kept.push((fields[0].to_string(), fields[1].to_string()));
                }
            }
            Some(Err(_)) if first => {}
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected user, item, rating[, timestamp]; got {line:?}"),
                })
            }
        }
        first = false;
    }

    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut user_items: Vec<Vec<&str>> = Vec::new();
    let mut user_ids: Vec<&str> = Vec::new();
    for (u, i) in &kept {
        let idx = *user_index.entry(u.as_str()).or_insert_with(|| {
            user_ids.push(u.as_str());
            user_items.push(Vec::new());
            user_ids.len() - 1
        });
        user_items[idx].push(i.as_str());
    }
    for items in &mut user_items {
        let mut seen = std::collections::HashSet::new();
        items.retain(|i| seen.insert(*i));
    }
    let keep_user: Vec<bool> = user_items
        .iter()
        .map(|it| it.len() >= min_items_per_user.max(1))
        .collect();

    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut item_vocab: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); user_ids.len()];
    let mut row_seen: Vec<std::collections::HashSet<&str>> =
        vec![std::collections::HashSet::new(); user_ids.len()];
    for (u, i) in &kept {
        let uidx = user_index[u.as_str()];
        if !keep_user[uidx] || !row_seen[uidx].insert(i.as_str()) {
            continue;
        }
        let iidx = *item_index.entry(i.as_str()).or_insert_with(|| {
            item_vocab.push(i.clone());
            (item_vocab.len() - 1) as u32
        });
        rows[uidx].push(iidx);
    }
    let mut out_rows = Vec::new();
    let mut out_users = Vec::new();
    for (uidx, mut row) in rows.into_iter().enumerate() {
        if keep_user[uidx] {
            row.sort_unstable();
            out_rows.push(row);
            out_users.push(user_ids[uidx].to_string());
        }
    }
    if out_rows.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no user keeps {min_items_per_user} ratings >= {rating_threshold}"
        )));
    }
    InteractionMatrix::from_rows(item_vocab.len(), out_rows, out_users, item_vocab)
}

/// A held-out user's history, divided into the part the encoder sees and the
/// part that is ranked against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOutUser {
    pub user: u32,
    pub foldin: Vec<u32>,
    pub heldout: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_users: Vec<u32>,
    pub validation: Vec<HeldOutUser>,
    pub test: Vec<HeldOutUser>,
    pub foldin_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Validation,
    Test,
}

impl std::str::FromStr for SplitPart {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "validation" | "valid" | "val" => Ok(SplitPart::Validation),
            "test" => Ok(SplitPart::Test),
            _ => Err(format!("unknown split {s:?} (validation|test)")),
        }
    }
}

impl SplitSpec {
    pub fn part(&self, which: SplitPart) -> &[HeldOutUser] {
        match which {
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }

    pub fn validation_users(&self) -> Vec<u32> {
        self.validation.iter().map(|h| h.user).collect()
    }

    pub fn test_users(&self) -> Vec<u32> {
        self.test.iter().map(|h| h.user).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Picks `n_heldout` users at random, assigns half to validation and half to
/// test, and splits each held-out row into `⌈foldin_fraction·|row|⌉` fold-in
/// items and the held-out remainder.
pub fn make_split(
    m: &InteractionMatrix,
    n_heldout: usize,
    foldin_fraction: f64,
    seed: u64,
) -> Result<SplitSpec> {
    if n_heldout >= m.n_users() {
        return Err(Error::InvalidSplit(format!(
            "{n_heldout} held-out users requested from {} users",
            m.n_users()
        )));
    }
    if !(foldin_fraction > 0.0 && foldin_fraction < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "fold-in fraction {foldin_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<u32> = (0..m.n_users() as u32).collect();
    perm.shuffle(&mut rng);
    let half = n_heldout / 2;
    let mut val: Vec<u32> = perm[..half].to_vec();
    let mut test: Vec<u32> = perm[half..2 * half].to_vec();
    let mut train: Vec<u32> = perm[2 * half..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();

    let mut split_user = |u: u32| -> Result<HeldOutUser> {
        let row = m.row(u as usize);
        if row.len() < 2 {
            return Err(Error::InvalidSplit(format!(
                "held-out user {u} has {} item(s); need at least 2",
                row.len()
            )));
        }
        let mut items = row.to_vec();
        items.shuffle(&mut rng);
        let n_fold = ((foldin_fraction * row.len() as f64).ceil() as usize).clamp(1, row.len() - 1);
        let mut foldin = items[..n_fold].to_vec();
        let mut heldout = items[n_fold..].to_vec();
        foldin.sort_unstable();
        heldout.sort_unstable();
        Ok(HeldOutUser {
            user: u,
            foldin,
            heldout,
        })
    };
    let validation = val.iter().map(|&u| split_user(u)).collect::<Result<Vec<_>>>()?;
    let test = test.iter().map(|&u| split_user(u)).collect::<Result<Vec<_>>>()?;
    Ok(SplitSpec {
        train_users: train,
        validation,
        test,
        foldin_fraction,
        seed,
    })
}

/// Seeded epoch ordering over a fixed user list.
#[derive(Clone, Debug)]
pub struct Minibatches {
    users: Vec<u32>,
    batch_size: usize,
    seed: u64,
}

impl Minibatches {
    pub fn new(users: &[u32], batch_size: usize, seed: u64) -> Self {
        Self {
            users: users.to_vec(),
            batch_size: batch_size.max(1),
            seed,
        }
    }

    /// Batches for epoch `epoch`; every user appears exactly once.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order = self.users.clone();
        order.shuffle(&mut rng);
        order.chunks(self.batch_size).map(<[u32]>::to_vec).collect()
    }
}

pub fn minibatches(users: &[u32], batch_size: usize, seed: u64) -> Minibatches {
    Minibatches::new(users, batch_size, seed)
}
