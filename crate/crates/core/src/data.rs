//! Review/metadata ingestion, k-core filtering, leave-one-out splits, and the
//! scenario selections used by evaluation.
//!
//! Items and users are addressed by dense indices (`0..n`) after ingestion;
//! the original opaque ids are kept for reporting.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use softslot_numerics::seeded_rng;

use crate::error::{CoreError, Result};

/// Dense item index.
pub type ItemIdx = usize;
/// Dense user index.
pub type UserIdx = usize;

/// Negatives per evaluation instance.
pub const EVAL_NEGATIVES: usize = 19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawReview {
    #[serde(rename = "reviewerID")]
    pub user_id: String,
    #[serde(rename = "asin")]
    pub item_id: String,
    #[serde(rename = "overall")]
    pub rating: f32,
    #[serde(rename = "unixReviewTime")]
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub title: String,
    pub description: String,
}

#[derive(Deserialize)]
struct MetaRecord {
    asin: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    description: Option<TextField>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TextField {
    One(String),
    Many(Vec<String>),
}

impl TextField {
    fn joined(self) -> String {
        match self {
            TextField::One(s) => s,
            TextField::Many(v) => v.join(" "),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Original user ids, by dense index.
    pub user_ids: Vec<String>,
    /// Catalog, by dense item index.
    pub items: Vec<ItemMeta>,
    /// Timestamp-ascending item sequences, by dense user index.
    pub sequences: Vec<Vec<ItemIdx>>,
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.items.len()];
        for s in &self.sequences {
            for &i in s {
                counts[i] += 1;
            }
        }
        counts
    }

    pub fn title(&self, item: ItemIdx) -> &str {
        &self.items[item].title
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| CoreError::io(path, e))
}

/// Parses newline-delimited JSON review records; blank lines are skipped.
pub fn parse_reviews(source: &str, text: &str) -> Result<Vec<RawReview>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: RawReview = serde_json::from_str(line).map_err(|e| CoreError::Parse {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if r.timestamp < 0 {
            return Err(CoreError::Parse {
                path: source.to_string(),
                line: i + 1,
                message: format!("negative timestamp {}", r.timestamp),
            });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn parse_meta(source: &str, text: &str) -> Result<Vec<ItemMeta>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: MetaRecord = serde_json::from_str(line).map_err(|e| CoreError::Parse {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ItemMeta {
            title: m.title.unwrap_or_default(),
            description: m.description.map(TextField::joined).unwrap_or_default(),
            item_id: m.asin,
        });
    }
    Ok(out)
}

/// Reads review and metadata files and builds a [`Dataset`].
pub fn ingest(reviews_path: &Path, meta_path: &Path, rating_threshold: Option<f32>) -> Result<Dataset> {
    let reviews = parse_reviews(
        &reviews_path.display().to_string(),
        &read_lines(reviews_path)?.join("\n"),
    )?;
    let meta = parse_meta(
        &meta_path.display().to_string(),
        &read_lines(meta_path)?.join("\n"),
    )?;
    build_dataset(&reviews, &meta, rating_threshold)
}

/// Builds sequences from parsed records.
///
/// Interactions with rating `<= threshold` are dropped, exact
/// `(user, item, timestamp)` duplicates collapse to one, and timestamp ties
/// keep input order. Items without metadata (or with an empty title) use
/// their id as title.
pub fn build_dataset(reviews: &[RawReview], meta: &[ItemMeta], rating_threshold: Option<f32>) -> Result<Dataset> {
    let mut seen: HashSet<(&str, &str, i64)> = HashSet::new();
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids: Vec<&str> = Vec::new();
    let mut events: Vec<Vec<(i64, usize)>> = Vec::new();

    for r in reviews {
        if let Some(th) = rating_threshold {
            if r.rating <= th {
                continue;
            }
        }
        if !seen.insert((&r.user_id, &r.item_id, r.timestamp)) {
            continue;
        }
        let u = *user_index.entry(&r.user_id).or_insert_with(|| {
            user_ids.push(r.user_id.clone());
            events.push(Vec::new());
            user_ids.len() - 1
        });
        let i = *item_index.entry(&r.item_id).or_insert_with(|| {
            item_ids.push(&r.item_id);
            item_ids.len() - 1
        });
        events[u].push((r.timestamp, i));
    }
    if events.is_empty() {
        return Err(CoreError::EmptyDataset("ingestion"));
    }

    let meta_by_id: HashMap<&str, &ItemMeta> = meta.iter().map(|m| (m.item_id.as_str(), m)).collect();
    let items = item_ids
        .iter()
        .map(|&id| match meta_by_id.get(id) {
            Some(m) if !m.title.trim().is_empty() => ItemMeta {
                item_id: id.to_string(),
                title: m.title.clone(),
                description: m.description.clone(),
            },
            Some(m) => ItemMeta {
                item_id: id.to_string(),
                title: id.to_string(),
                description: m.description.clone(),
            },
            None => ItemMeta {
                item_id: id.to_string(),
                title: id.to_string(),
                description: String::new(),
            },
        })
        .collect();

    let sequences = events
        .into_iter()
        .map(|mut ev| {
            // stable sort keeps file order among equal timestamps
            ev.sort_by_key(|&(t, _)| t);
            ev.into_iter().map(|(_, i)| i).collect()
        })
        .collect();

    Ok(Dataset {
        user_ids,
        items,
        sequences,
    })
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// nothing changes, then re-densifies indices (original order preserved).
pub fn kcore_filter(dataset: &Dataset, k: usize) -> Result<Dataset> {
    if k == 0 {
        return Err(CoreError::Protocol("k-core k must be >= 1".into()));
    }
    let mut sequences: Vec<Option<Vec<ItemIdx>>> = dataset.sequences.iter().cloned().map(Some).collect();
    loop {
        let mut changed = false;
        for s in sequences.iter_mut() {
            if s.as_ref().is_some_and(|s| s.len() < k) {
                *s = None;
                changed = true;
            }
        }
        let mut counts = vec![0usize; dataset.num_items()];
        for s in sequences.iter().flatten() {
            for &i in s {
                counts[i] += 1;
            }
        }
        for s in sequences.iter_mut().flatten() {
            let before = s.len();
            s.retain(|&i| counts[i] >= k);
            changed |= s.len() != before;
        }
        if !changed {
            break;
        }
    }

    let mut item_map = vec![None; dataset.num_items()];
    let mut items = Vec::new();
    for s in sequences.iter().flatten() {
        for &i in s {
            if item_map[i].is_none() {
                item_map[i] = Some(());
            }
        }
    }
    let mut remap = vec![usize::MAX; dataset.num_items()];
    for (i, present) in item_map.iter().enumerate() {
        if present.is_some() {
            remap[i] = items.len();
            items.push(dataset.items[i].clone());
        }
    }
    let mut user_ids = Vec::new();
    let mut out_seqs = Vec::new();
    for (u, s) in sequences.into_iter().enumerate() {
        if let Some(s) = s {
            if s.is_empty() {
                continue;
            }
            user_ids.push(dataset.user_ids[u].clone());
            out_seqs.push(s.into_iter().map(|i| remap[i]).collect());
        }
    }
    if out_seqs.is_empty() {
        return Err(CoreError::EmptyDataset("k-core filtering"));
    }
    Ok(Dataset {
        user_ids,
        items,
        sequences: out_seqs,
    })
}

/// Leave-one-out partition of one user's sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: UserIdx,
    pub train: Vec<ItemIdx>,
    pub valid: Option<ItemIdx>,
    pub test: Option<ItemIdx>,
}

impl UserSplit {
    /// Everything except the test item: the sequence models are fitted on.
    pub fn fit_sequence(&self) -> Vec<ItemIdx> {
        let mut s = self.train.clone();
        s.extend(self.valid);
        s
    }

    pub fn is_evaluable(&self) -> bool {
        self.test.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub users: Vec<UserSplit>,
    /// Users shorter than 3 interactions: trained on, never evaluated.
    pub skipped: usize,
}

impl SplitSet {
    pub fn evaluable(&self) -> impl Iterator<Item = &UserSplit> {
        self.users.iter().filter(|u| u.is_evaluable())
    }
}

pub fn build_splits(dataset: &Dataset) -> SplitSet {
    let mut skipped = 0;
    let users = dataset
        .sequences
        .iter()
        .enumerate()
        .map(|(u, s)| {
            if s.len() < 3 {
                skipped += 1;
                UserSplit {
                    user: u,
                    train: s.clone(),
                    valid: None,
                    test: None,
                }
            } else {
                let n = s.len();
                UserSplit {
                    user: u,
                    train: s[..n - 2].to_vec(),
                    valid: Some(s[n - 2]),
                    test: Some(s[n - 1]),
                }
            }
        })
        .collect();
    if skipped > 0 {
        log::info!("{skipped} users shorter than 3 interactions excluded from evaluation");
    }
    SplitSet { users, skipped }
}

/// `n` distinct items drawn uniformly without replacement from the items the
/// user never interacted with.
pub fn sample_negatives(dataset: &Dataset, user: UserIdx, n: usize, seed: u64) -> Result<Vec<ItemIdx>> {
    let interacted: HashSet<ItemIdx> = dataset.sequences[user].iter().copied().collect();
    let pool: Vec<ItemIdx> = (0..dataset.num_items()).filter(|i| !interacted.contains(i)).collect();
    if pool.len() < n {
        return Err(CoreError::Protocol(format!(
            "user {user} has only {} non-interacted items, {n} negatives required",
            pool.len()
        )));
    }
    let mut rng = seeded_rng(seed, &format!("negatives/{user}"));
    let picked = rand::seq::index::sample(&mut rng, pool.len(), n);
    Ok(picked.into_iter().map(|k| pool[k]).collect())
}

/// One uniformly drawn item outside `exclude`, by rejection.
pub fn sample_one_negative(num_items: usize, exclude: &HashSet<ItemIdx>, rng: &mut softslot_numerics::Rng) -> Result<ItemIdx> {
    if exclude.len() >= num_items {
        return Err(CoreError::Protocol("no non-interacted item to sample".into()));
    }
    loop {
        let i = rng.random_range(0..num_items);
        if !exclude.contains(&i) {
            return Ok(i);
        }
    }
}

/// A test case: the user's history, the held-out positive, and 19 negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub user: UserIdx,
    pub history: Vec<ItemIdx>,
    pub positive: ItemIdx,
    pub negatives: Vec<ItemIdx>,
    /// Positive and negatives in a seeded shuffled order.
    pub candidates: Vec<ItemIdx>,
}

/// Builds evaluation instances for the given users (all evaluable users when
/// `users` is `None`). The history is everything before the test item.
pub fn build_eval_instances(
    dataset: &Dataset,
    splits: &SplitSet,
    users: Option<&[UserIdx]>,
    seed: u64,
) -> Result<Vec<EvalInstance>> {
    let wanted: Option<HashSet<UserIdx>> = users.map(|u| u.iter().copied().collect());
    let mut out = Vec::new();
    for split in splits.evaluable() {
        if wanted.as_ref().is_some_and(|w| !w.contains(&split.user)) {
            continue;
        }
        let positive = split.test.expect("evaluable");
        let negatives = sample_negatives(dataset, split.user, EVAL_NEGATIVES, seed)?;
        let mut candidates = negatives.clone();
        candidates.push(positive);
        let mut rng = seeded_rng(seed, &format!("candidate-order/{}", split.user));
        candidates.shuffle(&mut rng);
        out.push(EvalInstance {
            user: split.user,
            history: split.fit_sequence(),
            positive,
            negatives,
            candidates,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemLabel {
    Cold,
    Warm,
    Mid,
}

impl ItemLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemLabel::Cold => "cold",
            ItemLabel::Warm => "warm",
            ItemLabel::Mid => "mid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioLabel {
    pub labels: Vec<ItemLabel>,
}

/// Ranks items by descending interaction count (ties: ascending index); the
/// first `floor(pct * |I|)` are warm, the last `floor(pct * |I|)` cold.
pub fn label_cold_warm(dataset: &Dataset, pct: f64) -> Result<ScenarioLabel> {
    label_by_counts(&dataset.item_counts(), pct)
}

pub fn label_by_counts(counts: &[usize], pct: f64) -> Result<ScenarioLabel> {
    if !(pct > 0.0 && pct < 0.5) {
        return Err(CoreError::Protocol(format!("cold/warm fraction must be in (0, 0.5), got {pct}")));
    }
    let n = counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let k = (pct * n as f64).floor() as usize;
    let mut labels = vec![ItemLabel::Mid; n];
    for &i in &order[..k] {
        labels[i] = ItemLabel::Warm;
    }
    for &i in &order[n - k..] {
        labels[i] = ItemLabel::Cold;
    }
    Ok(ScenarioLabel { labels })
}

/// Samples `k` training users; evaluation is unaffected.
pub fn select_fewshot_users(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<UserIdx>> {
    if k > dataset.num_users() {
        return Err(CoreError::Protocol(format!(
            "few-shot K = {k} exceeds the {} available users",
            dataset.num_users()
        )));
    }
    let mut rng = seeded_rng(seed, "fewshot-users");
    let mut users: Vec<UserIdx> = rand::seq::index::sample(&mut rng, dataset.num_users(), k).into_vec();
    users.sort_unstable();
    Ok(users)
}

/// Users with exactly three interactions. They must be kept out of training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColdUserSelection {
    pub users: Vec<UserIdx>,
    pub warning: Option<String>,
}

pub fn select_cold_users(dataset: &Dataset) -> ColdUserSelection {
    let users: Vec<UserIdx> = (0..dataset.num_users())
        .filter(|&u| dataset.sequences[u].len() == 3)
        .collect();
    let warning = users
        .is_empty()
        .then(|| "no users with exactly three interactions; cold-user scenario is empty".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    ColdUserSelection { users, warning }
}
