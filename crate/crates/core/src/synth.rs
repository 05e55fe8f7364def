//! Planted-cluster synthetic catalog and interaction generator.
//!
//! Items belong to clusters and every title starts with its cluster keyword.
//! Each user is assigned a cluster and walks through that cluster's items in
//! a fixed order, so the data has both a content signal (the keyword) and a
//! sequential one (the walk). With probability `1 - in_cluster_prob` a step
//! instead picks a random item from another cluster.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use softslot_numerics::{seeded_rng, Rng};

use crate::data::{ItemMeta, RawReview};
use crate::error::{CoreError, Result};

const KEYWORDS: [&str; 10] = [
    "western", "horror", "comedy", "romance", "mystery", "fantasy", "musical", "thriller", "cartoon", "sports",
];
const DISJOINT_KEYWORDS: [&str; 10] = [
    "jungle", "ocean", "desert", "arctic", "urban", "galaxy", "island", "castle", "forest", "valley",
];
const FILLER: [&str; 16] = [
    "friends", "family", "journey", "secret", "city", "night", "river", "stranger", "house", "war", "summer",
    "road", "letter", "dream", "hero", "village",
];
const DISJOINT_FILLER: [&str; 16] = [
    "copper", "lantern", "harbor", "meadow", "engine", "violet", "thunder", "marble", "orchard", "compass",
    "velvet", "glacier", "saddle", "ember", "pillar", "quartz",
];
const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const DISJOINT_ONSETS: [&str; 8] = ["ch", "sh", "th", "v", "z", "br", "kl", "tr"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub clusters: usize,
    pub users: usize,
    pub items: usize,
    pub in_cluster_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of each cluster's items that only ever appear as test items.
    pub cold_item_fraction: f64,
    /// Probability a user's last item is replaced by a cold item of their cluster.
    pub cold_test_prob: f64,
    /// Use a keyword, filler and name inventory sharing no word with the default one.
    pub disjoint: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clusters: 5,
            users: 200,
            items: 100,
            in_cluster_prob: 0.9,
            min_len: 3,
            max_len: 15,
            cold_item_fraction: 0.0,
            cold_test_prob: 0.5,
            disjoint: false,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("synth: {m}")));
        if self.clusters == 0 || self.clusters > KEYWORDS.len() {
            return bad(format!("clusters must be in 1..={}", KEYWORDS.len()));
        }
        if self.items < 2 * self.clusters {
            return bad("need at least two items per cluster".into());
        }
        if self.users == 0 {
            return bad("users must be positive".into());
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return bad(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        for (name, p) in [
            ("in_cluster_prob", self.in_cluster_prob),
            ("cold_item_fraction", self.cold_item_fraction),
            ("cold_test_prob", self.cold_test_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.cold_item_fraction >= 0.5 {
            return bad("cold_item_fraction must be below 0.5".into());
        }
        Ok(())
    }
}

const SHELF_LEADS: [&str; 6] = ["Watched :", "The shelf holds", "Someone saw", "A friend has seen", "The list has", "Last month they watched"];
const SHELF_TAILS: [&str; 5] = [".", "on it .", "so far .", "before .", "in the past ."];
const SHELF_QUESTIONS: [&str; 5] = ["", "What do these share ?", "Which genre is this ?", "What kind of movies are these ?", "Which genre fits best ?"];

/// Ground truth written next to the generated files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterOracle {
    pub keywords: Vec<String>,
    pub item_cluster: BTreeMap<String, usize>,
    pub user_cluster: BTreeMap<String, usize>,
    pub cold_items: Vec<String>,
}

impl ClusterOracle {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The keyword of the cluster a user was generated from.
    pub fn user_keyword(&self, user_id: &str) -> Option<&str> {
        self.user_cluster.get(user_id).map(|&c| self.keywords[c].as_str())
    }

    /// Background text for the synthetic world: short lists of catalog
    /// titles, mostly from one cluster, closed by the majority keyword.
    /// Built from item metadata only.
    pub fn shelf_documents(&self, items: &[ItemMeta], count: usize, seed: u64) -> Vec<String> {
        let mut rng = seeded_rng(seed, "synth/shelves");
        let mut by_cluster: Vec<Vec<&str>> = vec![Vec::new(); self.keywords.len()];
        for m in items {
            if let Some(&c) = self.item_cluster.get(&m.item_id) {
                by_cluster[c].push(m.title.as_str());
            }
        }
        let clusters: Vec<usize> = (0..by_cluster.len()).filter(|&c| !by_cluster[c].is_empty()).collect();
        if clusters.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                let c = *clusters.choose(&mut rng).unwrap();
                let n = rng.random_range(3..=8);
                let mut votes = vec![0usize; by_cluster.len()];
                let titles: Vec<&str> = (0..n)
                    .map(|_| {
                        let k = if rng.random_bool(0.85) { c } else { *clusters.choose(&mut rng).unwrap() };
                        votes[k] += 1;
                        *by_cluster[k].choose(&mut rng).unwrap()
                    })
                    .collect();
                let top = (0..votes.len()).max_by_key(|&k| (votes[k], k == c)).unwrap();
                let lead = SHELF_LEADS.choose(&mut rng).unwrap();
                let tail = SHELF_TAILS.choose(&mut rng).unwrap();
                let ask = SHELF_QUESTIONS.choose(&mut rng).unwrap();
                format!("{lead} {} {tail} {ask} Genre : {} .", titles.join(" , "), self.keywords[top])
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub reviews: Vec<RawReview>,
    pub meta: Vec<ItemMeta>,
    pub oracle: ClusterOracle,
}

pub const REVIEWS_FILE: &str = "reviews.jsonl";
pub const META_FILE: &str = "meta.jsonl";
pub const ORACLE_FILE: &str = "clusters.json";

impl SyntheticData {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let mut reviews = String::new();
        for r in &self.reviews {
            reviews.push_str(&serde_json::to_string(r)?);
            reviews.push('\n');
        }
        let mut meta = String::new();
        for m in &self.meta {
            let rec = serde_json::json!({"asin": m.item_id, "title": m.title, "description": m.description});
            meta.push_str(&rec.to_string());
            meta.push('\n');
        }
        for (name, body) in [
            (REVIEWS_FILE, reviews),
            (META_FILE, meta),
            (ORACLE_FILE, serde_json::to_string_pretty(&self.oracle)?),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| CoreError::io(&p, e))?;
        }
        Ok(())
    }
}

fn pseudo_words(n: usize, disjoint: bool, rng: &mut Rng) -> Vec<String> {
    let onsets: &[&str] = if disjoint { &DISJOINT_ONSETS } else { &ONSETS };
    let reserved: HashSet<&str> = KEYWORDS
        .iter()
        .chain(&DISJOINT_KEYWORDS)
        .chain(&FILLER)
        .chain(&DISJOINT_FILLER)
        .copied()
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = if rng.random_bool(0.5) { 2 } else { 3 };
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(onsets.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        if !reserved.contains(w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn generate(config: &SynthConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed, if config.disjoint { "synth/disjoint" } else { "synth" });
    let (keywords, filler, prefix) = if config.disjoint {
        (&DISJOINT_KEYWORDS, &DISJOINT_FILLER, "T")
    } else {
        (&KEYWORDS, &FILLER, "")
    };
    let keywords: Vec<String> = keywords[..config.clusters].iter().map(|s| s.to_string()).collect();
    let names = pseudo_words(config.items, config.disjoint, &mut rng);

    let item_cluster: Vec<usize> = (0..config.items).map(|i| i % config.clusters).collect();
    let item_id = |i: usize| format!("{prefix}I{i:05}");
    let user_id = |u: usize| format!("{prefix}U{u:05}");

    // per-cluster walk order over warm items, plus the cold pool
    let mut walk: Vec<Vec<usize>> = vec![Vec::new(); config.clusters];
    let mut cold: Vec<Vec<usize>> = vec![Vec::new(); config.clusters];
    for c in 0..config.clusters {
        let mut members: Vec<usize> = (0..config.items).filter(|&i| item_cluster[i] == c).collect();
        members.shuffle(&mut rng);
        let n_cold = (config.cold_item_fraction * members.len() as f64).round() as usize;
        let n_cold = n_cold.min(members.len() - 2);
        cold[c] = members.split_off(members.len() - n_cold);
        walk[c] = members;
    }
    let warm_items: Vec<usize> = walk.iter().flatten().copied().collect();

    let meta = (0..config.items)
        .map(|i| {
            let kw = &keywords[item_cluster[i]];
            let f: Vec<&str> = filler.choose_multiple(&mut rng, 3).copied().collect();
            ItemMeta {
                item_id: item_id(i),
                title: format!("{kw} {}", names[i]),
                description: format!("A {kw} story about {} , {} and {} . Genre : {kw} .", f[0], f[1], f[2]),
            }
        })
        .collect();

    let mut reviews = Vec::new();
    let mut user_cluster = BTreeMap::new();
    for u in 0..config.users {
        let c = rng.random_range(0..config.clusters);
        user_cluster.insert(user_id(u), c);
        let len = rng.random_range(config.min_len..=config.max_len);
        let order = &walk[c];
        let mut pos = rng.random_range(0..order.len());
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        let mut used = HashSet::new();
        while seq.len() < len {
            let item = if rng.random_bool(config.in_cluster_prob) {
                // next unvisited item along the cluster walk
                let mut step = 0;
                while used.contains(&order[pos]) && step < order.len() {
                    pos = (pos + 1) % order.len();
                    step += 1;
                }
                let it = order[pos];
                pos = (pos + 1) % order.len();
                it
            } else {
                let others: Vec<usize> =
                    warm_items.iter().copied().filter(|&i| item_cluster[i] != c && !used.contains(&i)).collect();
                match others.choose(&mut rng) {
                    Some(&i) => i,
                    None => break,
                }
            };
            used.insert(item);
            seq.push(item);
        }
        if !cold[c].is_empty() && rng.random_bool(config.cold_test_prob) {
            let last = seq.len() - 1;
            seq[last] = *cold[c].choose(&mut rng).unwrap();
        }
        for (j, &i) in seq.iter().enumerate() {
            reviews.push(RawReview {
                user_id: user_id(u),
                item_id: item_id(i),
                rating: 5.0,
                timestamp: 1_300_000_000 + (j as i64) * 86_400 + u as i64,
            });
        }
    }

    let oracle = ClusterOracle {
        keywords,
        item_cluster: (0..config.items).map(|i| (item_id(i), item_cluster[i])).collect(),
        user_cluster,
        cold_items: cold.iter().flatten().map(|&i| item_id(i)).collect(),
    };
    Ok(SyntheticData { reviews, meta, oracle })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_dataset;

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.reviews, b.reviews);
        let d = build_dataset(&a.reviews, &a.meta, None).unwrap();
        assert_eq!(d.num_users(), 200);
        assert!(d.sequences.iter().all(|s| (3..=15).contains(&s.len())));
        for s in &d.sequences {
            let distinct: HashSet<_> = s.iter().collect();
            assert_eq!(distinct.len(), s.len());
        }
    }

    #[test]
    fn titles_start_with_cluster_keyword() {
        let data = generate(&SynthConfig::default()).unwrap();
        for m in &data.meta {
            let c = data.oracle.item_cluster[&m.item_id];
            assert!(m.title.starts_with(&data.oracle.keywords[c]));
        }
    }

    #[test]
    fn in_cluster_rate_is_close_to_target() {
        let data = generate(&SynthConfig::default()).unwrap();
        let hits = data
            .reviews
            .iter()
            .filter(|r| data.oracle.item_cluster[&r.item_id] == data.oracle.user_cluster[&r.user_id])
            .count();
        let rate = hits as f64 / data.reviews.len() as f64;
        assert!((rate - 0.9).abs() < 0.04, "in-cluster rate {rate}");
    }

    #[test]
    fn cold_items_only_appear_last() {
        let cfg = SynthConfig {
            cold_item_fraction: 0.3,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        assert_eq!(data.oracle.cold_items.len(), 30);
        let cold: HashSet<&str> = data.oracle.cold_items.iter().map(String::as_str).collect();
        let d = build_dataset(&data.reviews, &data.meta, None).unwrap();
        for s in &d.sequences {
            for &i in &s[..s.len() - 1] {
                assert!(!cold.contains(d.items[i].item_id.as_str()));
            }
        }
    }

    #[test]
    fn shelves_end_with_the_majority_keyword() {
        let data = generate(&SynthConfig::default()).unwrap();
        let o = &data.oracle;
        let docs = o.shelf_documents(&data.meta, 300, 1);
        assert_eq!(docs.len(), 300);
        assert_eq!(docs, o.shelf_documents(&data.meta, 300, 1));
        for d in &docs {
            let words: Vec<&str> = d.split_whitespace().collect();
            let answer = words[words.len() - 2];
            let mut votes = vec![0; o.keywords.len()];
            for w in &words[..words.len() - 4] {
                if let Some(k) = o.keywords.iter().position(|k| k == w) {
                    votes[k] += 1;
                }
            }
            let best = *votes.iter().max().unwrap();
            let k = o.keywords.iter().position(|k| k == answer).unwrap();
            assert_eq!(votes[k], best, "{d}");
        }
        assert!(o.shelf_documents(&[], 5, 1).is_empty());
    }

    #[test]
    fn disjoint_inventory_shares_no_words() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig {
            disjoint: true,
            ..SynthConfig::default()
        })
        .unwrap();
        let words = |d: &SyntheticData| -> HashSet<String> {
            d.meta
                .iter()
                .flat_map(|m| {
                    format!("{} {}", m.title, m.description)
                        .split_whitespace()
                        .map(str::to_lowercase)
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let shared: Vec<String> = words(&a)
            .intersection(&words(&b))
            .filter(|w| !matches!(w.as_str(), "a" | "story" | "about" | "," | "and" | "." | "genre" | ":"))
            .cloned()
            .collect();
        assert!(shared.is_empty(), "shared content words {shared:?}");
    }
}
