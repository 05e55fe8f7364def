//! Item-text encoder: mean-pooled token embeddings followed by one `tanh`
//! affine layer. Produces the text embedding `Q_i` of an item.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use softslot_numerics::{seeded_rng, Float, ParamStore, Tape, Tensor, Var};

use crate::data::{Dataset, ItemIdx};
use crate::error::{CoreError, Result};
use crate::layers::{mean_rows, Linear};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Lowercased alphanumeric runs; every other character separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// The item text fed to the encoder, with the description cut to its first
/// `max_desc_tokens` tokens.
pub fn item_text(title: &str, description: &str, max_desc_tokens: usize) -> String {
    let desc: Vec<&str> = description
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(max_desc_tokens)
        .collect();
    format!("Title: {title}, Description: {}", desc.join(" "))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(extra: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocab {
            tokens: vec![PAD.to_string(), UNK.to_string()],
            index: HashMap::new(),
        };
        v.tokens.extend(extra);
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn restore(mut self) -> Self {
        self.reindex();
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Token frequencies over every item's encoder text.
pub fn token_counts(dataset: &Dataset, max_desc_tokens: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for m in &dataset.items {
        for t in tokenize(&item_text(&m.title, &m.description, max_desc_tokens)) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts
}

/// Tokens with frequency `>= min_count`, in lexical order after the specials.
pub fn build_vocab(dataset: &Dataset, min_count: usize, max_desc_tokens: usize) -> Vocab {
    let counts = token_counts(dataset, max_desc_tokens);
    Vocab::from_tokens(counts.into_iter().filter(|&(_, c)| c >= min_count).map(|(t, _)| t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub dim: usize,
    pub min_count: usize,
    pub max_desc_tokens: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            dim: 64,
            min_count: 1,
            max_desc_tokens: 64,
        }
    }
}

pub const TEXT_EMB: &str = "text.emb";
const TEXT_PROJ: &str = "text.proj";

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

impl TextEncoder {
    pub fn init(config: &TextConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.dim == 0 {
            return Err(CoreError::Config("text: dim must be positive".into()));
        }
        let mut rng = seeded_rng(seed, "text/init");
        let mut params = ParamStore::new();
        params.insert(TEXT_EMB, Tensor::randn(&[vocab.len(), config.dim], 1.0, &mut rng))?;
        Linear::init(&mut params, TEXT_PROJ, config.dim, config.dim, &mut rng)?;
        Ok(TextEncoder {
            config: config.clone(),
            vocab,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn item_ids(&self, title: &str, description: &str) -> Vec<usize> {
        self.vocab.encode(&item_text(title, description, self.config.max_desc_tokens))
    }

    pub fn dataset_item_ids(&self, dataset: &Dataset, item: ItemIdx) -> Vec<usize> {
        let m = &dataset.items[item];
        self.item_ids(&m.title, &m.description)
    }

    fn proj(&self) -> Linear {
        Linear::named(TEXT_PROJ, self.config.dim, self.config.dim)
    }

    /// `Q = tanh(W mean(emb(ids)) + b)` as `[1, D]`.
    pub fn encode<T: Float>(&self, tape: &Tape<T>, ids: &[usize]) -> Result<Var> {
        let ids: &[usize] = if ids.is_empty() { &[PAD_ID] } else { ids };
        let rows = tape.embedding(tape.param(TEXT_EMB)?, ids)?;
        Ok(tape.tanh(self.proj().forward(tape, mean_rows(tape, rows)?)?)?)
    }

    /// Encodes several token lists at once as `[n, D]`.
    pub fn encode_many<T: Float>(&self, tape: &Tape<T>, lists: &[&[usize]]) -> Result<Var> {
        let mut flat = Vec::new();
        let mut pool = Vec::new();
        let total: usize = lists.iter().map(|l| l.len().max(1)).sum();
        for l in lists {
            let l: &[usize] = if l.is_empty() { &[PAD_ID] } else { l };
            let mut row = vec![T::zero(); total];
            let w = T::c(1.0 / l.len() as f64);
            for k in 0..l.len() {
                row[flat.len() + k] = w;
            }
            flat.extend_from_slice(l);
            pool.extend(row);
        }
        let rows = tape.embedding(tape.param(TEXT_EMB)?, &flat)?;
        let pool = tape.constant(Tensor::new(vec![lists.len(), total], pool)?);
        Ok(tape.tanh(self.proj().forward(tape, tape.matmul(pool, rows)?)?)?)
    }

    pub fn encode_item(&self, title: &str, description: &str) -> Result<Vec<f32>> {
        let tape = Tape::new(&[&self.params]);
        let q = self.encode(&tape, &self.item_ids(title, description))?;
        Ok(tape.value(q).into_data())
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}
