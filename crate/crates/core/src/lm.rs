//! A small causal transformer language model over word-level tokens.
//!
//! It is pretrained on catalog text and then frozen. Its forward pass takes
//! raw embedding rows, so projected soft prompts can be mixed with ordinary
//! token embeddings. [`LmRunner`] is a tape-free inference path with a
//! key/value cache, used for candidate scoring and greedy decoding.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use softslot_numerics::{seeded_rng, Float, ParamStore, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::layers::{causal_mask, Block, Dropout, LayerNorm};
use crate::train::{batch_grad, check_finite, Optimizer};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const END_ID: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<end>"];

/// Splits into alphanumeric words and single punctuation marks, keeping case.
pub fn lm_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmTokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LmTokenizer {
    /// Vocabulary of every word in `texts`, in first-seen order after the specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut t = LmTokenizer {
            tokens: SPECIALS.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        };
        t.reindex();
        for text in texts {
            for w in lm_words(text) {
                if !t.index.contains_key(w) {
                    t.index.insert(w.to_string(), t.tokens.len());
                    t.tokens.push(w.to_string());
                }
            }
        }
        t
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

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

    pub fn encode(&self, text: &str) -> Vec<usize> {
        lm_words(text).into_iter().map(|w| self.index.get(w).copied().unwrap_or(UNK_ID)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK_ID])
    }

    /// Space-joined tokens; `<end>` and padding are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != END_ID && i != PAD_ID)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub context: usize,
    pub window: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            dim: 64,
            layers: 2,
            heads: 2,
            ff_dim: 256,
            context: 512,
            window: 128,
            epochs: 40,
            lr: 3e-3,
            batch_size: 8,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 || self.dim % 2 != 0 {
            return Err(CoreError::Config("lm: dim must be even and divisible by heads".into()));
        }
        if self.window < 2 || self.window > self.context || self.batch_size == 0 || self.lr <= 0.0 {
            return Err(CoreError::Config(
                "lm: need 2 <= window <= context, positive batch size and lr".into(),
            ));
        }
        Ok(())
    }
}

pub const TOK_EMB: &str = "lm.tok_emb";

#[derive(Clone, Debug)]
pub struct FrozenLm {
    pub config: LmConfig,
    pub tokenizer: LmTokenizer,
    pub params: ParamStore,
    positions: Vec<f32>,
}

fn sinusoid(context: usize, dim: usize) -> Vec<f32> {
    let mut pe = vec![0.0f32; context * dim];
    for pos in 0..context {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[pos * dim + 2 * i] = angle.sin() as f32;
            pe[pos * dim + 2 * i + 1] = angle.cos() as f32;
        }
    }
    pe
}

impl FrozenLm {
    pub fn init(config: &LmConfig, tokenizer: LmTokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, "lm/init");
        let mut params = ParamStore::new();
        let d = config.dim;
        params.insert(TOK_EMB, Tensor::randn(&[tokenizer.len(), d], (1.0 / d as f64).sqrt(), &mut rng))?;
        for l in 0..config.layers {
            Block::init(&mut params, &format!("lm.block{l}"), d, config.heads, config.ff_dim, &mut rng)?;
        }
        LayerNorm::init(&mut params, "lm.ln_f", d)?;
        Ok(Self::from_parts(config.clone(), tokenizer, params))
    }

    pub fn from_parts(config: LmConfig, tokenizer: LmTokenizer, params: ParamStore) -> Self {
        let positions = sinusoid(config.context, config.dim);
        FrozenLm {
            config,
            tokenizer,
            params,
            positions,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.len()
    }

    fn blocks(&self) -> Vec<Block> {
        (0..self.config.layers)
            .map(|l| Block::named(&format!("lm.block{l}"), self.config.dim, self.config.heads, self.config.ff_dim))
            .collect()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.vocab_size()) {
            Some(&i) => Err(softslot_numerics::NumericsError::IndexOutOfRange {
                op: "embed_tokens",
                index: i,
                bound: self.vocab_size(),
            }
            .into()),
            None => Ok(()),
        }
    }

    /// Token embedding rows `[n, d]`.
    pub fn embed_tokens<T: Float>(&self, tape: &Tape<T>, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        Ok(tape.embedding(tape.param(TOK_EMB)?, ids)?)
    }

    pub fn token_row(&self, id: usize) -> Result<&[f32]> {
        self.check_ids(&[id])?;
        Ok(self.params.require(TOK_EMB)?.row(id))
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.config.context {
            return Err(CoreError::Overflow {
                required: n,
                available: self.config.context,
            });
        }
        Ok(())
    }

    /// Final hidden states `[n, d]` for embedding rows `[n, d]`.
    pub fn hidden<T: Float>(&self, tape: &Tape<T>, rows: Var) -> Result<Var> {
        let n = tape.shape(rows)[0];
        self.check_len(n)?;
        let d = self.config.dim;
        let pe = Tensor::<f32>::new(vec![n, d], self.positions[..n * d].to_vec())?.cast();
        let mut x = tape.add(tape.scale(rows, T::c((d as f64).sqrt()))?, tape.constant(pe))?;
        let mask = tape.constant(causal_mask(n));
        for block in self.blocks() {
            x = block.forward(tape, x, mask, &mut Dropout::off())?;
        }
        LayerNorm::named("lm.ln_f").forward(tape, x)
    }

    /// Causal next-token logits `[n, |V|]`.
    pub fn forward_embeddings<T: Float>(&self, tape: &Tape<T>, rows: Var) -> Result<Var> {
        let h = self.hidden(tape, rows)?;
        Ok(tape.matmul_t(h, tape.param(TOK_EMB)?)?)
    }

    /// Teacher-forced `-sum_k log P(y_k | prompt, y_<k)`.
    pub fn sequence_nll<T: Float>(&self, tape: &Tape<T>, prompt: Var, targets: &[usize]) -> Result<Var> {
        if targets.is_empty() {
            return Err(CoreError::Protocol("empty target sequence".into()));
        }
        self.check_ids(targets)?;
        let p = tape.shape(prompt)[0];
        let l = targets.len();
        self.check_len(p + l - 1)?;
        let rows = if l > 1 {
            tape.concat_rows(&[prompt, self.embed_tokens(tape, &targets[..l - 1])?])?
        } else {
            prompt
        };
        let h = self.hidden(tape, rows)?;
        let h = tape.slice_rows(h, p - 1, p - 1 + l)?;
        let logits = tape.matmul_t(h, tape.param(TOK_EMB)?)?;
        Ok(tape.cross_entropy(logits, targets, false)?)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn runner(&self) -> Result<LmRunner<'_>> {
        LmRunner::new(self)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmTrainLog {
    pub initial_perplexity: f64,
    pub epoch_perplexity: Vec<f64>,
    pub windows: usize,
}

/// Documents packed into one token stream as `<bos> doc <end>`.
fn pack(tokenizer: &LmTokenizer, docs: &[&String]) -> Vec<usize> {
    let mut stream = Vec::new();
    for d in docs {
        stream.push(BOS_ID);
        stream.extend(tokenizer.encode(d));
        stream.push(END_ID);
    }
    stream
}

fn windows(stream: &[usize], window: usize, offset: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut start = offset.min(stream.len().saturating_sub(2));
    while start + 2 <= stream.len() {
        let end = (start + window + 1).min(stream.len());
        out.push(stream[start..end].to_vec());
        start += window;
    }
    out
}

fn window_loss<T: Float>(lm: &FrozenLm, tape: &Tape<T>, w: &[usize]) -> Result<Var> {
    let rows = lm.embed_tokens(tape, &w[..w.len() - 1])?;
    let logits = lm.forward_embeddings(tape, rows)?;
    Ok(tape.cross_entropy(logits, &w[1..], true)?)
}

/// Pretrains on `corpus` with next-token cross-entropy, then freezes.
pub fn train_lm(corpus: &[String], tokenizer: LmTokenizer, config: &LmConfig, seed: u64) -> Result<(FrozenLm, LmTrainLog)> {
    if corpus.iter().all(|d| d.trim().is_empty()) {
        return Err(CoreError::EmptyDataset("collecting the language-model corpus"));
    }
    let mut lm = FrozenLm::init(config, tokenizer, seed)?;
    let mut rng = seeded_rng(seed, "lm/order");
    let mut docs: Vec<&String> = corpus.iter().filter(|d| !d.trim().is_empty()).collect();
    let base = windows(&pack(&lm.tokenizer, &docs), config.window, 0);
    let mut log = LmTrainLog {
        windows: base.len(),
        ..LmTrainLog::default()
    };
    let (l0, _) = batch_grad(&[&lm.params], &base, |tape, w| window_loss(&lm, tape, w))?;
    log.initial_perplexity = l0.exp();

    let mut opt = Optimizer::new(config.lr);
    for epoch in 0..config.epochs {
        docs.shuffle(&mut rng);
        let offset = rng.random_range(0..config.window);
        let mut ws = windows(&pack(&lm.tokenizer, &docs), config.window, offset);
        ws.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for (step, batch) in ws.chunks(config.batch_size).enumerate() {
            let (loss, grads) = batch_grad(&[&lm.params], batch, |tape, w| window_loss(&lm, tape, w))?;
            check_finite(loss, "lm", epoch, step)?;
            opt.step(&mut lm.params, &grads)?;
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let ppl = (total / count as f64).exp();
        log::debug!("lm epoch {epoch}: perplexity {ppl:.3}");
        log.epoch_perplexity.push(ppl);
    }
    lm.params.freeze_all();
    Ok((lm, log))
}

/// Per-layer keys and values of the positions processed so far.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    last_hidden: Vec<f32>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Incremental inference over a frozen model.
pub struct LmRunner<'a> {
    lm: &'a FrozenLm,
    layers: Vec<Block>,
    ln_f: LayerNorm,
}

impl<'a> LmRunner<'a> {
    fn new(lm: &'a FrozenLm) -> Result<Self> {
        Ok(LmRunner {
            lm,
            layers: lm.blocks(),
            ln_f: LayerNorm::named("lm.ln_f"),
        })
    }

    pub fn empty_cache(&self) -> KvCache {
        KvCache {
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            len: 0,
            last_hidden: Vec::new(),
        }
    }

    /// Pushes one embedding row through every layer and appends it to `cache`.
    pub fn step(&self, cache: &mut KvCache, row: &[f32]) -> Result<()> {
        let lm = self.lm;
        let store = &lm.params;
        let d = lm.config.dim;
        let pos = cache.len;
        lm.check_len(pos + 1)?;
        let scale = (d as f32).sqrt();
        let mut x: Vec<f32> = row
            .iter()
            .zip(&lm.positions[pos * d..(pos + 1) * d])
            .map(|(&r, &p)| r * scale + p)
            .collect();
        let heads = lm.config.heads;
        let dh = d / heads;
        let inv = 1.0 / (dh as f32).sqrt();
        for (l, b) in self.layers.iter().enumerate() {
            let a = b.ln1.apply_row(store, &x)?;
            let q = b.attn.q.apply_row(store, &a)?;
            let k = b.attn.k.apply_row(store, &a)?;
            let v = b.attn.v.apply_row(store, &a)?;
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let n = pos + 1;
            let mut o = vec![0.0f32; d];
            for h in 0..heads {
                let qh = &q[h * dh..(h + 1) * dh];
                let mut scores: Vec<f32> = (0..n)
                    .map(|j| {
                        let kj = &cache.keys[l][j * d + h * dh..j * d + (h + 1) * dh];
                        qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * inv
                    })
                    .collect();
                let m = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let p = s / z;
                    let vj = &cache.values[l][j * d + h * dh..j * d + (h + 1) * dh];
                    for (oo, &vv) in o[h * dh..(h + 1) * dh].iter_mut().zip(vj) {
                        *oo += p * vv;
                    }
                }
            }
            let att = b.attn.o.apply_row(store, &o)?;
            for (xx, a) in x.iter_mut().zip(&att) {
                *xx += a;
            }
            let f = b.ff1.apply_row(store, &b.ln2.apply_row(store, &x)?)?;
            let f: Vec<f32> = f.into_iter().map(|v| v.max(0.0)).collect();
            let f = b.ff2.apply_row(store, &f)?;
            for (xx, a) in x.iter_mut().zip(&f) {
                *xx += a;
            }
        }
        cache.len += 1;
        cache.last_hidden = self.ln_f.apply_row(store, &x)?;
        Ok(())
    }

    pub fn prefill(&self, rows: &[Vec<f32>]) -> Result<KvCache> {
        if rows.is_empty() {
            return Err(CoreError::Protocol("empty prompt".into()));
        }
        self.lm.check_len(rows.len())?;
        let mut cache = self.empty_cache();
        for r in rows {
            self.step(&mut cache, r)?;
        }
        Ok(cache)
    }

    /// Log-probabilities of the next token after the cached positions.
    pub fn next_log_probs(&self, cache: &KvCache) -> Result<Vec<f32>> {
        let emb = self.lm.params.require(TOK_EMB)?;
        let d = self.lm.config.dim;
        let logits: Vec<f32> = emb
            .data()
            .chunks(d)
            .map(|e| e.iter().zip(&cache.last_hidden).map(|(a, b)| a * b).sum())
            .collect();
        let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f32>().ln();
        Ok(logits.into_iter().map(|l| l - lse).collect())
    }

    /// `-sum log P(tokens | cache)` without modifying `cache`.
    pub fn continuation_nll(&self, cache: &KvCache, tokens: &[usize]) -> Result<f64> {
        self.lm.check_ids(tokens)?;
        self.lm.check_len(cache.len + tokens.len().saturating_sub(1))?;
        let mut c = cache.clone();
        let mut nll = 0.0f64;
        for (k, &t) in tokens.iter().enumerate() {
            let lp = self.next_log_probs(&c)?;
            nll -= lp[t] as f64;
            if k + 1 < tokens.len() {
                self.step(&mut c, self.lm.token_row(t)?)?;
            }
        }
        Ok(nll)
    }

    /// Argmax decoding until `<end>` or `max_tokens`; ties go to the lowest id.
    pub fn greedy(&self, rows: &[Vec<f32>], max_tokens: usize) -> Result<Vec<usize>> {
        if max_tokens == 0 {
            return Ok(Vec::new());
        }
        let mut cache = self.prefill(rows)?;
        let mut out = Vec::new();
        while out.len() < max_tokens {
            let lp = self.next_log_probs(&cache)?;
            let mut best = (f32::NEG_INFINITY, UNK_ID);
            for (id, &p) in lp.iter().enumerate() {
                if id == PAD_ID || id == BOS_ID {
                    continue;
                }
                if p > best.0 {
                    best = (p, id);
                }
            }
            out.push(best.1);
            if best.1 == END_ID || cache.len >= self.lm.config.context {
                break;
            }
            self.step(&mut cache, self.lm.token_row(best.1)?)?;
        }
        Ok(out)
    }
}

/// Greedy decoding from embedding rows.
pub fn greedy_generate(lm: &FrozenLm, prompt: &[Vec<f32>], max_tokens: usize) -> Result<Vec<usize>> {
    lm.runner()?.greedy(prompt, max_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FrozenLm {
        let tok = LmTokenizer::build(["the red fox jumps over the lazy dog ."]);
        let cfg = LmConfig {
            dim: 8,
            heads: 2,
            ff_dim: 16,
            context: 16,
            window: 8,
            ..LmConfig::default()
        };
        FrozenLm::init(&cfg, tok, 5).unwrap()
    }

    #[test]
    fn words_and_round_trip() {
        assert_eq!(lm_words("Title: Up, go!"), ["Title", ":", "Up", ",", "go", "!"]);
        let t = LmTokenizer::build(["Hello world ."]);
        assert_eq!(t.decode(&t.encode("Hello   world .")), "Hello world .");
        assert_eq!(t.decode(&t.encode("Hello there")), "Hello <unk>");
    }

    #[test]
    fn token_path_equals_embedding_path() {
        let lm = tiny();
        let ids = lm.tokenizer.encode("the red fox");
        let tape = Tape::new(&[&lm.params]);
        let a = tape.value(lm.forward_embeddings(&tape, lm.embed_tokens(&tape, &ids).unwrap()).unwrap());
        let rows: Vec<Vec<f32>> = ids.iter().map(|&i| lm.token_row(i).unwrap().to_vec()).collect();
        let b = tape.value(lm.forward_embeddings(&tape, tape.constant(Tensor::from_rows(&rows).unwrap())).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn overflow_is_reported() {
        let lm = tiny();
        let tape = Tape::new(&[&lm.params]);
        let rows = tape.constant(Tensor::zeros(&[17, 8]));
        match lm.forward_embeddings(&tape, rows) {
            Err(CoreError::Overflow { required, available }) => assert_eq!((required, available), (17, 16)),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn runner_matches_tape() {
        let lm = tiny();
        let ids = lm.tokenizer.encode("the red fox jumps");
        let targets = lm.tokenizer.encode("over the lazy");
        let tape = Tape::new(&[&lm.params]);
        let prompt = lm.embed_tokens(&tape, &ids).unwrap();
        let nll = tape.item(lm.sequence_nll(&tape, prompt, &targets).unwrap()) as f64;
        let runner = lm.runner().unwrap();
        let rows: Vec<Vec<f32>> = ids.iter().map(|&i| lm.token_row(i).unwrap().to_vec()).collect();
        let cache = runner.prefill(&rows).unwrap();
        let fast = runner.continuation_nll(&cache, &targets).unwrap();
        assert!((nll - fast).abs() < 1e-4 * nll.abs().max(1.0), "{nll} vs {fast}");
    }

    #[test]
    fn greedy_is_deterministic() {
        let lm = tiny();
        let rows = vec![lm.token_row(BOS_ID).unwrap().to_vec()];
        assert!(greedy_generate(&lm, &rows, 0).unwrap().is_empty());
        let a = greedy_generate(&lm, &rows, 5).unwrap();
        assert_eq!(a, greedy_generate(&lm, &rows, 5).unwrap());
        assert!(a.iter().all(|&t| t < lm.vocab_size()));
    }

    #[test]
    fn packing_and_windows() {
        let stream: Vec<usize> = (0..10).collect();
        let w = windows(&stream, 4, 0);
        assert_eq!(w, vec![vec![0, 1, 2, 3, 4], vec![4, 5, 6, 7, 8], vec![8, 9]]);
    }
}
