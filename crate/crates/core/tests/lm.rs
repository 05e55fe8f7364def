//! Frozen language model: scoring, decoding and pretraining behavior.

use std::collections::HashMap;

use softslot_core::lm::{greedy_generate, lm_words, train_lm, FrozenLm, LmConfig, LmTokenizer, BOS_ID, TOK_EMB};
use softslot_core::synth::{generate, SynthConfig};
use softslot_numerics::{Tape, Tensor};

fn small_config() -> LmConfig {
    LmConfig {
        dim: 16,
        layers: 1,
        heads: 2,
        ff_dim: 32,
        context: 64,
        window: 32,
        epochs: 1,
        ..LmConfig::default()
    }
}

fn uniform_lm() -> FrozenLm {
    let tok = LmTokenizer::build(["one two three four five six seven"]);
    let mut lm = FrozenLm::init(&small_config(), tok, 1).unwrap();
    let v = lm.vocab_size();
    *lm.params.get_mut(TOK_EMB).unwrap() = Tensor::zeros(&[v, 16]);
    lm
}

#[test]
fn uniform_logits_give_length_times_log_vocab() {
    let lm = uniform_lm();
    let v = lm.vocab_size() as f64;
    let prompt = lm.tokenizer.encode("one two three");
    for l in 1..5 {
        let targets: Vec<usize> = lm.tokenizer.encode("four five six seven")[..l].to_vec();
        let tape = Tape::new(&[&lm.params]);
        let p = lm.embed_tokens(&tape, &prompt).unwrap();
        let nll = tape.item(lm.sequence_nll(&tape, p, &targets).unwrap()) as f64;
        let want = l as f64 * v.ln();
        assert!((nll - want).abs() < 1e-4 * want, "L={l}: {nll} vs {want}");
    }
}

#[test]
fn log_softmax_rows_normalize() {
    let tok = LmTokenizer::build(["alpha beta gamma delta"]);
    let lm = FrozenLm::init(&small_config(), tok, 3).unwrap();
    let runner = lm.runner().unwrap();
    let ids = lm.tokenizer.encode("alpha beta gamma delta");
    let rows: Vec<Vec<f32>> = ids.iter().map(|&i| lm.token_row(i).unwrap().to_vec()).collect();
    for n in 1..=rows.len() {
        let cache = runner.prefill(&rows[..n]).unwrap();
        let s: f64 = runner.next_log_probs(&cache).unwrap().iter().map(|&l| (l as f64).exp()).sum();
        assert!((s - 1.0).abs() < 1e-5, "row {n} sums to {s}");
    }
}

#[test]
fn appending_a_target_never_lowers_nll() {
    let tok = LmTokenizer::build(["a b c d e f g"]);
    let lm = FrozenLm::init(&small_config(), tok, 9).unwrap();
    let prompt = lm.tokenizer.encode("a b");
    let targets = lm.tokenizer.encode("c d e f g");
    let mut prev = 0.0;
    for l in 1..=targets.len() {
        let tape = Tape::new(&[&lm.params]);
        let p = lm.embed_tokens(&tape, &prompt).unwrap();
        let nll = tape.item(lm.sequence_nll(&tape, p, &targets[..l]).unwrap());
        assert!(nll >= prev, "{nll} < {prev} at L={l}");
        prev = nll;
    }
}

#[test]
fn logits_are_causal() {
    let tok = LmTokenizer::build(["a b c d e f g"]);
    let lm = FrozenLm::init(&small_config(), tok, 2).unwrap();
    let a = lm.tokenizer.encode("a b c d");
    let b = lm.tokenizer.encode("a b g g");
    let logits = |ids: &[usize]| {
        let tape = Tape::new(&[&lm.params]);
        let r = lm.embed_tokens(&tape, ids).unwrap();
        tape.value(lm.forward_embeddings(&tape, r).unwrap())
    };
    let (la, lb) = (logits(&a), logits(&b));
    let v = lm.vocab_size();
    assert_eq!(&la.data()[..2 * v], &lb.data()[..2 * v]);
    assert_ne!(&la.data()[2 * v..], &lb.data()[2 * v..]);
}

#[test]
fn one_epoch_on_a_thousand_titles_beats_initialization() {
    let g = generate(&SynthConfig {
        items: 1000,
        users: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let titles: Vec<String> = g.meta.iter().map(|m| m.title.clone()).collect();
    assert_eq!(titles.len(), 1000);
    let tok = LmTokenizer::build(titles.iter().map(String::as_str));
    let (lm, log) = train_lm(&titles, tok, &LmConfig { epochs: 1, ..LmConfig::default() }, 4).unwrap();
    assert!(log.epoch_perplexity[0] < log.initial_perplexity, "{log:?}");
    assert!(lm.params.all_frozen());
}

#[test]
fn converged_model_follows_the_majority_bigram() {
    let mut corpus = Vec::new();
    for k in 0..40 {
        let next = if k % 4 == 0 { "car" } else { "apple" };
        corpus.push(format!("she saw a red {next} today"));
        corpus.push(format!("the green {} was here", if k % 2 == 0 { "hat" } else { "door" }));
    }
    let mut bigrams: HashMap<(&str, &str), usize> = HashMap::new();
    for d in &corpus {
        let w = lm_words(d);
        for p in w.windows(2) {
            *bigrams.entry((p[0], p[1])).or_default() += 1;
        }
    }
    let successor = |w: &str| {
        bigrams
            .iter()
            .filter(|((a, _), _)| *a == w)
            .max_by_key(|(&(_, b), &c)| (c, std::cmp::Reverse(b)))
            .map(|((_, b), _)| *b)
            .unwrap()
    };
    assert_eq!(successor("red"), "apple");

    let tok = LmTokenizer::build(corpus.iter().map(String::as_str));
    let cfg = LmConfig {
        epochs: 30,
        ..small_config()
    };
    let (lm, _) = train_lm(&corpus, tok, &cfg, 8).unwrap();
    let mut rows = vec![lm.token_row(BOS_ID).unwrap().to_vec()];
    for id in lm.tokenizer.encode("she saw a red") {
        rows.push(lm.token_row(id).unwrap().to_vec());
    }
    let out = greedy_generate(&lm, &rows, 1).unwrap();
    assert_eq!(lm.tokenizer.token(out[0]), successor("red"));
}
