//! Stage-1: align frozen CF item embeddings `E_i` with text embeddings `Q_i`
//! in a shared joint space through two encoder/decoder pairs.
//!
//! ```text
//! e_i = f_I^enc(E_i)        q_i = f_T^enc(Q_i)
//! L = L_match + alpha * L_item_recon + beta * L_text_recon + L_rec
//! ```
//!
//! `L_rec` scores the user representation against the decoded-encoded item
//! embedding `f_I^dec(f_I^enc(E))` for the positive and one negative.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use softslot_numerics::{derive_seed, seeded_rng, Float, ParamStore, Tape, Tensor, Var};

use crate::cf::{training_sequences, CfModel};
use crate::data::{sample_one_negative, Dataset, ItemIdx, SplitSet, UserIdx};
use crate::error::{CoreError, Result};
use crate::layers::{row_dot, Linear, LEAKY_SLOPE};
use crate::text::TextEncoder;
use crate::train::{check_finite, Optimizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub joint_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub all_items: bool,
    pub freeze_text_encoder: bool,
    pub drop_matching: bool,
    pub drop_recon: bool,
    pub drop_rec_loss: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            joint_dim: 128,
            alpha: 0.5,
            beta: 0.5,
            lr: 1e-4,
            epochs: 10,
            batch_size: 32,
            all_items: false,
            freeze_text_encoder: false,
            drop_matching: false,
            drop_recon: false,
            drop_rec_loss: false,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(CoreError::Config("stage1: alpha and beta must be finite and >= 0".into()));
        }
        if self.joint_dim == 0 || self.batch_size == 0 || self.lr <= 0.0 {
            return Err(CoreError::Config("stage1: joint_dim, batch_size and lr must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            matching: if self.drop_matching { 0.0 } else { 1.0 },
            item_recon: if self.drop_recon { 0.0 } else { self.alpha },
            text_recon: if self.drop_recon { 0.0 } else { self.beta },
            rec: if self.drop_rec_loss { 0.0 } else { 1.0 },
        }
    }
}

/// Term coefficients. A zero weight removes the term from the graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub matching: f64,
    pub item_recon: f64,
    pub text_recon: f64,
    pub rec: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Self {
        LossWeights {
            matching: 1.0,
            item_recon: alpha,
            text_recon: beta,
            rec: 1.0,
        }
    }
}

pub const ITEM_ENC: &str = "align.item_enc";
pub const TEXT_ENC: &str = "align.text_enc";
pub const ITEM_DEC: &str = "align.item_dec";
pub const TEXT_DEC: &str = "align.text_dec";

#[derive(Clone, Debug)]
pub struct AlignmentModel {
    pub cf_dim: usize,
    pub text_dim: usize,
    pub joint_dim: usize,
    pub params: ParamStore,
}

impl AlignmentModel {
    pub fn init(cf_dim: usize, text_dim: usize, joint_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, "align/init");
        let mut params = ParamStore::new();
        Linear::init(&mut params, ITEM_ENC, cf_dim, joint_dim, &mut rng)?;
        Linear::init(&mut params, TEXT_ENC, text_dim, joint_dim, &mut rng)?;
        Linear::init(&mut params, ITEM_DEC, joint_dim, cf_dim, &mut rng)?;
        Linear::init(&mut params, TEXT_DEC, joint_dim, text_dim, &mut rng)?;
        Ok(AlignmentModel {
            cf_dim,
            text_dim,
            joint_dim,
            params,
        })
    }

    fn item_enc(&self) -> Linear {
        Linear::named(ITEM_ENC, self.cf_dim, self.joint_dim)
    }
    fn text_enc(&self) -> Linear {
        Linear::named(TEXT_ENC, self.text_dim, self.joint_dim)
    }
    fn item_dec(&self) -> Linear {
        Linear::named(ITEM_DEC, self.joint_dim, self.cf_dim)
    }
    fn text_dec(&self) -> Linear {
        Linear::named(TEXT_DEC, self.joint_dim, self.text_dim)
    }

    pub fn encode_items<T: Float>(&self, tape: &Tape<T>, e: Var) -> Result<Var> {
        Ok(tape.leaky_relu(self.item_enc().forward(tape, e)?, T::c(LEAKY_SLOPE))?)
    }

    pub fn encode_texts<T: Float>(&self, tape: &Tape<T>, q: Var) -> Result<Var> {
        Ok(tape.leaky_relu(self.text_enc().forward(tape, q)?, T::c(LEAKY_SLOPE))?)
    }

    pub fn decode_items<T: Float>(&self, tape: &Tape<T>, e: Var) -> Result<Var> {
        self.item_dec().forward(tape, e)
    }

    pub fn decode_texts<T: Float>(&self, tape: &Tape<T>, q: Var) -> Result<Var> {
        self.text_dec().forward(tape, q)
    }

    fn check(&self, v: &[f32], want: usize, what: &str) -> Result<()> {
        if v.len() != want {
            return Err(CoreError::Numerics(softslot_numerics::NumericsError::ShapeMismatch {
                op: "alignment",
                detail: format!("{what} has length {}, expected {want}", v.len()),
            }));
        }
        Ok(())
    }

    /// `e_i = f_I^enc(E_i)`.
    pub fn item_to_joint(&self, cf_embedding: &[f32]) -> Result<Vec<f32>> {
        self.check(cf_embedding, self.cf_dim, "CF embedding")?;
        Ok(leaky(self.item_enc().apply_row(&self.params, cf_embedding)?))
    }

    /// `q_i = f_T^enc(Q_i)`.
    pub fn text_to_joint(&self, text_embedding: &[f32]) -> Result<Vec<f32>> {
        self.check(text_embedding, self.text_dim, "text embedding")?;
        Ok(leaky(self.text_enc().apply_row(&self.params, text_embedding)?))
    }

    /// `f_I^dec(f_T^enc(Q_i))`: a text-derived vector in the CF input space.
    pub fn text_to_cf_input(&self, text_embedding: &[f32]) -> Result<Vec<f32>> {
        let q = self.text_to_joint(text_embedding)?;
        self.item_dec().apply_row(&self.params, &q)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

fn leaky(v: Vec<f32>) -> Vec<f32> {
    v.into_iter()
        .map(|x| if x > 0.0 { x } else { LEAKY_SLOPE as f32 * x })
        .collect()
}

/// Tape handles for one Stage-1 batch, all `[B, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Inputs {
    pub x_user: Var,
    pub e_pos: Var,
    pub e_neg: Var,
    pub q_pos: Var,
}

/// Loss nodes; `None` for a term whose weight is zero.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub total: Var,
    pub matching: Option<Var>,
    pub item_recon: Option<Var>,
    pub text_recon: Option<Var>,
    pub rec: Option<Var>,
}

/// Scalar values of [`Stage1Terms`]; removed terms read as exactly 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub total: f64,
    pub matching: f64,
    pub item_recon: f64,
    pub text_recon: f64,
    pub rec: f64,
}

impl Stage1Terms {
    pub fn values<T: Float>(&self, tape: &Tape<T>) -> TermValues {
        let v = |x: Option<Var>| x.map(|x| tape.item(x).as_()).unwrap_or(0.0);
        TermValues {
            total: tape.item(self.total).as_(),
            matching: v(self.matching),
            item_recon: v(self.item_recon),
            text_recon: v(self.text_recon),
            rec: v(self.rec),
        }
    }
}

pub fn stage1_loss<T: Float>(
    model: &AlignmentModel,
    tape: &Tape<T>,
    inputs: Stage1Inputs,
    weights: LossWeights,
) -> Result<Stage1Terms> {
    let b = tape.shape(inputs.e_pos)[0];
    let e = model.encode_items(tape, inputs.e_pos)?;
    let q = model.encode_texts(tape, inputs.q_pos)?;

    let matching = if weights.matching != 0.0 {
        Some(tape.mse(e, q)?)
    } else {
        None
    };
    let item_recon = if weights.item_recon != 0.0 {
        Some(tape.mse(inputs.e_pos, model.decode_items(tape, e)?)?)
    } else {
        None
    };
    let text_recon = if weights.text_recon != 0.0 {
        Some(tape.mse(inputs.q_pos, model.decode_texts(tape, q)?)?)
    } else {
        None
    };
    let rec = if weights.rec != 0.0 {
        let pos = model.decode_items(tape, e)?;
        let neg = model.decode_items(tape, model.encode_items(tape, inputs.e_neg)?)?;
        let s_pos = row_dot(tape, inputs.x_user, pos)?;
        let s_neg = row_dot(tape, inputs.x_user, neg)?;
        let l_pos = tape.bce_with_logits(s_pos, &vec![T::one(); b])?;
        let l_neg = tape.bce_with_logits(s_neg, &vec![T::zero(); b])?;
        Some(tape.add(l_pos, l_neg)?)
    } else {
        None
    };

    let mut total: Option<Var> = None;
    for (term, w) in [
        (matching, weights.matching),
        (item_recon, weights.item_recon),
        (text_recon, weights.text_recon),
        (rec, weights.rec),
    ] {
        if let Some(t) = term {
            let t = if w == 1.0 { t } else { tape.scale(t, T::c(w))? };
            total = Some(match total {
                Some(acc) => tape.add(acc, t)?,
                None => t,
            });
        }
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero())));
    let terms = Stage1Terms {
        total,
        matching,
        item_recon,
        text_recon,
        rec,
    };
    let values = terms.values(tape);
    for (name, v) in [
        ("L_matching", values.matching),
        ("L_item_recon", values.item_recon),
        ("L_text_recon", values.text_recon),
        ("L_rec", values.rec),
    ] {
        if !v.is_finite() {
            return Err(CoreError::NonFinite {
                term: name.into(),
                context: format!("stage-1 batch of {b}"),
            });
        }
    }
    Ok(terms)
}

/// One Stage-1 training position.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Example {
    pub user: UserIdx,
    pub position: usize,
    pub x_user: Vec<f32>,
    pub positive: ItemIdx,
}

/// Training positions: each user's validation item predicted from the train
/// prefix, or with `all_items` every item after the first.
pub fn stage1_examples(
    cf: &CfModel,
    splits: &SplitSet,
    exclude: &HashSet<UserIdx>,
    all_items: bool,
) -> Result<Vec<Stage1Example>> {
    let mut out = Vec::new();
    for (user, seq) in training_sequences(splits, exclude) {
        if seq.len() < 2 {
            continue;
        }
        let positions: Vec<usize> = if all_items { (1..seq.len()).collect() } else { vec![seq.len() - 1] };
        let reprs = if seq.len() - 1 <= cf.config.max_len && all_items {
            Some(cf.prefix_reprs(&seq[..seq.len() - 1])?)
        } else {
            None
        };
        for k in positions {
            let x_user = match &reprs {
                Some(r) => r[k - 1].clone(),
                None => cf.user_repr(&seq[..k])?,
            };
            out.push(Stage1Example {
                user,
                position: k,
                x_user,
                positive: seq[k],
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Log {
    pub weights: Option<LossWeights>,
    pub examples_per_epoch: usize,
    pub epochs: Vec<TermValues>,
    /// Distinct users that contributed to any batch.
    pub trained_users: Vec<UserIdx>,
}

/// Trains the alignment model (and, unless frozen, the text encoder) against
/// a frozen CF model. Returns the frozen-for-Stage-2 models and the log.
#[allow(clippy::too_many_arguments)]
pub fn train_stage1(
    cf: &CfModel,
    text: &mut TextEncoder,
    dataset: &Dataset,
    splits: &SplitSet,
    exclude: &HashSet<UserIdx>,
    config: &Stage1Config,
    seed: u64,
) -> Result<(AlignmentModel, Stage1Log)> {
    config.validate()?;
    if !cf.params.all_frozen() {
        return Err(CoreError::Protocol("stage-1 requires a frozen CF model".into()));
    }
    let mut model = AlignmentModel::init(cf.dim(), text.dim(), config.joint_dim, seed)?;
    if config.freeze_text_encoder {
        text.params.freeze_all();
    } else {
        text.params.unfreeze_all();
    }
    let examples = stage1_examples(cf, splits, exclude, config.all_items)?;
    if examples.is_empty() {
        return Err(CoreError::EmptyDataset("selecting stage-1 training positions"));
    }
    let weights = config.weights();
    let interacted: Vec<HashSet<ItemIdx>> =
        dataset.sequences.iter().map(|s| s.iter().copied().collect()).collect();
    let text_ids: Vec<Vec<usize>> = (0..dataset.num_items()).map(|i| text.dataset_item_ids(dataset, i)).collect();
    let mut log = Stage1Log {
        weights: Some(weights),
        examples_per_epoch: examples.len(),
        ..Stage1Log::default()
    };
    let mut users: Vec<UserIdx> = examples.iter().map(|e| e.user).collect();
    users.sort_unstable();
    users.dedup();
    log.trained_users = users;

    let mut opt_align = Optimizer::new(config.lr);
    let mut opt_text = Optimizer::new(config.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = seeded_rng(seed, "stage1/order");

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = TermValues::default();
        let mut batches = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Stage1Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let negs = batch
                .iter()
                .map(|ex| {
                    let mut rng = seeded_rng(
                        derive_seed(seed, &format!("stage1/{epoch}/{}/{}", ex.user, ex.position)),
                        "neg",
                    );
                    sample_one_negative(dataset.num_items(), &interacted[ex.user], &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let (values, grads) = {
                let tape = Tape::new(&[&model.params, &text.params]);
                let inputs = batch_inputs(&tape, cf, text, &batch, &negs, &text_ids)?;
                let terms = stage1_loss(&model, &tape, inputs, weights)?;
                let values = terms.values(&tape);
                check_finite(values.total, "stage-1", epoch, step)?;
                let grads = tape.backward(terms.total)?.params_for(&[&model.params, &text.params]);
                (values, grads)
            };
            opt_align.step(&mut model.params, &grads)?;
            if !config.freeze_text_encoder {
                opt_text.step(&mut text.params, &grads)?;
            }
            sum.total += values.total;
            sum.matching += values.matching;
            sum.item_recon += values.item_recon;
            sum.text_recon += values.text_recon;
            sum.rec += values.rec;
            batches += 1;
        }
        let n = batches as f64;
        let mean = TermValues {
            total: sum.total / n,
            matching: sum.matching / n,
            item_recon: sum.item_recon / n,
            text_recon: sum.text_recon / n,
            rec: sum.rec / n,
        };
        log::debug!("stage-1 epoch {epoch}: {mean:?}");
        log.epochs.push(mean);
    }
    model.params.freeze_all();
    text.params.freeze_all();
    Ok((model, log))
}

fn batch_inputs<T: Float>(
    tape: &Tape<T>,
    cf: &CfModel,
    text: &TextEncoder,
    batch: &[&Stage1Example],
    negs: &[ItemIdx],
    text_ids: &[Vec<usize>],
) -> Result<Stage1Inputs> {
    let rows = |f: &dyn Fn(usize) -> Result<Vec<f32>>| -> Result<Var> {
        let r = (0..batch.len()).map(f).collect::<Result<Vec<_>>>()?;
        Ok(tape.constant(Tensor::<f32>::from_rows(&r)?.cast()))
    };
    let x_user = rows(&|k| Ok(batch[k].x_user.clone()))?;
    let e_pos = rows(&|k| Ok(cf.item_embedding(batch[k].positive)?.to_vec()))?;
    let e_neg = rows(&|k| Ok(cf.item_embedding(negs[k])?.to_vec()))?;
    let lists: Vec<&[usize]> = batch.iter().map(|ex| text_ids[ex.positive].as_slice()).collect();
    let q_pos = text.encode_many(tape, &lists)?;
    Ok(Stage1Inputs {
        x_user,
        e_pos,
        e_neg,
        q_pos,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathMode {
    Auto,
    ItemPath,
    TextPath,
}

impl PathMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PathMode::Auto => "auto",
            PathMode::ItemPath => "item-path",
            PathMode::TextPath => "text-path",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathUsed {
    Item,
    Text,
}

/// Counts of joint-embedding lookups by path and by whether the item was
/// seen during CF training.
#[derive(Debug, Default)]
pub struct PathAudit {
    item_seen: AtomicUsize,
    item_unseen: AtomicUsize,
    text_seen: AtomicUsize,
    text_unseen: AtomicUsize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCounts {
    pub item_seen: usize,
    pub item_unseen: usize,
    pub text_seen: usize,
    pub text_unseen: usize,
}

impl PathAudit {
    pub fn record(&self, seen: bool, used: PathUsed) {
        let c = match (used, seen) {
            (PathUsed::Item, true) => &self.item_seen,
            (PathUsed::Item, false) => &self.item_unseen,
            (PathUsed::Text, true) => &self.text_seen,
            (PathUsed::Text, false) => &self.text_unseen,
        };
        c.fetch_add(1, Ordering::Relaxed);
    }

    pub fn counts(&self) -> PathCounts {
        PathCounts {
            item_seen: self.item_seen.load(Ordering::Relaxed),
            item_unseen: self.item_unseen.load(Ordering::Relaxed),
            text_seen: self.text_seen.load(Ordering::Relaxed),
            text_unseen: self.text_unseen.load(Ordering::Relaxed),
        }
    }
}

/// Precomputed `e_i` and `q_i` for every catalog item.
#[derive(Clone, Debug)]
pub struct JointTable {
    /// `None` when the catalog has no CF rows (foreign catalogs).
    pub item_path: Option<Vec<Vec<f32>>>,
    pub text_path: Vec<Vec<f32>>,
    pub seen: Vec<bool>,
}

impl JointTable {
    pub fn build(align: &AlignmentModel, cf: &CfModel, text: &TextEncoder, dataset: &Dataset) -> Result<Self> {
        let item_path = (0..dataset.num_items())
            .map(|i| align.item_to_joint(cf.item_embedding(i)?))
            .collect::<Result<Vec<_>>>()?;
        let mut t = Self::text_only(align, text, dataset)?;
        t.item_path = Some(item_path);
        t.seen = (0..dataset.num_items()).map(|i| cf.is_seen(i)).collect();
        Ok(t)
    }

    /// Joint embeddings for a catalog the CF model never saw.
    pub fn text_only(align: &AlignmentModel, text: &TextEncoder, dataset: &Dataset) -> Result<Self> {
        let text_path = text_embeddings(text, dataset)?
            .iter()
            .map(|q| align.text_to_joint(q))
            .collect::<Result<Vec<_>>>()?;
        Ok(JointTable {
            item_path: None,
            seen: vec![false; text_path.len()],
            text_path,
        })
    }

    pub fn len(&self) -> usize {
        self.text_path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_path.is_empty()
    }

    pub fn select(&self, item: ItemIdx, mode: PathMode) -> Result<(&[f32], PathUsed)> {
        if item >= self.text_path.len() {
            return Err(CoreError::UnknownItem(item));
        }
        let seen = self.seen[item];
        let item_row = |item: ItemIdx| self.item_path.as_ref().map(|e| e[item].as_slice());
        match mode {
            PathMode::TextPath => Ok((&self.text_path[item], PathUsed::Text)),
            PathMode::ItemPath => match item_row(item) {
                Some(e) if seen => Ok((e, PathUsed::Item)),
                _ => Err(CoreError::UnknownItem(item)),
            },
            PathMode::Auto => match item_row(item) {
                Some(e) if seen => Ok((e, PathUsed::Item)),
                _ => {
                    log::trace!("item {item} unseen by CF; using text path");
                    Ok((&self.text_path[item], PathUsed::Text))
                }
            },
        }
    }
}

/// `Q_i` for every item of `dataset`.
pub fn text_embeddings(text: &TextEncoder, dataset: &Dataset) -> Result<Vec<Vec<f32>>> {
    let tape = Tape::new(&[&text.params]);
    let ids: Vec<Vec<usize>> = (0..dataset.num_items()).map(|i| text.dataset_item_ids(dataset, i)).collect();
    let lists: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
    let q = tape.value(text.encode_many(&tape, &lists)?);
    Ok(q.data().chunks(text.dim()).map(<[f32]>::to_vec).collect())
}

/// `e_i` or `q_i` for `item` under `mode`.
pub fn select_joint_embedding(table: &JointTable, item: ItemIdx, mode: PathMode) -> Result<Vec<f32>> {
    table.select(item, mode).map(|(v, _)| v.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model() -> AlignmentModel {
        let mut params = ParamStore::new();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        for name in [ITEM_ENC, TEXT_ENC, ITEM_DEC, TEXT_DEC] {
            params.insert(format!("{name}.w"), eye.clone()).unwrap();
            params.insert(format!("{name}.b"), Tensor::zeros(&[2])).unwrap();
        }
        AlignmentModel {
            cf_dim: 2,
            text_dim: 2,
            joint_dim: 2,
            params,
        }
    }

    fn hand_batch(tape: &Tape<f64>) -> Stage1Inputs {
        let row = |a: f64, b: f64| tape.constant(Tensor::matrix(1, 2, vec![a, b]).unwrap());
        Stage1Inputs {
            x_user: row(1.0, 0.0),
            e_pos: row(1.0, 0.0),
            e_neg: row(0.0, 1.0),
            q_pos: row(1.0, 0.0),
        }
    }

    #[test]
    fn hand_computed_batch() {
        let model = identity_model();
        let p64 = model.params.cast::<f64>();
        let tape = Tape::new(&[&p64]);
        let terms = stage1_loss(&model, &tape, hand_batch(&tape), LossWeights::new(0.5, 0.5)).unwrap();
        let v = terms.values(&tape);
        assert_eq!(v.matching, 0.0);
        assert_eq!(v.item_recon, 0.0);
        assert_eq!(v.text_recon, 0.0);
        let expected = -((1.0f64 / (1.0 + (-1.0f64).exp())).ln() + 0.5f64.ln());
        assert!((v.total - expected).abs() < 1e-12);
        assert!((v.total - 1.0064).abs() < 1e-4);
    }

    #[test]
    fn zero_weights_remove_terms() {
        let model = identity_model();
        let p64 = model.params.cast::<f64>();
        let tape = Tape::new(&[&p64]);
        let w = LossWeights {
            matching: 0.0,
            item_recon: 0.0,
            text_recon: 0.0,
            rec: 1.0,
        };
        let terms = stage1_loss(&model, &tape, hand_batch(&tape), w).unwrap();
        assert!(terms.matching.is_none() && terms.item_recon.is_none() && terms.text_recon.is_none());
        assert_eq!(terms.values(&tape).matching, 0.0);
    }

    #[test]
    fn zero_encoder_collapses_to_zero() {
        let mut model = AlignmentModel::init(3, 4, 5, 1).unwrap();
        for n in ["w", "b"] {
            for v in model.params.get_mut(&format!("{ITEM_ENC}.{n}")).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        assert_eq!(model.item_to_joint(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 5]);
        assert!(model.item_to_joint(&[1.0, 2.0]).is_err());
        assert_eq!(model.text_to_joint(&[0.1; 4]).unwrap().len(), 5);
    }
}
