//! Collaborative-filtering backbones: a self-attentive sequential model and a
//! GRU alternative sharing one item embedding matrix and one scoring rule.
//!
//! After [`train_cf`] returns, every parameter is frozen.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use softslot_numerics::{derive_seed, seeded_rng, Float, ParamStore, Rng, Tape, Tensor, Var};

use crate::data::{sample_one_negative, Dataset, EvalInstance, ItemIdx, SplitSet, UserIdx};
use crate::error::{CoreError, Result};
use crate::eval::hit_at_1;
use crate::layers::{causal_mask, dot, row_dot, Block, Dropout, LayerNorm, Linear};
use crate::train::{batch_grad, check_finite, Optimizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfKind {
    Sasrec,
    Gru,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfConfig {
    pub kind: CfKind,
    pub dim: usize,
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            kind: CfKind::Sasrec,
            dim: 50,
            max_len: 50,
            blocks: 2,
            heads: 1,
            dropout: 0.2,
            lr: 1e-3,
            epochs: 100,
            batch_size: 32,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.max_len < 3 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "cf: need dim > 0 divisible by heads and max_len >= 3 (dim {}, heads {}, max_len {})",
                self.dim, self.heads, self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.batch_size == 0 || self.lr <= 0.0 {
            return Err(CoreError::Config("cf: dropout in [0,1), positive batch size and lr required".into()));
        }
        Ok(())
    }
}

pub const ITEM_EMB: &str = "cf.item_emb";
const POS_EMB: &str = "cf.pos_emb";

#[derive(Clone, Debug)]
pub struct CfModel {
    pub config: CfConfig,
    pub num_items: usize,
    pub params: ParamStore,
    /// Items that occurred in the sequences the model was trained on.
    pub seen: Vec<bool>,
}

impl CfModel {
    pub fn init(config: &CfConfig, num_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = seeded_rng(seed, "cf/init");
        let mut params = ParamStore::new();
        params.insert(ITEM_EMB, Tensor::randn(&[num_items, d], (1.0 / d as f64).sqrt(), &mut rng))?;
        match config.kind {
            CfKind::Sasrec => {
                params.insert(POS_EMB, Tensor::randn(&[config.max_len, d], (1.0 / d as f64).sqrt(), &mut rng))?;
                for b in 0..config.blocks {
                    Block::init(&mut params, &format!("cf.block{b}"), d, config.heads, d, &mut rng)?;
                }
                LayerNorm::init(&mut params, "cf.ln_f", d)?;
            }
            CfKind::Gru => {
                for g in ["z", "r", "n"] {
                    Linear::init(&mut params, &format!("cf.gru.x{g}"), d, d, &mut rng)?;
                    Linear::init(&mut params, &format!("cf.gru.h{g}"), d, d, &mut rng)?;
                }
            }
        }
        Ok(CfModel {
            config: config.clone(),
            num_items,
            params,
            seen: vec![false; num_items],
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn is_seen(&self, item: ItemIdx) -> bool {
        self.seen.get(item).copied().unwrap_or(false)
    }

    fn blocks(&self) -> Vec<Block> {
        (0..self.config.blocks)
            .map(|b| Block::named(&format!("cf.block{b}"), self.config.dim, self.config.heads, self.config.dim))
            .collect()
    }

    fn truncate<'a, X>(&self, xs: &'a [X]) -> &'a [X] {
        &xs[xs.len().saturating_sub(self.config.max_len)..]
    }

    fn check_ids(&self, ids: &[ItemIdx]) -> Result<()> {
        if ids.is_empty() {
            return Err(CoreError::Protocol("cannot encode an empty sequence".into()));
        }
        match ids.iter().find(|&&i| i >= self.num_items) {
            Some(&i) => Err(CoreError::UnknownItem(i)),
            None => Ok(()),
        }
    }

    /// Per-position user representations `[k, d]` for the most recent
    /// `max_len` items of `ids`.
    pub fn encode<T: Float>(&self, tape: &Tape<T>, ids: &[ItemIdx], drop: &mut Dropout) -> Result<Var> {
        let ids = self.truncate(ids);
        self.check_ids(ids)?;
        let rows = tape.embedding(tape.param(ITEM_EMB)?, ids)?;
        self.encode_inputs(tape, rows, drop)
    }

    /// Like [`encode`](Self::encode) but from already-gathered input rows `[k, d]`,
    /// which need not come from the item embedding matrix.
    pub fn encode_inputs<T: Float>(&self, tape: &Tape<T>, rows: Var, drop: &mut Dropout) -> Result<Var> {
        let k = tape.shape(rows)[0];
        if k > self.config.max_len {
            return Err(CoreError::Overflow {
                required: k,
                available: self.config.max_len,
            });
        }
        match self.config.kind {
            CfKind::Sasrec => {
                let pos = tape.slice_rows(tape.param(POS_EMB)?, 0, k)?;
                let x = tape.add(tape.scale(rows, T::c((self.config.dim as f64).sqrt()))?, pos)?;
                let mut x = drop.apply(tape, x)?;
                let mask = tape.constant(causal_mask(k));
                for block in self.blocks() {
                    x = block.forward(tape, x, mask, drop)?;
                }
                LayerNorm::named("cf.ln_f").forward(tape, x)
            }
            CfKind::Gru => {
                let x = drop.apply(tape, rows)?;
                let lin = |n: &str| Linear::named(n, self.config.dim, self.config.dim);
                let xz = lin("cf.gru.xz").forward(tape, x)?;
                let xr = lin("cf.gru.xr").forward(tape, x)?;
                let xn = lin("cf.gru.xn").forward(tape, x)?;
                let (hz, hr, hn) = (lin("cf.gru.hz"), lin("cf.gru.hr"), lin("cf.gru.hn"));
                let mut h = tape.constant(Tensor::zeros(&[1, self.config.dim]));
                let mut outs = Vec::with_capacity(k);
                for t in 0..k {
                    let z = tape.sigmoid(tape.add(tape.slice_rows(xz, t, t + 1)?, hz.forward(tape, h)?)?)?;
                    let r = tape.sigmoid(tape.add(tape.slice_rows(xr, t, t + 1)?, hr.forward(tape, h)?)?)?;
                    let rh = tape.mul(r, h)?;
                    let n = tape.tanh(tape.add(tape.slice_rows(xn, t, t + 1)?, hn.forward(tape, rh)?)?)?;
                    let keep = tape.mul(z, h)?;
                    let upd = tape.mul(tape.affine(z, -T::one(), T::one())?, n)?;
                    h = tape.add(keep, upd)?;
                    outs.push(h);
                }
                Ok(tape.concat_rows(&outs)?)
            }
        }
    }

    /// Representation after the last item of `ids` (evaluation mode).
    pub fn user_repr(&self, ids: &[ItemIdx]) -> Result<Vec<f32>> {
        let tape = Tape::new(&[&self.params]);
        let h = self.encode(&tape, ids, &mut Dropout::off())?;
        last_row(&tape, h)
    }

    /// Representations after every prefix of `ids`, one row per position.
    pub fn prefix_reprs(&self, ids: &[ItemIdx]) -> Result<Vec<Vec<f32>>> {
        let tape = Tape::new(&[&self.params]);
        let h = self.encode(&tape, ids, &mut Dropout::off())?;
        let v = tape.value(h);
        let d = self.config.dim;
        Ok(v.data().chunks(d).map(<[f32]>::to_vec).collect())
    }

    /// Representation computed from substitute input rows.
    pub fn user_repr_from_inputs(&self, rows: &[Vec<f32>]) -> Result<Vec<f32>> {
        let rows = self.truncate(rows);
        if rows.is_empty() {
            return Err(CoreError::Protocol("cannot encode an empty sequence".into()));
        }
        let tape = Tape::new(&[&self.params]);
        let x = tape.constant(Tensor::from_rows(rows)?);
        let h = self.encode_inputs(&tape, x, &mut Dropout::off())?;
        last_row(&tape, h)
    }

    pub fn item_embedding(&self, item: ItemIdx) -> Result<&[f32]> {
        if item >= self.num_items {
            return Err(CoreError::UnknownItem(item));
        }
        Ok(self.params.require(ITEM_EMB)?.row(item))
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

fn last_row(tape: &Tape<f32>, h: Var) -> Result<Vec<f32>> {
    let v = tape.value_ref(h);
    let d = v.shape()[1];
    Ok(v.data()[v.numel() - d..].to_vec())
}

/// Dot-product score `s(a, b)`.
pub fn score_pair(x_u: &[f32], item_embedding: &[f32]) -> Result<f32> {
    if x_u.len() != item_embedding.len() {
        return Err(CoreError::Numerics(softslot_numerics::NumericsError::ShapeMismatch {
            op: "score_pair",
            detail: format!("{} vs {}", x_u.len(), item_embedding.len()),
        }));
    }
    Ok(dot(x_u, item_embedding))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Sequences a model is fitted on: every non-excluded user's sequence minus
/// its test item.
pub fn training_sequences(splits: &SplitSet, exclude: &HashSet<UserIdx>) -> Vec<(UserIdx, Vec<ItemIdx>)> {
    splits
        .users
        .iter()
        .filter(|s| !exclude.contains(&s.user))
        .map(|s| (s.user, s.fit_sequence()))
        .collect()
}

/// Pretrains a CF model with one sampled negative per position and freezes it.
pub fn train_cf(
    dataset: &Dataset,
    splits: &SplitSet,
    exclude: &HashSet<UserIdx>,
    config: &CfConfig,
    seed: u64,
) -> Result<(CfModel, TrainLog)> {
    let mut model = CfModel::init(config, dataset.num_items(), seed)?;
    let seqs: Vec<(UserIdx, Vec<ItemIdx>)> = training_sequences(splits, exclude)
        .into_iter()
        .filter(|(_, s)| s.len() >= 2)
        .collect();
    if seqs.is_empty() {
        return Err(CoreError::EmptyDataset("selecting CF training sequences"));
    }
    for (_, s) in &seqs {
        for &i in s {
            model.seen[i] = true;
        }
    }
    let interacted: Vec<HashSet<ItemIdx>> =
        dataset.sequences.iter().map(|s| s.iter().copied().collect()).collect();
    let mut opt = Optimizer::new(config.lr);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut shuffle_rng = seeded_rng(seed, "cf/order");
    let mut log = TrainLog::default();
    let n_items = dataset.num_items();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&(UserIdx, Vec<ItemIdx>)> = chunk.iter().map(|&i| &seqs[i]).collect();
            let (loss, grads) = {
                let m = &model;
                batch_grad(&[&m.params], &batch, |tape, (user, seq)| {
                    let stream = format!("cf/{epoch}/{user}");
                    let mut rng: Rng = seeded_rng(derive_seed(seed, &stream), "neg");
                    let seq = &seq[seq.len().saturating_sub(config.max_len + 1)..];
                    let inputs = &seq[..seq.len() - 1];
                    let pos = &seq[1..];
                    let neg = pos
                        .iter()
                        .map(|_| sample_one_negative(n_items, &interacted[*user], &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    let mut drop = Dropout::train(config.dropout, seeded_rng(derive_seed(seed, &stream), "dropout"));
                    cf_loss(m, tape, inputs, pos, &neg, &mut drop)
                })?
            };
            check_finite(loss, "cf", epoch, step)?;
            opt.step(&mut model.params, &grads)?;
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        log::debug!("cf epoch {epoch}: loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    model.params.freeze_all();
    Ok((model, log))
}

/// Per-position logistic loss for one sequence.
pub fn cf_loss<T: Float>(
    model: &CfModel,
    tape: &Tape<T>,
    inputs: &[ItemIdx],
    pos: &[ItemIdx],
    neg: &[ItemIdx],
    drop: &mut Dropout,
) -> Result<Var> {
    let h = model.encode(tape, inputs, drop)?;
    let table = tape.param(ITEM_EMB)?;
    let sp = row_dot(tape, h, tape.embedding(table, pos)?)?;
    let sn = row_dot(tape, h, tape.embedding(table, neg)?)?;
    let logits = tape.concat_rows(&[sp, sn])?;
    let mut targets = vec![T::one(); pos.len()];
    targets.extend(std::iter::repeat_n(T::zero(), neg.len()));
    Ok(tape.bce_with_logits(logits, &targets)?)
}

/// Scores for an instance's candidates, aligned with `instance.candidates`.
pub fn cf_scores(model: &CfModel, instance: &EvalInstance) -> Result<Vec<f32>> {
    let x = model.user_repr(&instance.history)?;
    instance
        .candidates
        .iter()
        .map(|&c| score_pair(&x, model.item_embedding(c)?))
        .collect()
}

/// Hit@1 of the CF model alone.
pub fn cf_hit_at_1(model: &CfModel, instances: &[EvalInstance]) -> Result<f64> {
    for inst in instances {
        if let Some(&c) = inst.candidates.iter().find(|&&c| c >= model.num_items) {
            return Err(CoreError::UnknownItem(c));
        }
    }
    let report = hit_at_1(instances, |inst| cf_scores(model, inst));
    Ok(report.hit_rate())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(kind: CfKind) -> CfModel {
        let cfg = CfConfig {
            kind,
            dim: 8,
            max_len: 6,
            ..CfConfig::default()
        };
        CfModel::init(&cfg, 12, 3).unwrap()
    }

    #[test]
    fn causal_for_both_backbones() {
        for kind in [CfKind::Sasrec, CfKind::Gru] {
            let m = model(kind);
            let a = m.prefix_reprs(&[1, 2, 3, 4, 5]).unwrap();
            let b = m.prefix_reprs(&[1, 2, 3, 9, 7]).unwrap();
            assert_eq!(a[..3], b[..3]);
            assert_ne!(a[3], b[3]);
        }
    }

    #[test]
    fn truncates_to_max_len() {
        let m = model(CfKind::Sasrec);
        let long: Vec<usize> = (0..10).collect();
        assert_eq!(m.prefix_reprs(&long).unwrap().len(), 6);
        assert_eq!(m.user_repr(&long).unwrap(), m.user_repr(&long[4..]).unwrap());
        assert_eq!(m.prefix_reprs(&[3]).unwrap().len(), 1);
    }

    #[test]
    fn unknown_item_is_rejected() {
        let m = model(CfKind::Sasrec);
        assert!(matches!(m.user_repr(&[1, 12]), Err(CoreError::UnknownItem(12))));
    }

    #[test]
    fn score_pair_is_a_dot_product() {
        assert_eq!(score_pair(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let x = [1.5f32, -2.0, 0.5];
        assert!((score_pair(&x, &x).unwrap() - 6.5).abs() < 1e-6);
        let a = [0.3f32, 0.7];
        let b = [2.0f32, -1.0];
        let a2: Vec<f32> = a.iter().map(|v| 2.0 * v).collect();
        assert!((score_pair(&a2, &b).unwrap() - 2.0 * score_pair(&a, &b).unwrap()).abs() < 1e-6);
        assert!(score_pair(&[1.0], &[1.0, 2.0]).is_err());
    }
}
