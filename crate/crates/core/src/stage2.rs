//! Stage-2: project the user representation and item joint embeddings into
//! the language model's token space, splice them into a text prompt as soft
//! rows, and train only the two projectors to make the frozen LM emit the
//! next item's title.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use softslot_numerics::{derive_seed, seeded_rng, Float, ParamStore, Tape, Tensor, Var};

use crate::alignment::{JointTable, PathAudit, PathMode};
use crate::cf::{training_sequences, CfModel};
use crate::data::{sample_one_negative, Dataset, EvalInstance, ItemIdx, SplitSet, UserIdx, EVAL_NEGATIVES};
use crate::error::{CoreError, Result};
use crate::layers::{Linear, LEAKY_SLOPE};
use crate::lm::{FrozenLm, LmRunner, END_ID};
use crate::train::{batch_grad, check_finite, Optimizer};

pub const MOVIE_TEMPLATE: &str = "{user} is a user representation. This user has watched {item:k} in the previous. \
Recommend one next movie for this user to watch from the following movie title set: {cand:k}. \
The recommendation is {target}";

pub const DEMO_TEMPLATE: &str =
    "{user} is a user representation. This user has watched {item:k} in the previous. {question}";

pub const DEFAULT_QUESTION: &str = "Which genre does this user like most ? Genre :";

/// Template with the nouns and verbs swapped for another catalog.
pub fn template_for(noun: &str, verb_past: &str, verb: &str) -> String {
    format!(
        "{{user}} is a user representation. This user has {verb_past} {{item:k}} in the previous. \
Recommend one next {noun} for this user to {verb} from the following {noun} title set: {{cand:k}}. \
The recommendation is {{target}}"
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    UserSlot,
    History,
    Candidates,
    Question,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                segments.push(Segment::Text(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| CoreError::Config(format!("template: unclosed placeholder in {text:?}")))?;
            let name = &rest[open + 1..open + close];
            segments.push(match name {
                "user" => Segment::UserSlot,
                "item:k" => Segment::History,
                "cand:k" => Segment::Candidates,
                "question" => Segment::Question,
                "target" => Segment::Target,
                other => return Err(CoreError::Config(format!("template: unknown placeholder {{{other}}}"))),
            });
            rest = &rest[open + close + 1..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Text(rest.to_string()));
        }
        let t = PromptTemplate { segments };
        t.validate()?;
        Ok(t)
    }

    fn position(&self, s: &Segment) -> Option<usize> {
        self.segments.iter().position(|x| x == s)
    }

    fn count(&self, s: &Segment) -> usize {
        self.segments.iter().filter(|x| *x == s).count()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("template: {m}")));
        if self.count(&Segment::UserSlot) != 1 {
            return bad("needs exactly one {user}");
        }
        if self.count(&Segment::History) != 1 {
            return bad("needs exactly one {item:k}");
        }
        if self.position(&Segment::UserSlot) > self.position(&Segment::History) {
            return bad("{user} must precede {item:k}");
        }
        if self.count(&Segment::Candidates) > 1 || self.count(&Segment::Question) > 1 {
            return bad("{cand:k} and {question} may appear at most once");
        }
        match self.position(&Segment::Target) {
            Some(p) if p + 1 != self.segments.len() => bad("{target} must end the template"),
            Some(_) if self.count(&Segment::Target) > 1 => bad("{target} may appear once"),
            _ => Ok(()),
        }
    }
}

/// Which soft rows a prompt carries and where item embeddings come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotFlags {
    pub user_slot: bool,
    pub item_slots: bool,
    pub candidate_slots: bool,
    pub path_mode: PathMode,
}

impl Default for SlotFlags {
    fn default() -> Self {
        SlotFlags {
            user_slot: true,
            item_slots: true,
            candidate_slots: true,
            path_mode: PathMode::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub history_len: usize,
    pub all_items: bool,
    pub no_user_slot: bool,
    pub no_item_slots: bool,
    pub random_item_slots: bool,
    pub candidate_slots: bool,
    pub length_norm: bool,
    pub path_mode: PathMode,
    pub template: String,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lr: 1e-4,
            epochs: 5,
            batch_size: 4,
            history_len: 10,
            all_items: false,
            no_user_slot: false,
            no_item_slots: false,
            random_item_slots: false,
            candidate_slots: true,
            length_norm: false,
            path_mode: PathMode::Auto,
            template: MOVIE_TEMPLATE.to_string(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 || self.history_len == 0 {
            return Err(CoreError::Config("stage2: lr, batch_size and history_len must be positive".into()));
        }
        if self.no_item_slots && self.random_item_slots {
            return Err(CoreError::Config(
                "stage2: no_item_slots and random_item_slots cannot be combined".into(),
            ));
        }
        let t = PromptTemplate::parse(&self.template)?;
        if t.count(&Segment::Candidates) != 1 || t.count(&Segment::Target) != 1 {
            return Err(CoreError::Config("stage2: template needs {cand:k} and {target}".into()));
        }
        Ok(())
    }

    pub fn flags(&self) -> SlotFlags {
        SlotFlags {
            user_slot: !self.no_user_slot,
            item_slots: !self.no_item_slots,
            candidate_slots: self.candidate_slots && !self.no_item_slots,
            path_mode: self.path_mode,
        }
    }
}

pub const USER_L1: &str = "proj.user.l1";
pub const USER_L2: &str = "proj.user.l2";
pub const ITEM_L1: &str = "proj.item.l1";
pub const ITEM_L2: &str = "proj.item.l2";

/// `F_U` and `F_I`: two-layer MLPs into token space.
#[derive(Clone, Debug)]
pub struct Projector {
    pub user_dim: usize,
    pub joint_dim: usize,
    pub token_dim: usize,
    pub params: ParamStore,
}

impl Projector {
    pub fn init(user_dim: usize, joint_dim: usize, token_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, "stage2/init");
        let mut params = ParamStore::new();
        Linear::init(&mut params, USER_L1, user_dim, token_dim, &mut rng)?;
        Linear::init(&mut params, USER_L2, token_dim, token_dim, &mut rng)?;
        Linear::init(&mut params, ITEM_L1, joint_dim, token_dim, &mut rng)?;
        Linear::init(&mut params, ITEM_L2, token_dim, token_dim, &mut rng)?;
        Ok(Projector {
            user_dim,
            joint_dim,
            token_dim,
            params,
        })
    }

    fn layers(&self, user: bool) -> (Linear, Linear) {
        if user {
            (
                Linear::named(USER_L1, self.user_dim, self.token_dim),
                Linear::named(USER_L2, self.token_dim, self.token_dim),
            )
        } else {
            (
                Linear::named(ITEM_L1, self.joint_dim, self.token_dim),
                Linear::named(ITEM_L2, self.token_dim, self.token_dim),
            )
        }
    }

    fn mlp<T: Float>(&self, tape: &Tape<T>, x: Var, user: bool) -> Result<Var> {
        let (l1, l2) = self.layers(user);
        let h = tape.leaky_relu(l1.forward(tape, x)?, T::c(LEAKY_SLOPE))?;
        l2.forward(tape, h)
    }

    /// `O_u = F_U(x_u)` for rows `[n, d]`.
    pub fn users<T: Float>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        self.mlp(tape, x, true)
    }

    /// `O_i = F_I(e_i)` for rows `[n, d']`.
    pub fn items<T: Float>(&self, tape: &Tape<T>, e: Var) -> Result<Var> {
        self.mlp(tape, e, false)
    }

    fn apply(&self, x: &[f32], user: bool) -> Result<Vec<f32>> {
        let want = if user { self.user_dim } else { self.joint_dim };
        if x.len() != want {
            return Err(softslot_numerics::NumericsError::ShapeMismatch {
                op: "projector",
                detail: format!("input has length {}, expected {want}", x.len()),
            }
            .into());
        }
        let (l1, l2) = self.layers(user);
        let h: Vec<f32> = l1
            .apply_row(&self.params, x)?
            .into_iter()
            .map(|v| if v > 0.0 { v } else { LEAKY_SLOPE as f32 * v })
            .collect();
        l2.apply_row(&self.params, &h)
    }

    pub fn project_user(&self, x_u: &[f32]) -> Result<Vec<f32>> {
        self.apply(x_u, true)
    }

    pub fn project_item(&self, joint: &[f32]) -> Result<Vec<f32>> {
        self.apply(joint, false)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

/// Fixed random stand-ins for every joint embedding.
pub fn random_joint_table(num_items: usize, joint_dim: usize, seed: u64) -> JointTable {
    let mut rng = seeded_rng(seed, "stage2/random-slots");
    let t = Tensor::<f32>::randn(&[num_items, joint_dim], 1.0, &mut rng);
    JointTable {
        item_path: None,
        text_path: t.data().chunks(joint_dim.max(1)).map(<[f32]>::to_vec).collect(),
        seen: vec![false; num_items],
    }
}

/// Origin of one prompt row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSource {
    Token(usize),
    User,
    Item(ItemIdx),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptInstance {
    pub sources: Vec<RowSource>,
    /// Title tokens of the target followed by `<end>`; empty when unknown.
    pub targets: Vec<usize>,
    pub user_input: Option<Vec<f32>>,
    /// Joint embedding for each `Item` row, in row order.
    pub slot_inputs: Vec<Vec<f32>>,
}

impl PromptInstance {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn soft_rows(&self) -> usize {
        self.sources.iter().filter(|s| !matches!(s, RowSource::Token(_))).count()
    }

    /// Embedding rows on a tape, with the soft rows produced by `projector`.
    pub fn realize<T: Float>(&self, tape: &Tape<T>, lm: &FrozenLm, projector: &Projector) -> Result<Var> {
        let user = match &self.user_input {
            Some(x) if self.sources.contains(&RowSource::User) => {
                let x = tape.constant(Tensor::<f32>::from_rows(std::slice::from_ref(x))?.cast());
                Some(projector.users(tape, x)?)
            }
            _ => None,
        };
        let items = if self.slot_inputs.is_empty() {
            None
        } else {
            let e = tape.constant(Tensor::<f32>::from_rows(&self.slot_inputs)?.cast());
            Some(projector.items(tape, e)?)
        };
        let mut parts = Vec::new();
        let mut run = Vec::new();
        let mut slot = 0;
        for s in &self.sources {
            if let RowSource::Token(t) = s {
                run.push(*t);
                continue;
            }
            if !run.is_empty() {
                parts.push(lm.embed_tokens(tape, &run)?);
                run.clear();
            }
            match s {
                RowSource::User => parts.push(user.ok_or_else(|| CoreError::Protocol("user slot without input".into()))?),
                RowSource::Item(_) => {
                    let o = items.ok_or_else(|| CoreError::Protocol("item slot without input".into()))?;
                    parts.push(tape.slice_rows(o, slot, slot + 1)?);
                    slot += 1;
                }
                RowSource::Token(_) => unreachable!(),
            }
        }
        if !run.is_empty() {
            parts.push(lm.embed_tokens(tape, &run)?);
        }
        Ok(tape.concat_rows(&parts)?)
    }

    /// The same rows as plain vectors.
    pub fn realize_rows(&self, lm: &FrozenLm, projector: &Projector) -> Result<Vec<Vec<f32>>> {
        let user = match &self.user_input {
            Some(x) => Some(projector.project_user(x)?),
            None => None,
        };
        let mut slot = 0;
        self.sources
            .iter()
            .map(|s| match s {
                RowSource::Token(t) => Ok(lm.token_row(*t)?.to_vec()),
                RowSource::User => user.clone().ok_or_else(|| CoreError::Protocol("user slot without input".into())),
                RowSource::Item(_) => {
                    let o = projector.project_item(&self.slot_inputs[slot]);
                    slot += 1;
                    o
                }
            })
            .collect()
    }
}

/// Frozen models and lookup tables that prompts are built from.
pub struct PromptContext<'a> {
    pub lm: &'a FrozenLm,
    pub cf: &'a CfModel,
    pub joint: &'a JointTable,
    pub dataset: &'a Dataset,
    /// Substitute CF input rows per item, for catalogs the CF model never saw.
    pub substitute_inputs: Option<&'a [Vec<f32>]>,
    pub audit: Option<&'a PathAudit>,
}

impl PromptContext<'_> {
    pub fn title_tokens(&self, item: ItemIdx) -> Result<Vec<usize>> {
        let m = self.dataset.items.get(item).ok_or(CoreError::UnknownItem(item))?;
        if m.title.trim().is_empty() {
            return Err(CoreError::Data(format!("item {} has no title", m.item_id)));
        }
        Ok(self.lm.tokenizer.encode(&m.title))
    }

    /// Title tokens followed by `<end>`.
    pub fn target_tokens(&self, item: ItemIdx) -> Result<Vec<usize>> {
        let mut t = self.title_tokens(item)?;
        t.push(END_ID);
        Ok(t)
    }

    pub fn user_repr(&self, history: &[ItemIdx]) -> Result<Vec<f32>> {
        match self.substitute_inputs {
            Some(rows) => {
                let r = history
                    .iter()
                    .map(|&i| rows.get(i).cloned().ok_or(CoreError::UnknownItem(i)))
                    .collect::<Result<Vec<_>>>()?;
                self.cf.user_repr_from_inputs(&r)
            }
            None => self.cf.user_repr(history),
        }
    }

    fn joint(&self, item: ItemIdx, mode: PathMode) -> Result<Vec<f32>> {
        let (v, used) = self.joint.select(item, mode)?;
        if let Some(a) = self.audit {
            a.record(self.joint.seen[item], used);
        }
        Ok(v.to_vec())
    }

    /// Builds the prompt rows for `history` (most recent items last) and
    /// `candidates`. `target` adds the teacher-forcing targets; `question`
    /// fills a `{question}` placeholder. `x_user` overrides the user
    /// representation computed from the history.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        &self,
        template: &PromptTemplate,
        flags: SlotFlags,
        history: &[ItemIdx],
        history_len: usize,
        candidates: &[ItemIdx],
        target: Option<ItemIdx>,
        question: Option<&str>,
        x_user: Option<Vec<f32>>,
    ) -> Result<PromptInstance> {
        if history.is_empty() {
            return Err(CoreError::Protocol("prompt needs a nonempty history".into()));
        }
        let shown = &history[history.len().saturating_sub(history_len)..];
        let tok = &self.lm.tokenizer;
        let comma = tok.encode(",");
        let mut inst = PromptInstance {
            sources: Vec::new(),
            targets: Vec::new(),
            user_input: None,
            slot_inputs: Vec::new(),
        };
        let push_text = |inst: &mut PromptInstance, text: &str| {
            inst.sources.extend(tok.encode(text).into_iter().map(RowSource::Token));
        };
        let push_items = |inst: &mut PromptInstance, items: &[ItemIdx], slots: bool| -> Result<()> {
            for (k, &i) in items.iter().enumerate() {
                if k > 0 {
                    inst.sources.extend(comma.iter().map(|&t| RowSource::Token(t)));
                }
                inst.sources.extend(self.title_tokens(i)?.into_iter().map(RowSource::Token));
                if slots {
                    inst.sources.push(RowSource::Item(i));
                    inst.slot_inputs.push(self.joint(i, flags.path_mode)?);
                }
            }
            Ok(())
        };
        for seg in &template.segments {
            match seg {
                Segment::Text(t) => push_text(&mut inst, t),
                Segment::UserSlot => {
                    if flags.user_slot {
                        inst.sources.push(RowSource::User);
                        inst.user_input = Some(match &x_user {
                            Some(x) => x.clone(),
                            None => self.user_repr(history)?,
                        });
                    }
                }
                Segment::History => push_items(&mut inst, shown, flags.item_slots)?,
                Segment::Candidates => {
                    if candidates.is_empty() {
                        return Err(CoreError::Protocol("empty candidate set".into()));
                    }
                    push_items(&mut inst, candidates, flags.candidate_slots)?
                }
                Segment::Question => push_text(&mut inst, question.unwrap_or(DEFAULT_QUESTION)),
                Segment::Target => {}
            }
        }
        if let Some(t) = target {
            inst.targets = self.target_tokens(t)?;
        }
        let needed = inst.len() + inst.targets.len().saturating_sub(1);
        if needed > self.lm.config.context {
            return Err(CoreError::Overflow {
                required: needed,
                available: self.lm.config.context,
            });
        }
        Ok(inst)
    }
}

/// `sum_k -log P(y_k | p, y_<k)` for one prompt.
pub fn stage2_loss<T: Float>(tape: &Tape<T>, lm: &FrozenLm, projector: &Projector, inst: &PromptInstance) -> Result<Var> {
    let rows = inst.realize(tape, lm, projector)?;
    lm.sequence_nll(tape, rows, &inst.targets)
}

/// One training prompt before candidates are drawn.
#[derive(Clone, Debug)]
pub struct Stage2Example {
    pub user: UserIdx,
    pub history: Vec<ItemIdx>,
    pub target: ItemIdx,
    pub x_user: Vec<f32>,
}

/// Training positions: the validation item after the train prefix, or with
/// `all_items` every item after the first.
pub fn stage2_examples(
    cf: &CfModel,
    splits: &SplitSet,
    exclude: &HashSet<UserIdx>,
    all_items: bool,
) -> Result<Vec<Stage2Example>> {
    let mut out = Vec::new();
    for (user, seq) in training_sequences(splits, exclude) {
        if seq.len() < 2 {
            continue;
        }
        let positions: Vec<usize> = if all_items { (1..seq.len()).collect() } else { vec![seq.len() - 1] };
        for k in positions {
            out.push(Stage2Example {
                user,
                history: seq[..k].to_vec(),
                target: seq[k],
                x_user: cf.user_repr(&seq[..k])?,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Log {
    pub epoch_losses: Vec<f64>,
    pub examples_per_epoch: usize,
    pub trained_users: Vec<UserIdx>,
    pub frozen_checksums: Vec<(String, String)>,
}

/// Trains `F_U` and `F_I` against the frozen LM. Every other model in `ctx`
/// is read-only; their checksums are recorded before and after.
pub fn train_stage2(
    ctx: &PromptContext,
    splits: &SplitSet,
    exclude: &HashSet<UserIdx>,
    config: &Stage2Config,
    seed: u64,
) -> Result<(Projector, Stage2Log)> {
    config.validate()?;
    if !ctx.lm.params.all_frozen() || !ctx.cf.params.all_frozen() {
        return Err(CoreError::Protocol("stage-2 requires frozen LM and CF models".into()));
    }
    let template = PromptTemplate::parse(&config.template)?;
    let flags = config.flags();
    let joint_dim = ctx.joint.text_path.first().map(Vec::len).unwrap_or(0);
    let mut proj = Projector::init(ctx.cf.dim(), joint_dim, ctx.lm.dim(), seed)?;
    let examples = stage2_examples(ctx.cf, splits, exclude, config.all_items)?;
    if examples.is_empty() {
        return Err(CoreError::EmptyDataset("selecting stage-2 training positions"));
    }
    let before = (ctx.lm.checksum(), ctx.cf.checksum());
    let interacted: Vec<HashSet<ItemIdx>> = ctx.dataset.sequences.iter().map(|s| s.iter().copied().collect()).collect();
    let mut users: Vec<UserIdx> = examples.iter().map(|e| e.user).collect();
    users.sort_unstable();
    users.dedup();
    let mut log = Stage2Log {
        examples_per_epoch: examples.len(),
        trained_users: users,
        ..Stage2Log::default()
    };
    let trainable: HashSet<String> = proj.params.trainable_names().map(str::to_string).collect();
    let mut opt = Optimizer::new(config.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut order_rng = seeded_rng(seed, "stage2/order");
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let prompts = chunk
                .iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let mut rng = seeded_rng(derive_seed(seed, &format!("stage2/{epoch}/{}/{}", ex.user, ex.history.len())), "cands");
                    let mut cands = vec![ex.target];
                    let mut exclude = interacted[ex.user].clone();
                    for _ in 0..EVAL_NEGATIVES {
                        let n = sample_one_negative(ctx.dataset.num_items(), &exclude, &mut rng)?;
                        exclude.insert(n);
                        cands.push(n);
                    }
                    cands.shuffle(&mut rng);
                    ctx.assemble(
                        &template,
                        flags,
                        &ex.history,
                        config.history_len,
                        &cands,
                        Some(ex.target),
                        None,
                        Some(ex.x_user.clone()),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_grad(&[&proj.params, &ctx.lm.params], &prompts, |tape, p| {
                stage2_loss(tape, ctx.lm, &proj, p)
            })?;
            check_finite(loss, "stage-2", epoch, step)?;
            if let Some(name) = grads.keys().find(|k| !trainable.contains(k.as_str())) {
                return Err(CoreError::FrozenViolation(format!("gradient reached frozen parameter {name}")));
            }
            opt.step(&mut proj.params, &grads)?;
            total += loss * chunk.len() as f64;
        }
        let mean = total / examples.len() as f64;
        log::debug!("stage-2 epoch {epoch}: loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    let after = (ctx.lm.checksum(), ctx.cf.checksum());
    if before != after {
        return Err(CoreError::FrozenViolation("frozen checksums changed during stage-2".into()));
    }
    log.frozen_checksums = vec![("lm".into(), after.0), ("cf".into(), after.1)];
    proj.params.freeze_all();
    Ok((proj, log))
}

/// Scores candidates of a prompt by negative title NLL.
pub struct Ranker<'a> {
    pub ctx: &'a PromptContext<'a>,
    pub projector: &'a Projector,
    pub template: PromptTemplate,
    pub flags: SlotFlags,
    pub history_len: usize,
    pub length_norm: bool,
    runner: LmRunner<'a>,
}

impl<'a> Ranker<'a> {
    pub fn new(ctx: &'a PromptContext<'a>, projector: &'a Projector, config: &Stage2Config) -> Result<Self> {
        config.validate()?;
        Ok(Ranker {
            ctx,
            projector,
            template: PromptTemplate::parse(&config.template)?,
            flags: config.flags(),
            history_len: config.history_len,
            length_norm: config.length_norm,
            runner: ctx.lm.runner()?,
        })
    }

    /// `-NLL(title_c + <end> | prompt)` for each candidate, in candidate order.
    pub fn score(&self, history: &[ItemIdx], candidates: &[ItemIdx]) -> Result<Vec<f32>> {
        let inst = self.ctx.assemble(
            &self.template,
            self.flags,
            history,
            self.history_len,
            candidates,
            None,
            None,
            None,
        )?;
        let rows = inst.realize_rows(self.ctx.lm, self.projector)?;
        let cache = self.runner.prefill(&rows)?;
        candidates
            .iter()
            .map(|&c| {
                let t = self.ctx.target_tokens(c)?;
                let nll = self.runner.continuation_nll(&cache, &t)?;
                let s = if self.length_norm { nll / t.len() as f64 } else { nll };
                Ok(-s as f32)
            })
            .collect()
    }

    pub fn score_instance(&self, inst: &EvalInstance) -> Result<Vec<f32>> {
        self.score(&inst.history, &inst.candidates)
    }

    /// Candidates with scores, best first; ties go to the lowest item index.
    pub fn rank_candidates(&self, history: &[ItemIdx], candidates: &[ItemIdx]) -> Result<Vec<(ItemIdx, f32)>> {
        let scores = self.score(history, candidates)?;
        Ok(crate::eval::rank(candidates, &scores))
    }
}
