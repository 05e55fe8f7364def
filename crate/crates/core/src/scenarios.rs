//! Evaluation scenarios, the ablation matrix and the generation demo.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alignment::{text_embeddings, JointTable, PathAudit, PathCounts, PathMode, Stage1Log};
use crate::cf::cf_scores;
use crate::config::RunConfig;
use crate::data::{build_eval_instances, label_cold_warm, select_fewshot_users, EvalInstance, UserIdx};
use crate::error::{CoreError, Result};
use crate::eval::{hit_at_1, MetricReport, Outcomes};
use crate::lm::greedy_generate;
use crate::pipeline::{joint_table, load_dataset, run_cf, run_stage1, run_stage2, seed_for, Prepared, Stage2Inputs, Trained};
use crate::stage2::{PromptContext, PromptTemplate, Ranker, DEMO_TEMPLATE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Overall,
    ColdWarm,
    ColdUser,
    Fewshot,
    CrossDomain,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Overall,
        Scenario::ColdWarm,
        Scenario::ColdUser,
        Scenario::Fewshot,
        Scenario::CrossDomain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Overall => "overall",
            Scenario::ColdWarm => "cold_warm",
            Scenario::ColdUser => "cold_user",
            Scenario::Fewshot => "fewshot",
            Scenario::CrossDomain => "cross_domain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown scenario {s:?}")))
    }
}

/// Evaluation instances for `users` (every evaluable user outside the
/// training holdout when `None`), capped by `eval.max_instances`.
pub fn eval_instances(cfg: &RunConfig, prep: &Prepared, users: Option<&[UserIdx]>) -> Result<Vec<EvalInstance>> {
    let default_users: Vec<UserIdx>;
    let users = match users {
        Some(u) => u,
        None => {
            default_users = prep
                .splits
                .evaluable()
                .map(|s| s.user)
                .filter(|u| !prep.exclude.contains(u))
                .collect();
            &default_users
        }
    };
    let mut inst = build_eval_instances(&prep.dataset, &prep.splits, Some(users), seed_for(cfg, "eval"))?;
    if let Some(cap) = cfg.eval.max_instances {
        inst.truncate(cap);
    }
    Ok(inst)
}

/// Hit@1 of the full model with joint embeddings selected by `mode`.
pub fn evaluate_llm(
    cfg: &RunConfig,
    prep: &Prepared,
    trained: &Trained,
    instances: &[EvalInstance],
    mode: PathMode,
) -> Result<(Outcomes, PathCounts)> {
    let m = &trained.models;
    let joint = joint_table(cfg, &prep.dataset, &m.cf, &m.text, &m.align)?;
    let audit = PathAudit::default();
    let ctx = PromptContext {
        lm: &m.lm,
        cf: &m.cf,
        joint: &joint,
        dataset: &prep.dataset,
        substitute_inputs: None,
        audit: Some(&audit),
    };
    let mut s2 = cfg.stage2.clone();
    s2.path_mode = mode;
    let ranker = Ranker::new(&ctx, &trained.projector, &s2)?;
    let out = hit_at_1(instances, |i| ranker.score_instance(i));
    Ok((out, audit.counts()))
}

pub fn evaluate_cf(trained: &Trained, instances: &[EvalInstance]) -> Outcomes {
    hit_at_1(instances, |i| cf_scores(&trained.models.cf, i))
}

fn report(cfg: &RunConfig, scenario: &str, variant: &str, o: &Outcomes, started: Instant) -> MetricReport {
    let mut r = MetricReport::from_outcomes(scenario, variant, cfg.seed, o);
    if cfg.eval.record_wall_clock {
        r.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    }
    r
}

fn path_note(c: PathCounts) -> String {
    format!(
        "path audit: item-path seen={} unseen={}, text-path seen={} unseen={}",
        c.item_seen, c.item_unseen, c.text_seen, c.text_unseen
    )
}

/// Runs one scenario and returns its reports.
pub fn run_scenario(cfg: &RunConfig, prep: &Prepared, trained: &Trained, scenario: Scenario) -> Result<Vec<MetricReport>> {
    let name = scenario.as_str();
    let t0 = Instant::now();
    match scenario {
        Scenario::Overall => {
            let inst = eval_instances(cfg, prep, None)?;
            if inst.is_empty() {
                return Err(CoreError::EmptyDataset("selecting evaluation users"));
            }
            let (o, counts) = evaluate_llm(cfg, prep, trained, &inst, cfg.stage2.path_mode)?;
            let main = report(cfg, name, cfg.stage2.path_mode.as_str(), &o, t0).with_note(path_note(counts));
            let t1 = Instant::now();
            let cf = report(cfg, name, "cf-only", &evaluate_cf(trained, &inst), t1);
            Ok(vec![main, cf])
        }
        Scenario::ColdWarm => {
            let labels = label_cold_warm(&prep.dataset, cfg.eval.cold_warm_pct)?;
            let inst = eval_instances(cfg, prep, None)?;
            let mut out = Vec::new();
            for mode in [PathMode::Auto, PathMode::TextPath, PathMode::ItemPath] {
                let t = Instant::now();
                let (o, counts) = evaluate_llm(cfg, prep, trained, &inst, mode)?;
                out.push(
                    report(cfg, name, mode.as_str(), &o, t)
                        .with_labels(&o, &labels)
                        .with_note(path_note(counts)),
                );
            }
            let t = Instant::now();
            let o = evaluate_cf(trained, &inst);
            out.push(report(cfg, name, "cf-only", &o, t).with_labels(&o, &labels));
            Ok(out)
        }
        Scenario::ColdUser => {
            let users = &prep.cold_users.users;
            let inst = eval_instances(cfg, prep, Some(users))?;
            let (o, counts) = evaluate_llm(cfg, prep, trained, &inst, cfg.stage2.path_mode)?;
            let mut r = report(cfg, name, cfg.stage2.path_mode.as_str(), &o, t0).with_note(path_note(counts));
            if let Some(w) = &prep.cold_users.warning {
                r = r.with_note(w.clone());
            }
            if !cfg.data.holdout_cold_users {
                r = r.with_note("cold users were not held out of training");
            }
            let cf = report(cfg, name, "cf-only", &evaluate_cf(trained, &inst), Instant::now());
            Ok(vec![r, cf])
        }
        Scenario::Fewshot => {
            let mut out = Vec::new();
            for &k in &cfg.eval.fewshot_k {
                let t = Instant::now();
                let users = match select_fewshot_users(&prep.dataset, k, seed_for(cfg, "fewshot")) {
                    Ok(u) => u,
                    Err(e) => {
                        log::warn!("few-shot K={k}: {e}");
                        let mut r = MetricReport::from_outcomes(name, &format!("k={k}"), cfg.seed, &Outcomes::default());
                        r.train_users = Some(0);
                        out.push(r.with_note(format!("skipped: {e}")));
                        continue;
                    }
                };
                let sub = prep.only_train(&users);
                let (cf, _) = run_cf(cfg, &sub)?;
                let (text, align, s1) = run_stage1(cfg, &sub, &cf)?;
                let models = Stage2Inputs {
                    cf,
                    text,
                    align,
                    lm: trained.models.lm.clone(),
                };
                let (projector, _) = run_stage2(cfg, &sub, &models)?;
                let few = Trained { models, projector };
                let inst = eval_instances(cfg, prep, None)?;
                let (o, _) = evaluate_llm(cfg, prep, &few, &inst, cfg.stage2.path_mode)?;
                let mut r = report(cfg, name, &format!("k={k}"), &o, t);
                r.train_users = Some(s1.trained_users.len());
                out.push(r);
                let cf = evaluate_cf(&few, &inst);
                let mut r = report(cfg, name, &format!("k={k}/cf-only"), &cf, t);
                r.train_users = Some(s1.trained_users.len());
                out.push(r);
            }
            Ok(out)
        }
        Scenario::CrossDomain => {
            let target = cfg
                .eval
                .cross_domain
                .as_ref()
                .ok_or_else(|| CoreError::Config("cross_domain scenario needs [eval.cross_domain]".into()))?;
            let (ds, _) = load_dataset(target)?;
            let tprep = Prepared::new(ds, None, false);
            Ok(vec![cross_domain_report(cfg, &tprep, trained)?])
        }
    }
}

/// Evaluates on a catalog the CF model never saw: every item goes through
/// the text path and the user representation is computed from decoded text
/// embeddings.
pub fn cross_domain_report(cfg: &RunConfig, target: &Prepared, trained: &Trained) -> Result<MetricReport> {
    let t0 = Instant::now();
    let m = &trained.models;
    let joint = JointTable::text_only(&m.align, &m.text, &target.dataset)?;
    let substitute = text_embeddings(&m.text, &target.dataset)?
        .iter()
        .map(|q| m.align.text_to_cf_input(q))
        .collect::<Result<Vec<_>>>()?;
    let audit = PathAudit::default();
    let ctx = PromptContext {
        lm: &m.lm,
        cf: &m.cf,
        joint: &joint,
        dataset: &target.dataset,
        substitute_inputs: Some(&substitute),
        audit: Some(&audit),
    };
    let mut s2 = cfg.stage2.clone();
    s2.path_mode = PathMode::TextPath;
    let ranker = Ranker::new(&ctx, &trained.projector, &s2)?;
    let inst = eval_instances(cfg, target, None)?;
    let o = hit_at_1(&inst, |i| ranker.score_instance(i));
    Ok(report(cfg, "cross_domain", "text-path", &o, t0)
        .with_note("user representations computed from decoded text embeddings of target-catalog items")
        .with_note(path_note(audit.counts())))
}

/// Flags of the ablation matrix; each set flag adds one row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub drop_matching: bool,
    pub drop_recon: bool,
    pub drop_rec_loss: bool,
    pub freeze_text_encoder: bool,
    pub no_user_slot: bool,
    pub no_item_slots: bool,
    pub random_item_slots: bool,
    pub all_items_training: bool,
}

impl AblationSpec {
    pub fn all() -> Self {
        AblationSpec {
            drop_matching: true,
            drop_recon: true,
            drop_rec_loss: true,
            freeze_text_encoder: true,
            no_user_slot: true,
            no_item_slots: true,
            random_item_slots: true,
            all_items_training: true,
        }
    }

    /// Row names with the configuration change each one applies.
    pub fn rows(&self) -> Vec<(&'static str, fn(&mut RunConfig))> {
        let all: [(bool, &'static str, fn(&mut RunConfig)); 8] = [
            (self.drop_matching, "w/o L_matching", |c| c.stage1.drop_matching = true),
            (self.drop_recon, "w/o L_item_recon & L_text_recon", |c| c.stage1.drop_recon = true),
            (self.drop_rec_loss, "w/o L_rec", |c| c.stage1.drop_rec_loss = true),
            (self.freeze_text_encoder, "freeze text encoder", |c| c.stage1.freeze_text_encoder = true),
            (self.no_user_slot, "w/o user representation", |c| c.stage2.no_user_slot = true),
            (self.no_item_slots, "w/o joint embedding", |c| c.stage2.no_item_slots = true),
            (self.random_item_slots, "with random joint embedding", |c| c.stage2.random_item_slots = true),
            (self.all_items_training, "all-items training", |c| {
                c.stage1.all_items = true;
                c.stage2.all_items = true;
            }),
        ];
        all.into_iter().filter(|(on, _, _)| *on).map(|(_, n, f)| (n, f)).collect()
    }

    fn touches_stage1(row: &str) -> bool {
        matches!(
            row,
            "w/o L_matching" | "w/o L_item_recon & L_text_recon" | "w/o L_rec" | "freeze text encoder" | "all-items training"
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub report: MetricReport,
    pub stage1: Stage1Log,
    pub stage2_losses: Vec<f64>,
    pub stage2_examples: usize,
}

/// Trains and evaluates the baseline and one row per flag of `spec`. CF and
/// LM are trained once; every row sees the same evaluation instances.
pub fn run_ablation(cfg: &RunConfig, prep: &Prepared, spec: &AblationSpec) -> Result<Vec<AblationRow>> {
    let (cf, _) = run_cf(cfg, prep)?;
    let (lm, _) = crate::pipeline::run_lm(cfg, prep)?;
    let (base_text, base_align, base_s1) = run_stage1(cfg, prep, &cf)?;
    let instances = eval_instances(cfg, prep, None)?;
    let mut rows = Vec::new();
    let mut specs: Vec<(&'static str, Option<fn(&mut RunConfig)>)> = vec![("baseline", None)];
    specs.extend(spec.rows().into_iter().map(|(n, f)| (n, Some(f))));
    for (name, apply) in specs {
        let t0 = Instant::now();
        let mut c = cfg.clone();
        if let Some(f) = apply {
            f(&mut c);
        }
        c.validate()?;
        let (text, align, s1) = if AblationSpec::touches_stage1(name) {
            run_stage1(&c, prep, &cf)?
        } else {
            (base_text.clone(), base_align.clone(), base_s1.clone())
        };
        let models = Stage2Inputs {
            cf: cf.clone(),
            text,
            align,
            lm: lm.clone(),
        };
        let (projector, s2) = run_stage2(&c, prep, &models)?;
        let trained = Trained { models, projector };
        let (o, counts) = evaluate_llm(&c, prep, &trained, &instances, c.stage2.path_mode)?;
        let r = report(&c, "ablation", name, &o, t0).with_note(path_note(counts));
        log::info!("ablation row {name}: Hit@1 {:.4}", r.hit_at_1);
        rows.push(AblationRow {
            row: name.to_string(),
            report: r,
            stage1: s1,
            stage2_losses: s2.epoch_losses,
            stage2_examples: s2.examples_per_epoch,
        });
    }
    Ok(rows)
}

/// Plain-text ablation table with the final per-term Stage-1 losses.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<34} {:>8} {:>10} {:>10} {:>10} {:>10}\n",
        "row", "Hit@1", "L_match", "L_i_recon", "L_t_recon", "L_rec"
    );
    for r in rows {
        let t = r.stage1.epochs.last().copied().unwrap_or_default();
        out.push_str(&format!(
            "{:<34} {:>8.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            r.row, r.report.hit_at_1, t.matching, t.item_recon, t.text_recon, t.rec
        ));
    }
    out
}

/// Greedy answer to `question` after a prompt holding the user's soft row
/// and history.
pub fn demo_generate(cfg: &RunConfig, prep: &Prepared, trained: &Trained, user: UserIdx, question: &str) -> Result<String> {
    let m = &trained.models;
    let split = prep
        .splits
        .users
        .iter()
        .find(|s| s.user == user)
        .ok_or_else(|| CoreError::Protocol(format!("unknown user {user}")))?;
    let history = split.fit_sequence();
    let joint = joint_table(cfg, &prep.dataset, &m.cf, &m.text, &m.align)?;
    let ctx = PromptContext {
        lm: &m.lm,
        cf: &m.cf,
        joint: &joint,
        dataset: &prep.dataset,
        substitute_inputs: None,
        audit: None,
    };
    let template = PromptTemplate::parse(DEMO_TEMPLATE)?;
    let inst = ctx.assemble(
        &template,
        cfg.stage2.flags(),
        &history,
        cfg.stage2.history_len,
        &[],
        None,
        Some(question),
        None,
    )?;
    let rows = inst.realize_rows(&m.lm, &trained.projector)?;
    let ids = greedy_generate(&m.lm, &rows, cfg.eval.demo_max_tokens)?;
    Ok(m.lm.tokenizer.decode(&ids))
}
