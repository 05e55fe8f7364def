//! The four training phases (CF, LM, Stage-1, Stage-2), their checkpoint
//! files, and dataset preparation shared by every command.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use softslot_numerics::derive_seed;

use crate::alignment::{train_stage1, AlignmentModel, JointTable, Stage1Log};
use crate::cf::{train_cf, CfConfig, CfModel, TrainLog};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Section};
use crate::config::{DataConfig, RunConfig};
use crate::data::{build_dataset, build_splits, ingest, kcore_filter, select_cold_users, ColdUserSelection, Dataset, SplitSet, UserIdx};
use crate::error::{CoreError, Result};
use crate::lm::{lm_words, train_lm, FrozenLm, LmConfig, LmTokenizer, LmTrainLog};
use crate::stage2::{random_joint_table, train_stage2, PromptContext, Projector, Stage2Log, DEMO_TEMPLATE};
use crate::synth::{generate, ClusterOracle, ORACLE_FILE};
use crate::text::{build_vocab, TextConfig, TextEncoder, Vocab};

pub const CF_FILE: &str = "cf.ckpt";
pub const LM_FILE: &str = "lm.ckpt";
pub const STAGE1_FILE: &str = "stage1.ckpt";
pub const STAGE2_FILE: &str = "stage2.ckpt";
pub const DATASET_FILE: &str = "dataset.json";

/// Loads or generates a dataset and applies k-core filtering. Synthetic
/// data also yields its cluster oracle.
pub fn load_dataset(data: &DataConfig) -> Result<(Dataset, Option<ClusterOracle>)> {
    data.validate()?;
    let (ds, oracle) = if let Some(s) = &data.synthetic {
        let g = generate(s)?;
        (build_dataset(&g.reviews, &g.meta, data.rating_threshold)?, Some(g.oracle))
    } else if let Some(p) = &data.dataset {
        (Dataset::load_json(p)?, None)
    } else {
        let (r, m) = (data.reviews.as_ref().expect("validated"), data.meta.as_ref().expect("validated"));
        // files written by `synth` carry their ground truth alongside
        let truth = r.parent().map(|d| d.join(ORACLE_FILE)).filter(|p| p.exists());
        (ingest(r, m, data.rating_threshold)?, truth.map(|p| ClusterOracle::load(&p)).transpose()?)
    };
    Ok((kcore_filter(&ds, data.kcore)?, oracle))
}

/// A dataset with its splits and the users kept out of training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub splits: SplitSet,
    pub cold_users: ColdUserSelection,
    pub exclude: HashSet<UserIdx>,
    pub oracle: Option<ClusterOracle>,
}

impl Prepared {
    pub fn new(dataset: Dataset, oracle: Option<ClusterOracle>, holdout_cold_users: bool) -> Self {
        let splits = build_splits(&dataset);
        let cold_users = select_cold_users(&dataset);
        let exclude = if holdout_cold_users {
            cold_users.users.iter().copied().collect()
        } else {
            HashSet::new()
        };
        Prepared {
            dataset,
            splits,
            cold_users,
            exclude,
            oracle,
        }
    }

    /// Restricts training to `users`; everyone else is excluded.
    pub fn only_train(&self, users: &[UserIdx]) -> Prepared {
        let keep: HashSet<UserIdx> = users.iter().copied().collect();
        let mut p = self.clone();
        p.exclude = (0..self.dataset.num_users()).filter(|u| !keep.contains(u) || self.exclude.contains(u)).collect();
        p
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (ds, oracle) = load_dataset(&cfg.data)?;
    Ok(Prepared::new(ds, oracle, cfg.data.holdout_cold_users))
}

/// `Title: {title}, Description: {desc}` with the description cut to
/// `max_words` words, punctuation kept.
pub fn lm_document(title: &str, description: &str, max_words: usize) -> String {
    let desc: Vec<&str> = lm_words(description).into_iter().take(max_words).collect();
    format!("Title: {title}, Description: {}", desc.join(" "))
}

/// Catalog text the LM is pretrained on: every item's document and its
/// title, plus shelf lists when the catalog is synthetic.
pub fn lm_corpus(dataset: &Dataset, max_words: usize, oracle: Option<&ClusterOracle>, seed: u64) -> Vec<String> {
    let mut out = Vec::with_capacity(4 * dataset.num_items());
    for m in &dataset.items {
        out.push(lm_document(&m.title, &m.description, max_words));
        out.push(m.title.clone());
    }
    if let Some(o) = oracle {
        out.extend(o.shelf_documents(&dataset.items, 2 * dataset.num_items(), seed));
    }
    out
}

pub fn lm_tokenizer(corpus: &[String], cfg: &RunConfig) -> LmTokenizer {
    let extra = [cfg.stage2.template.as_str(), DEMO_TEMPLATE, cfg.eval.demo_question.as_str(), ","];
    LmTokenizer::build(corpus.iter().map(String::as_str).chain(extra))
}

pub fn seed_for(cfg: &RunConfig, phase: &str) -> u64 {
    derive_seed(cfg.seed, phase)
}

pub fn run_cf(cfg: &RunConfig, prep: &Prepared) -> Result<(CfModel, TrainLog)> {
    train_cf(&prep.dataset, &prep.splits, &prep.exclude, &cfg.cf, seed_for(cfg, "cf"))
}

pub fn run_lm(cfg: &RunConfig, prep: &Prepared) -> Result<(FrozenLm, LmTrainLog)> {
    let corpus = lm_corpus(&prep.dataset, cfg.text.max_desc_tokens, prep.oracle.as_ref(), seed_for(cfg, "shelves"));
    let tok = lm_tokenizer(&corpus, cfg);
    train_lm(&corpus, tok, &cfg.lm, seed_for(cfg, "lm"))
}

pub fn run_stage1(cfg: &RunConfig, prep: &Prepared, cf: &CfModel) -> Result<(TextEncoder, AlignmentModel, Stage1Log)> {
    let vocab = build_vocab(&prep.dataset, cfg.text.min_count, cfg.text.max_desc_tokens);
    let mut text = TextEncoder::init(&cfg.text, vocab, seed_for(cfg, "text"))?;
    let (align, log) = train_stage1(cf, &mut text, &prep.dataset, &prep.splits, &prep.exclude, &cfg.stage1, seed_for(cfg, "stage1"))?;
    Ok((text, align, log))
}

/// Joint embeddings used by Stage-2 prompts; random stand-ins when the
/// configuration asks for them.
pub fn joint_table(cfg: &RunConfig, dataset: &Dataset, cf: &CfModel, text: &TextEncoder, align: &AlignmentModel) -> Result<JointTable> {
    if cfg.stage2.random_item_slots {
        Ok(random_joint_table(dataset.num_items(), align.joint_dim, seed_for(cfg, "random-slots")))
    } else {
        JointTable::build(align, cf, text, dataset)
    }
}

pub fn run_stage2(cfg: &RunConfig, prep: &Prepared, models: &Stage2Inputs) -> Result<(Projector, Stage2Log)> {
    let joint = joint_table(cfg, &prep.dataset, &models.cf, &models.text, &models.align)?;
    let ctx = PromptContext {
        lm: &models.lm,
        cf: &models.cf,
        joint: &joint,
        dataset: &prep.dataset,
        substitute_inputs: None,
        audit: None,
    };
    let before = (models.align.checksum(), models.text.checksum());
    let (proj, mut log) = train_stage2(&ctx, &prep.splits, &prep.exclude, &cfg.stage2, seed_for(cfg, "stage2"))?;
    if before != (models.align.checksum(), models.text.checksum()) {
        return Err(CoreError::FrozenViolation("alignment or text encoder changed during stage-2".into()));
    }
    log.frozen_checksums.push(("alignment".into(), before.0));
    log.frozen_checksums.push(("text_encoder".into(), before.1));
    Ok((proj, log))
}

/// Frozen models Stage-2 builds on.
#[derive(Clone, Debug)]
pub struct Stage2Inputs {
    pub cf: CfModel,
    pub text: TextEncoder,
    pub align: AlignmentModel,
    pub lm: FrozenLm,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub models: Stage2Inputs,
    pub projector: Projector,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLogs {
    pub cf: TrainLog,
    pub lm: LmTrainLog,
    pub stage1: Stage1Log,
    pub stage2: Stage2Log,
}

/// Every phase in order, in memory.
pub fn train_all(cfg: &RunConfig, prep: &Prepared) -> Result<(Trained, TrainLogs)> {
    let (cf, cf_log) = run_cf(cfg, prep)?;
    let (lm, lm_log) = run_lm(cfg, prep)?;
    let (text, align, s1_log) = run_stage1(cfg, prep, &cf)?;
    let models = Stage2Inputs { cf, text, align, lm };
    let (projector, s2_log) = run_stage2(cfg, prep, &models)?;
    Ok((
        Trained { models, projector },
        TrainLogs {
            cf: cf_log,
            lm: lm_log,
            stage1: s1_log,
            stage2: s2_log,
        },
    ))
}

/// Checkpoint files under one output directory.
#[derive(Clone, Debug)]
pub struct Store {
    pub dir: PathBuf,
}

impl Store {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Store { dir: dir.into() }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn save_cf(&self, cfg: &RunConfig, cf: &CfModel) -> Result<()> {
        let meta = json!({"config": cf.config, "num_items": cf.num_items, "seen": cf.seen});
        save_checkpoint(&self.path(CF_FILE), cfg.seed, &cfg.echo()?, &[Section::new("cf", meta, cf.params.clone())])
    }

    pub fn load_cf(&self) -> Result<CfModel> {
        let mut c = load_checkpoint(&self.path(CF_FILE), Some(&["cf"]), "train-cf")?;
        let s = c.take("cf")?;
        Ok(CfModel {
            config: from_meta::<CfConfig>(&s.meta, "config")?,
            num_items: from_meta(&s.meta, "num_items")?,
            seen: from_meta(&s.meta, "seen")?,
            params: s.params,
        })
    }

    pub fn save_lm(&self, cfg: &RunConfig, lm: &FrozenLm) -> Result<()> {
        let meta = json!({"config": lm.config, "tokenizer": lm.tokenizer});
        save_checkpoint(&self.path(LM_FILE), cfg.seed, &cfg.echo()?, &[Section::new("lm", meta, lm.params.clone())])
    }

    pub fn load_lm(&self) -> Result<FrozenLm> {
        let mut c = load_checkpoint(&self.path(LM_FILE), Some(&["lm"]), "train-lm")?;
        let s = c.take("lm")?;
        let tok: LmTokenizer = from_meta(&s.meta, "tokenizer")?;
        Ok(FrozenLm::from_parts(from_meta::<LmConfig>(&s.meta, "config")?, tok.restore(), s.params))
    }

    pub fn save_stage1(&self, cfg: &RunConfig, text: &TextEncoder, align: &AlignmentModel) -> Result<()> {
        let a = json!({"cf_dim": align.cf_dim, "text_dim": align.text_dim, "joint_dim": align.joint_dim});
        let t = json!({"config": text.config, "vocab": text.vocab});
        save_checkpoint(
            &self.path(STAGE1_FILE),
            cfg.seed,
            &cfg.echo()?,
            &[
                Section::new("alignment", a, align.params.clone()),
                Section::new("text_encoder", t, text.params.clone()),
            ],
        )
    }

    pub fn load_alignment(&self) -> Result<AlignmentModel> {
        let mut c = load_checkpoint(&self.path(STAGE1_FILE), Some(&["alignment"]), "train-stage1")?;
        let s = c.take("alignment")?;
        Ok(AlignmentModel {
            cf_dim: from_meta(&s.meta, "cf_dim")?,
            text_dim: from_meta(&s.meta, "text_dim")?,
            joint_dim: from_meta(&s.meta, "joint_dim")?,
            params: s.params,
        })
    }

    pub fn load_text(&self) -> Result<TextEncoder> {
        let mut c = load_checkpoint(&self.path(STAGE1_FILE), Some(&["text_encoder"]), "train-stage1")?;
        let s = c.take("text_encoder")?;
        Ok(TextEncoder {
            config: from_meta::<TextConfig>(&s.meta, "config")?,
            vocab: from_meta::<Vocab>(&s.meta, "vocab")?.restore(),
            params: s.params,
        })
    }

    pub fn save_stage2(&self, cfg: &RunConfig, p: &Projector) -> Result<()> {
        let meta = json!({"user_dim": p.user_dim, "joint_dim": p.joint_dim, "token_dim": p.token_dim});
        save_checkpoint(&self.path(STAGE2_FILE), cfg.seed, &cfg.echo()?, &[Section::new("projector", meta, p.params.clone())])
    }

    pub fn load_stage2(&self) -> Result<Projector> {
        let mut c = load_checkpoint(&self.path(STAGE2_FILE), Some(&["projector"]), "train-stage2")?;
        let s = c.take("projector")?;
        Ok(Projector {
            user_dim: from_meta(&s.meta, "user_dim")?,
            joint_dim: from_meta(&s.meta, "joint_dim")?,
            token_dim: from_meta(&s.meta, "token_dim")?,
            params: s.params,
        })
    }

    pub fn load_stage2_inputs(&self) -> Result<Stage2Inputs> {
        Ok(Stage2Inputs {
            cf: self.load_cf()?,
            text: self.load_text()?,
            align: self.load_alignment()?,
            lm: self.load_lm()?,
        })
    }

    pub fn load_trained(&self) -> Result<Trained> {
        let projector = self.load_stage2()?;
        Ok(Trained {
            models: self.load_stage2_inputs()?,
            projector,
        })
    }

    pub fn save_all(&self, cfg: &RunConfig, t: &Trained) -> Result<()> {
        self.save_cf(cfg, &t.models.cf)?;
        self.save_lm(cfg, &t.models.lm)?;
        self.save_stage1(cfg, &t.models.text, &t.models.align)?;
        self.save_stage2(cfg, &t.projector)
    }
}

fn from_meta<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| CoreError::Serde(format!("checkpoint metadata lacks {key:?}")))?;
    Ok(serde_json::from_value(v.clone())?)
}

/// Writes `dataset` as JSON under `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let p = dir.join(DATASET_FILE);
    dataset.save_json(&p)?;
    Ok(p)
}
