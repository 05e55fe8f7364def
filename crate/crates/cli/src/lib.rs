//! `softslot` command-line interface.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use softslot_core::config::RunConfig;
use softslot_core::data::{ingest, kcore_filter};
use softslot_core::eval::{format_table, MetricReport};
use softslot_core::pipeline::{self, prepare, write_dataset, Store};
use softslot_core::scenarios::{self, AblationSpec, Scenario};
use softslot_core::synth::{generate, SynthConfig};
use softslot_core::{CoreError, Result};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "softslot", version, about = "Soft-prompt recommendation with a frozen language model")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true, env = "SOFTSLOT_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse review and metadata files into a filtered dataset.json.
    Ingest(IngestArgs),
    /// Generate a planted-cluster dataset.
    Synth(SynthArgs),
    /// Pretrain the collaborative-filtering model.
    TrainCf,
    /// Pretrain the language model on catalog text.
    TrainLm,
    /// Align CF and text embeddings.
    TrainStage1,
    /// Train the soft-prompt projectors.
    TrainStage2,
    /// Evaluate Hit@1 under one or all scenarios.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the ablation matrix.
    Ablate(AblateArgs),
    /// Generate free text for a user.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub reviews: Option<PathBuf>,
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub kcore: Option<usize>,
    #[arg(long)]
    pub rating_threshold: Option<f32>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    pub clusters: usize,
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 100)]
    pub items: usize,
    #[arg(long, default_value_t = 0.9)]
    pub in_cluster_prob: f64,
    #[arg(long, default_value_t = 0.0)]
    pub cold_item_fraction: f64,
    #[arg(long)]
    pub disjoint: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// overall, cold_warm, cold_user, fewshot, cross_domain or all.
    #[arg(long, default_value = "overall")]
    pub scenario: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated rows; every row when omitted.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Raw user id; the first evaluable users when omitted.
    #[arg(long)]
    pub user: Option<String>,
    #[arg(long)]
    pub question: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub users: usize,
}

/// Parses `argv` and runs the command; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
}

fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&r.to_json_line()?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cfg.output_dir.clone();
    let store = Store::new(&out);
    match &cli.command {
        Command::Synth(a) => {
            let sc = SynthConfig {
                clusters: a.clusters,
                users: a.users,
                items: a.items,
                in_cluster_prob: a.in_cluster_prob,
                cold_item_fraction: a.cold_item_fraction,
                disjoint: a.disjoint,
                seed: cfg.seed,
                ..SynthConfig::default()
            };
            let data = generate(&sc)?;
            ensure_dir(&out)?;
            data.write(&out)?;
            println!("wrote {} reviews for {} items to {}", data.reviews.len(), data.meta.len(), out.display());
        }
        Command::Ingest(a) => {
            let reviews = a.reviews.clone().or(cfg.data.reviews.clone());
            let meta = a.meta.clone().or(cfg.data.meta.clone());
            let (Some(reviews), Some(meta)) = (reviews, meta) else {
                return Err(CoreError::Config("ingest needs --reviews and --meta (or data.reviews/data.meta)".into()));
            };
            for p in [&reviews, &meta] {
                if !p.exists() {
                    return Err(CoreError::Config(format!("{} does not exist", p.display())));
                }
            }
            let threshold = a.rating_threshold.or(cfg.data.rating_threshold);
            let ds = kcore_filter(&ingest(&reviews, &meta, threshold)?, a.kcore.unwrap_or(cfg.data.kcore))?;
            let p = write_dataset(&out, &ds)?;
            println!(
                "{} users, {} items, {} interactions -> {}",
                ds.num_users(),
                ds.num_items(),
                ds.num_interactions(),
                p.display()
            );
        }
        Command::TrainCf => {
            cfg.validate()?;
            let prep = prepare(&cfg)?;
            let (cf, log) = pipeline::run_cf(&cfg, &prep)?;
            store.save_cf(&cfg, &cf)?;
            write_json(&out.join("train-cf.json"), &log)?;
            println!("cf: final loss {:.4}", log.epoch_losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainLm => {
            cfg.validate()?;
            let prep = prepare(&cfg)?;
            let (lm, log) = pipeline::run_lm(&cfg, &prep)?;
            store.save_lm(&cfg, &lm)?;
            write_json(&out.join("train-lm.json"), &log)?;
            println!(
                "lm: perplexity {:.2} -> {:.2}",
                log.initial_perplexity,
                log.epoch_perplexity.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::TrainStage1 => {
            cfg.validate()?;
            let cf = store.load_cf()?;
            let prep = prepare(&cfg)?;
            let (text, align, log) = pipeline::run_stage1(&cfg, &prep, &cf)?;
            store.save_stage1(&cfg, &text, &align)?;
            write_json(&out.join("train-stage1.json"), &log)?;
            println!("stage-1: {:?}", log.epochs.last());
        }
        Command::TrainStage2 => {
            cfg.validate()?;
            let inputs = store.load_stage2_inputs()?;
            let prep = prepare(&cfg)?;
            let (proj, log) = pipeline::run_stage2(&cfg, &prep, &inputs)?;
            store.save_stage2(&cfg, &proj)?;
            write_json(&out.join("train-stage2.json"), &log)?;
            println!("stage-2: losses {:?}", log.epoch_losses);
        }
        Command::Evaluate(a) => {
            cfg.validate()?;
            let scenarios = if a.scenario == "all" {
                Scenario::ALL.to_vec()
            } else {
                vec![Scenario::parse(&a.scenario)?]
            };
            let trained = store.load_trained()?;
            let prep = prepare(&cfg)?;
            let mut reports = Vec::new();
            for s in scenarios {
                if s == Scenario::CrossDomain && cfg.eval.cross_domain.is_none() {
                    log::warn!("skipping cross_domain: no [eval.cross_domain] configured");
                    continue;
                }
                reports.extend(scenarios::run_scenario(&cfg, &prep, &trained, s)?);
            }
            write_reports(&out.join("reports.jsonl"), &reports)?;
            print!("{}", format_table(&reports));
        }
        Command::Ablate(a) => {
            cfg.validate()?;
            let spec = ablation_spec(&a.rows)?;
            let prep = prepare(&cfg)?;
            let rows = scenarios::run_ablation(&cfg, &prep, &spec)?;
            ensure_dir(&out)?;
            let mut f = String::new();
            for r in &rows {
                f.push_str(&serde_json::to_string(r)?);
                f.push('\n');
            }
            let p = out.join("ablation.jsonl");
            std::fs::write(&p, f).map_err(|e| CoreError::io(&p, e))?;
            print!("{}", scenarios::format_ablation(&rows));
        }
        Command::Demo(a) => {
            cfg.validate()?;
            let trained = store.load_trained()?;
            let prep = prepare(&cfg)?;
            let question = a.question.clone().unwrap_or_else(|| cfg.eval.demo_question.clone());
            let users: Vec<usize> = match &a.user {
                Some(id) => vec![prep
                    .dataset
                    .user_ids
                    .iter()
                    .position(|u| u == id)
                    .ok_or_else(|| CoreError::Config(format!("unknown user {id}")))?],
                None => prep.splits.evaluable().map(|s| s.user).take(a.users).collect(),
            };
            let mut stdout = std::io::stdout().lock();
            for u in users {
                let text = scenarios::demo_generate(&cfg, &prep, &trained, u, &question)?;
                writeln!(stdout, "{}\t{}", prep.dataset.user_ids[u], text).map_err(|e| CoreError::io("<stdout>", e))?;
            }
        }
    }
    Ok(())
}

/// Maps row names to ablation flags; no names selects every row.
pub fn ablation_spec(rows: &[String]) -> Result<AblationSpec> {
    if rows.is_empty() {
        return Ok(AblationSpec::all());
    }
    let mut s = AblationSpec::default();
    for r in rows {
        match r.as_str() {
            "drop_matching" => s.drop_matching = true,
            "drop_recon" => s.drop_recon = true,
            "drop_rec_loss" => s.drop_rec_loss = true,
            "freeze_text_encoder" => s.freeze_text_encoder = true,
            "no_user_slot" => s.no_user_slot = true,
            "no_item_slots" => s.no_item_slots = true,
            "random_item_slots" => s.random_item_slots = true,
            "all_items_training" => s.all_items_training = true,
            "baseline" => {}
            other => return Err(CoreError::Config(format!("unknown ablation row {other:?}"))),
        }
    }
    Ok(s)
}
