//! Acceptance run: one PASS/FAIL line per criterion. Set
//! `SOFTSLOT_ACCEPTANCE=4,9` to run a subset.

#[path = "../../core/tests/support/gradcheck.rs"]
#[allow(dead_code)]
mod gradcheck;

use std::collections::{BTreeSet, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use softslot_core::alignment::PathMode;
use softslot_core::cf::training_sequences;
use softslot_core::checkpoint::load_checkpoint;
use softslot_core::config::{DataConfig, RunConfig};
use softslot_core::data::{build_dataset, build_eval_instances, build_splits, kcore_filter, EvalInstance, EVAL_NEGATIVES};
use softslot_core::eval::{hit_at_1, MetricReport};
use softslot_core::pipeline::{
    prepare, run_cf, run_lm, run_stage1, run_stage2, train_all, Prepared, Stage2Inputs, Store, Trained, STAGE1_FILE,
};
use softslot_core::scenarios::{
    demo_generate, eval_instances, evaluate_cf, evaluate_llm, run_ablation, run_scenario, AblationSpec, Scenario,
};
use softslot_core::stage2::Stage2Log;
use softslot_core::synth::{generate, SynthConfig};
use softslot_numerics::seeded_rng;

const GRADCHECK_BUDGET_SECS: f64 = 120.0;
const RANDOM_HIT_RANGE: (f64, f64) = (0.041, 0.059);
const RANDOM_RANKER_INSTANCES: usize = 10_000;
const PIPELINE_MIN_HIT: f64 = 0.30;
const PIPELINE_BUDGET_SECS: f64 = 15.0 * 60.0;
const COLD_FRACTION: f64 = 0.3;
// planted above the target: a cold item no user draws leaves the catalog
const PLANTED_COLD_FRACTION: f64 = 0.35;
const COLD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const COLD_MIN_GAIN: f64 = 0.05;
const ALL_ITEMS_SLACK: f64 = 0.02;
const DEMO_USERS: usize = 50;
const DEMO_MIN_RATE: f64 = 0.60;
const ABLATION_ROWS: [&str; 9] = [
    "baseline",
    "w/o L_matching",
    "w/o L_item_recon & L_text_recon",
    "w/o L_rec",
    "freeze text encoder",
    "w/o user representation",
    "w/o joint embedding",
    "with random joint embedding",
    "all-items training",
];

type Check = Result<(bool, String), String>;

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml")
}

fn cli(args: &[&str]) -> i32 {
    softslot_cli::run(std::iter::once("softslot").chain(args.iter().copied()))
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// A scaled-down run for checks that need trained models but not accuracy.
fn small_config(seed: u64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        data: DataConfig::synthetic(SynthConfig::default()),
        ..RunConfig::default()
    };
    c.cf.epochs = 10;
    c.stage1.epochs = 3;
    c.lm.epochs = 3;
    c.stage2.epochs = 1;
    c.eval.max_instances = Some(40);
    c.eval.fewshot_k = vec![];
    c
}

fn read_reports(path: &Path) -> Result<Vec<MetricReport>, String> {
    std::fs::read_to_string(path)
        .map_err(s)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(s))
        .collect()
}

fn find<'a>(reports: &'a [MetricReport], scenario: &str, variant: &str) -> Result<&'a MetricReport, String> {
    reports
        .iter()
        .find(|r| r.scenario == scenario && r.variant == variant)
        .ok_or_else(|| format!("no {scenario}/{variant} report"))
}

// 1

fn gradients() -> Check {
    let t = Instant::now();
    let mut worst: Vec<String> = Vec::new();
    let mut ok = true;
    for (name, case) in gradcheck::CASES {
        let e = case();
        ok &= e < gradcheck::TOL;
        worst.push(format!("{name} {e:.1e}"));
    }
    let secs = t.elapsed().as_secs_f64();
    ok &= secs < GRADCHECK_BUDGET_SECS;
    Ok((
        ok,
        format!("{} seeds each, worst rel err: {}; {secs:.1}s", gradcheck::SEEDS, worst.join(", ")),
    ))
}

// 2

fn frozen_checksums(pipeline: &PipelineRun) -> Check {
    let cfg = small_config(11);
    let prep = prepare(&cfg).map_err(s)?;
    let (cf, _) = run_cf(&cfg, &prep).map_err(s)?;
    let (lm, _) = run_lm(&cfg, &prep).map_err(s)?;
    let (cf0, lm0) = (cf.checksum(), lm.checksum());
    let (text, align, _) = run_stage1(&cfg, &prep, &cf).map_err(s)?;
    let mut ok = cf.checksum() == cf0;
    let (a0, t0) = (align.checksum(), text.checksum());
    let models = Stage2Inputs { cf, text, align, lm };
    let (projector, _) = run_stage2(&cfg, &prep, &models).map_err(s)?;
    let t = Trained { models, projector };
    ok &= t.models.cf.checksum() == cf0 && t.models.lm.checksum() == lm0;
    ok &= t.models.align.checksum() == a0 && t.models.text.checksum() == t0;
    for sc in [Scenario::Overall, Scenario::ColdWarm, Scenario::ColdUser] {
        run_scenario(&cfg, &prep, &t, sc).map_err(s)?;
    }
    demo_generate(&cfg, &prep, &t, prep.splits.evaluable().next().unwrap().user, &cfg.eval.demo_question).map_err(s)?;
    ok &= t.models.lm.checksum() == lm0 && t.models.cf.checksum() == cf0;

    // the CLI run: checksums logged by train-stage2 match the checkpoints
    // read back after evaluate and demo
    let log: Stage2Log = serde_json::from_str(&std::fs::read_to_string(pipeline.dir.join("train-stage2.json")).map_err(s)?)
        .map_err(s)?;
    let back = Store::new(&pipeline.dir).load_trained().map_err(s)?;
    let want = [
        ("lm", back.models.lm.checksum()),
        ("cf", back.models.cf.checksum()),
        ("alignment", back.models.align.checksum()),
        ("text_encoder", back.models.text.checksum()),
    ];
    for (name, sum) in &want {
        ok &= log.frozen_checksums.iter().any(|(n, c)| n == name && c == sum);
    }
    Ok((ok, "cf, lm, alignment and text encoder unchanged across stages and inference".into()))
}

// 3

fn protocol() -> Check {
    let cfg = RunConfig::load(&config_path()).map_err(s)?;
    let prep = prepare(&cfg).map_err(s)?;
    let ds = &prep.dataset;
    let mut ok = true;
    let mut partition = 0;
    for sp in &prep.splits.users {
        let mut joined = sp.train.clone();
        joined.extend(sp.valid);
        joined.extend(sp.test);
        if joined == ds.sequences[sp.user] && sp.is_evaluable() == (ds.sequences[sp.user].len() >= 3) {
            partition += 1;
        }
    }
    ok &= partition == ds.num_users() && prep.splits.users.len() == ds.num_users();

    let inst = build_eval_instances(ds, &prep.splits, None, 5).map_err(s)?;
    let good_negatives = inst
        .iter()
        .filter(|i| {
            let seen: HashSet<usize> = ds.sequences[i.user].iter().copied().collect();
            let negs: HashSet<usize> = i.negatives.iter().copied().collect();
            negs.len() == EVAL_NEGATIVES && i.negatives.len() == EVAL_NEGATIVES && negs.is_disjoint(&seen)
        })
        .count();
    ok &= good_negatives == inst.len();

    let raw = generate(cfg.data.synthetic.as_ref().unwrap()).map_err(s)?;
    let raw = build_dataset(&raw.reviews, &raw.meta, None).map_err(s)?;
    let mut kcore_ok = true;
    for k in [3, 5, 8] {
        let f = kcore_filter(&raw, k).map_err(s)?;
        kcore_ok &= f.sequences.iter().all(|q| q.len() >= k) && f.item_counts().iter().all(|&c| c >= k);
        kcore_ok &= kcore_filter(&f, k).map_err(s)? == f;
    }
    ok &= kcore_ok;

    let big = generate(&SynthConfig {
        users: RANDOM_RANKER_INSTANCES,
        seed: 3,
        ..SynthConfig::default()
    })
    .map_err(s)?;
    let big = build_dataset(&big.reviews, &big.meta, None).map_err(s)?;
    let many = build_eval_instances(&big, &build_splits(&big), None, 17).map_err(s)?;
    let o = hit_at_1(&many, |i| {
        let mut rng = seeded_rng(99, &format!("random-ranker/{}", i.user));
        Ok(i.candidates.iter().map(|_| rng.random::<f32>()).collect())
    });
    let h = o.hit_rate();
    ok &= many.len() == RANDOM_RANKER_INSTANCES && (RANDOM_HIT_RANGE.0..=RANDOM_HIT_RANGE.1).contains(&h);
    Ok((
        ok,
        format!(
            "partition {partition}/{} users, negatives {good_negatives}/{} instances, k-core {}, random Hit@1 {h:.4} over {}",
            ds.num_users(),
            inst.len(),
            if kcore_ok { "holds" } else { "violated" },
            many.len()
        ),
    ))
}

// 4

struct PipelineRun {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    cfg: RunConfig,
    prep: Prepared,
    reports: Vec<MetricReport>,
    secs: f64,
    failed: Option<String>,
}

fn run_pipeline() -> Result<PipelineRun, String> {
    let tmp = tempfile::tempdir().map_err(s)?;
    let dir = tmp.path().join("run");
    let config = config_path();
    let (c, d) = (config.to_str().unwrap(), dir.to_str().unwrap());
    let t = Instant::now();
    let mut failed = None;
    for cmd in ["train-cf", "train-lm", "train-stage1", "train-stage2", "evaluate"] {
        let code = cli(&["--config", c, "--output-dir", d, cmd]);
        if code != 0 {
            failed = Some(format!("{cmd} exited with {code}"));
            break;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let reports = if failed.is_none() { read_reports(&dir.join("reports.jsonl"))? } else { Vec::new() };
    let cfg = RunConfig::load(&config).map_err(s)?;
    let prep = prepare(&cfg).map_err(s)?;
    Ok(PipelineRun {
        _tmp: tmp,
        dir,
        cfg,
        prep,
        reports,
        secs,
        failed,
    })
}

fn end_to_end(run: &PipelineRun) -> Check {
    if let Some(f) = &run.failed {
        return Ok((false, f.clone()));
    }
    let llm = find(&run.reports, "overall", "auto")?;
    let cf = find(&run.reports, "overall", "cf-only")?;
    let ok = llm.hit_at_1 >= PIPELINE_MIN_HIT && run.secs <= PIPELINE_BUDGET_SECS && llm.errors == 0;
    Ok((
        ok,
        format!(
            "Hit@1 {:.4} over {} instances (CF-only {:.4}), {:.0}s for train-cf..evaluate",
            llm.hit_at_1, llm.instances, cf.hit_at_1, run.secs
        ),
    ))
}

// 5, 6

struct ColdRun {
    cfg: RunConfig,
    prep: Prepared,
    trained: Trained,
}

fn cold_config(seed: u64) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::load(&config_path()).map_err(s)?;
    cfg.seed = seed;
    let syn = cfg.data.synthetic.as_mut().unwrap();
    syn.seed = seed;
    syn.cold_item_fraction = PLANTED_COLD_FRACTION;
    // cold items only ever appear as a final interaction; k-core filtering
    // would drop most of them
    cfg.data.kcore = 1;
    cfg.stage2.epochs = 2;
    Ok(cfg)
}

fn cold_run(seed: u64) -> Result<ColdRun, String> {
    let cfg = cold_config(seed)?;
    let prep = prepare(&cfg).map_err(s)?;
    let (trained, _) = train_all(&cfg, &prep).map_err(s)?;
    Ok(ColdRun { cfg, prep, trained })
}

fn cold_instances(r: &ColdRun) -> Result<Vec<EvalInstance>, String> {
    let oracle = r.prep.oracle.as_ref().unwrap();
    let cold: HashSet<&str> = oracle.cold_items.iter().map(String::as_str).collect();
    Ok(eval_instances(&r.cfg, &r.prep, None)
        .map_err(s)?
        .into_iter()
        .filter(|i| cold.contains(r.prep.dataset.items[i.positive].item_id.as_str()))
        .collect())
}

/// Fraction of the catalog with at most one training interaction.
fn sparse_fraction(prep: &Prepared) -> f64 {
    let mut counts = vec![0usize; prep.dataset.num_items()];
    for (_, seq) in training_sequences(&prep.splits, &prep.exclude) {
        for i in seq {
            counts[i] += 1;
        }
    }
    counts.iter().filter(|&&c| c <= 1).count() as f64 / counts.len() as f64
}

fn cold_items(first: &mut Option<ColdRun>) -> Check {
    let mut gains = Vec::new();
    let mut parts = Vec::new();
    let mut sparse_ok = true;
    for seed in COLD_SEEDS {
        let r = cold_run(seed)?;
        let frac = sparse_fraction(&r.prep);
        sparse_ok &= frac >= COLD_FRACTION - 1e-9;
        let inst = cold_instances(&r)?;
        let (text, _) = evaluate_llm(&r.cfg, &r.prep, &r.trained, &inst, PathMode::TextPath).map_err(s)?;
        let cf = evaluate_cf(&r.trained, &inst);
        gains.push(text.hit_rate() - cf.hit_rate());
        parts.push(format!(
            "seed {seed}: text {:.3} cf {:.3} n={} sparse {:.2}",
            text.hit_rate(),
            cf.hit_rate(),
            inst.len(),
            frac
        ));
        if first.is_none() {
            *first = Some(r);
        }
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    Ok((
        sparse_ok && mean >= COLD_MIN_GAIN,
        format!("mean gain {mean:.3} ({})", parts.join("; ")),
    ))
}

fn path_audit(r: &ColdRun) -> Check {
    let unseen = r.trained.models.cf.seen.iter().filter(|s| !**s).count();
    let inst = eval_instances(&r.cfg, &r.prep, None).map_err(s)?;
    let (_, auto) = evaluate_llm(&r.cfg, &r.prep, &r.trained, &inst, PathMode::Auto).map_err(s)?;
    let reports = run_scenario(&r.cfg, &r.prep, &r.trained, Scenario::ColdWarm).map_err(s)?;
    let forced = find(&reports, "cold_warm", "text-path")?;
    let tagged = forced.notes.iter().any(|n| n.contains("item-path seen=0 unseen=0"));
    let ok = unseen > 0 && auto.item_unseen == 0 && auto.text_unseen > 0 && tagged;
    Ok((
        ok,
        format!(
            "{unseen} unseen items; auto: item-path on unseen {}, text-path on unseen {}; forced variant tagged {:?}",
            auto.item_unseen, auto.text_unseen, forced.variant
        ),
    ))
}

// 7

fn ablation() -> Check {
    let cfg = small_config(13);
    let prep = prepare(&cfg).map_err(s)?;
    let rows = run_ablation(&cfg, &prep, &AblationSpec::all()).map_err(s)?;
    let names: Vec<&str> = rows.iter().map(|r| r.row.as_str()).collect();
    let mut ok = names == ABLATION_ROWS;
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.report.seed).collect();
    let counts: BTreeSet<usize> = rows.iter().map(|r| r.report.instances).collect();
    ok &= seeds.len() == 1 && counts.len() == 1 && rows.iter().all(|r| r.report.errors == 0);
    let row = |n: &str| rows.iter().find(|r| r.row == n).unwrap();
    let epochs = |n: &str| row(n).stage1.epochs.clone();
    ok &= epochs("w/o L_matching").iter().all(|t| t.matching == 0.0);
    ok &= epochs("w/o L_item_recon & L_text_recon").iter().all(|t| t.item_recon == 0.0 && t.text_recon == 0.0);
    ok &= epochs("w/o L_rec").iter().all(|t| t.rec == 0.0);
    ok &= epochs("baseline")
        .iter()
        .all(|t| t.matching > 0.0 && t.item_recon > 0.0 && t.text_recon > 0.0 && t.rec > 0.0);
    ok &= row("all-items training").stage2_examples > row("baseline").stage2_examples;
    let table: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.row, r.report.hit_at_1)).collect();
    Ok((ok, format!("{} rows on {:?} instances: {}", rows.len(), counts, table.join(", "))))
}

// 8

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(s)?;
    let cfg = small_config(17);
    let cfg_path = tmp.path().join("small.toml");
    std::fs::write(&cfg_path, cfg.to_toml().map_err(s)?).map_err(s)?;
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        for cmd in ["train-cf", "train-lm", "train-stage1", "train-stage2", "evaluate"] {
            let code = cli(&["--config", cfg_path.to_str().unwrap(), "--output-dir", d.to_str().unwrap(), cmd]);
            if code != 0 {
                return Ok((false, format!("{cmd} exited with {code}")));
            }
        }
    }
    let files = [
        "cf.ckpt",
        "lm.ckpt",
        "stage1.ckpt",
        "stage2.ckpt",
        "reports.jsonl",
        "train-cf.json",
        "train-lm.json",
        "train-stage1.json",
        "train-stage2.json",
    ];
    let same = |a: &Path, b: &Path, f: &str| std::fs::read(a.join(f)).ok() == std::fs::read(b.join(f)).ok();
    let differing: Vec<&str> = files.iter().copied().filter(|f| !same(&dirs[0], &dirs[1], f)).collect();

    let resaved = tmp.path().join("c");
    let t = Store::new(&dirs[0]).load_trained().map_err(s)?;
    Store::new(&resaved).save_all(&cfg, &t).map_err(s)?;
    let roundtrip: Vec<&str> = files[..4].iter().copied().filter(|f| !same(&dirs[0], &resaved, f)).collect();

    let partial = load_checkpoint(&dirs[0].join(STAGE1_FILE), Some(&["text_encoder"]), "train-stage1").map_err(s)?;
    let partial_ok = partial.sections.len() == 1
        && partial.sections[0].name == "text_encoder"
        && partial.sections[0].params.checksum() == t.models.text.checksum();
    let ok = differing.is_empty() && roundtrip.is_empty() && partial_ok;
    Ok((
        ok,
        format!(
            "{} files compared, differing {differing:?}; save->load->save differing {roundtrip:?}; partial load {}",
            files.len(),
            if partial_ok { "ok" } else { "wrong" }
        ),
    ))
}

// 9

fn all_items(run: &PipelineRun) -> Check {
    if let Some(f) = &run.failed {
        return Ok((false, f.clone()));
    }
    let prep = &run.prep;
    let want: usize = prep
        .splits
        .evaluable()
        .filter(|sp| !prep.exclude.contains(&sp.user))
        .map(|sp| prep.dataset.sequences[sp.user].len() - 2)
        .sum();
    let log: Stage2Log =
        serde_json::from_str(&std::fs::read_to_string(run.dir.join("train-stage2.json")).map_err(s)?).map_err(s)?;
    let all = find(&run.reports, "overall", "auto")?.hit_at_1;

    let mut last_cfg = run.cfg.clone();
    last_cfg.stage2.all_items = false;
    let models = Store::new(&run.dir).load_stage2_inputs().map_err(s)?;
    let (projector, last_log) = run_stage2(&last_cfg, prep, &models).map_err(s)?;
    let t = Trained { models, projector };
    let inst = eval_instances(&last_cfg, prep, None).map_err(s)?;
    let (o, _) = evaluate_llm(&last_cfg, prep, &t, &inst, PathMode::Auto).map_err(s)?;
    let last = o.hit_rate();
    let ok = log.examples_per_epoch == want && run.cfg.stage2.all_items && all >= last - ALL_ITEMS_SLACK;
    Ok((
        ok,
        format!(
            "{} all-items instances (expected {want}, last-item {}); Hit@1 all-items {all:.4} vs last-item {last:.4}",
            log.examples_per_epoch, last_log.examples_per_epoch
        ),
    ))
}

// 10

fn demo(run: &PipelineRun) -> Check {
    if let Some(f) = &run.failed {
        return Ok((false, f.clone()));
    }
    let prep = &run.prep;
    let oracle = prep.oracle.as_ref().ok_or("synthetic run without an oracle")?;
    let t = Store::new(&run.dir).load_trained().map_err(s)?;
    let users: Vec<usize> = prep.splits.evaluable().map(|sp| sp.user).take(DEMO_USERS).collect();
    let mut hits = 0;
    let mut sample = Vec::new();
    for &u in &users {
        let text = demo_generate(&run.cfg, prep, &t, u, &run.cfg.eval.demo_question).map_err(s)?;
        let kw = oracle.user_keyword(&prep.dataset.user_ids[u]).ok_or("user missing from oracle")?;
        if text.split_whitespace().any(|w| w == kw) {
            hits += 1;
        }
        if sample.len() < 3 {
            sample.push(format!("[{kw}] {text:?}"));
        }
    }
    let rate = hits as f64 / users.len() as f64;
    Ok((
        users.len() == DEMO_USERS && rate >= DEMO_MIN_RATE,
        format!("{hits}/{} outputs name the majority keyword ({rate:.2}); e.g. {}", users.len(), sample.join(", ")),
    ))
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("SOFTSLOT_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    // libtest passes flags such as --nocapture or a name filter; none apply here
    let mut failures = 0;
    let mut emit = |n: u32, check: Check, secs: f64| {
        let (pass, detail) = check.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            failures += 1;
        }
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{} criterion {n}: {detail} [{secs:.0}s]", if pass { "PASS" } else { "FAIL" });
        let _ = out.flush();
    };
    let timed = |f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let c = f();
        (c, t.elapsed().as_secs_f64())
    };

    if want(1) {
        let (c, t) = timed(&mut gradients);
        emit(1, c, t);
    }
    if want(3) {
        let (c, t) = timed(&mut protocol);
        emit(3, c, t);
    }
    if want(8) {
        let (c, t) = timed(&mut determinism);
        emit(8, c, t);
    }
    if want(7) {
        let (c, t) = timed(&mut ablation);
        emit(7, c, t);
    }
    if [2, 4, 9, 10].into_iter().any(want) {
        let t = Instant::now();
        match run_pipeline() {
            Ok(run) => {
                let base = t.elapsed().as_secs_f64();
                if want(4) {
                    emit(4, end_to_end(&run), base);
                }
                if want(9) {
                    let (c, t) = timed(&mut || all_items(&run));
                    emit(9, c, t);
                }
                if want(10) {
                    let (c, t) = timed(&mut || demo(&run));
                    emit(10, c, t);
                }
                if want(2) {
                    let (c, t) = timed(&mut || frozen_checksums(&run));
                    emit(2, c, t);
                }
            }
            Err(e) => {
                for n in [2, 4, 9, 10].into_iter().filter(|&n| want(n)) {
                    emit(n, Err(e.clone()), 0.0);
                }
            }
        }
    }
    if want(5) || want(6) {
        let mut first = None;
        if want(5) {
            let (c, t) = timed(&mut || cold_items(&mut first));
            emit(5, c, t);
        }
        if want(6) {
            let t = Instant::now();
            let c = match first {
                Some(r) => path_audit(&r),
                None => cold_run(COLD_SEEDS[0]).and_then(|r| path_audit(&r)),
            };
            emit(6, c, t.elapsed().as_secs_f64());
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
