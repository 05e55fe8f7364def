//! Gradient-check cases shared by the core tests and the acceptance run.
//! Each case returns the worst relative error over its seeded instances.

use rand::Rng as _;
use softslot_core::alignment::{stage1_loss, AlignmentModel, LossWeights, Stage1Inputs};
use softslot_core::cf::{cf_loss, CfConfig, CfKind, CfModel};
use softslot_core::layers::Dropout;
use softslot_core::lm::{FrozenLm, LmConfig, LmTokenizer};
use softslot_core::stage2::{stage2_loss, Projector, PromptInstance, RowSource};
use softslot_core::text::{TextConfig, TextEncoder, Vocab};
use softslot_core::{CoreError, Result};
use softslot_numerics::{finite_diff_grad, relative_error, seeded_rng, value_and_grad, ParamStore, Rng, Tape, Tensor, Var};

pub const SEEDS: u64 = 20;
pub const TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;
const ABS_FLOOR: f64 = 1e-9;

fn check<F>(name: &str, stores: &[&ParamStore<f64>], loss: F) -> f64
where
    F: Fn(&Tape<'_, f64>) -> Result<Var>,
{
    let (_, analytic) = value_and_grad::<f64, CoreError, _>(stores, |t| loss(t)).unwrap();
    let numeric = finite_diff_grad::<f64, CoreError, _>(stores, &loss, EPS).unwrap();
    assert!(!numeric.is_empty(), "{name}: nothing to check");
    let mut worst = 0f64;
    for (p, num) in &numeric {
        let ana = analytic
            .get(p)
            .unwrap_or_else(|| panic!("{name}: no analytic gradient for {p}"));
        for (a, n) in ana.data().iter().zip(num.data()) {
            worst = worst.max(relative_error(*a, *n, ABS_FLOOR));
        }
    }
    worst
}

fn randn(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::randn(&[rows, cols], 1.0, rng)
}

pub struct Stage1Case {
    pub align: ParamStore<f64>,
    pub text: ParamStore<f64>,
    pub model: AlignmentModel,
    pub encoder: TextEncoder,
    pub x_user: Tensor<f64>,
    pub e_pos: Tensor<f64>,
    pub e_neg: Tensor<f64>,
    pub ids: Vec<Vec<usize>>,
}

pub fn stage1_case(seed: u64) -> Stage1Case {
    let mut rng = seeded_rng(seed, "gradcheck/stage1");
    let (cf_dim, text_dim, joint) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..4));
    let b = rng.random_range(1..4);
    let model = AlignmentModel::init(cf_dim, text_dim, joint, seed).unwrap();
    let vocab = Vocab::from_tokens(["alpha", "beta", "gamma", "delta"].map(String::from));
    let cfg = TextConfig {
        dim: text_dim,
        ..TextConfig::default()
    };
    let encoder = TextEncoder::init(&cfg, vocab, seed).unwrap();
    let ids = (0..b)
        .map(|_| (0..rng.random_range(1..4)).map(|_| rng.random_range(0..encoder.vocab.len())).collect())
        .collect();
    Stage1Case {
        align: model.params.cast(),
        text: encoder.params.cast(),
        x_user: randn(&mut rng, b, cf_dim),
        e_pos: randn(&mut rng, b, cf_dim),
        e_neg: randn(&mut rng, b, cf_dim),
        model,
        encoder,
        ids,
    }
}

fn run_stage1(name: &str, weights: impl Fn(&mut Rng) -> LossWeights, pick: fn(&softslot_core::alignment::Stage1Terms) -> Var) -> f64 {
    let mut worst = 0f64;
    for seed in 0..SEEDS {
        let c = stage1_case(seed);
        let w = weights(&mut seeded_rng(seed, "gradcheck/weights"));
        worst = worst.max(check(&format!("{name} seed {seed}"), &[&c.align, &c.text], |tape| {
            let lists: Vec<&[usize]> = c.ids.iter().map(Vec::as_slice).collect();
            let inputs = Stage1Inputs {
                x_user: tape.constant(c.x_user.clone()),
                e_pos: tape.constant(c.e_pos.clone()),
                e_neg: tape.constant(c.e_neg.clone()),
                q_pos: c.encoder.encode_many(tape, &lists)?,
            };
            Ok(pick(&stage1_loss(&c.model, tape, inputs, w)?))
        }));
    }
    worst
}

pub fn only(matching: f64, item_recon: f64, text_recon: f64, rec: f64) -> LossWeights {
    LossWeights {
        matching,
        item_recon,
        text_recon,
        rec,
    }
}

pub fn matching_loss() -> f64 {
    run_stage1("L_matching", |_| only(1.0, 0.0, 0.0, 0.0), |t| t.matching.unwrap())
}

pub fn item_reconstruction_loss() -> f64 {
    run_stage1("L_item_recon", |_| only(0.0, 1.0, 0.0, 0.0), |t| t.item_recon.unwrap())
}

pub fn text_reconstruction_loss() -> f64 {
    run_stage1("L_text_recon", |_| only(0.0, 0.0, 1.0, 0.0), |t| t.text_recon.unwrap())
}

pub fn recommendation_loss() -> f64 {
    run_stage1("L_rec", |_| only(0.0, 0.0, 0.0, 1.0), |t| t.rec.unwrap())
}

pub fn weighted_stage1_objective() -> f64 {
    run_stage1(
        "stage-1 total",
        |rng| LossWeights::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)),
        |t| t.total,
    )
}

pub fn cf_objective_both_backbones() -> f64 {
    let mut worst = 0f64;
    for seed in 0..SEEDS {
        let mut rng = seeded_rng(seed, "gradcheck/cf");
        let kind = if seed % 2 == 0 { CfKind::Sasrec } else { CfKind::Gru };
        let cfg = CfConfig {
            kind,
            dim: 4,
            max_len: 5,
            blocks: 1,
            heads: 2,
            dropout: 0.0,
            ..CfConfig::default()
        };
        let items = 7;
        let model = CfModel::init(&cfg, items, seed).unwrap();
        let store = model.params.cast::<f64>();
        let n = rng.random_range(1..5);
        let seq: Vec<usize> = (0..n).map(|_| rng.random_range(0..items)).collect();
        let pos: Vec<usize> = (0..n).map(|_| rng.random_range(0..items)).collect();
        let neg: Vec<usize> = (0..n).map(|_| rng.random_range(0..items)).collect();
        worst = worst.max(check(&format!("cf {kind:?} seed {seed}"), &[&store], |tape| {
            cf_loss(&model, tape, &seq, &pos, &neg, &mut Dropout::off())
        }));
    }
    worst
}

fn tiny_lm(seed: u64) -> FrozenLm {
    let tok = LmTokenizer::build(["the quick brown fox jumps over a lazy dog , again"]);
    let cfg = LmConfig {
        dim: 4,
        layers: 1,
        heads: 2,
        ff_dim: 8,
        context: 32,
        window: 16,
        ..LmConfig::default()
    };
    FrozenLm::init(&cfg, tok, seed).unwrap()
}

fn prompt(rng: &mut Rng, lm: &FrozenLm, user_dim: usize, joint_dim: usize) -> PromptInstance {
    let v = lm.vocab_size();
    let mut sources = vec![RowSource::Token(rng.random_range(4..v)), RowSource::User];
    let mut slot_inputs = Vec::new();
    for k in 0..rng.random_range(1..4) {
        sources.push(RowSource::Token(rng.random_range(4..v)));
        sources.push(RowSource::Item(k));
        slot_inputs.push((0..joint_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    sources.push(RowSource::Token(rng.random_range(4..v)));
    let mut targets: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(4..v)).collect();
    targets.push(softslot_core::lm::END_ID);
    PromptInstance {
        sources,
        targets,
        user_input: Some((0..user_dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
        slot_inputs,
    }
}

pub fn stage2_objective_through_frozen_lm() -> f64 {
    let mut worst = 0f64;
    for seed in 0..SEEDS {
        let mut rng = seeded_rng(seed, "gradcheck/stage2");
        let lm = tiny_lm(seed);
        let (user_dim, joint_dim) = (rng.random_range(2..5), rng.random_range(2..5));
        let proj = Projector::init(user_dim, joint_dim, lm.dim(), seed).unwrap();
        let inst = prompt(&mut rng, &lm, user_dim, joint_dim);
        let p = proj.params.cast::<f64>();
        let mut l = lm.params.cast::<f64>();
        l.freeze_all();
        worst = worst.max(check(&format!("stage-2 seed {seed}"), &[&p, &l], |tape| stage2_loss(tape, &lm, &proj, &inst)));
    }
    worst
}

pub fn lm_objective_over_soft_and_token_rows() -> f64 {
    let mut worst = 0f64;
    for seed in 0..SEEDS {
        let mut rng = seeded_rng(seed, "gradcheck/lm");
        let lm = tiny_lm(seed);
        let proj = Projector::init(3, 3, lm.dim(), seed).unwrap();
        let inst = prompt(&mut rng, &lm, 3, 3);
        let mut p = proj.params.cast::<f64>();
        p.freeze_all();
        let l = lm.params.cast::<f64>();
        worst = worst.max(check(&format!("lm seed {seed}"), &[&p, &l], |tape| stage2_loss(tape, &lm, &proj, &inst)));
    }
    worst
}

/// Every objective by name.
pub const CASES: [(&str, fn() -> f64); 8] = [
    ("L_matching", matching_loss),
    ("L_item_recon", item_reconstruction_loss),
    ("L_text_recon", text_reconstruction_loss),
    ("L_rec", recommendation_loss),
    ("stage-1 total", weighted_stage1_objective),
    ("cf", cf_objective_both_backbones),
    ("stage-2", stage2_objective_through_frozen_lm),
    ("lm", lm_objective_over_soft_and_token_rows),
];
