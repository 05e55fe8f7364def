use proptest::prelude::*;
use softslot_numerics::{
    adam_step, finite_diff_grad, seeded_rng, value_and_grad, AdamConfig, AdamState, NumericsError,
    ParamStore, Tape, Tensor, Var,
};

fn scalar_store(name: &str, v: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert(name, Tensor::scalar(v)).unwrap();
    s
}

#[test]
fn square_at_three() {
    let s = scalar_store("x", 3.0);
    let f = |t: &Tape<'_, f64>| -> Result<Var, NumericsError> {
        let x = t.param("x")?;
        t.mul(x, x)
    };
    let (v, g) = value_and_grad(&[&s], f).unwrap();
    assert_eq!(v, 9.0);
    assert_eq!(g["x"].item(), 6.0);

    let fd = finite_diff_grad(&[&s], f, 1e-4).unwrap();
    assert!((fd["x"].item() - 6.0).abs() < 1e-7);
}

#[test]
fn sigmoid_slope_at_zero() {
    let s = scalar_store("x", 0.0);
    let fd = finite_diff_grad(
        &[&s],
        |t: &Tape<'_, f64>| -> Result<Var, NumericsError> { t.sigmoid(t.param("x")?) },
        1e-5,
    )
    .unwrap();
    assert!((fd["x"].item() - 0.25).abs() < 1e-8);
}

#[test]
fn frozen_params_get_no_gradient_entry() {
    let mut s = scalar_store("x", 2.0);
    s.insert("w", Tensor::scalar(5.0)).unwrap();
    s.freeze("w").unwrap();
    let (_, g) = value_and_grad(&[&s], |t: &Tape<'_, f64>| -> Result<Var, NumericsError> {
        t.mul(t.param("x")?, t.param("w")?)
    })
    .unwrap();
    assert_eq!(g.len(), 1);
    assert_eq!(g["x"].item(), 5.0);
}

#[test]
fn non_finite_loss_is_reported() {
    let s = scalar_store("x", f64::INFINITY);
    let err = value_and_grad(&[&s], |t: &Tape<'_, f64>| -> Result<Var, NumericsError> {
        t.sum(t.param("x")?)
    })
    .unwrap_err();
    assert!(matches!(err, NumericsError::NonFinite { .. }));
}

#[test]
fn shape_errors_name_the_primitive() {
    let t = Tape::<f32>::detached();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b).unwrap_err() {
        NumericsError::ShapeMismatch { op, .. } => assert_eq!(op, "matmul"),
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn nondeterministic_oracle_rejected() {
    use std::cell::Cell;
    let s = scalar_store("x", 1.0);
    let calls = Cell::new(0.0);
    let err = finite_diff_grad(
        &[&s],
        |t: &Tape<'_, f64>| -> Result<Var, NumericsError> {
            calls.set(calls.get() + 1.0);
            let c = t.constant(Tensor::scalar(calls.get()));
            t.mul(t.param("x")?, c)
        },
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, NumericsError::OracleInvalid(_)));
}

#[test]
fn gradient_wrt_inputs() {
    let t = Tape::<f64>::detached();
    let x = t.input(Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
    let y = t.mul(x, x).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn adam_never_touches_frozen_entries() {
    let mut rng = seeded_rng(3, "adam");
    let mut s = ParamStore::<f32>::new();
    s.insert("a", Tensor::randn(&[4, 4], 1.0, &mut rng)).unwrap();
    s.insert("b", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
    s.freeze("b").unwrap();
    let before = s.get("b").unwrap().clone();
    let mut state = AdamState::new(AdamConfig::default());
    for _ in 0..5 {
        let (_, g) = value_and_grad(&[&s], |t: &Tape<'_, f32>| -> Result<Var, NumericsError> {
            let y = t.add_row(t.param("a")?, t.param("b")?)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        })
        .unwrap();
        adam_step(&mut s, &g, &mut state, 0.01).unwrap();
    }
    let after = s.get("b").unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(after));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = seeded_rng(seed, "softmax");
        let t = Tape::<f32>::detached();
        let x = t.constant(Tensor::randn(&[rows, cols], 5.0, &mut rng));
        let y = t.value(t.softmax_rows(x).unwrap());
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient(cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = seeded_rng(seed, "softmax-grad");
        let mut s = ParamStore::<f64>::new();
        s.insert("x", Tensor::randn(&[1, cols], 3.0, &mut rng)).unwrap();
        let (_, g) = value_and_grad(&[&s], |t: &Tape<'_, f64>| -> Result<Var, NumericsError> {
            let y = t.softmax_rows(t.param("x")?)?;
            t.sum(y)
        }).unwrap();
        prop_assert!(g["x"].data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn evaluation_is_deterministic(seed in 0u64..1000) {
        let mut rng = seeded_rng(seed, "det");
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::randn(&[3, 5], 1.0, &mut rng)).unwrap();
        let run = || value_and_grad(&[&s], |t: &Tape<'_, f32>| -> Result<Var, NumericsError> {
            let y = t.tanh(t.matmul_t(t.param("a")?, t.param("a")?)?)?;
            t.mean(y)
        }).unwrap();
        let (v1, g1) = run();
        let (v2, g2) = run();
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        prop_assert_eq!(g1, g2);
    }
}
