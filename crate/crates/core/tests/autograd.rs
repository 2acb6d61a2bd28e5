use std::cell::Cell;
use std::rc::Rc;

use minitune_core::autograd::gradcheck::{check_parameters, GradCheckConfig};
use minitune_core::autograd::ops;
use minitune_core::autograd::{checkpoint, memory_report, Category, Parameter, Phase, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random_param(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Parameter {
    let n = shape.iter().product();
    Parameter::new(name, shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn identity_matmul_and_uniform_softmax() {
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert!(ops::matmul(&eye, &x).unwrap().bits_eq(&x));
    let s = ops::softmax(&t(&[3], &[0.0, 0.0, 0.0])).unwrap();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let err = ops::matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    assert_eq!(err, TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
    assert!(err.to_string().contains("matmul") && err.to_string().contains("[2, 3]"));
    assert!(ops::add(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2])).is_err());
}

#[test]
fn linear_and_quadratic_gradients() {
    let theta = Parameter::new("theta", &[3], vec![0.5, -1.0, 2.0]).unwrap();
    let tape = Tape::new();
    let loss = ops::sum_all(&theta.var(&tape)).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(theta.grad().unwrap().to_vec(), vec![1.0, 1.0, 1.0]);

    let theta = Parameter::new("theta", &[2], vec![1.0, 2.0]).unwrap();
    let tape = Tape::new();
    let v = theta.var(&tape);
    let loss = ops::sum_all(&ops::mul(&v, &v).unwrap()).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(theta.grad().unwrap().to_vec(), vec![2.0, 4.0]);
}

#[test]
fn sum_of_product_gradient_is_other_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_param("a", &[4, 3], &mut rng);
    let b = random_param("b", &[4, 3], &mut rng);
    let tape = Tape::new();
    let loss = ops::sum_all(&ops::mul(&a.var(&tape), &b.var(&tape)).unwrap()).unwrap();
    tape.backward(&loss).unwrap();
    assert!(a.grad().unwrap().bits_eq(&b.value()));
}

#[test]
fn backward_errors() {
    let p = Parameter::new("p", &[2], vec![1.0, 2.0]).unwrap();
    let tape = Tape::new();
    let out = ops::mul_scalar(&p.var(&tape), 2.0).unwrap();
    assert_eq!(tape.backward(&out).unwrap_err(), TensorError::NonScalarLoss { shape: vec![2] });
    let loss = ops::sum_all(&out).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(tape.backward(&loss).unwrap_err(), TensorError::BackwardTwice);

    tape.reset();
    assert_eq!(ops::sum_all(&out).unwrap_err(), TensorError::StaleNode { op: "sum_all" });
    let loss = ops::sum_all(&p.var(&tape)).unwrap();
    tape.backward(&loss).unwrap();

    let other = Tape::new();
    let x = tape.leaf(&Tensor::ones(&[2]));
    let y = other.leaf(&Tensor::ones(&[2]));
    assert_eq!(ops::add(&x, &y).unwrap_err(), TensorError::MixedTapes { op: "add" });
    assert_eq!(Tape::new().backward(&Tensor::scalar(1.0)).unwrap_err(), TensorError::NotOnTape);
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = random_param("w1", &[5, 4], &mut rng);
        let w2 = random_param("w2", &[3, 5], &mut rng);
        let x = Tensor::new(&[2, 4], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let params = [w1.clone(), w2.clone()];
        let report = check_parameters(
            &params,
            |tape| {
                let h = ops::silu(&ops::matmul_t(&x, &w1.var(tape))?)?;
                let out = ops::matmul_t(&h, &w2.var(tape))?;
                ops::mean_all(&ops::mul(&out, &out)?)
            },
            &GradCheckConfig { seed, ..Default::default() },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.entries_checked, 35);
    }
}

#[test]
fn hook_fires_once_for_shared_parameter_and_sees_summed_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random_param("w", &[3, 3], &mut rng);
    let x = Tensor::new(&[2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let forward = |tape: &Tape| {
        let h = ops::matmul_t(&x, &w.var(tape)).unwrap();
        let h2 = ops::matmul_t(&h, &w.var(tape)).unwrap();
        ops::sum_all(&ops::mul(&h2, &h).unwrap()).unwrap()
    };

    let tape = Tape::new();
    tape.backward(&forward(&tape)).unwrap();
    let plain = w.take_grad().unwrap();

    let calls = Rc::new(Cell::new(0));
    let seen = Rc::new(std::cell::RefCell::new(None));
    let (c, s) = (calls.clone(), seen.clone());
    w.register_post_accumulate_grad_hook(move |p| {
        c.set(c.get() + 1);
        *s.borrow_mut() = p.grad();
    })
    .unwrap();
    let tape = Tape::new();
    tape.backward(&forward(&tape)).unwrap();
    assert_eq!(calls.get(), 1);
    assert!(seen.borrow().as_ref().unwrap().bits_eq(&plain));
    assert!(w.grad().unwrap().bits_eq(&plain));

    let err = w.register_post_accumulate_grad_hook(|_| {}).unwrap_err();
    assert_eq!(err, TensorError::HookAlreadyRegistered { name: "w".into() });
}

#[test]
fn hook_that_clears_grad_leaves_no_grad() {
    let p = Parameter::new("p", &[4], vec![1.0; 4]).unwrap();
    p.register_post_accumulate_grad_hook(|p| p.zero_grad()).unwrap();
    let tape = Tape::new();
    tape.backward(&ops::sum_all(&p.var(&tape)).unwrap()).unwrap();
    assert!(!p.has_grad());
    assert_eq!(memory_report().category_live(Category::Gradient), 0);
}

#[test]
fn grad_accumulates_across_backward_calls() {
    let p = Parameter::new("p", &[2], vec![1.0, 2.0]).unwrap();
    for _ in 0..3 {
        let tape = Tape::new();
        tape.backward(&ops::sum_all(&p.var(&tape)).unwrap()).unwrap();
    }
    assert_eq!(p.grad().unwrap().to_vec(), vec![3.0, 3.0]);
}

#[test]
fn frozen_parameters_get_no_grad() {
    let frozen = Parameter::frozen("f", &[2], vec![1.0, 2.0]).unwrap();
    let live = Parameter::new("l", &[2], vec![3.0, 4.0]).unwrap();
    let tape = Tape::new();
    let loss = ops::sum_all(&ops::mul(&frozen.var(&tape), &live.var(&tape)).unwrap()).unwrap();
    tape.backward(&loss).unwrap();
    assert!(!frozen.has_grad());
    assert_eq!(live.grad().unwrap().to_vec(), vec![1.0, 2.0]);
}

fn block(tape: &Tape, x: &Tensor, w1: &Parameter, w2: &Parameter) -> Result<Tensor, TensorError> {
    let h = ops::silu(&ops::matmul_t(x, &w1.var(tape))?)?;
    let h = ops::softmax(&ops::matmul_t(&h, &w2.var(tape))?)?;
    ops::add(&h, x)
}

#[test]
fn checkpointed_identity_passes_gradient_through() {
    let tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]));
    let y = checkpoint(&tape, std::slice::from_ref(&x), |_, xs| Ok(xs[0].clone())).unwrap();
    assert!(y.bits_eq(&x));
    let w = t(&[3], &[2.0, 3.0, 4.0]);
    tape.backward(&ops::sum_all(&ops::mul(&y, &w).unwrap()).unwrap()).unwrap();
    assert!(tape.grad(&x).unwrap().bits_eq(&w));
}

#[test]
fn checkpointed_blocks_match_plain_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layers: Vec<(Parameter, Parameter)> = (0..3)
        .map(|i| {
            (random_param(&format!("{i}.w1"), &[6, 4], &mut rng), random_param(&format!("{i}.w2"), &[4, 6], &mut rng))
        })
        .collect();
    let x0 = Tensor::new(&[3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

    let run = |ac: bool| -> (Vec<Tensor>, Tensor, usize) {
        let tape = Tape::new();
        let x_in = tape.leaf(&x0);
        let mut x = x_in.clone();
        let before = memory_report().live_bytes;
        let mut fwd_peak = 0;
        for (w1, w2) in &layers {
            x = if ac {
                let (w1, w2) = (w1.clone(), w2.clone());
                checkpoint(&tape, &[x], move |tape, xs| block(tape, &xs[0], &w1, &w2)).unwrap()
            } else {
                block(&tape, &x, w1, w2).unwrap()
            };
            fwd_peak = fwd_peak.max(memory_report().live_bytes - before);
        }
        let loss = ops::sum_all(&ops::mul(&x, &x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        let grads = layers.iter().flat_map(|(a, b)| [a.take_grad().unwrap(), b.take_grad().unwrap()]).collect();
        (grads, tape.grad(&x_in).unwrap(), fwd_peak)
    };
    let (plain, plain_x, plain_peak) = run(false);
    let (ac, ac_x, ac_peak) = run(true);
    for (a, b) in plain.iter().zip(&ac) {
        assert!(a.bits_eq(b));
    }
    assert!(plain_x.bits_eq(&ac_x));
    assert!(ac_peak < plain_peak, "ac {ac_peak} vs plain {plain_peak}");
}

#[test]
fn checkpoint_rejects_parameter_allocation() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::ones(&[2]));
    let err = checkpoint(&tape, &[x], |tape, xs| {
        let p = Parameter::new("fresh", &[2], vec![1.0, 1.0])?;
        ops::mul(&xs[0], &p.var(tape))
    })
    .unwrap_err();
    assert_eq!(err, TensorError::ReplayAllocatedParameters);
}

#[test]
fn checkpoint_detects_nondeterministic_replay() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::ones(&[2]));
    let counter = Rc::new(Cell::new(0.0f32));
    let c = counter.clone();
    let y = checkpoint(&tape, &[x], move |_, xs| {
        c.set(c.get() + 1.0);
        ops::mul_scalar(&xs[0], c.get())
    })
    .unwrap();
    let err = tape.backward(&ops::sum_all(&y).unwrap()).unwrap_err();
    assert_eq!(err, TensorError::NonDeterministicReplay);
}

#[test]
fn checkpoint_detects_parameter_update_before_replay() {
    let w = Parameter::new("w", &[2], vec![1.0, 2.0]).unwrap();
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::ones(&[2]));
    let wc = w.clone();
    let y = checkpoint(&tape, &[x], move |tape, xs| ops::mul(&xs[0], &wc.var(tape))).unwrap();
    w.update(|v| v[0] = 5.0);
    let err = tape.backward(&ops::sum_all(&y).unwrap()).unwrap_err();
    assert_eq!(err, TensorError::ParameterModifiedBeforeReplay { name: "w".into() });
}

#[test]
fn checkpoint_hooks_fire_once() {
    let w = Parameter::new("w", &[2], vec![1.0, 2.0]).unwrap();
    let calls = Rc::new(Cell::new(0));
    let c = calls.clone();
    w.register_post_accumulate_grad_hook(move |_| c.set(c.get() + 1)).unwrap();
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::ones(&[2]));
    let wc = w.clone();
    let y = checkpoint(&tape, &[x], move |tape, xs| ops::mul(&xs[0], &wc.var(tape))).unwrap();
    // also used outside the segment
    let z = ops::mul(&y, &w.var(&tape)).unwrap();
    tape.backward(&ops::sum_all(&z).unwrap()).unwrap();
    assert_eq!(calls.get(), 1);
    // d/dw sum(w * w) = 2w
    assert_eq!(w.grad().unwrap().to_vec(), vec![2.0, 4.0]);
}

#[test]
fn memory_returns_to_baseline_after_reset() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random_param("w", &[8, 8], &mut rng);
    let x = Tensor::ones(&[4, 8]);
    let baseline = memory_report().live_bytes;
    let tape = Tape::new();
    {
        let h = ops::silu(&ops::matmul_t(&x, &w.var(&tape)).unwrap()).unwrap();
        let loss = ops::mean_all(&h).unwrap();
        tape.backward(&loss).unwrap();
    }
    w.zero_grad();
    assert!(memory_report().phase_peak(Phase::Backward) > 0);
    tape.reset();
    assert_eq!(memory_report().live_bytes, baseline);
}

#[test]
fn intermediate_buffers_released_by_backward() {
    let w = Parameter::new("w", &[16], vec![0.5; 16]).unwrap();
    let tape = Tape::new();
    let baseline = memory_report().live_bytes;
    let loss = {
        let mut h = w.var(&tape);
        for _ in 0..5 {
            h = ops::exp(&ops::mul_scalar(&h, 0.5).unwrap()).unwrap();
        }
        ops::sum_all(&h).unwrap()
    };
    let held = memory_report().live_bytes - baseline;
    tape.backward(&loss).unwrap();
    let after = memory_report().live_bytes - baseline;
    // loss + w's gradient remain, saved activations are gone
    assert_eq!(after, 4 + 64);
    assert!(held > after);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hooks_fire_exactly_once_for_any_fan_out(uses in proptest::collection::vec(0usize..3, 1..12), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Parameter> = (0..3).map(|i| random_param(&format!("p{i}"), &[4], &mut rng)).collect();
        let counts: Vec<Rc<Cell<u32>>> = params.iter().map(|_| Rc::new(Cell::new(0))).collect();
        for (p, c) in params.iter().zip(&counts) {
            let c = c.clone();
            p.register_post_accumulate_grad_hook(move |_| c.set(c.get() + 1)).unwrap();
        }
        let tape = Tape::new();
        let mut acc = params[uses[0]].var(&tape);
        for &u in &uses[1..] {
            acc = ops::add(&ops::mul(&acc, &params[u].var(&tape)).unwrap(), &params[u].var(&tape)).unwrap();
        }
        tape.backward(&ops::sum_all(&acc).unwrap()).unwrap();
        for (i, c) in counts.iter().enumerate() {
            let expected = u32::from(uses.contains(&i));
            prop_assert_eq!(c.get(), expected);
        }
    }
}
