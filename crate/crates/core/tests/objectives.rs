use minitune_core::autograd::{Tape, Tensor};
use minitune_core::objectives::{
    cross_entropy, grpo_objective, linear_cross_entropy, projected_cross_entropy, GrpoLossConfig, LossError,
    IGNORE_INDEX,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn targets(rng: &mut ChaCha8Rng, n: usize, vocab: usize, ignore_every: usize) -> Vec<i64> {
    (0..n)
        .map(
            |i| {
                if ignore_every > 0 && i % ignore_every == 0 {
                    IGNORE_INDEX
                } else {
                    rng.random_range(0..vocab as i64)
                }
            },
        )
        .collect()
}

fn ce_f64(logits: &[f32], vocab: usize, targets: &[i64]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (row, &t) in logits.chunks(vocab).zip(targets) {
        if t == IGNORE_INDEX {
            continue;
        }
        let max = row.iter().map(|&x| f64::from(x)).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (f64::from(x) - max).exp()).sum::<f64>().ln();
        total += lse - f64::from(row[t as usize]);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[test]
fn single_class_vocab_has_zero_loss() {
    let logits = Tensor::new(&[3, 1], vec![0.5, -2.0, 7.0]).unwrap();
    let out = cross_entropy(&logits, &[0, 0, 0], IGNORE_INDEX).unwrap();
    assert_eq!(out.loss.item().unwrap(), 0.0);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let logits = Tensor::zeros(&[2, 4]);
    let out = cross_entropy(&logits, &[1, 3], IGNORE_INDEX).unwrap();
    assert!((out.loss.item().unwrap() - 4f32.ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_matches_f64_logsumexp() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let logits = random(&mut rng, &[16, 50], 8.0);
        let t = targets(&mut rng, 16, 50, 5);
        let out = cross_entropy(&logits, &t, IGNORE_INDEX).unwrap();
        let want = ce_f64(logits.data(), 50, &t);
        assert!((f64::from(out.loss.item().unwrap()) - want).abs() < 1e-6 * want.abs().max(1.0));
        assert_eq!(out.num_valid_tokens, t.iter().filter(|&&x| x != IGNORE_INDEX).count());
    }
}

#[test]
fn all_ignored_gives_zero_loss_and_zero_grads() {
    let tape = Tape::new();
    let logits = tape.leaf(&Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let out = cross_entropy(&logits, &[IGNORE_INDEX, IGNORE_INDEX], IGNORE_INDEX).unwrap();
    assert_eq!(out.loss.item().unwrap(), 0.0);
    tape.backward(&out.loss).unwrap();
    assert!(tape.grad(&logits).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn target_out_of_range_is_rejected() {
    let logits = Tensor::zeros(&[2, 3]);
    assert!(matches!(
        cross_entropy(&logits, &[0, 3], IGNORE_INDEX),
        Err(LossError::TargetOutOfRange { row: 1, target: 3, vocab: 3 })
    ));
    assert!(matches!(cross_entropy(&logits, &[-5, 0], IGNORE_INDEX), Err(LossError::TargetOutOfRange { .. })));
}

#[test]
fn ignored_rows_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::new();
    let logits = tape.leaf(&random(&mut rng, &[4, 6], 2.0));
    let out = cross_entropy(&logits, &[IGNORE_INDEX, 1, IGNORE_INDEX, 5], IGNORE_INDEX).unwrap();
    tape.backward(&out.loss).unwrap();
    let g = tape.grad(&logits).unwrap();
    assert!(g.data()[0..6].iter().chain(&g.data()[12..18]).all(|&x| x == 0.0));
    // each valid row of d/dlogits sums to zero
    for row in [1, 3] {
        let s: f32 = g.data()[row * 6..(row + 1) * 6].iter().sum();
        assert!(s.abs() < 1e-6);
    }
}

struct Grads {
    loss: f32,
    hidden: Vec<f32>,
    weight: Vec<f32>,
}

fn run(hidden: &Tensor, weight: &Tensor, t: &[i64], chunk: Option<usize>) -> Grads {
    let tape = Tape::new();
    let (h, w) = (tape.leaf(hidden), tape.leaf(weight));
    let out = match chunk {
        Some(c) => linear_cross_entropy(&h, &w, t, IGNORE_INDEX, c).unwrap(),
        None => projected_cross_entropy(&h, &w, t, IGNORE_INDEX).unwrap(),
    };
    tape.backward(&out.loss).unwrap();
    Grads {
        loss: out.loss.item().unwrap(),
        hidden: tape.grad(&h).unwrap().to_vec(),
        weight: tape.grad(&w).unwrap().to_vec(),
    }
}

#[test]
fn chunked_loss_matches_full_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (n, v, chunk) in [(32, 40, 8), (33, 17, 64), (20, 100, 7), (5, 9, 1)] {
        let hidden = random(&mut rng, &[n, 12], 1.0);
        let weight = random(&mut rng, &[v, 12], 1.0);
        let t = targets(&mut rng, n, v, 3);
        let naive = run(&hidden, &weight, &t, None);
        let fused = run(&hidden, &weight, &t, Some(chunk));
        assert!((naive.loss - fused.loss).abs() <= 1e-5 * naive.loss.abs().max(1.0));
        for (a, b) in naive.hidden.iter().chain(&naive.weight).zip(fused.hidden.iter().chain(&fused.weight)) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
        }
    }
}

#[test]
fn chunked_loss_projects_only_valid_rows_and_bounds_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, v, chunk) = (64, 256, 8);
    let hidden = random(&mut rng, &[n, 16], 1.0);
    let weight = random(&mut rng, &[v, 16], 1.0);
    let t = targets(&mut rng, n, v, 2);
    let fused = linear_cross_entropy(&hidden, &weight, &t, IGNORE_INDEX, chunk).unwrap();
    assert_eq!(fused.projected_rows, 32);
    assert_eq!(fused.peak_logits_bytes, chunk * v * 4);
    let naive = projected_cross_entropy(&hidden, &weight, &t, IGNORE_INDEX).unwrap();
    assert_eq!(naive.peak_logits_bytes, n * v * 4);
    assert!(fused.loss_phase_peak_bytes < naive.loss_phase_peak_bytes);
}

#[test]
fn chunked_loss_with_all_rows_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hidden = random(&mut rng, &[4, 3], 1.0);
    let weight = random(&mut rng, &[5, 3], 1.0);
    let g = run(&hidden, &weight, &[IGNORE_INDEX; 4], Some(2));
    assert_eq!(g.loss, 0.0);
    assert!(g.hidden.iter().chain(&g.weight).all(|&x| x == 0.0));
    assert!(matches!(linear_cross_entropy(&hidden, &weight, &[0; 4], IGNORE_INDEX, 0), Err(LossError::ZeroChunkSize)));
}

#[test]
fn grpo_ratio_one_is_negative_mean_advantage() {
    let lp = Tensor::new(&[2, 2], vec![-1.0, -2.0, -0.5, -0.1]).unwrap();
    let loss =
        grpo_objective(&lp, lp.data(), &[1.0, -0.5], &[true, true, true, false], &GrpoLossConfig::default()).unwrap();
    // tokens: A = 1, 1, -0.5 -> -(1 + 1 - 0.5) / 3
    assert!((loss.item().unwrap() + 0.5).abs() < 1e-7);
}

#[test]
fn grpo_clips_the_ratio() {
    let cfg = GrpoLossConfig::default();
    let behavior = [0.0f32];
    // r = e^0.5 > 1.2 with positive advantage: clipped at 1.2, no gradient
    let tape = Tape::new();
    let lp = tape.leaf(&Tensor::new(&[1, 1], vec![0.5]).unwrap());
    let loss = grpo_objective(&lp, &behavior, &[2.0], &[true], &cfg).unwrap();
    assert!((loss.item().unwrap() + 2.4).abs() < 1e-6);
    tape.backward(&loss).unwrap();
    assert_eq!(tape.grad(&lp).unwrap().data()[0], 0.0);

    // r = e^0.5 with negative advantage: the unclipped term is smaller
    let tape = Tape::new();
    let lp = tape.leaf(&Tensor::new(&[1, 1], vec![0.5]).unwrap());
    let loss = grpo_objective(&lp, &behavior, &[-1.0], &[true], &cfg).unwrap();
    let r = 0.5f32.exp();
    assert!((loss.item().unwrap() - r).abs() < 1e-6);
    tape.backward(&loss).unwrap();
    assert!((tape.grad(&lp).unwrap().data()[0] - r).abs() < 1e-6);
}

#[test]
fn grpo_rejects_empty_mask_and_bad_shapes() {
    let lp = Tensor::zeros(&[1, 2]);
    let cfg = GrpoLossConfig::default();
    assert!(matches!(grpo_objective(&lp, &[0.0, 0.0], &[1.0], &[false, false], &cfg), Err(LossError::EmptyMask)));
    assert!(matches!(grpo_objective(&lp, &[0.0], &[1.0], &[true, true], &cfg), Err(LossError::Shape(_))));
}
