use std::collections::HashSet;

use minitune_core::autograd::meter::{phase_scope, reset_peaks};
use minitune_core::autograd::{memory_report, ops, Parameter, Phase, RotaryTable, Tape, Tensor};
use minitune_core::model::{
    attention_mask, build_decoder, build_lora_decoder, AttentionContext, DecoderConfig, Linear, LoRALinear, LoraConfig,
    LoraTarget, ModelError, MultiHeadAttention, Projection, TokenBatch, TransformerDecoder,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> DecoderConfig {
    DecoderConfig::new(32, 2, 4, 2, 16, 24).with_seed(7)
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

fn logits(model: &TransformerDecoder, batch: &TokenBatch) -> Tensor {
    model.forward(&Tape::no_grad(), batch, false).unwrap()
}

fn randomize(p: &Parameter, rng: &mut ChaCha8Rng, scale: f32) {
    p.update(|v| v.iter_mut().for_each(|x| *x = rng.random_range(-scale..scale)));
}

#[test]
fn tiny_decoder_shapes() {
    let cfg = DecoderConfig::new(16, 1, 2, 1, 8, 8);
    let model = build_decoder(&cfg).unwrap();
    assert_eq!(model.layers().len(), 1);
    assert_eq!(model.layers()[0].attn().head_dim(), 4);
    assert_eq!(cfg.rope_base, 500_000.0);
    assert_eq!(cfg.norm_eps, 1e-5);
    let out = logits(&model, &TokenBatch::single(&[3]).unwrap());
    assert_eq!(out.shape(), &[1, 1, 16]);
}

#[test]
fn parameter_count_matches_shape_sum() {
    for (cfg, tie) in [(small_cfg(), false), (DecoderConfig::new(50, 3, 6, 3, 24, 10), true)] {
        let mut cfg = cfg;
        cfg.tie_word_embeddings = tie;
        let model = build_decoder(&cfg).unwrap();
        // enumerate module shapes independently of the builder
        let (v, e, h, kv) = (cfg.vocab_size, cfg.embed_dim, cfg.num_heads, cfg.num_kv_heads);
        let d = e / h;
        let hidden = (8 * e).div_ceil(3).div_ceil(8) * 8;
        let mut shapes: Vec<Vec<usize>> = vec![vec![v, e]];
        for _ in 0..cfg.num_layers {
            shapes.extend([
                vec![e],
                vec![h * d, e],
                vec![kv * d, e],
                vec![kv * d, e],
                vec![e, h * d],
                vec![e],
                vec![hidden, e],
                vec![e, hidden],
                vec![hidden, e],
            ]);
        }
        shapes.push(vec![e]);
        if !tie {
            shapes.push(vec![v, e]);
        }
        let oracle: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(model.num_parameters(), oracle);
        assert_eq!(cfg.num_parameters(), oracle);
        let mut actual: Vec<Vec<usize>> = model.parameters().iter().map(Parameter::shape).collect();
        actual.sort();
        shapes.sort();
        assert_eq!(actual, shapes);
    }
}

#[test]
fn default_intermediate_dim_rounds_up_to_eight() {
    assert_eq!(DecoderConfig::new(8, 1, 2, 2, 64, 8).mlp_dim(), 176);
    assert_eq!(DecoderConfig::new(8, 1, 2, 2, 16, 8).mlp_dim(), 48);
    assert_eq!(DecoderConfig::new(8, 1, 2, 2, 12, 8).mlp_dim(), 32);
}

#[test]
fn parameter_names_are_unique_and_dotted() {
    let lora = LoraConfig::new(2, 4.0, LoraTarget::ALL);
    for model in [build_decoder(&small_cfg()).unwrap(), build_lora_decoder(&small_cfg(), &lora).unwrap()] {
        let names: Vec<String> = model.parameters().iter().map(|p| p.name().to_string()).collect();
        let unique: HashSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.contains(&"layers.0.attn.q_proj.weight".to_string()));
        assert!(names.contains(&"layers.1.mlp.w3.weight".to_string()));
        assert!(names.contains(&"layers.1.sa_norm.scale".to_string()));
        assert!(names.contains(&"output.weight".to_string()));
    }
}

#[test]
fn builder_rejects_bad_dimensions() {
    let err = build_decoder(&DecoderConfig::new(16, 1, 3, 1, 8, 8)).unwrap_err();
    assert!(err.to_string().contains("embed_dim 8") && err.to_string().contains("num_heads 3"), "{err}");
    let err = build_decoder(&DecoderConfig::new(16, 1, 4, 3, 8, 8)).unwrap_err();
    assert!(err.to_string().contains("num_kv_heads 3"), "{err}");
    assert!(build_decoder(&DecoderConfig::new(16, 1, 2, 1, 6, 8)).is_err(), "odd head_dim");
    let lora = LoraConfig::new(20, 16.0, [LoraTarget::QProj]);
    assert!(build_lora_decoder(&DecoderConfig::new(16, 1, 2, 1, 8, 8), &lora).is_err());
    assert!(build_lora_decoder(&small_cfg(), &LoraConfig::new(2, 1.0, [])).is_err());
}

#[test]
fn forward_rejects_bad_input() {
    let model = build_decoder(&small_cfg()).unwrap();
    let long = TokenBatch::single(&[1; 25]).unwrap();
    assert_eq!(
        model.forward(&Tape::no_grad(), &long, false).unwrap_err(),
        ModelError::SequenceTooLong { len: 25, max: 24 }
    );
    let bad = TokenBatch::single(&[1, 32]).unwrap();
    assert_eq!(
        model.forward(&Tape::no_grad(), &bad, false).unwrap_err(),
        ModelError::TokenOutOfRange { token: 32, vocab: 32 }
    );
}

#[test]
fn causal_prefix_outputs_are_unchanged() {
    let model = build_decoder(&small_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = random_tokens(&mut rng, 12, 32);
    let full = logits(&model, &TokenBatch::single(&tokens).unwrap());
    for p in 1..12 {
        let prefix = logits(&model, &TokenBatch::single(&tokens[..p]).unwrap());
        assert!(
            prefix.data().iter().zip(&full.data()[..p * 32]).all(|(a, b)| a.to_bits() == b.to_bits()),
            "prefix {p}"
        );
    }
}

#[test]
fn batch_permutation_permutes_outputs() {
    let model = build_decoder(&small_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<usize>> = (0..3).map(|_| random_tokens(&mut rng, 6, 32)).collect();
    let batch = |order: &[usize]| TokenBatch::new(3, 6, order.iter().flat_map(|&i| rows[i].clone()).collect()).unwrap();
    let a = logits(&model, &batch(&[0, 1, 2]));
    let b = logits(&model, &batch(&[2, 0, 1]));
    let row = |t: &Tensor, i: usize| t.data()[i * 6 * 32..(i + 1) * 6 * 32].to_vec();
    assert_eq!(row(&a, 0), row(&b, 1));
    assert_eq!(row(&a, 1), row(&b, 2));
    assert_eq!(row(&a, 2), row(&b, 0));
}

#[test]
fn hidden_states_skip_output_projection() {
    let model = build_decoder(&small_cfg()).unwrap();
    let batch = TokenBatch::single(&[1, 2, 3]).unwrap();
    let h = model.forward(&Tape::no_grad(), &batch, true).unwrap();
    assert_eq!(h.shape(), &[1, 3, 16]);
    let projected = ops::matmul_t(&h, &model.output_weight().value()).unwrap();
    assert!(projected.bits_eq(&logits(&model, &batch)));
}

#[test]
fn tied_embeddings_share_one_table() {
    let mut cfg = small_cfg();
    cfg.tie_word_embeddings = true;
    let model = build_decoder(&cfg).unwrap();
    assert!(model.is_tied());
    assert_eq!(model.output_weight().name(), "tok_embeddings.weight");
    let tape = Tape::new();
    let out = model.forward(&tape, &TokenBatch::single(&[1, 2]).unwrap(), false).unwrap();
    tape.backward(&ops::mean_all(&out).unwrap()).unwrap();
    assert!(model.output_weight().has_grad());
}

#[test]
fn rope_properties() {
    let table = RotaryTable::new(8, 64, 10_000.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::new(&[1, 1, 1, 8], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    assert!(ops::rope(&x, &[0], &table).unwrap().bits_eq(&x));

    let xs = Tensor::new(&[1, 5, 2, 8], (0..80).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let rotated = ops::rope(&xs, &[0, 3, 9, 17, 40], &table).unwrap();
    for (a, b) in xs.data().chunks(2).zip(rotated.data().chunks(2)) {
        let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
        assert!((na - nb).abs() < 1e-6);
    }

    // <R_i q, R_j k> depends only on i - j
    let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let at = |v: &[f32], p: usize| {
        ops::rope(&Tensor::new(&[1, 1, 1, 8], v.to_vec()).unwrap(), &[p], &table).unwrap().to_vec()
    };
    let dot = |i: usize, j: usize| at(&q, i).iter().zip(at(&k, j)).map(|(a, b)| a * b).sum::<f32>();
    for shift in 0..6 {
        let reference = dot(shift, 0);
        for base in 1..20 {
            assert!((dot(base + shift, base) - reference).abs() < 1e-5, "shift {shift} base {base}");
        }
    }
    assert!(RotaryTable::new(7, 4, 10_000.0).is_err());
}

#[test]
fn rms_norm_properties() {
    let ones = Tensor::ones(&[2, 6]);
    let w = Tensor::ones(&[6]);
    let out = ops::rms_norm(&ones, &w, 1e-12).unwrap();
    assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(&[3, 6], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::new(&[6], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let a = ops::rms_norm(&x, &w, 1e-12).unwrap();
    let b = ops::rms_norm(&ops::mul_scalar(&x, 10.0).unwrap(), &w, 1e-12).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-4);
    }
    assert!(ops::rms_norm(&x, &w, 0.0).is_err());
}

#[test]
fn lora_scaling_and_trainable_count() {
    let cfg = small_cfg();
    let lora = LoraConfig::new(2, 16.0, [LoraTarget::QProj, LoraTarget::VProj, LoraTarget::OutputProj]);
    let model = build_lora_decoder(&cfg, &lora).unwrap();
    let (e, kv_out) = (cfg.embed_dim, cfg.num_kv_heads * cfg.head_dim());
    let per_layer = 2 * (e + e) + 2 * (e + kv_out) + 2 * (e + e);
    assert_eq!(model.num_trainable_parameters(), per_layer * cfg.num_layers);
    assert!(model.trainable_parameters().iter().all(|p| p.name().contains(".lora_")));
    assert_eq!(LoraConfig::new(16, 16.0, [LoraTarget::QProj]).scaling(), 1.0);

    let base = Parameter::new("w.weight", &[32, 32], vec![0.1; 1024]).unwrap();
    assert_eq!(LoRALinear::init(base, 16, 16.0, 0).unwrap().scaling(), 1.0);
}

#[test]
fn lora_decoder_at_init_equals_dense_bitwise() {
    let cfg = small_cfg();
    let dense = build_decoder(&cfg).unwrap();
    let lora = build_lora_decoder(&cfg, &LoraConfig::new(4, 8.0, LoraTarget::ALL)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = TokenBatch::new(2, 10, random_tokens(&mut rng, 20, 32)).unwrap();
    assert!(logits(&dense, &batch).bits_eq(&logits(&lora, &batch)));
}

#[test]
fn merge_lora_matches_adapter_forward() {
    let cfg = small_cfg();
    let lora = build_lora_decoder(&cfg, &LoraConfig::new(4, 8.0, LoraTarget::ALL)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = TokenBatch::new(2, 8, random_tokens(&mut rng, 16, 32)).unwrap();

    // zero adapters: merged weights are the base weights bit for bit
    let merged = lora.merge_lora().unwrap();
    assert!(!merged.has_lora());
    let base = build_decoder(&cfg).unwrap();
    for (a, b) in merged.parameters().iter().zip(base.parameters()) {
        assert_eq!(a.name(), b.name());
        assert!(a.value().bits_eq(&b.value()));
    }

    for p in lora.trainable_parameters() {
        randomize(&p, &mut rng, 0.2);
    }
    let merged = lora.merge_lora().unwrap();
    let (a, b) = (logits(&lora, &batch), logits(&merged, &batch));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }

    // subtracting the low-rank update recovers the base
    for layer in lora.layers() {
        for (_, proj) in layer.attn().projections() {
            let Projection::Lora(l) = proj else { unreachable!() };
            let (out, inp, r) = (l.base().shape()[0], l.base().shape()[1], l.rank());
            let (a, b) = (l.lora_a().to_vec(), l.lora_b().to_vec());
            let merged = l.merged_weight();
            for o in 0..out {
                for i in 0..inp {
                    let delta: f32 = (0..r).map(|k| b[o * r + k] * a[k * inp + i]).sum();
                    let recovered = merged[o * inp + i] - l.scaling() * delta;
                    assert!((recovered - l.base().to_vec()[o * inp + i]).abs() < 1e-6);
                }
            }
        }
    }
}

fn ctx(batch: usize, seq: usize, doc_ids: Option<&[usize]>) -> AttentionContext {
    AttentionContext {
        batch,
        seq_len: seq,
        positions: std::rc::Rc::new((0..batch).flat_map(|_| 0..seq).collect()),
        mask: attention_mask(batch, seq, doc_ids),
    }
}

fn dense_proj(rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize) -> Projection {
    let w = Parameter::new(name, &[out, inp], (0..out * inp).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    Linear::new(w).unwrap().into()
}

#[test]
fn equal_head_counts_match_plain_multi_head_attention() {
    let (e, h, d, s) = (8, 2, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rope = RotaryTable::new(d, 16, 10_000.0).unwrap();
    let projs: Vec<Projection> = ["q", "k", "v", "o"].iter().map(|n| dense_proj(&mut rng, n, e, e)).collect();
    let attn = MultiHeadAttention::new(
        e,
        h,
        h,
        d,
        projs[0].clone(),
        projs[1].clone(),
        projs[2].clone(),
        projs[3].clone(),
        rope.clone(),
        0.0,
    )
    .unwrap();
    let x = Tensor::new(&[1, s, e], (0..s * e).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let tape = Tape::no_grad();
    let c = ctx(1, s, None);
    let out = attn.forward(&tape, &x, &c).unwrap();

    // per-head reference
    let pos: Vec<usize> = (0..s).collect();
    let q =
        ops::rope(&ops::reshape(&projs[0].forward(&tape, &x).unwrap(), &[1, s, h, d]).unwrap(), &pos, &rope).unwrap();
    let k =
        ops::rope(&ops::reshape(&projs[1].forward(&tape, &x).unwrap(), &[1, s, h, d]).unwrap(), &pos, &rope).unwrap();
    let v = ops::reshape(&projs[2].forward(&tape, &x).unwrap(), &[1, s, h, d]).unwrap();
    let mask = ops::reshape(&c.mask, &[s, s]).unwrap();
    let mut heads = Vec::new();
    for head in 0..h {
        let take = |t: &Tensor| ops::reshape(&ops::slice(t, 2, head, head + 1).unwrap(), &[s, d]).unwrap();
        let scores = ops::mul_scalar(&ops::matmul_t(&take(&q), &take(&k)).unwrap(), 1.0 / (d as f32).sqrt()).unwrap();
        let probs = ops::softmax(&ops::add(&scores, &mask).unwrap()).unwrap();
        heads.push(ops::matmul(&probs, &take(&v)).unwrap());
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let cat = ops::reshape(&ops::concat(&refs, 1).unwrap(), &[1, s, e]).unwrap();
    let expected = projs[3].forward(&tape, &cat).unwrap();
    assert!(out.bits_eq(&expected));
}

#[test]
fn grouped_query_equals_mha_with_repeated_kv_weights() {
    let (e, h, kv, d, s) = (8, 4, 2, 2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rope = RotaryTable::new(d, 16, 10_000.0).unwrap();
    let q = dense_proj(&mut rng, "q", h * d, e);
    let k = dense_proj(&mut rng, "k", kv * d, e);
    let v = dense_proj(&mut rng, "v", kv * d, e);
    let o = dense_proj(&mut rng, "o", e, h * d);
    let gqa =
        MultiHeadAttention::new(e, h, kv, d, q.clone(), k.clone(), v.clone(), o.clone(), rope.clone(), 0.0).unwrap();
    let repeat = |p: &Projection| {
        let w = p.parameters()[0].to_vec();
        let data: Vec<f32> = (0..h).flat_map(|head| w[(head / 2) * d * e..(head / 2 + 1) * d * e].to_vec()).collect();
        Linear::new(Parameter::new("r", &[h * d, e], data).unwrap()).unwrap().into()
    };
    let mha = MultiHeadAttention::new(e, h, h, d, q, repeat(&k), repeat(&v), o, rope, 0.0).unwrap();
    let x = Tensor::new(&[2, s, e], (0..2 * s * e).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let c = ctx(2, s, None);
    let tape = Tape::no_grad();
    assert!(gqa.forward(&tape, &x, &c).unwrap().bits_eq(&mha.forward(&tape, &x, &c).unwrap()));
}

fn grads(model: &TransformerDecoder, batch: &TokenBatch) -> (Vec<Tensor>, usize) {
    let tape = Tape::new();
    reset_peaks();
    let base = memory_report().live_bytes;
    let out = {
        let _f = phase_scope(Phase::Forward);
        model.forward(&tape, batch, false).unwrap()
    };
    let fwd_peak = memory_report().phase_peak(Phase::Forward) - base;
    let loss = ops::mean_all(&ops::mul(&out, &out).unwrap()).unwrap();
    tape.backward(&loss).unwrap();
    (model.parameters().iter().map(|p| p.take_grad().unwrap()).collect(), fwd_peak)
}

#[test]
fn activation_checkpointing_is_bitwise_and_saves_memory() {
    let mut cfg = DecoderConfig::new(64, 4, 4, 2, 32, 32).with_seed(3);
    cfg.intermediate_dim = Some(64);
    let mut model = build_decoder(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = TokenBatch::new(2, 16, random_tokens(&mut rng, 32, 64)).unwrap();
    let (plain, plain_peak) = grads(&model, &batch);
    model.set_activation_checkpointing(true);
    let (ac, ac_peak) = grads(&model, &batch);
    for (a, b) in plain.iter().zip(&ac) {
        assert!(a.bits_eq(b));
    }
    assert!(ac_peak < plain_peak, "{ac_peak} vs {plain_peak}");
}
