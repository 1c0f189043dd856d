//! Injection schedule arithmetic, zero-init gating invariance, causality,
//! low-rank deltas, generation policy, and gradient checks for the language
//! model bridge.

use m2u_core::bridge::lora::{lora_apply, LoraLinear};
use m2u_core::bridge::sampling::SamplingParams;
use m2u_core::bridge::vocab::Vocab;
use m2u_core::bridge::{Bridge, InjectionSchedule, ModelConfig, Prefixes};
use m2u_core::encoders::ModalityKind;
use m2u_core::tensor::{grad_check, uniform, Tensor};
use m2u_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_vocab() -> Vocab {
    Vocab::build([
        "the melody is calm and slow with gentle piano",
        "generate a fast loud tune for me",
    ])
}

fn cfg(n_layers: usize, l_spacing: usize, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        l_spacing,
        d_model: 8,
        n_heads: 2,
        vocab_size,
        max_seq_len: 24,
        lora_rank: 2,
        lora_alpha: 16.0,
    }
}

fn toy_bridge(n_layers: usize, l_spacing: usize, seed: u64) -> (Bridge, Vocab) {
    let vocab = toy_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bridge = Bridge::new(&mut rng, cfg(n_layers, l_spacing, vocab.len())).unwrap();
    (bridge, vocab)
}

fn random_prefix(rows: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform(&mut rng, -0.7, 0.7, &[rows, dim])
}

#[test]
fn schedule_worked_examples() {
    let s = InjectionSchedule::new(&ModelConfig {
        d_model: 64,
        n_heads: 4,
        ..cfg(32, 6, 300)
    })
    .unwrap();
    assert_eq!(
        (s.music_layer, s.image_layer, s.video_layer, s.zero_init_start),
        (26, 20, 14, 13)
    );

    let s = InjectionSchedule::new(&cfg(8, 2, 300)).unwrap();
    assert_eq!(
        (s.music_layer, s.image_layer, s.video_layer, s.zero_init_start),
        (6, 4, 2, 1)
    );

    // The tightest legal stack has no plain layers at all.
    let s = InjectionSchedule::new(&cfg(7, 2, 300)).unwrap();
    assert_eq!(
        (s.music_layer, s.image_layer, s.video_layer, s.zero_init_start),
        (5, 3, 1, 0)
    );

    assert!(matches!(
        InjectionSchedule::new(&cfg(6, 2, 300)).unwrap_err(),
        Error::Config(_)
    ));
}

proptest! {
    #[test]
    fn schedule_arithmetic_holds_for_all_valid_sizes(
        n in 4usize..=64,
        l in 1usize..=21,
    ) {
        prop_assume!(n > 3 * l);
        let c = cfg(n, l, 300);
        let s = InjectionSchedule::new(&c).unwrap();
        let gated = (0..n).filter(|&i| s.is_gated(i)).count();
        prop_assert_eq!(gated, 3 * l + 1);
        prop_assert_eq!(s.zero_init_start, n - (3 * l + 1));
        prop_assert!(s.video_layer > s.zero_init_start.saturating_sub(1));
        prop_assert!(s.music_layer > s.image_layer && s.image_layer > s.video_layer);
        prop_assert!(s.music_layer < n);
        // Every injection layer sits inside the gated region.
        for kind in [ModalityKind::Music, ModalityKind::Image, ModalityKind::Video] {
            let at = s.layer_for(kind);
            prop_assert!(s.is_gated(at));
            prop_assert_eq!(s.kind_at(at), Some(kind));
        }
    }
}

#[test]
fn config_contracts_rejected() {
    assert!(matches!(cfg(6, 2, 300).validate().unwrap_err(), Error::Config(_)));
    let mut c = cfg(8, 2, 300);
    c.n_heads = 3; // 8 is not divisible by 3
    assert!(matches!(c.validate().unwrap_err(), Error::Config(_)));
    let mut c = cfg(8, 2, 300);
    c.vocab_size = 8;
    assert!(matches!(c.validate().unwrap_err(), Error::Config(_)));
    let mut c = cfg(8, 2, 300);
    c.lora_rank = 0;
    assert!(matches!(c.validate().unwrap_err(), Error::Config(_)));
    let mut c = cfg(8, 2, 300);
    c.l_spacing = 0;
    assert!(matches!(c.validate().unwrap_err(), Error::Config(_)));
}

#[test]
fn fresh_gates_make_prefixes_an_exact_no_op() {
    let (bridge, vocab) = toy_bridge(8, 2, 42);
    let ids = vocab.encode_text("generate a calm tune");
    let mut prefixes = Prefixes::none();
    prefixes.set(ModalityKind::Music, random_prefix(3, 8, 1));
    prefixes.set(ModalityKind::Image, random_prefix(3, 8, 2));
    prefixes.set(ModalityKind::Video, random_prefix(3, 8, 3));

    let (with, hidden_with) = bridge.forward(&ids, &prefixes).unwrap();
    let (without, hidden_without) = bridge.forward(&ids, &Prefixes::none()).unwrap();
    assert_eq!(with.to_vec(), without.to_vec());
    assert_eq!(hidden_with.to_vec(), hidden_without.to_vec());
}

#[test]
fn nonzero_gate_lets_the_prefix_through() {
    let (bridge, vocab) = toy_bridge(8, 2, 42);
    let ids = vocab.encode_text("generate a calm tune");
    let music = bridge.schedule.music_layer;
    bridge.layers[music]
        .gate
        .as_ref()
        .unwrap()
        .tensor()
        .with_data_mut(|g| g.fill(1.0));

    let (baseline, _) = bridge.forward(&ids, &Prefixes::none()).unwrap();
    let prefixes = Prefixes::with(ModalityKind::Music, random_prefix(3, 8, 1));
    let (with, _) = bridge.forward(&ids, &prefixes).unwrap();
    let diff = with
        .to_vec()
        .iter()
        .zip(baseline.to_vec())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(diff > 1e-9, "open gate left logits unchanged");

    // Without a prefix the opened gate has nothing to pass.
    let (no_prefix, _) = bridge.forward(&ids, &Prefixes::none()).unwrap();
    assert_eq!(no_prefix.to_vec(), baseline.to_vec());
}

#[test]
fn each_prefix_enters_only_its_designated_layer() {
    // Open only the music-layer gate, then supply an image prefix: it must
    // change nothing, because the image prefix enters at the image layer
    // whose gate is still zero.
    let (bridge, vocab) = toy_bridge(8, 2, 42);
    let ids = vocab.encode_text("generate a calm tune");
    let music = bridge.schedule.music_layer;
    bridge.layers[music]
        .gate
        .as_ref()
        .unwrap()
        .tensor()
        .with_data_mut(|g| g.fill(0.8));

    let (baseline, _) = bridge.forward(&ids, &Prefixes::none()).unwrap();
    let image_only = Prefixes::with(ModalityKind::Image, random_prefix(3, 8, 5));
    let (with_image, _) = bridge.forward(&ids, &image_only).unwrap();
    assert_eq!(with_image.to_vec(), baseline.to_vec());

    // The same prefix as music input does change the output.
    let music_only = Prefixes::with(ModalityKind::Music, random_prefix(3, 8, 5));
    let (with_music, _) = bridge.forward(&ids, &music_only).unwrap();
    assert_ne!(with_music.to_vec(), baseline.to_vec());
}

#[test]
fn prefix_to_ungated_layer_is_a_contract_error() {
    let (bridge, _) = toy_bridge(8, 2, 42);
    // Layer 0 is below the gated region in an 8-layer, spacing-2 stack.
    assert!(bridge.layers[0].gate.is_none());
    let x = random_prefix(4, 8, 0);
    let p = random_prefix(3, 8, 1);
    assert!(matches!(
        bridge.layers[0].attention(&x, Some(&p)).unwrap_err(),
        Error::Contract(_)
    ));
}

#[test]
fn malformed_prefix_is_rejected() {
    let (bridge, vocab) = toy_bridge(8, 2, 42);
    let ids = vocab.encode_text("calm tune");
    let bad = Prefixes::with(ModalityKind::Music, random_prefix(3, 7, 1));
    assert!(matches!(
        bridge.forward(&ids, &bad).unwrap_err(),
        Error::Shape { .. }
    ));
}

#[test]
fn causal_mask_blocks_information_from_later_positions() {
    let (bridge, vocab) = toy_bridge(8, 2, 42);
    let ids = vocab.encode_text("the melody is calm and slow");
    assert!(ids.len() >= 6);
    let mut perturbed = ids.clone();
    perturbed[4] = if ids[4] == 259 { 260 } else { 259 };

    let (a, _) = bridge.forward(&ids, &Prefixes::none()).unwrap();
    let (b, _) = bridge.forward(&perturbed, &Prefixes::none()).unwrap();
    let v = bridge.cfg.vocab_size;
    let (av, bv) = (a.to_vec(), b.to_vec());
    // Rows before the perturbed position are bit-identical.
    assert_eq!(av[..4 * v], bv[..4 * v]);
    // The perturbed row itself changes.
    assert_ne!(av[4 * v..5 * v], bv[4 * v..5 * v]);
}

#[test]
fn lora_starts_as_an_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let layer = LoraLinear::new(&mut rng, "t.q", 6, 5, 2, 16.0).unwrap();
    let x = random_prefix(3, 6, 2);
    let through = layer.forward(&x).unwrap();
    let plain = x.matmul(layer.base.tensor()).unwrap();
    assert_eq!(through.to_vec(), plain.to_vec());
    assert_eq!(
        layer.effective_weight().unwrap().to_vec(),
        layer.base.tensor().to_vec()
    );
}

#[test]
fn lora_rank_one_is_a_scaled_outer_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let layer = LoraLinear::new(&mut rng, "t.v", 3, 2, 1, 16.0).unwrap();
    let a = [0.5, -1.0, 2.0];
    let b = [3.0, 0.25];
    layer.lora_a.tensor().set_data(a.to_vec()).unwrap();
    layer.lora_b.tensor().set_data(b.to_vec()).unwrap();
    let eff = layer.effective_weight().unwrap().to_vec();
    let base = layer.base.tensor().to_vec();
    for i in 0..3 {
        for j in 0..2 {
            let want = base[i * 2 + j] + 16.0 * a[i] * b[j];
            assert!((eff[i * 2 + j] - want).abs() < 1e-12);
        }
    }
    // The standalone form agrees.
    let again = lora_apply(
        layer.base.tensor(),
        layer.lora_a.tensor(),
        layer.lora_b.tensor(),
        1,
        16.0,
    )
    .unwrap();
    assert_eq!(again.to_vec(), eff);
}

#[test]
fn lora_gradients_flow_to_the_delta_not_the_frozen_base() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut layer = LoraLinear::new(&mut rng, "t.q", 4, 4, 2, 16.0).unwrap();
    layer.base.set_trainable(false);
    // Push the delta off zero so both factors receive gradient.
    layer.lora_b.tensor().with_data_mut(|b| b.fill(0.1));

    let x = random_prefix(3, 4, 4);
    let y = layer.forward(&x).unwrap();
    y.mul(&y).unwrap().mean_all().unwrap().backward().unwrap();

    assert!(layer.base.tensor().grad().is_none());
    let ga = layer.lora_a.tensor().grad().unwrap();
    let gb = layer.lora_b.tensor().grad().unwrap();
    assert!(ga.iter().any(|g| g.abs() > 1e-12));
    assert!(gb.iter().any(|g| g.abs() > 1e-12));
}

#[test]
fn grad_check_through_a_gated_layer() {
    // Small stack where every layer is gated; open the gates so the prefix
    // path carries gradient, then check prefix, gate, and low-rank factors.
    let vocab = toy_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let c = ModelConfig {
        max_seq_len: 12,
        ..cfg(4, 1, vocab.len())
    };
    let bridge = Bridge::new(&mut rng, c).unwrap();
    for layer in &bridge.layers {
        if let Some(g) = &layer.gate {
            g.tensor().with_data_mut(|v| v.fill(0.4));
        }
    }
    let ids = vocab.encode_text("calm tune for me");
    let prefix = random_prefix(2, 8, 6).with_grad();

    let run = |p: &Tensor| {
        let prefixes = Prefixes::with(ModalityKind::Music, p.clone());
        let (logits, _) = bridge.forward(&ids, &prefixes)?;
        logits.mul(&logits)?.mean_all()
    };
    let err = grad_check(|p| run(p), &prefix, 1e-5).unwrap();
    assert!(err < 1e-5, "prefix gradient error {err}");

    let music = bridge.schedule.music_layer;
    let gate = bridge.layers[music].gate.as_ref().unwrap();
    let err = grad_check(|_| run(&prefix), gate.tensor(), 1e-5).unwrap();
    assert!(err < 1e-5, "gate gradient error {err}");

    let lora_a = &bridge.layers[music].q.lora_a;
    let err = grad_check(|_| run(&prefix), lora_a.tensor(), 1e-5).unwrap();
    assert!(err < 1e-5, "low-rank factor gradient error {err}");
}

#[test]
fn generation_respects_budget_and_never_emits_partial_blocks() {
    let (bridge, vocab) = toy_bridge(4, 1, 31);
    let prompt = vocab.encode_text("generate a tune");
    let base = bridge.cfg.audio_base();
    let params = SamplingParams {
        temperature: 1.0,
        top_p: 1.0,
    };

    // Zero budget and full-context prompts return the prompt unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = bridge
        .generate(&prompt, &Prefixes::none(), 0, &params, &mut rng)
        .unwrap();
    assert_eq!(out.ids, prompt);

    let full: Vec<usize> = prompt
        .iter()
        .cycle()
        .take(bridge.cfg.max_seq_len)
        .cloned()
        .collect();
    let out = bridge
        .generate(&full, &Prefixes::none(), 5, &params, &mut rng)
        .unwrap();
    assert_eq!(out.ids, full);

    let mut saw_block = false;
    let mut saw_budget_stop = false;
    for seed in 0..120 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = bridge
            .generate(&prompt, &Prefixes::none(), 6, &params, &mut rng)
            .unwrap();
        assert!(out.ids.len() <= bridge.cfg.max_seq_len);
        // Budget: at most six ordinary tokens, plus a terminator or a
        // force-completed block that may overrun by up to seven.
        assert!(out.ids.len() <= prompt.len() + 6 + 8);
        // Audio ids may appear only as one complete terminal block.
        let audio_positions: Vec<usize> = (0..out.ids.len())
            .filter(|&i| out.ids[i] >= base)
            .collect();
        if !audio_positions.is_empty() {
            assert!(out.has_audio_block, "audio ids outside a complete block");
            assert_eq!(audio_positions.len(), 8);
            assert_eq!(audio_positions[0], out.ids.len() - 8);
            for (k, &p) in audio_positions.iter().enumerate() {
                assert_eq!(out.ids[p], base + k);
            }
            saw_block = true;
        } else if out.ids.last() != Some(&m2u_core::bridge::vocab::EOS) {
            assert_eq!(out.ids.len(), prompt.len() + 6);
            saw_budget_stop = true;
        }
    }
    assert!(saw_block, "no seed produced an audio block");
    assert!(saw_budget_stop, "no seed ran to the plain budget");
}

#[test]
fn generation_is_deterministic_for_a_fixed_seed() {
    let (bridge, vocab) = toy_bridge(4, 1, 31);
    let prompt = vocab.encode_text("calm melody");
    let params = SamplingParams::default();
    let mut r1 = ChaCha8Rng::seed_from_u64(77);
    let mut r2 = ChaCha8Rng::seed_from_u64(77);
    let a = bridge
        .generate(&prompt, &Prefixes::none(), 8, &params, &mut r1)
        .unwrap();
    let b = bridge
        .generate(&prompt, &Prefixes::none(), 8, &params, &mut r2)
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn same_seed_builds_identical_models() {
    let (b1, vocab) = toy_bridge(8, 2, 5);
    let (b2, _) = toy_bridge(8, 2, 5);
    let (b3, _) = toy_bridge(8, 2, 6);
    let ids = vocab.encode_text("calm tune");
    let (l1, _) = b1.forward(&ids, &Prefixes::none()).unwrap();
    let (l2, _) = b2.forward(&ids, &Prefixes::none()).unwrap();
    let (l3, _) = b3.forward(&ids, &Prefixes::none()).unwrap();
    assert_eq!(l1.to_vec(), l2.to_vec());
    assert_ne!(l1.to_vec(), l3.to_vec());
}

#[test]
fn forward_input_contracts() {
    let (bridge, _) = toy_bridge(8, 2, 42);
    assert!(matches!(
        bridge.forward(&[], &Prefixes::none()).unwrap_err(),
        Error::EmptyInput(_)
    ));
    let too_long = vec![259usize; bridge.cfg.max_seq_len + 1];
    assert!(matches!(
        bridge.forward(&too_long, &Prefixes::none()).unwrap_err(),
        Error::Data(_)
    ));
    let out_of_vocab = vec![bridge.cfg.vocab_size];
    assert!(matches!(
        bridge.forward(&out_of_vocab, &Prefixes::none()).unwrap_err(),
        Error::Data(_)
    ));
}

#[test]
fn parameter_names_are_unique_and_gates_match_schedule() {
    let (bridge, _) = toy_bridge(8, 2, 42);
    let params = bridge.params();
    let names: std::collections::HashSet<&str> = params.iter().map(|p| p.name()).collect();
    assert_eq!(names.len(), params.len(), "duplicate parameter names");
    // Seven gated layers of 14 tensors, one plain layer of 13, plus the
    // embeddings, final norm, and output head.
    assert_eq!(params.len(), 2 + 7 * 14 + 13 + 2);
    for (i, layer) in bridge.layers.iter().enumerate() {
        assert_eq!(layer.gate.is_some(), bridge.schedule.is_gated(i));
        if let Some(g) = &layer.gate {
            assert_eq!(g.name(), format!("bridge.layer{i}.attn.gate"));
            assert!(g.tensor().to_vec().iter().all(|&v| v == 0.0));
        }
    }
}
