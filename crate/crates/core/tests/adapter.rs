//! Adapter identities, shape contracts, a straight-line formula oracle, and
//! gradient checks.

use m2u_core::adapter::{Adapter, AdapterConfig, SubBlock};
use m2u_core::audio::Waveform;
use m2u_core::encoders::{encode, EncoderConfig, ModalityKind, RawPayload};
use m2u_core::tensor::{grad_check, Tensor};
use m2u_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_cfg() -> AdapterConfig {
    AdapterConfig {
        in_dim: 32,
        model_dim: 64,
        prefix_len: 4,
        seq_len: 25,
    }
}

fn toy_adapter(seed: u64) -> Adapter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Adapter::new("adapter.music", toy_cfg(), &mut rng).unwrap()
}

fn toy_embedding() -> m2u_core::encoders::ModalityEmbedding {
    let wave = Waveform::new((0..4000).map(|i| (i as f64 * 0.011).sin() * 0.4).collect(), 16000);
    encode(
        ModalityKind::Music,
        EncoderConfig { rows: 25, dim: 32 },
        &RawPayload::Music(wave),
    )
    .unwrap()
}

#[test]
fn zeroed_subblocks_make_adapter_projection_of_conv() {
    let adapter = toy_adapter(3);
    let emb = toy_embedding();
    let full = adapter.forward(&emb).unwrap();
    // Zero every sub-block linear weight; biases are already zero.
    for b in adapter.subblocks() {
        for p in [&b.l1_w, &b.l2_w, &b.l3_w] {
            p.tensor().with_data_mut(|d| d.fill(0.0));
        }
    }
    let reduced = adapter.forward(&emb).unwrap();
    assert_eq!(reduced.shape(), &[4, 64]);
    assert_ne!(full.to_vec(), reduced.to_vec());

    // The zeroed version must be exactly projection(conv(x)), recomputed
    // here from the same weights.
    let params = adapter.params();
    let by_name = |n: &str| {
        params
            .iter()
            .find(|p| p.name() == n)
            .unwrap()
            .tensor()
            .clone()
    };
    let (_, stride) = adapter.cfg.conv_geometry().unwrap();
    let manual = emb
        .tensor
        .transpose()
        .unwrap()
        .conv1d_depthwise(&by_name("adapter.music.conv.weight"), stride)
        .unwrap()
        .transpose()
        .unwrap()
        .matmul(&by_name("adapter.music.proj.weight"))
        .unwrap();
    assert_eq!(reduced.to_vec(), manual.to_vec());
}

#[test]
fn subblock_with_zero_linears_is_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let adapter = toy_adapter(11);
    let x = m2u_core::tensor::uniform(&mut rng, -1.0, 1.0, &[4, 64]);
    let block = &adapter.subblocks()[0];
    for p in [&block.l1_w, &block.l2_w, &block.l3_w] {
        p.tensor().with_data_mut(|d| d.fill(0.0));
    }
    let y = block.forward(&x).unwrap();
    assert_eq!(x.to_vec(), y.to_vec());
}

#[test]
fn subblock_of_zero_input_is_zero() {
    let adapter = toy_adapter(5);
    let x = Tensor::zeros(&[4, 64]);
    let y = adapter.subblocks()[1].forward(&x).unwrap();
    assert!(y.to_vec().iter().all(|v| *v == 0.0));
}

#[test]
fn subblock_matches_straight_line_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 4;
    let gain = m2u_core::tensor::uniform(&mut rng, 0.5, 1.5, &[d]);
    let l1 = m2u_core::tensor::uniform(&mut rng, -1.0, 1.0, &[d, d]);
    let b1 = m2u_core::tensor::uniform(&mut rng, -0.5, 0.5, &[d]);
    let l2 = m2u_core::tensor::uniform(&mut rng, -1.0, 1.0, &[d, d]);
    let b2 = m2u_core::tensor::uniform(&mut rng, -0.5, 0.5, &[d]);
    let l3 = m2u_core::tensor::uniform(&mut rng, -1.0, 1.0, &[d, d]);
    let b3 = m2u_core::tensor::uniform(&mut rng, -0.5, 0.5, &[d]);
    let x = m2u_core::tensor::uniform(&mut rng, -1.0, 1.0, &[2, d]);

    // Straight-line recomputation on plain vectors.
    let xv = x.to_vec();
    let (gv, l1v, b1v, l2v, b2v, l3v, b3v) = (
        gain.to_vec(),
        l1.to_vec(),
        b1.to_vec(),
        l2.to_vec(),
        b2.to_vec(),
        l3.to_vec(),
        b3.to_vec(),
    );
    let mut expected = vec![0.0; 2 * d];
    for r in 0..2 {
        let row = &xv[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let rinv = 1.0 / (ms + 1e-6).sqrt();
        let normed: Vec<f64> = (0..d).map(|j| row[j] * rinv * gv[j]).collect();
        let matvec = |w: &[f64], b: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|j| (0..d).map(|i| normed[i] * w[i * d + j]).sum::<f64>() + b[j])
                .collect()
        };
        let a = matvec(&l1v, &b1v);
        let c = matvec(&l3v, &b3v);
        let gated: Vec<f64> = (0..d)
            .map(|j| {
                let s = 1.0 / (1.0 + (-a[j]).exp());
                a[j] * s * c[j]
            })
            .collect();
        for j in 0..d {
            let out_j: f64 = (0..d).map(|i| gated[i] * l2v[i * d + j]).sum::<f64>() + b2v[j];
            expected[r * d + j] = row[j] + out_j;
        }
    }

    // The same computation through the module.
    let block = SubBlockHandle {
        gain,
        l1,
        b1,
        l2,
        b2,
        l3,
        b3,
    };
    let y = block.forward(&x);
    let yv = y.to_vec();
    for (a, b) in yv.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

/// Thin wrapper so the oracle test can drive `SubBlock::forward` with
/// hand-picked weights.
struct SubBlockHandle {
    gain: Tensor,
    l1: Tensor,
    b1: Tensor,
    l2: Tensor,
    b2: Tensor,
    l3: Tensor,
    b3: Tensor,
}

impl SubBlockHandle {
    fn forward(&self, x: &Tensor) -> Tensor {
        let block = SubBlock {
            gain: m2u_core::tensor::Parameter::new("t.norm.gain", self.gain.clone()).unwrap(),
            l1_w: m2u_core::tensor::Parameter::new("t.L1.weight", self.l1.clone()).unwrap(),
            l1_b: m2u_core::tensor::Parameter::new("t.L1.bias", self.b1.clone()).unwrap(),
            l2_w: m2u_core::tensor::Parameter::new("t.L2.weight", self.l2.clone()).unwrap(),
            l2_b: m2u_core::tensor::Parameter::new("t.L2.bias", self.b2.clone()).unwrap(),
            l3_w: m2u_core::tensor::Parameter::new("t.L3.weight", self.l3.clone()).unwrap(),
            l3_b: m2u_core::tensor::Parameter::new("t.L3.bias", self.b3.clone()).unwrap(),
        };
        block.forward(x).unwrap()
    }
}

#[test]
fn toy_shapes_and_paper_shapes() {
    let adapter = toy_adapter(1);
    let emb = toy_embedding();
    let out = adapter.forward(&emb).unwrap();
    assert_eq!(out.shape(), &[4, 64]);
    assert!(out.to_vec().iter().all(|v| v.is_finite()));
}

#[test]
fn output_shape_is_independent_of_sequence_length() {
    for s in [4usize, 7, 25, 100] {
        let cfg = AdapterConfig {
            in_dim: 8,
            model_dim: 16,
            prefix_len: 4,
            seq_len: s,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let adapter = Adapter::new("adapter.video", cfg, &mut rng).unwrap();
        let x = m2u_core::tensor::uniform(&mut rng, -1.0, 1.0, &[s, 8]);
        let y = adapter.forward_tensor(&x).unwrap();
        assert_eq!(y.shape(), &[4, 16], "seq_len {s}");
    }
}

#[test]
fn too_short_input_is_a_config_error() {
    let cfg = AdapterConfig {
        in_dim: 8,
        model_dim: 16,
        prefix_len: 4,
        seq_len: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let err = Adapter::new("adapter.music", cfg, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn adapter_parameter_names_are_namespaced_and_disjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let music = Adapter::new("adapter.music", toy_cfg(), &mut rng).unwrap();
    let image = Adapter::new("adapter.image", toy_cfg(), &mut rng).unwrap();
    let m: Vec<String> = music.params().iter().map(|p| p.name().into()).collect();
    let i: Vec<String> = image.params().iter().map(|p| p.name().into()).collect();
    assert_eq!(m.len(), 2 + 3 * 7);
    assert!(m.iter().all(|n| n.starts_with("adapter.music.")));
    assert!(i.iter().all(|n| n.starts_with("adapter.image.")));
    for n in &m {
        assert!(!i.contains(n));
    }
}

#[test]
fn grad_check_through_whole_adapter() {
    let adapter = toy_adapter(9);
    let x = {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m2u_core::tensor::uniform(&mut rng, -0.8, 0.8, &[25, 32]).with_grad()
    };
    let err = grad_check(
        |x| {
            let y = adapter.forward_tensor(x)?;
            y.mul(&y)?.mean_all()
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn grad_check_adapter_weights() {
    let adapter = toy_adapter(13);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = m2u_core::tensor::uniform(&mut rng, -0.8, 0.8, &[25, 32]);
    // Check one weight from each stage of the pipeline.
    let params = adapter.params();
    for name in [
        "adapter.music.conv.weight",
        "adapter.music.subblock3.norm.gain",
        "adapter.music.subblock1.L1.bias",
    ] {
        let p = params.iter().find(|p| p.name() == name).unwrap();
        let err = grad_check(
            |_| {
                let y = adapter.forward_tensor(&x)?;
                y.mul(&y)?.mean_all()
            },
            p.tensor(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{name}: max relative error {err}");
    }
}
