//! Frozen expected values and gradient checks for the autodiff core.

use m2u_core::tensor::{grad_check, m2te, no_grad, Adam, Parameter, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_known_value() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 1], &[1.0, 1.0]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.to_vec(), vec![3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let a = t(&[2, 3], &[0.0; 6]);
    let b = t(&[2, 2], &[0.0; 4]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn conv1d_known_value() {
    let x = t(&[1, 4], &[1.0, 1.0, 1.0, 1.0]);
    let k = t(&[1, 1, 2], &[1.0, 1.0]);
    let y = x.conv1d(&k, 2).unwrap();
    assert_eq!(y.shape(), &[1, 2]);
    assert_eq!(y.to_vec(), vec![2.0, 2.0]);
}

#[test]
fn conv1d_depthwise_channels_stay_separate() {
    // Two channels with distinct filters; each output only sees its channel.
    let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
    let k = t(&[2, 2], &[1.0, 1.0, 0.5, 0.5]);
    let y = x.conv1d_depthwise(&k, 1).unwrap();
    assert_eq!(y.shape(), &[2, 3]);
    assert_eq!(y.to_vec(), vec![3.0, 5.0, 7.0, 15.0, 25.0, 35.0]);
}

#[test]
fn rms_norm_known_value() {
    let x = t(&[1, 2], &[3.0, 4.0]);
    let gain = t(&[2], &[1.0, 1.0]);
    let y = x.rms_norm(&gain).unwrap();
    let v = y.to_vec();
    assert!((v[0] - 0.8485).abs() < 1e-3, "{v:?}");
    assert!((v[1] - 1.1314).abs() < 1e-3, "{v:?}");
}

#[test]
fn silu_known_value() {
    let x = t(&[1, 1], &[1.0]);
    let y = x.silu();
    assert!((y.to_vec()[0] - 0.731_058_578_630_0049).abs() < 1e-12);
}

#[test]
fn cross_entropy_known_value() {
    let logits = t(&[1, 3], &[1.0, 2.0, 3.0]);
    let loss = logits.cross_entropy(&[2]).unwrap();
    assert!((loss.item().unwrap() - 0.407_605_96).abs() < 1e-6);
}

#[test]
fn mse_known_value() {
    let a = t(&[1, 2], &[1.0, 2.0]);
    let b = t(&[1, 2], &[3.0, 5.0]);
    let loss = a.mse(&b).unwrap();
    assert_eq!(loss.item().unwrap(), 6.5);
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
    let y = x.softmax_rows().unwrap();
    let v = y.to_vec();
    for row in v.chunks(3) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn adam_first_step_known_value() {
    let w = Parameter::new("w", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
    // Seed an explicit gradient of 0.5 by hand.
    let x = t(&[1], &[0.5]);
    let loss = w.tensor().mul(&x).unwrap().sum_all();
    loss.backward().unwrap();
    let mut opt = Adam::new(1e-4);
    opt.step(std::slice::from_ref(&w)).unwrap();
    let v = w.tensor().to_vec()[0];
    assert!((v - 0.9999).abs() < 1e-6, "{v}");
    assert!(w.tensor().grad().is_none(), "step clears gradients");
}

#[test]
fn adam_zero_grad_leaves_parameter_unchanged() {
    let w = Parameter::new("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
    let zero = t(&[2], &[0.0, 0.0]);
    let loss = w.tensor().mul(&zero).unwrap().sum_all();
    loss.backward().unwrap();
    assert_eq!(w.tensor().grad().unwrap(), vec![0.0, 0.0]);
    let mut opt = Adam::new(1e-2);
    opt.step(std::slice::from_ref(&w)).unwrap();
    assert_eq!(w.tensor().to_vec(), vec![1.0, -2.0]);
}

#[test]
fn backward_requires_scalar() {
    let x = t(&[2, 2], &[1.0; 4]).with_grad();
    let y = x.scale(2.0);
    assert!(y.backward().is_err());
}

#[test]
fn grad_check_sum_of_squares() {
    let x = t(&[2, 3], &[0.4, -1.2, 2.0, 0.1, -0.5, 0.9]).with_grad();
    let err = grad_check(|x| Ok(x.mul(x)?.sum_all()), &x, 1e-5).unwrap();
    assert!(err < 1e-7, "relative error {err}");
}

#[test]
fn grad_check_silu_mse() {
    let x = t(&[1, 4], &[0.3, -0.7, 1.5, -2.2]).with_grad();
    let zero = Tensor::zeros(&[1, 4]);
    let err = grad_check(|x| x.silu().mse(&zero), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn grad_check_linear_layer() {
    let w = t(&[3, 2], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).with_grad();
    let x = t(&[2, 3], &[1.0, 2.0, -1.0, 0.5, -0.3, 0.8]);
    let err = grad_check(|w| Ok(x.matmul(w)?.sum_all()), &w, 1e-5).unwrap();
    assert!(err < 1e-9, "relative error {err}");
}

#[test]
fn gradient_flows_through_frozen_weight_but_not_into_it() {
    let w = Parameter::new("w", t(&[2, 2], &[0.5, -0.3, 0.8, 0.1])).unwrap();
    w.set_trainable(false);
    let x = t(&[1, 2], &[1.0, 2.0]).with_grad();
    let loss = x.matmul(w.tensor()).unwrap().sum_all();
    loss.backward().unwrap();
    assert!(w.tensor().grad().is_none(), "frozen weight got a gradient");
    let gx = x.grad().expect("input gradient missing");
    // d/dx of sum(x W) is the row sums of W.
    assert!((gx[0] - 0.2).abs() < 1e-12 && (gx[1] - 0.9).abs() < 1e-12);
}

#[test]
fn no_grad_suppresses_graph_construction() {
    let x = t(&[1, 2], &[1.0, 2.0]).with_grad();
    let y = no_grad(|| x.scale(3.0));
    assert!(!y.is_tracked());
}

#[test]
fn embedding_backward_scatter_adds() {
    let table = t(&[4, 2], &[0.0; 8]).with_grad();
    let out = table.embedding(&[1, 1, 3]).unwrap();
    let loss = out.sum_all();
    loss.backward().unwrap();
    let g = table.grad().unwrap();
    assert_eq!(g, vec![0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn concat_and_slice_round_trip_gradients() {
    let a = t(&[1, 2], &[1.0, 2.0]).with_grad();
    let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).with_grad();
    let cat = Tensor::concat_rows(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(cat.shape(), &[3, 2]);
    let sliced = cat.slice_rows(1, 2).unwrap();
    let loss = sliced.sum_all();
    loss.backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![0.0, 0.0]);
    assert_eq!(b.grad().unwrap(), vec![1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn m2te_round_trip_f64_and_f32() {
    let dir = tempfile::tempdir().unwrap();
    let p64 = dir.path().join("a.m2te");
    let p32 = dir.path().join("b.m2te");
    let shape = [2usize, 3];
    let data = [1.5, -2.25, 0.0, 1e-9, 3.75, -64.125];
    m2te::write_file(&p64, &shape, &data).unwrap();
    m2te::write_file_as(&p32, &shape, &data, m2te::Dtype::F32).unwrap();

    let (s, d) = m2te::read_file(&p64).unwrap();
    assert_eq!(s, shape.to_vec());
    assert_eq!(d, data.to_vec());

    let (s, d) = m2te::read_file(&p32).unwrap();
    assert_eq!(s, shape.to_vec());
    for (x, y) in d.iter().zip(&data) {
        assert!((x - y).abs() <= (y.abs() * 1e-6).max(1e-12), "{x} vs {y}");
    }
}

#[test]
fn m2te_rejects_corrupt_blobs() {
    assert!(m2te::decode(b"NOPE").is_err());
    let good = m2te::encode(&[2], &[1.0, 2.0], m2te::Dtype::F64).unwrap();
    assert!(m2te::decode(&good[..good.len() - 1]).is_err());
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(m2te::decode(&bad_magic).is_err());
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert!(m2te::decode(&bad_version).is_err());
}
