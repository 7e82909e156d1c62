use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

fn c(t: &Tensor<f64>) -> Var<f64> {
    Var::constant(t.clone())
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn check(f: impl Fn(&Var<f64>) -> crate::Result<Var<f64>>, x: &Tensor<f64>) {
    let r = finite_diff_check(f, x, 1e-5, 1e-4).unwrap();
    assert!(r.passed(), "{r:?}");
}

// ---------------------------------------------------------------- matmul

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_zero() {
    let eye = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let b = rand_tensor(&[3, 3], 1);
    let y = c(&eye).matmul(&c(&b)).unwrap();
    assert_eq!(y.value().data(), b.data());

    let a = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let z = Tensor::zeros(&[2, 2]);
    let y = c(&a).matmul(&c(&z)).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::<f32>::from_fn(&[4, 5], |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::<f32>::from_fn(&[5, 3], |_| rng.gen_range(-1.0..1.0));
    let y = Var::constant(a.clone()).matmul(&Var::constant(b.clone())).unwrap();
    let a64: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let want = naive_matmul(&a64, &b64, 4, 5, 3);
    let got: Vec<f64> = y.value().data().iter().map(|&v| v as f64).collect();
    assert_close(&got, &want, 1e-6);
}

#[test]
fn batched_matmul_broadcasts_batch_axes() {
    let a = rand_tensor(&[2, 3, 4, 5], 2);
    let b = rand_tensor(&[3, 5, 2], 3);
    let y = c(&a).matmul(&c(&b)).unwrap();
    assert_eq!(y.shape(), &[2, 3, 4, 2]);
    for i in 0..2 {
        for j in 0..3 {
            let want = naive_matmul(
                &a.data()[(i * 3 + j) * 20..][..20],
                &b.data()[j * 10..][..10],
                4,
                5,
                2,
            );
            assert_close(&y.value().data()[(i * 3 + j) * 8..][..8], &want, 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = c(&rand_tensor(&[2, 3], 0))
        .matmul(&c(&rand_tensor(&[4, 2], 0)))
        .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

// --------------------------------------------------------------- softmax

#[test]
fn softmax_examples() {
    let y = c(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).softmax(0).unwrap();
    assert_eq!(y.value().data(), &[0.5, 0.5]);

    let y = c(&Tensor::new(&[2], vec![3.7, f64::NEG_INFINITY]).unwrap())
        .softmax(0)
        .unwrap();
    assert_eq!(y.value().data(), &[1.0, 0.0]);

    let y = c(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).softmax(0).unwrap();
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| (v - 3.0).exp()).collect();
    let s: f64 = e.iter().sum();
    let want: Vec<f64> = e.iter().map(|v| v / s).collect();
    assert_close(y.value().data(), &want, 1e-15);
}

#[test]
fn softmax_all_masked_slice_is_an_error() {
    let x = Tensor::new(&[2, 2], vec![0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
    assert!(matches!(c(&x).softmax(1), Err(Error::DegenerateMask { slice: 1 })));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        vals in prop::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let x = Tensor::new(&[3, 4], vals.clone()).unwrap();
        let y = c(&x).softmax(1).unwrap();
        for row in y.value().data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shifted = Tensor::new(&[3, 4], vals.iter().map(|v| v + shift).collect()).unwrap();
        let ys = c(&shifted).softmax(1).unwrap();
        for (a, b) in y.value().data().iter().zip(ys.value().data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

// ------------------------------------------------------------ layer norm

#[test]
fn layer_norm_examples() {
    let ones = c(&Tensor::ones(&[4]));
    let zeros = c(&Tensor::zeros(&[4]));
    let x = Tensor::full(&[3, 4], 2.5);
    let y = c(&x).layer_norm(&ones, &zeros, 1e-5).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));

    let beta = Tensor::new(&[4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
    let y = c(&rand_tensor(&[3, 4], 4))
        .layer_norm(&zeros, &c(&beta), 1e-5)
        .unwrap();
    for row in y.value().data().chunks(4) {
        assert_eq!(row, beta.data());
    }
}

#[test]
fn layer_norm_matches_two_pass_reference() {
    let x = rand_tensor(&[5, 6], 5);
    let gamma = rand_tensor(&[6], 6);
    let beta = rand_tensor(&[6], 7);
    let y = c(&x).layer_norm(&c(&gamma), &c(&beta), 1e-5).unwrap();
    for (r, row) in x.data().chunks(6).enumerate() {
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for j in 0..6 {
            let want = gamma.data()[j] * (row[j] - mean) / (var + 1e-5).sqrt() + beta.data()[j];
            assert!((y.value().data()[r * 6 + j] - want).abs() < 1e-5);
        }
    }
}

// ----------------------------------------------------------- activations

#[test]
fn activation_examples() {
    let s = c(&Tensor::scalar(0.0)).activation(ActivationKind::Sigmoid);
    assert_eq!(s.value().item(), 0.5);
    let l = c(&Tensor::scalar(-1.0)).activation(ActivationKind::LeakyRelu { slope: 0.01 });
    assert!((l.value().item() + 0.01).abs() < 1e-15);
    for x in [-2.0, 0.0, 3.0] {
        let g = c(&Tensor::scalar(x)).activation(ActivationKind::Gelu).value().item();
        let want = 0.5 * x * (1.0 + statrs::function::erf::erf(x / 2f64.sqrt()));
        assert!((g - want).abs() < 1e-6, "gelu({x}) = {g}, want {want}");
    }
}

#[test]
fn sigmoid_stays_in_open_interval_for_moderate_inputs() {
    let x = Tensor::<f64>::from_fn(&[61], |i| i as f64 - 30.0);
    let y = c(&x).sigmoid();
    assert!(y.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
}

// ------------------------------------------------------------------ conv

#[allow(clippy::too_many_arguments)]
fn naive_conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &[f64],
    g: ConvGeometry,
) -> (Vec<f64>, [usize; 3]) {
    let s = x.shape();
    let (b, ci, ext) = (s[0], s[1], [s[2], s[3], s[4]]);
    let co = w.shape()[0];
    let out = g.conv_output(ext).unwrap();
    let mut y = vec![0.0; b * co * out.iter().product::<usize>()];
    let xi = |n: usize, c: usize, z: usize, yy: usize, xx: usize| {
        x.data()[(((n * ci + c) * ext[0] + z) * ext[1] + yy) * ext[2] + xx]
    };
    let [kd, kh, kw] = g.kernel;
    let mut idx = 0;
    for n in 0..b {
        for o in 0..co {
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = bias[o];
                        for c in 0..ci {
                            for kz in 0..kd {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iz = (oz * g.stride[0] + kz) as isize - g.padding[0] as isize;
                                        let iy = (oy * g.stride[1] + ky) as isize - g.padding[1] as isize;
                                        let ix = (ox * g.stride[2] + kx) as isize - g.padding[2] as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= ext[0] as isize
                                            || iy >= ext[1] as isize
                                            || ix >= ext[2] as isize
                                        {
                                            continue;
                                        }
                                        let wv = w.data()[(((o * ci + c) * kd + kz) * kh + ky) * kw + kx];
                                        acc += wv * xi(n, c, iz as usize, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        y[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    (y, out)
}

#[test]
fn conv3d_pointwise_identity_and_constant_bias() {
    let x = rand_tensor(&[1, 1, 3, 4, 5], 8);
    let w = c(&Tensor::ones(&[1, 1, 1, 1, 1]));
    let y = c(&x).conv3d(&w, None, ConvGeometry::pointwise()).unwrap();
    assert_eq!(y.value().data(), x.data());

    let w = c(&Tensor::zeros(&[2, 1, 3, 3, 3]));
    let b = c(&Tensor::new(&[2], vec![0.75, -1.5]).unwrap());
    let y = c(&x).conv3d(&w, Some(&b), ConvGeometry::same3()).unwrap();
    let n = 3 * 4 * 5;
    assert!(y.value().data()[..n].iter().all(|&v| v == 0.75));
    assert!(y.value().data()[n..].iter().all(|&v| v == -1.5));
}

#[test]
fn conv3d_matches_seven_loop_reference() {
    let x = rand_tensor(&[1, 1, 4, 4, 4], 9);
    let w = rand_tensor(&[1, 1, 3, 3, 3], 10);
    let y = c(&x).conv3d(&c(&w), None, ConvGeometry::same3()).unwrap();
    let (want, _) = naive_conv3d(&x, &w, &[0.0], ConvGeometry::same3());
    assert_close(y.value().data(), &want, 1e-5);

    // Multi-channel, strided, anisotropic kernel and padding.
    let g = ConvGeometry {
        kernel: [3, 2, 1],
        stride: [2, 1, 2],
        padding: [1, 0, 0],
    };
    let x = rand_tensor(&[2, 3, 5, 4, 6], 11);
    let w = rand_tensor(&[4, 3, 3, 2, 1], 12);
    let b = rand_tensor(&[4], 13);
    let y = c(&x).conv3d(&c(&w), Some(&c(&b)), g).unwrap();
    let (want, out) = naive_conv3d(&x, &w, b.data(), g);
    assert_eq!(&y.shape()[2..], &out);
    assert_close(y.value().data(), &want, 1e-12);
}

#[test]
fn conv3d_kernel_larger_than_padded_input_is_a_shape_error() {
    let x = c(&rand_tensor(&[1, 1, 2, 2, 2], 0));
    let w = c(&rand_tensor(&[1, 1, 5, 5, 5], 0));
    assert!(matches!(
        x.conv3d(&w, None, ConvGeometry::cube(5, 1, 1)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn conv_transpose3d_shape_and_bias() {
    let x = rand_tensor(&[1, 1, 2, 2, 2], 14);
    let w = rand_tensor(&[1, 1, 2, 2, 2], 15);
    let g = ConvGeometry::cube(2, 2, 0);
    let y = c(&x).conv_transpose3d(&c(&w), None, g).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);

    let zw = c(&Tensor::zeros(&[1, 3, 2, 2, 2]));
    let b = c(&Tensor::new(&[3], vec![0.5, 1.0, 2.0]).unwrap());
    let y = c(&x).conv_transpose3d(&zw, Some(&b), g).unwrap();
    for (ch, v) in y.value().data().chunks(64).zip([0.5, 1.0, 2.0]) {
        assert!(ch.iter().all(|&u| u == v));
    }
}

#[test]
fn conv_transpose3d_is_the_input_adjoint_of_conv3d() {
    for (g, in_ext) in [
        (ConvGeometry::cube(2, 2, 0), [4, 4, 4]),
        (ConvGeometry::same3(), [3, 4, 5]),
        (
            ConvGeometry {
                kernel: [3, 3, 1],
                stride: [2, 2, 1],
                padding: [1, 1, 0],
            },
            [5, 5, 3],
        ),
    ] {
        // conv3d maps [Ci_c = 2] -> [Co_c = 3]; the transposed conv maps back.
        let xin = rand_tensor(&[1, 2, in_ext[0], in_ext[1], in_ext[2]], 16);
        let w = rand_tensor(&[3, 2, g.kernel[0], g.kernel[1], g.kernel[2]], 17);
        let xv = Var::param(xin.clone());
        let y = xv.conv3d(&c(&w), None, g).unwrap();
        let up = rand_tensor(y.shape(), 18);
        y.mul(&c(&up)).unwrap().sum().backward().unwrap();
        let adjoint = xv.grad().unwrap();

        let t = c(&up).conv_transpose3d(&c(&w), None, g).unwrap();
        assert_eq!(t.shape(), xin.shape());
        assert_close(t.value().data(), adjoint.data(), 1e-12);
    }
}

// --------------------------------------------------------------- maxpool

#[test]
fn maxpool_examples() {
    let x = Tensor::full(&[1, 1, 4, 4, 4], 3.0);
    let y = c(&x).maxpool3d([2, 2, 2]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
    assert!(y.value().data().iter().all(|&v| v == 3.0));

    let mut spike = Tensor::zeros(&[1, 1, 4, 4, 4]);
    spike.data_mut()[(3 * 4 + 2) * 4 + 1] = 9.0; // (3, 2, 1)
    let y = c(&spike).maxpool3d([2, 2, 2]).unwrap();
    assert_eq!(y.value().data()[(1 * 2 + 1) * 2], 9.0);
    assert_eq!(y.value().data().iter().filter(|&&v| v == 9.0).count(), 1);

    let bad = c(&Tensor::<f64>::zeros(&[1, 1, 3, 4, 4]));
    assert!(matches!(bad.maxpool3d([2, 2, 2]), Err(Error::Shape(_))));
}

#[test]
fn maxpool_matches_loop_oracle_and_routes_ties_to_first() {
    let x = rand_tensor(&[1, 2, 8, 8, 8], 19);
    let y = c(&x).maxpool3d([2, 2, 2]).unwrap();
    let mut k = 0;
    for ch in 0..2 {
        for z in 0..4 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let mut m = f64::NEG_INFINITY;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((ch * 8 + 2 * z + dz) * 8 + 2 * yy + dy) * 8 + 2 * xx + dx;
                                m = m.max(x.data()[i]);
                            }
                        }
                    }
                    assert_eq!(y.value().data()[k], m);
                    k += 1;
                }
            }
        }
    }

    let xv = Var::param(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
    xv.maxpool3d([2, 2, 2]).unwrap().sum().backward().unwrap();
    let g = xv.grad().unwrap();
    assert_eq!(g.data()[0], 1.0);
    assert!(g.data()[1..].iter().all(|&v| v == 0.0));
}

// -------------------------------------------------------------- backward

#[test]
fn backward_closed_forms() {
    let x = rand_tensor(&[3, 2], 20);
    let xv = Var::param(x.clone());
    xv.sum().backward().unwrap();
    assert!(xv.grad().unwrap().data().iter().all(|&g| g == 1.0));

    let xv = Var::param(x.clone());
    xv.mul(&xv).unwrap().sum().backward().unwrap();
    let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(xv.grad().unwrap().data(), &want[..]);
}

#[test]
fn backward_accumulates_until_reset() {
    let xv = Var::param(rand_tensor(&[4], 21));
    xv.sum().backward().unwrap();
    xv.sum().backward().unwrap();
    assert!(xv.grad().unwrap().data().iter().all(|&g| g == 2.0));
    xv.zero_grad();
    assert!(xv.grad().is_none());
}

#[test]
fn backward_on_non_scalar_is_a_contract_error() {
    let xv = Var::param(rand_tensor(&[4], 22));
    assert!(matches!(xv.mul_scalar(2.0).backward(), Err(Error::Contract(_))));
}

#[test]
fn graph_is_recorded_in_topological_order() {
    let a = Var::param(rand_tensor(&[2, 3], 23));
    let b = Var::param(rand_tensor(&[3, 2], 24));
    let y = a.matmul(&b).unwrap().sigmoid().mul(&a.matmul(&b).unwrap()).unwrap().sum();
    let g = ComputeGraph::from_output(&y);
    assert!(g.is_topologically_ordered());
    assert_eq!(g.op_names().last(), Some(&"sum"));
    assert_eq!(g.len(), 7);
}

#[test]
fn replaying_a_graph_is_bit_identical() {
    let run = || {
        let x = Var::param(rand_tensor(&[2, 2, 4, 4, 4], 25).cast::<f32>());
        let w = Var::param(rand_tensor(&[3, 2, 3, 3, 3], 26).cast::<f32>());
        let y = x.conv3d(&w, None, ConvGeometry::same3()).unwrap().gelu();
        let loss = y.mul(&y).unwrap().mean();
        loss.backward().unwrap();
        (loss.value().checksum(), w.grad().unwrap().checksum(), x.grad().unwrap().checksum())
    };
    assert_eq!(run(), run());
}

// ------------------------------------------------ finite-difference checks

#[test]
fn finite_diff_check_of_sum_is_exact() {
    let r = finite_diff_check(|x| Ok(x.sum()), &rand_tensor(&[5], 27), 1e-5, 1e-10).unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}

#[test]
fn finite_diff_check_rejects_nondeterministic_functions() {
    let calls = std::cell::Cell::new(0u32);
    let r = finite_diff_check(
        |x| {
            calls.set(calls.get() + 1);
            Ok(x.sum().mul_scalar(1.0 + f64::from(calls.get()) * 1e-3))
        },
        &rand_tensor(&[3], 28),
        1e-5,
        1e-4,
    );
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let x = rand_tensor(&[2, 3], 29);
    let y = rand_tensor(&[3], 30);
    let pos = x.map(|v| v.abs() + 0.5);
    check(|v| Ok(v.add(&c(&y))?.sum()), &x);
    check(|v| Ok(c(&y).sub(v)?.mul(v)?.sum()), &x);
    check(|v| Ok(v.div(&c(&pos))?.sum()), &x);
    check(|v| Ok(c(&x).div(v)?.sum()), &pos);
    check(|v| Ok(v.log().mul(v)?.sum()), &pos);
    check(|v| Ok(v.exp().sum()), &x);
    check(|v| Ok(v.powf(2.0).mul(&c(&x))?.sum()), &pos);
    check(|v| Ok(v.powf(0.5).sum()), &pos);
    check(|v| Ok(v.clamp(-1.0, 1.0).mul(v)?.sum()), &x);
    check(|v| Ok(v.leaky_relu(0.01).mul(v)?.sum()), &x);
    check(|v| Ok(v.sigmoid().mul(&c(&x))?.sum()), &x);
    check(|v| Ok(v.gelu().mul(&c(&x))?.sum()), &x);
    check(|v| Ok(v.one_minus().neg().add_scalar(0.3).mul(v)?.mean()), &x);
}

#[test]
fn broadcast_operand_gradients_match_finite_differences() {
    let x = rand_tensor(&[2, 3], 31);
    let row = rand_tensor(&[3], 32);
    let col = rand_tensor(&[2, 1], 33);
    check(|v| Ok(c(&x).mul(v)?.sum()), &row);
    check(|v| Ok(c(&x).add(v)?.mul(&c(&x))?.sum()), &col);
    check(|v| Ok(c(&x).div(&v.add_scalar(5.0))?.sum()), &col);
}

#[test]
fn structural_op_gradients_match_finite_differences() {
    let x = rand_tensor(&[2, 3, 4], 34);
    let w = rand_tensor(&[4, 5], 35);
    let other = rand_tensor(&[2, 2, 4], 36);
    let weights = rand_tensor(&[2, 4, 3], 37);
    check(|v| Ok(v.matmul(&c(&w))?.gelu().sum()), &x);
    check(|v| Ok(c(&x).matmul(v)?.gelu().sum()), &w);
    check(|v| Ok(v.matmul(&v.transpose_last()?)?.sum()), &x);
    check(|v| Ok(v.permute(&[2, 0, 1])?.mul(&c(&weights.clone().reshape(&[4, 2, 3]).unwrap()))?.sum()), &x);
    check(|v| Ok(v.roll(&[1, -2, 3])?.mul(&c(&x))?.sum()), &x);
    check(|v| Ok(concat(&[v.clone(), c(&other)], 1)?.gelu().sum()), &x);
    check(|v| Ok(v.sum_axis(1)?.gelu().sum()), &x);
    check(|v| Ok(v.reshape(&[6, 4])?.softmax(0)?.mul(&c(&x.clone().reshape(&[6, 4]).unwrap()))?.sum()), &x);
}

#[test]
fn softmax_with_masked_entries_has_correct_gradient() {
    let mut mask = Tensor::zeros(&[3, 4]);
    mask.data_mut()[1] = f64::NEG_INFINITY;
    mask.data_mut()[6] = f64::NEG_INFINITY;
    mask.data_mut()[7] = f64::NEG_INFINITY;
    let x = rand_tensor(&[3, 4], 38);
    let t = rand_tensor(&[3, 4], 39);
    check(|v| Ok(v.add(&c(&mask))?.softmax(1)?.mul(&c(&t))?.sum()), &x);
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let x = rand_tensor(&[3, 5], 40);
    let g = rand_tensor(&[5], 41);
    let b = rand_tensor(&[5], 42);
    let t = rand_tensor(&[3, 5], 43);
    check(|v| Ok(v.layer_norm(&c(&g), &c(&b), 1e-5)?.mul(&c(&t))?.sum()), &x);
    check(|v| Ok(c(&x).layer_norm(v, &c(&b), 1e-5)?.mul(&c(&t))?.sum()), &g);
    check(|v| Ok(c(&x).layer_norm(&c(&g), v, 1e-5)?.mul(&c(&t))?.sum()), &b);
}

#[test]
fn conv_and_pool_gradients_match_finite_differences() {
    let g = ConvGeometry {
        kernel: [3, 3, 2],
        stride: [2, 1, 2],
        padding: [1, 1, 0],
    };
    let x = rand_tensor(&[2, 2, 4, 3, 4], 44);
    let w = rand_tensor(&[3, 2, 3, 3, 2], 45);
    let b = rand_tensor(&[3], 46);
    let wc = c(&w);
    let out_shape = c(&x).conv3d(&wc, None, g).unwrap().shape().to_vec();
    let t = rand_tensor(&out_shape, 47);
    check(|v| Ok(v.conv3d(&c(&w), Some(&c(&b)), g)?.mul(&c(&t))?.sum()), &x);
    check(|v| Ok(c(&x).conv3d(v, Some(&c(&b)), g)?.mul(&c(&t))?.sum()), &w);
    check(|v| Ok(c(&x).conv3d(&c(&w), Some(v), g)?.mul(&c(&t))?.sum()), &b);

    let tg = ConvGeometry::cube(2, 2, 0);
    let xt = rand_tensor(&[1, 3, 2, 2, 3], 48);
    let wt = rand_tensor(&[3, 2, 2, 2, 2], 49);
    let bt = rand_tensor(&[2], 50);
    let tt = rand_tensor(&[1, 2, 4, 4, 6], 51);
    check(|v| Ok(v.conv_transpose3d(&c(&wt), Some(&c(&bt)), tg)?.mul(&c(&tt))?.sum()), &xt);
    check(|v| Ok(c(&xt).conv_transpose3d(v, Some(&c(&bt)), tg)?.mul(&c(&tt))?.sum()), &wt);
    check(|v| Ok(c(&xt).conv_transpose3d(&c(&wt), Some(v), tg)?.mul(&c(&tt))?.sum()), &bt);

    let xp = rand_tensor(&[1, 2, 4, 4, 2], 52);
    let tp = rand_tensor(&[1, 2, 2, 2, 1], 53);
    check(|v| Ok(v.maxpool3d([2, 2, 2])?.mul(&c(&tp))?.sum()), &xp);
}

#[test]
fn composite_graph_matches_finite_differences() {
    let x = rand_tensor(&[1, 2, 4, 4, 4], 54);
    let w1 = rand_tensor(&[3, 2, 3, 3, 3], 55);
    let w2 = rand_tensor(&[3, 1], 56);
    check(
        |v| {
            let h = v.conv3d(&c(&w1), None, ConvGeometry::same3())?.leaky_relu(0.01);
            let h = h.maxpool3d([2, 2, 2])?.permute(&[0, 2, 3, 4, 1])?;
            let ones = c(&Tensor::ones(&[3]));
            let zeros = c(&Tensor::zeros(&[3]));
            let h = h.layer_norm(&ones, &zeros, 1e-5)?.matmul(&c(&w2))?;
            Ok(h.sigmoid().mean())
        },
        &x,
    );
}

#[test]
fn finite_diff_check_uses_the_smooth_side_at_a_kink() {
    // The step h = 1e-5 straddles the LeakyReLU kink at 0 for x = 3e-6.
    let x = Tensor::new(&[2], vec![3e-6, 0.7]).unwrap();
    let r = finite_diff_check(|v| Ok(v.leaky_relu(0.01).sum()), &x, 1e-5, 1e-4).unwrap();
    assert!(r.passed(), "{r:?}");
    assert_eq!(r.one_sided, 1);
}

#[test]
fn finite_diff_check_still_catches_wrong_adjoints() {
    // y = x² with a deliberately wrong adjoint 3x.
    let bad_square = |v: &Var<f64>| -> crate::Result<Var<f64>> {
        let value = v.value().map(|a| a * a);
        let y = Var::from_op(
            "bad_square",
            value,
            vec![v.clone()],
            Box::new(|ctx| {
                let x = ctx.input(0).data();
                Ok(vec![Some(x.iter().zip(ctx.grad).map(|(a, g)| 3.0 * a * g).collect())])
            }),
        );
        Ok(y.sum())
    };
    let r = finite_diff_check(bad_square, &rand_tensor(&[4], 60), 1e-5, 1e-4).unwrap();
    assert!(!r.passed());
    assert_eq!(r.one_sided, 0);
}
