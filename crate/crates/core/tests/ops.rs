use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resnetplus::autograd::Tape;
use resnetplus::ops::{self, PoolKind};
use resnetplus::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct convolution: every output cell summed over channels and window.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let (o, _, kh, kw) = k.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for co in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let z = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                                    acc += x.at(&[b, ci, y as usize, z as usize]) * k.at(&[co, ci, u, v]);
                                }
                            }
                        }
                    }
                    out[((b * o + co) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// Max skips padded cells; average divides by the full window.
fn naive_pool(x: &Tensor<f64>, kind: PoolKind, k: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut cells = Vec::new();
                    for u in 0..k {
                        for v in 0..k {
                            let y = (i * stride + u) as isize - pad as isize;
                            let z = (j * stride + v) as isize - pad as isize;
                            if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                                cells.push(x.at(&[b, ch, y as usize, z as usize]));
                            }
                        }
                    }
                    out.push(match kind {
                        PoolKind::Max => cells.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        PoolKind::Avg => cells.iter().sum::<f64>() / (k * k) as f64,
                    });
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out).unwrap()
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let got = ops::conv2d(&x, &k, 2, 1).unwrap();
    let want = naive_conv(&x, &k, 2, 1);
    assert_eq!(got.shape(), &[1, 3, 3, 3]);
    assert!(got.max_abs_diff(&want) < 1e-6);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[4, 7], &mut rng);
    let b = random(&[7, 3], &mut rng);
    assert!(ops::matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn avg_pool_with_padding_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 1, 7, 7], &mut rng);
    let got = ops::pool2d(&x, PoolKind::Avg, 3, 2, 1).unwrap().output;
    assert!(got.max_abs_diff(&naive_pool(&x, PoolKind::Avg, 3, 2, 1)) < 1e-12);
}

#[test]
fn global_pool_matches_flat_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 8, 5, 5], &mut rng);
    let avg = ops::global_pool(&x, PoolKind::Avg).unwrap().output;
    let max = ops::global_pool(&x, PoolKind::Max).unwrap().output;
    for (i, chunk) in x.data().chunks(25).enumerate() {
        let mean = chunk.iter().sum::<f64>() / 25.0;
        let top = chunk.iter().copied().fold(f64::MIN, f64::max);
        assert!((avg.data()[i] - mean).abs() < 1e-12);
        assert_eq!(max.data()[i], top);
    }
}

#[test]
fn broadcast_mul_scales_channels() {
    let w = Tensor::<f64>::from_f64s(&[1, 3, 1, 1], &[0.5, 1.0, 2.0]).unwrap();
    let ones = Tensor::<f64>::ones(&[1, 3, 2, 2]);
    let y = ops::broadcast_binary(&ones, &w, |a, b| a * b).unwrap();
    assert_eq!(y.shape(), &[1, 3, 2, 2]);
    for (c, want) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        assert!(y.data()[c * 4..c * 4 + 4].iter().all(|&v| v == want));
    }
}

#[test]
fn softmax_matches_extended_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let row: Vec<f64> = (0..10).map(|_| rng.gen_range(-8.0..8.0)).collect();
    let single = Tensor::<f32>::from_f64s(&[1, 10], &row).unwrap();
    let got = ops::softmax(&single).unwrap().to_f64_vec();
    // Inputs are rounded to f32 first so both sides see identical logits.
    let exact: Vec<f64> = single.to_f64_vec().iter().map(|v| v.exp()).collect();
    let z: f64 = exact.iter().sum();
    for (g, e) in got.iter().zip(&exact) {
        assert!((g - e / z).abs() < 1e-6, "{g} vs {}", e / z);
    }
}

#[test]
fn cross_entropy_matches_extended_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, k) = (8, 5);
    let logits: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let x = Tensor::<f32>::from_f64s(&[n, k], &logits).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let loss = tape.cross_entropy(v, &labels).unwrap();
    let got = tape.value(loss).item().unwrap() as f64;

    let xs = x.to_f64_vec();
    let want = (0..n)
        .map(|i| {
            let row = &xs[i * k..(i + 1) * k];
            row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[labels[i]]
        })
        .sum::<f64>()
        / n as f64;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 3, 6, 6], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let kv = tape.param(k);
        let y = tape.conv2d(xv, kv, 1, 1).unwrap();
        let y = tape.relu(y);
        let y = tape.pool2d(y, PoolKind::Max, 3, 2, 1).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        (
            tape.value(y).data().to_vec(),
            grads.get(xv).unwrap().data().to_vec(),
            grads.get(kv).unwrap().data().to_vec(),
        )
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

fn tensor_strategy(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let len: usize = shape.iter().product();
    prop::collection::vec(-2.0..2.0f64, len).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_oracle_on_random_geometry(
        (x, k, stride, pad) in (1usize..3, 1usize..4, 1usize..4, 3usize..8, 1usize..4, 1usize..3)
            .prop_flat_map(|(n, c, o, hw, ks, stride)| {
                let ks = ks.min(hw);
                (
                    tensor_strategy(vec![n, c, hw, hw]),
                    tensor_strategy(vec![o, c, ks, ks]),
                    Just(stride),
                    0..=ks / 2,
                )
            })
    ) {
        let got = ops::conv2d(&x, &k, stride, pad).unwrap();
        prop_assert!(got.max_abs_diff(&naive_conv(&x, &k, stride, pad)) < 1e-9);
    }

    #[test]
    fn conv_is_linear(
        x in tensor_strategy(vec![1, 2, 5, 5]),
        y in tensor_strategy(vec![1, 2, 5, 5]),
        k in tensor_strategy(vec![3, 2, 3, 3]),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
    ) {
        let mixed = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = ops::conv2d(&mixed, &k, 1, 1).unwrap();
        let cx = ops::conv2d(&x, &k, 1, 1).unwrap();
        let cy = ops::conv2d(&y, &k, 1, 1).unwrap();
        let rhs = cx.zip_map(&cy, |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn pools_match_oracle(x in tensor_strategy(vec![1, 2, 7, 6]), k in 2usize..4, stride in 1usize..3) {
        let pad = k / 2;
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let got = ops::pool2d(&x, kind, k, stride, pad).unwrap().output;
            prop_assert!(got.max_abs_diff(&naive_pool(&x, kind, k, stride, pad)) < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..6, logits in prop::collection::vec(-50.0..50.0f64, 2..8)) {
        let k = logits.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| logits.iter().map(move |v| v * (r as f64 + 1.0))).collect();
        let p = ops::softmax(&Tensor::new(&[rows, k], data).unwrap()).unwrap();
        for row in p.data().chunks(k) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn primitives_stay_finite(x in tensor_strategy(vec![2, 3, 4, 4]), k in tensor_strategy(vec![2, 3, 3, 3])) {
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let kv = tape.param(k);
        let y = tape.conv2d(xv, kv, 1, 1).unwrap();
        let y = tape.sigmoid(y);
        let a = tape.pool2d(y, PoolKind::Avg, 2, 2, 0).unwrap();
        let m = tape.channel_pool(y, PoolKind::Max).unwrap();
        let s1 = tape.sum(a);
        let s2 = tape.sum(m);
        let s1 = tape.reshape(s1, &[1]).unwrap();
        let s2 = tape.reshape(s2, &[1]).unwrap();
        let total = tape.add(s1, s2).unwrap();
        let loss = tape.sum(total);
        prop_assert!(tape.value(loss).is_finite());
        let grads = tape.backward(loss).unwrap();
        prop_assert!(grads.get(xv).unwrap().is_finite());
        prop_assert!(grads.get(kv).unwrap().is_finite());
    }
}
