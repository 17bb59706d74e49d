use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resnetplus::layers::{he_init, BatchNorm2d, Dropout, Linear};
use resnetplus::params::{Graph, Mode, ModelState, ParamBuilder, Registry};
use resnetplus::Tensor;

fn build<M>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> M) -> (M, ModelState<f64>) {
    let mut registry = Registry::default();
    let mut state = ModelState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut registry, &mut state, &mut rng));
    (m, state)
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn channel_moments(y: &Tensor<f64>) -> Vec<(f64, f64)> {
    let (n, c, h, w) = y.dims4().unwrap();
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| (0..h * w).map(move |i| (b, i)))
                .map(|(b, i)| y.at(&[b, ch, i / w, i % w]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            (mean, var.sqrt())
        })
        .collect()
}

#[test]
fn batch_norm_train_output_has_affine_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (bn, mut state) = build(0, |b| BatchNorm2d::new(b, "bn", 3));
    let gamma = [1.5, -0.7, 0.3];
    let beta = [0.2, -1.0, 4.0];
    state.param_mut(bn.gamma).data_mut().copy_from_slice(&gamma);
    state.param_mut(bn.beta).data_mut().copy_from_slice(&beta);
    // Offset and scale the input so the layer has real work to do.
    let x = random(&[8, 3, 4, 4], -1.0, 1.0, &mut rng).map(|v| 5.0 * v + 2.0);
    let mut g = Graph::new(&state, Mode::Train, false);
    let xv = g.input(x);
    let y = bn.forward(&mut g, xv).unwrap();
    for (ch, (mean, std)) in channel_moments(g.tape.value(y)).into_iter().enumerate() {
        assert!((mean - beta[ch]).abs() < 1e-3, "channel {ch} mean {mean}");
        assert!((std - gamma[ch].abs()).abs() < 1e-2, "channel {ch} std {std}");
    }
}

#[test]
fn batch_norm_leaves_standardized_input_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut bn, state) = build(0, |b| BatchNorm2d::new(b, "bn", 2));
    bn.eps = 0.0;
    let raw = random(&[4, 2, 5, 5], -1.0, 1.0, &mut rng);
    let moments = channel_moments(&raw);
    let (_, _, h, w) = raw.dims4().unwrap();
    let mut x = raw.clone();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let ch = (i / (h * w)) % 2;
        *v = (*v - moments[ch].0) / moments[ch].1;
    }
    let mut g = Graph::new(&state, Mode::Train, false);
    let xv = g.input(x.clone());
    let y = bn.forward(&mut g, xv).unwrap();
    assert!(g.tape.value(y).max_abs_diff(&x) < 1e-12);
}

#[test]
fn dropout_preserves_expectation() {
    let drop = Dropout::new(0.5).unwrap();
    let state = ModelState::<f64>::default();
    let mut g = Graph::new(&state, Mode::Train, false).with_rng(ChaCha8Rng::seed_from_u64(13));
    let x = g.input(Tensor::ones(&[100_000]));
    let y = drop.forward(&mut g, x).unwrap();
    let out = g.tape.value(y);
    let mean = out.sum() / out.len() as f64;
    assert!((0.98..=1.02).contains(&mean), "{mean}");
    assert!(out.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn dropout_expectation_holds_per_element() {
    // Averaged over many masks each element's output tends to its input.
    let drop = Dropout::new(0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&[16], 0.5, 2.0, &mut rng);
    let state = ModelState::<f64>::default();
    let mut acc = vec![0.0; 16];
    let trials = 20_000;
    let mut g = Graph::new(&state, Mode::Train, false).with_rng(ChaCha8Rng::seed_from_u64(15));
    for _ in 0..trials {
        let xv = g.input(x.clone());
        let y = drop.forward(&mut g, xv).unwrap();
        for (a, v) in acc.iter_mut().zip(g.tape.value(y).data()) {
            *a += v / trials as f64;
        }
    }
    for (a, v) in acc.iter().zip(x.data()) {
        assert!((a / v - 1.0).abs() < 0.02, "{a} vs {v}");
    }
}

#[test]
fn linear_matches_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (fc, mut state) = build(1, |b| Linear::new(b, "fc", 6, 4));
    let bias = random(&[4], -1.0, 1.0, &mut rng);
    state.param_mut(fc.bias).data_mut().copy_from_slice(bias.data());
    let x = random(&[5, 6], -1.0, 1.0, &mut rng);
    let w = state.param(fc.weight).clone();
    let mut want = vec![0.0; 20];
    for i in 0..5 {
        for o in 0..4 {
            want[i * 4 + o] = bias.data()[o] + (0..6).map(|k| x.at(&[i, k]) * w.at(&[o, k])).sum::<f64>();
        }
    }
    let mut g = Graph::new(&state, Mode::Eval, false);
    let xv = g.input(x);
    let y = fc.forward(&mut g, xv).unwrap();
    let want = Tensor::new(&[5, 4], want).unwrap();
    assert!(g.tape.value(y).max_abs_diff(&want) < 1e-12);
}

#[test]
fn he_init_moments_and_seed_separation() {
    // fan_in = 100 for a [1000, 100] matrix.
    let draw = |seed| he_init::<f64, _>(&[1000, 100], &mut ChaCha8Rng::seed_from_u64(seed));
    let a = draw(1);
    let n = a.len() as f64;
    let mean = a.sum() / n;
    let std = (a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let target = 0.02f64.sqrt();
    assert!((std / target - 1.0).abs() < 0.05, "{std}");
    assert_eq!(a.data(), draw(1).data());
    let b = draw(2);
    let differ = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
    assert!(differ as f64 >= 0.99 * n);
}

#[test]
fn eval_batch_norm_uses_running_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (bn, mut state) = build(0, |b| BatchNorm2d::new(b, "bn", 2));
    let mean = [0.5, -2.0];
    let var = [4.0, 0.25];
    state.buffers[0].data_mut().copy_from_slice(&mean);
    state.buffers[1].data_mut().copy_from_slice(&var);
    let x = random(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    let mut g = Graph::new(&state, Mode::Eval, false);
    let xv = g.input(x.clone());
    let y = bn.forward(&mut g, xv).unwrap();
    let y = g.tape.value(y);
    for (i, (&got, &v)) in y.data().iter().zip(x.data()).enumerate() {
        let ch = (i / 9) % 2;
        let want = (v - mean[ch]) / (var[ch] + bn.eps).sqrt();
        assert!((got - want).abs() < 1e-12);
    }
}
