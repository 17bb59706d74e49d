//! Direct evaluations shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use resnetplus::Tensor;

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `sigma(W1 relu(W0 avg) + W1 relu(W0 max))` per sample and channel.
pub fn channel_oracle(m: &Tensor<f64>, w0: &Tensor<f64>, w1: &Tensor<f64>) -> Vec<f64> {
    let (n, c, h, w) = m.dims4().unwrap();
    let hidden = w0.shape()[0];
    let mlp = |d: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = (0..hidden)
            .map(|j| (0..c).map(|i| w0.at(&[j, i, 0, 0]) * d[i]).sum::<f64>().max(0.0))
            .collect();
        (0..c).map(|i| (0..hidden).map(|j| w1.at(&[i, j, 0, 0]) * z[j]).sum()).collect()
    };
    let mut out = Vec::new();
    for b in 0..n {
        let mut avg = vec![0.0; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = m.at(&[b, ch, y, x]);
                    avg[ch] += v / (h * w) as f64;
                    max[ch] = max[ch].max(v);
                }
            }
        }
        let (a, mx) = (mlp(&avg), mlp(&max));
        out.extend(a.iter().zip(&mx).map(|(p, q)| sigmoid(p + q)));
    }
    out
}

/// `sigma(conv_k([mean_c; max_c]))` with zero padding `k / 2`.
pub fn spatial_oracle(f: &Tensor<f64>, kernel: &Tensor<f64>) -> Vec<f64> {
    let (n, c, h, w) = f.dims4().unwrap();
    let k = kernel.shape()[2];
    let pad = (k / 2) as isize;
    let mut out = Vec::new();
    for b in 0..n {
        let mut maps = vec![vec![0.0; h * w], vec![f64::NEG_INFINITY; h * w]];
        for ch in 0..c {
            for i in 0..h * w {
                let v = f.at(&[b, ch, i / w, i % w]);
                maps[0][i] += v / c as f64;
                maps[1][i] = maps[1][i].max(v);
            }
        }
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (p, map) in maps.iter().enumerate() {
                    for u in 0..k as isize {
                        for v in 0..k as isize {
                            let (yy, xx) = (y + u - pad, x + v - pad);
                            if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                                acc += kernel.at(&[0, p, u as usize, v as usize]) * map[yy as usize * w + xx as usize];
                            }
                        }
                    }
                }
                out.push(sigmoid(acc));
            }
        }
    }
    out
}

/// `P(s+ > s-) + P(s+ = s-) / 2` over every positive/negative pair.
pub fn brute_concordance(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &p) in positive.iter().enumerate() {
        for (j, &q) in positive.iter().enumerate() {
            if p && !q {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}
