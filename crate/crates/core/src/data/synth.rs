use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Image, Sample, Source, Split};
use crate::error::{Error, Result};
use crate::model::MIN_INPUT;

const AMPLITUDE: f64 = 0.3;
const NOISE_SIGMA: f64 = 0.05;
const PERIOD_PX_AT_32: [f64; 2] = [5.0, 8.0];

/// One striped texture: orientation `class * pi / num_classes`, random
/// period, phase and per-channel gain, plus pixel noise.
pub fn synth_image<R: Rng + ?Sized>(class: usize, num_classes: usize, size: usize, rng: &mut R) -> Image {
    let theta = class as f64 * PI / num_classes as f64;
    let (sin, cos) = theta.sin_cos();
    let scale = size as f64 / 32.0;
    let period = rng.gen_range(PERIOD_PX_AT_32[0]..=PERIOD_PX_AT_32[1]) * scale;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let gains: [f64; 3] = [rng.gen_range(0.85..=1.15), rng.gen_range(0.85..=1.15), rng.gen_range(0.85..=1.15)];
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 * cos + y as f64 * sin;
            let wave = (2.0 * PI * u / period + phase).sin();
            for gain in gains {
                let v = 0.5 + AMPLITUDE * gain * wave + noise.sample(rng);
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(size, size, pixels).expect("buffer sized for image")
}

/// Balanced dataset of `num_classes * per_class` striped images, class-major
/// order, fully determined by `seed`.
pub fn synth_dataset(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Argument("synthetic data needs at least 2 classes".into()));
    }
    if size < MIN_INPUT {
        return Err(Error::Argument(format!("synthetic image size {size} is below {MIN_INPUT}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        for j in 0..per_class {
            let img = synth_image(class, num_classes, size, &mut rng);
            samples.push(Sample {
                source: Source::Inline(Arc::new(img)),
                label: class,
                id: format!("synthetic/{seed}/class{class}/{j:05}"),
            });
        }
    }
    let class_names = (0..num_classes).map(|k| format!("class{k}")).collect();
    Dataset::new(samples, class_names, Split::Train)
}

#[derive(Debug, Clone)]
pub struct SynthSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Train split of `train_total` images plus val and test splits of half
/// that size each, generated from independent seeds.
pub fn synth_splits(num_classes: usize, train_total: usize, size: usize, seed: u64) -> Result<SynthSplits> {
    if train_total < 2 * num_classes {
        return Err(Error::Argument(format!(
            "{train_total} training images cannot cover {num_classes} classes in every split"
        )));
    }
    let per_class = train_total / num_classes;
    let held_out = (train_total / 2 / num_classes).max(1);
    let make = |split: Split, n: usize, salt: u64| -> Result<Dataset> {
        let mut ds = synth_dataset(num_classes, n, size, seed.wrapping_mul(3).wrapping_add(salt))?;
        ds.split = split;
        Ok(ds)
    };
    Ok(SynthSplits {
        train: make(Split::Train, per_class, 0)?,
        val: make(Split::Val, held_out, 1)?,
        test: make(Split::Test, held_out, 2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_sized() {
        let ds = synth_dataset(3, 20, 32, 7).unwrap();
        assert_eq!(ds.len(), 60);
        assert_eq!(ds.class_counts(), vec![20, 20, 20]);
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = synth_dataset(3, 2, 32, 11).unwrap();
        let b = synth_dataset(3, 2, 32, 11).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.load().unwrap(), y.load().unwrap());
        }
        let c = synth_dataset(3, 2, 32, 12).unwrap();
        assert_ne!(a.samples[0].load().unwrap(), c.samples[0].load().unwrap());
    }

    #[test]
    fn split_sizes() {
        let s = synth_splits(3, 60, 32, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 30, 30));
        assert_eq!(s.val.split, Split::Val);
        assert_ne!(s.train.samples[0].load().unwrap(), s.test.samples[0].load().unwrap());
    }
}
