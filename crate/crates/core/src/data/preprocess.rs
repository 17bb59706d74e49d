use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AugmentPolicy, Image, Normalization, Sample};
use crate::error::{Error, Result};
use crate::model::MIN_INPUT;
use crate::params::Mode;
use crate::tensor::Tensor;

/// Eval resize: shorter side goes to `EVAL_RESIZE_RATIO * size` before the
/// centre crop.
pub const EVAL_RESIZE_RATIO: f64 = 1.14;

const CROP_SCALE: [f64; 2] = [0.6, 1.0];
const CROP_RATIO: [f64; 2] = [0.8, 1.25];
const CROP_ATTEMPTS: usize = 10;

/// Image to network input: crop/resize to `size`, augment (train only),
/// then per-channel normalization into a `[3, size, size]` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub size: usize,
    pub normalization: Normalization,
    pub policy: AugmentPolicy,
}

impl Preprocessor {
    pub fn new(size: usize, normalization: Normalization, policy: AugmentPolicy) -> Result<Self> {
        if size < MIN_INPUT {
            return Err(Error::Config(format!("image size {size} is below {MIN_INPUT}")));
        }
        normalization.validate()?;
        Ok(Self {
            size,
            normalization,
            policy,
        })
    }

    /// `rng` is only consulted in train mode.
    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, mode: Mode, rng: &mut R) -> Result<Tensor<f32>> {
        if img.width() < MIN_INPUT || img.height() < MIN_INPUT {
            return Err(Error::Dimension(format!(
                "image is {}x{}, both sides must be at least {MIN_INPUT}",
                img.width(),
                img.height()
            )));
        }
        let t = self.size;
        let ready = match mode {
            Mode::Train => {
                let cropped = random_resized_crop(img, t, rng);
                self.policy.apply(&cropped, rng)
            }
            Mode::Eval => resize_center_crop(img, t),
        };
        Ok(self.normalize(&ready))
    }

    /// As [`Preprocessor::apply`], decoding the sample and naming its file
    /// in any error.
    pub fn sample<R: Rng + ?Sized>(&self, sample: &Sample, mode: Mode, rng: &mut R) -> Result<Tensor<f32>> {
        let img = sample.load()?;
        self.apply(&img, mode, rng).map_err(|e| match e {
            e @ Error::Image { .. } => e,
            other => Error::Image {
                path: sample.origin().to_path_buf(),
                reason: other.to_string(),
            },
        })
    }

    fn normalize(&self, img: &Image) -> Tensor<f32> {
        let (w, h) = (img.width(), img.height());
        let mut data = vec![0.0f32; 3 * w * h];
        for c in 0..3 {
            let mean = self.normalization.mean[c] as f32;
            let inv = 1.0 / self.normalization.std[c] as f32;
            let plane = &mut data[c * w * h..(c + 1) * w * h];
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] = (img.get(x, y, c) - mean) * inv;
                }
            }
        }
        Tensor::new(&[3, h, w], data).expect("plane sizes agree")
    }
}

/// Samples a crop covering 60-100% of the area with aspect ratio in
/// `[0.8, 1.25]`, resized to `size x size`. Falls back to the central
/// square when no sampled crop fits.
fn random_resized_crop<R: Rng + ?Sized>(img: &Image, size: usize, rng: &mut R) -> Image {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let area = w * h;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.gen_range(CROP_SCALE[0]..=CROP_SCALE[1]);
        let log_ratio = rng.gen_range(CROP_RATIO[0].ln()..=CROP_RATIO[1].ln());
        let ratio = log_ratio.exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w && ch <= h {
            let left = rng.gen_range(0.0..=w - cw);
            let top = rng.gen_range(0.0..=h - ch);
            return img.resize_region(left, top, cw, ch, size, size);
        }
    }
    let side = w.min(h);
    img.resize_region((w - side) / 2.0, (h - side) / 2.0, side, side, size, size)
}

fn resize_center_crop(img: &Image, size: usize) -> Image {
    let short = img.width().min(img.height()) as f64;
    let target = (EVAL_RESIZE_RATIO * size as f64).round().max(size as f64);
    let scale = target / short;
    let rw = ((img.width() as f64 * scale).round() as usize).max(size);
    let rh = ((img.height() as f64 * scale).round() as usize).max(size);
    let resized = img.resize(rw, rh);
    let (ox, oy) = ((rw - size) / 2, (rh - size) / 2);
    Image::from_fn(size, size, |x, y, c| resized.get(x + ox, y + oy, c))
}
