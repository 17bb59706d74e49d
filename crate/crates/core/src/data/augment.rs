use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Toggle {
    pub enabled: bool,
    pub probability: f64,
}

impl Toggle {
    pub fn on(probability: f64) -> Self {
        Self {
            enabled: true,
            probability,
        }
    }

    pub fn off() -> Self {
        Self {
            enabled: false,
            probability: 0.0,
        }
    }

    fn fires<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        // Always consume a draw so the stream layout does not depend on
        // which transforms are enabled.
        let u: f64 = rng.gen();
        self.enabled && u < self.probability
    }
}

/// Train-time augmentation. Each enabled transform fires independently with
/// its own probability; magnitudes are drawn uniformly up to the `max_*`
/// bounds. Out-of-range settings are clamped, never rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub hflip: Toggle,
    pub affine: Toggle,
    pub gaussian_blur: Toggle,
    pub additive_noise: Toggle,
    pub crop: Toggle,
    pub linear_contrast: Toggle,
    pub max_rotation_deg: f64,
    pub max_translate: f64,
    pub scale_range: [f64; 2],
    pub max_blur_sigma: f64,
    pub max_noise_sigma: f64,
    pub max_crop: f64,
    pub contrast_range: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip: Toggle::on(0.5),
            affine: Toggle::on(0.5),
            gaussian_blur: Toggle::on(0.5),
            additive_noise: Toggle::on(0.5),
            crop: Toggle::on(0.5),
            linear_contrast: Toggle::on(0.5),
            max_rotation_deg: 15.0,
            max_translate: 0.1,
            scale_range: [0.9, 1.1],
            max_blur_sigma: 1.5,
            max_noise_sigma: 0.05,
            max_crop: 0.1,
            contrast_range: [0.8, 1.2],
        }
    }
}

impl AugmentPolicy {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            hflip: Toggle::off(),
            affine: Toggle::off(),
            gaussian_blur: Toggle::off(),
            additive_noise: Toggle::off(),
            crop: Toggle::off(),
            linear_contrast: Toggle::off(),
            ..Self::default()
        }
    }

    /// Default policy minus horizontal flips: mirroring swaps the stripe
    /// orientations of synthetic classes `k` and `K - k`.
    pub fn synthetic() -> Self {
        Self {
            hflip: Toggle::off(),
            ..Self::default()
        }
    }

    /// Copy with every parameter forced into its documented range.
    pub fn clamped(&self) -> Self {
        let prob = |t: Toggle| Toggle {
            enabled: t.enabled,
            probability: if t.probability.is_nan() { 0.0 } else { t.probability.clamp(0.0, 1.0) },
        };
        let range = |r: [f64; 2], lo: f64, hi: f64| {
            let a = r[0].clamp(lo, hi);
            let b = r[1].clamp(lo, hi);
            [a.min(b), a.max(b)]
        };
        let bound = |v: f64, hi: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, hi) };
        Self {
            hflip: prob(self.hflip),
            affine: prob(self.affine),
            gaussian_blur: prob(self.gaussian_blur),
            additive_noise: prob(self.additive_noise),
            crop: prob(self.crop),
            linear_contrast: prob(self.linear_contrast),
            max_rotation_deg: bound(self.max_rotation_deg, 15.0),
            max_translate: bound(self.max_translate, 0.1),
            scale_range: range(self.scale_range, 0.9, 1.1),
            max_blur_sigma: bound(self.max_blur_sigma, 1.5),
            max_noise_sigma: bound(self.max_noise_sigma, 0.05),
            max_crop: bound(self.max_crop, 0.1),
            contrast_range: range(self.contrast_range, 0.8, 1.2),
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Image {
        let p = self.clamped();
        let mut out = img.clone();
        if p.hflip.fires(rng) {
            out = hflip(&out);
        }
        if p.affine.fires(rng) {
            let angle = rng.gen_range(-1.0..=1.0) * p.max_rotation_deg.to_radians();
            let tx = rng.gen_range(-1.0..=1.0) * p.max_translate * out.width() as f64;
            let ty = rng.gen_range(-1.0..=1.0) * p.max_translate * out.height() as f64;
            let scale = rng.gen_range(p.scale_range[0]..=p.scale_range[1]);
            out = affine(&out, angle, tx, ty, scale);
        }
        if p.gaussian_blur.fires(rng) {
            let sigma = rng.gen_range(0.0..=p.max_blur_sigma);
            out = gaussian_blur(&out, sigma);
        }
        if p.additive_noise.fires(rng) {
            let sigma = rng.gen_range(0.0..=p.max_noise_sigma);
            out = additive_noise(&out, sigma, rng);
        }
        if p.crop.fires(rng) {
            let mut side = || rng.gen_range(0.0..=p.max_crop);
            let (l, r, t, b) = (side(), side(), side(), side());
            out = crop_resize(&out, l, r, t, b);
        }
        if p.linear_contrast.fires(rng) {
            let alpha = rng.gen_range(p.contrast_range[0]..=p.contrast_range[1]);
            out = linear_contrast(&out, alpha);
        }
        out
    }
}

pub fn hflip(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(w, img.height(), |x, y, c| img.get(w - 1 - x, y, c))
}

/// Rotation by `angle` (radians) and scaling about the centre, then
/// translation by `(tx, ty)` pixels; bilinear resampling with zero fill.
pub fn affine(img: &Image, angle: f64, tx: f64, ty: f64, scale: f64) -> Image {
    let cx = (img.width() as f64 - 1.0) / 2.0;
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    Image::from_fn(img.width(), img.height(), |x, y, c| {
        // Inverse map from output to source coordinates.
        let dx = x as f64 - cx - tx;
        let dy = y as f64 - cy - ty;
        let sx = (cos * dx + sin * dy) / scale + cx;
        let sy = (-sin * dx + cos * dy) / scale + cy;
        img.sample_zero(sx, sy, c)
    })
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma < 1e-3 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| w / total).collect();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(src.width(), src.height(), |x, y, c| {
            let mut acc = 0.0;
            for (k, &wt) in weights.iter().enumerate() {
                let off = k as isize - radius;
                let (sx, sy) = if horizontal {
                    ((x as isize + off).clamp(0, w - 1), y as isize)
                } else {
                    (x as isize, (y as isize + off).clamp(0, h - 1))
                };
                acc += wt * src.get(sx as usize, sy as usize, c);
            }
            acc
        })
    };
    pass(&pass(img, true), false)
}

pub fn additive_noise<R: Rng + ?Sized>(img: &Image, sigma: f64, rng: &mut R) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let mut out = img.clone();
    for v in out.pixels_mut() {
        *v = (*v + normal.sample(rng) as f32).clamp(0.0, 1.0);
    }
    out
}

/// Removes the given fractions from each side and resizes back.
pub fn crop_resize(img: &Image, left: f64, right: f64, top: f64, bottom: f64) -> Image {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let cw = (w * (1.0 - left - right)).max(1.0);
    let ch = (h * (1.0 - top - bottom)).max(1.0);
    img.resize_region(w * left, h * top, cw, ch, img.width(), img.height())
}

pub fn linear_contrast(img: &Image, alpha: f64) -> Image {
    let a = alpha as f32;
    img.map(|v| ((v - 0.5) * a + 0.5).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Image {
        Image::from_fn(9, 7, |x, y, c| ((x * 7 + y * 3 + c) % 17) as f32 / 16.0)
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = ramp();
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let mut policy = AugmentPolicy::default();
        for t in [
            &mut policy.hflip,
            &mut policy.affine,
            &mut policy.gaussian_blur,
            &mut policy.additive_noise,
            &mut policy.crop,
            &mut policy.linear_contrast,
        ] {
            t.probability = 0.0;
        }
        let img = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(policy.apply(&img, &mut rng), img);
        assert_eq!(AugmentPolicy::identity().apply(&img, &mut rng), img);
    }

    #[test]
    fn identity_affine_reproduces_image() {
        let img = ramp();
        let out = affine(&img, 0.0, 0.0, 0.0, 1.0);
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn clamping_pins_ranges() {
        let mut p = AugmentPolicy::default();
        p.max_rotation_deg = 90.0;
        p.max_noise_sigma = -1.0;
        p.contrast_range = [2.0, 0.1];
        p.hflip.probability = 3.0;
        let c = p.clamped();
        assert_eq!(c.max_rotation_deg, 15.0);
        assert_eq!(c.max_noise_sigma, 0.0);
        assert_eq!(c.contrast_range, [0.8, 1.2]);
        assert_eq!(c.hflip.probability, 1.0);
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Image::filled(12, 10, 0.3);
        let out = gaussian_blur(&img, 1.5);
        assert!(out.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }
}
