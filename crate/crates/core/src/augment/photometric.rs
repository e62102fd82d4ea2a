//! Color jitter, random grayscale and Gaussian blur in the MoCo-v2 recipe.

use rand::Rng;

use crate::dataio::Image;

/// Reference input size for the blur sigma range.
const BLUR_REFERENCE_SIZE: f32 = 224.0;

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv(rgb: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricRecipe {
    pub jitter_prob: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f32, f32),
}

impl PhotometricRecipe {
    /// MoCo-v2 strengths scaled by `strength`; strength 0 is the identity.
    pub fn moco_v2(strength: f64) -> Self {
        let s = strength as f32;
        let p = strength.min(1.0);
        Self {
            jitter_prob: 0.8 * p,
            brightness: 0.4 * s,
            contrast: 0.4 * s,
            saturation: 0.4 * s,
            hue: (0.1 * s).min(0.5),
            grayscale_prob: 0.2 * p,
            blur_prob: 0.5 * p,
            blur_sigma: (0.1 * s, 2.0 * s),
        }
    }

    pub fn apply(&self, img: &mut Image, rng: &mut impl Rng) {
        if rng.gen_bool(self.jitter_prob) {
            let b = factor(rng, self.brightness);
            let c = factor(rng, self.contrast);
            let s = factor(rng, self.saturation);
            let h = if self.hue > 0.0 {
                rng.gen_range(-self.hue..=self.hue)
            } else {
                0.0
            };
            adjust_brightness(img, b);
            adjust_contrast(img, c);
            if img.channels == 3 {
                adjust_saturation(img, s);
                adjust_hue(img, h);
            }
        }
        if rng.gen_bool(self.grayscale_prob) && img.channels == 3 {
            to_grayscale(img);
        }
        if rng.gen_bool(self.blur_prob) && self.blur_sigma.1 > 0.0 {
            let scale = img.width.max(img.height) as f32 / BLUR_REFERENCE_SIZE;
            let sigma = rng.gen_range(self.blur_sigma.0..=self.blur_sigma.1) * scale;
            gaussian_blur(img, sigma);
        }
    }
}

fn factor(rng: &mut impl Rng, amount: f32) -> f32 {
    if amount > 0.0 {
        rng.gen_range((1.0 - amount).max(0.0)..=1.0 + amount)
    } else {
        1.0
    }
}

fn luma(img: &Image, y: usize, x: usize) -> f32 {
    if img.channels == 1 {
        img.get(0, y, x)
    } else {
        0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x)
    }
}

pub fn adjust_brightness(img: &mut Image, f: f32) {
    if f != 1.0 {
        img.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
}

pub fn adjust_contrast(img: &mut Image, f: f32) {
    if f == 1.0 {
        return;
    }
    let n = (img.height * img.width) as f32;
    let mean = (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (y, x)))
        .map(|(y, x)| luma(img, y, x))
        .sum::<f32>()
        / n;
    img.data
        .iter_mut()
        .for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
}

pub fn adjust_saturation(img: &mut Image, f: f32) {
    if f == 1.0 {
        return;
    }
    for y in 0..img.height {
        for x in 0..img.width {
            let g = luma(img, y, x);
            for c in 0..3 {
                let v = img.get(c, y, x);
                img.set(c, y, x, ((v - g) * f + g).clamp(0.0, 1.0));
            }
        }
    }
}

pub fn adjust_hue(img: &mut Image, shift: f32) {
    if shift == 0.0 {
        return;
    }
    for y in 0..img.height {
        for x in 0..img.width {
            let [h, s, v] = rgb_to_hsv([img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)]);
            let rgb = hsv_to_rgb(h + shift, s, v);
            for (c, value) in rgb.into_iter().enumerate() {
                img.set(c, y, x, value.clamp(0.0, 1.0));
            }
        }
    }
}

pub fn to_grayscale(img: &mut Image) {
    for y in 0..img.height {
        for x in 0..img.width {
            let g = luma(img, y, x);
            for c in 0..img.channels {
                img.set(c, y, x, g);
            }
        }
    }
}

/// Separable Gaussian blur with reflect-free edge clamping.
pub fn gaussian_blur(img: &mut Image, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.into_iter().map(|k| k / norm).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = vec![0.0f32; img.height * img.width];
    for c in 0..img.channels {
        let plane = img.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += wgt * plane[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += wgt * tmp[(yy * w + x) as usize];
                }
                plane[(y * w + x) as usize] = acc;
            }
        }
    }
}
