//! Stochastic transform chain: random resized crop, horizontal flip, color
//! jitter, grayscale, Gaussian blur. Operates on unnormalized `[C, H, W]`
//! images in `[0, 1]`; each draw is seeded by `(seed, item index, view)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{stream_rng, Prng};

const CROP_ATTEMPTS: usize = 10;
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub input_shape: [usize; 3],
    /// Fraction of the image area kept by the crop.
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    /// Brightness, contrast, saturation, hue.
    pub jitter: [f64; 4],
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub blur_kernel: usize,
    pub seed: u64,
}

impl AugmentationPolicy {
    /// Crop 0.2-1.0, flip 0.5, jitter 0.4/0.4/0.4/0.1 at 0.8, grayscale 0.2, blur 0.5.
    pub fn default_for(input_shape: [usize; 3], seed: u64) -> Self {
        AugmentationPolicy {
            input_shape,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            jitter: [0.4, 0.4, 0.4, 0.1],
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 1.0),
            blur_kernel: 3,
            seed,
        }
    }

    /// Mild crop and flip, for supervised training.
    pub fn weak(input_shape: [usize; 3], seed: u64) -> Self {
        AugmentationPolicy {
            crop_scale: (0.8, 1.0),
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            ..Self::default_for(input_shape, seed)
        }
    }

    pub fn identity(input_shape: [usize; 3], seed: u64) -> Self {
        AugmentationPolicy {
            crop_scale: (1.0, 1.0),
            flip_p: 0.0,
            ..Self::weak(input_shape, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = [self.flip_p, self.jitter_p, self.grayscale_p, self.blur_p];
        let ok = prob.iter().all(|p| (0.0..=1.0).contains(p))
            && 0.0 < self.crop_scale.0
            && self.crop_scale.0 <= self.crop_scale.1
            && self.crop_scale.1 <= 1.0
            && 0.0 < self.crop_ratio.0
            && self.crop_ratio.0 <= self.crop_ratio.1
            && self.jitter.iter().all(|&j| j >= 0.0)
            && self.jitter[3] <= 0.5
            && 0.0 < self.blur_sigma.0
            && self.blur_sigma.0 <= self.blur_sigma.1
            && self.blur_kernel % 2 == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation policy {self:?}")))
        }
    }
}

/// Two independent draws of the chain for item `index`.
pub fn make_views(image: &[f32], policy: &AugmentationPolicy, index: u64) -> Result<(Vec<f32>, Vec<f32>)> {
    Ok((augment(image, policy, index, 0)?, augment(image, policy, index, 1)?))
}

pub(crate) fn augment(image: &[f32], policy: &AugmentationPolicy, index: u64, view: u64) -> Result<Vec<f32>> {
    let [c, h, w] = policy.input_shape;
    if image.len() != c * h * w {
        return Err(Error::shape(
            "make_views",
            format!("image of {} values for shape {:?}", image.len(), policy.input_shape),
        ));
    }
    let mut rng = stream_rng(policy.seed, index.wrapping_mul(2).wrapping_add(view));
    let mut img = random_resized_crop(image, policy, &mut rng);
    if rng.gen_bool(policy.flip_p) {
        flip(&mut img, [c, h, w]);
    }
    if rng.gen_bool(policy.jitter_p) {
        jitter(&mut img, [c, h, w], policy.jitter, &mut rng);
    }
    if rng.gen_bool(policy.grayscale_p) && c == 3 {
        grayscale(&mut img, h * w);
    }
    if rng.gen_bool(policy.blur_p) {
        let (lo, hi) = policy.blur_sigma;
        let sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        blur(&mut img, [c, h, w], policy.blur_kernel, sigma);
    }
    Ok(img)
}

fn random_resized_crop(image: &[f32], policy: &AugmentationPolicy, rng: &mut Prng) -> Vec<f32> {
    let [c, h, w] = policy.input_shape;
    let (s0, s1) = policy.crop_scale;
    if s0 >= 1.0 {
        return image.to_vec();
    }
    let area = (h * w) as f64;
    let (r0, r1) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    let mut window = (0, 0, h, w);
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.gen_range(s0..=s1);
        let aspect = if r1 > r0 { rng.gen_range(r0..=r1).exp() } else { r0.exp() };
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            window = (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw), ch, cw);
            break;
        }
    }
    resize_window(image, [c, h, w], window)
}

/// Bilinear resize of the `(top, left, height, width)` window back to `h x w`.
fn resize_window(image: &[f32], [c, h, w]: [usize; 3], (top, left, ch, cw): (usize, usize, usize, usize)) -> Vec<f32> {
    let sample = |out: usize, src: usize, len: usize| -> (usize, usize, f32) {
        let pos = ((out as f64 + 0.5) * src as f64 / len as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(src - 1), (pos - lo as f64) as f32)
    };
    let rows: Vec<_> = (0..h).map(|y| sample(y, ch, h)).collect();
    let cols: Vec<_> = (0..w).map(|x| sample(x, cw, w)).collect();
    let mut out = vec![0.0; c * h * w];
    for ch_i in 0..c {
        let plane = &image[ch_i * h * w..(ch_i + 1) * h * w];
        let (lo, hi) = bounds(plane);
        let px = |y: usize, x: usize| plane[(top + y) * w + left + x];
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let a = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let b = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                out[ch_i * h * w + y * w + x] = (a * (1.0 - fy) + b * fy).clamp(lo, hi);
            }
        }
    }
    out
}

fn bounds(plane: &[f32]) -> (f32, f32) {
    plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn flip(img: &mut [f32], [_, _, w]: [usize; 3]) {
    img.chunks_mut(w).for_each(<[f32]>::reverse);
}

fn luma(img: &[f32], plane: usize, i: usize) -> f32 {
    LUMA[0] * img[i] + LUMA[1] * img[plane + i] + LUMA[2] * img[2 * plane + i]
}

fn jitter(img: &mut [f32], [c, h, w]: [usize; 3], strength: [f64; 4], rng: &mut Prng) {
    let plane = h * w;
    let mut factor = |s: f64| -> f32 {
        if s > 0.0 {
            rng.gen_range((1.0 - s).max(0.0)..=1.0 + s) as f32
        } else {
            1.0
        }
    };
    let brightness = factor(strength[0]);
    let contrast = factor(strength[1]);
    let saturation = factor(strength[2]);
    let hue = if strength[3] > 0.0 {
        rng.gen_range(-strength[3]..=strength[3]) as f32
    } else {
        0.0
    };

    img.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));

    let mean = if c == 3 {
        (0..plane).map(|i| luma(img, plane, i)).sum::<f32>() / plane as f32
    } else {
        img.iter().sum::<f32>() / img.len() as f32
    };
    img.iter_mut()
        .for_each(|v| *v = (mean + contrast * (*v - mean)).clamp(0.0, 1.0));

    if c != 3 {
        return;
    }
    for i in 0..plane {
        let g = luma(img, plane, i);
        for ch in 0..3 {
            let v = &mut img[ch * plane + i];
            *v = (g + saturation * (*v - g)).clamp(0.0, 1.0);
        }
    }
    if hue != 0.0 {
        for i in 0..plane {
            let (hh, s, v) = rgb_to_hsv(img[i], img[plane + i], img[2 * plane + i]);
            let (r, g, b) = hsv_to_rgb((hh + hue).rem_euclid(1.0), s, v);
            img[i] = r;
            img[plane + i] = g;
            img[2 * plane + i] = b;
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0))
}

fn grayscale(img: &mut [f32], plane: usize) {
    for i in 0..plane {
        let g = luma(img, plane, i).clamp(0.0, 1.0);
        for ch in 0..3 {
            img[ch * plane + i] = g;
        }
    }
}

/// Separable Gaussian blur with edge clamping.
fn blur(img: &mut [f32], [c, h, w]: [usize; 3], kernel: usize, sigma: f64) {
    let half = (kernel / 2) as isize;
    let mut weights: Vec<f32> = (-half..=half)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0.0f32; h * w];
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        let (lo, hi) = bounds(plane);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = weights
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| {
                        let xx = (x as isize + k as isize - half).clamp(0, w as isize - 1) as usize;
                        wt * plane[y * w + xx]
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = weights
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| {
                        let yy = (y as isize + k as isize - half).clamp(0, h as isize - 1) as usize;
                        wt * tmp[yy * w + x]
                    })
                    .sum::<f32>()
                    .clamp(lo, hi);
            }
        }
    }
}
