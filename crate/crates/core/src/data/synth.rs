//! Synthetic datasets: Gaussian noise images and rendered geometric shapes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{DatasetSource, Labels, Normalization, Pixels};
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, stream_rng, Prng};

/// Horizontal bar, vertical bar, disk, cross, ring, square outline.
pub const SHAPE_PRIMITIVES: usize = 6;
/// Classes beyond the primitives repeat them with a second copy.
pub const MAX_SHAPE_CLASSES: usize = 2 * SHAPE_PRIMITIVES;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeLabels {
    /// One of `k` classes, stratified.
    Classes(usize),
    /// `m` independent Bernoulli(0.5) attributes, one per primitive.
    Attributes(usize),
}

/// Unlabeled i.i.d. standard-normal images.
pub fn synth_gaussian(num: usize, shape: [usize; 3], seed: u64) -> Result<DatasetSource> {
    if num == 0 {
        return Err(Error::Config("synth_gaussian needs at least one image".into()));
    }
    let item: usize = shape.iter().product();
    let mut rng = seeded_rng(seed);
    let pixels = (0..num * item).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    DatasetSource::from_parts(
        "synth-gaussian",
        shape,
        Pixels::Float(pixels),
        Labels::Unlabeled,
        Some(Normalization::identity(shape[0])),
    )
}

/// Shapes at random positions, sizes and colors over a noisy background.
pub fn synth_shapes(num: usize, shape: [usize; 3], labels: ShapeLabels, seed: u64) -> Result<DatasetSource> {
    let [_, h, w] = shape;
    if num == 0 || h < 8 || w < 8 {
        return Err(Error::Config(format!(
            "synth_shapes needs at least one image of at least 8x8, got {num} of {shape:?}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let (labels, draws): (Labels, Vec<Vec<usize>>) = match labels {
        ShapeLabels::Classes(k) => {
            if !(2..=MAX_SHAPE_CLASSES).contains(&k) {
                return Err(Error::Config(format!("synth_shapes supports 2..={MAX_SHAPE_CLASSES} classes, got {k}")));
            }
            let mut values: Vec<usize> = (0..num).map(|i| i % k).collect();
            values.shuffle(&mut rng);
            let draws = values
                .iter()
                .map(|&c| vec![c % SHAPE_PRIMITIVES; 1 + c / SHAPE_PRIMITIVES])
                .collect();
            (Labels::Single { classes: k, values }, draws)
        }
        ShapeLabels::Attributes(m) => {
            if !(2..=SHAPE_PRIMITIVES).contains(&m) {
                return Err(Error::Config(format!(
                    "synth_shapes supports 2..={SHAPE_PRIMITIVES} attributes, got {m}"
                )));
            }
            let values: Vec<u8> = (0..num * m).map(|_| u8::from(rng.gen_bool(0.5))).collect();
            let draws = values
                .chunks(m)
                .map(|bits| (0..m).filter(|&j| bits[j] == 1).collect())
                .collect();
            (Labels::Multi { attributes: m, values }, draws)
        }
    };
    let item: usize = shape.iter().product();
    let mut pixels = vec![0u8; num * item];
    pixels
        .par_chunks_mut(item)
        .zip(draws.par_iter())
        .enumerate()
        .for_each(|(i, (img, prims))| {
            let mut rng = stream_rng(seed, i as u64 + 1);
            render(img, shape, prims, &mut rng);
        });
    DatasetSource::from_parts("synth-shapes", shape, Pixels::Bytes(pixels), labels, None)
}

fn render(img: &mut [u8], [c, h, w]: [usize; 3], prims: &[usize], rng: &mut Prng) {
    for v in img.iter_mut() {
        *v = rng.gen_range(0..48);
    }
    let side = h.min(w) as f64;
    let thick = (side / 16.0).max(1.0);
    for &p in prims {
        let r = rng.gen_range(0.18..0.3) * side;
        let cy = rng.gen_range(r..h as f64 - r);
        let cx = rng.gen_range(r..w as f64 - r);
        let color: Vec<u8> = (0..c).map(|_| rng.gen_range(140..=255)).collect();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if covers(p, dx, dy, r, thick) {
                    for (ch, &col) in color.iter().enumerate() {
                        img[ch * h * w + y * w + x] = col;
                    }
                }
            }
        }
    }
}

fn covers(prim: usize, dx: f64, dy: f64, r: f64, t: f64) -> bool {
    let hbar = dy.abs() <= t && dx.abs() <= r;
    let vbar = dx.abs() <= t && dy.abs() <= r;
    match prim {
        0 => hbar,
        1 => vbar,
        2 => dx * dx + dy * dy <= r * r,
        3 => hbar || vbar,
        4 => ((dx * dx + dy * dy).sqrt() - r).abs() <= 0.75 * t + 0.25,
        _ => {
            let m = dx.abs().max(dy.abs());
            m <= r && m >= r - t
        }
    }
}
