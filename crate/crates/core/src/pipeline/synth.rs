//! Synthetic sharp-edged scenes for smoke training and tests.

use crate::error::{Error, Result};
use crate::raster::{default_band_names, degrade, make_wald_pair, Raster, WaldPair};
use crate::tensor::Prng;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r2: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disc { cy, cx, r2 } => (y - cy).powi(2) + (x - cx).powi(2) <= r2,
        }
    }
}

/// A `width × height × bands` scene of overlapping flat shapes. Each band
/// is `offset_b + gain_b · pattern`, so band values stay in `[0.1, 0.9]`.
pub fn synth_scene(width: usize, height: usize, bands: usize, prng: &mut Prng) -> Result<Raster> {
    if width == 0 || height == 0 || bands == 0 {
        return Err(Error::config("synthetic scene needs positive size and band count"));
    }
    let (wf, hf) = (width as f64, height as f64);
    let n_shapes = prng.int_inclusive(4, 8);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let s = if prng.uniform() < 0.5 {
            let (y0, x0) = (prng.uniform_range(0.0, hf * 0.8), prng.uniform_range(0.0, wf * 0.8));
            let (dh, dw) = (prng.uniform_range(hf * 0.1, hf * 0.5), prng.uniform_range(wf * 0.1, wf * 0.5));
            Shape::Rect { y0, x0, y1: y0 + dh, x1: x0 + dw }
        } else {
            let r = prng.uniform_range(0.08, 0.25) * hf.min(wf);
            Shape::Disc { cy: prng.uniform_range(0.0, hf), cx: prng.uniform_range(0.0, wf), r2: r * r }
        };
        shapes.push((s, prng.uniform()));
    }
    let background = prng.uniform_range(0.0, 0.3);
    let mut pattern = vec![background; width * height];
    for (i, v) in pattern.iter_mut().enumerate() {
        let (y, x) = ((i / width) as f64 + 0.5, (i % width) as f64 + 0.5);
        for (s, level) in &shapes {
            if s.contains(y, x) {
                *v = *level;
            }
        }
    }
    let gains: Vec<(f64, f64)> =
        (0..bands).map(|_| (prng.uniform_range(0.1, 0.3), prng.uniform_range(0.3, 0.6))).collect();
    let data = (0..bands)
        .flat_map(|b| {
            let (off, gain) = gains[b];
            pattern.iter().map(move |&p| (off + gain * p) as f32)
        })
        .collect();
    Raster::new(width, height, default_band_names(bands), data)
}

/// `count` Wald triples whose reference is `size × size`: a scene at
/// `ratio · size` is degraded to the reference, PAN is its band mean, and
/// both are degraded once more for the inputs.
pub fn synth_wald_pairs(count: usize, bands: usize, size: usize, ratio: usize, seed: u64) -> Result<Vec<WaldPair>> {
    let mut prng = Prng::new(seed);
    (0..count)
        .map(|_| {
            let scene = synth_scene(size * ratio, size * ratio, bands, &mut prng)?;
            let pan = scene.band_mean();
            let ms = degrade(&scene, ratio)?;
            make_wald_pair(&ms, &pan, ratio)
        })
        .collect()
}
