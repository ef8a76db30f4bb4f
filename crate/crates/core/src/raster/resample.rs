//! One-dimensional linear resampling operators. Every 2-D operator in the
//! crate is a separable pair of these maps, so the same weights drive the
//! raster functions and the differentiable tape op.

use crate::error::{Error, Result};
use crate::tensor::AxisMap;

/// Mirror index without repeating the edge sample (`-1 -> 1`).
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    (if i >= n { period - i } else { i }) as usize
}

/// Normalised Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Gaussian blur along an axis of length `n` with reflect padding.
pub fn blur_map(n: usize, sigma: f64) -> Result<AxisMap> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let mut dense = vec![0.0; n * n];
    for i in 0..n {
        for (t, &w) in k.iter().enumerate() {
            let j = reflect(i as isize + t as isize - r, n);
            dense[i * n + j] += w;
        }
    }
    Ok(AxisMap::from_dense(n, n, &dense))
}

/// Keeps every `ratio`-th sample starting at `ratio / 2`.
pub fn decimate_map(n: usize, ratio: usize) -> Result<AxisMap> {
    if ratio == 0 || n % ratio != 0 {
        return Err(Error::dim(format!("ratio {ratio} does not divide length {n}")));
    }
    let m = n / ratio;
    let mut dense = vec![0.0; m * n];
    for i in 0..m {
        dense[i * n + i * ratio + ratio / 2] = 1.0;
    }
    Ok(AxisMap::from_dense(m, n, &dense))
}

/// Blur with `σ = ratio / 2` followed by decimation.
pub fn degrade_map(n: usize, ratio: usize) -> Result<AxisMap> {
    let dec = decimate_map(n, ratio)?;
    Ok(dec.compose(&blur_map(n, 0.5 * ratio as f64)?))
}

fn catmull_rom(t: f64) -> [f64; 4] {
    const A: f64 = -0.5;
    let w = |x: f64| {
        let x = x.abs();
        if x <= 1.0 {
            ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
        } else if x < 2.0 {
            ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
        } else {
            0.0
        }
    };
    [w(1.0 + t), w(t), w(1.0 - t), w(2.0 - t)]
}

/// Out-of-range sample `j` expressed through in-range samples by odd
/// reflection about the end points, which continues linear data linearly.
fn odd_reflect(j: isize, n: usize, coeff: f64, out: &mut Vec<(usize, f64)>) {
    let last = n as isize - 1;
    if n == 1 {
        out.push((0, coeff));
    } else if j < 0 {
        out.push((0, 2.0 * coeff));
        odd_reflect(-j, n, -coeff, out);
    } else if j > last {
        out.push((last as usize, 2.0 * coeff));
        odd_reflect(2 * last - j, n, -coeff, out);
    } else {
        out.push((j as usize, coeff));
    }
}

/// Catmull–Rom bicubic upsampling by an integer factor (half-pixel centres).
pub fn bicubic_map(n: usize, ratio: usize) -> Result<AxisMap> {
    if ratio == 0 {
        return Err(Error::config("upsampling ratio must be at least 1"));
    }
    if n == 0 {
        return Err(Error::dim("cannot upsample an empty axis"));
    }
    let m = n * ratio;
    let mut dense = vec![0.0; m * n];
    let mut taps = Vec::new();
    for i in 0..m {
        let x = (i as f64 + 0.5) / ratio as f64 - 0.5;
        let i0 = x.floor();
        let w = catmull_rom(x - i0);
        for (q, &wq) in w.iter().enumerate() {
            if wq == 0.0 {
                continue;
            }
            taps.clear();
            odd_reflect(i0 as isize - 1 + q as isize, n, wq, &mut taps);
            for &(j, c) in &taps {
                dense[i * n + j] += c;
            }
        }
    }
    Ok(AxisMap::from_dense(m, n, &dense))
}

/// Degrade then bicubic re-upsample; stays at the input resolution.
pub fn degrade_reupsample_map(n: usize, ratio: usize) -> Result<AxisMap> {
    Ok(bicubic_map(n / ratio.max(1), ratio)?.compose(&degrade_map(n, ratio)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::apply_axis_map;

    fn apply(map: &AxisMap, v: &[f64]) -> Vec<f64> {
        apply_axis_map(v, &[v.len()], 0, map).unwrap()
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn every_map_preserves_constants() {
        for n in [1usize, 2, 3, 8, 13] {
            let c = vec![0.3; n];
            for map in [blur_map(n, 0.7).unwrap(), bicubic_map(n, 4).unwrap(), bicubic_map(n, 1).unwrap()] {
                for v in apply(&map, &c) {
                    assert!((v - 0.3).abs() < 1e-15);
                }
            }
        }
        let d = apply(&degrade_map(16, 4).unwrap(), &vec![0.3; 16]);
        assert!(d.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn bicubic_ratio_one_is_identity() {
        let m = bicubic_map(7, 1).unwrap();
        let v: Vec<f64> = (0..7).map(|i| (i as f64).sin()).collect();
        assert_eq!(apply(&m, &v), v);
    }

    #[test]
    fn decimation_phase() {
        let v: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert_eq!(apply(&decimate_map(8, 4).unwrap(), &v), vec![2.0, 6.0]);
        assert!(decimate_map(9, 4).is_err());
    }
}
