//! Multi-band rasters, their on-disk containers, and the resampling
//! operators behind Wald degradation and bicubic upsampling.

mod bpr;
mod png_io;
pub mod resample;

pub use bpr::{decode as decode_bpr, encode as encode_bpr, read_raster, write_raster, MAGIC};
pub use png_io::{read_png, write_png_preview};

use crate::error::{Error, Result};
use crate::tensor::{apply_axis_map, AxisMap, Prng, Tensor};

/// Planar `f32` image: band `b`, row `y`, column `x` lives at
/// `(b * height + y) * width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    names: Vec<String>,
    scale: f64,
    data: Vec<f32>,
}

/// Band order for the sensor families the engine knows about.
pub fn default_band_names(bands: usize) -> Vec<String> {
    let known: &[&str] = match bands {
        1 => &["PAN"],
        4 => &["B", "G", "R", "NIR"],
        7 => &["B", "G", "R", "NIR", "SWIR", "TIR", "MIR"],
        8 => &["C", "B", "G", "Y", "R", "RE", "NIR1", "NIR2"],
        10 => &["CA", "B", "G", "R", "NIR", "SWIR1", "SWIR2", "Cirrus", "TIR1", "TIR2"],
        _ => &[],
    };
    if known.is_empty() {
        (0..bands).map(|i| format!("band{}", i + 1)).collect()
    } else {
        known.iter().map(|s| s.to_string()).collect()
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, names: Vec<String>, data: Vec<f32>) -> Result<Self> {
        let want = width * height * names.len();
        if data.len() != want {
            return Err(Error::dim(format!(
                "{width}x{height}x{} raster needs {want} samples, got {}",
                names.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(Raster { width, height, names, scale: 1.0, data })
    }

    pub fn zeros(width: usize, height: usize, bands: usize) -> Self {
        Raster { width, height, names: default_band_names(bands), scale: 1.0, data: vec![0.0; width * height * bands] }
    }

    pub fn from_fn(width: usize, height: usize, bands: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut r = Self::zeros(width, height, bands);
        for b in 0..bands {
            for y in 0..height {
                for x in 0..width {
                    r.data[(b * height + y) * width + x] = f(b, y, x);
                }
            }
        }
        r
    }

    /// Builds from a `[B, H, W]` tensor with default band names.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [b, h, w] => Raster::new(w, h, default_band_names(b), t.data().to_vec()),
            ref s => Err(Error::dim(format!("raster tensor must be [B,H,W], got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.bands(), self.height, self.width], self.data.clone()).expect("raster shape")
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.bands() {
            return Err(Error::dim(format!("{} names for {} bands", names.len(), self.bands())));
        }
        self.names = names;
        Ok(self)
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn bands(&self) -> usize {
        self.names.len()
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> f32 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Mean over bands, as a single-band raster.
    pub fn band_mean(&self) -> Raster {
        let n = self.width * self.height;
        let mut acc = vec![0.0f64; n];
        for b in 0..self.bands() {
            for (a, &v) in acc.iter_mut().zip(self.band(b)) {
                *a += v as f64;
            }
        }
        let k = self.bands().max(1) as f64;
        Raster {
            width: self.width,
            height: self.height,
            names: vec!["PAN".into()],
            scale: self.scale,
            data: acc.into_iter().map(|v| (v / k) as f32).collect(),
        }
    }

    /// Applies one separable operator per spatial axis.
    pub fn apply_separable(&self, map_h: &AxisMap, map_w: &AxisMap) -> Result<Raster> {
        let shape = [self.bands(), self.height, self.width];
        let a = apply_axis_map(&self.data, &shape, 1, map_h)?;
        let shape = [self.bands(), map_h.out_len(), self.width];
        let data = apply_axis_map(&a, &shape, 2, map_w)?;
        Ok(Raster { width: map_w.out_len(), height: map_h.out_len(), names: self.names.clone(), scale: self.scale, data })
    }
}

pub fn gaussian_blur(r: &Raster, sigma: f64) -> Result<Raster> {
    r.apply_separable(&resample::blur_map(r.height(), sigma)?, &resample::blur_map(r.width(), sigma)?)
}

/// Wald-protocol spatial degradation: blur with `σ = ratio / 2`, then keep
/// every `ratio`-th pixel.
pub fn degrade(r: &Raster, ratio: usize) -> Result<Raster> {
    if ratio == 0 || r.width() % ratio != 0 || r.height() % ratio != 0 {
        let (dim, len) = if ratio != 0 && r.width() % ratio == 0 { ("height", r.height()) } else { ("width", r.width()) };
        return Err(Error::dim(format!("ratio {ratio} does not divide {dim} {len}")));
    }
    r.apply_separable(&resample::degrade_map(r.height(), ratio)?, &resample::degrade_map(r.width(), ratio)?)
}

/// [`degrade`] plus additive Gaussian noise of standard deviation `sigma_n`.
pub fn degrade_noisy(r: &Raster, ratio: usize, sigma_n: f64, prng: &mut Prng) -> Result<Raster> {
    let mut out = degrade(r, ratio)?;
    if sigma_n > 0.0 {
        out.data.iter_mut().for_each(|v| *v += (sigma_n * prng.gaussian()) as f32);
    }
    Ok(out)
}

pub fn upsample_bicubic(r: &Raster, ratio: usize) -> Result<Raster> {
    r.apply_separable(&resample::bicubic_map(r.height(), ratio)?, &resample::bicubic_map(r.width(), ratio)?)
}

/// Reduced-resolution training/evaluation triple.
#[derive(Clone, Debug, PartialEq)]
pub struct WaldPair {
    pub ms: Raster,
    pub pan: Raster,
    pub reference: Raster,
    pub ratio: usize,
}

impl WaldPair {
    /// Checks the resolution contract of an already-built triple.
    pub fn new(ms: Raster, pan: Raster, reference: Raster, ratio: usize) -> Result<Self> {
        if pan.bands() != 1 {
            return Err(Error::dim(format!("pan must have one band, has {}", pan.bands())));
        }
        if pan.width() != ms.width() * ratio || pan.height() != ms.height() * ratio {
            return Err(Error::dim(format!(
                "pan {}x{} is not {ratio}x ms {}x{}",
                pan.width(),
                pan.height(),
                ms.width(),
                ms.height()
            )));
        }
        if reference.width() != pan.width() || reference.height() != pan.height() || reference.bands() != ms.bands() {
            return Err(Error::dim("reference must match pan size and ms band count"));
        }
        Ok(WaldPair { ms, pan, reference, ratio })
    }
}

pub fn make_wald_pair(ms: &Raster, pan: &Raster, ratio: usize) -> Result<WaldPair> {
    if pan.width() != ms.width() * ratio || pan.height() != ms.height() * ratio {
        return Err(Error::dim(format!(
            "pan {}x{} must be ratio {ratio} times ms {}x{}",
            pan.width(),
            pan.height(),
            ms.width(),
            ms.height()
        )));
    }
    Ok(WaldPair { ms: degrade(ms, ratio)?, pan: degrade(pan, ratio)?, reference: ms.clone(), ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_survives_all_operators() {
        let r = Raster::from_fn(8, 8, 3, |_, _, _| 0.42);
        for out in [gaussian_blur(&r, 1.3).unwrap(), upsample_bicubic(&r, 4).unwrap()] {
            assert!(out.data().iter().all(|&v| v == 0.42));
        }
        let d = degrade(&Raster::from_fn(4, 4, 1, |_, _, _| 0.7), 4).unwrap();
        assert_eq!((d.width(), d.height()), (1, 1));
        assert_eq!(d.data(), &[0.7]);
        let du = upsample_bicubic(&degrade(&r, 4).unwrap(), 4).unwrap();
        assert!(du.data().iter().all(|&v| v == 0.42));
    }

    #[test]
    fn impulse_matches_analytic_gaussian() {
        let n = 21;
        let sigma = 1.5;
        let r = Raster::from_fn(n, n, 1, |_, y, x| if y == 10 && x == 10 { 1.0 } else { 0.0 });
        let out = gaussian_blur(&r, sigma).unwrap();
        let rad = (3.0f64 * sigma).ceil() as i64;
        let z: f64 = (-rad..=rad).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).sum();
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as i64 - 10, x as i64 - 10);
                let want = if dy.abs() <= rad && dx.abs() <= rad {
                    (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp() / (z * z)
                } else {
                    0.0
                };
                assert!((out.get(0, y, x) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_ramp_reproduced() {
        let r = Raster::from_fn(6, 5, 1, |_, y, x| 0.1 * x as f32 + 0.05 * y as f32);
        let up = upsample_bicubic(&r, 4).unwrap();
        for y in 0..up.height() {
            for x in 0..up.width() {
                let sx = (x as f32 + 0.5) / 4.0 - 0.5;
                let sy = (y as f32 + 0.5) / 4.0 - 0.5;
                assert!((up.get(0, y, x) - (0.1 * sx + 0.05 * sy)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn wald_pair_shapes() {
        let ms = Raster::from_fn(64, 64, 4, |b, y, x| ((b + y + x) % 7) as f32 / 7.0);
        let pan = Raster::from_fn(256, 256, 1, |_, y, x| ((y * x) % 11) as f32 / 11.0);
        let w = make_wald_pair(&ms, &pan, 4).unwrap();
        assert_eq!((w.ms.width(), w.ms.height(), w.ms.bands()), (16, 16, 4));
        assert_eq!((w.pan.width(), w.pan.height()), (64, 64));
        assert_eq!(w.reference, ms);
        assert!(make_wald_pair(&ms, &pan, 2).is_err());
    }

    #[test]
    fn indivisible_degrade_names_dimension() {
        let r = Raster::zeros(8, 6, 1);
        let e = degrade(&r, 4).unwrap_err().to_string();
        assert!(e.contains("height 6"), "{e}");
    }
}
