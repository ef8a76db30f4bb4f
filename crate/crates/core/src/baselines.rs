//! Classical detail-injection pansharpening baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{gaussian_blur, upsample_bicubic, Raster};

const GUARD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ihs,
    Gs,
    Sfim,
    Brovey,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sfim, Method::Ihs, Method::Gs, Method::Brovey];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ihs => "ihs",
            Method::Gs => "gs",
            Method::Sfim => "sfim",
            Method::Brovey => "brovey",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ihs" => Ok(Method::Ihs),
            "gs" => Ok(Method::Gs),
            "sfim" => Ok(Method::Sfim),
            "brovey" => Ok(Method::Brovey),
            _ => Err(Error::config(format!("unknown baseline method {s:?} (expected ihs, gs, sfim or brovey)"))),
        }
    }
}

/// Fuses `ms` with `pan` by the given method; output clamped to `[0, 1]`.
pub fn classical_pansharpen(ms: &Raster, pan: &Raster, ratio: usize, method: Method) -> Result<Raster> {
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
    let up = upsample_bicubic(ms, ratio)?;
    let p = pan.band(0);
    let mut out = up.clone();
    match method {
        Method::Sfim => {
            let smooth = gaussian_blur(pan, 0.5 * ratio as f64)?;
            let gain: Vec<f64> = p.iter().zip(smooth.band(0)).map(|(&a, &s)| a as f64 / (s as f64).max(GUARD)).collect();
            scale_bands(&mut out, &gain);
        }
        Method::Brovey => {
            let i = up.band_mean();
            let gain: Vec<f64> = p.iter().zip(i.band(0)).map(|(&a, &s)| a as f64 / (s as f64).max(GUARD)).collect();
            scale_bands(&mut out, &gain);
        }
        Method::Ihs => {
            let i = up.band_mean();
            let detail: Vec<f64> = p.iter().zip(i.band(0)).map(|(&a, &s)| a as f64 - s as f64).collect();
            for b in 0..out.bands() {
                add_detail(out.band_mut(b), &detail, 1.0);
            }
        }
        Method::Gs => {
            let i = up.band_mean();
            let iv = i.band(0);
            let detail: Vec<f64> = p.iter().zip(iv).map(|(&a, &s)| a as f64 - s as f64).collect();
            let var_i = covariance(iv, iv);
            for b in 0..out.bands() {
                let g = if var_i > 0.0 { covariance(up.band(b), iv) / var_i } else { 1.0 };
                add_detail(out.band_mut(b), &detail, g);
            }
        }
    }
    Ok(out.clamp01())
}

fn scale_bands(r: &mut Raster, gain: &[f64]) {
    for b in 0..r.bands() {
        for (v, &g) in r.band_mut(b).iter_mut().zip(gain) {
            *v = (*v as f64 * g) as f32;
        }
    }
}

fn add_detail(band: &mut [f32], detail: &[f64], g: f64) {
    for (v, &d) in band.iter_mut().zip(detail) {
        *v = (*v as f64 + g * d) as f32;
    }
}

fn covariance(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb)).sum::<f64>() / n
}
