//! Full-reference and no-reference fusion quality metrics, spectral
//! indices, and report serialisation.

mod indices;

pub use indices::{index_agreement, spectral_index, IndexAgreement, IndexKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{degrade, resample::gaussian_kernel, Raster};

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const Q_BLOCK: usize = 32;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ergas: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sam: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub psnr_bands: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ssim_bands: Vec<f64>,
}

impl MetricReport {
    /// Fills fields present in `other` and absent here.
    pub fn merge(mut self, other: MetricReport) -> Self {
        self.psnr = self.psnr.or(other.psnr);
        self.ssim = self.ssim.or(other.ssim);
        self.ergas = self.ergas.or(other.ergas);
        self.sam = self.sam.or(other.sam);
        self.d_lambda = self.d_lambda.or(other.d_lambda);
        self.d_s = self.d_s.or(other.d_s);
        self.qnr = self.qnr.or(other.qnr);
        if self.psnr_bands.is_empty() {
            self.psnr_bands = other.psnr_bands;
        }
        if self.ssim_bands.is_empty() {
            self.ssim_bands = other.ssim_bands;
        }
        self
    }

    fn fields(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("psnr", self.psnr),
            ("ssim", self.ssim),
            ("ergas", self.ergas),
            ("sam", self.sam),
            ("d_lambda", self.d_lambda),
            ("d_s", self.d_s),
            ("qnr", self.qnr),
        ]
    }
}

/// `metric,mean,std,count` rows over every metric present in at least one
/// report.
pub fn aggregate_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("metric,mean,std,count\n");
    for k in 0..7 {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.fields()[k].1).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        out.push_str(&format!("{},{mean},{std},{}\n", reports[0].fields()[k].0, vals.len()));
    }
    out
}

fn same_dims(a: &Raster, b: &Raster, what: &str) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() || a.bands() != b.bands() {
        return Err(Error::dim(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.bands(),
            b.width(),
            b.height(),
            b.bands()
        )));
    }
    Ok(())
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

pub fn psnr_band(a: &[f32], b: &[f32]) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

/// Mean over bands of the per-band PSNR (peak 1).
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    same_dims(a, b, "psnr")?;
    Ok(mean((0..a.bands()).map(|i| psnr_band(a.band(i), b.band(i)))))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Separable Gaussian-window local means over the valid region.
fn local_mean(img: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Gaussian-window SSIM of one band (`k1 = 0.01`, `k2 = 0.03`, range 1).
/// The window shrinks to the image when the image is smaller than 11.
pub fn ssim_band(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    let n = SSIM_WINDOW.min(width).min(height);
    if n == 0 {
        return Err(Error::dim("ssim needs a non-empty image"));
    }
    let full = gaussian_kernel(SSIM_SIGMA)?;
    let r = (full.len() - n) / 2;
    let mut k = full[r..r + n].to_vec();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, _, _) = local_mean(&x, width, height, &k);
    let (my, _, _) = local_mean(&y, width, height, &k);
    let (sxx, _, _) = local_mean(&xx, width, height, &k);
    let (syy, _, _) = local_mean(&yy, width, height, &k);
    let (sxy, _, _) = local_mean(&xy, width, height, &k);
    Ok(mean((0..mx.len()).map(|i| {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    })))
}

pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    same_dims(a, b, "ssim")?;
    let per = (0..a.bands()).map(|i| ssim_band(a.band(i), b.band(i), a.width(), a.height())).collect::<Result<Vec<_>>>()?;
    Ok(mean(per.into_iter()))
}

/// `100 / ratio · sqrt(mean_b (RMSE_b / μ_b)²)`, with `μ_b` the reference
/// band mean.
pub fn ergas(fused: &Raster, reference: &Raster, ratio: usize) -> Result<f64> {
    same_dims(fused, reference, "ergas")?;
    if ratio == 0 {
        return Err(Error::config("ergas ratio must be positive"));
    }
    let terms = (0..fused.bands()).map(|b| {
        let r = reference.band(b);
        let mu = r.iter().map(|&v| v as f64).sum::<f64>() / r.len() as f64;
        let rmse = mse(fused.band(b), r).sqrt();
        if rmse == 0.0 {
            0.0
        } else {
            (rmse / mu).powi(2)
        }
    });
    Ok(100.0 / ratio as f64 * mean(terms).sqrt())
}

/// Mean spectral angle in degrees; pixels where either vector is zero are
/// skipped.
pub fn sam(a: &Raster, b: &Raster) -> Result<f64> {
    same_dims(a, b, "sam")?;
    let n = a.width() * a.height();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n {
        let (mut na, mut nb) = (0.0f64, 0.0f64);
        for k in 0..a.bands() {
            let (x, y) = (a.band(k)[i] as f64, b.band(k)[i] as f64);
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        // angle = 2·atan2(‖û − v̂‖, ‖û + v̂‖), exact at zero
        let (na, nb) = (na.sqrt(), nb.sqrt());
        let (mut dm, mut dp) = (0.0f64, 0.0f64);
        for k in 0..a.bands() {
            let (x, y) = (a.band(k)[i] as f64 / na, b.band(k)[i] as f64 / nb);
            dm += (x - y) * (x - y);
            dp += (x + y) * (x + y);
        }
        sum += (2.0 * dm.sqrt().atan2(dp.sqrt())).to_degrees();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub fn reference_metrics(fused: &Raster, reference: &Raster, ratio: usize) -> Result<MetricReport> {
    same_dims(fused, reference, "reference metrics")?;
    let psnr_bands: Vec<f64> = (0..fused.bands()).map(|i| psnr_band(fused.band(i), reference.band(i))).collect();
    let ssim_bands = (0..fused.bands())
        .map(|i| ssim_band(fused.band(i), reference.band(i), fused.width(), fused.height()))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        psnr: Some(mean(psnr_bands.iter().copied())),
        ssim: Some(mean(ssim_bands.iter().copied())),
        ergas: Some(ergas(fused, reference, ratio)?),
        sam: Some(sam(fused, reference)?),
        psnr_bands,
        ssim_bands,
        ..Default::default()
    })
}

/// Universal image quality index of one block pair.
fn q_block(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cab += (x - ma) * (y - mb);
    }
    let (va, vb, cab) = (va / n, vb / n, cab / n);
    let den = (va + vb) * (ma * ma + mb * mb);
    if den == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    4.0 * cab * ma * mb / den
}

/// Q index averaged over non-overlapping blocks of side `min(32, w, h)`.
pub fn q_index(a: &[f32], b: &[f32], width: usize, height: usize) -> f64 {
    let s = Q_BLOCK.min(width).min(height);
    if s == 0 {
        return 0.0;
    }
    let mut vals = Vec::new();
    for by in 0..height / s {
        for bx in 0..width / s {
            let mut pa = Vec::with_capacity(s * s);
            let mut pb = Vec::with_capacity(s * s);
            for y in by * s..(by + 1) * s {
                for x in bx * s..(bx + 1) * s {
                    pa.push(a[y * width + x] as f64);
                    pb.push(b[y * width + x] as f64);
                }
            }
            vals.push(q_block(&pa, &pb));
        }
    }
    mean(vals.into_iter())
}

pub fn d_lambda(fused: &Raster, ms: &Raster) -> Result<f64> {
    if fused.bands() != ms.bands() {
        return Err(Error::dim(format!("fused has {} bands, ms has {}", fused.bands(), ms.bands())));
    }
    let b = fused.bands();
    let (fw, fh, mw, mh) = (fused.width(), fused.height(), ms.width(), ms.height());
    let mut terms = Vec::new();
    for i in 0..b {
        for j in 0..b {
            if i != j {
                let qf = q_index(fused.band(i), fused.band(j), fw, fh);
                let qm = q_index(ms.band(i), ms.band(j), mw, mh);
                terms.push((qf - qm).abs());
            }
        }
    }
    Ok(mean(terms.into_iter()).clamp(0.0, 1.0))
}

pub fn d_s(fused: &Raster, ms: &Raster, pan: &Raster, ratio: usize) -> Result<f64> {
    if pan.bands() != 1 {
        return Err(Error::dim(format!("pan must have one band, has {}", pan.bands())));
    }
    if pan.width() != fused.width() || pan.height() != fused.height() {
        return Err(Error::dim("fused image must be at pan resolution"));
    }
    if fused.bands() != ms.bands() || fused.width() != ms.width() * ratio || fused.height() != ms.height() * ratio {
        return Err(Error::dim(format!("ms must be fused size / {ratio} with the same bands")));
    }
    let pl = degrade(pan, ratio)?;
    let terms = (0..fused.bands()).map(|i| {
        let qf = q_index(fused.band(i), pan.band(0), fused.width(), fused.height());
        let qm = q_index(ms.band(i), pl.band(0), ms.width(), ms.height());
        (qf - qm).abs()
    });
    Ok(mean(terms).clamp(0.0, 1.0))
}

pub fn no_reference_metrics(fused: &Raster, ms: &Raster, pan: &Raster, ratio: usize) -> Result<MetricReport> {
    let dl = d_lambda(fused, ms)?;
    let ds = d_s(fused, ms, pan, ratio)?;
    Ok(MetricReport { d_lambda: Some(dl), d_s: Some(ds), qnr: Some((1.0 - dl) * (1.0 - ds)), ..Default::default() })
}
