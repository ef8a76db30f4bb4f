use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Ndvi,
    Ndwi,
    Ndre,
    Ndbi,
}

impl IndexKind {
    /// Band names `(a, b)` of `(a − b) / (a + b)`.
    pub fn bands(self) -> (&'static str, &'static str) {
        match self {
            IndexKind::Ndvi => ("NIR", "R"),
            IndexKind::Ndwi => ("G", "NIR"),
            IndexKind::Ndre => ("NIR1", "RE"),
            IndexKind::Ndbi => ("SWIR1", "NIR"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Ndvi => "NDVI",
            IndexKind::Ndwi => "NDWI",
            IndexKind::Ndre => "NDRE",
            IndexKind::Ndbi => "NDBI",
        }
    }
}

impl std::str::FromStr for IndexKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ndvi" => Ok(IndexKind::Ndvi),
            "ndwi" => Ok(IndexKind::Ndwi),
            "ndre" => Ok(IndexKind::Ndre),
            "ndbi" => Ok(IndexKind::Ndbi),
            _ => Err(Error::config(format!("unknown spectral index {s:?}"))),
        }
    }
}

/// Normalised difference of the named bands, clamped to `[-1, 1]`;
/// pixels with `a + b = 0` map to 0.
pub fn spectral_index(r: &Raster, kind: IndexKind) -> Result<Raster> {
    let (na, nb) = kind.bands();
    let find = |n: &str| r.band_index(n).ok_or_else(|| Error::config(format!("{} needs band {n}, which is absent", kind.name())));
    let (ia, ib) = (find(na)?, find(nb)?);
    let data = r
        .band(ia)
        .iter()
        .zip(r.band(ib))
        .map(|(&a, &b)| {
            let (a, b) = (a as f64, b as f64);
            let s = a + b;
            if s == 0.0 {
                0.0
            } else {
                ((a - b) / s).clamp(-1.0, 1.0) as f32
            }
        })
        .collect();
    Raster::new(r.width(), r.height(), vec![kind.name().to_string()], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IndexAgreement {
    pub rmse: f64,
    pub mae: f64,
    pub cc: f64,
}

/// RMSE, MAE and Pearson correlation between two index maps. A constant
/// map has correlation 0.
pub fn index_agreement(a: &[f32], b: &[f32]) -> Result<IndexAgreement> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(format!("index maps of {} and {} pixels", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        se += d * d;
        ae += d.abs();
    }
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let cc = if saa == 0.0 || sbb == 0.0 {
        log::warn!("correlation of a constant index map is undefined; reporting 0");
        0.0
    } else {
        (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
    };
    Ok(IndexAgreement { rmse: (se / n).sqrt(), mae: ae / n, cc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndvi_examples() {
        let r = Raster::from_fn(2, 2, 4, |b, y, _| if b == 3 { 1.0 } else if b == 2 { y as f32 * 1.0 } else { 0.5 });
        let v = spectral_index(&r, IndexKind::Ndvi).unwrap();
        assert_eq!(v.band(0), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_sum_guard_and_missing_band() {
        let r = Raster::zeros(3, 3, 4);
        assert!(spectral_index(&r, IndexKind::Ndvi).unwrap().data().iter().all(|&v| v == 0.0));
        match spectral_index(&r, IndexKind::Ndre) {
            Err(Error::Config(m)) => assert!(m.contains("NIR1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn agreement_examples() {
        let a = [0.1f32, -0.3, 0.2, 0.0];
        let r = index_agreement(&a, &a).unwrap();
        assert_eq!((r.rmse, r.mae), (0.0, 0.0));
        assert!((r.cc - 1.0).abs() < 1e-12);
        let b: Vec<f32> = a.iter().map(|v| v + 0.1).collect();
        let r = index_agreement(&a, &b).unwrap();
        assert!((r.rmse - 0.1).abs() < 1e-6 && (r.mae - 0.1).abs() < 1e-6 && (r.cc - 1.0).abs() < 1e-9);
        let z = [0.5f32, -0.5, 0.25, -0.25];
        let n: Vec<f32> = z.iter().map(|v| -v).collect();
        assert!((index_agreement(&z, &n).unwrap().cc + 1.0).abs() < 1e-12);
        assert_eq!(index_agreement(&[0.3; 4], &z).unwrap().cc, 0.0);
    }
}
