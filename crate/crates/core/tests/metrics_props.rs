use bridgepan::baselines::{classical_pansharpen, Method};
use bridgepan::metrics::{no_reference_metrics, reference_metrics, sam, spectral_index, IndexKind};
use bridgepan::pipeline::synth::synth_wald_pairs;
use bridgepan::raster::{upsample_bicubic, Raster};
use bridgepan::tensor::Prng;
use proptest::prelude::*;

fn random(w: usize, h: usize, bands: usize, lo: f64, hi: f64, prng: &mut Prng) -> Raster {
    Raster::from_tensor(&prng.uniform_tensor::<f32>(&[bands, h, w], lo, hi)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn self_comparison_identities(seed in any::<u64>(), bands in 1usize..6) {
        let x = random(16, 16, bands, 0.0, 1.0, &mut Prng::new(seed));
        let r = reference_metrics(&x, &x, 4).unwrap();
        prop_assert_eq!(r.psnr, Some(99.0));
        prop_assert_eq!(r.ssim, Some(1.0));
        prop_assert_eq!(r.sam, Some(0.0));
        prop_assert_eq!(r.ergas, Some(0.0));
    }

    #[test]
    fn sam_ignores_per_pixel_scaling(seed in any::<u64>()) {
        let mut prng = Prng::new(seed);
        let a = random(8, 8, 4, 0.05, 1.0, &mut prng);
        let b = random(8, 8, 4, 0.05, 1.0, &mut prng);
        let gains: Vec<f32> = (0..64).map(|_| prng.uniform_range(0.2, 5.0) as f32).collect();
        let scaled = Raster::from_fn(8, 8, 4, |k, y, x| b.get(k, y, x) * gains[y * 8 + x]);
        let (s0, s1) = (sam(&a, &b).unwrap(), sam(&a, &scaled).unwrap());
        prop_assert!(s0 >= 0.0);
        prop_assert!((s0 - s1).abs() < 1e-3, "{} vs {}", s0, s1);
    }

    #[test]
    fn no_reference_scores_are_bounded(seed in any::<u64>()) {
        let mut prng = Prng::new(seed);
        let pair = &synth_wald_pairs(1, 4, 32, 4, seed).unwrap()[0];
        let candidates = [
            pair.reference.clone(),
            upsample_bicubic(&pair.ms, 4).unwrap(),
            random(32, 32, 4, 0.0, 1.0, &mut prng),
        ];
        for fused in &candidates {
            let m = no_reference_metrics(fused, &pair.ms, &pair.pan, 4).unwrap();
            let (dl, ds, q) = (m.d_lambda.unwrap(), m.d_s.unwrap(), m.qnr.unwrap());
            prop_assert!((0.0..=1.0).contains(&dl) && (0.0..=1.0).contains(&ds));
            prop_assert!((q - (1.0 - dl) * (1.0 - ds)).abs() <= 1e-9);
        }
    }

    #[test]
    fn spectral_indices_are_bounded(seed in any::<u64>(), lo in -1.0f64..0.5) {
        let mut prng = Prng::new(seed);
        let names = ["G", "R", "RE", "NIR", "NIR1", "SWIR1"].iter().map(|s| s.to_string()).collect();
        let mut r = random(8, 8, 6, lo, 1.0, &mut prng).with_names(names).unwrap();
        // guard pixels: a + b = 0
        for b in 0..6 {
            r.band_mut(b)[0] = 0.0;
        }
        r.band_mut(3)[1] = 0.4;
        r.band_mut(1)[1] = -0.4;
        for kind in [IndexKind::Ndvi, IndexKind::Ndwi, IndexKind::Ndre, IndexKind::Ndbi] {
            let v = spectral_index(&r, kind).unwrap();
            prop_assert!(v.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn baselines_stay_in_range(seed in any::<u64>(), m in 0usize..4) {
        let mut prng = Prng::new(seed);
        let ms = random(4, 4, 4, 0.0, 1.0, &mut prng);
        let pan = random(16, 16, 1, 0.0, 1.0, &mut prng);
        let out = classical_pansharpen(&ms, &pan, 4, Method::ALL[m]).unwrap();
        prop_assert!(out.data().iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(out.bands(), 4);
    }
}
