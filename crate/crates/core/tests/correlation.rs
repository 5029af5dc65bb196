use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skyalign_core::correlation::{argmax, fill_outside, ncc_direct, ncc_direct_par, ncc_fft, ProbabilityMap, SearchGeometry};
use skyalign_core::SatelliteMeta;
use skyalign_tensor::FeatureMap;

fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap {
        channels: c,
        height: h,
        width: w,
        data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        level: 0,
    }
}

fn crop(m: &FeatureMap, u: usize, v: usize, h: usize, w: usize) -> FeatureMap {
    let mut data = Vec::new();
    for c in 0..m.channels {
        for y in 0..h {
            let r = c * m.height * m.width + (v + y) * m.width + u;
            data.extend_from_slice(&m.data[r..r + w]);
        }
    }
    FeatureMap { channels: m.channels, height: h, width: w, data, level: 0 }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn fft_matches_direct_on_small_maps() {
    for seed in 0..4 {
        let map = random_map(3, 40, 36, seed);
        let tpl = random_map(3, 9, 11, seed + 100);
        let (d, f) = (ncc_direct(&map, &tpl).unwrap(), ncc_fft(&map, &tpl).unwrap());
        assert_eq!(d.len(), 32 * 26);
        assert!(max_abs(&d, &f) < 1e-9, "seed {seed}: {}", max_abs(&d, &f));
    }
}

#[test]
fn parallel_direct_is_bitwise_identical() {
    let map = random_map(2, 30, 30, 3);
    let tpl = random_map(2, 8, 8, 4);
    assert_eq!(ncc_direct(&map, &tpl).unwrap(), ncc_direct_par(&map, &tpl).unwrap());
}

#[test]
fn exact_crop_scores_one_at_its_position() {
    let map = random_map(4, 48, 48, 9);
    let tpl = crop(&map, 13, 21, 12, 12);
    let s = ncc_fft(&map, &tpl).unwrap();
    let (i, peak) = argmax(&s);
    assert_eq!((i % 37, i / 37), (13, 21));
    assert!((peak - 1.0).abs() < 1e-9);
}

#[test]
fn channel_mismatch_is_rejected() {
    let map = random_map(3, 20, 20, 1);
    let tpl = random_map(2, 5, 5, 2);
    assert!(ncc_direct(&map, &tpl).is_err());
    assert!(ncc_fft(&map, &tpl).is_err());
}

#[test]
fn template_larger_than_map_is_rejected() {
    let map = random_map(1, 10, 10, 1);
    let tpl = random_map(1, 12, 5, 2);
    assert!(ncc_direct(&map, &tpl).is_err());
    assert!(ncc_fft(&map, &tpl).is_err());
}

#[test]
fn subpixel_peak_recovers_parabola_vertex() {
    let (h, w) = (7, 9);
    let (cu, cv) = (4.3, 2.8);
    let vals: Vec<f64> = (0..h * w)
        .map(|i| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            -(u - cu).powi(2) - 2.0 * (v - cv).powi(2)
        })
        .collect();
    let p = ProbabilityMap::new(h, w, vals, None).unwrap();
    let (u, v) = p.subpixel_peak();
    assert!((u - cu).abs() < 1e-12 && (v - cv).abs() < 1e-12);
}

#[test]
fn search_translation_round_trips_position() {
    let sat = SatelliteMeta::centered(0.5, 160).unwrap();
    let g = SearchGeometry::new(&sat, 20.0, 20.0, (0, 0)).unwrap();
    for (tx, tz) in [(0.0, 0.0), (3.5, -2.0), (-9.5, 9.0)] {
        let (u, v) = g.position_of(tx, tz).unwrap();
        let (bx, bz) = g.translation(u, v);
        assert!((bx - tx).abs() < 1e-12 && (bz - tz).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ncc_is_bounded_and_affine_invariant(seed in 0u64..10_000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let map = random_map(2, 16, 18, seed);
        let tpl = random_map(2, 5, 6, seed ^ 0xabcd);
        let mut tpl2 = tpl.clone();
        // Per-channel affine change of the template leaves scores unchanged.
        for (i, v) in tpl2.data.iter_mut().enumerate() {
            *v = *v * scale + shift * (1 + i / 30) as f64;
        }
        let a = ncc_direct(&map, &tpl).unwrap();
        let b = ncc_direct(&map, &tpl2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.abs() <= 1.0 + 1e-12);
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn fill_outside_keeps_inside_and_mean(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 24;
        let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.5)).collect();
        let orig: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = orig.clone();
        fill_outside(&mut x, &mask);
        for c in 0..2 {
            let inside: Vec<f64> = (0..n).filter(|&i| mask[i]).map(|i| orig[c * n + i]).collect();
            let mean = inside.iter().sum::<f64>() / inside.len() as f64;
            for i in 0..n {
                let want = if mask[i] { orig[c * n + i] } else { mean };
                prop_assert!((x[c * n + i] - want).abs() < 1e-12);
            }
        }
    }
}
