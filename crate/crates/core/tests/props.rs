//! Property tests for cross-module invariants.

use proptest::prelude::*;

use dds_uda::maskgen::{binarize_topk, generate_mask};
use dds_uda::metrics::{dice_coeff, fill_holes, hd95};
use dds_uda::mixing::{mix_images, mix_labels, MixDirection};
use dds_uda::model::{argmax_label, ema_update, forward, ScorerParams};
use dds_uda::spectral::{batch_mean_amplitude, decompose, dft2, fft2, ifft2, stylize_target, LowFreqMask};
use dds_uda::synthdata::{gen_dataset, render_sample, DomainStyle, GenConfig, SampleSpec, Split};
use dds_uda::maskgen::{DynamicMask, MaskMeta};
use dds_uda::{BinaryMask, Image, LabelMap, ProbMap, Rng};

fn image_strategy(h: usize, w: usize, c: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0f64..1.0, h * w * c)
        .prop_map(move |data| Image::new(h, w, c, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn image_clamp_is_idempotent(values in proptest::collection::vec(-10.0f64..10.0, 16)) {
        let img = Image::new(4, 4, 1, values).unwrap();
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = Image::new(4, 4, 1, img.data().to_vec()).unwrap();
        prop_assert_eq!(img.data(), again.data());
    }

    #[test]
    fn fft_roundtrip_and_parseval(img in image_strategy(8, 8, 1)) {
        let spec = fft2(&img).unwrap();
        let slow = dft2(&img);
        for (a, b) in spec.data().iter().zip(slow.data()) {
            prop_assert!((a - b).norm() < 1e-9);
        }
        let back = ifft2(&spec).unwrap();
        for (a, &b) in back.iter().zip(img.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let spatial: f64 = img.data().iter().map(|v| v * v).sum();
        let freq: f64 = spec.data().iter().map(|z| z.norm_sqr()).sum::<f64>() / 64.0;
        prop_assert!((spatial - freq).abs() <= 1e-6 * spatial.max(1e-9));
    }

    #[test]
    fn topk_popcount_is_exact(seed in 0u64..1000, lambda in 0.05f64..0.5) {
        let mut rng = Rng::new(seed);
        let field: Vec<f64> = (0..64).map(|_| rng.gaussian()).collect();
        let k = (lambda * 64.0).floor() as usize;
        prop_assume!(k >= 1);
        let mask = binarize_topk(&field, 8, 8, lambda).unwrap();
        prop_assert_eq!(mask.popcount(), k);
    }

    #[test]
    fn generated_mask_determinism(seed in 0u64..500, d in 0.0f64..6.0) {
        let a = generate_mask(16, 16, d, (0.1, 0.5), &mut Rng::new(seed)).unwrap();
        let b = generate_mask(16, 16, d, (0.1, 0.5), &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a.mask().bits(), b.mask().bits());
        prop_assert_eq!(
            a.popcount(),
            (a.meta().lambda_k * 256.0).floor() as usize
        );
    }

    #[test]
    fn mix_respects_mask_per_pixel(seed in 0u64..500) {
        let mut rng = Rng::new(seed);
        let a = Image::new(4, 4, 1, (0..16).map(|_| rng.uniform()).collect()).unwrap();
        let b = Image::new(4, 4, 1, (0..16).map(|_| rng.uniform()).collect()).unwrap();
        let ya = LabelMap::new(4, 4, (0..16).map(|_| rng.index(3) as u8).collect()).unwrap();
        let yb = LabelMap::new(4, 4, (0..16).map(|_| rng.index(3) as u8).collect()).unwrap();
        let bits: Vec<u8> = (0..16).map(|_| (rng.uniform() < 0.5) as u8).collect();
        let mask = DynamicMask::from_parts(
            BinaryMask::new(4, 4, bits).unwrap(),
            MaskMeta { d: 0.0, lambda_k: 0.0, seed },
        );
        for direction in [MixDirection::SrcOnMask, MixDirection::TgtOnMask] {
            let img = mix_images(&a, &b, &mask, direction).unwrap();
            let lbl = mix_labels(&ya, &yb, &mask, direction).unwrap();
            for r in 0..4 {
                for c in 0..4 {
                    let take_src = (mask.get(r, c) == 1) == (direction == MixDirection::SrcOnMask);
                    // Image and label pick the same side at every pixel.
                    let (want_img, want_lbl) = if take_src {
                        (a.get(r, c, 0), ya.get(r, c))
                    } else {
                        (b.get(r, c, 0), yb.get(r, c))
                    };
                    prop_assert_eq!(img.get(r, c, 0), want_img);
                    prop_assert_eq!(lbl.get(r, c), want_lbl);
                }
            }
        }
    }

    #[test]
    fn self_mix_is_identity(seed in 0u64..200) {
        let mut rng = Rng::new(seed);
        let a = Image::new(4, 4, 3, (0..48).map(|_| rng.uniform()).collect()).unwrap();
        let bits: Vec<u8> = (0..16).map(|_| (rng.uniform() < 0.5) as u8).collect();
        let mask = DynamicMask::from_parts(
            BinaryMask::new(4, 4, bits).unwrap(),
            MaskMeta { d: 0.0, lambda_k: 0.0, seed },
        );
        prop_assert_eq!(mix_images(&a, &a, &mask, MixDirection::SrcOnMask).unwrap(), a);
    }

    #[test]
    fn dice_and_hd95_are_symmetric(seed in 0u64..200) {
        let mut rng = Rng::new(seed);
        let random_mask = |rng: &mut Rng| -> BinaryMask {
            loop {
                let bits: Vec<u8> = (0..36).map(|_| (rng.uniform() < 0.4) as u8).collect();
                let m = BinaryMask::new(6, 6, bits).unwrap();
                if m.popcount() > 0 {
                    return m;
                }
            }
        };
        let a = random_mask(&mut rng);
        let b = random_mask(&mut rng);
        prop_assert_eq!(dice_coeff(&a, &b).unwrap(), dice_coeff(&b, &a).unwrap());
        prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
        let filled = fill_holes(&a);
        let twice = fill_holes(&filled);
        prop_assert_eq!(twice.bits(), filled.bits());
    }

    #[test]
    fn prediction_masks_stay_nested(seed in 0u64..100) {
        let params = ScorerParams::init(3, &mut Rng::new(seed));
        let mut rng = Rng::new(seed ^ 0xFF);
        let img = Image::new(8, 8, 3, (0..192).map(|_| rng.uniform()).collect()).unwrap();
        let labels = argmax_label(&forward(&params, &img).unwrap().0);
        let od = labels.od_mask();
        let oc = labels.oc_mask();
        for (o, d) in oc.bits().iter().zip(od.bits()) {
            prop_assert!(o <= d);
        }
    }

    #[test]
    fn stylize_preserves_phase_at_observable_frequencies(seed in 0u64..50) {
        let mut rng = Rng::new(seed);
        let x = Image::new(8, 8, 1, (0..64).map(|_| rng.uniform()).collect()).unwrap();
        let donor = Image::new(8, 8, 1, (0..64).map(|_| rng.uniform()).collect()).unwrap();
        let mean = batch_mean_amplitude(std::slice::from_ref(&donor)).unwrap();
        let mask = LowFreqMask::new(8, 8, 0.3).unwrap();
        let _ = stylize_target(&x, &mean, &mask).unwrap();
        // Pre-clamp splice: phase must be untouched.
        let ap_in = decompose(&fft2(&x).unwrap());
        let mut amp = ap_in.amplitude.clone();
        for u in 0..8 {
            for v in 0..8 {
                if mask.bit_natural(u, v) == 0 {
                    amp[u * 8 + v] = mean.data[u * 8 + v];
                }
            }
        }
        let spliced = dds_uda::spectral::AmplitudePhase {
            h: 8, w: 8, c: 1,
            amplitude: amp,
            phase: ap_in.phase.clone(),
        };
        let out = decompose(&dds_uda::spectral::recompose(&spliced));
        for i in 0..64 {
            if out.amplitude[i] > 1e-9 {
                prop_assert!((out.phase[i] - ap_in.phase[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ema_is_a_contraction(seed in 0u64..100, alpha in 0.0f64..1.0) {
        let student = ScorerParams::init(1, &mut Rng::new(seed));
        let mut teacher = ScorerParams::init(1, &mut Rng::new(seed ^ 1));
        let before = teacher.max_abs_diff(&student);
        ema_update(&mut teacher, &student, alpha).unwrap();
        let after = teacher.max_abs_diff(&student);
        prop_assert!((after - alpha * before).abs() < 1e-9 * before.max(1.0));
    }

    #[test]
    fn synthetic_labels_have_both_structures(seed in 0u64..100) {
        let style = DomainStyle::derive(seed, seed as u32 % 4);
        let mut rng = Rng::new(seed ^ 0xABCD);
        let spec = SampleSpec::sample(32, 32, &mut rng);
        let (_, labels) = render_sample(&style, &spec, 32, 32, &mut rng).unwrap();
        let od = labels.od_mask().popcount();
        let oc = labels.oc_mask().popcount();
        prop_assert!(oc >= 1);
        prop_assert!(od - oc >= 1, "ring must be nonempty");
    }

    #[test]
    fn probmap_simplex_holds_for_forward_outputs(seed in 0u64..50) {
        let params = ScorerParams::init(3, &mut Rng::new(seed));
        let mut rng = Rng::new(seed ^ 0xF00);
        let img = Image::new(4, 4, 3, (0..48).map(|_| rng.uniform()).collect()).unwrap();
        let (probs, _) = forward(&params, &img).unwrap();
        // Construction re-validates the simplex invariant.
        let again = ProbMap::new(4, 4, probs.data().to_vec());
        prop_assert!(again.is_ok());
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        let fa = i as f64 / a.len() as f64;
        let fb = j as f64 / b.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

#[test]
fn domain_styles_are_visibly_separated() {
    // Mean-intensity distributions of distinct domains must differ with a KS
    // statistic above 0.5 over 50 samples.
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        seed: 77,
        n_domains: 3,
        n_per_domain: 50,
        h: 32,
        w: 32,
    };
    let manifest = gen_dataset(&cfg, dir.path()).unwrap();
    let means_of = |domain: u32| -> Vec<f64> {
        let mut out = Vec::new();
        for split in [Split::Train, Split::Test] {
            for row in manifest.select(domain, split) {
                let (img, _) = manifest.load_pair(row).unwrap();
                out.push(img.mean());
            }
        }
        out
    };
    let all: Vec<Vec<f64>> = (0..3).map(means_of).collect();
    for i in 0..3 {
        for j in i + 1..3 {
            let mut a = all[i].clone();
            let mut b = all[j].clone();
            let ks = ks_statistic(&mut a, &mut b);
            assert!(ks > 0.5, "domains {i} vs {j}: KS = {ks}");
        }
    }
}

#[test]
fn mask_components_shrink_as_attenuation_grows() {
    // Mean 4-connected component count is non-increasing across
    // d in {1, 2, 3, 5} over 100 seeds.
    let mean_components = |d: f64| -> f64 {
        let mut total = 0usize;
        for seed in 0..100u64 {
            let m = generate_mask(64, 64, d, (0.3, 0.3001), &mut Rng::new(seed)).unwrap();
            total += m.mask().component_count();
        }
        total as f64 / 100.0
    };
    let counts: Vec<f64> = [1.0, 2.0, 3.0, 5.0].iter().map(|&d| mean_components(d)).collect();
    for pair in counts.windows(2) {
        assert!(
            pair[1] <= pair[0],
            "component counts must be non-increasing in d: {counts:?}"
        );
    }
}

#[test]
fn dice_stays_in_range_under_dilation() {
    let mut rng = Rng::new(123);
    for _ in 0..50 {
        let bits: Vec<u8> = (0..64).map(|_| (rng.uniform() < 0.4) as u8).collect();
        let a = BinaryMask::new(8, 8, bits).unwrap();
        let bits: Vec<u8> = (0..64).map(|_| (rng.uniform() < 0.4) as u8).collect();
        let b = BinaryMask::new(8, 8, bits).unwrap();
        // One-pixel dilation of b.
        let mut dilated = b.bits().to_vec();
        for r in 0..8 {
            for c in 0..8 {
                if b.get(r, c) == 1 {
                    if r > 0 { dilated[(r - 1) * 8 + c] = 1; }
                    if r < 7 { dilated[(r + 1) * 8 + c] = 1; }
                    if c > 0 { dilated[r * 8 + c - 1] = 1; }
                    if c < 7 { dilated[r * 8 + c + 1] = 1; }
                }
            }
        }
        let big = BinaryMask::new(8, 8, dilated).unwrap();
        for m in [&b, &big] {
            let d = dice_coeff(&a, m).unwrap();
            assert!((0.0..=100.0).contains(&d));
        }
    }
}

#[test]
fn all_background_predictor_is_excluded_via_empty_masks() {
    // Zero parameters give uniform maps; argmax ties resolve to background,
    // so every predicted OD/OC mask is empty: HD95 is undefined for every
    // image and the undefined count equals the image count.
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        seed: 11,
        n_domains: 2,
        n_per_domain: 5,
        h: 32,
        w: 32,
    };
    let manifest = gen_dataset(&cfg, dir.path()).unwrap();
    let params = ScorerParams::zeros(3);
    let report = dds_uda::metrics::evaluate(&params, &manifest, 0, Split::Test, false).unwrap();
    assert_eq!(report.undefined, report.n_images);
    assert!(report.hd95_od.is_none() && report.hd95_oc.is_none());
    assert_eq!(report.dice_od, 0.0);
}

#[test]
fn dataset_tree_is_a_pure_function_of_seed_and_config() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        seed: 99,
        n_domains: 2,
        n_per_domain: 6,
        h: 32,
        w: 32,
    };
    gen_dataset(&cfg, dir_a.path()).unwrap();
    gen_dataset(&cfg, dir_b.path()).unwrap();
    let manifest = std::fs::read(dir_a.path().join("manifest.csv")).unwrap();
    assert_eq!(
        manifest,
        std::fs::read(dir_b.path().join("manifest.csv")).unwrap()
    );
    for entry in std::fs::read_dir(dir_a.path().join("domain0")).unwrap() {
        let p = entry.unwrap().path();
        let rel = p.strip_prefix(dir_a.path()).unwrap();
        assert_eq!(
            std::fs::read(&p).unwrap(),
            std::fs::read(dir_b.path().join(rel)).unwrap()
        );
    }
}
