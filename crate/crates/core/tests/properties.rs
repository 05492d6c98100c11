//! Property tests for the invariants the modules promise.

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sgjnd::eval::{delta_jnd, plcc, psnr};
use sgjnd::gev::{fit_gev, gev_target, GevParams};
use sgjnd::head::{aggregate, bce_loss, PatchAssessment};
use sgjnd::ingest::synthetic_texture;
use sgjnd::ladder::labels_from_jnd;
use sgjnd::patcher::{extract_patches, sample_origins};
use sgjnd::search::{naive_search, window_search, SearchSpec};
use sgjnd::tape::grouped_attention;
use sgjnd::{CodecSpec, ImageBuffer, LabelOrigin, LabelSequence, LevelRange};

fn sequence(bits: &[u8]) -> LabelSequence {
    let range = LevelRange::new(1, bits.len() as u32).unwrap();
    LabelSequence::from_levels(CodecSpec::jpeg().with_range(range), bits, LabelOrigin::Predicted).unwrap()
}

fn window_level(bits: &[u8], w: u32, theta: u32) -> Option<u32> {
    window_search(&sequence(bits), &SearchSpec::window(w, theta))
        .unwrap()
        .jnd_level
}

fn assessments() -> impl Strategy<Value = Vec<PatchAssessment<f64>>> {
    prop::collection::vec((-6.0..6.0f64, 0.01..5.0f64), 1..24).prop_map(|v| {
        v.into_iter()
            .map(|(score, weight)| PatchAssessment { score, weight })
            .collect()
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn image(w: usize, h: usize, seed: u64) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, 3, |x, y, c| {
        ((x as u64 * 31 + y as u64 * 17 + c as u64 * 7 + seed) % 256) as u8
    })
}

proptest! {
    #[test]
    fn ground_truth_labels_are_non_increasing(t in 1i64..=100) {
        let bits = labels_from_jnd(t, &CodecSpec::jpeg()).unwrap().bits();
        prop_assert!(bits.windows(2).all(|p| p[0] >= p[1]));
        prop_assert_eq!(bits.iter().filter(|&&b| b == 1).count() as i64, t - 1);
    }

    #[test]
    fn naive_returns_first_lossless_level(bits in prop::collection::vec(0u8..=1, 1..60)) {
        let got = naive_search(&sequence(&bits)).unwrap().jnd_level;
        let want = bits.iter().position(|&b| b == 0).map(|i| i as u32 + 1);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn window_matches_brute_force_on_long_sequences(
        bits in prop::collection::vec(0u8..=1, 10..100),
        w in 0u32..10,
        extra in 0u32..12,
    ) {
        let theta = extra.min(w + 1);
        let want = (0..bits.len())
            .filter(|&s| s + (w as usize) < bits.len())
            .find(|&s| bits[s..=s + w as usize].iter().map(|&b| u32::from(b)).sum::<u32>() <= theta)
            .map(|s| s as u32 + 1);
        prop_assert_eq!(window_level(&bits, w, theta), want);
    }

    #[test]
    fn raising_theta_never_raises_the_level(
        bits in prop::collection::vec(0u8..=1, 8..100),
        w in 0u32..7,
        theta in 0u32..7,
    ) {
        let theta = theta.min(w);
        let lo = window_level(&bits, w, theta);
        let hi = window_level(&bits, w, theta + 1);
        match (lo, hi) {
            (Some(a), Some(b)) => prop_assert!(b <= a),
            (Some(_), None) => prop_assert!(false, "a larger theta lost a qualifying window"),
            _ => {}
        }
    }

    #[test]
    fn aggregation_ignores_patch_order(a in assessments(), rot in 0usize..24) {
        let mut b = a.clone();
        let k = rot % b.len();
        b.rotate_left(k);
        b.reverse();
        let qa = aggregate(&a).unwrap().q_dist;
        let qb = aggregate(&b).unwrap().q_dist;
        prop_assert!((qa - qb).abs() <= 1e-12);
    }

    #[test]
    fn aggregation_is_weight_scale_invariant(a in assessments(), log_c in -6.0..6.0f64) {
        let c = 10f64.powf(log_c);
        let scaled: Vec<_> = a
            .iter()
            .map(|p| PatchAssessment { score: p.score, weight: p.weight * c })
            .collect();
        let d = (aggregate(&a).unwrap().q_dist - aggregate(&scaled).unwrap().q_dist).abs();
        prop_assert!(d <= 1e-9);
    }

    #[test]
    fn raising_one_score_never_lowers_q(a in assessments(), pick in 0usize..24, bump in 0.0..4.0f64) {
        let i = pick % a.len();
        let mut b = a.clone();
        b[i].score += bump;
        prop_assert!(aggregate(&b).unwrap().q_dist >= aggregate(&a).unwrap().q_dist);
    }

    #[test]
    fn bce_is_non_negative_and_minimal_at_perfect_predictions(
        pairs in prop::collection::vec((0.0..=1.0f64, 0u8..=1), 1..32),
    ) {
        let (q, gt): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        let l = bce_loss(&q, &gt).unwrap();
        prop_assert!(l >= 0.0);
        let perfect: Vec<f64> = gt.iter().map(|&g| f64::from(g)).collect();
        let floor = bce_loss(&perfect, &gt).unwrap();
        // only the probability clip separates a perfect prediction from zero
        prop_assert!((0.0..=1.1e-7).contains(&floor));
        prop_assert!(l >= floor);
    }

    #[test]
    fn gev_target_is_monotone_in_quantile(
        mu in 1.0..100.0f64,
        sigma in 0.5..20.0f64,
        xi in -0.5..0.5f64,
        q1 in 0.01..0.99f64,
        q2 in 0.01..0.99f64,
    ) {
        let p = GevParams::new(mu, sigma, xi).unwrap();
        let (a, b) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let range = LevelRange::default();
        prop_assert!(gev_target(&p, a, range) <= gev_target(&p, b, range));
    }

    #[test]
    fn synthetic_textures_vary_within_any_four_images(seed in any::<u64>(), start in 0usize..1000) {
        let mut seen: Vec<_> = (start..start + 4).map(|i| synthetic_texture(seed, i)).collect();
        seen.sort_by_key(|t| format!("{t:?}"));
        seen.dedup();
        prop_assert!(seen.len() >= 3);
    }

    #[test]
    fn patches_are_aligned_disjoint_and_seeded(
        w in 32usize..160,
        h in 32usize..160,
        s in 4usize..32,
        n_raw in 1usize..12,
        seed in any::<u64>(),
    ) {
        let n = n_raw.min((w / s) * (h / s)).max(1);
        let r = image(w, h, 1);
        let d = image(w, h, 2);
        let pairs = extract_patches(&r, &d, n, s, seed).unwrap();
        prop_assert_eq!(pairs.len(), n);
        for (i, p) in pairs.iter().enumerate() {
            let o = p.origin;
            prop_assert!(o.x + s <= w && o.y + s <= h);
            prop_assert_eq!(&p.ref_patch, &r.crop(o.x, o.y, s, s).unwrap());
            prop_assert_eq!(&p.dist_patch, &d.crop(o.x, o.y, s, s).unwrap());
            for q in &pairs[i + 1..] {
                prop_assert!(!o.overlaps(&q.origin, s));
            }
        }
        let again = extract_patches(&r, &d, n, s, seed).unwrap();
        prop_assert_eq!(pairs, again);
    }

    #[test]
    fn origin_sampling_is_seed_deterministic(seed in any::<u64>()) {
        let a = sample_origins(200, 120, 9, 24, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = sample_origins(200, 120, 9, 24, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn attention_rows_are_distributions(q in matrix(5, 8), k in matrix(7, 8), v in matrix(7, 4)) {
        let (_, probs) = grouped_attention(q.view(), k.view(), v.view(), 1, 2);
        for p in &probs {
            for row in p.rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn attention_is_invariant_to_kv_order(
        q in matrix(3, 4),
        k in matrix(6, 4),
        v in matrix(6, 5),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let kp = Array2::from_shape_fn((6, 4), |(i, j)| k[[perm[i], j]]);
        let vp = Array2::from_shape_fn((6, 5), |(i, j)| v[[perm[i], j]]);
        let (a, _) = grouped_attention(q.view(), k.view(), v.view(), 1, 1);
        let (b, _) = grouped_attention(q.view(), kp.view(), vp.view(), 1, 1);
        prop_assert!((&a - &b).iter().all(|d| d.abs() <= 1e-6));
    }

    #[test]
    fn plcc_is_invariant_to_positive_affine_maps(
        xy in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 3..40),
        a in 0.01..100.0f64,
        b in -100.0..100.0f64,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        if let Ok(r) = plcc(&x, &y) {
            let xm: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let r2 = plcc(&xm, &y).unwrap();
            prop_assert!((r - r2).abs() <= 1e-9);
        }
    }

    #[test]
    fn delta_jnd_is_symmetric(pg in prop::collection::vec((1u32..=100, 1u32..=100), 1..40)) {
        let (p, g): (Vec<u32>, Vec<u32>) = pg.into_iter().unzip();
        prop_assert_eq!(delta_jnd(&p, &g).unwrap(), delta_jnd(&g, &p).unwrap());
    }

    #[test]
    fn psnr_is_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (image(24, 16, s1 % 251), image(24, 16, s2 % 251));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gev_refit_is_bootstrap_stable(
        mu in 20.0..80.0f64,
        sigma in 2.0..15.0f64,
        xi in -0.3..0.3f64,
        seed in any::<u64>(),
    ) {
        let truth = GevParams::new(mu, sigma, xi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first: Vec<f64> = (0..500).map(|_| truth.sample(&mut rng)).collect();
        let fit = fit_gev(&first, 5).unwrap().params;
        let second: Vec<f64> = (0..500).map(|_| fit.sample(&mut rng)).collect();
        let refit = fit_gev(&second, 5).unwrap().params;
        // bounds sit several standard errors out at n = 500
        prop_assert!((refit.location - fit.location).abs() <= 0.25 * fit.scale, "{fit:?} {refit:?}");
        prop_assert!((refit.scale / fit.scale - 1.0).abs() <= 0.25, "{fit:?} {refit:?}");
        prop_assert!((refit.shape - fit.shape).abs() <= 0.2, "{fit:?} {refit:?}");
    }
}

/// On clean ground truth the window rule lands exactly `theta` levels below
/// the first lossless level whenever that window fits in the range.
#[test]
fn window_offset_on_clean_sequences_is_theta() {
    let codec = CodecSpec::jpeg();
    for t in 1..=100i64 {
        let seq = labels_from_jnd(t, &codec).unwrap();
        let naive = naive_search(&seq).unwrap().jnd_level.unwrap();
        for w in 0..=8u32 {
            for theta in 0..=w {
                let got = window_search(&seq, &SearchSpec::window(w, theta)).unwrap().jnd_level;
                let start = (t - i64::from(theta)).max(1);
                let want = (start + i64::from(w) <= 100).then_some(start as u32);
                assert_eq!(got, want, "t={t} w={w} theta={theta}");
                if let Some(g) = got {
                    assert_eq!(naive - g, theta.min(naive - 1));
                }
            }
        }
    }
}
