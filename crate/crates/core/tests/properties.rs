mod common;

use common::*;
use fragdiff_core::align::{filter, rank1_matches, top_count, MatchPair, SelectionRule};
use fragdiff_core::diffusion::{solve_full, InitialState, QueryScores, ScoreTable};
use fragdiff_core::features::similarity;
use fragdiff_core::graph::{self, build_mutual_knn};
use fragdiff_core::metrics::{self, DEFAULT_GAMMA1, DEFAULT_GAMMA2};
use fragdiff_core::patch::{patchify, slide_windows, stitch_counts, PadPolicy, TilingLayout};
use fragdiff_core::pseudolabel::{fuse, normalize_label, LABEL_PEAK};
use fragdiff_core::{FragmentId, Raster, RasterKind};
use proptest::prelude::*;

fn raster(h: usize, w: usize, max: f64) -> impl Strategy<Value = Raster> {
    prop::collection::vec(0.0..max, h * w)
        .prop_map(move |v| Raster::new(h, w, RasterKind::DensityMap, v).unwrap())
}

fn sized_raster(max_side: usize) -> impl Strategy<Value = Raster> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| raster(h, w, 1.0))
}

fn raster_pair(max_side: usize) -> impl Strategy<Value = (Raster, Raster)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| (raster(h, w, 1.0), raster(h, w, 1.0)))
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, d).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn expected_cells(extent: usize, window: usize, stride: usize) -> usize {
    if extent <= window {
        1
    } else {
        1 + (extent - window).div_ceil(stride)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patch_grid_count_and_ids(
        r in sized_raster(40),
        win in (1usize..12, 1usize..12),
        stride in (1usize..12, 1usize..12),
    ) {
        let patches = slide_windows(&r, 3, win, stride, PadPolicy::Edge).unwrap();
        let rows = expected_cells(r.height(), win.0, stride.0);
        let cols = expected_cells(r.width(), win.1, stride.1);
        prop_assert_eq!(patches.len(), rows * cols);
        for (k, (p, raster)) in patches.iter().enumerate() {
            prop_assert_eq!(p.id, FragmentId::new(3, (k / cols) as u32, (k % cols) as u32));
            prop_assert_eq!(raster.dims(), win);
            prop_assert_eq!((p.top, p.left), (p.id.row as usize * stride.0, p.id.col as usize * stride.1));
        }
    }

    #[test]
    fn unpadded_patches_copy_pixels(
        (win, stride, rows, cols) in (1usize..6, 1usize..6, 1usize..5, 1usize..5),
        seed in any::<u64>(),
    ) {
        let (h, w) = (win + (rows - 1) * stride, win + (cols - 1) * stride);
        let values: Vec<f64> = (0..h * w).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
        let r = Raster::new(h, w, RasterKind::ImageGray, values).unwrap();
        let patches = slide_windows(&r, 0, (win, win), (stride, stride), PadPolicy::None).unwrap();
        prop_assert_eq!(patches.len(), rows * cols);
        for (p, patch) in &patches {
            for i in 0..win {
                for j in 0..win {
                    prop_assert_eq!(patch.get(i, j), r.get(p.top + i, p.left + j));
                }
            }
        }
    }

    #[test]
    fn stitched_tiles_conserve_mass(
        (win, a, b) in (1usize..8, 1usize..5, 1usize..5),
        seed in any::<u64>(),
    ) {
        let (h, w) = (a * win, b * win);
        let values: Vec<f64> = (0..h * w).map(|i| ((i as u64 ^ seed) % 97) as f64 / 97.0).collect();
        let r = Raster::new(h, w, RasterKind::DensityMap, values).unwrap();
        let set = patchify(&[(0, r.clone())], (win, win), (win, win), PadPolicy::None).unwrap();
        let counts: Vec<_> = set.patches.iter().map(|(p, x)| (*p, metrics::count(x))).collect();
        let total = stitch_counts(&counts, TilingLayout::tiles((win, win))).unwrap();
        prop_assert!((total - r.sum()).abs() <= 1e-9 * r.sum().max(1.0));
    }

    #[test]
    fn similarity_symmetric_bounded_monotone(x in vector(6), y in vector(6), z in vector(6), gamma in 1.0f64..6.0) {
        let sxy = similarity(&x, &y, gamma).unwrap();
        prop_assert_eq!(sxy, similarity(&y, &x, gamma).unwrap());
        prop_assert!((0.0..=1.0).contains(&sxy));
        prop_assert!((similarity(&x, &x, gamma).unwrap() - 1.0).abs() < 1e-12);
        let sxz = similarity(&x, &z, gamma).unwrap();
        let (cxy, cxz) = (cosine(&x, &y), cosine(&x, &z));
        if cxy < cxz - 1e-9 {
            prop_assert!(sxy <= sxz);
        }
        // a larger exponent never raises a score in [0, 1]
        prop_assert!(similarity(&x, &y, gamma + 1.0).unwrap() <= sxy + 1e-15);
    }

    #[test]
    fn graph_and_normalized_are_symmetric(seed in any::<u64>(), n in 6usize..40, k in 1usize..8) {
        let set = random_set(seed, n, 4);
        let g = build_mutual_knn(&set, k.min(n - 1), 3.0).unwrap();
        prop_assert!(g.matrix.is_symmetric());
        let s = graph::normalize(&g);
        prop_assert!(s.matrix.is_symmetric());
        for i in 0..n {
            prop_assert_eq!(g.matrix.get(i, i), 0.0);
            prop_assert_eq!(s.matrix.get(i, i), 0.0);
            prop_assert!(g.matrix.row_len(i) <= k);
            for (_, v) in s.matrix.row(i) {
                prop_assert!(v > 0.0 && v <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn power_of_two_scaling_preserves_scores(seed in any::<u64>(), e in -8i32..8) {
        let n = 24;
        let set = random_set(seed, n, 4);
        let s = graph::normalize(&build_mutual_knn(&set, 5, 3.0).unwrap());
        let f0 = InitialState::new((0..n).map(|i| ((i * 7 + 3) % 5) as f64).collect()).unwrap();
        let c = 2f64.powi(e);
        let gallery: Vec<usize> = (n / 2..n).collect();
        let a = solve_full(&s, &f0, &gallery, 0.9, 1e-10, 1000).unwrap();
        let b = solve_full(&s, &f0.scaled(c).unwrap(), &gallery, 0.9, 1e-10, 1000).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert_eq!(x * c, *y);
        }
    }

    #[test]
    fn rank1_invariant_under_increasing_maps(
        rows in prop::collection::vec(prop::collection::vec(0.001f64..1.0, 1..8), 1..10),
    ) {
        let table = |f: &dyn Fn(f64) -> f64| ScoreTable {
            rows: rows
                .iter()
                .enumerate()
                .map(|(q, entries)| QueryScores {
                    query: Some(FragmentId::new(q as u32, 0, 0)),
                    entries: entries.iter().enumerate().map(|(j, &v)| (FragmentId::new(j as u32, 1, 0), f(v))).collect(),
                })
                .collect(),
        };
        for entries in &rows {
            let mut sorted = entries.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-6));
        }
        let base = rank1_matches(&table(&|v| v)).unwrap();
        let mapped = rank1_matches(&table(&|v| v.powi(3) + 2.0 * v.exp())).unwrap();
        let pick = |r: &fragdiff_core::align::RankOne| {
            let mut p: Vec<_> = r.pairs.iter().map(|m| (m.target_id, m.source_id)).collect();
            p.sort();
            p
        };
        prop_assert_eq!(pick(&base), pick(&mapped));
    }

    #[test]
    fn filters_keep_ordered_subsets(scores in prop::collection::vec(0.0f64..1.0, 0..40), p in 0.01f64..=1.0, lambda in 0.0f64..1.0) {
        let pairs: Vec<MatchPair> = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| MatchPair {
                target_id: FragmentId::new(i as u32, 0, 0),
                source_id: FragmentId::new(0, 0, i as u32),
                score,
            })
            .collect();
        let all = filter(&pairs, SelectionRule::Threshold { lambda: 0.0 }).unwrap();
        prop_assert_eq!(all.pairs.len(), pairs.len());
        prop_assert!(all.pairs.windows(2).all(|w| w[0].score >= w[1].score));

        let thr = filter(&pairs, SelectionRule::Threshold { lambda }).unwrap();
        prop_assert_eq!(thr.pairs.len(), scores.iter().filter(|&&s| s >= lambda).count());
        prop_assert_eq!(&thr.pairs[..], &all.pairs[..thr.pairs.len()]);

        let top = filter(&pairs, SelectionRule::TopPercent { p }).unwrap();
        prop_assert_eq!(top.pairs.len(), top_count(p, pairs.len()));
        prop_assert_eq!(&top.pairs[..], &all.pairs[..top.pairs.len()]);
        prop_assert_eq!(top.warning.is_some(), top.pairs.is_empty());
    }

    #[test]
    fn fusion_stays_between_inputs((g, p) in raster_pair(12), w in 0.0f64..=1.0) {
        let phi = fuse(&g, &p, w).unwrap();
        for ((&f, &a), &b) in phi.values().iter().zip(g.values()).zip(p.values()) {
            prop_assert!(f >= a.min(b) - 1e-15 && f <= a.max(b) + 1e-15);
        }
        prop_assert_eq!(fuse(&g, &p, 0.0).unwrap(), g.clone());
        prop_assert_eq!(fuse(&g, &p, 1.0).unwrap(), p.clone());
    }

    #[test]
    fn labels_are_blank_or_peak_at_255(phi in sized_raster(12), scale in 0.01f64..4.0) {
        let phi = Raster::new(phi.height(), phi.width(), RasterKind::DensityMap, phi.values().iter().map(|v| v * scale).collect()).unwrap();
        let label = normalize_label(&phi);
        prop_assert!(label.values().iter().all(|&v| (0.0..=LABEL_PEAK).contains(&v)));
        if phi.max() < 0.1 {
            prop_assert!(label.values().iter().all(|&v| v == 0.0));
        } else {
            prop_assert_eq!(label.max(), LABEL_PEAK);
        }
    }

    #[test]
    fn labels_ignore_positive_scaling(phi in sized_raster(12), c in 1.0f64..50.0) {
        prop_assume!(phi.max() >= 0.1);
        let scaled = Raster::new(phi.height(), phi.width(), RasterKind::DensityMap, phi.values().iter().map(|v| v * c).collect()).unwrap();
        let (a, b) = (normalize_label(&phi), normalize_label(&scaled));
        prop_assert!(max_abs_diff(a.values(), b.values()) <= 1e-9 * LABEL_PEAK);
    }

    #[test]
    fn ssim_symmetric_and_bounded((e, g) in raster_pair(12)) {
        let a = metrics::ssim(&e, &g, DEFAULT_GAMMA1, DEFAULT_GAMMA2).unwrap();
        let b = metrics::ssim(&g, &e, DEFAULT_GAMMA1, DEFAULT_GAMMA2).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a <= 1.0 + 1e-12);
        prop_assert!((metrics::ssim(&e, &e, DEFAULT_GAMMA1, DEFAULT_GAMMA2).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ssim_drops_after_perturbation(e in sized_raster(12), idx in any::<prop::sample::Index>(), delta in 0.05f64..1.0) {
        let mut v = e.values().to_vec();
        let i = idx.index(v.len());
        v[i] += delta;
        let y = Raster::new(e.height(), e.width(), RasterKind::DensityMap, v).unwrap();
        prop_assert!(metrics::ssim(&e, &y, DEFAULT_GAMMA1, DEFAULT_GAMMA2).unwrap() < 1.0);
    }

    #[test]
    fn issim_non_negative(
        (e, g) in raster_pair(20),
        heads in prop::collection::vec((0usize..20, 0usize..20), 0..6),
    ) {
        let heads: Vec<_> = heads.into_iter().map(|(r, c)| (r % e.height(), c % e.width())).collect();
        let l = metrics::issim_loss(&e, &g, &heads, (16, 16), DEFAULT_GAMMA1, DEFAULT_GAMMA2).unwrap();
        prop_assert!(l >= -1e-12);
        let same = metrics::issim_loss(&e, &e, &heads, (16, 16), DEFAULT_GAMMA1, DEFAULT_GAMMA2).unwrap();
        prop_assert!(same.abs() <= 1e-12);
    }

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((0.0f64..1e4, 0.0f64..1e4), 1..50)) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mae = metrics::mae(&p, &g).unwrap();
        let rmse = metrics::rmse(&p, &g).unwrap();
        prop_assert!(mae >= 0.0);
        prop_assert!(rmse >= mae - 1e-9 * mae.max(1.0));
    }

    #[test]
    fn count_is_linear((x, y) in raster_pair(16), a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let v: Vec<f64> = x.values().iter().zip(y.values()).map(|(p, q)| a * p + b * q).collect();
        let z = Raster::new(x.height(), x.width(), RasterKind::DensityMap, v).unwrap();
        let expected = a * metrics::count(&x) + b * metrics::count(&y);
        prop_assert!((metrics::count(&z) - expected).abs() <= 1e-9 * expected.max(1.0));
    }

    #[test]
    fn fgr1_round_trip(r in sized_raster(16), kind in prop_oneof![Just(RasterKind::ImageGray), Just(RasterKind::DensityMap), Just(RasterKind::LabelMap)]) {
        let r = r.with_kind(kind);
        let back = Raster::from_fgr1(&r.to_fgr1()).unwrap();
        prop_assert_eq!(back.dims(), r.dims());
        prop_assert_eq!(back.kind(), kind);
        for (a, b) in back.values().iter().zip(r.values()) {
            prop_assert_eq!(*a, f64::from(*b as f32));
        }
    }

    #[test]
    fn fragment_id_round_trip(image in any::<u32>(), row in any::<u32>(), col in any::<u32>()) {
        let id = FragmentId::new(image, row, col);
        prop_assert_eq!(id.to_string().parse::<FragmentId>().unwrap(), id);
    }
}
