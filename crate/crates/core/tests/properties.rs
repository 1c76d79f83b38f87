use std::collections::HashMap;

use proptest::prelude::*;

use calcscope::collagen::two_means_1d;
use calcscope::metrics::{confusion, dsc, jsc};
use calcscope::morphology::{dilate_ball, erode_ball, open_ball, Grid3};
use calcscope::particles::{label_components, Connectivity};
use calcscope::phenotype::{dbscan, ClusterParams};
use calcscope::volume::{load_mask, load_stack, save_mask, save_volume, BinaryMask, VoxelVolume};

fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(nx, ny, nz)| {
        prop::collection::vec(any::<bool>(), nx * ny * nz)
            .prop_map(move |bits| BinaryMask::new(nx, ny, nz, bits).unwrap())
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(nx, ny, nz)| {
        let n = nx * ny * nz;
        (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)).prop_map(
            move |(a, b)| {
                (
                    BinaryMask::new(nx, ny, nz, a).unwrap(),
                    BinaryMask::new(nx, ny, nz, b).unwrap(),
                )
            },
        )
    })
}

fn grid(m: &BinaryMask) -> Grid3 {
    let (nx, ny, nz) = m.dims();
    Grid3 {
        nx,
        ny,
        nz,
        bits: m.bits().to_vec(),
    }
}

fn subset(a: &Grid3, b: &Grid3) -> bool {
    a.bits.iter().zip(&b.bits).all(|(x, y)| !x || *y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlap_scores_are_bounded_symmetric_and_linked((a, b) in mask_pair(12)) {
        let ab = confusion(&a, &b).unwrap();
        let ba = confusion(&b, &a).unwrap();
        let (d, j) = (dsc(&ab), jsc(&ab));
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert_eq!(d, dsc(&ba));
        prop_assert!(j <= d);
        prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
        prop_assert_eq!(dsc(&confusion(&a, &a).unwrap()), 1.0);
    }

    #[test]
    fn components_cover_foreground_and_six_refines_twenty_six(m in mask_strategy(10)) {
        let six = label_components(&m, Connectivity::Six);
        let full = label_components(&m, Connectivity::TwentySix);
        let mut refine: HashMap<u32, u32> = HashMap::new();
        for (i, &bit) in m.bits().iter().enumerate() {
            prop_assert_eq!(bit, six.labels[i] != 0);
            prop_assert_eq!(bit, full.labels[i] != 0);
            if bit {
                let parent = *refine.entry(six.labels[i]).or_insert(full.labels[i]);
                prop_assert_eq!(parent, full.labels[i]);
            }
        }
        let max = full.labels.iter().copied().max().unwrap_or(0);
        let distinct: std::collections::HashSet<u32> = full.labels.iter().copied().filter(|&l| l != 0).collect();
        prop_assert_eq!(distinct.len(), max as usize);
    }

    #[test]
    fn opening_is_anti_extensive_and_idempotent(m in mask_strategy(12), r in 0.5f64..2.5) {
        let g = grid(&m);
        let o = open_ball(&g, r);
        prop_assert!(subset(&o, &g));
        prop_assert_eq!(open_ball(&o, r), o.clone());
        prop_assert!(subset(&erode_ball(&g, r), &g));
        prop_assert!(subset(&g, &dilate_ball(&g, r)));
    }

    #[test]
    fn dbscan_core_neighbors_share_a_cluster(
        pts in prop::collection::vec(prop::array::uniform3(0.0f64..50.0), 1..80),
        eps in 1.0f64..15.0,
        min_pts in 2usize..6,
    ) {
        let labels = dbscan(&pts, &ClusterParams { eps_um: eps, min_pts }).unwrap();
        let d2 = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
        let nb = |i: usize| (0..pts.len()).filter(|&j| d2(pts[i], pts[j]) <= eps * eps).count();
        for i in 0..pts.len() {
            if nb(i) < min_pts {
                continue;
            }
            prop_assert!(labels[i].is_some());
            for j in 0..pts.len() {
                if nb(j) >= min_pts && d2(pts[i], pts[j]) <= eps * eps {
                    prop_assert_eq!(labels[i], labels[j]);
                }
            }
        }
        // ids are dense and ordered by first appearance
        let mut next = 0;
        for l in labels.iter().flatten() {
            prop_assert!(*l <= next);
            if *l == next {
                next += 1;
            }
        }
    }

    #[test]
    fn two_means_matches_exhaustive_split(v in prop::collection::vec(0.0f64..1.0, 2..40)) {
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let sse = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        let best = (1..s.len())
            .filter(|&k| s[k - 1] != s[k])
            .map(|k| sse(&s[..k]) + sse(&s[k..]))
            .fold(f64::INFINITY, f64::min);
        match two_means_1d(&v) {
            None => prop_assert!(s[0] == s[s.len() - 1]),
            Some((t, lo, hi)) => {
                let (low, high): (Vec<f64>, Vec<f64>) = s.iter().partition(|&&x| x <= t);
                prop_assert!(!low.is_empty() && !high.is_empty());
                prop_assert!((sse(&low) + sse(&high) - best).abs() <= 1e-9);
                prop_assert!(lo < t && t < hi);
            }
        }
    }

    #[test]
    fn raw_round_trips(m in mask_strategy(8), spacing in 0.5f64..20.0) {
        let dir = tempfile::tempdir().unwrap();
        let (nx, ny, nz) = m.dims();
        let data: Vec<f32> = m.bits().iter().enumerate().map(|(i, &b)| if b { 1.0 } else { (i % 7) as f32 / 7.0 }).collect();
        let v = VoxelVolume::new(nx, ny, nz, spacing, data).unwrap();
        let vp = dir.path().join("v.raw");
        save_volume(&v, &vp).unwrap();
        prop_assert_eq!(load_stack(&vp, None).unwrap(), v);
        let mp = dir.path().join("m.raw");
        save_mask(&m, spacing, &mp).unwrap();
        let (back, sp) = load_mask(&mp).unwrap();
        prop_assert_eq!(back, m);
        prop_assert_eq!(sp, spacing);
    }
}
