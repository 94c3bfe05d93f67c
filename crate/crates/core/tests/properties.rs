use std::path::Path;

use gapfill::field::{compute_stats, denormalize, normalize, FieldMeta, Transform};
use gapfill::gfd::{decode_gfd, encode_gfd};
use gapfill::metrics::{relative_error, rmsle};
use gapfill::tiling::{merge, plan_tiles};
use gapfill::var_solver::{cost, PriorModel, Problem};
use gapfill::GappyField;
use ndarray::{Array1, Array3};
use proptest::prelude::*;

fn gappy(dims: (usize, usize, usize)) -> impl Strategy<Value = GappyField> {
    let n = dims.0 * dims.1 * dims.2;
    (
        prop::collection::vec(1e-3f64..1e3, n),
        prop::collection::vec(prop::bool::weighted(0.8), n),
    )
        .prop_map(move |(v, m)| {
            GappyField::new(
                Array3::from_shape_vec(dims, v).unwrap(),
                Array3::from_shape_vec(dims, m).unwrap(),
                FieldMeta::default(),
            )
            .unwrap()
        })
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..4, 1usize..7, 1usize..7)
}

/// Domain length, patch length and minimum overlap along one axis.
fn axis() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..60)
        .prop_flat_map(|len| (Just(len), 1..=len.min(20)))
        .prop_flat_map(|(len, patch)| (Just(len), Just(patch), 0..patch))
}

proptest! {
    #[test]
    fn gfd_round_trip(f in dims().prop_flat_map(gappy)) {
        let bytes = encode_gfd(&f);
        let back = decode_gfd(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.valid(), f.valid());
        prop_assert_eq!(encode_gfd(&back), bytes);
        // The payload is single precision.
        for ((a, b), &ok) in back.values().iter().zip(f.values()).zip(f.valid()) {
            if ok {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
        }
    }

    #[test]
    fn normalization_round_trip(f in dims().prop_flat_map(gappy), log in any::<bool>()) {
        let space = if log { Transform::Log10 } else { Transform::Physical };
        let Ok(stats) = compute_stats(&f, space) else {
            // All-missing or constant draws have no statistics.
            return Ok(());
        };
        let back = denormalize(&normalize(&f, &stats).unwrap(), &stats).unwrap();
        for ((a, b), &ok) in back.values().iter().zip(f.values()).zip(f.valid()) {
            if ok {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rmsle_is_symmetric_and_scale_free(
        pairs in prop::collection::vec((1e-3f64..1e3, 1e-3f64..1e3), 1..20),
        c in 1e-3f64..1e3,
    ) {
        let p = Array1::from_iter(pairs.iter().map(|x| x.0));
        let t = Array1::from_iter(pairs.iter().map(|x| x.1));
        let m = Array1::from_elem(p.len(), true);
        let a = rmsle(&p, &t, &m).unwrap();
        prop_assert!((a - rmsle(&t, &p, &m).unwrap()).abs() <= 1e-12);
        let scaled = rmsle(&p.mapv(|v| v * c), &t.mapv(|v| v * c), &m).unwrap();
        prop_assert!((a - scaled).abs() <= 1e-9);
        prop_assert!(a >= 0.0);
        prop_assert!(relative_error(&t, &t, &m).unwrap() == 0.0);
    }

    #[test]
    fn tiles_cover_the_domain_with_the_requested_overlap(
        (h, ph, oh) in axis(), (w, pw, ow) in axis(),
    ) {
        let layout = plan_tiles(h, w, ph, pw, oh, ow).unwrap();
        prop_assert!(layout.coverage().iter().all(|&c| c >= 1));
        let (row, col) = layout.min_overlaps();
        prop_assert!(row.is_none_or(|o| o >= oh));
        prop_assert!(col.is_none_or(|o| o >= ow));
        prop_assert!(layout.origins.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn merge_ignores_patch_order(seed in any::<u64>(), f in gappy((2, 12, 14))) {
        let layout = plan_tiles(12, 14, 5, 6, 2, 3).unwrap();
        let patches: Vec<_> = layout.origins.iter().copied().zip(layout.split(&f).unwrap()).collect();
        let mut shuffled = patches.clone();
        // Fisher-Yates driven by the drawn seed.
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let ocean = f.ocean_mask();
        let a = merge(&layout, &patches, &ocean, f.meta.clone()).unwrap();
        let b = merge(&layout, &shuffled, &ocean, f.meta.clone()).unwrap();
        prop_assert_eq!(a.valid(), b.valid());
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        // Overlapping copies of one field merge back to it, gaps included.
        prop_assert_eq!(a.valid(), f.valid());
        for ((x, y), &ok) in a.values().iter().zip(f.values()).zip(f.valid()) {
            if ok {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs());
            }
        }
    }

    #[test]
    fn cost_is_nonnegative_and_zero_prior_is_a_squared_norm(
        f in gappy((2, 5, 5)),
        xs in prop::collection::vec(-3.0f64..3.0, 50),
    ) {
        let p = Problem::from_field(&f);
        let x = Array3::from_shape_vec((2, 5, 5), xs).unwrap();
        let ocean = f.ocean_mask();
        for prior in [PriorModel::Zero, PriorModel::Diffusion { nu: 0.3 }] {
            prop_assert!(cost(&x, &p, &prior, 1.0, 1.0).unwrap() >= 0.0);
        }
        // With no data weight the zero prior penalizes the sea part of x.
        let sea_norm: f64 = x
            .indexed_iter()
            .filter(|((_, i, j), _)| ocean[[*i, *j]])
            .map(|(_, v)| v * v)
            .sum();
        let u = cost(&x, &p, &PriorModel::Zero, 0.0, 1.0).unwrap();
        prop_assert!((u - sea_norm).abs() <= 1e-9 * sea_norm.max(1.0));
    }
}
