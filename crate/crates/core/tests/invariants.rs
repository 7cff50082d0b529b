//! Randomized invariant checks over the geometry, resampling, and RNG
//! primitives. Each property encodes a rule the rest of the pipeline
//! leans on implicitly.

use proptest::prelude::*;

use wsol_core::augment::bilinear_resize_buf;
use wsol_core::cam::{localize, BBox, Connectivity, Heatmap};
use wsol_core::eval::iou;
use wsol_core::rng::RngStream;
use wsol_core::train::{lr_at_epoch, TrainConfig};

fn arb_bbox(side: usize) -> impl Strategy<Value = BBox> {
    (0..side, 0..side).prop_flat_map(move |(x0, y0)| {
        (Just(x0), Just(y0), x0 + 1..=side, y0 + 1..=side)
            .prop_map(|(x0, y0, x1, y1)| BBox::new(x0, y0, x1, y1).unwrap())
    })
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_bbox(24), b in arb_bbox(24)) {
        let ab = iou(&a, &b).unwrap();
        let ba = iou(&b, &a).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn iou_is_one_only_on_identical_boxes(a in arb_bbox(16), b in arb_bbox(16)) {
        let v = iou(&a, &b).unwrap();
        if a == b {
            prop_assert_eq!(v, 1.0);
        } else {
            prop_assert!(v < 1.0);
        }
    }

    #[test]
    fn bilinear_output_stays_within_input_range(
        src in prop::collection::vec(-5.0f64..5.0, 4 * 4),
        dst_side in 1usize..20,
    ) {
        let out = bilinear_resize_buf(&src, 4, 4, 1, dst_side, dst_side);
        let lo = src.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &v in &out {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn bilinear_preserves_constant_maps(c in -3.0f64..3.0, dst_side in 1usize..16) {
        let src = vec![c; 9];
        let out = bilinear_resize_buf(&src, 3, 3, 1, dst_side, dst_side);
        for &v in &out {
            prop_assert!((v - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn localize_box_always_lands_inside_the_frame(
        vals in prop::collection::vec(-2.0f64..2.0, 6 * 6),
        thr in 0.05f64..0.95,
        eight in any::<bool>(),
    ) {
        let hm = Heatmap::new(6, 6, vals).unwrap();
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let b = localize(&hm, 48, thr, conn).unwrap();
        prop_assert!(b.validate_within(48, 48).is_ok());
    }

    #[test]
    fn shuffle_is_a_permutation(seed in any::<u64>(), n in 1usize..80) {
        let mut items: Vec<usize> = (0..n).collect();
        let mut rng = RngStream::new(seed).shuffle_stream(0);
        rng.shuffle(&mut items);
        let mut sorted = items.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn derived_streams_replay_identically(root in any::<u64>(), tag in any::<u64>()) {
        let mut a = RngStream::new(root).derive(&[tag]);
        let mut b = RngStream::new(root).derive(&[tag]);
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn lr_schedule_never_increases(
        epochs in 2usize..400,
        drop_every in 1usize..100,
    ) {
        let cfg = TrainConfig {
            epochs,
            lr_drop_every: drop_every,
            ..TrainConfig::default()
        };
        let mut prev = f64::INFINITY;
        for e in 0..epochs {
            let lr = lr_at_epoch(&cfg, e).unwrap();
            prop_assert!(lr >= 0.0 && lr <= prev);
            // Past ~300 drops 10^drops overflows and the rate underflows
            // to zero, which the division form is allowed to do.
            if e / drop_every <= 300 {
                prop_assert!(lr > 0.0);
            }
            prev = lr;
        }
    }
}
