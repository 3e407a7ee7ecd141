use cephalo_core::augment::{
    apply_affine, apply_artefact_band, Affine, ArtefactBand, ArtefactMode, BandOrientation,
};
use cephalo_core::decode::{decode_topk, ensemble_coords};
use cephalo_core::folds::split_folds;
use cephalo_core::geometry::{make_gt_box, resized_dims, BoundingBox, Point2, RegionTransform};
use cephalo_core::loss::heatmap_loss_with_grad;
use cephalo_core::metrics::{mre, sdr, ImageEval};
use cephalo_core::target::encode_target;
use ndarray::{Array2, Array4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn remap_inverts_forward_map(
        ox in 0.0f64..500.0, oy in 0.0f64..500.0, bw in 20.0f64..600.0, bh in 20.0f64..600.0,
        target in 64usize..1024, fx in 0.0f64..1.0, fy in 0.0f64..1.0,
    ) {
        let (_, _, scale) = resized_dims(bh.ceil() as usize, bw.ceil() as usize, target).unwrap();
        let t = RegionTransform { crop_origin: Point2::new(ox.floor(), oy.floor()), scale, resized_size: (target, 0) };
        let p = Point2::new(ox + fx * bw, oy + fy * bh);
        let back = t.to_original(&t.to_crop(&p));
        prop_assert!(back.distance(&p) < 1e-9);
    }

    #[test]
    fn gt_box_contains_every_landmark(
        pts in prop::collection::vec((1.0f64..300.0, 1.0f64..200.0), 2..20), pad in 0.0f64..64.0,
    ) {
        let points: Vec<_> = pts.iter().map(|&(x, y)| Point2::new(x, y)).collect();
        let bbox = match make_gt_box(&points, pad + 1.0, (201, 301)) {
            Ok(b) => b,
            Err(_) => return Ok(()),
        };
        for p in &points {
            prop_assert!(p.x >= bbox.x0 && p.x <= bbox.x1 && p.y >= bbox.y0 && p.y <= bbox.y1);
        }
        prop_assert!(bbox.x0 >= 0.0 && bbox.y0 >= 0.0 && bbox.x1 <= 301.0 && bbox.y1 <= 201.0);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in (0.0f64..50.0, 0.0f64..50.0, 1.0f64..50.0, 1.0f64..50.0),
                                    b in (0.0f64..50.0, 0.0f64..50.0, 1.0f64..50.0, 1.0f64..50.0)) {
        let ba = BoundingBox::new(a.0, a.1, a.0 + a.2, a.1 + a.3).unwrap();
        let bb = BoundingBox::new(b.0, b.1, b.0 + b.2, b.1 + b.3).unwrap();
        let (x, y) = (ba.iou(&bb), bb.iou(&ba));
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
    }

    #[test]
    fn decoded_point_lies_in_plane(values in prop::collection::vec(-5.0f64..5.0, 64), k in 1usize..64) {
        let plane = Array2::from_shape_vec((8, 8), values).unwrap();
        let p = decode_topk(plane.view(), k).unwrap();
        prop_assert!((0.0..=7.0).contains(&p.x) && (0.0..=7.0).contains(&p.y));
    }

    #[test]
    fn ensemble_ignores_model_order(coords in prop::collection::vec((0.0f64..800.0, 0.0f64..800.0), 3..6)) {
        let models: Vec<Vec<Point2<f64>>> = coords.iter().map(|&(x, y)| vec![Point2::new(x, y)]).collect();
        let mut reversed = models.clone();
        reversed.reverse();
        prop_assert_eq!(ensemble_coords(&models).unwrap(), ensemble_coords(&reversed).unwrap());
    }

    #[test]
    fn target_mass_at_most_one(x in 0.0f64..31.0, y in 0.0f64..31.0, sigma in 0.0f64..4.0) {
        let t = encode_target(&[Point2::new(x, y)], 32, 32, sigma);
        let sum = t.planes.sum();
        prop_assert!(sum <= 1.0 + 1e-9 && sum > 0.0);
        prop_assert!(t.planes.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn loss_is_nonnegative_and_gradient_sums_to_zero(
        logits in prop::collection::vec(-4.0f64..4.0, 2 * 25), x in 0.0f64..4.0, y in 0.0f64..4.0,
    ) {
        let t = encode_target(&[Point2::new(x, y), Point2::new(y, x)], 5, 5, 1.0);
        let target = t.planes.insert_axis(ndarray::Axis(0));
        let logits = Array4::from_shape_vec((1, 2, 5, 5), logits).unwrap();
        let (loss, grad) = heatmap_loss_with_grad(logits.view(), target.view(), &[vec![true, true]]).unwrap();
        prop_assert!(loss >= -1e-12);
        // softmax * sum(y) - y sums to zero over each plane
        for l in 0..2 {
            let s: f64 = grad.slice(ndarray::s![0, l, .., ..]).sum();
            prop_assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn sdr_and_mre_bounds(errs in prop::collection::vec((0.0f64..30.0, 0.0f64..std::f64::consts::TAU), 1..40), spacing in 0.05f64..0.5) {
        let gt: Vec<_> = errs.iter().map(|_| Point2::new(100.0, 100.0)).collect();
        let pred: Vec<_> = errs.iter().map(|&(r, a)| Point2::new(100.0 + r * a.cos(), 100.0 + r * a.sin())).collect();
        let images = [ImageEval { image_id: "a", pred: &pred, gt: &gt, spacing }];
        let m = mre(&images).unwrap();
        let s = sdr(&images, 2.0).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert!((0.0..=100.0).contains(&s));
        if m <= 2.0 {
            prop_assert!(s > 0.0);
        }
    }

    #[test]
    fn folds_partition_ids(n in 5usize..80, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let ids: Vec<String> = (0..n).map(|i| format!("{i:03}")).collect();
        let folds = split_folds(&ids, k, seed).unwrap();
        let sizes = folds.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..k {
            prop_assert_eq!(folds.members(f).len() + folds.complement(f).len(), n);
        }
    }

    #[test]
    fn artefact_touches_only_its_band(
        vertical in any::<bool>(), size in 1usize..80, start in 0usize..70, additive in any::<bool>(), seed in any::<u64>(),
    ) {
        let img = Array2::from_shape_fn((64, 72), |(y, x)| ((x * 7 + y * 3) % 256) as f64);
        let band = ArtefactBand {
            orientation: if vertical { BandOrientation::Vertical } else { BandOrientation::Horizontal },
            start,
            size,
            mode: if additive { ArtefactMode::AdditiveNoise { sigma: 15.0 } } else { ArtefactMode::Multiplicative { factor: 1.3 } },
        };
        let mut out = img.clone();
        apply_artefact_band(&mut out, &band, &mut ChaCha8Rng::seed_from_u64(seed));
        let (rows, cols) = band.extent(64, 72);
        for ((y, x), v) in out.indexed_iter() {
            if !(rows.contains(&y) && cols.contains(&x)) {
                prop_assert_eq!(*v, img[[y, x]]);
            } else {
                prop_assert!((0.0..=255.0).contains(v));
            }
        }
    }

    #[test]
    fn warped_blob_follows_affine(angle in -5.0f64..5.0, tx in -10.0f64..10.0, ty in -10.0f64..10.0, s in 0.9f64..1.1) {
        let (cx, cy) = (40.0, 36.0);
        let img = Array2::from_shape_fn((80, 96), |(y, x)| {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            255.0 * (-d2 / 8.0).exp()
        });
        let affine = Affine::about_centre((47.5, 39.5), angle, s, s, (tx, ty));
        let (out, pts) = apply_affine(&img, &[Point2::new(cx, cy)], &affine).unwrap();
        let total: f64 = out.sum();
        let (mut mx, mut my) = (0.0, 0.0);
        for ((y, x), v) in out.indexed_iter() {
            mx += x as f64 * v;
            my += y as f64 * v;
        }
        let centroid = Point2::new(mx / total, my / total);
        prop_assert!(centroid.distance(&pts[0]) < 0.5, "{:?} vs {:?}", centroid, pts[0]);
    }
}
