use candle_core::{Device, Tensor};
use chromoseg::data::{batches, filter_overlap, one_hot, prepare_sample, split_dataset, BatchIterator, ClassMap, RawSample};
use chromoseg::discriminator::{build_discriminator, DiscriminatorConfig};
use chromoseg::losses::{lovasz_grad, lovasz_single};
use chromoseg::metrics::{confusion_matrix, evaluate_sample, hausdorff, Point, Status};
use chromoseg::train::EarlyStopping;
use proptest::prelude::*;

fn class_map(side: usize) -> impl Strategy<Value = ClassMap> {
    prop::collection::vec(0u8..4, side * side).prop_map(move |d| ClassMap::new(side, side, d).unwrap())
}

fn points() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-20i32..20, -20i32..20), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition(n in 2usize..400, seed in any::<u64>()) {
        let s = split_dataset(n, 0.8, seed).unwrap();
        prop_assert_eq!(s.train_indices.len(), n * 4 / 5);
        let mut all: Vec<usize> = s.train_indices.iter().chain(&s.test_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(s, split_dataset(n, 0.8, seed).unwrap());
    }

    #[test]
    fn overlap_filter_keeps_exactly_maps_with_overlap(maps in prop::collection::vec(class_map(3), 5..30), seed in any::<u64>()) {
        let split = split_dataset(maps.len(), 0.8, seed).unwrap();
        let refs: Vec<&ClassMap> = maps.iter().collect();
        let kept = filter_overlap(&split, &refs);
        for &i in &split.test_indices {
            prop_assert_eq!(kept.contains(&i), maps[i].count(3) > 0);
        }
        prop_assert!(kept.iter().all(|i| split.test_indices.contains(i)));
    }

    #[test]
    fn epochs_are_reproducible_permutations(n in 2usize..200, batch in 1usize..70, epoch in 0u64..50, drop_last in any::<bool>()) {
        let split = split_dataset(n, 0.8, 123).unwrap();
        let spec = BatchIterator { batch_size: batch, seed: 123, drop_last };
        let b = batches(&split, &spec, epoch).unwrap();
        prop_assert_eq!(&b, &batches(&split, &spec, epoch).unwrap());
        prop_assert!(b.iter().all(|x| x.len() == batch || (!drop_last && x.len() < batch)));
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        if drop_last {
            prop_assert_eq!(seen.len(), split.train_indices.len() / batch * batch);
            prop_assert!(seen.iter().all(|i| split.train_indices.contains(i)));
        } else {
            prop_assert_eq!(seen, split.train_indices.clone());
        }
    }

    #[test]
    fn padding_round_trips(image in prop::collection::vec(any::<u8>(), 94 * 93), label in prop::collection::vec(0u8..4, 94 * 93)) {
        let raw = RawSample::new(image.clone(), ClassMap::new(94, 93, label.clone()).unwrap()).unwrap();
        let prepared = prepare_sample(&raw);
        let (top, left) = chromoseg::data::canvas_offsets(94, 93);
        for r in 0..128 {
            for c in 0..128 {
                let k = r * 128 + c;
                let inside = (top..top + 94).contains(&r) && (left..left + 93).contains(&c);
                if inside {
                    let src = (r - top) * 93 + c - left;
                    prop_assert_eq!((prepared.image[k] * 255.0).round() as u8, image[src]);
                    prop_assert_eq!(prepared.label.data[k], label[src]);
                } else {
                    prop_assert_eq!(prepared.image[k], 1.0);
                    prop_assert_eq!(prepared.label.data[k], 0);
                }
            }
        }
        prop_assert_eq!(prepared.label.crop(top, left, 94, 93).unwrap().data, label);
    }

    #[test]
    fn one_hot_partitions_pixels(map in class_map(5)) {
        let oh = one_hot(&map, 4).unwrap();
        for p in 0..25 {
            let col: Vec<f32> = (0..4).map(|c| oh[c * 25 + p]).collect();
            prop_assert_eq!(col.iter().sum::<f32>(), 1.0);
            prop_assert_eq!(col[usize::from(map.data[p])], 1.0);
        }
    }

    #[test]
    fn lovasz_grad_telescopes(gt in prop::collection::vec(prop::bool::ANY, 1..40)) {
        let gt: Vec<f64> = gt.into_iter().map(f64::from).collect();
        let g = lovasz_grad(&gt);
        // Final Jaccard loss: nothing left in the intersection.
        let s: f64 = gt.iter().sum();
        let union = s + gt.iter().map(|v| 1.0 - v).sum::<f64>();
        let j_p = 1.0 - (s - s) / union;
        prop_assert!((g.iter().sum::<f64>() - j_p).abs() < 1e-12);
    }

    #[test]
    fn lovasz_is_homogeneous_along_a_fixed_order(
        errors in prop::collection::vec(0.0f64..1.0, 2..30),
        fg in prop::collection::vec(prop::bool::ANY, 30),
        t in 0.01f64..=1.0,
    ) {
        let fg: Vec<f64> = fg[..errors.len()].iter().map(|&b| f64::from(b)).collect();
        let (base, _) = lovasz_single(&errors, &fg);
        let scaled: Vec<f64> = errors.iter().map(|e| e * t).collect();
        let (s, _) = lovasz_single(&scaled, &fg);
        prop_assert!((s - t * base).abs() < 1e-12);
    }

    #[test]
    fn confusion_and_ratio_identities(pred in class_map(6), gt in class_map(6)) {
        let cm = confusion_matrix(&pred, &gt, 4).unwrap();
        prop_assert_eq!(cm.total(), 36);
        for c in 0..4 {
            prop_assert_eq!(cm.tp(c) + cm.fp(c) + cm.fn_(c) + cm.tn(c), 36);
        }
        let m = evaluate_sample(&pred, &gt, 4).unwrap();
        for k in &m.classes {
            if k.dice.status == Status::Defined {
                let j = k.iou.value;
                prop_assert!((k.dice.value - 2.0 * j / (1.0 + j)).abs() <= 4.0 * f64::EPSILON);
            }
            if k.recall.status == Status::Defined {
                prop_assert!((k.recall.value + k.fnr.value - 1.0).abs() <= 4.0 * f64::EPSILON);
            }
        }
    }

    #[test]
    fn hausdorff_is_a_metric(a in points(), b in points(), c in points()) {
        let d = |x: &[Point], y: &[Point]| hausdorff(x, y).unwrap();
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn early_stop_counter_resets_on_decrease(losses in prop::collection::vec(0.0f64..10.0, 1..60), patience in 1usize..10) {
        let mut s = EarlyStopping::new(patience);
        let mut prev = f64::INFINITY;
        for &l in &losses {
            let before = s.since_decrease;
            let stop = s.update(l);
            if l < prev {
                prop_assert_eq!(s.since_decrease, 0);
            } else {
                prop_assert_eq!(s.since_decrease, before + 1);
            }
            prop_assert_eq!(stop, s.since_decrease >= patience);
            prev = l;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn discriminator_output_follows_conv_arithmetic(h in 8usize..40, w in 8usize..40) {
        let (h, w) = (2 * h, 2 * w);
        let cfg = DiscriminatorConfig { channels: vec![2, 2, 2, 2, 1], ..DiscriminatorConfig::default() };
        let d = build_discriminator(&cfg, 1, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 5, h, w), candle_core::DType::F32, &Device::Cpu).unwrap();
        let y = d.forward(&x).unwrap();
        prop_assert_eq!(y.dims(), &[1, 1, cfg.output_side(h).unwrap(), cfg.output_side(w).unwrap()]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        prop_assert!(v.iter().all(|&s| s > 0.0 && s < 1.0));
    }
}
