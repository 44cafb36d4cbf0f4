use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stpfnet::data::netpbm::Image;
use stpfnet::data::Padding;
use stpfnet::metrics::{ce_loss, segmentation_metrics};
use stpfnet::msff::{BranchFeatures, Msff, Pooling};
use stpfnet::nn::{Ctx, ParamStore};
use stpfnet::temporal::Similarity;
use stpfnet::verify::attention_invariant_errors;
use stpfnet::{Tape, Tensor};

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| Tensor::new([rows, cols], v).unwrap())
}

fn binary_mask(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY, n).prop_map(|v| v.into_iter().map(|b| f64::from(u8::from(b))).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..6, 1usize..12).prop_flat_map(|(r, c)| matrix(r, c, 1e4))) {
        let tape = Tape::no_grad();
        let y = tape.constant(x.clone()).softmax_rows().unwrap().value();
        let cols = x.shape()[1];
        for row in y.data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5)
            .prop_flat_map(|(m, k, n, p)| (matrix(m, k, 2.0), matrix(k, n, 2.0), matrix(n, p, 2.0)))
    ) {
        let tape = Tape::no_grad();
        let (a, b, c) = (tape.constant(a), tape.constant(b), tape.constant(c));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap().value();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap().value();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
    }

    #[test]
    fn attention_is_convex_and_order_free(seed in any::<u64>(), literal in any::<bool>()) {
        let sim = if literal { Similarity::DoubleExp } else { Similarity::Softmax };
        let (rows, convex, perm) = attention_invariant_errors(seed, sim).unwrap();
        prop_assert!(rows < 1e-12 && convex < 1e-12 && perm < 1e-12, "{rows} {convex} {perm}");
    }

    #[test]
    fn fused_output_is_bounded_by_branch_magnitudes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let msff = Msff::new(&mut store, 16, 4, Pooling::Both, true, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::uniform(shape, -2.0, 2.0, &mut rng));
        }
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let y = tape.constant(Tensor::uniform([8, 2, 2], -3.0, 3.0, &mut rng));
        let z = tape.constant(Tensor::uniform([8, 2, 2], -3.0, 3.0, &mut rng));
        let w = tape.constant(Tensor::uniform([2, 2, 2], -3.0, 3.0, &mut rng));
        let b = BranchFeatures { y, z: Some(z), w };
        let (wy, wz, ww, lifted) = msff.branch_weights(&ctx, &b).unwrap();
        for weights in [wy.value(), wz.unwrap().value(), ww.value()] {
            prop_assert!(weights.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let x = msff.fuse(&ctx, &b).unwrap().value();
        let (y, z, l) = (y.value(), z.value(), lifted.value());
        for i in 0..x.numel() {
            let bound = y.data()[i].abs() + z.data()[i].abs() + l.data()[i].abs();
            prop_assert!(x.data()[i].abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn metric_identities_hold(
        (prob, gt) in (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            (prop::collection::vec(0.0..1.0f64, h * w), binary_mask(h * w))
                .prop_map(move |(p, g)| (Tensor::new([1, h, w], p).unwrap(), Tensor::new([1, h, w], g).unwrap()))
        })
    ) {
        let m = segmentation_metrics(&prob, &gt, 0.5).unwrap();
        for v in [m.dice, m.iou, m.recall, m.mae] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        prop_assert!(m.iou <= m.dice + 1e-15);
        let perfect = segmentation_metrics(&gt, &gt, 0.5).unwrap();
        prop_assert_eq!((perfect.dice, perfect.iou, perfect.recall, perfect.mae), (1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn ce_loss_decreases_towards_the_target(
        (p, g, t) in (1usize..30).prop_flat_map(|n| (prop::collection::vec(0.01..0.99f64, n), binary_mask(n), 0.05..0.95f64))
    ) {
        let n = p.len();
        let gt = Tensor::new([1, 1, n], g.clone()).unwrap();
        let moved: Vec<f64> = p.iter().zip(&g).map(|(&p, &g)| p + t * (g - p)).collect();
        let tape = Tape::no_grad();
        let loss = |v: Vec<f64>| ce_loss(&[(tape.constant(Tensor::new([1, 1, n], v).unwrap()), &gt)]).unwrap().value().item();
        let (before, after) = (loss(p), loss(moved));
        prop_assert!(after <= before + 1e-12, "{after} > {before}");
        prop_assert!(after >= 0.0);
    }

    #[test]
    fn padding_round_trips(h in 1usize..90, w in 1usize..90, stride in prop::sample::select(vec![1usize, 2, 4, 8, 16])) {
        let mut rng = ChaCha8Rng::seed_from_u64((h * 1000 + w) as u64);
        let t = Tensor::uniform([2, h, w], 0.0, 1.0, &mut rng);
        let p = Padding::to_multiple(h, w, stride);
        let padded = p.apply(&t).unwrap();
        prop_assert_eq!(padded.shape()[1] % stride, 0);
        prop_assert_eq!(padded.shape()[2] % stride, 0);
        prop_assert!(padded.shape()[1] - h < stride && padded.shape()[2] - w < stride);
        prop_assert!(p.remove(&padded).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn netpbm_round_trips(
        (width, height, channels, pixels) in (1usize..20, 1usize..20, prop::sample::select(vec![1usize, 3]))
            .prop_flat_map(|(w, h, c)| (Just(w), Just(h), Just(c), prop::collection::vec(any::<u8>(), w * h * c)))
    ) {
        let img = Image { width, height, channels, pixels };
        let bytes = img.encode();
        let back = Image::decode(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, img);
    }
}
