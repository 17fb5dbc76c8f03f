//! Property tests for the module invariants: attention stochasticity and
//! equivariance, embedding telescoping, metric symmetries, schedule
//! monotonicity and the backbone shape contract.

use proptest::prelude::*;

use vsod_core::attention::{mutual_attention, FusionKind};
use vsod_core::embedding::{embedding_unit, unit1};
use vsod_core::features::{extract_side_outputs, init_params, ArchConfig, FrameTensor};
use vsod_core::losses::{sigmoid_ce, spatial_loss, LossConfig};
use vsod_core::metrics;
use vsod_core::tensor::Tensor;
use vsod_core::training::poly_lr;

fn grid_strategy(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-3.0f64..3.0, c * h * w)
        .prop_map(move |data| Tensor::new(vec![c, h, w], data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_columns_are_stochastic_and_convex(
        (c, h, w) in (1usize..12, 1usize..5, 1usize..5),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = h * w;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::new(vec![c, h, w], (0..c * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let res = mutual_attention(&a, &b).unwrap();
        // column stochasticity
        for j in 0..n {
            let col: f64 = (0..n).map(|i| res.attention.at2(i, j)).sum();
            prop_assert!((col - 1.0).abs() < 1e-5);
        }
        prop_assert!(res.attention.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // convex-combination bound: each weighted column lies inside the
        // per-channel envelope of the offset frame's columns
        for ch in 0..c {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..n {
                let v = b.data()[ch * n + i];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            for j in 0..n {
                let v = res.weighted.data()[ch * n + j];
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn attention_is_equivariant_to_reference_permutation(
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (c, n) = (4usize, 6usize);
        let a = Tensor::new(vec![c, 1, n], (0..c * n).map(|_| rng.gen_range(-2.0f64..2.0)).collect()).unwrap();
        let b = Tensor::new(vec![c, 1, n], (0..c * n).map(|_| rng.gen_range(-2.0f64..2.0)).collect()).unwrap();
        // permute the reference frame's spatial locations
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut a_perm = Tensor::zeros(vec![c, 1, n]);
        for ch in 0..c {
            for i in 0..n {
                let v = a.data()[ch * n + i];
                a_perm.data_mut()[ch * n + perm[i]] = v;
            }
        }
        let base = mutual_attention(&a, &b).unwrap();
        let permuted = mutual_attention(&a_perm, &b).unwrap();
        // row axis follows the reference frame's permutation
        for i in 0..n {
            for j in 0..n {
                let x = base.attention.at2(i, j);
                let y = permuted.attention.at2(perm[i], j);
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_output_telescopes_bit_exactly(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let arch = ArchConfig::tiny();
        let store = init_params::<f32>(&arch, seed, false, FusionKind::Mutual).unwrap();
        let prev = Tensor::new(vec![1, 6, 6], (0..36).map(|_| rng.gen_range(-2.0f32..2.0)).collect()).unwrap();
        let feats = Tensor::new(
            vec![arch.low_channels, 6, 6],
            (0..arch.low_channels * 36).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
        ).unwrap();
        let (r, p) = embedding_unit(&prev, &feats, &unit1(&arch), &store).unwrap();
        let readd = prev.add(&r).unwrap();
        prop_assert_eq!(readd, p);
    }

    #[test]
    fn mae_is_symmetric_and_triangular(
        a in grid_strategy(1, 4, 4),
        b in grid_strategy(1, 4, 4),
        c in grid_strategy(1, 4, 4),
    ) {
        let bin = |t: &Tensor<f64>| t.map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
        let (a, b, c) = (bin(&a), bin(&b), bin(&c));
        let d = |x: &Tensor<f64>, y: &Tensor<f64>| metrics::mae(&[x.clone()], &[y.clone()]).unwrap();
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &b) <= d(&a, &c) + d(&c, &b) + 1e-15);
    }

    #[test]
    fn f_max_invariant_under_monotone_level_remap(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // quantized predictions (8-bit levels, like exported maps)
        let pred = Tensor::new(
            vec![1, 8, 8],
            (0..64).map(|_| rng.gen_range(0..=255u32) as f64 / 255.0).collect(),
        ).unwrap();
        let gt = Tensor::new(
            vec![1, 8, 8],
            (0..64).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect(),
        ).unwrap();
        if gt.data().iter().sum::<f64>() == 0.0 {
            return Ok(());
        }
        // strictly increasing remap of the 256 levels
        let gamma = rng.gen_range(0.3..3.0);
        let remap = |v: f64| {
            let k = (v * 255.0).round();
            (255.0 * (k / 255.0f64).powf(gamma)).round().clamp(0.0, 255.0) / 255.0
        };
        // powf rounding can merge adjacent levels; keep only cases where the
        // remap stays strictly monotone over the occupied levels
        let mut levels: Vec<i64> = pred.data().iter().map(|&v| (v * 255.0).round() as i64).collect();
        levels.sort_unstable();
        levels.dedup();
        let mapped: Vec<i64> = levels.iter().map(|&k| (255.0 * (k as f64 / 255.0).powf(gamma)).round() as i64).collect();
        let strictly = mapped.windows(2).all(|w| w[0] < w[1]);
        if !strictly {
            return Ok(());
        }
        let pred2 = pred.map(remap);
        let r1 = metrics::evaluate(&[pred], &[gt.clone()], 0.3).unwrap();
        let r2 = metrics::evaluate(&[pred2], &[gt], 0.3).unwrap();
        prop_assert!((r1.f_max - r2.f_max).abs() < 1e-12);
    }

    #[test]
    fn poly_lr_is_positive_and_strictly_decreasing(
        base in 1e-6f64..1.0,
        max_iter in 10u64..100_000,
        frac in 0.0f64..1.0,
    ) {
        let i = ((max_iter - 1) as f64 * frac) as u64;
        let a = poly_lr(base, i, max_iter).unwrap();
        let b = poly_lr(base, i + 1, max_iter).unwrap();
        prop_assert!(a > 0.0);
        prop_assert!(b < a);
        prop_assert_eq!(poly_lr(base, 0, max_iter).unwrap(), base);
        prop_assert_eq!(poly_lr(base, max_iter, max_iter).unwrap(), 0.0);
    }

    #[test]
    fn losses_are_nonnegative_and_monotone_in_alpha(
        logits in grid_strategy(1, 4, 4),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let gt = Tensor::new(
            vec![1, 4, 4],
            (0..16).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        ).unwrap();
        prop_assert!(sigmoid_ce(&logits, &gt).unwrap() >= 0.0);
        let mk = |o: f64| logits.map(|v| v + o);
        let phases = vsod_core::embedding::PhasePredictions {
            residuals: vec![],
            logits: vec![mk(0.1), mk(-0.2), logits.clone()],
        };
        let mut prev = None;
        for alpha in [0.0, 0.3, 0.7, 1.0] {
            let cfg = LossConfig { alpha, ..LossConfig::default() };
            let rep = spatial_loss(&phases, &gt, &cfg).unwrap();
            if let Some(p) = prev {
                prop_assert!(rep.total >= p);
            }
            prev = Some(rep.total);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn tiny_backbone_shape_contract(h in 32usize..80, w in 32usize..80) {
        let arch = ArchConfig::tiny();
        let store = init_params::<f32>(&arch, 0, false, FusionKind::Mutual).unwrap();
        let frame = FrameTensor::new(Tensor::zeros(vec![3, h, w])).unwrap();
        let sides = extract_side_outputs(&frame, &store, &arch).unwrap();
        let ceil_div = |a: usize, b: usize| a.div_ceil(b);
        for s in &sides[..2] {
            prop_assert_eq!(s.height(), ceil_div(h, 4));
            prop_assert_eq!(s.width(), ceil_div(w, 4));
        }
        for s in &sides[2..] {
            prop_assert_eq!(s.height(), ceil_div(h, 8));
            prop_assert_eq!(s.width(), ceil_div(w, 8));
        }
        for s in &sides {
            prop_assert!(s.all_finite());
        }
    }
}
