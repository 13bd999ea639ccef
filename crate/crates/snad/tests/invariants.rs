//! Cross-module invariants: serialization round trips as properties, the
//! linearity of the numeric kernels, partition preservation, and the
//! discriminator's Lipschitz proxy.

use proptest::prelude::*;
use snad::blur::trajectory_kernel;
use snad::image::{encode_netpbm, parse_netpbm, Image};
use snad::masks::{split_foreground, LabelMap, RegionClass};
use snad::net::ToyDiscriminator;
use snad::rng::{seeded, uniform_tensor};
use snad::tape::GradTape;
use snad::tensor::{conv2d, ConvSpec};
use snad::tensor_io::{read_tensor_from, write_tensor_to};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn netpbm_round_trip(
        w in 1usize..24,
        h in 1usize..24,
        rgb in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let channels = if rgb { 3 } else { 1 };
        let mut img = Image::new(w, h, channels).unwrap();
        let mut rng = seeded(seed);
        rand::Rng::fill(&mut rng, &mut img.data[..]);
        let bytes = encode_netpbm(&img);
        let back = parse_netpbm(&bytes).unwrap();
        prop_assert_eq!(img, back);
    }

    #[test]
    fn labelmap_codes_round_trip(w in 1usize..16, h in 1usize..16, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let classes: Vec<RegionClass> = (0..w * h)
            .map(|_| RegionClass::ALL[rand::Rng::random_range(&mut rng, 0..4)])
            .collect();
        let map = LabelMap::from_classes(w, h, classes).unwrap();
        for y in 0..h {
            for x in 0..w {
                let class = map.class_at(x, y);
                prop_assert_eq!(RegionClass::from_code(class.code()), Some(class));
            }
        }
    }

    #[test]
    fn tensor_file_round_trip(b in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let t = uniform_tensor([b, c, h, w], &mut seeded(seed), -10.0, 10.0);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let back = read_tensor_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(t, back);
    }

    #[test]
    fn conv_linearity(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = seeded(seed);
        let x = uniform_tensor([1, 2, 5, 5], &mut rng, -1.0, 1.0);
        let y = uniform_tensor([1, 2, 5, 5], &mut rng, -1.0, 1.0);
        let k = uniform_tensor([3, 2, 3, 3], &mut rng, -1.0, 1.0);
        let spec = ConvSpec::same(3, 2, 3).unwrap();
        let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &spec, &k, None).unwrap();
        let rhs = conv2d(&x, &spec, &k, None)
            .unwrap()
            .scale(a)
            .add(&conv2d(&y, &spec, &k, None).unwrap().scale(b))
            .unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn partition_survives_downsampling(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let mut map = LabelMap::filled(16, 16, RegionClass::Back);
        for y in 0..16 {
            for x in 0..16 {
                map.set_class(x, y, RegionClass::ALL[rand::Rng::random_range(&mut rng, 0..4)]);
            }
        }
        let mut masks = split_foreground(&map);
        for s in [8usize, 4, 2] {
            masks = masks.downsample(s, s).unwrap();
            for y in 0..s {
                for x in 0..s {
                    prop_assert!(masks.foreground.get(x, y) != masks.background.get(x, y));
                    let one_hot = [&masks.facial, &masks.back, &masks.hair, &masks.skin]
                        .iter()
                        .filter(|m| m.get(x, y))
                        .count();
                    prop_assert_eq!(one_hot, 1);
                }
            }
        }
    }

    #[test]
    fn trajectory_kernels_stay_normalized(seed in any::<u64>()) {
        let k = trajectory_kernel(seed, (13, 29)).unwrap();
        let total: f64 = k.weights().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(k.weights().iter().all(|&w| w >= 0.0));
        prop_assert!(k.size() % 2 == 1 && (13..=29).contains(&k.size()));
    }
}

/// With spectral normalization active and the persistent state warm, the
/// global logit is Lipschitz in the input with constant far below the
/// per-path product bound `1.1^depth` (5 convolutions input-to-global).
#[test]
fn discriminator_lipschitz_proxy() {
    let mut disc = ToyDiscriminator::init(3).unwrap();
    for _ in 0..50 {
        let mut tape = GradTape::new();
        let vars = disc.params.register(&mut tape);
        let x = tape.constant(uniform_tensor([1, 3, 32, 32], &mut seeded(1), 0.0, 1.0));
        disc.forward(&mut tape, &vars, x).unwrap();
    }
    let bound = 1.1f64.powi(5);
    let mut rng = seeded(42);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = uniform_tensor([1, 3, 32, 32], &mut rng, 0.0, 1.0);
        let b = uniform_tensor([1, 3, 32, 32], &mut rng, 0.0, 1.0);
        let mut tape = GradTape::new();
        let vars = disc.params.register(&mut tape);
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let oa = disc.forward(&mut tape, &vars, av).unwrap();
        let ob = disc.forward(&mut tape, &vars, bv).unwrap();
        let dd = (tape.value(oa.global).item() - tape.value(ob.global).item()).abs();
        let dx = a
            .sub(&b)
            .unwrap()
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        worst = worst.max(dd / dx);
    }
    assert!(worst <= bound, "empirical L {worst} exceeds {bound}");
}

/// Spectral normalization leaves every registered discriminator parameter in
/// the registry exactly once; the separable normalization itself never adds
/// trainable parameters.
#[test]
fn parameter_registry_counts() {
    let disc = ToyDiscriminator::init(5).unwrap();
    let mut tape = GradTape::new();
    let vars = disc.params.register(&mut tape);
    assert_eq!(vars.len(), disc.params.len());
    assert_eq!(tape.param_count(), disc.params.len());
    // 8 block convs + 3 patch heads + 1 global head, each weight + bias.
    assert_eq!(disc.params.len(), 24);
}
