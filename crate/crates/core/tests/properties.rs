use dehaze_core::checkpoint::{load_generator, save_generator};
use dehaze_core::data::{entry_rng, extract_patches, DatasetManifest, ManifestEntry, TrainingPair, BETA_GRID};
use dehaze_core::discriminator::build_discriminator;
use dehaze_core::generator::{build_generator, generator_forward, recursive_dehaze};
use dehaze_core::gradcheck::{shrunk_discriminator_spec, shrunk_generator_spec};
use dehaze_core::guided::{guided_filter, GuidedFilterParams};
use dehaze_core::haze::{
    haze_residual, invert_haze, synthesize_haze, transmission_from_depth, AtmosphericLight, DepthMap, DEFAULT_T_MIN,
};
use dehaze_core::loss::{adaptive_weights, mse_term, LossWeights};
use dehaze_core::metrics::{psnr, ssim, SsimParams};
use dehaze_core::nn::BnMode;
use dehaze_core::tensor::Graph;
use dehaze_core::train::{discriminator_objective, train_pairs, TrainConfig};
use dehaze_core::{Image, Plane};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image_from_seed(h: usize, w: usize, seed: u64, lo: f64, hi: f64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn_clamped(h, w, |_, _, _| rng.random_range(lo..=hi)).unwrap()
}

fn plane_from_seed(h: usize, w: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Plane::from_fn(h, w, |_, _| rng.random::<f64>()).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        patch_size: 8,
        patches_per_entry: 2,
        record_wall_time: false,
        generator: shrunk_generator_spec(),
        discriminator: shrunk_discriminator_spec(),
        ..TrainConfig::default()
    }
}

fn tiny_pairs(betas: &[f64]) -> Vec<TrainingPair> {
    betas
        .iter()
        .enumerate()
        .map(|(i, &beta)| {
            let clean = image_from_seed(12, 12, 50 + i as u64, 0.0, 1.0);
            let depth = DepthMap::filled(12, 12, 1.0).unwrap();
            let t = transmission_from_depth(&depth, beta).unwrap();
            let hazy = synthesize_haze(&clean, &t, &AtmosphericLight::gray(0.9).unwrap()).unwrap();
            TrainingPair { hazy, clean, beta }
        })
        .collect()
}

proptest! {
    #[test]
    fn haze_inverts_where_transmission_is_bounded(
        seed in any::<u64>(),
        h in 2usize..20,
        w in 2usize..20,
        beta_index in 0usize..BETA_GRID.len(),
        a in prop::array::uniform3(0.7f64..=1.0),
    ) {
        let beta = BETA_GRID[beta_index];
        let clean = image_from_seed(h, w, seed, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let far = 10f64.ln() / beta;
        let depth = DepthMap::new(Plane::from_fn(h, w, |_, _| rng.random_range(0.0..=far)).unwrap()).unwrap();
        let t = transmission_from_depth(&depth, beta).unwrap();
        let a = AtmosphericLight::new(a).unwrap();
        let hazy = synthesize_haze(&clean, &t, &a).unwrap();
        let back = invert_haze(&hazy, &t, &a, DEFAULT_T_MIN).unwrap();
        prop_assert!(max_abs(back.data(), clean.data()) <= 1e-9);
        prop_assert_eq!(&haze_residual(&clean, &t, &a).unwrap().add_to(&clean).unwrap(), &hazy);
    }

    #[test]
    fn haze_moves_every_sample_toward_airlight(seed in any::<u64>(), beta in 0.1f64..3.0, d in 0.0f64..3.0, a in 0.0f64..=1.0) {
        let clean = image_from_seed(5, 6, seed, 0.0, 1.0);
        let t = transmission_from_depth(&DepthMap::filled(5, 6, d).unwrap(), beta).unwrap();
        let hazy = synthesize_haze(&clean, &t, &AtmosphericLight::gray(a).unwrap()).unwrap();
        for (&j, &i) in clean.data().iter().zip(hazy.data()) {
            prop_assert!((i - a).abs() <= (j - a).abs() + 1e-12);
        }
    }

    #[test]
    fn guided_filter_keeps_constants_and_is_linear_in_input(
        seed in any::<u64>(),
        r in 1usize..5,
        eps in 1e-4f64..1.0,
        c in 0.0f64..1.0,
        k in -2.0f64..2.0,
    ) {
        let guide = plane_from_seed(14, 11, seed);
        let params = GuidedFilterParams::new(r, eps).unwrap();
        let flat = guided_filter(&guide, &Plane::filled(14, 11, c).unwrap(), &params).unwrap();
        prop_assert!(flat.data().iter().all(|v| (v - c).abs() <= 1e-12));

        let p1 = plane_from_seed(14, 11, seed ^ 2);
        let p2 = plane_from_seed(14, 11, seed ^ 3);
        let mixed = p1.zip_map(&p2, |a, b| a + k * b).unwrap();
        let f1 = guided_filter(&guide, &p1, &params).unwrap();
        let f2 = guided_filter(&guide, &p2, &params).unwrap();
        let expected = f1.zip_map(&f2, |a, b| a + k * b).unwrap();
        let got = guided_filter(&guide, &mixed, &params).unwrap();
        prop_assert!(max_abs(got.data(), expected.data()) <= 1e-10);
    }

    #[test]
    fn guided_filter_stays_within_input_hull_for_large_epsilon(seed in any::<u64>(), r in 1usize..4) {
        let guide = plane_from_seed(10, 10, seed);
        let input = plane_from_seed(10, 10, seed ^ 5);
        let out = guided_filter(&guide, &input, &GuidedFilterParams::new(r, 1e6).unwrap()).unwrap();
        let (lo, hi) = input.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
    }

    #[test]
    fn psnr_is_symmetric_and_falls_as_error_grows(seed in any::<u64>(), small in 0.01f64..0.1, factor in 1.1f64..2.0) {
        let x = image_from_seed(9, 9, seed, 0.3, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let noise: Vec<f64> = (0..x.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let perturb = |amount: f64| {
            Image::new(9, 9, x.data().iter().zip(&noise).map(|(v, n)| v + amount * n).collect()).unwrap()
        };
        let near = perturb(small);
        let far = perturb(small * factor);
        prop_assert_eq!(psnr(&x, &near, 1.0).unwrap(), psnr(&near, &x, 1.0).unwrap());
        prop_assert!(psnr(&x, &far, 1.0).unwrap() < psnr(&x, &near, 1.0).unwrap());
    }

    #[test]
    fn ssim_is_symmetric_and_at_most_one(seed in any::<u64>()) {
        let a = image_from_seed(16, 14, seed, 0.0, 1.0);
        let b = image_from_seed(16, 14, seed ^ 9, 0.0, 1.0);
        let p = SsimParams::default();
        let ab = ssim(&a, &b, &p).unwrap();
        let ba = ssim(&b, &a, &p).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ab <= 1.0);
        prop_assert_eq!(ssim(&a, &a, &p).unwrap(), 1.0);
    }

    #[test]
    fn weights_interpolate_between_endpoints(beta in 0.0f64..3.0) {
        let w = adaptive_weights(beta);
        let (l, h) = (LossWeights::LIGHT, LossWeights::HEAVY);
        prop_assert!(w.w1 >= l.w1 && w.w1 <= h.w1);
        prop_assert!(w.w2 >= l.w2 && w.w2 <= h.w2);
        prop_assert!(w.w3 <= l.w3 && w.w3 >= h.w3);
    }

    #[test]
    fn patches_pair_hazy_and_clean_at_one_location(seed in any::<u64>(), h in 8usize..30, w in 8usize..30, size in 1usize..9) {
        let hazy = image_from_seed(h, w, seed, 0.0, 1.0);
        let clean = image_from_seed(h, w, seed ^ 11, 0.0, 1.0);
        let mut rng = entry_rng(seed, 0);
        let patches = extract_patches(&hazy, &clean, size, 5, 3, 0.8, &mut rng).unwrap();
        prop_assert_eq!(patches.len(), 5);
        for p in patches {
            prop_assert_eq!(&p.hazy, &hazy.crop(p.top, p.left, size, size).unwrap());
            prop_assert_eq!(&p.clean, &clean.crop(p.top, p.left, size, size).unwrap());
            prop_assert_eq!((p.entry, p.beta), (3, 0.8));
        }
    }

    #[test]
    fn manifest_survives_serialization(
        entries in prop::collection::vec(
            (0usize..11, prop::array::uniform3(0.7f64..=1.0), any::<u64>(), "[a-z]{1,8}"),
            0..6,
        ),
        depth_scale in 0.5f64..100.0,
    ) {
        let manifest = DatasetManifest {
            schema_version: DatasetManifest::SCHEMA_VERSION,
            depth_scale,
            entries: entries
                .into_iter()
                .map(|(b, a, seed, name)| ManifestEntry {
                    clean_path: format!("{name}_clean.png").into(),
                    depth_path: format!("{name}_depth.png").into(),
                    hazy_path: format!("{name}_hazy.png").into(),
                    beta: BETA_GRID[b],
                    airlight: AtmosphericLight::new(a).unwrap(),
                    rng_seed: seed,
                })
                .collect(),
        };
        let text = manifest.to_json().unwrap();
        prop_assert_eq!(DatasetManifest::parse(&text, "m.json".as_ref()).unwrap(), manifest);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generator_preserves_shape_and_range(seed in any::<u64>(), h in 3usize..12, w in 3usize..12) {
        let net = build_generator(shrunk_generator_spec(), seed).unwrap();
        let x = image_from_seed(h, w, seed ^ 13, 0.0, 1.0);
        let y = generator_forward(&net, &x).unwrap();
        prop_assert_eq!(y.dims(), (h, w));
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn recursion_composes_single_passes(seed in any::<u64>(), k in 1usize..4) {
        let net = build_generator(shrunk_generator_spec(), seed).unwrap();
        let x = image_from_seed(7, 9, seed ^ 17, 0.0, 1.0);
        let (out, norms) = recursive_dehaze(&net, &x, k).unwrap();
        let mut manual = x.clone();
        for (i, &n) in norms.iter().enumerate() {
            let next = generator_forward(&net, &manual).unwrap();
            let expected = manual.data().iter().zip(next.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert_eq!(n, expected, "pass {}", i);
            manual = next;
        }
        prop_assert_eq!(norms.len(), k);
        prop_assert_eq!(out, manual);
    }

    #[test]
    fn generator_checkpoint_round_trip(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let net = build_generator(shrunk_generator_spec(), seed).unwrap();
        save_generator(&net, None, dir.path()).unwrap();
        let (back, training) = load_generator(dir.path()).unwrap();
        prop_assert!(training.is_none());
        prop_assert_eq!(back.spec(), net.spec());
        for ((na, _, ta), (nb, _, tb)) in net.params.iter().zip(back.params.iter()) {
            prop_assert_eq!(na, nb);
            let bits = |t: &dehaze_core::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ta), bits(tb));
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for trial in 0..10u64 {
        let net = build_generator(shrunk_generator_spec(), trial).unwrap();
        let x: Vec<Image> = (0..2)
            .map(|i| image_from_seed(8, 8, trial * 10 + i, 0.0, 1.0))
            .collect();
        let y: Vec<Image> = (0..2)
            .map(|i| image_from_seed(8, 8, trial * 10 + i + 5, 0.0, 1.0))
            .collect();
        let mut g = Graph::new();
        let xv = g.constant(Image::batch_to_tensor(&x).unwrap()).unwrap();
        let yv = g.constant(Image::batch_to_tensor(&y).unwrap()).unwrap();
        let (out, _) = net.forward_graph(&mut g, xv, BnMode::Train).unwrap();
        let loss = mse_term(&mut g, out, yv).unwrap();
        let grads = g.backward(loss).unwrap();
        for (name, _) in net.params.trainable() {
            let grad = grads
                .params()
                .get(name)
                .unwrap_or_else(|| panic!("trial {trial}: no gradient for {name}"));
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "trial {trial}: zero gradient for {name}"
            );
        }

        let disc = build_discriminator(shrunk_discriminator_spec(), trial).unwrap();
        let real = Image::batch_to_tensor(&y).unwrap();
        let fake = Image::batch_to_tensor(&x).unwrap();
        let mut dg = Graph::new();
        let (obj, _) = discriminator_objective(&mut dg, &disc, &real, &fake).unwrap();
        let grads = dg.backward(obj).unwrap();
        for (name, _) in disc.params.trainable() {
            let grad = grads
                .params()
                .get(name)
                .unwrap_or_else(|| panic!("trial {trial}: no gradient for {name}"));
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "trial {trial}: zero gradient for {name}"
            );
        }
    }
}

#[test]
fn default_schedule_appears_in_the_log() {
    let config = tiny_config(52);
    let out = train_pairs(&config, &tiny_pairs(&[0.7]), None).unwrap();
    let epochs: Vec<usize> = out.log.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, (1..=52).collect::<Vec<_>>());
    for r in &out.log.records {
        assert_eq!(r.lr, if r.epoch <= 50 { 0.001 } else { 0.0001 }, "epoch {}", r.epoch);
    }
}

fn assert_weighted(records: &[dehaze_core::train::EpochRecord], w: LossWeights) {
    for r in records {
        let expected = w.w1 * r.g_mse + w.w2 * r.g_feat + w.w3 * r.g_adv;
        assert!(
            (r.g_total - expected).abs() <= 1e-12 * r.g_total.abs().max(1.0),
            "epoch {}: {r:?}",
            r.epoch
        );
    }
}

#[test]
fn disabled_adaptation_uses_fixed_weights() {
    let pairs = tiny_pairs(&[0.5, 1.5, 0.9]);
    let config = TrainConfig {
        adaptive_weights_enabled: false,
        ..tiny_config(2)
    };
    let out = train_pairs(&config, &pairs, None).unwrap();
    assert_weighted(&out.log.records, LossWeights::FIXED);
    assert_eq!(
        LossWeights::FIXED,
        LossWeights {
            w1: 1.0,
            w2: 1e-6,
            w3: 0.002
        }
    );
}

#[test]
fn enabled_adaptation_follows_beta() {
    for beta in [0.5, 1.5] {
        let out = train_pairs(&tiny_config(2), &tiny_pairs(&[beta, beta]), None).unwrap();
        assert_weighted(&out.log.records, adaptive_weights(beta));
    }
}

#[test]
fn seeded_runs_repeat_exactly() {
    let pairs = tiny_pairs(&[0.6, 1.2, 1.0]);
    let a = train_pairs(&tiny_config(3), &pairs, None).unwrap();
    let b = train_pairs(&tiny_config(3), &pairs, None).unwrap();
    assert_eq!(a.log, b.log);
    let c = train_pairs(
        &TrainConfig {
            seed: 9,
            ..tiny_config(3)
        },
        &pairs,
        None,
    )
    .unwrap();
    assert_ne!(a.log, c.log);
}
