//! Desk-scale acceptance run: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::error::Error;
use std::path::Path;
use std::time::Instant;

use dehaze_core::data::{
    entry_rng, extract_patches, make_dataset, make_hazy_pair, synthetic_scene, toy_sources, TrainingPair, BETA_GRID,
    DEFAULT_DEPTH_SCALE,
};
use dehaze_core::discriminator::DiscriminatorSpec;
use dehaze_core::generator::{build_generator, generator_forward, recursive_dehaze, GeneratorNet, GeneratorSpec};
use dehaze_core::gradcheck::run_suite;
use dehaze_core::guided::{guided_filter, halo_suppress, GuidedFilterParams};
use dehaze_core::haze::{
    haze_residual, invert_haze, synthesize_haze, transmission_from_depth, AtmosphericLight, DepthMap, DEFAULT_T_MIN,
};
use dehaze_core::loss::{adaptive_weights, mse_term};
use dehaze_core::metrics::{psnr, ssim, SsimParams};
use dehaze_core::nn::{apply_bn_updates, BnMode};
use dehaze_core::tensor::{AdamConfig, AdamState, Graph};
use dehaze_core::train::{train, train_pairs, TrainConfig, TrainOutcome};
use dehaze_core::{Image, Plane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = std::result::Result<(bool, String), Box<dyn Error>>;

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn_clamped(h, w, |_, _, _| rng.random::<f64>()).unwrap()
}

fn random_plane(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Plane {
    Plane::from_fn(h, w, |_, _| rng.random::<f64>()).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct HazeDraw {
    clean: Image,
    t: dehaze_core::haze::TransmissionMap,
    a: AtmosphericLight,
}

fn haze_corpus() -> Vec<HazeDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4a11);
    (0..50)
        .map(|_| {
            let (h, w) = (rng.random_range(8..40), rng.random_range(8..40));
            let clean = random_image(h, w, &mut rng);
            let beta = BETA_GRID[rng.random_range(0..BETA_GRID.len())];
            let far = 10f64.ln() / beta;
            let depth = DepthMap::new(Plane::from_fn(h, w, |_, _| rng.random_range(0.0..=far)).unwrap()).unwrap();
            let a = AtmosphericLight::new(std::array::from_fn(|_| rng.random_range(0.7..=1.0))).unwrap();
            HazeDraw {
                clean,
                t: transmission_from_depth(&depth, beta).unwrap(),
                a,
            }
        })
        .collect()
}

fn physics_round_trip() -> Check {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut min_t = f64::INFINITY;
    for d in haze_corpus() {
        min_t = min_t.min(d.t.min());
        let hazy = synthesize_haze(&d.clean, &d.t, &d.a)?;
        let back = invert_haze(&hazy, &d.t, &d.a, DEFAULT_T_MIN)?;
        worst = worst.max(max_abs(back.data(), d.clean.data()));
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-6 && min_t >= 0.1 && secs < 10.0,
        format!("max error {worst:.3e}, min t {min_t:.4}, {secs:.2} s"),
    ))
}

fn residual_identity() -> Check {
    let mut mismatches = 0usize;
    let mut total = 0usize;
    for d in haze_corpus() {
        let hazy = synthesize_haze(&d.clean, &d.t, &d.a)?;
        let r = haze_residual(&d.clean, &d.t, &d.a)?;
        for (i, (&j, &ri)) in d.clean.data().iter().zip(r.data()).enumerate() {
            total += 1;
            if (j + ri).to_bits() != hazy.data()[i].to_bits() {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("{mismatches} of {total} samples differ")))
}

fn gradient_suite() -> Check {
    let started = Instant::now();
    let reports = run_suite()?;
    let secs = started.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok((
        failed.is_empty() && secs < 300.0,
        format!(
            "{} cases, worst relative error {worst:.2e}, failed {failed:?}, {secs:.1} s",
            reports.len()
        ),
    ))
}

fn clipped_window(h: usize, w: usize, y: usize, x: usize, r: usize) -> impl Iterator<Item = (usize, usize)> {
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
    (y0..=y1).flat_map(move |yy| (x0..=x1).map(move |xx| (yy, xx)))
}

/// Per-window ridge regression solved from its normal equations, then the
/// covering windows' predictions averaged.
fn guided_oracle(guide: &Plane, input: &Plane, r: usize, eps: f64) -> Plane {
    let (h, w) = guide.dims();
    let mut coef = vec![(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut n, mut si, mut sp, mut sii, mut sip) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (yy, xx) in clipped_window(h, w, y, x, r) {
                let (i, p) = (guide.get(yy, xx), input.get(yy, xx));
                n += 1.0;
                si += i;
                sp += p;
                sii += i * i;
                sip += i * p;
            }
            let det = (sii + n * eps) * n - si * si;
            coef[y * w + x] = ((sip * n - si * sp) / det, ((sii + n * eps) * sp - si * sip) / det);
        }
    }
    Plane::from_fn(h, w, |y, x| {
        let i = guide.get(y, x);
        let (s, n) = clipped_window(h, w, y, x, r).fold((0.0, 0.0), |(s, n), (yy, xx)| {
            let (a, b) = coef[yy * w + xx];
            (s + a * i + b, n + 1.0)
        });
        s / n
    })
    .unwrap()
}

fn guided_filter_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6f1);
    let mut worst = 0.0f64;
    for r in [1, 2, 4] {
        for eps in [1e-4, 1e-2, 1.0] {
            let guide = random_plane(24, 24, &mut rng);
            let input = random_plane(24, 24, &mut rng);
            let fast = guided_filter(&guide, &input, &GuidedFilterParams::new(r, eps)?)?;
            worst = worst.max(max_abs(fast.data(), guided_oracle(&guide, &input, r, eps).data()));
        }
    }
    let mut self_worst = 0.0f64;
    for r in [1, 2, 4] {
        let p = random_plane(24, 24, &mut rng);
        let params = GuidedFilterParams {
            radius: r,
            epsilon: 0.0,
        };
        self_worst = self_worst.max(max_abs(guided_filter(&p, &p, &params)?.data(), p.data()));
    }
    Ok((
        worst <= 1e-6 && self_worst <= 1e-6,
        format!("oracle max diff {worst:.2e}, self-guidance max diff {self_worst:.2e}"),
    ))
}

fn halo_corpus_reduction() -> Check {
    let cases = [
        (20usize, 40usize, 0.2, 0.8, 1.5),
        (30, 64, 0.3, 0.7, 0.8),
        (12, 32, 0.25, 0.75, 2.5),
        (40, 80, 0.22, 0.78, 1.0),
        (24, 48, 0.35, 0.9, 1.2),
    ];
    let mut worst_ratio = 0.0f64;
    for &(edge, w, lo, hi, softness) in &cases {
        let hazy = Image::from_fn_clamped(24, w, |_, x, c| {
            let s = 1.0 / (1.0 + (-(x as f64 - edge as f64 + 0.5) / softness).exp());
            0.45 + 0.03 * c as f64 + 0.2 * s
        })?;
        let overshoot = |x: usize| {
            let (d, sign) = if x < edge {
                (edge - 1 - x, -1.0)
            } else {
                (x - edge, 1.0)
            };
            if d < 4 {
                sign * 0.2 * (1.0 - d as f64 / 4.0)
            } else {
                0.0
            }
        };
        let dehazed = Image::from_fn_clamped(24, w, |_, x, _| if x < edge { lo } else { hi } + overshoot(x))?;
        let excursion = |img: &Image| {
            img.data()
                .iter()
                .map(|&v| (lo - v).max(v - hi).max(0.0))
                .fold(0.0, f64::max)
        };
        let refined = halo_suppress(&hazy, &dehazed, &GuidedFilterParams::default())?;
        worst_ratio = worst_ratio.max(excursion(&refined) / excursion(&dehazed));
    }
    Ok((
        worst_ratio <= 0.5,
        format!(
            "{} edges, worst remaining excursion {:.1}% (reduction {:.1}%)",
            cases.len(),
            100.0 * worst_ratio,
            100.0 * (1.0 - worst_ratio)
        ),
    ))
}

fn weight_endpoints() -> Check {
    let light = adaptive_weights(0.5);
    let heavy = adaptive_weights(1.5);
    let ok =
        (light.w1, light.w2, light.w3) == (0.95, 1e-6, 0.002) && (heavy.w1, heavy.w2, heavy.w3) == (1.0, 2e-6, 0.001);
    Ok((ok, format!("beta 0.5 -> {light:?}, beta 1.5 -> {heavy:?}")))
}

fn naive_psnr(a: &Image, b: &Image) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.data().len() {
        let d = a.data()[i] - b.data()[i];
        sum += d * d;
    }
    10.0 * (1.0 / (sum / a.data().len() as f64)).log10()
}

fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let mut kernel = vec![vec![0.0; k]; k];
    let mut norm = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = a.dims();
    let mut total = 0.0;
    for c in 0..3 {
        let mut sum = 0.0;
        let mut count = 0.0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = kernel[i][j] / norm;
                        let (va, vb) = (a.get(y + i, x + j, c), b.get(y + i, x + j, c));
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total += sum / count;
    }
    total / 3.0
}

fn metric_sanity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let params = SsimParams::default();
    let x = random_image(32, 32, &mut rng);
    let self_ssim = ssim(&x, &x, &params)?;

    let base = Image::from_fn_clamped(32, 32, |_, _, _| rng.random_range(0.2..0.8))?;
    let shifted = Image::new(32, 32, base.data().iter().map(|v| v + 0.1).collect())?;
    let uniform = psnr(&base, &shifted, 1.0)?;

    let (mut psnr_diff, mut ssim_diff) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let a = random_image(32, 32, &mut rng);
        let b = Image::from_fn_clamped(32, 32, |y, x, c| a.get(y, x, c) + rng.random_range(-0.2..0.2))?;
        psnr_diff = psnr_diff.max((psnr(&a, &b, 1.0)? - naive_psnr(&a, &b)).abs());
        ssim_diff = ssim_diff.max((ssim(&a, &b, &params)? - naive_ssim(&a, &b)).abs());
    }
    Ok((
        self_ssim == 1.0 && (uniform - 20.0).abs() <= 1e-9 && psnr_diff <= 1e-9 && ssim_diff <= 1e-6,
        format!(
            "ssim(x,x) = {self_ssim}, uniform-error psnr {uniform:.12} dB, oracle diffs psnr {psnr_diff:.1e} ssim {ssim_diff:.1e}"
        ),
    ))
}

fn add_noise(img: &Image, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = img.dims();
    Image::from_fn_clamped(h, w, |y, x, c| img.get(y, x, c) + noise.sample(rng)).unwrap()
}

fn denoising_analogy() -> Check {
    let spec = GeneratorSpec {
        feature_channels: 16,
        num_subblocks: 4,
        ..GeneratorSpec::default()
    };
    let mut net = build_generator(spec, 3)?;
    let noise = Normal::new(0.0, 0.1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train_set: Vec<Image> = (0..16)
        .map(|i| synthetic_scene(32, 32, 1000 + i))
        .collect::<Result<_, _>>()?;
    let held_out: Vec<Image> = (0..4)
        .map(|i| synthetic_scene(32, 32, 2000 + i))
        .collect::<Result<_, _>>()?;
    let mut adam = AdamState::new(AdamConfig::default());
    for step in 0..200 {
        let clean: Vec<Image> = (0..4)
            .map(|k| train_set[(step * 4 + k) % train_set.len()].clone())
            .collect();
        let noisy: Vec<Image> = clean.iter().map(|c| add_noise(c, &noise, &mut rng)).collect();
        let mut g = Graph::new();
        let x = g.constant(Image::batch_to_tensor(&noisy)?)?;
        let y = g.constant(Image::batch_to_tensor(&clean)?)?;
        let (out, updates) = net.forward_graph(&mut g, x, BnMode::Train)?;
        let loss = mse_term(&mut g, out, y)?;
        let grads = g.backward(loss)?;
        adam.step(&mut net.params, grads.params())?;
        apply_bn_updates(&mut net.params, &updates)?;
    }
    let (mut before, mut after) = (0.0, 0.0);
    for c in &held_out {
        let noisy = add_noise(c, &noise, &mut rng);
        before += psnr(c, &noisy, 1.0)?;
        after += psnr(c, &generator_forward(&net, &noisy)?, 1.0)?;
    }
    let n = held_out.len() as f64;
    let (before, after) = (before / n, after / n);
    Ok((
        after - before >= 1.0,
        format!(
            "held-out psnr noisy {before:.2} dB, denoised {after:.2} dB, gain {:.2} dB",
            after - before
        ),
    ))
}

fn toy_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        patches_per_entry: 4,
        seed: 1,
        generator: GeneratorSpec {
            feature_channels: 16,
            num_subblocks: 4,
            ..GeneratorSpec::default()
        },
        discriminator: DiscriminatorSpec {
            channels: vec![8, 16, 32, 64],
            dense_hidden: 64,
            ..DiscriminatorSpec::default()
        },
        ..TrainConfig::default()
    }
}

fn toy_pairs() -> Result<Vec<TrainingPair>, Box<dyn Error>> {
    let mut pairs = Vec::new();
    for (i, src) in toy_sources(8, 64, 100)?.into_iter().enumerate() {
        let (hazy, params) = make_hazy_pair(&src.clean, &src.depth, &mut entry_rng(7, i as u64))?;
        pairs.push(TrainingPair {
            hazy,
            clean: src.clean,
            beta: params.beta,
        });
    }
    Ok(pairs)
}

fn toy_training(pairs: &[TrainingPair]) -> std::result::Result<(bool, String, Option<GeneratorNet>), Box<dyn Error>> {
    let started = Instant::now();
    let outcome: TrainOutcome = match train_pairs(&toy_config(30), pairs, None) {
        Ok(o) => o,
        Err(e) => return Ok((false, format!("training aborted: {e}"), None)),
    };
    let secs = started.elapsed().as_secs_f64();
    let records = &outcome.log.records;
    let (first, last) = (records[0].g_total, records[records.len() - 1].g_total);
    let losses_finite = records.iter().all(|r| r.g_total.is_finite() && r.d_loss.is_finite());

    let mut probs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (i, p) in pairs.iter().enumerate() {
        let dehazed = generator_forward(&outcome.generator, &p.hazy)?;
        for patch in extract_patches(&dehazed, &p.clean, 50, 2, i, p.beta, &mut rng)? {
            probs.extend(outcome.discriminator.forward_batch(&[patch.hazy, patch.clean])?);
        }
    }
    let (pmin, pmax) = probs
        .iter()
        .fold((1.0f64, 0.0f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    let in_open_interval = probs.iter().all(|&p| p > 0.0 && p < 1.0);

    let (mut hazy_psnr, mut dehazed_psnr) = (0.0, 0.0);
    for p in pairs {
        hazy_psnr += psnr(&p.clean, &p.hazy, 1.0)?;
        dehazed_psnr += psnr(&p.clean, &generator_forward(&outcome.generator, &p.hazy)?, 1.0)?;
    }
    let n = pairs.len() as f64;
    let (hazy_psnr, dehazed_psnr) = (hazy_psnr / n, dehazed_psnr / n);

    let a = last <= 0.8 * first;
    let b = losses_finite && in_open_interval;
    let c = dehazed_psnr > hazy_psnr;
    Ok((
        a && b && c,
        format!(
            "(a) g_total {first:.4} -> {last:.4}, ratio {:.3} [{}]; (b) D outputs in [{pmin:.4}, {pmax:.4}] [{}]; \
             (c) psnr hazy {hazy_psnr:.2} dB, dehazed {dehazed_psnr:.2} dB [{}]; {secs:.0} s",
            last / first,
            if a { "ok" } else { "fail" },
            if b { "ok" } else { "fail" },
            if c { "ok" } else { "fail" },
        ),
        Some(outcome.generator),
    ))
}

fn fixed_point_report(generator: Option<&GeneratorNet>, pairs: &[TrainingPair]) -> Check {
    let Some(net) = generator else {
        return Ok((false, "no trained model available".into()));
    };
    let mut lines = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let (_, norms) = recursive_dehaze(net, &p.hazy, 3)?;
        let monotone = norms.windows(2).all(|w| w[1] < w[0]);
        lines.push(format!(
            "image {i}: [{}]{}",
            norms.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "),
            if monotone { " decreasing" } else { "" }
        ));
    }
    Ok((
        lines.len() == pairs.len(),
        format!("per-pass residual norms, k=3\n      {}", lines.join("\n      ")),
    ))
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir()?;
    let data_dir = tmp.path().join("data");
    make_dataset(&toy_sources(8, 64, 100)?, &data_dir, 11, DEFAULT_DEPTH_SCALE)?;
    let manifest = data_dir.join("manifest.json");
    let config = TrainConfig {
        record_wall_time: false,
        ..toy_config(3)
    };
    let mut trees = Vec::new();
    let mut logs = Vec::new();
    for run in 0..2 {
        let out = tmp.path().join(format!("run{run}"));
        let (outcome, _) = train(&config, &manifest, &out)?;
        logs.push(outcome.log.records.iter().map(|r| r.without_time()).collect::<Vec<_>>());
        trees.push(read_tree(&out));
    }
    let differing: Vec<&String> = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(*v))
        .map(|(k, _)| k)
        .collect();
    let same_files = trees[0].len() == trees[1].len() && differing.is_empty();
    Ok((
        same_files && logs[0] == logs[1],
        format!(
            "{} files compared, differing {differing:?}, logs equal {}",
            trees[0].len(),
            logs[0] == logs[1]
        ),
    ))
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, check: Check) {
    let (pass, detail) = check.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!(
        "criterion {id:>2} {} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    results.push(pass);
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, 1, "physics round trip", physics_round_trip());
    report(&mut results, 2, "residual identity", residual_identity());
    report(&mut results, 3, "gradient suite", gradient_suite());
    report(&mut results, 4, "guided-filter oracle", guided_filter_oracle());
    report(&mut results, 5, "halo suppression", halo_corpus_reduction());
    report(&mut results, 6, "adaptive weight endpoints", weight_endpoints());
    report(&mut results, 7, "metric sanity", metric_sanity());
    report(&mut results, 8, "denoising analogy", denoising_analogy());

    let pairs = toy_pairs();
    let (toy, generator) = match &pairs {
        Ok(p) => match toy_training(p) {
            Ok((pass, detail, net)) => (Ok((pass, detail)), net),
            Err(e) => (Err(e), None),
        },
        Err(e) => (Err(e.to_string().into()), None),
    };
    report(&mut results, 9, "toy adversarial training", toy);
    let fixed = match &pairs {
        Ok(p) => fixed_point_report(generator.as_ref(), p),
        Err(e) => Err(e.to_string().into()),
    };
    report(&mut results, 10, "fixed-point diagnostic", fixed);
    report(&mut results, 11, "determinism", determinism());

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
