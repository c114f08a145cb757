//! Central finite-difference verification of the reverse-mode engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::discriminator::{build_discriminator, DiscriminatorNet, DiscriminatorSpec};
use crate::error::Result;
use crate::generator::{build_generator, GeneratorNet, GeneratorSpec};
use crate::loss::{self, FeatureExtractor, LossWeights, PROB_CLAMP};
use crate::tensor::{Activation, Graph, ParamKind, ParamSet, Tensor, Var};
use crate::train::{discriminator_objective, generator_objective};

/// Half-width of the symmetric difference.
pub const FD_STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-3;
/// Magnitudes below this count as this in the relative-error denominator.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Tensor and element index of the largest error.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= REL_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn evaluate(build: &impl Fn(&mut Graph, &ParamSet) -> Result<Var>, leaves: &ParamSet) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g, leaves)?;
    g.value(out)?.item()
}

/// Compares the backward pass of the scalar `build` records against central
/// differences in every element of every trainable tensor of `leaves`.
///
/// `build` must register each leaf with [`Graph::param`] under its own name.
pub fn check_gradients(
    name: &str,
    leaves: &ParamSet,
    build: impl Fn(&mut Graph, &ParamSet) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let out = build(&mut g, leaves)?;
    let analytic = g.backward(out)?.into_params();

    let mut work = leaves.clone();
    let mut report = GradCheckReport {
        name: name.to_owned(),
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let names: Vec<String> = leaves.trainable().map(|(n, _)| n.to_owned()).collect();
    for pname in names {
        let len = leaves.get(&pname)?.len();
        for i in 0..len {
            let orig = leaves.get(&pname)?.data()[i];
            let (up, down) = (orig + FD_STEP, orig - FD_STEP);
            work.get_mut(&pname).expect("cloned from leaves").data_mut()[i] = up;
            let fp = evaluate(&build, &work)?;
            work.get_mut(&pname).expect("cloned from leaves").data_mut()[i] = down;
            let fm = evaluate(&build, &work)?;
            work.get_mut(&pname).expect("cloned from leaves").data_mut()[i] = orig;

            let numeric = (fp - fm) / (up - down);
            let a = analytic.get(&pname).map_or(0.0, |t| t.data()[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pname.clone(), i));
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Copy)]
enum Fill {
    Uniform(f64, f64),
    /// Magnitude in `[0.1, 1]` with a random sign, clear of rectifier kinks.
    AwayFromZero,
}

struct Leaves {
    rng: ChaCha8Rng,
    set: ParamSet,
}

impl Leaves {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            set: ParamSet::new(),
        }
    }

    fn tensor(&mut self, shape: &[usize], fill: Fill) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = match fill {
                Fill::Uniform(lo, hi) => self.rng.random_range(lo..hi),
                Fill::AwayFromZero => {
                    let m = self.rng.random_range(0.1..1.0);
                    if self.rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                }
            };
        }
        t
    }

    fn add(mut self, name: &str, shape: &[usize], fill: Fill) -> Self {
        let t = self.tensor(shape, fill);
        self.set.insert(name, ParamKind::Trainable, t);
        self
    }
}

fn leaf(g: &mut Graph, p: &ParamSet, name: &str) -> Result<Var> {
    g.param(name, p.get(name)?)
}

const SIGNED: Fill = Fill::Uniform(-1.0, 1.0);

/// Generator used by the end-to-end check: 8x8 inputs, 4 channels, 2 sub-blocks.
pub fn shrunk_generator_spec() -> GeneratorSpec {
    GeneratorSpec {
        feature_channels: 4,
        kernel: 3,
        num_subblocks: 2,
        input_channels: 3,
    }
}

pub fn shrunk_discriminator_spec() -> DiscriminatorSpec {
    DiscriminatorSpec {
        channels: vec![4, 8],
        kernel: 3,
        input_size: 8,
        dense_hidden: 8,
        leaky_slope: 0.2,
    }
}

/// Replaces the near-zero initial weights with values of order one so that
/// every layer contributes visibly to the gradient.
fn scramble(params: &ParamSet, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_owned()).collect();
    for name in names {
        let mut t = params.get(&name)?.clone();
        let fan_in: usize = t.shape()[1..].iter().product::<usize>().max(1);
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        for v in t.data_mut() {
            *v = if name.ends_with(".w") {
                normal.sample(&mut rng)
            } else if name.ends_with(".gamma") {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-0.2..0.2)
            };
        }
        out.set(&name, t)?;
    }
    Ok(out)
}

fn layer_cases() -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let mut weights = |shape: &[usize]| {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        t
    };

    for (label, x_shape, w_shape, stride) in [
        ("conv2d 3x3 stride 1", [2, 3, 5, 6], [4, 3, 3, 3], 1),
        ("conv2d 3x3 stride 2", [2, 2, 7, 6], [3, 2, 3, 3], 2),
        ("conv2d 5x5 stride 1", [1, 3, 6, 6], [2, 3, 5, 5], 1),
        ("conv2d 1x1 stride 2", [2, 3, 5, 5], [2, 3, 1, 1], 2),
    ] {
        let leaves = Leaves::new(1)
            .add("x", &x_shape, SIGNED)
            .add("w", &w_shape, SIGNED)
            .add("b", &[w_shape[0]], SIGNED)
            .set;
        let out_shape = [
            x_shape[0],
            w_shape[0],
            x_shape[2].div_ceil(stride),
            x_shape[3].div_ceil(stride),
        ];
        let probe = weights(&out_shape);
        reports.push(check_gradients(label, &leaves, |g, p| {
            let (x, w, b) = (leaf(g, p, "x")?, leaf(g, p, "w")?, leaf(g, p, "b")?);
            let y = g.conv2d(x, w, b, stride)?;
            g.dot(y, &probe)
        })?);
    }

    let bn_leaves = Leaves::new(2)
        .add("x", &[3, 4, 3, 3], SIGNED)
        .add("gamma", &[4], Fill::Uniform(0.5, 1.5))
        .add("beta", &[4], SIGNED)
        .set;
    let probe = weights(&[3, 4, 3, 3]);
    reports.push(check_gradients("batch norm (batch statistics)", &bn_leaves, |g, p| {
        let (x, gm, bt) = (leaf(g, p, "x")?, leaf(g, p, "gamma")?, leaf(g, p, "beta")?);
        let (y, _) = g.batch_norm_train(x, gm, bt, crate::nn::BN_EPS)?;
        g.dot(y, &probe)
    })?);
    let mean = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0])?;
    let var = Tensor::new(vec![4], vec![0.5, 1.5, 0.25, 1.0])?;
    reports.push(check_gradients(
        "batch norm (running statistics)",
        &bn_leaves,
        |g, p| {
            let (x, gm, bt) = (leaf(g, p, "x")?, leaf(g, p, "gamma")?, leaf(g, p, "beta")?);
            let y = g.batch_norm_infer(x, gm, bt, &mean, &var, crate::nn::BN_EPS)?;
            g.dot(y, &probe)
        },
    )?);

    let act_leaves = Leaves::new(3).add("x", &[2, 3, 4, 4], Fill::AwayFromZero).set;
    let probe = weights(&[2, 3, 4, 4]);
    for (label, act) in [
        ("relu", Activation::Relu),
        ("leaky relu", Activation::LeakyRelu(0.2)),
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
    ] {
        reports.push(check_gradients(label, &act_leaves, |g, p| {
            let x = leaf(g, p, "x")?;
            let y = g.activate(x, act)?;
            g.dot(y, &probe)
        })?);
    }

    let dense_leaves = Leaves::new(4)
        .add("x", &[4, 6], SIGNED)
        .add("w", &[5, 6], SIGNED)
        .add("b", &[5], SIGNED)
        .set;
    let probe = weights(&[4, 5]);
    reports.push(check_gradients("dense", &dense_leaves, |g, p| {
        let (x, w, b) = (leaf(g, p, "x")?, leaf(g, p, "w")?, leaf(g, p, "b")?);
        let y = g.dense(x, w, b)?;
        g.dot(y, &probe)
    })?);

    let elem_leaves = Leaves::new(5)
        .add("a", &[2, 3, 2, 2], SIGNED)
        .add("b", &[2, 3, 2, 2], SIGNED)
        .add("c", &[2, 3, 2, 2], SIGNED)
        .set;
    let probe = weights(&[2, 12]);
    reports.push(check_gradients("add, sub, affine, flatten", &elem_leaves, |g, p| {
        let (a, b, c) = (leaf(g, p, "a")?, leaf(g, p, "b")?, leaf(g, p, "c")?);
        let s = g.add(a, b)?;
        let d = g.sub(s, c)?;
        let e = g.affine(d, -1.5, 0.25)?;
        let f = g.flatten(e)?;
        g.dot(f, &probe)
    })?);
    reports.push(check_gradients("reshape", &elem_leaves, |g, p| {
        let a = leaf(g, p, "a")?;
        let r = g.reshape(a, &[2, 12])?;
        g.dot(r, &probe)
    })?);

    reports.push(check_gradients("squared error", &elem_leaves, |g, p| {
        let (a, b) = (leaf(g, p, "a")?, leaf(g, p, "b")?);
        g.squared_error(a, b, 8.0)
    })?);

    let prob_leaves = Leaves::new(6)
        .add("p", &[5, 1], Fill::Uniform(0.05, 0.95))
        .add("q", &[5, 1], Fill::Uniform(0.05, 0.95))
        .set;
    reports.push(check_gradients("negative log", &prob_leaves, |g, p| {
        let v = leaf(g, p, "p")?;
        g.neg_log_sum(v, PROB_CLAMP)
    })?);
    reports.push(check_gradients("negative log complement", &prob_leaves, |g, p| {
        let v = leaf(g, p, "p")?;
        g.neg_log_complement_sum(v, PROB_CLAMP)
    })?);
    reports.push(check_gradients("discriminator loss", &prob_leaves, |g, p| {
        let (real, fake) = (leaf(g, p, "p")?, leaf(g, p, "q")?);
        loss::discriminator_term(g, real, fake)
    })?);
    reports.push(check_gradients("weighted sum", &elem_leaves, |g, p| {
        let (a, b, c) = (leaf(g, p, "a")?, leaf(g, p, "b")?, leaf(g, p, "c")?);
        let t1 = g.squared_error(a, b, 2.0)?;
        let t2 = g.squared_error(b, c, 3.0)?;
        g.weighted_sum(&[(t1, 0.7), (t2, -1.3)])
    })?);

    let extractor = FeatureExtractor::random(&[4, 6], 3, 7);
    let feat_leaves = Leaves::new(8)
        .add("estimate", &[2, 3, 6, 6], Fill::Uniform(0.0, 1.0))
        .set;
    let truth = Leaves::new(9).tensor(&[2, 3, 6, 6], Fill::Uniform(0.0, 1.0));
    reports.push(check_gradients("feature loss", &feat_leaves, |g, p| {
        let e = leaf(g, p, "estimate")?;
        loss::feature_term(g, &extractor, e, &truth)
    })?);
    Ok(reports)
}

fn network_cases() -> Result<Vec<GradCheckReport>> {
    let gen = build_generator(shrunk_generator_spec(), 21)?;
    let disc = build_discriminator(shrunk_discriminator_spec(), 22)?;
    let gen = GeneratorNet::from_parts(gen.spec().clone(), scramble(&gen.params, 23)?)?;
    let disc = DiscriminatorNet::from_parts(disc.spec().clone(), scramble(&disc.params, 24)?)?;
    let extractor = FeatureExtractor::random(&[4, 6], 3, 25);

    let mut data = Leaves::new(26);
    let hazy = data.tensor(&[2, 3, 8, 8], Fill::Uniform(0.0, 1.0));
    let clean = data.tensor(&[2, 3, 8, 8], Fill::Uniform(0.0, 1.0));
    let weights = LossWeights::new(1.0, 0.5, 0.25)?;

    let gen_report = check_gradients("generator end to end", &gen.params, |g, p| {
        let net = GeneratorNet::from_parts(gen.spec().clone(), p.clone())?;
        Ok(generator_objective(g, &net, &disc, &extractor, &hazy, &clean, &weights)?.total)
    })?;
    let disc_report = check_gradients("discriminator end to end", &disc.params, |g, p| {
        let net = DiscriminatorNet::from_parts(disc.spec().clone(), p.clone())?;
        Ok(discriminator_objective(g, &net, &clean, &hazy)?.0)
    })?;
    Ok(vec![gen_report, disc_report])
}

/// Every layer kind, every loss and both shrunk networks.
pub fn run_suite() -> Result<Vec<GradCheckReport>> {
    let mut reports = layer_cases()?;
    reports.extend(network_cases()?);
    Ok(reports)
}
