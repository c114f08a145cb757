//! Generator and discriminator objectives.
//!
//! The generator minimizes `w1 * l_mse + w2 * l_feat + w3 * l_adv` where the
//! weights follow the haze severity `beta` of the training sample. Pure scalar
//! versions of every term live next to the graph builders used in training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::image::Image;
use crate::tensor::ops::{conv2d_forward, Activation};
use crate::tensor::{Graph, ParamKind, ParamSet, Tensor, Var};

/// Probability clamp applied before logarithms inside training graphs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Range of `beta` over which the loss weights are interpolated.
pub const BETA_RANGE: (f64, f64) = (0.5, 1.5);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl LossWeights {
    /// The non-adaptive setting used when adaptation is switched off.
    pub const FIXED: LossWeights = LossWeights {
        w1: 1.0,
        w2: 1e-6,
        w3: 0.002,
    };

    /// Weights at light haze (`beta = 0.5`) and heavy haze (`beta = 1.5`).
    pub const LIGHT: LossWeights = LossWeights {
        w1: 0.95,
        w2: 1e-6,
        w3: 0.002,
    };
    pub const HEAVY: LossWeights = LossWeights {
        w1: 1.0,
        w2: 2e-6,
        w3: 0.001,
    };

    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        if [w1, w2, w3].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(DehazeError::invalid(format!(
                "loss weights must be finite and nonnegative, got ({w1}, {w2}, {w3})"
            )));
        }
        Ok(Self { w1, w2, w3 })
    }

    /// Componentwise mean of several weight triples.
    pub fn mean(weights: &[LossWeights]) -> Result<Self> {
        if weights.is_empty() {
            return Err(DehazeError::invalid("cannot average zero weight triples"));
        }
        let n = weights.len() as f64;
        Ok(Self {
            w1: weights.iter().map(|w| w.w1).sum::<f64>() / n,
            w2: weights.iter().map(|w| w.w2).sum::<f64>() / n,
            w3: weights.iter().map(|w| w.w3).sum::<f64>() / n,
        })
    }
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    if f >= 1.0 {
        b
    } else {
        a + (b - a) * f
    }
}

/// Loss weights for haze severity `beta`, linear between the light- and
/// heavy-haze settings. `beta` outside `[0.5, 1.5]` is clamped.
pub fn adaptive_weights(beta: f64) -> LossWeights {
    let (lo, hi) = BETA_RANGE;
    let f = if beta.is_nan() {
        0.0
    } else {
        (beta.clamp(lo, hi) - lo) / (hi - lo)
    };
    let (l, h) = (LossWeights::LIGHT, LossWeights::HEAVY);
    LossWeights {
        w1: lerp(l.w1, h.w1, f),
        w2: lerp(l.w2, h.w2, f),
        w3: lerp(l.w3, h.w3, f),
    }
}

pub fn total_generator_loss(weights: &LossWeights, mse: f64, feature: f64, adversarial: f64) -> f64 {
    weights.w1 * mse + weights.w2 * feature + weights.w3 * adversarial
}

/// Pixel loss: squared differences summed over channels, averaged over pixels.
pub fn mse_loss(truth: &Image, estimate: &Image) -> Result<f64> {
    truth.same_dims(estimate, "mse_loss")?;
    let (h, w) = truth.dims();
    let s: f64 = truth
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(&a, &b)| {
            let d = a - b;
            d * d
        })
        .sum();
    Ok(s / (h * w) as f64)
}

fn check_probability(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DehazeError::invalid(format!(
            "probability must lie strictly inside (0, 1), got {p}"
        )));
    }
    Ok(())
}

/// `sum -ln p` over the discriminator's haze-free probabilities for generated images.
pub fn adversarial_loss(probabilities: &[f64]) -> Result<f64> {
    probabilities.iter().try_fold(0.0, |acc, &p| {
        check_probability(p)?;
        Ok(acc - p.ln())
    })
}

/// `sum -ln p_real + sum -ln(1 - p_fake)`.
pub fn discriminator_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    let real_term = adversarial_loss(real)?;
    let fake_term = fake.iter().try_fold(0.0, |acc, &p| {
        check_probability(p)?;
        Ok(acc - (1.0 - p).ln())
    })?;
    Ok(real_term + fake_term)
}

/// A frozen stack of `Conv + ReLU` layers standing in for a perceptual network.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    id: String,
    layers: Vec<(Tensor, Tensor)>,
}

impl FeatureExtractor {
    pub const BUILTIN_CHANNELS: [usize; 3] = [16, 32, 64];
    pub const BUILTIN_SEED: u64 = 0x5EED_F00D;

    /// The default random-Gaussian extractor, `3 -> 16 -> 32 -> 64`, 3x3 kernels,
    /// He-scaled weights.
    pub fn builtin(seed: u64) -> Self {
        Self::random(&Self::BUILTIN_CHANNELS, 3, seed)
    }

    pub fn random(channels: &[usize], kernel: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = Image::CHANNELS;
        for (i, &c) in channels.iter().enumerate() {
            let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
            params.insert_gaussian(format!("layer{i}.w"), &[c, cin, kernel, kernel], std, &mut rng);
            params.insert(format!("layer{i}.b"), ParamKind::Trainable, Tensor::zeros(&[c]));
            cin = c;
        }
        Self::from_params(format!("builtin-random-seed-{seed}"), &params).expect("layout built above")
    }

    /// Assembles an extractor from `layer{i}.w` / `layer{i}.b` tensors.
    pub fn from_params(id: impl Into<String>, params: &ParamSet) -> Result<Self> {
        let mut layers = Vec::new();
        let mut cin = Image::CHANNELS;
        for i in 0.. {
            let Ok(w) = params.get(&format!("layer{i}.w")) else {
                break;
            };
            let b = params.get(&format!("layer{i}.b"))?;
            let (co, ci, kh, kw) = w.dims4()?;
            if ci != cin || kh != kw || kh % 2 == 0 || b.shape() != [co] {
                return Err(DehazeError::dims(format!(
                    "feature layer {i} has weights {:?} and bias {:?} after {cin} channels",
                    w.shape(),
                    b.shape()
                )));
            }
            layers.push((w.clone(), b.clone()));
            cin = co;
        }
        if layers.is_empty() || layers.len() * 2 != params.len() {
            return Err(DehazeError::invalid(
                "feature extractor parameters must be layer0.w, layer0.b, layer1.w, ...",
            ));
        }
        Ok(Self { id: id.into(), layers })
    }

    /// Provenance tag of the weights.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            p.insert(format!("layer{i}.w"), ParamKind::Trainable, w.clone());
            p.insert(format!("layer{i}.b"), ParamKind::Trainable, b.clone());
        }
        p
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Feature maps of an `N x 3 x H x W` tensor.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (w, b) in &self.layers {
            h = conv2d_forward(&h, w, b, 1)?.map(|v| Activation::Relu.apply(v));
        }
        Ok(h)
    }

    /// Records the extractor on `g` with frozen weights.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (w, b) in &self.layers {
            let wv = g.constant(w.clone())?;
            let bv = g.constant(b.clone())?;
            h = g.conv2d(h, wv, bv, 1)?;
            h = g.activate(h, Activation::Relu)?;
        }
        Ok(h)
    }
}

/// Feature-space loss: squared feature differences divided by the spatial
/// extent of the feature maps.
pub fn feature_loss(extractor: &FeatureExtractor, truth: &Image, estimate: &Image) -> Result<f64> {
    truth.same_dims(estimate, "feature_loss")?;
    let ft = extractor.features(&truth.to_tensor()?)?;
    let fe = extractor.features(&estimate.to_tensor()?)?;
    let (_, _, h, w) = ft.dims4()?;
    let s: f64 = ft.data().iter().zip(fe.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / (h * w) as f64)
}

/// Batch-mean pixel loss of `estimate` against `truth` (`N x 3 x H x W`).
pub fn mse_term(g: &mut Graph, estimate: Var, truth: Var) -> Result<Var> {
    let (n, _, h, w) = g.value(estimate)?.dims4()?;
    g.squared_error(estimate, truth, (n * h * w) as f64)
}

/// Batch-mean feature loss; the truth features are treated as constants.
pub fn feature_term(g: &mut Graph, extractor: &FeatureExtractor, estimate: Var, truth: &Tensor) -> Result<Var> {
    let truth_features = g.constant(extractor.features(truth)?)?;
    let fe = extractor.forward_graph(g, estimate)?;
    let (n, _, h, w) = g.value(fe)?.dims4()?;
    g.squared_error(fe, truth_features, (n * h * w) as f64)
}

pub fn adversarial_term(g: &mut Graph, fake_probs: Var) -> Result<Var> {
    g.neg_log_sum(fake_probs, PROB_CLAMP)
}

pub fn discriminator_term(g: &mut Graph, real_probs: Var, fake_probs: Var) -> Result<Var> {
    let real = g.neg_log_sum(real_probs, PROB_CLAMP)?;
    let fake = g.neg_log_complement_sum(fake_probs, PROB_CLAMP)?;
    g.weighted_sum(&[(real, 1.0), (fake, 1.0)])
}
