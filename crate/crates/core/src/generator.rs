//! The residual dehazing generator.
//!
//! Head `Conv(3 -> c) + ReLU`, then a residual block of sub-blocks each computing
//! `F_i = F_{i-1} - Conv(ReLU(BN(Conv(F_{i-1}))))`, then
//! `E = F_0 - F_n` (input minus output of the residual block) and a tail
//! `Conv(c -> 3) + tanh`. Pixels enter as `2x - 1` and leave as `(y + 1) / 2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::image::Image;
use crate::nn::{self, BnMode, BnUpdates};
use crate::tensor::{Activation, Graph, ParamSet, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub feature_channels: usize,
    pub kernel: usize,
    pub num_subblocks: usize,
    pub input_channels: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            feature_channels: 64,
            kernel: 3,
            num_subblocks: 16,
            input_channels: 3,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_subblocks == 0 {
            return Err(DehazeError::invalid("generator needs at least one sub-block"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(DehazeError::invalid(format!(
                "generator kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.feature_channels == 0 {
            return Err(DehazeError::invalid("generator needs at least one feature channel"));
        }
        if self.input_channels != Image::CHANNELS {
            return Err(DehazeError::invalid(format!(
                "generator input must have 3 channels, got {}",
                self.input_channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    spec: GeneratorSpec,
    pub params: ParamSet,
}

fn block(i: usize) -> String {
    format!("block{i:02}")
}

/// Builds a generator with Gaussian-initialized convolutions.
pub fn build_generator(spec: GeneratorSpec, seed: u64) -> Result<GeneratorNet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, k) = (spec.feature_channels, spec.kernel);
    let mut params = ParamSet::new();
    nn::add_conv(&mut params, "head", spec.input_channels, c, k, &mut rng);
    for i in 0..spec.num_subblocks {
        let b = block(i);
        nn::add_conv(&mut params, &format!("{b}.conv1"), c, c, k, &mut rng);
        nn::add_bn(&mut params, &format!("{b}.bn"), c);
        nn::add_conv(&mut params, &format!("{b}.conv2"), c, c, k, &mut rng);
    }
    nn::add_conv(&mut params, "tail", c, spec.input_channels, k, &mut rng);
    Ok(GeneratorNet { spec, params })
}

impl GeneratorNet {
    /// Reassembles a network from a spec and previously saved parameters.
    pub fn from_parts(spec: GeneratorSpec, params: ParamSet) -> Result<Self> {
        let reference = build_generator(spec.clone(), 0)?;
        check_layout(&reference.params, &params)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Records the network on `g`. `x` holds `N x 3 x H x W` pixels in `[0, 1]`;
    /// the result holds pixels in `(0, 1)`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, mode: BnMode) -> Result<(Var, BnUpdates)> {
        let mut updates = BnUpdates::new();
        let p = &self.params;
        let signed = nn::to_signed(g, x)?;
        let head = nn::conv(g, p, "head", signed, 1)?;
        let features = g.activate(head, Activation::Relu)?;
        let mut current = features;
        for i in 0..self.spec.num_subblocks {
            let b = block(i);
            let h = nn::conv(g, p, &format!("{b}.conv1"), current, 1)?;
            let h = nn::batch_norm(g, p, &format!("{b}.bn"), h, mode, &mut updates)?;
            let h = g.activate(h, Activation::Relu)?;
            let residual = nn::conv(g, p, &format!("{b}.conv2"), h, 1)?;
            current = g.sub(current, residual)?;
        }
        let accumulated = g.sub(features, current)?;
        let tail = nn::conv(g, p, "tail", accumulated, 1)?;
        let out = g.activate(tail, Activation::Tanh)?;
        Ok((nn::to_unsigned(g, out)?, updates))
    }

    /// Inference-mode forward pass over a batch of equally sized images.
    pub fn forward_batch(&self, images: &[Image]) -> Result<Vec<Image>> {
        let (h, w) = nn::check_images(images)?;
        if h < self.spec.kernel || w < self.spec.kernel {
            return Err(DehazeError::invalid(format!(
                "image {h}x{w} is smaller than the {}x{} kernel",
                self.spec.kernel, self.spec.kernel
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(Image::batch_to_tensor(images)?)?;
        let (y, _) = self.forward_graph(&mut g, x, BnMode::Infer)?;
        let out = g.value(y)?;
        (0..images.len()).map(|n| Image::from_tensor(out, n)).collect()
    }
}

pub(crate) fn check_layout(reference: &ParamSet, params: &ParamSet) -> Result<()> {
    if reference.len() != params.len() {
        return Err(DehazeError::dims(format!(
            "expected {} parameter tensors, found {}",
            reference.len(),
            params.len()
        )));
    }
    for (name, kind, tensor) in reference.iter() {
        let found = params.get(name)?;
        if found.shape() != tensor.shape() || params.kind(name) != Some(kind) {
            return Err(DehazeError::dims(format!(
                "parameter {name}: expected {:?}, found {:?}",
                tensor.shape(),
                found.shape()
            )));
        }
    }
    Ok(())
}

/// One inference-mode pass of the generator.
pub fn generator_forward(net: &GeneratorNet, hazy: &Image) -> Result<Image> {
    Ok(net.forward_batch(std::slice::from_ref(hazy))?.remove(0))
}

/// Feeds the generator its own output `k` times, reporting the Euclidean
/// norm of `input - output` for every pass.
pub fn recursive_dehaze(net: &GeneratorNet, hazy: &Image, k: usize) -> Result<(Image, Vec<f64>)> {
    let mut current = hazy.clone();
    let mut norms = Vec::with_capacity(k);
    for _ in 0..k {
        let next = generator_forward(net, &current)?;
        let norm = current
            .data()
            .iter()
            .zip(next.data())
            .map(|(&a, &b)| {
                let d = a - b;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        norms.push(norm);
        current = next;
    }
    Ok((current, norms))
}
