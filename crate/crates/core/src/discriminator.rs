//! Patch discriminator: stages of `Conv(stride 1) + LeakyReLU` then
//! `Conv(stride 2) + BN + LeakyReLU`, followed by two dense layers and a sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::generator::check_layout;
use crate::image::Image;
use crate::nn::{self, BnMode, BnUpdates};
use crate::tensor::ops::conv_output_extent;
use crate::tensor::{Activation, Graph, ParamSet, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub input_size: usize,
    pub dense_hidden: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256, 512],
            kernel: 3,
            input_size: 50,
            dense_hidden: 1024,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels[0] == 0 {
            return Err(DehazeError::invalid("discriminator needs at least one stage"));
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DehazeError::invalid(format!(
                "discriminator channel progression must increase strictly, got {:?}",
                self.channels
            )));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(DehazeError::invalid("discriminator kernel must be odd"));
        }
        if self.input_size == 0 || self.dense_hidden == 0 {
            return Err(DehazeError::invalid("discriminator extents must be positive"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(DehazeError::invalid("leaky slope must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Spatial extents after each stride-2 stage.
    pub fn stage_extents(&self) -> Vec<usize> {
        let mut e = self.input_size;
        self.channels
            .iter()
            .map(|_| {
                e = conv_output_extent(e, 2);
                e
            })
            .collect()
    }

    pub fn flatten_size(&self) -> usize {
        let last = *self.stage_extents().last().expect("validated non-empty");
        self.channels.last().expect("validated non-empty") * last * last
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet {
    spec: DiscriminatorSpec,
    pub params: ParamSet,
}

fn stage(i: usize) -> String {
    format!("stage{i}")
}

pub fn build_discriminator(spec: DiscriminatorSpec, seed: u64) -> Result<DiscriminatorNet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.kernel;
    let mut params = ParamSet::new();
    let mut cin = Image::CHANNELS;
    for (i, &c) in spec.channels.iter().enumerate() {
        let s = stage(i);
        nn::add_conv(&mut params, &format!("{s}.conv1"), cin, c, k, &mut rng);
        nn::add_conv(&mut params, &format!("{s}.conv2"), c, c, k, &mut rng);
        nn::add_bn(&mut params, &format!("{s}.bn"), c);
        cin = c;
    }
    nn::add_dense(&mut params, "dense1", spec.flatten_size(), spec.dense_hidden, &mut rng);
    nn::add_dense(&mut params, "dense2", spec.dense_hidden, 1, &mut rng);
    Ok(DiscriminatorNet { spec, params })
}

impl DiscriminatorNet {
    pub fn from_parts(spec: DiscriminatorSpec, params: ParamSet) -> Result<Self> {
        let reference = build_discriminator(spec.clone(), 0)?;
        check_layout(&reference.params, &params)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Records the network on `g`; `x` is `N x 3 x S x S` in `[0, 1]`, the result `N x 1`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, mode: BnMode) -> Result<(Var, BnUpdates)> {
        let shape = g.value(x)?.shape().to_vec();
        let s = self.spec.input_size;
        if shape.len() != 4 || shape[1] != Image::CHANNELS || shape[2] != s || shape[3] != s {
            return Err(DehazeError::invalid(format!(
                "discriminator expects N x 3 x {s} x {s} patches, got {shape:?}"
            )));
        }
        let mut updates = BnUpdates::new();
        let p = &self.params;
        let leaky = Activation::LeakyRelu(self.spec.leaky_slope);
        let mut h = nn::to_signed(g, x)?;
        for i in 0..self.spec.channels.len() {
            let st = stage(i);
            h = nn::conv(g, p, &format!("{st}.conv1"), h, 1)?;
            h = g.activate(h, leaky)?;
            h = nn::conv(g, p, &format!("{st}.conv2"), h, 2)?;
            h = nn::batch_norm(g, p, &format!("{st}.bn"), h, mode, &mut updates)?;
            h = g.activate(h, leaky)?;
        }
        let flat = g.flatten(h)?;
        let hidden = nn::dense(g, p, "dense1", flat)?;
        let hidden = g.activate(hidden, leaky)?;
        let logit = nn::dense(g, p, "dense2", hidden)?;
        Ok((g.activate(logit, Activation::Sigmoid)?, updates))
    }

    /// Inference-mode probabilities that each patch is haze-free.
    pub fn forward_batch(&self, patches: &[Image]) -> Result<Vec<f64>> {
        nn::check_images(patches)?;
        let mut g = Graph::new();
        let x = g.constant(Image::batch_to_tensor(patches)?)?;
        let (p, _) = self.forward_graph(&mut g, x, BnMode::Infer)?;
        Ok(g.value(p)?.data().to_vec())
    }
}

/// Probability that a single patch is haze-free.
pub fn discriminator_forward(net: &DiscriminatorNet, patch: &Image) -> Result<f64> {
    Ok(net.forward_batch(std::slice::from_ref(patch))?[0])
}
