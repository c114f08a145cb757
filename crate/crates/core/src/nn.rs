//! Layer helpers shared by the generator, discriminator and feature extractor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::image::Image;
use crate::tensor::{BatchNormStats, Graph, ParamKind, ParamSet, Tensor, Var};

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the running-average update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Which statistics batch normalization uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Infer,
}

/// Batch statistics observed in one training-mode forward pass, keyed by layer name.
pub type BnUpdates = Vec<(String, BatchNormStats)>;

pub(crate) fn add_conv<R: Rng>(params: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) {
    params.insert_gaussian(format!("{name}.w"), &[cout, cin, k, k], INIT_STD, rng);
    params.insert(format!("{name}.b"), ParamKind::Trainable, Tensor::zeros(&[cout]));
}

pub(crate) fn add_dense<R: Rng>(params: &mut ParamSet, name: &str, fin: usize, fout: usize, rng: &mut R) {
    params.insert_gaussian(format!("{name}.w"), &[fout, fin], INIT_STD, rng);
    params.insert(format!("{name}.b"), ParamKind::Trainable, Tensor::zeros(&[fout]));
}

pub(crate) fn add_bn(params: &mut ParamSet, name: &str, channels: usize) {
    params.insert(
        format!("{name}.gamma"),
        ParamKind::Trainable,
        Tensor::full(&[channels], 1.0),
    );
    params.insert(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels]));
    params.insert(
        format!("{name}.running_mean"),
        ParamKind::Buffer,
        Tensor::zeros(&[channels]),
    );
    params.insert(
        format!("{name}.running_var"),
        ParamKind::Buffer,
        Tensor::full(&[channels], 1.0),
    );
}

pub(crate) fn conv(g: &mut Graph, params: &ParamSet, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(&format!("{name}.w"), params.get(&format!("{name}.w"))?)?;
    let b = g.param(&format!("{name}.b"), params.get(&format!("{name}.b"))?)?;
    g.conv2d(x, w, b, stride)
}

pub(crate) fn dense(g: &mut Graph, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.w"), params.get(&format!("{name}.w"))?)?;
    let b = g.param(&format!("{name}.b"), params.get(&format!("{name}.b"))?)?;
    g.dense(x, w, b)
}

pub(crate) fn batch_norm(
    g: &mut Graph,
    params: &ParamSet,
    name: &str,
    x: Var,
    mode: BnMode,
    updates: &mut BnUpdates,
) -> Result<Var> {
    let gamma = g.param(&format!("{name}.gamma"), params.get(&format!("{name}.gamma"))?)?;
    let beta = g.param(&format!("{name}.beta"), params.get(&format!("{name}.beta"))?)?;
    match mode {
        BnMode::Train => {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            updates.push((name.to_owned(), stats));
            Ok(y)
        }
        BnMode::Infer => {
            let mean = params.get(&format!("{name}.running_mean"))?;
            let var = params.get(&format!("{name}.running_var"))?;
            g.batch_norm_infer(x, gamma, beta, mean, var, BN_EPS)
        }
    }
}

/// Folds observed batch statistics into the running averages.
pub fn apply_bn_updates(params: &mut ParamSet, updates: &BnUpdates) -> Result<()> {
    for (name, stats) in updates {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let key = format!("{name}.{suffix}");
            let mut running = params.get(&key)?.clone();
            if running.len() != batch.len() {
                return Err(DehazeError::dims(format!(
                    "{key}: statistics of {} channels",
                    batch.len()
                )));
            }
            for (r, b) in running.data_mut().iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            params.set(&key, running)?;
        }
    }
    Ok(())
}

/// Maps `[0, 1]` pixels to the signed `[-1, 1]` network range.
pub(crate) fn to_signed(g: &mut Graph, x: Var) -> Result<Var> {
    g.affine(x, 2.0, -1.0)
}

/// Maps `[-1, 1]` network outputs back to `[0, 1]` pixels.
pub(crate) fn to_unsigned(g: &mut Graph, x: Var) -> Result<Var> {
    g.affine(x, 0.5, 0.5)
}

pub(crate) fn check_images(images: &[Image]) -> Result<(usize, usize)> {
    let first = images.first().ok_or_else(|| DehazeError::invalid("no images given"))?;
    for img in images {
        first.same_dims(img, "batch")?;
    }
    Ok(first.dims())
}
