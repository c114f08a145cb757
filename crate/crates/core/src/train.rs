//! Adversarial training loop, its configuration and its log.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TrainingState};
use crate::data::{self, DatasetManifest, PatchPair, TrainingPair};
use crate::discriminator::{build_discriminator, DiscriminatorNet, DiscriminatorSpec};
use crate::error::{DehazeError, Result};
use crate::generator::{build_generator, GeneratorNet, GeneratorSpec};
use crate::image::Image;
use crate::loss::{self, adaptive_weights, FeatureExtractor, LossWeights};
use crate::nn::{apply_bn_updates, BnMode, BnUpdates};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};

/// Recorded generator objective for one batch.
pub struct GeneratorObjective {
    pub total: Var,
    pub mse: Var,
    pub feature: Var,
    pub adversarial: Var,
}

/// Records `w1 * mse + w2 * feature + w3 * adversarial` for generator
/// outputs `output` already on `g`. The discriminator runs in training mode
/// with frozen parameters and its batch statistics are discarded.
pub fn generator_loss_terms(
    g: &mut Graph,
    output: Var,
    discriminator: &DiscriminatorNet,
    extractor: &FeatureExtractor,
    clean: &Tensor,
    weights: &LossWeights,
) -> Result<GeneratorObjective> {
    let truth = g.constant(clean.clone())?;
    let mse = loss::mse_term(g, output, truth)?;
    let feature = loss::feature_term(g, extractor, output, clean)?;
    g.set_params_frozen(true);
    let probs = discriminator.forward_graph(g, output, BnMode::Train);
    g.set_params_frozen(false);
    let adversarial = loss::adversarial_term(g, probs?.0)?;
    let total = g.weighted_sum(&[(mse, weights.w1), (feature, weights.w2), (adversarial, weights.w3)])?;
    Ok(GeneratorObjective {
        total,
        mse,
        feature,
        adversarial,
    })
}

/// Runs the generator in training mode on `hazy` and records its objective.
pub fn generator_objective(
    g: &mut Graph,
    generator: &GeneratorNet,
    discriminator: &DiscriminatorNet,
    extractor: &FeatureExtractor,
    hazy: &Tensor,
    clean: &Tensor,
    weights: &LossWeights,
) -> Result<GeneratorObjective> {
    let x = g.constant(hazy.clone())?;
    let (output, _) = generator.forward_graph(g, x, BnMode::Train)?;
    generator_loss_terms(g, output, discriminator, extractor, clean, weights)
}

/// Records the discriminator objective on a real and a generated batch.
pub fn discriminator_objective(
    g: &mut Graph,
    discriminator: &DiscriminatorNet,
    real: &Tensor,
    fake: &Tensor,
) -> Result<(Var, BnUpdates)> {
    let r = g.constant(real.clone())?;
    let f = g.constant(fake.clone())?;
    let (pr, mut updates) = discriminator.forward_graph(g, r, BnMode::Train)?;
    let (pf, fake_updates) = discriminator.forward_graph(g, f, BnMode::Train)?;
    updates.extend(fake_updates);
    Ok((loss::discriminator_term(g, pr, pf)?, updates))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Last epoch (1-based) trained with `lr_phase1`.
    pub lr_switch_epoch: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub patches_per_entry: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub d_steps_per_g_step: usize,
    pub adaptive_weights_enabled: bool,
    pub record_wall_time: bool,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub feature_extractor_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            lr_switch_epoch: 50,
            batch_size: 16,
            patch_size: 50,
            patches_per_entry: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            d_steps_per_g_step: 1,
            adaptive_weights_enabled: true,
            record_wall_time: true,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            feature_extractor_seed: FeatureExtractor::BUILTIN_SEED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(DehazeError::Config("epochs must be at least 1".into()));
        }
        for (name, lr) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(DehazeError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 || self.patches_per_entry == 0 || self.d_steps_per_g_step == 0 {
            return Err(DehazeError::Config(
                "batch_size, patches_per_entry and d_steps_per_g_step must be at least 1".into(),
            ));
        }
        if self.patch_size != self.discriminator.input_size {
            return Err(DehazeError::Config(format!(
                "patch_size {} differs from discriminator input {}",
                self.patch_size, self.discriminator.input_size
            )));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        Ok(())
    }

    /// Learning rate in effect during a 1-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_switch_epoch {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_phase1,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| DehazeError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DehazeError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DehazeError::Config(e.to_string()))
    }
}

/// Per-epoch means of every loss component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub g_total: f64,
    pub g_mse: f64,
    pub g_feat: f64,
    pub g_adv: f64,
    pub d_loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

impl EpochRecord {
    /// The record with timing removed, for run-to-run comparison.
    pub fn without_time(&self) -> EpochRecord {
        EpochRecord {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| DehazeError::Config(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_json_lines(s: &str) -> Result<Self> {
        let records = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| DehazeError::Config(format!("train log: {e}"))))
            .collect::<Result<Vec<EpochRecord>>>()?;
        Ok(Self { records })
    }
}

/// Everything a training run produces.
#[derive(Debug)]
pub struct TrainOutcome {
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub generator_adam: AdamState,
    pub discriminator_adam: AdamState,
    pub log: TrainLog,
}

#[derive(Default)]
struct EpochSums {
    g_total: f64,
    g_mse: f64,
    g_feat: f64,
    g_adv: f64,
    d_loss: f64,
    batches: usize,
}

fn batch_tensors(batch: &[&PatchPair]) -> Result<(Tensor, Tensor)> {
    let hazy: Vec<Image> = batch.iter().map(|p| p.hazy.clone()).collect();
    let clean: Vec<Image> = batch.iter().map(|p| p.clean.clone()).collect();
    Ok((Image::batch_to_tensor(&hazy)?, Image::batch_to_tensor(&clean)?))
}

fn finite_or_abort(value: f64, what: &str, epoch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DehazeError::NonFinite(format!(
            "{what} became {value} in epoch {epoch}"
        )))
    }
}

/// Trains from scratch on in-memory pairs.
///
/// `diagnostics`, when given, receives checkpoints of both networks if the
/// run aborts on a non-finite value.
pub fn train_pairs(config: &TrainConfig, pairs: &[TrainingPair], diagnostics: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(DehazeError::invalid("training needs at least one pair"));
    }
    let mut generator = build_generator(config.generator.clone(), config.seed)?;
    let mut discriminator = build_discriminator(config.discriminator.clone(), config.seed.wrapping_add(1))?;
    let extractor = FeatureExtractor::builtin(config.feature_extractor_seed);
    let mut g_adam = AdamState::new(config.adam());
    let mut d_adam = AdamState::new(config.adam());
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = config.learning_rate(epoch);
        g_adam.config.lr = lr;
        d_adam.config.lr = lr;

        let mut patches = Vec::new();
        for (i, pair) in pairs.iter().enumerate() {
            let mut rng = data::entry_rng(config.seed ^ 0x70_6174_6368_6573, (epoch as u64) << 32 | i as u64);
            patches.extend(data::extract_patches(
                &pair.hazy,
                &pair.clean,
                config.patch_size,
                config.patches_per_entry,
                i,
                pair.beta,
                &mut rng,
            )?);
        }
        let mut order_rng = data::entry_rng(config.seed ^ 0x6f_7264_6572, epoch as u64);
        let mut order: Vec<&PatchPair> = patches.iter().collect();
        order.shuffle(&mut order_rng);

        let mut sums = EpochSums::default();
        let step = (|| -> Result<()> {
            for batch in order.chunks(config.batch_size) {
                let (hazy, clean) = batch_tensors(batch)?;
                let weights = if config.adaptive_weights_enabled {
                    LossWeights::mean(&batch.iter().map(|p| adaptive_weights(p.beta)).collect::<Vec<_>>())?
                } else {
                    LossWeights::FIXED
                };

                let mut gg = Graph::new();
                let x = gg.constant(hazy)?;
                let (output, g_updates) = generator.forward_graph(&mut gg, x, BnMode::Train)?;
                let fake = gg.value(output)?.clone();

                let mut d_loss = 0.0;
                for _ in 0..config.d_steps_per_g_step {
                    let mut dg = Graph::new();
                    let (d_obj, d_updates) = discriminator_objective(&mut dg, &discriminator, &clean, &fake)?;
                    d_loss = finite_or_abort(dg.value(d_obj)?.item()?, "discriminator loss", epoch)?;
                    let grads = dg.backward(d_obj)?;
                    d_adam.step(&mut discriminator.params, grads.params())?;
                    apply_bn_updates(&mut discriminator.params, &d_updates)?;
                }

                // the adversarial term sees the updated discriminator
                let objective = generator_loss_terms(&mut gg, output, &discriminator, &extractor, &clean, &weights)?;
                let total = finite_or_abort(gg.value(objective.total)?.item()?, "generator loss", epoch)?;
                let grads = gg.backward(objective.total)?;
                g_adam.step(&mut generator.params, grads.params())?;
                apply_bn_updates(&mut generator.params, &g_updates)?;

                sums.g_total += total;
                sums.g_mse += gg.value(objective.mse)?.item()?;
                sums.g_feat += gg.value(objective.feature)?.item()?;
                sums.g_adv += gg.value(objective.adversarial)?.item()?;
                sums.d_loss += d_loss;
                sums.batches += 1;
            }
            Ok(())
        })();

        if let Err(err) = step {
            if let (DehazeError::NonFinite(_), Some(dir)) = (&err, diagnostics) {
                let _ = save_pair(dir, "diagnostic", &generator, &discriminator, None, None, epoch);
            }
            return Err(err);
        }

        let n = sums.batches as f64;
        log.records.push(EpochRecord {
            epoch,
            g_total: sums.g_total / n,
            g_mse: sums.g_mse / n,
            g_feat: sums.g_feat / n,
            g_adv: sums.g_adv / n,
            d_loss: sums.d_loss / n,
            lr,
            wall_time: if config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }

    Ok(TrainOutcome {
        generator,
        discriminator,
        generator_adam: g_adam,
        discriminator_adam: d_adam,
        log,
    })
}

/// Paths of the artifacts a manifest-driven run writes.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub generator: PathBuf,
    pub discriminator: PathBuf,
    pub log: PathBuf,
}

fn save_pair(
    dir: &Path,
    prefix: &str,
    generator: &GeneratorNet,
    discriminator: &DiscriminatorNet,
    g_adam: Option<&AdamState>,
    d_adam: Option<&AdamState>,
    epoch: usize,
) -> Result<(PathBuf, PathBuf)> {
    let gp = dir.join(format!("{prefix}_generator"));
    let dp = dir.join(format!("{prefix}_discriminator"));
    let state = |adam: Option<&AdamState>| adam.map(|a| TrainingState { epoch, adam: a.clone() });
    checkpoint::save_generator(generator, state(g_adam).as_ref(), &gp)?;
    checkpoint::save_discriminator(discriminator, state(d_adam).as_ref(), &dp)?;
    Ok((gp, dp))
}

/// Loads a dataset manifest, trains, and writes both checkpoints plus the
/// log into `out_dir`.
pub fn train(config: &TrainConfig, manifest_path: &Path, out_dir: &Path) -> Result<(TrainOutcome, TrainArtifacts)> {
    config.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let pairs = manifest.load_pairs(manifest_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| DehazeError::io(out_dir, e))?;
    let outcome = train_pairs(config, &pairs, Some(out_dir))?;
    let (gp, dp) = save_pair(
        out_dir,
        "final",
        &outcome.generator,
        &outcome.discriminator,
        Some(&outcome.generator_adam),
        Some(&outcome.discriminator_adam),
        config.epochs,
    )?;
    let log_path = out_dir.join("train_log.jsonl");
    std::fs::write(&log_path, outcome.log.to_json_lines()?).map_err(|e| DehazeError::io(&log_path, e))?;
    Ok((
        outcome,
        TrainArtifacts {
            generator: gp,
            discriminator: dp,
            log: log_path,
        },
    ))
}
