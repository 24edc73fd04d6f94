//! Alternating adversarial optimization, early stopping, checkpointing and
//! evaluation.
//!
//! Each step runs the generator once in training mode. The discriminator is
//! updated first on `(image, one-hot truth)` as real and `(image, detached
//! generator output)` as fake; the generator is then updated on the
//! least-squares adversarial term against the freshly updated discriminator
//! plus `λ` times the segmentation loss. With the adversarial branch disabled
//! only the segmentation loss is optimized.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, SectionData};
use crate::data::{batches, BatchIterator, ClassMap, DatasetSplit, PreparedSample};
use crate::discriminator::{build_discriminator, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{build_generator, Generator, GeneratorConfig};
use crate::losses::{self, inverse_frequency_weights, LossConfig, LossKind};
use crate::metrics::{self, MetricsReport};
use crate::nn::{self, BN_EPS, BN_MOMENTUM};
use crate::optim::{Adam, OptimizerConfig};
use crate::NUM_CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    pub g_optimizer: OptimizerConfig,
    pub d_optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub drop_last: bool,
    pub seed: u64,
    pub max_epochs: usize,
    /// Epochs without a decrease of the mean generator loss before stopping.
    pub patience: usize,
    pub gan_enabled: bool,
    /// Replace `loss.class_weights` by inverse pixel frequencies of the
    /// training split.
    pub auto_class_weights: bool,
    /// Evaluate the best-checkpoint Dice on at most this many training
    /// samples (first ones in index order); `None` uses all of them.
    pub dice_subsample: Option<usize>,
    /// Compare parameter digests around each half-step.
    pub verify_alternation: bool,
    /// Continue from `last.json` in the output directory when present.
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss: LossConfig::default(),
            g_optimizer: OptimizerConfig::default(),
            d_optimizer: OptimizerConfig::default(),
            batch_size: 64,
            drop_last: false,
            seed: 123,
            max_epochs: 1000,
            patience: 15,
            gan_enabled: true,
            auto_class_weights: true,
            dice_subsample: None,
            verify_alternation: false,
            resume: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()?;
        self.g_optimizer.validate()?;
        self.d_optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("early-stop window must be at least 1".into()));
        }
        let d_in = self.generator.in_channels + self.generator.classes;
        if self.gan_enabled && self.discriminator.in_channels != d_in {
            return Err(Error::InvalidConfig(format!(
                "discriminator expects {} channels, generator pairs have {d_in}",
                self.discriminator.in_channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub g_total: f64,
    pub g_adv: f64,
    pub g_seg: f64,
    pub d_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub g_total: f64,
    pub g_adv: f64,
    pub g_seg: f64,
    pub d_loss: f64,
    pub train_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_train_dice: f64,
    pub best_epoch: Option<usize>,
    pub epochs_without_improvement: usize,
    pub best_loss: f64,
    pub rng_seed: u64,
    pub loss_history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainState {
    fn new(seed: u64) -> Self {
        Self {
            epoch: 0,
            best_train_dice: f64::NEG_INFINITY,
            best_epoch: None,
            epochs_without_improvement: 0,
            best_loss: f64::INFINITY,
            rng_seed: seed,
            loss_history: Vec::new(),
            stopped_early: false,
        }
    }
}

/// Stops after `patience` consecutive epochs whose loss does not go below
/// the previous epoch's loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub previous: f64,
    pub best: f64,
    pub since_decrease: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            previous: f64::INFINITY,
            best: f64::INFINITY,
            since_decrease: 0,
        }
    }

    /// Records one epoch's loss; returns `true` when training should stop.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.previous {
            self.since_decrease = 0;
        } else {
            self.since_decrease += 1;
        }
        self.previous = loss;
        self.best = self.best.min(loss);
        self.since_decrease >= self.patience
    }
}

/// Anything that turns prepared samples into predicted class maps.
pub trait Segmenter {
    fn segment(&self, samples: &[&PreparedSample]) -> Result<Vec<ClassMap>>;
}

impl Segmenter for Generator {
    fn segment(&self, samples: &[&PreparedSample]) -> Result<Vec<ClassMap>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let side = self.config().input_size;
        let images = images_tensor(samples, self.params().params()[0].var.device())?;
        let probs = self.forward(&images)?;
        nn::argmax_channels(&probs)?
            .into_iter()
            .map(|data| ClassMap::new(side, side, data))
            .collect()
    }
}

pub const EVAL_BATCH: usize = 16;

pub fn images_tensor(samples: &[&PreparedSample], device: &Device) -> Result<Tensor> {
    let side = samples[0].side();
    let mut data = Vec::with_capacity(samples.len() * side * side);
    for s in samples {
        data.extend_from_slice(&s.image);
    }
    Ok(Tensor::from_vec(data, (samples.len(), 1, side, side), device)?)
}

pub fn labels_flat(samples: &[&PreparedSample]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.label.data.iter().copied()).collect()
}

fn predict_all(model: &dyn Segmenter, samples: &[&PreparedSample]) -> Result<Vec<ClassMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        out.extend(model.segment(chunk)?);
    }
    Ok(out)
}

/// Argmax predictions scored with the full metric suite.
pub fn evaluate(model: &dyn Segmenter, samples: &[&PreparedSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let preds = predict_all(model, samples)?;
    let pairs: Vec<(ClassMap, ClassMap)> = preds
        .into_iter()
        .zip(samples)
        .map(|(p, s)| (p, s.label.clone()))
        .collect();
    let per_sample = metrics::evaluate_samples(&pairs, NUM_CLASSES)?;
    metrics::aggregate_report(&per_sample)
}

/// Mean over samples and foreground classes of the argmax Dice score.
pub fn mean_foreground_dice(model: &dyn Segmenter, samples: &[&PreparedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let preds = predict_all(model, samples)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, s) in preds.iter().zip(samples) {
        let cm = metrics::confusion_matrix(p, &s.label, NUM_CLASSES)?;
        for m in metrics::per_class_metrics(&cm).iter().skip(1) {
            if let Some(v) = m.dice.get() {
                total += v;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    g_opt: Adam,
    d_opt: Adam,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let generator = build_generator(&cfg.generator, cfg.seed, device)?;
        let discriminator = build_discriminator(&cfg.discriminator, cfg.seed, device)?;
        let g_opt = Adam::new(generator.params().trainable_vars(), cfg.g_optimizer.clone())?;
        let d_opt = Adam::new(discriminator.params().trainable_vars(), cfg.d_optimizer.clone())?;
        Ok(Self {
            cfg: cfg.clone(),
            generator,
            discriminator,
            g_opt,
            d_opt,
        })
    }

    fn check_unchanged(&self, which: &str, before: u64, after: u64) -> Result<()> {
        if before != after {
            return Err(Error::InvalidConfig(format!(
                "{which} parameters changed during the other network's update"
            )));
        }
        Ok(())
    }

    /// One alternating update on a batch. `indices` only label diagnostics.
    pub fn train_step(&mut self, images: &Tensor, labels: &[u8], indices: &[usize]) -> Result<StepLosses> {
        let verify = self.cfg.verify_alternation;
        let probs = self.generator.forward_t(images, true)?;

        let mut d_loss = 0.0;
        if self.cfg.gan_enabled {
            let g_before = if verify { self.generator.params().digest()? } else { 0 };
            let real_map = losses::one_hot_like(labels, &probs)?;
            let real = self.discriminator.score(images, &real_map)?;
            let fake = self.discriminator.score(images, &probs.detach())?;
            let loss = losses::lsgan_d_loss(&real, &fake)?;
            d_loss = losses::scalar(&loss)?;
            ensure_finite("d_loss", d_loss, indices)?;
            self.d_opt.step(&loss.backward()?)?;
            if verify {
                self.check_unchanged("generator", g_before, self.generator.params().digest()?)?;
            }
        }

        let d_before = if verify && self.cfg.gan_enabled {
            self.discriminator.params().digest()?
        } else {
            0
        };
        let fake = if self.cfg.gan_enabled {
            Some(self.discriminator.score(images, &probs)?)
        } else {
            None
        };
        let g = losses::generator_objective(fake.as_ref(), &probs, labels, &self.cfg.loss)?;
        let out = StepLosses {
            g_total: losses::scalar(&g.total)?,
            g_adv: losses::scalar(&g.adversarial)?,
            g_seg: losses::scalar(&g.segmentation)?,
            d_loss,
        };
        ensure_finite("g_total", out.g_total, indices)?;
        self.g_opt.step(&g.total.backward()?)?;
        if verify && self.cfg.gan_enabled {
            self.check_unchanged("discriminator", d_before, self.discriminator.params().digest()?)?;
        }
        Ok(out)
    }

    /// Trains only the discriminator against the current (frozen) generator.
    pub fn discriminator_step(&mut self, images: &Tensor, labels: &[u8]) -> Result<f64> {
        let probs = self.generator.forward_t(images, false)?.detach();
        let real_map = losses::one_hot_like(labels, &probs)?;
        let real = self.discriminator.score(images, &real_map)?;
        let fake = self.discriminator.score(images, &probs)?;
        let loss = losses::lsgan_d_loss(&real, &fake)?;
        let value = losses::scalar(&loss)?;
        self.d_opt.step(&loss.backward()?)?;
        Ok(value)
    }

    /// Trains only the generator against the current (frozen) discriminator.
    pub fn generator_step(&mut self, images: &Tensor, labels: &[u8]) -> Result<StepLosses> {
        let probs = self.generator.forward_t(images, true)?;
        let fake = if self.cfg.gan_enabled {
            Some(self.discriminator.score(images, &probs)?)
        } else {
            None
        };
        let g = losses::generator_objective(fake.as_ref(), &probs, labels, &self.cfg.loss)?;
        let out = StepLosses {
            g_total: losses::scalar(&g.total)?,
            g_adv: losses::scalar(&g.adversarial)?,
            g_seg: losses::scalar(&g.segmentation)?,
            d_loss: 0.0,
        };
        self.g_opt.step(&g.total.backward()?)?;
        Ok(out)
    }

    fn model_sections(&self) -> Result<Vec<SectionData<'static>>> {
        Ok(vec![
            SectionData::from_store(
                "generator",
                serde_json::to_value(self.generator.config())?,
                self.generator.params(),
            ),
            SectionData::from_store(
                "discriminator",
                serde_json::to_value(self.discriminator.config())?,
                self.discriminator.params(),
            ),
        ])
    }

    pub fn save_models(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model_sections()?)?;
        Ok(())
    }

    /// Models plus optimizer moments, for resuming.
    pub fn save_full(&self, path: &Path) -> Result<()> {
        let mut sections = self.model_sections()?;
        for (name, opt) in [("g_optimizer", &self.g_opt), ("d_optimizer", &self.d_opt)] {
            let (step, first, second) = opt.state();
            let mut tensors = Vec::with_capacity(first.len() * 2);
            for (k, (m, v)) in first.iter().zip(second).enumerate() {
                tensors.push((format!("m{k}"), m.clone(), false));
                tensors.push((format!("v{k}"), v.clone(), false));
            }
            sections.push(SectionData {
                name,
                config: serde_json::json!({ "step": step }),
                tensors,
            });
        }
        checkpoint::save(path, &sections)?;
        Ok(())
    }

    pub fn load_full(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::open(path)?;
        ck.load_into("generator", self.generator.params())?;
        ck.load_into("discriminator", self.discriminator.params())?;
        for (name, opt) in [("g_optimizer", &mut self.g_opt), ("d_optimizer", &mut self.d_opt)] {
            let section = ck.manifest.section(name)?;
            let step = section.config["step"].as_u64().unwrap_or(0);
            let device = Device::Cpu;
            let tensors = ck.section_tensors(name, &device)?;
            let (first, second): (Vec<_>, Vec<_>) = tensors
                .chunks_exact(2)
                .map(|pair| (pair[0].1.clone(), pair[1].1.clone()))
                .unzip();
            opt.restore(step, first, second)?;
        }
        Ok(())
    }
}

fn ensure_finite(what: &str, v: f64, indices: &[usize]) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            loss: format!("{what} = {v}"),
            batch: indices.to_vec(),
        })
    }
}

/// Generator loaded from the `generator` section of a checkpoint.
pub fn load_generator(path: &Path, device: &Device) -> Result<Generator> {
    let ck = Checkpoint::open(path)?;
    let cfg: GeneratorConfig = serde_json::from_value(ck.manifest.section("generator")?.config.clone())
        .map_err(|e| Error::Checkpoint(format!("generator config: {e}")))?;
    let g = build_generator(&cfg, 0, device)?;
    ck.load_into("generator", g.params())?;
    Ok(g)
}

/// Pixel counts per class over the given samples.
pub fn class_pixel_counts(samples: &[&PreparedSample]) -> Vec<u64> {
    let mut counts = vec![0u64; NUM_CLASSES];
    for s in samples {
        for &v in &s.label.data {
            counts[usize::from(v)] += 1;
        }
    }
    counts
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub device: String,
    pub threads: usize,
    pub crate_version: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            device: "cpu".into(),
            threads: rayon::current_num_threads(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// Everything needed to audit or repeat a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub resolved_class_weights: Vec<f64>,
    pub split_sizes: SplitSizes,
    pub batch_norm: serde_json::Value,
    pub initialization: String,
    pub dice_monitor: String,
    pub environment: Environment,
    pub state: TrainState,
    pub best_checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
    pub overlap_test: usize,
}

pub struct FitOutcome {
    pub state: TrainState,
    pub manifest: RunManifest,
    pub best_checkpoint: PathBuf,
    pub trainer: Trainer,
}

pub const BEST: &str = "best.json";
pub const LAST: &str = "last.json";
pub const STATE: &str = "state.json";
pub const MANIFEST: &str = "manifest.json";

/// Trains on `split.train_indices` of `corpus`, writing `best.json`/`.bin`
/// (best training Dice), `last.json`/`.bin` (resume point) and
/// `manifest.json` into `out_dir`.
pub fn fit(corpus: &[PreparedSample], split: &DatasetSplit, cfg: &TrainConfig, out_dir: &Path) -> Result<FitOutcome> {
    let mut cfg = cfg.clone();
    std::fs::create_dir_all(out_dir)?;
    let device = Device::Cpu;
    let train: Vec<&PreparedSample> = split.train_indices.iter().map(|&i| &corpus[i]).collect();
    if train.is_empty() {
        return Err(Error::EmptySet);
    }
    if cfg.auto_class_weights && matches!(cfg.loss.kind, LossKind::WeightedCe | LossKind::WeightedDice) {
        cfg.loss.class_weights = inverse_frequency_weights(&class_pixel_counts(&train));
        info!("class weights from training frequencies: {:?}", cfg.loss.class_weights);
    }
    let mut trainer = Trainer::new(&cfg, &device)?;
    let mut state = TrainState::new(cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience);

    let last_path = out_dir.join(LAST);
    let state_path = out_dir.join(STATE);
    let best_path = out_dir.join(BEST);
    if cfg.resume && last_path.exists() && state_path.exists() {
        trainer.load_full(&last_path)?;
        let saved: (TrainState, EarlyStopping) = serde_json::from_str(&std::fs::read_to_string(&state_path)?)?;
        state = saved.0;
        stopper = saved.1;
        info!("resumed after epoch {}", state.epoch);
    }

    let monitor: Vec<&PreparedSample> = match cfg.dice_subsample {
        Some(k) => train.iter().take(k).copied().collect(),
        None => train.clone(),
    };
    let spec = BatchIterator {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        drop_last: cfg.drop_last,
    };

    while state.epoch < cfg.max_epochs && !state.stopped_early {
        let epoch = state.epoch;
        let schedule = batches(split, &spec, epoch as u64)?;
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for batch in &schedule {
            let samples: Vec<&PreparedSample> = batch.iter().map(|&i| &corpus[i]).collect();
            let images = images_tensor(&samples, &device)?;
            let labels = labels_flat(&samples);
            let step = match trainer.train_step(&images, &labels, batch) {
                Ok(s) => s,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    let dump = serde_json::json!({ "epoch": epoch, "error": e.to_string(), "batch": batch });
                    std::fs::write(out_dir.join("nonfinite.json"), serde_json::to_string_pretty(&dump)?)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            sums[0] += step.g_total;
            sums[1] += step.g_adv;
            sums[2] += step.g_seg;
            sums[3] += step.d_loss;
            steps += 1;
        }
        let steps = steps.max(1) as f64;
        let train_dice = mean_foreground_dice(&trainer.generator, &monitor)?;
        let record = EpochRecord {
            epoch,
            g_total: sums[0] / steps,
            g_adv: sums[1] / steps,
            g_seg: sums[2] / steps,
            d_loss: sums[3] / steps,
            train_dice,
        };
        info!(
            "epoch {epoch}: g_total {:.5} g_adv {:.5} g_seg {:.5} d {:.5} train dice {:.4}",
            record.g_total, record.g_adv, record.g_seg, record.d_loss, record.train_dice
        );
        if train_dice > state.best_train_dice || state.best_epoch.is_none() {
            if train_dice.is_nan() {
                warn!("training dice undefined at epoch {epoch}");
            } else {
                state.best_train_dice = train_dice;
            }
            state.best_epoch = Some(epoch);
            trainer.save_models(&best_path)?;
        }
        let stop = stopper.update(record.g_total);
        state.best_loss = stopper.best;
        state.epochs_without_improvement = stopper.since_decrease;
        state.loss_history.push(record);
        state.epoch += 1;
        state.stopped_early = stop;
        trainer.save_full(&last_path)?;
        std::fs::write(&state_path, serde_json::to_string_pretty(&(&state, &stopper))?)?;
    }

    let overlap = split.overlap_test_indices.len();
    let manifest = RunManifest {
        config: cfg.clone(),
        resolved_class_weights: cfg.loss.class_weights.clone(),
        split_sizes: SplitSizes {
            train: split.train_indices.len(),
            test: split.test_indices.len(),
            overlap_test: overlap,
        },
        batch_norm: serde_json::json!({ "eps": BN_EPS, "momentum": BN_MOMENTUM }),
        initialization: format!(
            "conv weights and biases uniform(±1/sqrt(fan_in)), batch-norm scale 1 shift 0; ChaCha8 seeded from {}",
            cfg.seed
        ),
        dice_monitor: match cfg.dice_subsample {
            Some(k) => format!("argmax foreground Dice on the first {} training samples", monitor.len().min(k)),
            None => "argmax foreground Dice on the full training split".into(),
        },
        environment: Environment::current(),
        state: state.clone(),
        best_checkpoint: Some(BEST.into()),
    };
    std::fs::write(out_dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(FitOutcome {
        state,
        manifest,
        best_checkpoint: best_path,
        trainer,
    })
}
