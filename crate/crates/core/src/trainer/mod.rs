//! End-to-end optimisation of backbone, head and noise parameters under
//! `L = L_cls + λ · L_noisy`.
//!
//! Every random draw (initialisation, batch order, augmentation, dropout) comes
//! from a seed derived statelessly from the master seed and its position in the
//! run, so a run resumed from a checkpoint reproduces the uninterrupted run
//! exactly.

mod ablation;
mod adam;
mod objective;

pub use ablation::{ablation_row, ablation_suite, AblationReport, AblationRow, Experiment};
pub use adam::Adam;
pub use objective::{patient_objective, total_loss, LossParts, ObjectiveSettings};

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::ArrayArchive;
use crate::data::{augment_normalized, zscore_volume, AugmentationConfig, Volume};
use crate::model::{BackboneArch, Model, DEFAULT_BACKBONE};
use crate::{derive_seed, Error, Result};

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Patient labels through section pooling and the noisy loss.
    Mil,
    /// Plain backbone: the patient label is copied to every slice and trained
    /// with per-slice cross-entropy.
    SliceLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub section_len: usize,
    pub k: usize,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    /// Patients per step.
    pub batch_size: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub enable_cls_loss: bool,
    pub enable_noisy_loss: bool,
    pub mode: TrainingMode,
    pub backbone: String,
    /// Training-time augmentation; its `output_size` is the network input size.
    pub augmentation: AugmentationConfig,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Validation cadence in iterations (0: never).
    pub eval_every: usize,
    /// Stop when validation patient accuracy has not improved for this many
    /// evaluations.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            learning_rate: 1e-3,
            section_len: 16,
            k: 8,
            dropout_rate: 0.7,
            weight_decay: 1e-5,
            batch_size: 10,
            max_iterations: 4000,
            seed: 0,
            enable_cls_loss: true,
            enable_noisy_loss: true,
            mode: TrainingMode::Mil,
            backbone: DEFAULT_BACKBONE.to_string(),
            augmentation: AugmentationConfig::default(),
            checkpoint_every: 0,
            eval_every: 0,
            early_stop_patience: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and >= 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.section_len == 0 || self.k == 0 {
            return Err(Error::invalid("section length and k must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        if self.mode == TrainingMode::Mil && !self.enable_cls_loss && !self.enable_noisy_loss {
            return Err(Error::invalid("at least one loss must be enabled"));
        }
        if self.early_stop_patience.is_some() && self.eval_every == 0 {
            return Err(Error::invalid("early stopping needs eval_every > 0"));
        }
        self.augmentation.validate()?;
        let arch = BackboneArch::from_id(&self.backbone)?;
        let size = self.augmentation.output_size;
        arch.feature_size(size, size)?;
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.augmentation.output_size
    }

    pub fn objective(&self) -> ObjectiveSettings {
        ObjectiveSettings::from(self)
    }
}

/// Parameters, optimizer moments and progress of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainerConfig,
    pub model: Model,
    pub optimizer: Adam,
    /// Completed optimisation steps.
    pub iteration: usize,
    /// Exponential moving average (0.9) of the batch loss.
    pub running_loss: Option<f64>,
}

impl TrainState {
    pub fn new(config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let arch = BackboneArch::from_id(&config.backbone)?;
        let model = Model::init(arch, derive_seed(&[config.seed, STREAM_INIT]));
        let optimizer = Adam::new(config.learning_rate, config.weight_decay);
        Ok(Self {
            config,
            model,
            optimizer,
            iteration: 0,
            running_loss: None,
        })
    }

    pub fn to_archive(&self) -> Result<ArrayArchive> {
        let mut a = ArrayArchive::new();
        a.set_meta("kind", CHECKPOINT_KIND);
        a.set_meta("config", serde_json::to_string(&self.config)?);
        a.set_meta("iteration", self.iteration.to_string());
        if let Some(r) = self.running_loss {
            a.set_meta("running_loss", format!("{r:e}"));
        }
        self.model.write_archive(&mut a);
        self.optimizer.write_archive(&mut a);
        Ok(a)
    }

    pub fn from_archive(a: &ArrayArchive) -> Result<Self> {
        if a.meta("kind")? != CHECKPOINT_KIND {
            return Err(Error::Archive("not a training checkpoint".into()));
        }
        let config: TrainerConfig = serde_json::from_str(a.meta("config")?)?;
        let iteration = a
            .meta("iteration")?
            .parse()
            .map_err(|_| Error::Archive("bad `iteration`".into()))?;
        let running_loss = match a.metadata.get("running_loss") {
            Some(s) => Some(s.parse().map_err(|_| Error::Archive("bad `running_loss`".into()))?),
            None => None,
        };
        Ok(Self {
            config,
            model: Model::read_archive(a)?,
            optimizer: Adam::read_archive(a)?,
            iteration,
            running_loss,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&ArrayArchive::load(path)?)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_noisy: f64,
    /// Seconds since the start of this process's run.
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Receives `train_log.jsonl`, periodic checkpoints and `final.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of a fresh initialisation; its
    /// config must equal the requested one.
    pub resume: Option<TrainState>,
    /// Volumes for early stopping.
    pub validation: Option<&'a [Volume]>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<LogRecord>,
    pub stopped_early: bool,
}

/// Deterministic batch order: consecutive epochs, each a seeded permutation.
struct BatchOrder {
    seed: u64,
    n: usize,
    epochs: HashMap<usize, Vec<usize>>,
}

impl BatchOrder {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            epochs: HashMap::new(),
        }
    }

    fn batch(&mut self, iteration: usize, batch_size: usize) -> Vec<usize> {
        (0..batch_size)
            .map(|b| {
                let pos = iteration * batch_size + b;
                let (epoch, offset) = (pos / self.n, pos % self.n);
                let (seed, n) = (self.seed, self.n);
                let perm = self.epochs.entry(epoch).or_insert_with(|| {
                    let mut p: Vec<usize> = (0..n).collect();
                    p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_ORDER, epoch as u64])));
                    p
                });
                perm[offset]
            })
            .collect()
    }
}

pub fn checkpoint_path(out_dir: &Path, iteration: usize) -> PathBuf {
    out_dir.join(format!("checkpoint-{iteration:06}.ckpt"))
}

fn normalized(volumes: &[Volume]) -> Result<Vec<(u8, Vec<Array2<f64>>)>> {
    let mut out = Vec::with_capacity(volumes.len());
    for v in volumes {
        if v.is_empty() {
            log::warn!("skipping patient `{}`: empty volume", v.patient_id);
            continue;
        }
        let mut slices = v.slices.clone();
        zscore_volume(&mut slices)?;
        out.push((v.label, slices));
    }
    Ok(out)
}

/// Patient accuracy at threshold 0.5 without augmentation.
pub fn patient_accuracy(model: &Model, volumes: &[Volume], config: &TrainerConfig) -> Result<f64> {
    let data = normalized(volumes)?;
    if data.is_empty() {
        return Err(Error::invalid("no non-empty volumes to evaluate"));
    }
    let mut correct = 0;
    for (label, slices) in &data {
        let slices = augment_normalized(slices, None, config.input_size())?;
        let out = model.predict_volume(&slices, config.section_len, config.k)?;
        let predicted = u8::from(out.patient.0[crate::POSITIVE] >= 0.5);
        correct += usize::from(predicted == *label);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Runs the optimisation loop until `max_iterations` (or early stop).
pub fn train(volumes: &[Volume], config: &TrainerConfig, options: TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let data = normalized(volumes)?;
    if data.is_empty() {
        return Err(Error::invalid("training set has no non-empty volumes"));
    }
    let mut state = match options.resume {
        Some(s) => {
            if &s.config != config {
                return Err(Error::invalid("resume checkpoint was written with a different config"));
            }
            s
        }
        None => TrainState::new(config.clone())?,
    };
    let mut log_file = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("train_log.jsonl");
            let file = if state.iteration > 0 {
                fs::OpenOptions::new().create(true).append(true).open(path)?
            } else {
                fs::File::create(path)?
            };
            Some(file)
        }
        None => None,
    };

    let settings = config.objective();
    let mut order = BatchOrder::new(config.seed, data.len());
    let started = Instant::now();
    let mut history = Vec::new();
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut stale_evals = 0;
    let mut stopped_early = false;

    while state.iteration < config.max_iterations {
        let t = state.iteration;
        let batch = order.batch(t, config.batch_size);
        let mut grads = state.model.zero_grads();
        let mut sum = LossParts::default();
        let mut failure = None;
        for &p in &batch {
            let (label, slices) = &data[p];
            let aug_seed = derive_seed(&[config.seed, STREAM_AUGMENT, t as u64, p as u64]);
            let slices = augment_normalized(slices, Some((&config.augmentation, aug_seed)), config.input_size())?;
            let drop_seed = derive_seed(&[config.seed, STREAM_DROPOUT, t as u64, p as u64]);
            match patient_objective(&state.model, &slices, *label, &settings, drop_seed, Some(&mut grads)) {
                Ok(parts) => {
                    sum.total += parts.total;
                    sum.cls += parts.cls;
                    sum.noisy += parts.noisy;
                }
                Err(Error::NonFiniteLoss { cls, noisy }) => {
                    failure = Some(cls + noisy);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let mean = LossParts {
            total: sum.total * inv,
            cls: sum.cls * inv,
            noisy: sum.noisy * inv,
        };
        if failure.is_none() && (!mean.total.is_finite() || !grads.is_finite()) {
            failure = Some(mean.total);
        }
        if let Some(loss) = failure {
            let last_good = match &options.out_dir {
                Some(dir) => {
                    let path = dir.join("last-good.ckpt");
                    state.save(&path)?;
                    Some(path)
                }
                None => None,
            };
            log::error!("loss became non-finite at iteration {}", t + 1);
            return Err(Error::Diverged {
                iteration: t + 1,
                loss,
                last_good,
            });
        }
        grads.scale(inv);
        state.optimizer.update(&mut state.model, &grads);
        state.iteration += 1;
        state.running_loss = Some(match state.running_loss {
            Some(r) => 0.9 * r + 0.1 * mean.total,
            None => mean.total,
        });

        let mut record = LogRecord {
            iteration: state.iteration,
            loss: mean.total,
            loss_cls: mean.cls,
            loss_noisy: mean.noisy,
            wall_time: started.elapsed().as_secs_f64(),
            validation_accuracy: None,
        };
        if let Some(val) = options.validation {
            if config.eval_every > 0 && state.iteration % config.eval_every == 0 {
                let acc = patient_accuracy(&state.model, val, config)?;
                record.validation_accuracy = Some(acc);
                if acc > best_accuracy {
                    best_accuracy = acc;
                    stale_evals = 0;
                } else {
                    stale_evals += 1;
                }
            }
        }
        log::debug!(
            "iteration {} loss {:.5} (cls {:.5}, noisy {:.5})",
            record.iteration,
            record.loss,
            record.loss_cls,
            record.loss_noisy
        );
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        history.push(record);

        if let Some(dir) = &options.out_dir {
            if config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0 {
                state.save(checkpoint_path(dir, state.iteration))?;
            }
        }
        if let Some(patience) = config.early_stop_patience {
            if options.validation.is_some() && stale_evals >= patience {
                log::info!("early stop at iteration {}", state.iteration);
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(dir) = &options.out_dir {
        state.save(dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        state,
        history,
        stopped_early,
    })
}
