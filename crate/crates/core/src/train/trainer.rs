//! The training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_with, AugmentConfig};
use crate::autodiff::{Graph, Mode};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::metrics::overlap;
use crate::model::{ForwardOptions, Model};
use crate::tensor::Tensor;
use crate::train::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::train::schedule::{Decision, EarlyStopper, Stage, StagePlan};
use crate::volume::{LabelVolume, Volume};

/// One training patch; `group` identifies its source volume for the validation split.
#[derive(Clone, Debug)]
pub struct Sample {
    pub group: usize,
    pub image: Volume,
    pub mask: LabelVolume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub plan: StagePlan,
    pub clip_norm: f64,
    /// Fraction of source volumes held out for validation.
    pub val_fraction: f64,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 2,
            optimizer: AdamWConfig::default(),
            plan: StagePlan::default(),
            clip_norm: 1.0,
            val_fraction: 0.1,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(0.0..1.0).contains(&self.val_fraction) || self.clip_norm <= 0.0 {
            return Err(Error::Config("batch_size > 0, val_fraction in [0, 1) and clip_norm > 0 required".into()));
        }
        let a = &self.augment;
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(a.flip_p) || !unit(a.noise_p) || !(a.noise_std >= 0.0) || !(a.brightness[0] <= a.brightness[1]) {
            return Err(Error::Config("augmentation probabilities, noise std or brightness range out of bounds".into()));
        }
        if self.plan.max_epochs == 0 || self.plan.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub steps: usize,
    pub train_loss: f64,
    pub train_dice: f64,
    pub val_loss: Option<f64>,
    pub val_dice: Option<f64>,
    pub trainable: usize,
    pub reverse: bool,
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Mixes seed components into one stream seed.
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Stacks equally sized single-channel volumes into `[B, 1, D, H, W]`.
pub fn batch_tensor(images: &[&Volume]) -> Result<Tensor> {
    let dims = images.first().ok_or_else(|| Error::Config("empty batch".into()))?.dims;
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for v in images {
        if v.dims != dims {
            return Err(Error::dim("batch", format!("{:?} vs {:?}", v.dims, dims)));
        }
        data.extend_from_slice(&v.data);
    }
    Tensor::new(&[images.len(), 1, dims[0], dims[1], dims[2]], data)
}

/// Voxelwise argmax over the class axis of `[B, K, ...]`; ties go to the lowest class.
pub fn argmax_labels(scores: &Tensor, names: &[String]) -> Result<Vec<LabelVolume>> {
    let s = scores.shape();
    if s.len() != 5 {
        return Err(Error::dim("argmax", format!("{s:?}")));
    }
    let (b, k, dims) = (s[0], s[1], [s[2], s[3], s[4]]);
    let n = dims.iter().product::<usize>();
    let d = scores.data();
    (0..b)
        .map(|bi| {
            let labels = (0..n)
                .map(|v| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(bi * k + c) * n + v] > d[(bi * k + best) * n + v] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelVolume::new(dims, labels, names.to_vec())
        })
        .collect()
}

/// Macro Dice of predictions against references, averaged over the batch.
pub fn batch_dice(pred: &[LabelVolume], reference: &[&LabelVolume]) -> Result<f64> {
    let mut sum = 0.0;
    for (p, r) in pred.iter().zip(reference) {
        sum += overlap(p, r)?.macro_dsc;
    }
    Ok(sum / pred.len().max(1) as f64)
}

/// Splits sample indices into (train, validation) by source group.
pub fn split_by_group(samples: &[Sample], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: Vec<usize> = samples.iter().map(|s| s.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let n_val = if groups.len() < 2 || fraction == 0.0 {
        0
    } else {
        ((fraction * groups.len() as f64).round() as usize).clamp(1, groups.len() - 1)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0x5EED]));
    groups.shuffle(&mut rng);
    let held: Vec<usize> = groups[..n_val].to_vec();
    (0..samples.len()).partition(|&i| !held.contains(&samples[i].group))
}

/// Result of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub dice: f64,
    pub grad_norm: f64,
}

/// Model, optimizer and plan, advanced one step or epoch at a time.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub steps: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            optimizer: AdamW::new(config.optimizer),
            config,
            steps: 0,
        })
    }

    pub fn forward_options(&self, epoch: usize, anisotropy: f64) -> ForwardOptions {
        ForwardOptions {
            reverse: self.config.plan.reverse_enabled(epoch),
            anisotropy,
            ..ForwardOptions::default()
        }
    }

    /// One forward/backward/update on `batch`.
    pub fn step(&mut self, batch: &[(Volume, LabelVolume)], epoch: usize) -> Result<StepStats> {
        let images: Vec<&Volume> = batch.iter().map(|b| &b.0).collect();
        let masks: Vec<LabelVolume> = batch.iter().map(|b| b.1.clone()).collect();
        let x = batch_tensor(&images)?;
        let plan = self.config.plan;
        let mut g = Graph::new(Mode::Train, stream_seed(&[self.config.seed, epoch as u64, self.steps as u64, 1]));
        let p = self.model.params.bind(&mut g, |n| plan.trainable(n, epoch));
        let xv = g.constant(x);
        let opts = self.forward_options(epoch, images[0].anisotropy());
        let out = self.model.forward(&mut g, &p, xv, opts)?;
        let terms = total_loss(&mut g, out.logits, &masks, &self.config.loss)?;
        let loss = g.value(terms.total).item();
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("training loss {loss} at step {}", self.steps)));
        }
        let pred = argmax_labels(g.value(out.logits), &masks[0].class_names)?;
        let refs: Vec<&LabelVolume> = masks.iter().collect();
        let dice = batch_dice(&pred, &refs)?;
        let mut grads_all = g.backward(terms.total)?;
        let mut grads = Vec::new();
        for (param, &var) in self.model.params.iter().zip(p.vars()) {
            if plan.trainable(&param.name, epoch) {
                let gr = grads_all.take(var).unwrap_or_else(|| Tensor::zeros(param.value.shape()));
                grads.push((param.name.clone(), gr));
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.steps += 1;
        Ok(StepStats { loss, dice, grad_norm })
    }

    /// Mean loss and macro Dice over `samples` without updates.
    pub fn evaluate(&self, samples: &[&Sample], epoch: usize) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut dice = 0.0;
        for chunk in samples.chunks(self.config.batch_size) {
            let images: Vec<&Volume> = chunk.iter().map(|s| &s.image).collect();
            let masks: Vec<LabelVolume> = chunk.iter().map(|s| s.mask.clone()).collect();
            let mut g = Graph::new(Mode::Eval, self.config.seed);
            let p = self.model.params.bind(&mut g, |_| false);
            let xv = g.constant(batch_tensor(&images)?);
            let out = self.model.forward(&mut g, &p, xv, self.forward_options(epoch, images[0].anisotropy()))?;
            let terms = total_loss(&mut g, out.logits, &masks, &self.config.loss)?;
            loss += g.value(terms.total).item() * chunk.len() as f64;
            let pred = argmax_labels(g.value(out.logits), &masks[0].class_names)?;
            let refs: Vec<&LabelVolume> = masks.iter().collect();
            dice += batch_dice(&pred, &refs)? * chunk.len() as f64;
        }
        let n = samples.len().max(1) as f64;
        Ok((loss / n, dice / n))
    }

    /// One pass over `train` in a seeded order with seeded augmentation.
    pub fn run_epoch(&mut self, samples: &[Sample], train: &[usize], epoch: usize) -> Result<(usize, f64, f64, f64)> {
        let seed = self.config.seed;
        let mut order = train.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[seed, epoch as u64, 2])));
        let (mut steps, mut loss, mut dice, mut norm) = (0, 0.0, 0.0, 0.0f64);
        for chunk in order.chunks(self.config.batch_size) {
            if self.config.max_steps.is_some_and(|m| self.steps >= m) {
                break;
            }
            let batch: Vec<(Volume, LabelVolume)> = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    if self.config.augment.enabled {
                        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, epoch as u64, i as u64, 3]));
                        augment_with(&s.image, &s.mask, &self.config.augment, &mut rng)
                    } else {
                        (s.image.clone(), s.mask.clone())
                    }
                })
                .collect();
            let st = self.step(&batch, epoch)?;
            steps += 1;
            loss += st.loss;
            dice += st.dice;
            norm = norm.max(st.grad_norm);
        }
        let n = steps.max(1) as f64;
        Ok((steps, loss / n, dice / n, norm))
    }
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    /// Parameters at the best monitored loss.
    pub best: Model,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub last: Trainer,
    pub log: Vec<EpochRecord>,
}

/// Runs stage A then stage B until early stopping, the epoch limit or the step cap.
///
/// The validation loss is monitored when a validation split exists, the training loss otherwise.
pub fn train(model: Model, config: TrainConfig, samples: &[Sample], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (train_idx, val_idx) = split_by_group(samples, config.val_fraction, config.seed);
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let plan = config.plan;
    let mut trainer = Trainer::new(model, config)?;
    let mut stopper = EarlyStopper::new(plan.patience, plan.min_delta);
    let mut best = trainer.model.clone();
    let mut best_epoch = 0;
    let mut log = Vec::new();
    for epoch in 0..plan.max_epochs {
        let t0 = Instant::now();
        let (steps, train_loss, train_dice, grad_norm) = trainer.run_epoch(samples, &train_idx, epoch)?;
        if steps == 0 {
            break;
        }
        let (val_loss, val_dice) = if val.is_empty() {
            (None, None)
        } else {
            let (l, d) = trainer.evaluate(&val, epoch)?;
            (Some(l), Some(d))
        };
        let monitored = val_loss.unwrap_or(train_loss);
        if stopper.improved(monitored) {
            best = trainer.model.clone();
            best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            stage: plan.stage(epoch),
            steps,
            train_loss,
            train_dice,
            val_loss,
            val_dice,
            trainable: trainer.model.params.iter().filter(|p| plan.trainable(&p.name, epoch)).count(),
            reverse: plan.reverse_enabled(epoch),
            grad_norm,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} stage {:?}: train loss {train_loss:.5} dice {train_dice:.4}, val {:?}",
            record.stage,
            val_loss
        );
        on_epoch(&record);
        log.push(record);
        if stopper.decision() == Decision::Stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_loss: stopper.best(),
        last: trainer,
        log,
    })
}
