//! Optimization: AMSGrad, the step learning-rate schedule, per-epoch
//! training over the three phases and run-directory bookkeeping.

mod optimizer;
mod run;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use optimizer::{clip_grad_norm, lr_schedule, AmsGrad, AmsGradConfig};
pub use run::{prepare_model, RunDir, TrainingRun};

use crate::dataset::{for_each_ordered, FrameSource, LoadedSample, SequenceSample};
use crate::error::{Error, Result};
use crate::network::{ModelKind, Mode, PoseNet};
use crate::objective::{mirror_loss, pair_loss, LossConfig};
use crate::tensor::{Gradients, ParamId, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Encoder and head only, no recurrent cells.
    PretrainCnn,
    /// Full recurrent model started from a pretrained encoder.
    FineTune,
    /// Full recurrent model trained on forward and time-reversed clips.
    MirrorConstrained,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PretrainCnn => "pretrain-cnn",
            Phase::FineTune => "fine-tune",
            Phase::MirrorConstrained => "mirror-constrained",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain-cnn" => Ok(Phase::PretrainCnn),
            "fine-tune" => Ok(Phase::FineTune),
            "mirror-constrained" | "mirror" => Ok(Phase::MirrorConstrained),
            _ => Err(Error::Config(format!(
                "unknown training phase {s:?} (expected pretrain-cnn, fine-tune or mirror-constrained)"
            ))),
        }
    }

    pub fn model_kind(self) -> ModelKind {
        match self {
            Phase::PretrainCnn => ModelKind::CnnOnly,
            _ => ModelKind::Recurrent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Clips per optimizer step. The mirror-constrained phase uses half as
    /// many source clips, each contributing a forward and a reversed branch.
    pub batch_size: usize,
    pub epochs: usize,
    pub checkpoint_interval: usize,
    pub optimizer: AmsGradConfig,
    /// Epochs between learning-rate halvings; 0 keeps the rate constant.
    pub lr_halving_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub freeze_encoder: bool,
    pub loss: LossConfig,
    pub hflip_prob: f64,
    /// Probability of training on a clip played backwards (not used by the
    /// mirror-constrained phase, which always sees both directions).
    pub tflip_prob: f64,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    pub workers: usize,
    pub pretrain_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::FineTune,
            batch_size: 32,
            epochs: 100,
            checkpoint_interval: 5,
            optimizer: AmsGradConfig::default(),
            lr_halving_epochs: 30,
            seed: 0,
            clip_norm: None,
            freeze_encoder: false,
            loss: LossConfig::default(),
            hflip_prob: 0.5,
            tflip_prob: 0.5,
            max_steps: None,
            workers: 1,
            pretrain_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.phase == Phase::FineTune && self.pretrain_checkpoint.is_none() {
            return Err(Error::Config(
                "the fine-tune phase needs a pretrained encoder checkpoint".into(),
            ));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint interval must be at least 1".into()));
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("tflip_prob", self.tflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }

    /// Source clips per optimizer step.
    pub fn clips_per_step(&self) -> usize {
        match self.phase {
            Phase::MirrorConstrained => (self.batch_size / 2).max(1),
            _ => self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    /// Mean of the per-step batch losses.
    pub mean_loss: f64,
    /// Root mean squared error of each pose component over every forward
    /// prediction made during the epoch.
    pub rmse: [f64; 6],
    pub steps: usize,
    pub step_losses: Vec<f64>,
    /// The last step ran on fewer clips than the batch size.
    pub partial_batch: bool,
    /// The epoch ended early because the step budget ran out.
    pub budget_exhausted: bool,
    pub wall_s: f64,
}

/// Parameters updated by the optimizer.
pub fn trainable_params(model: &PoseNet<f32>, freeze_encoder: bool) -> Vec<ParamId> {
    model
        .params()
        .ids()
        .filter(|&id| !(freeze_encoder && model.is_encoder_param(id)))
        .collect()
}

struct Prepared {
    forward: LoadedSample,
    dropout_seed: u64,
}

struct SampleResult {
    loss: f64,
    grads: Gradients<f32>,
    sq_err: [f64; 6],
    pairs: usize,
}

fn predict_clip(tape: &mut Tape<'_, f32>, model: &PoseNet<f32>, clip: &LoadedSample, rng: &mut ChaCha8Rng) -> Result<Var> {
    let frames: Vec<Var> = clip.frames.iter().map(|f| tape.constant(f.clone())).collect();
    let outs = model.forward_sequence(tape, &frames, &mut Mode::Train(rng))?;
    let stacked = tape.stack(&outs)?;
    tape.reshape(stacked, &[1, outs.len(), 6])
}

fn squared_errors(pred: &Tensor<f32>, target: &Tensor<f32>) -> [f64; 6] {
    let mut acc = [0.0; 6];
    for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = (*p - *t) as f64;
        acc[i % 6] += d * d;
    }
    acc
}

/// Loss and gradients of one clip, already divided by the number of clips
/// in its batch so that summing over the batch gives the batch objective.
fn sample_step(model: &PoseNet<f32>, cfg: &TrainConfig, prep: &Prepared, clips_in_batch: usize) -> Result<SampleResult> {
    let mut tape = Tape::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(prep.dropout_seed);
    let target = prep.forward.target_tensor();
    let pred = predict_clip(&mut tape, model, &prep.forward, &mut rng)?;
    let loss = match cfg.phase {
        Phase::MirrorConstrained => {
            let reversed = prep.forward.temporal_flip()?;
            let target_rev = reversed.target_tensor();
            let pred_rev = predict_clip(&mut tape, model, &reversed, &mut rng)?;
            mirror_loss(&mut tape, pred, &target, pred_rev, &target_rev, cfg.loss.beta1, cfg.loss.beta2)?
        }
        _ => pair_loss(&mut tape, pred, &target, cfg.loss.beta)?,
    };
    let scaled = tape.scale(loss, 1.0 / clips_in_batch as f32);
    let grads = tape.backward(scaled)?;
    Ok(SampleResult {
        loss: tape.value(scaled).data()[0] as f64,
        grads,
        sq_err: squared_errors(tape.value(pred), &target),
        pairs: prep.forward.sample.len(),
    })
}

/// One pass over `samples` in a seeded random order.
///
/// Clip order, augmentation draws and dropout masks all derive from
/// `(cfg.seed, epoch)`, so an epoch is reproducible on its own, including
/// after a resume. Frames are loaded on `cfg.workers` threads through an
/// ordered queue; gradients are computed and summed in clip order.
pub fn train_epoch(
    model: &mut PoseNet<f32>,
    optimizer: &mut AmsGrad<f32>,
    samples: &[SequenceSample],
    frames: &dyn FrameSource,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate_for(model)?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let started = Instant::now();
    let lr = lr_schedule(cfg.optimizer.lr, epoch.saturating_sub(1), cfg.lr_halving_epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let plan: Vec<(usize, bool, bool, u64)> = order
        .iter()
        .map(|&i| {
            let h = rng.random::<f64>() < cfg.hflip_prob;
            let t = cfg.phase != Phase::MirrorConstrained && rng.random::<f64>() < cfg.tflip_prob;
            (i, h, t, rng.random::<u64>())
        })
        .collect();

    let per_step = cfg.clips_per_step();
    let budget = cfg.max_steps.map(|m| m.saturating_sub(optimizer.steps() as usize));
    let n_batches = plan.len().div_ceil(per_step);
    let n_batches = budget.map_or(n_batches, |b| n_batches.min(b));
    let n_clips = (n_batches * per_step).min(plan.len());
    let trainable = trainable_params(model, cfg.freeze_encoder);

    let mut stats = EpochStats {
        epoch,
        phase: cfg.phase,
        lr,
        mean_loss: 0.0,
        rmse: [0.0; 6],
        steps: 0,
        step_losses: Vec::new(),
        partial_batch: false,
        budget_exhausted: n_batches * per_step < plan.len(),
        wall_s: 0.0,
    };
    let mut sq = [0.0; 6];
    let mut pairs = 0usize;
    let mut batch: Vec<Prepared> = Vec::with_capacity(per_step);

    let load = |k: usize| -> Result<Prepared> {
        let (i, h, t, seed) = plan[k];
        let mut clip = LoadedSample::load(&samples[i], frames)?;
        if h {
            clip = clip.horizontal_flip()?;
        }
        if t {
            clip = clip.temporal_flip()?;
        }
        Ok(Prepared {
            forward: clip,
            dropout_seed: seed,
        })
    };
    for_each_ordered(n_clips, cfg.workers, 2 * per_step.max(cfg.workers), load, |k, prep| {
        batch.push(prep);
        if batch.len() < per_step && k + 1 < n_clips {
            return Ok(());
        }
        let clips = batch.len();
        let mut total: Option<Gradients<f32>> = None;
        let mut batch_loss = 0.0;
        for prep in batch.drain(..) {
            let r = sample_step(model, cfg, &prep, clips)?;
            batch_loss += r.loss;
            for (acc, e) in sq.iter_mut().zip(r.sq_err) {
                *acc += e;
            }
            pairs += r.pairs;
            match total.as_mut() {
                Some(t) => t.merge(r.grads),
                None => total = Some(r.grads),
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::contract(format!(
                "non-finite training loss at epoch {epoch}, step {}",
                optimizer.steps() + 1
            )));
        }
        let params = model.params_mut();
        params.zero_grad();
        total.expect("batch is non-empty").accumulate_into(params);
        if let Some(max) = cfg.clip_norm {
            clip_grad_norm(params, &trainable, max);
        }
        optimizer.step(params, &trainable, lr)?;
        params.zero_grad();
        stats.partial_batch |= clips < per_step;
        stats.step_losses.push(batch_loss);
        stats.steps += 1;
        Ok(())
    })?;

    stats.mean_loss = stats.step_losses.iter().sum::<f64>() / stats.steps.max(1) as f64;
    stats.rmse = sq.map(|s| (s / pairs.max(1) as f64).sqrt());
    stats.wall_s = started.elapsed().as_secs_f64();
    Ok(stats)
}

impl TrainConfig {
    fn validate_for(&self, model: &PoseNet<f32>) -> Result<()> {
        if model.config().kind != self.phase.model_kind() {
            return Err(Error::Config(format!(
                "phase {} trains a {} model, got {}",
                self.phase.as_str(),
                self.phase.model_kind().as_str(),
                model.config().kind.as_str()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean pair loss over `samples` in evaluation mode (no dropout, no
/// augmentation).
pub fn evaluate_loss(model: &PoseNet<f32>, samples: &[SequenceSample], frames: &dyn FrameSource, beta: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let clip = LoadedSample::load(s, frames)?;
        let mut tape = Tape::new(model.params());
        let vars: Vec<Var> = clip.frames.iter().map(|f| tape.constant(f.clone())).collect();
        let outs = model.forward_sequence(&mut tape, &vars, &mut Mode::Eval)?;
        let stacked = tape.stack(&outs)?;
        let pred = tape.reshape(stacked, &[1, outs.len(), 6])?;
        let loss = pair_loss(&mut tape, pred, &clip.target_tensor(), beta)?;
        total += tape.value(loss).data()[0] as f64;
    }
    Ok(total / samples.len() as f64)
}
