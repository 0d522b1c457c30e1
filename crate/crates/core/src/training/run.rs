//! Run directory layout:
//!
//! ```text
//! <run>/checkpoints/epoch_<N>.ckpt   model after epoch N (1-based)
//! <run>/checkpoints/epoch_<N>.opt    optimizer moments after epoch N
//! <run>/log.csv                      epoch,phase,mean_loss,lr,wall_s
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{train_epoch, AmsGrad, EpochStats, Phase, TrainConfig};
use crate::dataset::{FrameSource, SequenceSample};
use crate::error::{Error, Result};
use crate::network::{ModelConfig, PoseNet};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint};

pub const LOG_HEADER: &str = "epoch,phase,mean_loss,lr,wall_s";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("epoch_{epoch}.ckpt"))
    }

    pub fn optimizer_path(&self, epoch: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("epoch_{epoch}.opt"))
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.csv")
    }

    /// Highest epoch with both a model and an optimizer checkpoint.
    pub fn latest_epoch(&self) -> Result<Option<usize>> {
        let dir = self.checkpoint_dir();
        if !dir.is_dir() {
            return Ok(None);
        }
        let mut best = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let name = entry.map_err(|e| Error::io(&dir, e))?.file_name();
            let Some(n) = name
                .to_str()
                .and_then(|s| s.strip_prefix("epoch_"))
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse::<usize>().ok())
            else {
                continue;
            };
            if self.optimizer_path(n).is_file() && best.is_none_or(|b| n > b) {
                best = Some(n);
            }
        }
        Ok(best)
    }
}

/// Builds the starting model for a phase: a fresh encoder and head for
/// pretraining; for fine-tuning the pretrained encoder plus fresh recurrent
/// cells and head; for the mirror phase either of the latter two, depending
/// on whether a pretrained checkpoint is given.
pub fn prepare_model(cfg: &TrainConfig, model: &ModelConfig) -> Result<PoseNet<f32>> {
    let model_cfg = model.clone().with_kind(cfg.phase.model_kind());
    match (&cfg.pretrain_checkpoint, cfg.phase) {
        (_, Phase::PretrainCnn) => PoseNet::new(model_cfg, cfg.seed),
        (Some(path), _) => {
            let ckpt = read_checkpoint::<f32>(path)?;
            PoseNet::fine_tune_init(model_cfg, &ckpt, cfg.seed)
        }
        (None, Phase::FineTune) => Err(Error::Config(
            "the fine-tune phase needs a pretrained encoder checkpoint".into(),
        )),
        (None, _) => PoseNet::new(model_cfg, cfg.seed),
    }
}

/// A training run bound to a directory; can be resumed from its latest
/// checkpoint.
pub struct TrainingRun {
    dir: RunDir,
    cfg: TrainConfig,
    model: PoseNet<f32>,
    optimizer: AmsGrad<f32>,
    next_epoch: usize,
}

impl TrainingRun {
    /// Starts a fresh run, truncating any previous log.
    pub fn start(dir: RunDir, cfg: TrainConfig, model: PoseNet<f32>) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(dir.checkpoint_dir()).map_err(|e| Error::io(dir.checkpoint_dir(), e))?;
        fs::write(dir.log_path(), format!("{LOG_HEADER}\n")).map_err(|e| Error::io(dir.log_path(), e))?;
        let optimizer = AmsGrad::new(model.params(), cfg.optimizer);
        Ok(TrainingRun {
            dir,
            cfg,
            model,
            optimizer,
            next_epoch: 1,
        })
    }

    /// Continues from the latest complete checkpoint; epoch numbering picks
    /// up after it and the log keeps its earlier rows.
    pub fn resume(dir: RunDir, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let epoch = dir
            .latest_epoch()?
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint to resume in {}", dir.root().display())))?;
        let model = PoseNet::<f32>::load(&dir.checkpoint_path(epoch))?;
        if model.config().kind != cfg.phase.model_kind() {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model but phase {} trains a {} model",
                model.config().kind.as_str(),
                cfg.phase.as_str(),
                cfg.phase.model_kind().as_str()
            )));
        }
        let opt_ckpt: Checkpoint<f32> = read_checkpoint(&dir.optimizer_path(epoch))?;
        let optimizer = AmsGrad::from_checkpoint(model.params(), &opt_ckpt, cfg.optimizer)?;
        let log = dir.log_path();
        let text = fs::read_to_string(&log).map_err(|e| Error::io(&log, e))?;
        let kept: Vec<&str> = text
            .lines()
            .filter(|l| {
                l.split(',')
                    .next()
                    .and_then(|e| e.parse::<usize>().ok())
                    .is_none_or(|e| e <= epoch)
            })
            .collect();
        fs::write(&log, kept.join("\n") + "\n").map_err(|e| Error::io(&log, e))?;
        Ok(TrainingRun {
            dir,
            cfg,
            model,
            optimizer,
            next_epoch: epoch + 1,
        })
    }

    pub fn model(&self) -> &PoseNet<f32> {
        &self.model
    }

    pub fn into_model(self) -> PoseNet<f32> {
        self.model
    }

    pub fn optimizer(&self) -> &AmsGrad<f32> {
        &self.optimizer
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    fn budget_left(&self) -> bool {
        self.cfg
            .max_steps
            .is_none_or(|m| (self.optimizer.steps() as usize) < m)
    }

    pub fn save(&self, epoch: usize) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("train.phase".to_string(), self.cfg.phase.as_str().to_string());
        meta.insert("train.epoch".to_string(), epoch.to_string());
        meta.insert("train.steps".to_string(), self.optimizer.steps().to_string());
        self.model.save(&self.dir.checkpoint_path(epoch), &meta)?;
        write_checkpoint(&self.dir.optimizer_path(epoch), &self.optimizer.to_checkpoint(self.model.params()))
    }

    /// Trains until `cfg.epochs` or the step budget is reached, logging every
    /// epoch and checkpointing every `checkpoint_interval` epochs and at the
    /// end. `on_epoch` sees each epoch's statistics and the current model.
    pub fn run(
        &mut self,
        samples: &[SequenceSample],
        frames: &dyn FrameSource,
        mut on_epoch: impl FnMut(&EpochStats, &PoseNet<f32>) -> Result<()>,
    ) -> Result<Vec<EpochStats>> {
        let mut all = Vec::new();
        while self.next_epoch <= self.cfg.epochs && self.budget_left() {
            let epoch = self.next_epoch;
            let stats = train_epoch(&mut self.model, &mut self.optimizer, samples, frames, &self.cfg, epoch)?;
            self.append_log(&stats)?;
            self.next_epoch += 1;
            let last = self.next_epoch > self.cfg.epochs || !self.budget_left();
            if epoch.is_multiple_of(self.cfg.checkpoint_interval) || last {
                self.save(epoch)?;
            }
            on_epoch(&stats, &self.model)?;
            all.push(stats);
        }
        Ok(all)
    }

    fn append_log(&self, s: &EpochStats) -> Result<()> {
        let path = self.dir.log_path();
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{},{},{:.9e},{:e},{:.3}", s.epoch, s.phase.as_str(), s.mean_loss, s.lr, s.wall_s)
            .map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseVector6;
    use crate::network::ModelKind;
    use crate::tensor::Tensor;
    use crate::training::AmsGradConfig;

    struct Flat;

    impl FrameSource for Flat {
        fn frame(&self, _: &str, index: usize) -> Result<Tensor<f32>> {
            let data = (0..3 * 24 * 64).map(|i| ((i * 7 + index * 13) % 17) as f32 / 17.0 - 0.5).collect();
            Tensor::new(&[3, 24, 64], data)
        }
        fn resolution(&self) -> (usize, usize) {
            (64, 24)
        }
    }

    fn samples() -> Vec<SequenceSample> {
        (0..3)
            .map(|k| SequenceSample {
                sequence: "00".into(),
                frames: vec![k, k + 1],
                stride: 1,
                mirrored: false,
                time_reversed: false,
                targets: vec![PoseVector6::new(0.0, 0.0, 1.0, 0.0, 0.01 * k as f64, 0.0)],
            })
            .collect()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            phase: Phase::PretrainCnn,
            batch_size: 2,
            epochs,
            checkpoint_interval: 2,
            optimizer: AmsGradConfig {
                lr: 1e-3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn resume_continues_numbering_and_matches_uninterrupted_run() {
        let model_cfg = ModelConfig::tiny().with_kind(ModelKind::CnnOnly);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();

        let mut full = TrainingRun::start(RunDir::new(a.path()), cfg(4), prepare_model(&cfg(4), &model_cfg).unwrap()).unwrap();
        full.run(&samples(), &Flat, |_, _| Ok(())).unwrap();

        let mut first = TrainingRun::start(RunDir::new(b.path()), cfg(2), prepare_model(&cfg(2), &model_cfg).unwrap()).unwrap();
        first.run(&samples(), &Flat, |_, _| Ok(())).unwrap();
        let mut second = TrainingRun::resume(RunDir::new(b.path()), cfg(4)).unwrap();
        assert_eq!(second.next_epoch(), 3);
        let rest = second.run(&samples(), &Flat, |_, _| Ok(())).unwrap();
        assert_eq!(rest.iter().map(|s| s.epoch).collect::<Vec<_>>(), vec![3, 4]);

        let final_a = full.model().params().by_name("head.fc2.weight").unwrap().data().to_vec();
        let final_b = second.model().params().by_name("head.fc2.weight").unwrap().data().to_vec();
        assert_eq!(final_a, final_b);

        let log = fs::read_to_string(RunDir::new(b.path()).log_path()).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("4,pretrain-cnn,"));
        let dir = RunDir::new(a.path());
        assert!(dir.checkpoint_path(2).is_file() && dir.checkpoint_path(4).is_file());
        assert!(!dir.checkpoint_path(1).exists());
    }

    #[test]
    fn fine_tune_needs_pretrained_encoder() {
        let c = TrainConfig {
            phase: Phase::FineTune,
            ..cfg(1)
        };
        assert!(matches!(prepare_model(&c, &ModelConfig::tiny()), Err(Error::Config(_))));

        let dir = tempfile::tempdir().unwrap();
        let pre = PoseNet::<f32>::new(ModelConfig::tiny().with_kind(ModelKind::CnnOnly), 4).unwrap();
        let path = dir.path().join("pre.ckpt");
        pre.save(&path, &BTreeMap::new()).unwrap();
        let c = TrainConfig {
            pretrain_checkpoint: Some(path.clone()),
            ..c
        };
        let net = prepare_model(&c, &ModelConfig::tiny()).unwrap();
        for (id, name, t) in net.params().iter() {
            if net.is_encoder_param(id) {
                assert_eq!(t.data(), pre.params().by_name(name).unwrap().data());
            }
            if name.starts_with("gru.") && name.contains(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(prepare_model(&c, &ModelConfig::quarter()).is_err());
    }
}
