//! Flat `key = value` run configuration with namespaced keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use egomotion::dataset::{MotionProfile, SamplingConfig, SplitSpec, SynthConfig};
use egomotion::evaluation::MetricsConfig;
use egomotion::network::ModelConfig;
use egomotion::objective::LossConfig;
use egomotion::training::{AmsGradConfig, Phase, TrainConfig};
use egomotion::{Error, Result};

/// Every recognised key with its default value and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for sampling, initialization, augmentation and synthesis"),
    ("data.root", "data", "dataset directory in KITTI layout, relative to the run directory"),
    ("data.train", "00,01,02,08,09", "training sequences, or `all`"),
    ("data.test", "03,04,05,06,07,10", "test sequences, or `all`"),
    ("data.validation_pairs", "640", "frame pairs held out from the end of the training samples"),
    ("data.t1", "3", "pairs per training clip"),
    ("data.t2", "2", "second clip-length setting, recorded in resolved.cfg only"),
    ("data.strides", "1,2,3", "frame-skip factors drawn per clip"),
    ("data.overlap_stride", "1", "frames between consecutive clip starts"),
    ("data.cache", "false", "keep decoded frames in memory"),
    ("synth.sequences", "3", "number of synthetic sequences"),
    ("synth.frames", "101", "frames per synthetic sequence"),
    ("synth.width", "320", "synthetic image width"),
    ("synth.height", "96", "synthetic image height"),
    ("synth.identity", "false", "static camera: every motion is the identity"),
    ("synth.speed_min", "0.6", "slowest forward travel per frame, meters"),
    ("synth.speed_max", "1.4", "fastest forward travel per frame, meters"),
    ("synth.lateral", "0.05", "peak sideways drift per frame, meters"),
    ("synth.yaw_rate", "0.03", "peak yaw per frame, radians"),
    ("synth.speed_jitter", "0.1", "relative frame-to-frame speed variation"),
    ("model.scale", "quarter", "architecture preset: full, quarter or tiny"),
    ("model.gru_cells", "3", "stacked recurrent cells"),
    ("model.head_hidden", "preset", "hidden width of the pose head"),
    ("model.dropout", "0.2", "dropout probability in the pose head"),
    ("train.out", "train", "training output directory, relative to the run directory"),
    ("train.phase", "fine-tune", "pretrain-cnn, fine-tune or mirror-constrained"),
    ("train.pretrain_checkpoint", "none", "checkpoint whose encoder initializes fine-tuning"),
    ("train.batch", "32", "clips per optimizer step (halved for the mirror phase)"),
    ("train.epochs", "100", "training epochs"),
    ("train.max_steps", "none", "stop after this many optimizer steps"),
    ("train.lr", "1e-4", "initial learning rate"),
    ("train.lr_halving_epochs", "30", "epochs between learning-rate halvings, 0 for never"),
    ("train.adam_b1", "0.9", "first-moment decay"),
    ("train.adam_b2", "0.999", "second-moment decay"),
    ("train.adam_eps", "1e-8", "optimizer epsilon"),
    ("train.clip_norm", "none", "global gradient-norm limit"),
    ("train.freeze_encoder", "false", "keep encoder weights fixed"),
    ("train.hflip_prob", "0.5", "probability of a horizontally mirrored clip"),
    ("train.tflip_prob", "0.5", "probability of a time-reversed clip"),
    ("train.checkpoint_interval", "5", "epochs between checkpoints"),
    ("train.validate", "true", "report validation loss after every epoch"),
    ("loss.beta", "0.9", "rotation weight of the pair loss"),
    ("loss.beta1", "0.9", "rotation weight of the mirror loss, forward branch"),
    ("loss.beta2", "0.999", "rotation weight of the mirror loss, reversed branch"),
    ("eval.out", "eval", "report directory, relative to the run directory"),
    ("eval.checkpoint", "latest", "model checkpoint, or `latest` from train.out"),
    ("eval.sequences", "test", "sequences to evaluate: `test`, `train`, `all` or a list"),
    ("eval.mode", "model", "`model`, or `ground-truth` to replay the poses"),
    ("eval.window", "none", "reset recurrent state every this many pairs"),
    ("eval.lengths", "100,200,300,400,500,600,700,800", "subsequence lengths, meters"),
    ("eval.start_stride", "10", "frames between subsequence starts"),
    ("eval.frame_rate", "10", "frames per second"),
    ("eval.speed_bins", "7", "speed bins"),
    ("eval.speed_window", "10", "frames per speed window"),
    ("preview.out", "preview", "preview directory, relative to the run directory"),
    ("preview.count", "4", "samples to dump"),
    ("preview.sequences", "train", "sequences to sample: `train`, `test`, `all` or a list"),
    ("preview.hflip_prob", "0.5", "probability of mirroring a previewed sample"),
    ("preview.tflip_prob", "0.5", "probability of reversing a previewed sample"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v)
    }

    /// Applies every assignment of a config file. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply(line)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", n + 1, strip_kind(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            "none" | "" => Ok(None),
            _ => self.parse(key).map(Some),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse list item {s:?}")))
            })
            .collect()
    }

    /// Sorted `key = value` lines.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            writeln!(s, "{k} = {v}").expect("writing to a String");
        }
        s
    }

    /// A path key resolved against the run directory.
    pub fn path(&self, run_dir: &Path, key: &str) -> PathBuf {
        run_dir.join(self.get(key))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn sampling(&self) -> Result<SamplingConfig> {
        let _t2: usize = self.parse("data.t2")?;
        let cfg = SamplingConfig {
            clip_len: self.parse("data.t1")?,
            strides: self.list("data.strides")?,
            overlap_stride: self.parse("data.overlap_stride")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves a sequence-list key. `all` expands to `available`, and
    /// `train` / `test` to the corresponding data lists.
    pub fn sequences(&self, key: &str, available: &[String]) -> Result<Vec<String>> {
        match self.get(key) {
            "all" => Ok(available.to_vec()),
            "train" if key != "data.train" => self.sequences("data.train", available),
            "test" if key != "data.test" => self.sequences("data.test", available),
            _ => {
                let list: Vec<String> = self.list(key)?;
                if list.is_empty() && key != "data.test" {
                    return Err(Error::Config(format!("{key}: no sequences listed")));
                }
                Ok(list)
            }
        }
    }

    pub fn split(&self, available: &[String]) -> Result<SplitSpec> {
        let spec = SplitSpec {
            train: self.sequences("data.train", available)?,
            test: self.sequences("data.test", available)?,
            validation_pairs: self.parse("data.validation_pairs")?,
        };
        Ok(spec)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            sequences: self.parse("synth.sequences")?,
            frames: self.parse("synth.frames")?,
            width: self.parse("synth.width")?,
            height: self.parse("synth.height")?,
            seed: self.seed()?,
            motion: MotionProfile {
                speed: (self.parse("synth.speed_min")?, self.parse("synth.speed_max")?),
                lateral: self.parse("synth.lateral")?,
                yaw_rate: self.parse("synth.yaw_rate")?,
                speed_jitter: self.parse("synth.speed_jitter")?,
            },
            identity: self.flag("synth.identity")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(self.get("model.scale"))?;
        cfg.gru_cells = self.parse("model.gru_cells")?;
        if self.get("model.head_hidden") != "preset" {
            cfg.head_hidden = self.parse("model.head_hidden")?;
        }
        cfg.dropout = self.parse("model.dropout")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self, run_dir: &Path, workers: usize) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            phase: Phase::parse(self.get("train.phase"))?,
            batch_size: self.parse("train.batch")?,
            epochs: self.parse("train.epochs")?,
            checkpoint_interval: self.parse("train.checkpoint_interval")?,
            optimizer: AmsGradConfig {
                lr: self.parse("train.lr")?,
                b1: self.parse("train.adam_b1")?,
                b2: self.parse("train.adam_b2")?,
                eps: self.parse("train.adam_eps")?,
            },
            lr_halving_epochs: self.parse("train.lr_halving_epochs")?,
            seed: self.seed()?,
            clip_norm: self.optional("train.clip_norm")?,
            freeze_encoder: self.flag("train.freeze_encoder")?,
            loss: LossConfig {
                beta: self.parse("loss.beta")?,
                beta1: self.parse("loss.beta1")?,
                beta2: self.parse("loss.beta2")?,
            },
            hflip_prob: self.parse("train.hflip_prob")?,
            tflip_prob: self.parse("train.tflip_prob")?,
            max_steps: self.optional("train.max_steps")?,
            workers,
            pretrain_checkpoint: self
                .optional::<String>("train.pretrain_checkpoint")?
                .map(|p| run_dir.join(p)),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn metrics(&self) -> Result<MetricsConfig> {
        let cfg = MetricsConfig {
            lengths: self.list("eval.lengths")?,
            start_stride: self.parse("eval.start_stride")?,
            frame_rate: self.parse("eval.frame_rate")?,
            speed_bins: self.parse("eval.speed_bins")?,
            speed_window: self.parse("eval.speed_window")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
