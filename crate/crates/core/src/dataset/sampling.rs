use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kitti::{kitti_sequence_id, relative_pose};
use crate::error::{Error, Result};
use crate::geometry::{conjugate_mirror, invert, se3_to_vec, vec_to_se3, PoseVector6, RigidTransform};

/// A fixed-length clip: `T + 1` frame indices and the `T` relative poses
/// between consecutive entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub sequence: String,
    pub frames: Vec<usize>,
    pub stride: usize,
    pub mirrored: bool,
    pub time_reversed: bool,
    pub targets: Vec<PoseVector6>,
}

impl SequenceSample {
    /// Builds an unaugmented sample from ground-truth absolutes.
    pub fn from_ground_truth(sequence: &str, gt: &[RigidTransform], start: usize, t: usize, stride: usize) -> Result<Self> {
        if t == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "clip length and stride must be positive (T = {t}, stride = {stride})"
            )));
        }
        let frames: Vec<usize> = (0..=t).map(|k| start + k * stride).collect();
        if *frames.last().expect("non-empty") >= gt.len() {
            return Err(Error::InvalidArgument(format!(
                "sequence {sequence}: clip {start}..={} exceeds its {} frames",
                frames.last().unwrap(),
                gt.len()
            )));
        }
        let targets = frames
            .windows(2)
            .map(|w| relative_pose(&gt[w[0]], &gt[w[1]]))
            .collect::<Result<_>>()?;
        Ok(SequenceSample {
            sequence: sequence.to_string(),
            frames,
            stride,
            mirrored: false,
            time_reversed: false,
            targets,
        })
    }

    /// Number of frame pairs.
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Targets mirrored about the image's vertical axis.
    pub fn horizontally_flipped(&self) -> Result<Self> {
        let targets = self
            .targets
            .iter()
            .map(|p| se3_to_vec(&conjugate_mirror(&vec_to_se3(p)?)))
            .collect::<Result<_>>()?;
        Ok(SequenceSample {
            mirrored: !self.mirrored,
            targets,
            ..self.clone()
        })
    }

    /// The clip played backwards: frames reversed, each target the inverse
    /// of the corresponding original motion.
    pub fn temporally_flipped(&self) -> Result<Self> {
        let targets = self
            .targets
            .iter()
            .rev()
            .map(|p| se3_to_vec(&invert(&vec_to_se3(p)?)))
            .collect::<Result<_>>()?;
        Ok(SequenceSample {
            frames: self.frames.iter().rev().copied().collect(),
            time_reversed: !self.time_reversed,
            targets,
            ..self.clone()
        })
    }

    /// Targets recomputed from ground truth for this sample's frame order and
    /// flags. Stored targets of a consistent sample match these.
    pub fn expected_targets(&self, gt: &[RigidTransform]) -> Result<Vec<PoseVector6>> {
        if let Some(&bad) = self.frames.iter().find(|&&f| f >= gt.len()) {
            return Err(Error::Data(format!(
                "sequence {}: frame {bad} has no ground truth",
                self.sequence
            )));
        }
        self.frames
            .windows(2)
            .map(|w| {
                let rel = invert(&gt[w[0]]).compose(&gt[w[1]]);
                let rel = if self.mirrored { conjugate_mirror(&rel) } else { rel };
                se3_to_vec(&rel)
            })
            .collect()
    }

    /// Largest componentwise difference between stored and re-derived targets.
    pub fn target_discrepancy(&self, gt: &[RigidTransform]) -> Result<f64> {
        let expected = self.expected_targets(gt)?;
        if expected.len() != self.targets.len() {
            return Err(Error::contract(format!(
                "sample has {} targets for {} frames",
                self.targets.len(),
                self.frames.len()
            )));
        }
        Ok(expected
            .iter()
            .zip(&self.targets)
            .flat_map(|(a, b)| a.to_array().into_iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }
}

/// Which sequences feed each split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Frame pairs held out from the end of the training samples.
    pub validation_pairs: usize,
}

impl SplitSpec {
    /// Training on 00, 01, 02, 08, 09 and testing on 03-07 and 10, with 640
    /// validation pairs.
    pub fn kitti() -> Self {
        SplitSpec {
            train: [0, 1, 2, 8, 9].into_iter().map(kitti_sequence_id).collect(),
            test: [3, 4, 5, 6, 7, 10].into_iter().map(kitti_sequence_id).collect(),
            validation_pairs: 640,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.train.iter().find(|s| self.test.contains(s)) {
            return Err(Error::Config(format!(
                "sequence {s} is listed for both training and testing"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    /// Pairs per clip (T).
    pub clip_len: usize,
    /// Frame-skip factors; each clip draws one.
    pub strides: Vec<usize>,
    /// Distance between consecutive clip start frames.
    pub overlap_stride: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            clip_len: 3,
            strides: vec![1, 2, 3],
            overlap_stride: 1,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 {
            return Err(Error::Config("clip length T must be at least 1".into()));
        }
        if self.strides.is_empty() || self.strides.contains(&0) {
            return Err(Error::Config(format!(
                "stride set must be non-empty and positive, got {:?}",
                self.strides
            )));
        }
        if self.overlap_stride == 0 {
            return Err(Error::Config("overlap stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<SequenceSample>,
    /// Sequences too short for even the smallest stride.
    pub skipped: Vec<String>,
}

impl SampleSet {
    pub fn pair_count(&self) -> usize {
        self.samples.iter().map(SequenceSample::len).sum()
    }
}

/// Cuts fixed-length clips from each listed sequence, in sequence order.
///
/// Clip starts are spaced by the overlap stride. Each clip draws its stride
/// from the configured set among those that still fit before the end of the
/// sequence; the stride draw is seeded per sequence so the result does not
/// depend on which other sequences are listed.
pub fn sample_sequences(
    ground_truth: &BTreeMap<String, Vec<RigidTransform>>,
    sequences: &[String],
    cfg: &SamplingConfig,
) -> Result<SampleSet> {
    cfg.validate()?;
    let t = cfg.clip_len;
    let min_stride = *cfg.strides.iter().min().expect("validated non-empty");
    let mut set = SampleSet::default();
    for seq in sequences {
        let gt = ground_truth
            .get(seq)
            .ok_or_else(|| Error::Data(format!("sequence {seq}: no ground truth loaded")))?;
        if gt.len() < t * min_stride + 1 {
            log::warn!("sequence {seq}: {} frames is too short for T = {t}", gt.len());
            set.skipped.push(seq.clone());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(seq.as_bytes()));
        let mut start = 0;
        loop {
            let fitting: Vec<usize> = cfg.strides.iter().copied().filter(|&s| start + t * s < gt.len()).collect();
            if fitting.is_empty() {
                break;
            }
            let stride = if fitting.len() == 1 {
                fitting[0]
            } else {
                fitting[rng.random_range(0..fitting.len())]
            };
            set.samples.push(SequenceSample::from_ground_truth(seq, gt, start, t, stride)?);
            start += cfg.overlap_stride;
        }
    }
    Ok(set)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SequenceSample>,
    pub validation: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
    pub skipped: Vec<String>,
}

impl DatasetSplit {
    pub fn pair_counts(&self) -> (usize, usize, usize) {
        let pairs = |v: &[SequenceSample]| v.iter().map(SequenceSample::len).sum();
        (pairs(&self.train), pairs(&self.validation), pairs(&self.test))
    }
}

/// Samples both splits. Validation is the trailing run of training samples
/// holding `validation_pairs` pairs (rounded up to whole clips); test clips
/// always use stride 1.
pub fn build_split(
    ground_truth: &BTreeMap<String, Vec<RigidTransform>>,
    spec: &SplitSpec,
    cfg: &SamplingConfig,
) -> Result<DatasetSplit> {
    spec.validate()?;
    let train = sample_sequences(ground_truth, &spec.train, cfg)?;
    let test_cfg = SamplingConfig {
        strides: vec![1],
        ..cfg.clone()
    };
    let test = sample_sequences(ground_truth, &spec.test, &test_cfg)?;
    let mut train_samples = train.samples;
    let holdout = spec.validation_pairs.div_ceil(cfg.clip_len).min(train_samples.len());
    let validation = train_samples.split_off(train_samples.len() - holdout);
    let mut skipped = train.skipped;
    skipped.extend(test.skipped);
    Ok(DatasetSplit {
        train: train_samples,
        validation,
        test: test.samples,
        skipped,
    })
}
