//! Data ingestion: KITTI-layout readers, clip sampling, pose-consistent
//! augmentation and a synthetic sequence generator.

mod kitti;
mod queue;
mod sampling;
mod synthetic;

use std::collections::HashMap;
use std::sync::Mutex;

pub use kitti::{
    format_kitti_pose, kitti_sequence_id, load_and_preprocess, parse_kitti_poses, parse_kitti_poses_str,
    relative_pose, rgb_to_tensor, save_png, tensor_to_rgb, write_kitti_poses, KittiDataset, POSE_FILE_DRIFT_LIMIT,
};
pub use queue::for_each_ordered;
pub use sampling::{build_split, sample_sequences, DatasetSplit, SampleSet, SamplingConfig, SequenceSample, SplitSpec};
pub use synthetic::{
    generate_synthetic, plane_homography, render_frame, write_synthetic_dataset, CameraModel, MotionProfile, Plane,
    SynthConfig, SynthSummary, SyntheticSequence, Texture,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Supplies preprocessed `3 x H x W` frames by sequence and frame index.
pub trait FrameSource: Sync {
    fn frame(&self, sequence: &str, index: usize) -> Result<Tensor<f32>>;
    fn resolution(&self) -> (usize, usize);
}

/// Decodes frames from a KITTI-layout directory on every request.
#[derive(Debug, Clone)]
pub struct DiskFrames {
    dataset: KittiDataset,
    width: usize,
    height: usize,
}

impl DiskFrames {
    pub fn new(dataset: KittiDataset, width: usize, height: usize) -> Self {
        DiskFrames { dataset, width, height }
    }
}

impl FrameSource for DiskFrames {
    fn frame(&self, sequence: &str, index: usize) -> Result<Tensor<f32>> {
        load_and_preprocess(&self.dataset.frame_path(sequence, index), self.width, self.height)
    }

    fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Keeps decoded frames in memory as 8-bit images after their first load.
/// Suited to small datasets that are revisited every epoch.
pub struct CachedFrames<F> {
    inner: F,
    cache: Mutex<HashMap<(String, usize), image::RgbImage>>,
}

impl<F: FrameSource> CachedFrames<F> {
    pub fn new(inner: F) -> Self {
        CachedFrames {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<F: FrameSource> FrameSource for CachedFrames<F> {
    fn frame(&self, sequence: &str, index: usize) -> Result<Tensor<f32>> {
        let key = (sequence.to_string(), index);
        if let Some(img) = self.cache.lock().expect("frame cache lock").get(&key) {
            return Ok(rgb_to_tensor(img));
        }
        let t = self.inner.frame(sequence, index)?;
        // Frames come from 8-bit images, so the round trip is exact.
        let img = tensor_to_rgb(&t)?;
        self.cache.lock().expect("frame cache lock").insert(key, img);
        Ok(t)
    }

    fn resolution(&self) -> (usize, usize) {
        self.inner.resolution()
    }
}

/// Mirrors a `3 x H x W` frame about its vertical axis.
pub fn flip_frame_horizontal(frame: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[c, h, w] = frame.shape() else {
        return Err(Error::shape(format!("expected a C x H x W frame, got {:?}", frame.shape())));
    };
    let src = frame.data();
    let mut out = Vec::with_capacity(src.len());
    for row in src.chunks_exact(w) {
        out.extend(row.iter().rev());
    }
    Tensor::new(&[c, h, w], out)
}

/// A sample together with its frames, in the sample's frame order.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: SequenceSample,
    pub frames: Vec<Tensor<f32>>,
}

impl LoadedSample {
    /// Loads the frames of an unaugmented sample.
    pub fn load(sample: &SequenceSample, source: &dyn FrameSource) -> Result<Self> {
        let frames = sample
            .frames
            .iter()
            .map(|&i| {
                let f = source.frame(&sample.sequence, i)?;
                if sample.mirrored {
                    flip_frame_horizontal(&f)
                } else {
                    Ok(f)
                }
            })
            .collect::<Result<_>>()?;
        Ok(LoadedSample {
            sample: sample.clone(),
            frames,
        })
    }

    /// Every frame mirrored and every target conjugated by the mirror.
    pub fn horizontal_flip(&self) -> Result<Self> {
        Ok(LoadedSample {
            sample: self.sample.horizontally_flipped()?,
            frames: self.frames.iter().map(flip_frame_horizontal).collect::<Result<_>>()?,
        })
    }

    /// Frames reversed; targets become the reversed list of inverted motions.
    pub fn temporal_flip(&self) -> Result<Self> {
        Ok(LoadedSample {
            sample: self.sample.temporally_flipped()?,
            frames: self.frames.iter().rev().cloned().collect(),
        })
    }

    /// `1 x T x 6` target tensor.
    pub fn target_tensor(&self) -> Tensor<f32> {
        let values: Vec<f64> = self.sample.targets.iter().flat_map(|p| p.to_array()).collect();
        Tensor::from_f64(&[1, self.sample.len(), 6], &values).expect("T >= 1 targets")
    }
}
