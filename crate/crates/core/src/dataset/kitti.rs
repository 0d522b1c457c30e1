//! KITTI odometry layout: `sequences/<NN>/image_2/<FFFFFF>.png` and
//! `poses/<NN>.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{invert, se3_to_vec, PoseVector6, RigidTransform};
use crate::tensor::Tensor;

/// Largest deviation from orthonormality accepted in a pose file before the
/// rotation is rejected. Files are printed with ~6 significant digits, so
/// the rotations they contain are close to, but not exactly, orthonormal.
pub const POSE_FILE_DRIFT_LIMIT: f64 = 1e-3;

/// Parses a pose file: one row-major 3x4 `[R | t]` per line.
pub fn parse_kitti_poses(reader: impl BufRead) -> Result<Vec<RigidTransform>> {
    let mut poses = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("not a number: {tok:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != 12 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 12 values, found {}", values.len()),
            });
        }
        let r = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9], values[10],
        );
        let t = Vector3::new(values[3], values[7], values[11]);
        let pose = RigidTransform::from_parts_projected(r, t, POSE_FILE_DRIFT_LIMIT).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn parse_kitti_poses_str(text: &str) -> Result<Vec<RigidTransform>> {
    parse_kitti_poses(text.as_bytes())
}

pub fn format_kitti_pose(p: &RigidTransform) -> String {
    let (r, t) = (p.rotation(), p.translation());
    let mut fields = Vec::with_capacity(12);
    for row in 0..3 {
        for col in 0..3 {
            fields.push(format!("{:.12e}", r[(row, col)]));
        }
        fields.push(format!("{:.12e}", t[row]));
    }
    fields.join(" ")
}

pub fn write_kitti_poses(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = String::new();
    for p in poses {
        out.push_str(&format_kitti_pose(p));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Motion from frame i to frame j, expressed in frame i.
pub fn relative_pose(abs_i: &RigidTransform, abs_j: &RigidTransform) -> Result<PoseVector6> {
    se3_to_vec(&invert(abs_i).compose(abs_j))
}

/// The eleven sequences with public ground truth, 00 through 10.
pub fn kitti_sequence_id(n: usize) -> String {
    format!("{n:02}")
}

/// Reads and writes a dataset in KITTI odometry layout. Synthetic data uses
/// the same layout so loaders never need to know the source.
#[derive(Debug, Clone)]
pub struct KittiDataset {
    root: PathBuf,
}

impl KittiDataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        KittiDataset { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn poses_path(&self, seq: &str) -> PathBuf {
        self.root.join("poses").join(format!("{seq}.txt"))
    }

    pub fn image_dir(&self, seq: &str) -> PathBuf {
        self.root.join("sequences").join(seq).join("image_2")
    }

    pub fn frame_path(&self, seq: &str, frame: usize) -> PathBuf {
        self.image_dir(seq).join(format!("{frame:06}.png"))
    }

    pub fn has_poses(&self, seq: &str) -> bool {
        self.poses_path(seq).is_file()
    }

    /// Ground-truth absolutes of one sequence.
    pub fn poses(&self, seq: &str) -> Result<Vec<RigidTransform>> {
        let path = self.poses_path(seq);
        let file = fs::File::open(&path)
            .map_err(|e| Error::Data(format!("sequence {seq}: cannot open poses file {}: {e}", path.display())))?;
        parse_kitti_poses(BufReader::new(file)).map_err(|e| match e {
            Error::Parse { line, message } => Error::Data(format!(
                "sequence {seq}: {}: line {line}: {message}",
                path.display()
            )),
            other => other,
        })
    }

    pub fn ground_truth(&self, seqs: &[String]) -> Result<BTreeMap<String, Vec<RigidTransform>>> {
        seqs.iter().map(|s| Ok((s.clone(), self.poses(s)?))).collect()
    }

    /// Number of frames in a sequence, from its image directory when present
    /// and otherwise from its pose file.
    pub fn frame_count(&self, seq: &str) -> Result<usize> {
        let dir = self.image_dir(seq);
        if dir.is_dir() {
            let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut n = 0;
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(&dir, e))?;
                if entry.path().extension().is_some_and(|x| x == "png") {
                    n += 1;
                }
            }
            return Ok(n);
        }
        if self.has_poses(seq) {
            return Ok(self.poses(seq)?.len());
        }
        Err(Error::Data(format!(
            "sequence {seq}: neither {} nor {} exists",
            dir.display(),
            self.poses_path(seq).display()
        )))
    }

    /// Sequence ids found under `sequences/` or `poses/`, sorted.
    pub fn sequence_ids(&self) -> Result<Vec<String>> {
        let mut ids = std::collections::BTreeSet::new();
        for (sub, strip_ext) in [("sequences", false), ("poses", true)] {
            let dir = self.root.join(sub);
            if !dir.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let path = entry.map_err(|e| Error::io(&dir, e))?.path();
                let name = if strip_ext {
                    if path.extension().is_none_or(|x| x != "txt") {
                        continue;
                    }
                    path.file_stem()
                } else {
                    path.is_dir().then(|| path.file_name()).flatten()
                };
                if let Some(n) = name.and_then(|n| n.to_str()) {
                    ids.insert(n.to_string());
                }
            }
        }
        Ok(ids.into_iter().collect())
    }
}

/// Loads an 8-bit color image, resizes it bilinearly to `width x height` and
/// maps channel values to [-0.5, 0.5]. Returns a `3 x height x width` tensor.
pub fn load_and_preprocess(path: &Path, width: usize, height: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?
        .to_rgb8();
    Ok(rgb_to_tensor(&resize_rgb(img, width, height)))
}

pub(crate) fn resize_rgb(img: image::RgbImage, width: usize, height: usize) -> image::RgbImage {
    if img.width() as usize == width && img.height() as usize == height {
        img
    } else {
        image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
    }
}

pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0 - 0.5;
        }
    }
    Tensor::new(&[3, h, w], data).expect("shape matches buffer")
}

/// Inverse of [`rgb_to_tensor`], rounding to the nearest 8-bit level.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<image::RgbImage> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::shape(format!("expected a 3 x H x W frame, got {:?}", t.shape())));
    };
    let d = t.data();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| ((d[(c * h + y as usize) * w + x as usize] + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_png(path: &Path, img: &image::RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}
