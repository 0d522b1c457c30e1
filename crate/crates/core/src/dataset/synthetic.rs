//! Synthetic sequences with exact ground truth: a pinhole camera moving over
//! a procedurally textured plane.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kitti::{kitti_sequence_id, save_png, write_kitti_poses, KittiDataset};
use super::queue::for_each_ordered;
use crate::error::{Error, Result};
use crate::geometry::{accumulate, invert, vec_to_se3, PoseVector6, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraModel {
    /// Square pixels, focal length 0.6 x width, principal point at the image
    /// center. The center sits at `(w - 1) / 2` so a horizontal image flip
    /// maps the camera onto itself.
    pub fn for_resolution(width: usize, height: usize) -> Self {
        let f = 0.6 * width as f64;
        CameraModel {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        let inside = |c: f64, extent: usize| (0.0..=extent as f64 - 1.0).contains(&c);
        if !inside(self.cx, width) || !inside(self.cy, height) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) lies outside the {width}x{height} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// The plane `{X : n . X = d}` in the first camera's frame, with unit normal
/// `n` and `d > 0` (the first camera lies on the side the normal points away
/// from).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    normal: Vector3<f64>,
    distance: f64,
}

impl Plane {
    pub fn new(normal: Vector3<f64>, distance: f64) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0 && len.is_finite() && distance > 0.0 && distance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "plane needs a non-zero normal and positive distance, got {normal:?}, {distance}"
            )));
        }
        Ok(Plane {
            normal: normal / len,
            distance,
        })
    }

    /// Ground 1.65 m below the camera (y points down).
    pub fn ground() -> Self {
        Plane {
            normal: Vector3::new(0.0, 1.0, 0.0),
            distance: 1.65,
        }
    }

    /// Wall facing the camera at depth `d`.
    pub fn fronto_parallel(d: f64) -> Result<Self> {
        Self::new(Vector3::new(0.0, 0.0, 1.0), d)
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.normal
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    /// The plane expressed in a camera frame reached by `X' = R X + t`.
    pub fn transformed(&self, first_to_cam: &RigidTransform) -> (Vector3<f64>, f64) {
        let n = first_to_cam.rotation() * self.normal;
        (n, self.distance + n.dot(first_to_cam.translation()))
    }

    /// Orthonormal in-plane axes used as texture coordinates.
    fn tangents(&self) -> (Vector3<f64>, Vector3<f64>) {
        let helper = if self.normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = (helper - self.normal * self.normal.dot(&helper)).normalize();
        (e1, self.normal.cross(&e1))
    }
}

/// Homography `K (R + t n^T / d) K^-1` mapping first-camera pixels of plane
/// points to pixels in a camera reached by `X' = R X + t`.
pub fn plane_homography(camera: &CameraModel, first_to_cam: &RigidTransform, plane: &Plane) -> Matrix3<f64> {
    let m = first_to_cam.rotation() + first_to_cam.translation() * plane.normal.transpose() / plane.distance;
    camera.k() * m * camera.k_inv()
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    freq: [f64; 2],
    phase: f64,
    amplitude: [f64; 3],
}

/// Seeded sum of sinusoids over plane coordinates, band-limited to a range of
/// spatial frequencies (cycles per meter).
#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<Wave>,
    sky: [f64; 3],
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        Self::with_band(seed, 24, 0.15, 3.0)
    }

    pub fn with_band(seed: u64, count: usize, min_freq: f64, max_freq: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = 0.42;
        let waves = (0..count)
            .map(|_| {
                let f = min_freq * (max_freq / min_freq).powf(rng.random::<f64>());
                let theta = rng.random::<f64>() * 2.0 * PI;
                let base = total / count as f64 * 2.0 * rng.random::<f64>();
                Wave {
                    freq: [f * theta.cos(), f * theta.sin()],
                    phase: rng.random::<f64>() * 2.0 * PI,
                    amplitude: std::array::from_fn(|_| base * (0.5 + 0.5 * rng.random::<f64>())),
                }
            })
            .collect();
        Texture {
            waves,
            sky: [0.80, 0.86, 0.93],
        }
    }

    /// Color at plane coordinates `(a, b)` seen with a pixel footprint of
    /// `meters_per_pixel`; waves finer than the footprint fade out.
    fn sample(&self, a: f64, b: f64, meters_per_pixel: f64) -> [f64; 3] {
        let mut c = [0.5; 3];
        for w in &self.waves {
            let f = w.freq[0].hypot(w.freq[1]);
            let q = f * meters_per_pixel / 0.2;
            let fade = (-q * q).exp();
            if fade < 1e-4 {
                continue;
            }
            let v = (2.0 * PI * (w.freq[0] * a + w.freq[1] * b) + w.phase).cos() * fade;
            for (ch, amp) in c.iter_mut().zip(w.amplitude) {
                *ch += amp * v;
            }
        }
        c
    }
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Renders the plane as seen by a camera reached by `X' = R X + t` from the
/// first camera: each pixel is pulled back through the inverse plane
/// homography onto the first camera's image of the texture.
pub fn render_frame(
    camera: &CameraModel,
    plane: &Plane,
    texture: &Texture,
    first_to_cam: &RigidTransform,
    width: usize,
    height: usize,
) -> Result<RgbImage> {
    let (n_k, d_k) = plane.transformed(first_to_cam);
    if d_k <= 0.0 {
        return Err(Error::Generation(format!(
            "the camera has reached or crossed the plane (signed distance {d_k})"
        )));
    }
    let h_inv = plane_homography(camera, first_to_cam, plane)
        .try_inverse()
        .ok_or_else(|| Error::Generation("plane homography is singular".into()))?;
    let k_inv = camera.k_inv();
    let (e1, e2) = plane.tangents();
    let mut hits = 0usize;
    let img = RgbImage::from_fn(width as u32, height as u32, |u, v| {
        let x = Vector3::new(u as f64, v as f64, 1.0);
        let ray = k_inv * x;
        let denom = n_k.dot(&ray);
        if denom <= 1e-9 {
            return Rgb(texture.sky.map(to_u8));
        }
        hits += 1;
        let depth = d_k / denom;
        let cos = denom / ray.norm();
        let footprint = depth * ray.norm() / (camera.fx.min(camera.fy) * cos);
        // Homogeneous point in the first image; the sign of its scale cancels.
        let q = k_inv * (h_inv * x);
        let p = q * (plane.distance / plane.normal.dot(&q));
        Rgb(texture.sample(e1.dot(&p), e2.dot(&p), footprint).map(to_u8))
    });
    if hits == 0 {
        return Err(Error::Generation("the plane is behind the camera or out of view".into()));
    }
    Ok(img)
}

/// Frames, absolutes and exact relative targets of one synthetic sequence.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<RgbImage>,
    pub absolutes: Vec<RigidTransform>,
    pub targets: Vec<PoseVector6>,
}

/// Renders `motions.len() + 1` frames. Frame 0 is the first camera; frame k
/// sits at the product of the first k motions.
pub fn generate_synthetic(
    camera: &CameraModel,
    plane: &Plane,
    texture: &Texture,
    motions: &[PoseVector6],
    width: usize,
    height: usize,
) -> Result<SyntheticSequence> {
    camera.validate(width, height)?;
    if motions.is_empty() {
        return Err(Error::InvalidArgument("motion script is empty".into()));
    }
    let rels = motions.iter().map(vec_to_se3).collect::<Result<Vec<_>>>()?;
    let absolutes: Vec<RigidTransform> = accumulate(&rels)?.poses().copied().collect();
    let frames = absolutes
        .iter()
        .enumerate()
        .map(|(k, abs)| {
            render_frame(camera, plane, texture, &invert(abs), width, height)
                .map_err(|e| Error::Generation(format!("frame {k}: {e}")))
        })
        .collect::<Result<_>>()?;
    Ok(SyntheticSequence {
        frames,
        absolutes,
        targets: motions.to_vec(),
    })
}

/// Ranges for randomly scripted ground-vehicle motion.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionProfile {
    /// Forward travel per frame, meters.
    pub speed: (f64, f64),
    /// Peak sideways drift per frame, meters.
    pub lateral: f64,
    /// Yaw per frame, radians (drawn symmetric around zero).
    pub yaw_rate: f64,
    /// Relative frame-to-frame variation of the forward speed.
    pub speed_jitter: f64,
}

impl Default for MotionProfile {
    fn default() -> Self {
        MotionProfile {
            speed: (0.6, 1.4),
            lateral: 0.05,
            yaw_rate: 0.03,
            speed_jitter: 0.1,
        }
    }
}

impl MotionProfile {
    /// A smooth random script: per-sequence base speed and turn rate with
    /// slow sinusoidal variation. Height, pitch and roll stay constant so a
    /// ground plane remains in view.
    pub fn script(&self, steps: usize, rng: &mut impl Rng) -> Vec<PoseVector6> {
        let v = self.speed.0 + (self.speed.1 - self.speed.0) * rng.random::<f64>();
        let yaw = self.yaw_rate * (2.0 * rng.random::<f64>() - 1.0);
        let lat = self.lateral * (2.0 * rng.random::<f64>() - 1.0);
        let (p1, p2) = (rng.random::<f64>() * 2.0 * PI, rng.random::<f64>() * 2.0 * PI);
        (0..steps)
            .map(|k| {
                let s = k as f64 * 0.7;
                PoseVector6::new(
                    lat * (s + p1).sin(),
                    0.0,
                    v * (1.0 + self.speed_jitter * (s * 0.5 + p2).sin()),
                    0.0,
                    yaw * (1.0 + 0.5 * (s * 0.3 + p1).cos()),
                    0.0,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub motion: MotionProfile,
    /// Every motion is the identity (a static camera).
    pub identity: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sequences: 3,
            frames: 101,
            width: 320,
            height: 96,
            seed: 0,
            motion: MotionProfile::default(),
            identity: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.frames < 2 || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "synthetic dataset needs >= 1 sequence, >= 2 frames and a positive resolution (got {} x {} frames at {}x{})",
                self.sequences, self.frames, self.width, self.height
            )));
        }
        let (lo, hi) = self.motion.speed;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("bad speed range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Motion script of sequence `index`.
    pub fn script(&self, index: usize) -> Vec<PoseVector6> {
        if self.identity {
            return vec![PoseVector6::ZERO; self.frames - 1];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64));
        self.motion.script(self.frames - 1, &mut rng)
    }

    pub fn texture(&self, index: usize) -> Texture {
        Texture::new(self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64))
    }

    pub fn generate(&self, index: usize) -> Result<SyntheticSequence> {
        let camera = CameraModel::for_resolution(self.width, self.height);
        generate_synthetic(&camera, &Plane::ground(), &self.texture(index), &self.script(index), self.width, self.height)
            .map_err(|e| Error::Generation(format!("sequence {}: {e}", kitti_sequence_id(index))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub sequences: Vec<String>,
    pub frames: usize,
}

/// Renders every sequence and writes it in KITTI layout under `root`.
pub fn write_synthetic_dataset(root: &Path, cfg: &SynthConfig, workers: usize) -> Result<SynthSummary> {
    cfg.validate()?;
    let ds = KittiDataset::new(root);
    let mut ids = Vec::new();
    for_each_ordered(cfg.sequences, workers, workers * 2, |i| cfg.generate(i), |i, seq| {
        let id = kitti_sequence_id(i);
        for (k, frame) in seq.frames.iter().enumerate() {
            save_png(&ds.frame_path(&id, k), frame)?;
        }
        write_kitti_poses(&ds.poses_path(&id), &seq.absolutes)?;
        ids.push(id);
        Ok(())
    })?;
    Ok(SynthSummary {
        sequences: ids,
        frames: cfg.frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_motion_gives_identical_frames() {
        let cam = CameraModel::for_resolution(64, 24);
        let seq = generate_synthetic(&cam, &Plane::ground(), &Texture::new(3), &[PoseVector6::ZERO; 3], 64, 24).unwrap();
        assert_eq!(seq.frames.len(), 4);
        assert_eq!(seq.targets.len(), 3);
        assert!(seq.frames.iter().all(|f| f == &seq.frames[0]));
        assert!(seq.targets.iter().all(|t| t.norm() == 0.0));
    }

    #[test]
    fn lateral_translation_shifts_fronto_parallel_plane() {
        // fx = 200, tx = 0.1 m, d = 10 m: content moves by fx * 0.01 = 2 px.
        let cam = CameraModel {
            fx: 200.0,
            fy: 200.0,
            cx: 31.5,
            cy: 15.5,
        };
        let plane = Plane::fronto_parallel(10.0).unwrap();
        let motion = PoseVector6::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0);
        let to_cam = invert(&vec_to_se3(&motion).unwrap());
        let h = plane_homography(&cam, &to_cam, &plane);
        let expected = Matrix3::new(1.0, 0.0, -2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((h - expected).abs().max() < 1e-12, "{h}");

        let tex = Texture::with_band(9, 16, 0.5, 2.0);
        let seq = generate_synthetic(&cam, &plane, &tex, &[motion], 64, 32).unwrap();
        for v in 0..32 {
            for u in 0..62 {
                let a = seq.frames[1].get_pixel(u, v).0;
                let b = seq.frames[0].get_pixel(u + 2, v).0;
                for c in 0..3 {
                    assert!((a[c] as i32 - b[c] as i32).abs() <= 1, "pixel ({u},{v})");
                }
            }
        }
    }

    #[test]
    fn plane_behind_camera_is_an_error() {
        let cam = CameraModel::for_resolution(32, 16);
        let behind = Plane::new(Vector3::new(0.0, 0.0, -1.0), 5.0).unwrap();
        let r = generate_synthetic(&cam, &behind, &Texture::new(1), &[PoseVector6::ZERO], 32, 16);
        assert!(matches!(r, Err(Error::Generation(_))));
        // Driving through a wall.
        let wall = Plane::fronto_parallel(2.0).unwrap();
        let through = [PoseVector6::new(0.0, 0.0, 3.0, 0.0, 0.0, 0.0)];
        assert!(matches!(
            generate_synthetic(&cam, &wall, &Texture::new(1), &through, 32, 16),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn camera_validation() {
        assert!(CameraModel::for_resolution(320, 96).validate(320, 96).is_ok());
        let mut c = CameraModel::for_resolution(320, 96);
        c.cx = 400.0;
        assert!(c.validate(320, 96).is_err());
        c = CameraModel::for_resolution(320, 96);
        c.fx = 0.0;
        assert!(c.validate(320, 96).is_err());
    }

    #[test]
    fn ground_scene_has_sky_and_texture() {
        let cfg = SynthConfig {
            sequences: 1,
            frames: 3,
            width: 64,
            height: 24,
            ..Default::default()
        };
        let seq = cfg.generate(0).unwrap();
        let top = seq.frames[0].get_pixel(5, 0).0;
        assert_eq!(top, Texture::new(0).sky.map(to_u8));
        let bottom: Vec<_> = (0..64).map(|u| seq.frames[0].get_pixel(u, 23).0[0]).collect();
        assert!(bottom.iter().max() > bottom.iter().min());
        assert_eq!(cfg.generate(0).unwrap().frames, seq.frames);
    }
}
