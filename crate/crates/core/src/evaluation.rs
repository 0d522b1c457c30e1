//! KITTI odometry metrics: subsequence translation and rotation errors by
//! path length and by speed, plus trajectory export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::{for_each_ordered, FrameSource, KittiDataset};
use crate::error::{Error, Result};
use crate::geometry::{accumulate, invert, se3_to_vec, vec_to_se3, PoseVector6, RigidTransform, Trajectory};
use crate::network::PoseNet;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsConfig {
    /// Subsequence path lengths in meters.
    pub lengths: Vec<f64>,
    /// Frames between consecutive subsequence start frames.
    pub start_stride: usize,
    /// Frames per second, for converting inter-frame distance to speed.
    pub frame_rate: f64,
    pub speed_bins: usize,
    /// Frames per window for the speed-binned errors.
    pub speed_window: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            lengths: (1..=8).map(|k| k as f64 * 100.0).collect(),
            start_stride: 10,
            frame_rate: 10.0,
            speed_bins: 7,
            speed_window: 10,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("subsequence lengths must be positive, got {:?}", self.lengths)));
        }
        if self.start_stride == 0 || self.speed_bins == 0 || self.speed_window == 0 {
            return Err(Error::Config("start stride, speed bins and speed window must be positive".into()));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Config(format!("frame rate must be positive, got {}", self.frame_rate)));
        }
        Ok(())
    }
}

/// Error of one compared segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentError {
    pub start: usize,
    pub end: usize,
    /// Nominal length for subsequences, travelled distance for windows.
    pub length: f64,
    /// Translation error per meter (a ratio; x100 for percent).
    pub translation: f64,
    /// Rotation error in radians per meter.
    pub rotation: f64,
    /// Mean ground-truth speed over the segment in m/s.
    pub speed: f64,
}

/// Cumulative ground-truth path length at every frame.
pub fn path_distances(gt: &Trajectory) -> Vec<f64> {
    let mut d = Vec::with_capacity(gt.len());
    let mut acc = 0.0;
    for i in 0..gt.len() {
        if i > 0 {
            acc += (gt.pose(i).translation() - gt.pose(i - 1).translation()).norm();
        }
        d.push(acc);
    }
    d
}

fn check_pair(gt: &Trajectory, est: &Trajectory) -> Result<()> {
    if gt.len() != est.len() {
        return Err(Error::InvalidArgument(format!(
            "ground truth has {} frames but the estimate has {}",
            gt.len(),
            est.len()
        )));
    }
    Ok(())
}

fn segment(gt: &Trajectory, est: &Trajectory, i: usize, j: usize, length: f64, seconds: f64) -> SegmentError {
    let rel_gt = invert(gt.pose(i)).compose(gt.pose(j));
    let rel_est = invert(est.pose(i)).compose(est.pose(j));
    let e = invert(&rel_gt).compose(&rel_est);
    SegmentError {
        start: i,
        end: j,
        length,
        translation: e.translation().norm() / length,
        rotation: e.rotation_angle() / length,
        speed: length / seconds,
    }
}

/// Every `(start, length)` subsequence error, starts stepped by the start
/// stride. A subsequence ends at the first frame whose travelled distance
/// from the start reaches the length; starts without such a frame are
/// skipped.
pub fn subsequence_segments(gt: &Trajectory, est: &Trajectory, cfg: &MetricsConfig) -> Result<Vec<SegmentError>> {
    cfg.validate()?;
    check_pair(gt, est)?;
    let dist = path_distances(gt);
    let mut out = Vec::new();
    for i in (0..gt.len()).step_by(cfg.start_stride) {
        for &len in &cfg.lengths {
            let Some(j) = (i + 1..gt.len()).find(|&j| dist[j] - dist[i] >= len) else {
                continue;
            };
            let mut s = segment(gt, est, i, j, len, (j - i) as f64 / cfg.frame_rate);
            s.speed = (dist[j] - dist[i]) * cfg.frame_rate / (j - i) as f64;
            out.push(s);
        }
    }
    Ok(out)
}

/// Fixed-length windows starting at every frame, for the speed table.
/// Windows without motion are skipped.
pub fn speed_windows(gt: &Trajectory, est: &Trajectory, cfg: &MetricsConfig) -> Result<Vec<SegmentError>> {
    cfg.validate()?;
    check_pair(gt, est)?;
    let dist = path_distances(gt);
    let w = cfg.speed_window;
    Ok((0..gt.len().saturating_sub(w))
        .filter_map(|i| {
            let travelled = dist[i + w] - dist[i];
            (travelled > 1e-9).then(|| segment(gt, est, i, i + w, travelled, w as f64 / cfg.frame_rate))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthRow {
    pub length: f64,
    /// Mean translation error in percent; `None` when no subsequence of this
    /// length exists.
    pub translation_pct: Option<f64>,
    /// Mean rotation error in degrees per meter.
    pub rotation_deg_per_m: Option<f64>,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedRow {
    pub bin: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// `None` for an empty bin.
    pub translation_pct: Option<f64>,
    pub rotation_deg_per_m: Option<f64>,
    pub windows: usize,
}

fn mean_errors(segs: &[&SegmentError]) -> (Option<f64>, Option<f64>) {
    if segs.is_empty() {
        return (None, None);
    }
    let n = segs.len() as f64;
    let t = segs.iter().map(|s| s.translation).sum::<f64>() / n;
    let r = segs.iter().map(|s| s.rotation).sum::<f64>() / n;
    (Some(t * 100.0), Some(r.to_degrees()))
}

/// Per-length averages over pooled subsequence errors.
pub fn length_table(segments: &[SegmentError], lengths: &[f64]) -> Vec<LengthRow> {
    lengths
        .iter()
        .map(|&len| {
            let matching: Vec<&SegmentError> = segments.iter().filter(|s| s.length == len).collect();
            let (t, r) = mean_errors(&matching);
            LengthRow {
                length: len,
                translation_pct: t,
                rotation_deg_per_m: r,
                segments: matching.len(),
            }
        })
        .collect()
}

/// Per-speed averages: the observed speed range is cut into `bins`
/// equal-width bins and each window is averaged into the bin of its speed.
pub fn speed_table(windows: &[SegmentError], bins: usize) -> Vec<SpeedRow> {
    if windows.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = windows.iter().map(|w| w.speed).fold(f64::INFINITY, f64::min);
    let hi = windows.iter().map(|w| w.speed).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let bin_of = |s: f64| {
        if width > 0.0 {
            (((s - lo) / width) as usize).min(bins - 1)
        } else {
            0
        }
    };
    (0..bins)
        .map(|b| {
            let members: Vec<&SegmentError> = windows.iter().filter(|w| bin_of(w.speed) == b).collect();
            let (t, r) = mean_errors(&members);
            SpeedRow {
                bin: b,
                speed_min: lo + width * b as f64,
                speed_max: lo + width * (b + 1) as f64,
                translation_pct: t,
                rotation_deg_per_m: r,
                windows: members.len(),
            }
        })
        .collect()
}

/// Averaged subsequence errors for each configured length.
pub fn subsequence_errors(gt: &Trajectory, est: &Trajectory, cfg: &MetricsConfig) -> Result<Vec<LengthRow>> {
    Ok(length_table(&subsequence_segments(gt, est, cfg)?, &cfg.lengths))
}

/// Windowed errors averaged per speed bin.
pub fn speed_binned_errors(gt: &Trajectory, est: &Trajectory, cfg: &MetricsConfig) -> Result<Vec<SpeedRow>> {
    Ok(speed_table(&speed_windows(gt, est, cfg)?, cfg.speed_bins))
}

/// One line per pose: `frame_index x y z`, positions in meters with nine
/// significant digits.
pub fn format_trajectory(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (i, p) in traj.iter() {
        let t = p.translation();
        writeln!(out, "{i} {:.8e} {:.8e} {:.8e}", t.x, t.y, t.z).expect("writing to a String");
    }
    out
}

pub fn export_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, format_trajectory(traj)).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`export_trajectory`].
pub fn parse_trajectory(text: &str) -> Result<Vec<(usize, [f64; 3])>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |message: String| Error::Parse { line: n + 1, message };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            let idx = f[0].parse().map_err(|_| bad(format!("bad frame index {:?}", f[0])))?;
            let mut xyz = [0.0; 3];
            for (k, v) in xyz.iter_mut().enumerate() {
                *v = f[k + 1].parse().map_err(|_| bad(format!("bad coordinate {:?}", f[k + 1])))?;
            }
            Ok((idx, xyz))
        })
        .collect()
}

/// Produces the relative motion between every pair of consecutive frames
/// of a sequence.
pub trait PosePredictor: Sync {
    fn predict_sequence(&self, sequence: &str, frame_count: usize, frames: &dyn FrameSource) -> Result<Vec<PoseVector6>>;
}

/// Replays the ground truth; an oracle for checking the pipeline.
pub struct GroundTruthPredictor {
    poses: BTreeMap<String, Vec<RigidTransform>>,
}

impl GroundTruthPredictor {
    pub fn new(poses: BTreeMap<String, Vec<RigidTransform>>) -> Self {
        GroundTruthPredictor { poses }
    }
}

impl PosePredictor for GroundTruthPredictor {
    fn predict_sequence(&self, sequence: &str, frame_count: usize, _: &dyn FrameSource) -> Result<Vec<PoseVector6>> {
        let gt = self
            .poses
            .get(sequence)
            .ok_or_else(|| Error::Data(format!("sequence {sequence}: no ground truth to replay")))?;
        if gt.len() != frame_count {
            return Err(Error::Data(format!(
                "sequence {sequence}: {} poses for {frame_count} frames",
                gt.len()
            )));
        }
        gt.windows(2).map(|w| se3_to_vec(&invert(&w[0]).compose(&w[1]))).collect()
    }
}

/// Runs a network over whole sequences at stride 1 with dropout disabled.
/// Hidden states start at zero and are carried across the sequence, or
/// reset every `window` pairs when a window is set.
pub struct ModelPredictor<'m> {
    model: &'m PoseNet<f32>,
    window: Option<usize>,
}

impl<'m> ModelPredictor<'m> {
    pub fn new(model: &'m PoseNet<f32>, window: Option<usize>) -> Self {
        ModelPredictor {
            model,
            window: window.filter(|&w| w > 0),
        }
    }
}

impl PosePredictor for ModelPredictor<'_> {
    fn predict_sequence(&self, sequence: &str, frame_count: usize, frames: &dyn FrameSource) -> Result<Vec<PoseVector6>> {
        let mut out = Vec::with_capacity(frame_count.saturating_sub(1));
        let mut states = self.model.initial_states();
        let mut prev = frames.frame(sequence, 0)?;
        for k in 1..frame_count {
            if self.window.is_some_and(|w| (k - 1) % w == 0) {
                states = self.model.initial_states();
            }
            let next = frames.frame(sequence, k)?;
            let (v, s) = self.model.predict_step(&prev, &next, &states)?;
            out.push(PoseVector6::from_array(v));
            states = s;
            prev = next;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub id: String,
    pub frames: usize,
    /// Accumulated estimate, starting at the identity.
    pub trajectory: Trajectory,
    /// `None` when the sequence has no ground truth.
    pub translation_pct: Option<f64>,
    pub rotation_deg_per_m: Option<f64>,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub lengths: Vec<LengthRow>,
    pub speeds: Vec<SpeedRow>,
    pub sequences: Vec<SequenceReport>,
    /// Mean over every subsequence of every sequence with ground truth.
    pub translation_pct: Option<f64>,
    pub rotation_deg_per_m: Option<f64>,
    /// Sequences whose metrics were not computed for lack of ground truth.
    pub missing_ground_truth: Vec<String>,
}

impl EvalReport {
    pub fn lengths_csv(&self) -> String {
        let mut s = String::from("length_m,translation_error_pct,rotation_error_deg_per_m,segments\n");
        for r in &self.lengths {
            writeln!(s, "{},{},{},{}", r.length, opt(r.translation_pct), opt(r.rotation_deg_per_m), r.segments).unwrap();
        }
        s
    }

    pub fn speeds_csv(&self) -> String {
        let mut s = String::from("bin,speed_min_mps,speed_max_mps,translation_error_pct,rotation_error_deg_per_m,windows\n");
        for r in &self.speeds {
            writeln!(
                s,
                "{},{:.6},{:.6},{},{},{}",
                r.bin,
                r.speed_min,
                r.speed_max,
                opt(r.translation_pct),
                opt(r.rotation_deg_per_m),
                r.windows
            )
            .unwrap();
        }
        s
    }

    pub fn sequences_csv(&self) -> String {
        let mut s = String::from("sequence,frames,translation_error_pct,rotation_error_deg_per_m,segments\n");
        for r in &self.sequences {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.id,
                r.frames,
                opt(r.translation_pct),
                opt(r.rotation_deg_per_m),
                r.segments
            )
            .unwrap();
        }
        s
    }

    /// Writes `trajectories/<id>.txt` for every sequence and, unless ground
    /// truth was missing, `lengths.csv`, `speeds.csv` and `sequences.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for seq in &self.sequences {
            export_trajectory(&seq.trajectory, &dir.join("trajectories").join(format!("{}.txt", seq.id)))?;
        }
        if !self.missing_ground_truth.is_empty() {
            return Ok(());
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("lengths.csv", self.lengths_csv()),
            ("speeds.csv", self.speeds_csv()),
            ("sequences.csv", self.sequences_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8e}")).unwrap_or_default()
}

/// Predicts every listed sequence, accumulates the predictions into
/// trajectories and scores them against ground truth where it exists.
/// Sequences are processed on `workers` threads and merged in list order.
pub fn evaluate_model(
    predictor: &dyn PosePredictor,
    dataset: &KittiDataset,
    frames: &dyn FrameSource,
    sequences: &[String],
    cfg: &MetricsConfig,
    workers: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    struct Scored {
        report: SequenceReport,
        segments: Vec<SegmentError>,
        windows: Vec<SegmentError>,
        has_gt: bool,
    }
    let score = |k: usize| -> Result<Scored> {
        let id = &sequences[k];
        let frame_count = dataset.frame_count(id)?;
        if frame_count < 2 {
            return Err(Error::Data(format!("sequence {id}: needs at least two frames")));
        }
        let gt = if dataset.has_poses(id) { Some(dataset.poses(id)?) } else { None };
        if let Some(g) = &gt {
            if g.len() != frame_count {
                return Err(Error::Data(format!(
                    "sequence {id}: {} poses for {frame_count} frames",
                    g.len()
                )));
            }
        }
        let rel = predictor.predict_sequence(id, frame_count, frames)?;
        if rel.len() != frame_count - 1 {
            return Err(Error::contract(format!(
                "sequence {id}: predictor returned {} motions for {frame_count} frames",
                rel.len()
            )));
        }
        let rel = rel.iter().map(vec_to_se3).collect::<Result<Vec<_>>>()?;
        let est = accumulate(&rel)?;
        let mut report = SequenceReport {
            id: id.clone(),
            frames: frame_count,
            trajectory: est.clone(),
            translation_pct: None,
            rotation_deg_per_m: None,
            segments: 0,
        };
        let Some(gt) = gt else {
            return Ok(Scored {
                report,
                segments: Vec::new(),
                windows: Vec::new(),
                has_gt: false,
            });
        };
        let gt = Trajectory::from_absolutes(gt).rebased();
        let segments = subsequence_segments(&gt, &est, cfg)?;
        let windows = speed_windows(&gt, &est, cfg)?;
        let (t, r) = mean_errors(&segments.iter().collect::<Vec<_>>());
        report.translation_pct = t;
        report.rotation_deg_per_m = r;
        report.segments = segments.len();
        Ok(Scored {
            report,
            segments,
            windows,
            has_gt: true,
        })
    };

    let mut sequences_out = Vec::new();
    let mut all_segments = Vec::new();
    let mut all_windows = Vec::new();
    let mut missing = Vec::new();
    for_each_ordered(sequences.len(), workers, workers.max(1), score, |_, s| {
        if !s.has_gt {
            missing.push(s.report.id.clone());
        }
        all_segments.extend(s.segments);
        all_windows.extend(s.windows);
        sequences_out.push(s.report);
        Ok(())
    })?;
    let (t, r) = mean_errors(&all_segments.iter().collect::<Vec<_>>());
    Ok(EvalReport {
        lengths: length_table(&all_segments, &cfg.lengths),
        speeds: speed_table(&all_windows, cfg.speed_bins),
        sequences: sequences_out,
        translation_pct: t,
        rotation_deg_per_m: r,
        missing_ground_truth: missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn straight(n: usize, step: f64) -> Trajectory {
        Trajectory::from_absolutes((0..n).map(|i| RigidTransform::from_translation(Vector3::new(0.0, 0.0, step * i as f64))).collect())
    }

    fn from_motion(n: usize, m: PoseVector6) -> Trajectory {
        accumulate(&vec![vec_to_se3(&m).unwrap(); n - 1]).unwrap()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = from_motion(900, PoseVector6::new(0.02, 0.0, 1.0, 0.0, 0.003, 0.0));
        let cfg = MetricsConfig::default();
        for row in subsequence_errors(&gt, &gt, &cfg).unwrap() {
            assert!(row.segments > 0);
            assert!(row.translation_pct.unwrap() < 1e-9 && row.rotation_deg_per_m.unwrap() < 1e-9);
        }
        for row in speed_binned_errors(&gt, &gt, &cfg).unwrap() {
            assert!(row.translation_pct.is_none_or(|t| t < 1e-9));
        }
    }

    #[test]
    fn scaled_estimate_gives_five_percent() {
        let gt = straight(1000, 1.0);
        let est = straight(1000, 1.05);
        let rows = subsequence_errors(&gt, &est, &MetricsConfig::default()).unwrap();
        assert_eq!(rows.len(), 8);
        for r in rows {
            assert!((r.translation_pct.unwrap() - 5.0).abs() < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn yaw_drift_rotation_rate() {
        let gt = straight(1000, 1.0);
        let est = from_motion(1000, PoseVector6::new(0.0, 0.0, 1.0, 0.0, 0.001, 0.0));
        let expected = 0.001f64.to_degrees();
        for r in subsequence_errors(&gt, &est, &MetricsConfig::default()).unwrap() {
            let got = r.rotation_deg_per_m.unwrap();
            assert!((got - expected).abs() / expected < 0.02, "{r:?}");
        }
    }

    #[test]
    fn short_trajectory_leaves_rows_empty() {
        let gt = straight(50, 1.0);
        let rows = subsequence_errors(&gt, &gt, &MetricsConfig::default()).unwrap();
        assert!(rows.iter().all(|r| r.segments == 0 && r.translation_pct.is_none()));
    }

    #[test]
    fn constant_speed_fills_one_bin() {
        let gt = straight(300, 1.0);
        let rows = speed_binned_errors(&gt, &gt, &MetricsConfig::default()).unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows.iter().filter(|r| r.windows > 0).count(), 1);
    }

    #[test]
    fn two_speed_bins_match_closed_form() {
        // 0.5 m/frame then 1.5 m/frame at 10 Hz: 5 and 15 m/s. The estimate
        // overshoots by 2% in the slow half and 4% in the fast half.
        let mut gt_rel = Vec::new();
        let mut est_rel = Vec::new();
        for k in 0..400 {
            let (step, bias) = if k < 200 { (0.5, 1.02) } else { (1.5, 1.04) };
            gt_rel.push(RigidTransform::from_translation(Vector3::new(0.0, 0.0, step)));
            est_rel.push(RigidTransform::from_translation(Vector3::new(0.0, 0.0, step * bias)));
        }
        let gt = accumulate(&gt_rel).unwrap();
        let est = accumulate(&est_rel).unwrap();
        let rows = speed_binned_errors(&gt, &est, &MetricsConfig::default()).unwrap();
        assert!((rows[0].speed_min - 5.0).abs() < 1e-9 && (rows[6].speed_max - 15.0).abs() < 1e-9);
        assert!((rows[0].translation_pct.unwrap() - 2.0).abs() / 2.0 < 0.02);
        assert!((rows[6].translation_pct.unwrap() - 4.0).abs() / 4.0 < 0.02);
    }

    #[test]
    fn trajectory_export_round_trip() {
        let t = from_motion(25, PoseVector6::new(0.3, -0.01, 1.2, 0.001, 0.02, 0.0));
        let text = format_trajectory(&t);
        assert_eq!(text.lines().count(), 25);
        let back = parse_trajectory(&text).unwrap();
        for ((i, xyz), (j, p)) in back.iter().zip(t.iter()) {
            assert_eq!(i, j);
            for (a, b) in xyz.iter().zip(p.translation().iter()) {
                assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
            }
        }
        let identity = straight(3, 0.0);
        assert!(parse_trajectory(&format_trajectory(&identity)).unwrap().iter().all(|(_, p)| *p == [0.0; 3]));
    }

    proptest! {
        #[test]
        fn common_left_transform_leaves_errors_unchanged(
            tx in -5.0..5.0f64, tz in -5.0..5.0f64, yaw in -1.0..1.0f64, roll in -0.3..0.3f64,
        ) {
            let cfg = MetricsConfig { lengths: vec![5.0, 10.0], start_stride: 3, ..Default::default() };
            let gt = from_motion(40, PoseVector6::new(0.05, 0.0, 0.8, 0.0, 0.01, 0.0));
            let est = from_motion(40, PoseVector6::new(0.0, 0.01, 0.85, 0.002, 0.0, 0.001));
            let g = vec_to_se3(&PoseVector6::new(tx, 1.0, tz, roll, yaw, 0.2)).unwrap();
            let moved = |t: &Trajectory| Trajectory::from_absolutes(t.poses().map(|p| g.compose(p)).collect());
            let a = subsequence_errors(&gt, &est, &cfg).unwrap();
            let b = subsequence_errors(&moved(&gt), &moved(&est), &cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.translation_pct.unwrap() - y.translation_pct.unwrap()).abs() < 1e-6);
                prop_assert!((x.rotation_deg_per_m.unwrap() - y.rotation_deg_per_m.unwrap()).abs() < 1e-6);
            }
        }
    }
}
