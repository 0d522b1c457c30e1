use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use egomotion::dataset::{
    build_split, sample_sequences, save_png, tensor_to_rgb, write_synthetic_dataset, CachedFrames, DiskFrames,
    FrameSource, KittiDataset, LoadedSample,
};
use egomotion::evaluation::{evaluate_model, EvalReport, GroundTruthPredictor, ModelPredictor};
use egomotion::network::PoseNet;
use egomotion::training::{evaluate_loss, prepare_model, RunDir, TrainingRun};
use egomotion::{Error, Result};

use crate::config::RunConfig;

/// Options shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub force: bool,
    pub workers: usize,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).is_ok_and(|mut d| d.next().is_some())
}

/// Creates an output directory, clearing it first under `--force` and
/// refusing a non-empty one otherwise.
fn fresh_output(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir) {
        if !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let p = dir.join("resolved.cfg");
    fs::write(&p, cfg.resolved()).map_err(|e| io(&p, e))
}

fn dataset(ctx: &Context) -> Result<KittiDataset> {
    let root = ctx.config.path(&ctx.run_dir, "data.root");
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", root.display())));
    }
    Ok(KittiDataset::new(root))
}

fn frame_source(ctx: &Context, ds: &KittiDataset, width: usize, height: usize) -> Result<Box<dyn FrameSource>> {
    let disk = DiskFrames::new(ds.clone(), width, height);
    Ok(if ctx.config.flag("data.cache")? {
        Box::new(CachedFrames::new(disk))
    } else {
        Box::new(disk)
    })
}

pub fn synth(ctx: &Context) -> Result<String> {
    let cfg = ctx.config.synth()?;
    let root = ctx.config.path(&ctx.run_dir, "data.root");
    fresh_output(&root, ctx.force)?;
    let summary = write_synthetic_dataset(&root, &cfg, ctx.workers)?;
    write_resolved(&root, &ctx.config)?;
    Ok(format!(
        "wrote {} sequences of {} frames ({} frames total) to {}",
        summary.sequences.len(),
        summary.frames,
        summary.sequences.len() * summary.frames,
        root.display()
    ))
}

pub fn train(ctx: &Context, resume: bool) -> Result<String> {
    let cfg = ctx.config.train(&ctx.run_dir, ctx.workers)?;
    let model_cfg = ctx.config.model()?;
    let ds = dataset(ctx)?;
    let available = ds.sequence_ids()?;
    let mut spec = ctx.config.split(&available)?;
    spec.test.clear();
    let gt = ds.ground_truth(&spec.train)?;
    let split = build_split(&gt, &spec, &ctx.config.sampling()?)?;
    for s in &split.skipped {
        eprintln!("skipped sequence {s}: too short for one clip");
    }
    if split.train.is_empty() && !split.validation.is_empty() {
        return Err(Error::Config(format!(
            "all {} clips are held out for validation; lower data.validation_pairs (currently {})",
            split.validation.len(),
            spec.validation_pairs
        )));
    }
    if split.train.is_empty() {
        return Err(Error::Data("no training samples; sequences are too short for the clip length".into()));
    }
    let enc = &model_cfg.encoder;
    let frames = frame_source(ctx, &ds, enc.width, enc.height)?;

    let out = ctx.config.path(&ctx.run_dir, "train.out");
    let dir = RunDir::new(&out);
    let mut run = if resume {
        TrainingRun::resume(dir, cfg.clone())?
    } else {
        fresh_output(&out, ctx.force)?;
        TrainingRun::start(dir, cfg.clone(), prepare_model(&cfg, &model_cfg)?)?
    };
    write_resolved(&out, &ctx.config)?;
    let (train_pairs, val_pairs, _) = split.pair_counts();
    eprintln!(
        "{}: {} clips ({train_pairs} pairs) for training, {} clips ({val_pairs} pairs) for validation",
        cfg.phase.as_str(),
        split.train.len(),
        split.validation.len()
    );
    let validate = ctx.config.flag("train.validate")? && !split.validation.is_empty();
    let beta = cfg.loss.beta;
    let stats = run.run(&split.train, frames.as_ref(), |s, model| {
        let mut line = format!(
            "epoch {} lr {:e} loss {:.6} steps {} ({:.1}s)",
            s.epoch, s.lr, s.mean_loss, s.steps, s.wall_s
        );
        if validate {
            write!(line, " validation {:.6}", evaluate_loss(model, &split.validation, frames.as_ref(), beta)?)
                .expect("writing to a String");
        }
        eprintln!("{line}");
        Ok(())
    })?;
    Ok(match stats.last() {
        Some(s) => format!(
            "trained through epoch {} ({} optimizer steps); final loss {:.6}; outputs in {}",
            s.epoch,
            run.optimizer().steps(),
            s.mean_loss,
            out.display()
        ),
        None => format!("nothing to do: training in {} is already complete", out.display()),
    })
}

fn checkpoint_path(ctx: &Context) -> Result<PathBuf> {
    match ctx.config.get("eval.checkpoint") {
        "latest" => {
            let dir = RunDir::new(ctx.config.path(&ctx.run_dir, "train.out"));
            let epoch = dir
                .latest_epoch()?
                .ok_or_else(|| Error::Checkpoint(format!("no checkpoint in {}", dir.checkpoint_dir().display())))?;
            Ok(dir.checkpoint_path(epoch))
        }
        p => Ok(ctx.run_dir.join(p)),
    }
}

pub fn eval(ctx: &Context) -> Result<String> {
    let metrics = ctx.config.metrics()?;
    let ds = dataset(ctx)?;
    let sequences = ctx.config.sequences("eval.sequences", &ds.sequence_ids()?)?;
    let window = ctx.config.optional::<usize>("eval.window")?;
    let out = ctx.config.path(&ctx.run_dir, "eval.out");
    let report = match ctx.config.get("eval.mode") {
        "model" => {
            let model = PoseNet::<f32>::load(&checkpoint_path(ctx)?)?;
            let enc = &model.config().encoder;
            let frames = frame_source(ctx, &ds, enc.width, enc.height)?;
            fresh_output(&out, ctx.force)?;
            let predictor = ModelPredictor::new(&model, window);
            evaluate_model(&predictor, &ds, frames.as_ref(), &sequences, &metrics, ctx.workers)?
        }
        "ground-truth" => {
            let predictor = GroundTruthPredictor::new(ds.ground_truth(&sequences)?);
            let frames = DiskFrames::new(ds.clone(), 1, 1);
            fresh_output(&out, ctx.force)?;
            evaluate_model(&predictor, &ds, &frames, &sequences, &metrics, ctx.workers)?
        }
        m => return Err(Error::Config(format!("eval.mode: expected model or ground-truth, got {m:?}"))),
    };
    report.write(&out)?;
    write_resolved(&out, &ctx.config)?;
    if !report.missing_ground_truth.is_empty() {
        let named: Vec<String> = report
            .missing_ground_truth
            .iter()
            .map(|s| format!("{s} ({})", ds.poses_path(s).display()))
            .collect();
        return Err(Error::Data(format!(
            "no ground-truth poses for sequence {}; trajectories written to {}, metrics skipped",
            named.join(", "),
            out.display()
        )));
    }
    Ok(summarize(&report, &out))
}

fn summarize(report: &EvalReport, out: &Path) -> String {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let mut s = String::new();
    for seq in &report.sequences {
        writeln!(
            s,
            "sequence {}: {} frames, translation {}%, rotation {} deg/m",
            seq.id,
            seq.frames,
            fmt(seq.translation_pct),
            fmt(seq.rotation_deg_per_m)
        )
        .expect("writing to a String");
    }
    write!(
        s,
        "overall: translation {}%, rotation {} deg/m; report in {}",
        fmt(report.translation_pct),
        fmt(report.rotation_deg_per_m),
        out.display()
    )
    .expect("writing to a String");
    s
}

/// Augmentation consistency threshold between stored targets and targets
/// recomputed from the ground-truth trajectory.
const PREVIEW_TOLERANCE: f64 = 1e-9;

pub fn augment_preview(ctx: &Context) -> Result<String> {
    let c = &ctx.config;
    let ds = dataset(ctx)?;
    let sequences = c.sequences("preview.sequences", &ds.sequence_ids()?)?;
    let gt = ds.ground_truth(&sequences)?;
    let set = sample_sequences(&gt, &sequences, &c.sampling()?)?;
    if set.samples.is_empty() {
        return Err(Error::Data("no samples to preview; sequences are too short for the clip length".into()));
    }
    let count: usize = c.parse("preview.count")?;
    let (hp, tp): (f64, f64) = (c.parse("preview.hflip_prob")?, c.parse("preview.tflip_prob")?);
    for (k, p) in [("preview.hflip_prob", hp), ("preview.tflip_prob", tp)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{k} must lie in [0, 1], got {p}")));
        }
    }
    let enc = c.model()?.encoder;
    let frames = frame_source(ctx, &ds, enc.width, enc.height)?;
    let out = c.path(&ctx.run_dir, "preview.out");
    fresh_output(&out, ctx.force)?;

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed()?);
    let mut order: Vec<usize> = (0..set.samples.len()).collect();
    order.shuffle(&mut rng);
    let mut index = String::from("sample,sequence,frames,stride,mirrored,time_reversed\n");
    for (n, &i) in order.iter().take(count).enumerate() {
        let mut clip = LoadedSample::load(&set.samples[i], frames.as_ref())?;
        if rng.random::<f64>() < hp {
            clip = clip.horizontal_flip()?;
        }
        if rng.random::<f64>() < tp {
            clip = clip.temporal_flip()?;
        }
        let s = &clip.sample;
        let gap = s.target_discrepancy(&gt[&s.sequence])?;
        if gap.is_nan() || gap > PREVIEW_TOLERANCE {
            return Err(Error::Contract(format!(
                "augmented targets of sample {n} drift {gap:e} from the trajectory"
            )));
        }
        let dir = out.join(format!("sample_{n:03}"));
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        for (k, f) in clip.frames.iter().enumerate() {
            save_png(&dir.join(format!("frame_{k}.png")), &tensor_to_rgb(f)?)?;
        }
        let targets: String = s
            .targets
            .iter()
            .map(|p| {
                let v = p.to_array().map(|x| format!("{x:.12e}"));
                v.join(" ") + "\n"
            })
            .collect();
        let tp = dir.join("targets.txt");
        fs::write(&tp, targets).map_err(|e| io(&tp, e))?;
        let frame_list: Vec<String> = s.frames.iter().map(usize::to_string).collect();
        writeln!(
            index,
            "{n},{},{},{},{},{}",
            s.sequence,
            frame_list.join(" "),
            s.stride,
            s.mirrored,
            s.time_reversed
        )
        .expect("writing to a String");
    }
    let ip = out.join("samples.csv");
    fs::write(&ip, index).map_err(|e| io(&ip, e))?;
    write_resolved(&out, c)?;
    Ok(format!(
        "wrote {} of {} samples to {}",
        count.min(set.samples.len()),
        set.samples.len(),
        out.display()
    ))
}
