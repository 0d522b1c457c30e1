//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use egomotion::network::{GruCellParams, Mode, PoseNet};
use egomotion::objective::pair_loss;
use egomotion::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use egomotion::Result;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type BuildFn<'a> = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'a;
type Projected = (f64, u64, Option<Vec<Vec<f64>>>);

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely rather than
/// relatively.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn random_tensor(rng: &mut StdRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = if scale == 0.0 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    };
    Tensor::new(shape, data).unwrap()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    /// Samples dropped because the perturbation crossed a relu or max-pool
    /// branch.
    pub skipped: usize,
    pub failed: usize,
    pub worst: f64,
}

impl FdReport {
    pub fn add(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.failed += other.failed;
        self.worst = self.worst.max(other.worst);
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        self.worst = self.worst.max(e);
        if e.is_nan() || e >= FD_TOLERANCE {
            self.failed += 1;
        }
    }
}

/// Evaluates `build` on `inputs` and reduces its output with a fixed random
/// projection so every output entry contributes to the scalar.
fn projected(
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    projection: &mut Option<Tensor<f64>>,
    proj_seed: u64,
    build: &BuildFn<'_>,
) -> Result<Projected> {
    let mut tape = Tape::new(params);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let proj = projection.get_or_insert_with(|| random_tensor(&mut StdRng::seed_from_u64(proj_seed), &shape, 1.0));
    let p = tape.constant(proj.clone());
    let prod = tape.mul(out, p)?;
    let loss = tape.sum(prod);
    let value = tape.value(loss).data()[0];
    let sig = tape.branch_signature();
    let grads = tape.backward(loss)?;
    let g = vars.iter().map(|v| grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
    Ok((value, sig, Some(g)))
}

/// Central-difference check of the gradient with respect to every input.
/// Inputs with at most `per_input` entries are checked exhaustively, larger
/// ones at `per_input` random positions.
pub fn check_op(
    rng: &mut StdRng,
    inputs: Vec<Tensor<f64>>,
    per_input: usize,
    build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
) -> FdReport {
    let params = ParamStore::new();
    let seed = rng.random();
    let mut proj = None;
    let (_, sig, grads) = projected(&params, &inputs, &mut proj, seed, &build).unwrap();
    let grads = grads.unwrap();
    let mut report = FdReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let positions: Vec<usize> = if input.len() <= per_input {
            (0..input.len()).collect()
        } else {
            (0..per_input).map(|_| rng.random_range(0..input.len())).collect()
        };
        for i in positions {
            let eval = |delta: f64| {
                let mut moved = inputs.clone();
                moved[k].data_mut()[i] += delta;
                let (v, s, _) = projected(&params, &moved, &mut proj.clone(), seed, &build).unwrap();
                (v, s)
            };
            let (up, su) = eval(FD_STEP);
            let (down, sd) = eval(-FD_STEP);
            if su != sig || sd != sig {
                report.skipped += 1;
                continue;
            }
            report.record(grads[k][i], (up - down) / (2.0 * FD_STEP));
        }
    }
    report
}

/// Pair loss of a whole clip, with dropout drawn from a fixed seed so the
/// mask is identical across perturbed evaluations.
pub fn clip_loss(model: &PoseNet<f64>, frames: &[Tensor<f64>], target: &Tensor<f64>, dropout_seed: u64) -> (f64, u64) {
    let mut tape = Tape::new(model.params());
    let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
    let mut rng = StdRng::seed_from_u64(dropout_seed);
    let outs = model.forward_sequence(&mut tape, &vars, &mut Mode::Train(&mut rng)).unwrap();
    let stacked = tape.stack(&outs).unwrap();
    let pred = tape.reshape(stacked, &[1, outs.len(), 6]).unwrap();
    let loss = pair_loss(&mut tape, pred, target, 0.9).unwrap();
    (tape.value(loss).data()[0], tape.branch_signature())
}

/// Finite-difference check of `count` randomly chosen parameter entries of
/// a whole model. Parameters are drawn uniformly by tensor, then by entry,
/// so small tensors such as biases are represented.
pub fn check_model(rng: &mut StdRng, model: &PoseNet<f64>, frames: &[Tensor<f64>], target: &Tensor<f64>, count: usize) -> FdReport {
    let dropout_seed = rng.random();
    let (_, sig) = clip_loss(model, frames, target, dropout_seed);
    let grads = {
        let mut tape = Tape::new(model.params());
        let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let mut drng = StdRng::seed_from_u64(dropout_seed);
        let outs = model.forward_sequence(&mut tape, &vars, &mut Mode::Train(&mut drng)).unwrap();
        let stacked = tape.stack(&outs).unwrap();
        let pred = tape.reshape(stacked, &[1, outs.len(), 6]).unwrap();
        let loss = pair_loss(&mut tape, pred, target, 0.9).unwrap();
        tape.backward(loss).unwrap()
    };
    let ids: Vec<ParamId> = model.params().ids().collect();
    let mut report = FdReport::default();
    let mut probe = model.clone();
    while report.checked < count {
        let id = ids[rng.random_range(0..ids.len())];
        let i = rng.random_range(0..model.params().get(id).len());
        let analytic = grads.param(id).map_or(0.0, |g| g[i]);
        let original = model.params().get(id).data()[i];
        let mut eval = |delta: f64| {
            probe.params_mut().get_mut(id).data_mut()[i] = original + delta;
            clip_loss(&probe, frames, target, dropout_seed)
        };
        let (up, su) = eval(FD_STEP);
        let (down, sd) = eval(-FD_STEP);
        probe.params_mut().get_mut(id).data_mut()[i] = original;
        if su != sig || sd != sig {
            report.skipped += 1;
            if report.skipped > 10 * count {
                break;
            }
            continue;
        }
        report.record(analytic, (up - down) / (2.0 * FD_STEP));
    }
    report
}

/// Direct 3x3, stride 1, zero-padded convolution over a `c x h x w` map.
pub fn conv3x3(x: &[f64], c_in: usize, h: usize, w: usize, weight: &[f64], c_out: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for i in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += weight[((o * c_in + i) * 3 + ky) * 3 + kx] * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

/// Plain-loop ConvGRU update written independently of the tape.
pub fn gru_reference(store: &ParamStore<f64>, cell: &GruCellParams, x: &[f64], h_prev: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let p = |id: ParamId| store.get(id).data();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let n = c * h * w;
    let zh = conv3x3(h_prev, c, h, w, p(cell.w_hz), c, None);
    let zx = conv3x3(x, c, h, w, p(cell.w_xz), c, Some(p(cell.b_z)));
    let rh = conv3x3(h_prev, c, h, w, p(cell.w_hr), c, None);
    let rx = conv3x3(x, c, h, w, p(cell.w_xr), c, Some(p(cell.b_r)));
    let z: Vec<f64> = (0..n).map(|i| sig(zh[i] + zx[i])).collect();
    let r: Vec<f64> = (0..n).map(|i| sig(rh[i] + rx[i])).collect();
    let gated: Vec<f64> = (0..n).map(|i| r[i] * h_prev[i]).collect();
    let ch = conv3x3(&gated, c, h, w, p(cell.w_h), c, None);
    let cx = conv3x3(x, c, h, w, p(cell.w_x), c, Some(p(cell.b)));
    (0..n)
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * (ch[i] + cx[i]).tanh())
        .collect()
}

/// Registers one cell's parameters with entries uniform in `+/- scale`.
pub fn random_cell(store: &mut ParamStore<f64>, rng: &mut StdRng, c: usize, scale: f64, tag: &str) -> GruCellParams {
    let mut add = |name: &str, shape: &[usize]| store.insert(format!("{tag}.{name}"), random_tensor(rng, shape, scale)).unwrap();
    let wshape = [c, c, 3, 3];
    GruCellParams {
        w_hz: add("w_hz", &wshape),
        w_xz: add("w_xz", &wshape),
        b_z: add("b_z", &[c]),
        w_hr: add("w_hr", &wshape),
        w_xr: add("w_xr", &wshape),
        b_r: add("b_r", &[c]),
        w_h: add("w_h", &wshape),
        w_x: add("w_x", &wshape),
        b: add("b", &[c]),
    }
}
