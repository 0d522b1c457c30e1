use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ModelKind, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Convolution kernel size shared by every ConvGRU gate.
pub const GATE_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

/// Gate weights of one ConvGRU cell. Hidden-to-gate convolutions carry no
/// bias; the bias is attached to the input-to-gate convolution.
#[derive(Debug, Clone, Copy)]
pub struct GruCellParams {
    pub w_hz: ParamId,
    pub w_xz: ParamId,
    pub b_z: ParamId,
    pub w_hr: ParamId,
    pub w_xr: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub w_x: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

/// Tape handles for a ConvGRU cell's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GruCellVars {
    pub w_hz: Var,
    pub w_xz: Var,
    pub b_z: Var,
    pub w_hr: Var,
    pub w_xr: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub w_x: Var,
    pub b: Var,
}

impl GruCellParams {
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<'_, S>) -> GruCellVars {
        GruCellVars {
            w_hz: tape.param(self.w_hz),
            w_xz: tape.param(self.w_xz),
            b_z: tape.param(self.b_z),
            w_hr: tape.param(self.w_hr),
            w_xr: tape.param(self.w_xr),
            b_r: tape.param(self.b_r),
            w_h: tape.param(self.w_h),
            w_x: tape.param(self.w_x),
            b: tape.param(self.b),
        }
    }
}

/// One ConvGRU update:
///
/// ```text
/// z  = sigmoid(W_hz * h + W_xz * x + b_z)
/// r  = sigmoid(W_hr * h + W_xr * x + b_r)
/// h~ = tanh(W_h * (r . h) + W_x * x + b)
/// h' = (1 - z) . h + z . h~
/// ```
///
/// where `*` is a 3x3 stride-1 convolution with padding 1 and `.` is the
/// Hadamard product.
pub fn gru_step<S: Scalar>(tape: &mut Tape<'_, S>, cell: &GruCellVars, x: Var, h_prev: Var) -> Result<Var> {
    let (xs, hs) = (tape.value(x).shape(), tape.value(h_prev).shape());
    if xs.len() != hs.len() || xs[xs.len() - 2..] != hs[hs.len() - 2..] {
        return Err(Error::shape(format!(
            "gru_step: input {xs:?} and hidden state {hs:?} have different spatial extents"
        )));
    }
    let pad = GATE_KERNEL / 2;
    let conv = |tape: &mut Tape<'_, S>, w: Var, b: Option<Var>, v: Var| tape.conv2d(v, w, b, 1, pad);

    let zh = conv(tape, cell.w_hz, None, h_prev)?;
    let zx = conv(tape, cell.w_xz, Some(cell.b_z), x)?;
    let z_pre = tape.add(zh, zx)?;
    let z = tape.sigmoid(z_pre);

    let rh = conv(tape, cell.w_hr, None, h_prev)?;
    let rx = conv(tape, cell.w_xr, Some(cell.b_r), x)?;
    let r_pre = tape.add(rh, rx)?;
    let r = tape.sigmoid(r_pre);

    let rh_prev = tape.mul(r, h_prev)?;
    let ch = conv(tape, cell.w_h, None, rh_prev)?;
    let cx = conv(tape, cell.w_x, Some(cell.b), x)?;
    let c_pre = tape.add(ch, cx)?;
    let candidate = tape.tanh(c_pre);

    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, h_prev)?;
    let fresh = tape.mul(z, candidate)?;
    tape.add(kept, fresh)
}

/// Samples a Glorot/Xavier-uniform tensor in `+/- sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<S: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches count")
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [out, inp] => (inp, out),
        [out, inp, k1, k2] => (inp * k1 * k2, out * k1 * k2),
        _ => (shape[0], shape[0]),
    }
}

/// How a forward pass treats dropout.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

/// The pose network: encoder, optional ConvGRU stack, regression head.
#[derive(Debug, Clone)]
pub struct PoseNet<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    encoder: Vec<ConvParams>,
    cells: Vec<GruCellParams>,
    head: HeadParams,
    head_input: usize,
}

/// Parameter handles bound to one tape. Every time step of a sequence reuses
/// these, so the encoder is weight-shared by construction.
pub struct BoundModel {
    encoder: Vec<(Var, Var, usize, usize)>,
    cells: Vec<GruCellVars>,
    head: (Var, Var, Var, Var),
}

impl<S: Scalar> PoseNet<S> {
    /// Builds the parameter set with zero values; call
    /// [`init_weights`](Self::init_weights) before training.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.encoder.layer_shapes()?;
        let mut params = ParamStore::new();
        let mut encoder = Vec::new();
        let mut in_ch = INPUT_CHANNELS;
        for (i, layer) in config.encoder.layers.iter().enumerate() {
            let out = config.encoder.channels(i);
            let k = layer.kernel;
            let weight = params.insert(format!("encoder.{}.weight", layer.name), Tensor::zeros(&[out, in_ch, k, k]))?;
            let bias = params.insert(format!("encoder.{}.bias", layer.name), Tensor::zeros(&[out]))?;
            encoder.push(ConvParams {
                weight,
                bias,
                stride: layer.stride,
                padding: layer.padding(),
            });
            in_ch = out;
        }
        let [c, h, w] = shapes.last().expect("pooled shape").1;
        let mut cells = Vec::new();
        if config.kind == ModelKind::Recurrent {
            for i in 0..config.gru_cells {
                let gate = |name: &str, params: &mut ParamStore<S>| {
                    params.insert(format!("gru.{i}.{name}"), Tensor::zeros(&[c, c, GATE_KERNEL, GATE_KERNEL]))
                };
                let w_hz = gate("w_hz", &mut params)?;
                let w_xz = gate("w_xz", &mut params)?;
                let w_hr = gate("w_hr", &mut params)?;
                let w_xr = gate("w_xr", &mut params)?;
                let w_h = gate("w_h", &mut params)?;
                let w_x = gate("w_x", &mut params)?;
                let b_z = params.insert(format!("gru.{i}.b_z"), Tensor::zeros(&[c]))?;
                let b_r = params.insert(format!("gru.{i}.b_r"), Tensor::zeros(&[c]))?;
                let b = params.insert(format!("gru.{i}.b"), Tensor::zeros(&[c]))?;
                cells.push(GruCellParams {
                    w_hz,
                    w_xz,
                    b_z,
                    w_hr,
                    w_xr,
                    b_r,
                    w_h,
                    w_x,
                    b,
                });
            }
        }
        let head_input = c * h * w;
        let hidden = config.head_hidden;
        let head = HeadParams {
            fc1_weight: params.insert("head.fc1.weight", Tensor::zeros(&[hidden, head_input]))?,
            fc1_bias: params.insert("head.fc1.bias", Tensor::zeros(&[hidden]))?,
            fc2_weight: params.insert("head.fc2.weight", Tensor::zeros(&[6, hidden]))?,
            fc2_bias: params.insert("head.fc2.bias", Tensor::zeros(&[6]))?,
        };
        Ok(PoseNet {
            config,
            params,
            encoder,
            cells,
            head,
            head_input,
        })
    }

    /// Builds and Xavier-initializes a model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        net.init_weights(seed);
        Ok(net)
    }

    /// Xavier-uniform weights, zero biases; deterministic per seed.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.init_param(id, &mut rng);
        }
    }

    fn init_param(&mut self, id: ParamId, rng: &mut ChaCha8Rng) {
        let shape = self.params.get(id).shape().to_vec();
        let t = if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let (fi, fo) = fans(&shape);
            xavier_uniform(&shape, fi, fo, rng)
        };
        *self.params.get_mut(id) = t;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cells(&self) -> &[GruCellParams] {
        &self.cells
    }

    pub fn head_params(&self) -> &HeadParams {
        &self.head
    }

    pub fn encoder_params(&self) -> &[ConvParams] {
        &self.encoder
    }

    /// Whether a parameter belongs to the shared encoder.
    pub fn is_encoder_param(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("encoder.")
    }

    /// Shape of the pooled encoder output (also every hidden state's shape).
    pub fn feature_shape(&self) -> [usize; 3] {
        self.config.encoder.output_shape().expect("validated at construction")
    }

    /// Registers every parameter on the tape once.
    pub fn bind(&self, tape: &mut Tape<'_, S>) -> BoundModel {
        let encoder = self
            .encoder
            .iter()
            .map(|p| (tape.param(p.weight), tape.param(p.bias), p.stride, p.padding))
            .collect();
        let cells = self.cells.iter().map(|c| c.bind(tape)).collect();
        let head = (
            tape.param(self.head.fc1_weight),
            tape.param(self.head.fc1_bias),
            tape.param(self.head.fc2_weight),
            tape.param(self.head.fc2_bias),
        );
        BoundModel { encoder, cells, head }
    }

    /// Stacks two 3xHxW frames into six channels and runs the encoder:
    /// every convolution is followed by relu, then 2x2 max pooling.
    pub fn encode_pair(&self, tape: &mut Tape<'_, S>, bound: &BoundModel, frame_a: Var, frame_b: Var) -> Result<Var> {
        let (w, h) = (self.config.encoder.width, self.config.encoder.height);
        for f in [frame_a, frame_b] {
            if tape.value(f).shape() != [3, h, w] {
                return Err(Error::shape(format!(
                    "encode_pair: expected frames of shape [3, {h}, {w}], got {:?}",
                    tape.value(f).shape()
                )));
            }
        }
        let mut x = tape.concat_channels(frame_a, frame_b)?;
        for &(weight, bias, stride, padding) in &bound.encoder {
            let y = tape.conv2d(x, weight, Some(bias), stride, padding)?;
            x = tape.relu(y);
        }
        tape.max_pool2_ceil(x)
    }

    /// flatten -> linear(hidden) -> relu -> dropout -> linear(6).
    pub fn head(&self, tape: &mut Tape<'_, S>, bound: &BoundModel, features: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let (w1, b1, w2, b2) = bound.head;
        let flat = tape.reshape(features, &[self.head_input])?;
        let hidden = tape.linear(flat, w1, b1)?;
        let mut hidden = tape.relu(hidden);
        if let Mode::Train(rng) = mode {
            if self.config.dropout > 0.0 {
                hidden = tape.dropout(hidden, self.config.dropout, &mut **rng)?;
            }
        }
        tape.linear(hidden, w2, b2)
    }

    /// Runs a clip of `T + 1` frames and returns `T` six-vectors. Hidden
    /// states start at zero and are carried across the clip's time steps.
    pub fn forward_sequence(&self, tape: &mut Tape<'_, S>, frames: &[Var], mode: &mut Mode<'_>) -> Result<Vec<Var>> {
        if frames.len() < 2 {
            return Err(Error::contract(format!(
                "forward_sequence needs at least two frames, got {}",
                frames.len()
            )));
        }
        let bound = self.bind(tape);
        let [c, h, w] = self.feature_shape();
        let mut states: Vec<Var> = (0..bound.cells.len())
            .map(|_| tape.constant(Tensor::zeros(&[c, h, w])))
            .collect();
        let mut outputs = Vec::with_capacity(frames.len() - 1);
        for pair in frames.windows(2) {
            let mut x = self.encode_pair(tape, &bound, pair[0], pair[1])?;
            for (cell, state) in bound.cells.iter().zip(states.iter_mut()) {
                let next = gru_step(tape, cell, x, *state)?;
                *state = next;
                x = next;
            }
            outputs.push(self.head(tape, &bound, x, mode)?);
        }
        Ok(outputs)
    }

    /// Zero hidden states, one per recurrent cell.
    pub fn initial_states(&self) -> Vec<Tensor<S>> {
        vec![Tensor::zeros(&self.feature_shape()); self.cells.len()]
    }

    /// Evaluation-mode step for one frame pair that carries the hidden
    /// states explicitly, so arbitrarily long sequences run in bounded
    /// memory. Chaining steps from [`initial_states`](Self::initial_states)
    /// reproduces [`predict`](Self::predict) exactly.
    pub fn predict_step(&self, frame_a: &Tensor<S>, frame_b: &Tensor<S>, states: &[Tensor<S>]) -> Result<([f64; 6], Vec<Tensor<S>>)> {
        if states.len() != self.cells.len() {
            return Err(Error::contract(format!(
                "{} hidden states for {} recurrent cells",
                states.len(),
                self.cells.len()
            )));
        }
        let mut tape = Tape::new(&self.params);
        let bound = self.bind(&mut tape);
        let a = tape.constant(frame_a.clone());
        let b = tape.constant(frame_b.clone());
        let mut x = self.encode_pair(&mut tape, &bound, a, b)?;
        let mut next = Vec::with_capacity(states.len());
        for (cell, state) in bound.cells.iter().zip(states) {
            let h = tape.constant(state.clone());
            x = gru_step(&mut tape, cell, x, h)?;
            next.push(tape.value(x).clone());
        }
        let out = self.head(&mut tape, &bound, x, &mut Mode::Eval)?;
        let d = tape.value(out).data();
        Ok((std::array::from_fn(|i| d[i].as_f64()), next))
    }

    /// Evaluation-mode prediction of the relative poses of a clip.
    pub fn predict(&self, frames: &[Tensor<S>]) -> Result<Vec<[f64; 6]>> {
        let mut tape = Tape::new(&self.params);
        let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let outs = self.forward_sequence(&mut tape, &vars, &mut Mode::Eval)?;
        Ok(outs
            .iter()
            .map(|&v| {
                let d = tape.value(v).data();
                std::array::from_fn(|i| d[i].as_f64())
            })
            .collect())
    }

    pub fn checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint<S> {
        let mut meta = self.config.to_metadata();
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        Checkpoint::from_store(&self.params, meta)
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        write_checkpoint(path, &self.checkpoint(extra))
    }

    /// Rebuilds a model from a checkpoint's stored architecture and values.
    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        let config = ModelConfig::from_metadata(&ckpt.metadata)?;
        let mut net = Self::zeroed(config)?;
        let mut problems = Vec::new();
        let ids: Vec<ParamId> = net.params.ids().collect();
        for id in ids {
            let name = net.params.name(id).to_string();
            match ckpt.get(&name) {
                Some(t) if t.shape() == net.params.get(id).shape() => *net.params.get_mut(id) = t.clone(),
                Some(t) => problems.push(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    net.params.get(id).shape()
                )),
                None => problems.push(format!("{name}: missing")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }

    /// Starts a recurrent model from a pretrained encoder: encoder tensors are
    /// copied from the checkpoint, everything else is freshly initialized and
    /// the checkpoint's head is discarded.
    pub fn fine_tune_init(config: ModelConfig, pretrained: &Checkpoint<S>, seed: u64) -> Result<Self> {
        let mut net = Self::new(config, seed)?;
        let mut problems = Vec::new();
        let ids: Vec<ParamId> = net.params.ids().filter(|&id| net.is_encoder_param(id)).collect();
        for id in ids {
            let name = net.params.name(id).to_string();
            match pretrained.get(&name) {
                Some(t) if t.shape() == net.params.get(id).shape() => *net.params.get_mut(id) = t.clone(),
                Some(t) => problems.push(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    net.params.get(id).shape()
                )),
                None => problems.push(format!("{name}: missing from checkpoint")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "pretrained encoder does not match: {}",
                problems.join("; ")
            )));
        }
        Ok(net)
    }

    /// Converts all parameters to another precision.
    pub fn cast<T: Scalar>(&self) -> PoseNet<T> {
        PoseNet {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            cells: self.cells.clone(),
            head: self.head,
            head_input: self.head_input,
        }
    }
}
