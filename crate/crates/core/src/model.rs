//! MLP encoder `g` and projection head `h`, SGD with momentum, the
//! warmup + cosine learning-rate schedule, and checkpoint files.
//!
//! Layers are affine maps `y = x W + b` with `W` stored `[in, out]`. ReLU is
//! applied between consecutive layers of each stack and to the encoder
//! output before it enters the head; the representation itself is returned
//! before that ReLU.
//!
//! Checkpoint layout (little-endian): magic `"GRCO"`, version `u32 = 1`,
//! tensor count `u32`, then per tensor: name length `u16`, UTF-8 name,
//! `ndim u8`, each dim `u32`, and `f32` data row-major. Optimizer tensors
//! are stored under names starting with `opt.`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::dataio::{RngStreams, StreamPurpose};
use crate::diffgrad::{matmul_raw, Tape, Tensor, Var};
use crate::error::{GrocoError, Result};

const CKPT_MAGIC: &[u8; 4] = b"GRCO";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let (m, k, n) = (x.rows(), self.inputs(), self.outputs());
        let mut out = matmul_raw(x.data(), self.weight.data(), m, k, n);
        for row in out.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Tensor::matrix(m, n, out).expect("shape follows from layer dims")
    }
}

/// Layer widths of both stacks; `encoder[0]` is the input dimension and
/// `projection[0]` must equal the last encoder width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub encoder: Vec<usize>,
    pub projection: Vec<usize>,
}

impl ModelDims {
    /// Two hidden layers of width 128, representation 128, head 64 -> 64.
    pub fn desk(input: usize) -> Self {
        ModelDims {
            encoder: vec![input, 128, 128, 128],
            projection: vec![128, 64, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.len() < 2 {
            return Err(GrocoError::invalid("encoder needs at least one layer"));
        }
        if self.projection.is_empty() {
            return Err(GrocoError::invalid(
                "projection widths must start with the representation width",
            ));
        }
        if self.encoder.iter().chain(&self.projection).any(|&d| d == 0) {
            return Err(GrocoError::invalid(format!("zero dimension in {self:?}")));
        }
        if self.projection[0] != *self.encoder.last().unwrap() {
            return Err(GrocoError::invalid(format!(
                "projection input {} does not match representation width {}",
                self.projection[0],
                self.encoder.last().unwrap()
            )));
        }
        Ok(())
    }

    pub fn input(&self) -> usize {
        self.encoder[0]
    }

    pub fn representation(&self) -> usize {
        *self.encoder.last().unwrap()
    }

    pub fn projection_out(&self) -> usize {
        *self.projection.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Linear>,
    pub projection: Vec<Linear>,
}

/// Parameter leaves and outputs of a forward pass recorded on a tape.
pub struct TapeForward {
    pub params: Vec<Var>,
    pub representation: Var,
    pub projection: Var,
}

fn chain_dims(layers: &[Linear]) -> Vec<usize> {
    let mut dims = vec![layers[0].inputs()];
    dims.extend(layers.iter().map(Linear::outputs));
    dims
}

impl ModelParams {
    /// Xavier-uniform weights `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases. Weights are drawn as `f32` so checkpoints hold them exactly.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = RngStreams::new(seed).stream(StreamPurpose::Init);
        let mut stack = |widths: &[usize]| -> Vec<Linear> {
            widths
                .windows(2)
                .map(|w| {
                    let (fan_in, fan_out) = (w[0], w[1]);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                    let data = (0..fan_in * fan_out)
                        .map(|_| rng.gen_range(-a..=a) as f64)
                        .collect();
                    Linear {
                        weight: Tensor::matrix(fan_in, fan_out, data).unwrap(),
                        bias: Tensor::zeros(&[fan_out]),
                    }
                })
                .collect()
        };
        let encoder = stack(&dims.encoder);
        let projection = stack(&dims.projection);
        Ok(ModelParams {
            encoder,
            projection,
        })
    }

    pub fn from_layers(encoder: Vec<Linear>, projection: Vec<Linear>) -> Result<Self> {
        let p = ModelParams {
            encoder,
            projection,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(GrocoError::invalid("encoder has no layers"));
        }
        for l in self.encoder.iter().chain(&self.projection) {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.outputs()] {
                return Err(GrocoError::invalid(format!(
                    "layer with weight {:?} and bias {:?} is malformed",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        let stacks = self
            .encoder
            .iter()
            .chain(&self.projection)
            .collect::<Vec<_>>();
        for w in stacks.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(GrocoError::invalid(format!(
                    "layer output {} does not feed next input {}",
                    w[0].outputs(),
                    w[1].inputs()
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        let encoder = chain_dims(&self.encoder);
        let projection = if self.projection.is_empty() {
            vec![*encoder.last().unwrap()]
        } else {
            chain_dims(&self.projection)
        };
        ModelDims {
            encoder,
            projection,
        }
    }

    /// Every tensor in a fixed order: encoder (weight, bias)..., then head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.encoder
            .iter()
            .chain(&self.projection)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(&mut self.projection)
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (stack, layers) in [("encoder", &self.encoder), ("projection", &self.projection)] {
            for i in 0..layers.len() {
                names.push(format!("{stack}.{i}.weight"));
                names.push(format!("{stack}.{i}.bias"));
            }
        }
        names
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// `(representation, projection)` for a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (r, p) = self.forward_batch(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        Ok((r.into_data(), p.into_data()))
    }

    /// Row-wise forward pass over an `[m, D_in]` batch.
    pub fn forward_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let d_in = self.encoder[0].inputs();
        if x.shape().len() != 2 || x.shape()[1] != d_in {
            return Err(GrocoError::invalid(format!(
                "input shape {:?} does not match encoder input dimension {d_in}",
                x.shape()
            )));
        }
        let relu = |t: Tensor| {
            let shape = t.shape().to_vec();
            Tensor::new(
                shape,
                t.into_data().into_iter().map(|v| v.max(0.0)).collect(),
            )
            .unwrap()
        };
        let mut h = x.clone();
        for (i, l) in self.encoder.iter().enumerate() {
            h = l.apply(&h);
            if i + 1 < self.encoder.len() {
                h = relu(h);
            }
        }
        let rep = h;
        if self.projection.is_empty() {
            return Ok((rep.clone(), rep));
        }
        let mut z = relu(rep.clone());
        for (i, l) in self.projection.iter().enumerate() {
            z = l.apply(&z);
            if i + 1 < self.projection.len() {
                z = relu(z);
            }
        }
        Ok((rep, z))
    }

    /// Record the forward pass of an `[m, D_in]` input on a tape.
    pub fn record(&self, tape: &mut Tape, x: Var) -> Result<TapeForward> {
        let mut params = Vec::new();
        let mut stack = |tape: &mut Tape, layers: &[Linear], mut h: Var| -> Result<Var> {
            for (i, l) in layers.iter().enumerate() {
                let w = tape.leaf(l.weight.clone());
                let b = tape.leaf(l.bias.clone());
                params.push(w);
                params.push(b);
                let xw = tape.matmul(h, w)?;
                h = tape.add(xw, b)?;
                if i + 1 < layers.len() {
                    h = tape.relu(h)?;
                }
            }
            Ok(h)
        };
        let representation = stack(tape, &self.encoder, x)?;
        let projection = if self.projection.is_empty() {
            representation
        } else {
            let z = tape.relu(representation)?;
            stack(tape, &self.projection, z)?
        };
        Ok(TapeForward {
            params,
            representation,
            projection,
        })
    }
}

/// Momentum buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub step: u64,
    pub momentum: f64,
    pub base_lr: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, momentum: f64, base_lr: f64) -> Self {
        OptimizerState {
            velocity: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            step: 0,
            momentum,
            base_lr,
        }
    }
}

/// `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.velocity.len() != tensors.len() {
        return Err(GrocoError::invalid(format!(
            "{} gradients and {} velocities for {} parameters",
            grads.len(),
            state.velocity.len(),
            tensors.len()
        )));
    }
    for ((p, g), v) in tensors.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(GrocoError::invalid(format!(
                "shape mismatch: parameter {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    for ((p, g), v) in tensors.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = state.momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    state.step += 1;
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay.
pub fn cosine_warmup_lr(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    base_lr: f64,
) -> Result<f64> {
    if step >= total_steps || warmup_steps >= total_steps {
        return Err(GrocoError::invalid(format!(
            "need step {step} < total {total_steps} and warmup {warmup_steps} < total"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * t).cos()))
}

/// Parameters plus optional optimizer state as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let name_len =
        u16::try_from(name.len()).map_err(|_| GrocoError::invalid("tensor name too long"))?;
    buf.extend_from_slice(&name_len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    let ndim =
        u8::try_from(t.shape().len()).map_err(|_| GrocoError::invalid("too many dimensions"))?;
    buf.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| GrocoError::invalid("dimension too large"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Serialise a checkpoint to bytes.
pub fn checkpoint_bytes(
    params: &ModelParams,
    optimizer: Option<&OptimizerState>,
) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, Tensor)> = params
        .tensor_names()
        .into_iter()
        .zip(params.tensors().into_iter().cloned())
        .collect();
    if let Some(opt) = optimizer {
        for (name, v) in params.tensor_names().iter().zip(&opt.velocity) {
            entries.push((format!("opt.velocity.{name}"), v.clone()));
        }
        entries.push(("opt.step".into(), Tensor::scalar(opt.step as f64)));
        entries.push(("opt.momentum".into(), Tensor::scalar(opt.momentum)));
        entries.push(("opt.base_lr".into(), Tensor::scalar(opt.base_lr)));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        write_tensor(&mut buf, name, t)?;
    }
    Ok(buf)
}

pub fn checkpoint_save(
    path: &Path,
    params: &ModelParams,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let bytes = checkpoint_bytes(params, optimizer)?;
    let io = |e| GrocoError::io(path, e);
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.flush().map_err(io)
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| GrocoError::io(path, e))?;
    checkpoint_parse(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(GrocoError::format(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes; nothing is returned unless the whole file is valid.
pub fn checkpoint_parse(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CKPT_MAGIC {
        return Err(GrocoError::format(0, "bad magic, expected \"GRCO\""));
    }
    let version = c.u32("version")?;
    if version != CKPT_VERSION {
        return Err(GrocoError::format(
            4,
            format!("unsupported version {version}"),
        ));
    }
    let count = c.u32("tensor count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let start = c.pos;
        let name_len = u16::from_le_bytes(c.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| GrocoError::format(start as u64 + 2, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = c.take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4, &format!("data of '{name}'"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        entries.push((name, Tensor::new(shape, data)?, start));
    }
    if c.pos != bytes.len() {
        return Err(GrocoError::format(
            c.pos as u64,
            "trailing bytes after last tensor",
        ));
    }
    assemble(entries)
}

fn assemble(entries: Vec<(String, Tensor, usize)>) -> Result<Checkpoint> {
    let lookup = |name: &str| {
        entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| t.clone())
    };
    let mut stacks = [Vec::new(), Vec::new()];
    for (s, stack) in ["encoder", "projection"].iter().enumerate() {
        let mut i = 0;
        while let Some(weight) = lookup(&format!("{stack}.{i}.weight")) {
            let bias = lookup(&format!("{stack}.{i}.bias"))
                .ok_or_else(|| GrocoError::format(0, format!("missing {stack}.{i}.bias")))?;
            stacks[s].push(Linear { weight, bias });
            i += 1;
        }
    }
    let [encoder, projection] = stacks;
    let params = ModelParams::from_layers(encoder, projection)?;
    let optimizer = match lookup("opt.step") {
        None => None,
        Some(step) => {
            let velocity = params
                .tensor_names()
                .iter()
                .zip(params.tensors())
                .map(|(n, p)| {
                    let v = lookup(&format!("opt.velocity.{n}")).ok_or_else(|| {
                        GrocoError::format(0, format!("missing opt.velocity.{n}"))
                    })?;
                    if v.shape() != p.shape() {
                        return Err(GrocoError::invalid(format!(
                            "velocity for {n} has shape {:?}",
                            v.shape()
                        )));
                    }
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?;
            let scalar = |n: &str| {
                lookup(n)
                    .map(|t| t.item())
                    .ok_or_else(|| GrocoError::format(0, format!("missing {n}")))
            };
            Some(OptimizerState {
                velocity,
                step: step.item() as u64,
                momentum: scalar("opt.momentum")?,
                base_lr: scalar("opt.base_lr")?,
            })
        }
    };
    Ok(Checkpoint { params, optimizer })
}
