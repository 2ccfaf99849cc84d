//! ConvNet-D: `depth` blocks of conv → instance norm → ReLU → average pool,
//! flattened into a linear classification head.
//!
//! The embedding used for distribution matching is the flattened output of the
//! last pooling layer; the logits add the head on top of it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{read_file, Decoder, Encoder};
use crate::rng::{fnv1a, Stream};
use crate::tensor::kernels::pooled_len;
use crate::tensor::{Tape, Tensor, Var};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"TGDDSNAP";
pub const SNAPSHOT_VERSION: u32 = 1;
pub const DEFAULT_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvNetConfig {
    pub depth: usize,
    pub width: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl ConvNetConfig {
    pub fn new(depth: usize, num_classes: usize, input_channels: usize, input_hw: (usize, usize)) -> Self {
        ConvNetConfig {
            depth,
            width: DEFAULT_WIDTH,
            num_classes,
            input_channels,
            input_height: input_hw.0,
            input_width: input_hw.1,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 || self.input_channels < 1 {
            return Err(Error::Config(format!(
                "depth, width and input channels must be positive: {self:?}"
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.input_height < 1 || self.input_width < 1 {
            return Err(Error::Shape(format!(
                "spatial collapse: input {}x{} cannot be pooled",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    /// Spatial size after all pooling stages.
    pub fn feature_hw(&self) -> (usize, usize) {
        (0..self.depth).fold((self.input_height, self.input_width), |(h, w), _| {
            (pooled_len(h), pooled_len(w))
        })
    }

    pub fn embedding_dim(&self) -> usize {
        let (h, w) = self.feature_hw();
        self.width * h * w
    }

    /// Parameter names and shapes in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::with_capacity(4 * self.depth + 2);
        let mut cin = self.input_channels;
        for i in 0..self.depth {
            specs.push((format!("conv{i}.weight"), vec![self.width, cin, 3, 3]));
            specs.push((format!("conv{i}.bias"), vec![self.width]));
            specs.push((format!("norm{i}.scale"), vec![self.width]));
            specs.push((format!("norm{i}.shift"), vec![self.width]));
            cin = self.width;
        }
        specs.push(("head.weight".into(), vec![self.num_classes, self.embedding_dim()]));
        specs.push(("head.bias".into(), vec![self.num_classes]));
        specs
    }

    pub fn canonical(&self) -> String {
        format!(
            "depth={};width={};num_classes={};input_channels={};input_height={};input_width={}",
            self.depth, self.width, self.num_classes, self.input_channels, self.input_height, self.input_width
        )
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.input_channels, self.input_height, self.input_width]
    }
}

/// Full parameter set of a ConvNet at one epoch of training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    config: ConvNetConfig,
    pub epoch_index: u32,
    params: Vec<Tensor>,
}

impl ModelSnapshot {
    /// Random initialization: He-normal weights (`std = sqrt(2 / fan_in)`),
    /// zero biases, unit norm scales and zero norm shifts.
    pub fn build(config: ConvNetConfig, stream: &mut Stream) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| std * stream.normal()).collect()
                } else if name.ends_with(".scale") {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelSnapshot {
            config,
            epoch_index: 0,
            params,
        })
    }

    /// Assembles a snapshot from explicit tensors, checked against `config`.
    pub fn from_params(config: ConvNetConfig, epoch_index: u32, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", specs.len(), params.len())));
        }
        for ((name, shape), t) in specs.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(ModelSnapshot {
            config,
            epoch_index,
            params,
        })
    }

    pub fn config(&self) -> &ConvNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        let idx = self.config.param_specs().iter().position(|(n, _)| n == name)?;
        Some(&self.params[idx])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.config.param_specs().iter().position(|(n, _)| n == name)?;
        Some(&mut self.params[idx])
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_specs().into_iter().map(|(n, _)| n).collect()
    }

    /// Hash over every parameter bit; changes if any weight changes.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in &self.params {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    /// Records the parameters on `tape`, as gradient-receiving leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        BoundModel {
            config: self.config,
            vars,
        }
    }

    /// Embedding of `batch` without recording gradients.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let e = m.embed(&mut tape, x)?;
        Ok(tape.value(e).clone())
    }

    /// Logits of `batch` without recording gradients.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let l = m.logits(&mut tape, x)?;
        Ok(tape.value(l).clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut enc = Encoder::new();
        enc.bytes(SNAPSHOT_MAGIC);
        enc.u32(SNAPSHOT_VERSION);
        for v in [c.depth, c.width, c.num_classes, c.input_channels, c.input_height, c.input_width] {
            enc.u32(v as u32);
        }
        enc.u32(self.epoch_index);
        enc.u32(self.params.len() as u32);
        for ((name, _), t) in c.param_specs().iter().zip(&self.params) {
            enc.u16(name.len() as u16);
            enc.bytes(name.as_bytes());
            enc.u8(t.shape().len() as u8);
            for &d in t.shape() {
                enc.u32(d as u32);
            }
            enc.f64s(t.data());
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes, "snapshot");
        dec.magic(SNAPSHOT_MAGIC)?;
        dec.version(SNAPSHOT_VERSION)?;
        let mut f = [0usize; 6];
        for v in f.iter_mut() {
            *v = dec.u32()? as usize;
        }
        let config = ConvNetConfig {
            depth: f[0],
            width: f[1],
            num_classes: f[2],
            input_channels: f[3],
            input_height: f[4],
            input_width: f[5],
        };
        config.validate().map_err(|e| Error::Format(format!("snapshot header: {e}")))?;
        let epoch_index = dec.u32()?;
        let count = dec.u32()? as usize;
        let specs = config.param_specs();
        if count != specs.len() {
            return Err(Error::Format(format!(
                "snapshot holds {count} tensors, header config implies {}",
                specs.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for (name, shape) in &specs {
            let len = dec.u16()? as usize;
            let got = dec.take(len)?;
            if got != name.as_bytes() {
                return Err(Error::Format(format!(
                    "expected tensor `{name}`, found `{}`",
                    String::from_utf8_lossy(got)
                )));
            }
            let ndim = dec.u8()? as usize;
            let dims = (0..ndim).map(|_| dec.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::Format(format!("tensor `{name}` has dims {dims:?}, expected {shape:?}")));
            }
            let data = dec.f64s(shape.iter().product())?;
            params.push(Tensor::new(dims, data)?);
        }
        dec.finish()?;
        Ok(ModelSnapshot {
            config,
            epoch_index,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// A snapshot's parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    config: ConvNetConfig,
    vars: Vec<Var>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Post-ReLU activations, one per block.
    pub activations: Vec<Var>,
    pub embedding: Var,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ConvNetConfig {
        &self.config
    }

    pub fn trace(&self, tape: &mut Tape, batch: Var) -> Result<ForwardTrace> {
        let c = &self.config;
        let s = tape.shape(batch);
        if s.len() != 4 || s[1..] != c.input_shape(1)[1..] {
            return Err(Error::Shape(format!(
                "batch {s:?} does not match model input {:?}",
                &c.input_shape(1)[1..]
            )));
        }
        let mut x = batch;
        let mut activations = Vec::with_capacity(c.depth);
        for block in self.vars[..4 * c.depth].chunks_exact(4) {
            x = tape.conv2d(x, block[0], block[1])?;
            x = tape.instance_norm(x, block[2], block[3])?;
            x = tape.relu(x)?;
            activations.push(x);
            x = tape.avgpool2d(x)?;
        }
        let embedding = tape.flatten(x)?;
        Ok(ForwardTrace { activations, embedding })
    }

    pub fn embed(&self, tape: &mut Tape, batch: Var) -> Result<Var> {
        Ok(self.trace(tape, batch)?.embedding)
    }

    pub fn head(&self, tape: &mut Tape, embedding: Var) -> Result<Var> {
        let n = self.vars.len();
        tape.linear(embedding, self.vars[n - 2], self.vars[n - 1])
    }

    pub fn logits(&self, tape: &mut Tape, batch: Var) -> Result<Var> {
        let e = self.embed(tape, batch)?;
        self.head(tape, e)
    }

    /// Gradients of the bound parameters after a backward pass, in storage order.
    pub fn take_grads(&self, tape: &mut Tape) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| tape.take_grad(v)).collect()
    }
}
