//! Binary checkpoint format, little-endian throughout.
//!
//! ```text
//! magic        8 bytes  "THRIFTY1"
//! filters      u32
//! kernel_h     u32
//! kernel_w     u32
//! iterations   u32      (T)
//! history      u32      (h)
//! conv_mode    u8       0 = classical, 1 = grouped
//! activation   u8       0 = relu, 1 = tanh
//! num_classes  u32
//! input_ch     u32
//! schedule     u32 length (= T), then T × u8 factors
//! width        u8       bytes per scalar (4 or 8)
//! tensors      each as u64 element count + elements, in this order:
//!              conv weights (classical: W; grouped: depthwise, pointwise)
//!              for t in 0..T: gamma, beta, running_mean, running_var,
//!                             then momentum f64, epsilon f64
//!              alpha (T × (h+1), row-major; residual models only)
//!              fc weights (f × K, row-major), fc bias (K)
//! optional     "OPTSTATE" section, see `TrainingState`
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::{ConvMode, DownsampleSchedule, ThriftyConfig};
use crate::model::params::{AlphaMatrix, ConvWeights, Params};
use crate::ops::activation::Activation;
use crate::ops::batchnorm::BatchNormState;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

pub const MAGIC: &[u8; 8] = b"THRIFTY1";
pub const OPT_MAGIC: &[u8; 8] = b"OPTSTATE";

/// Optimizer and loop state needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState<S> {
    /// Momentum buffers in trainable enumeration order.
    pub velocity: Vec<Vec<S>>,
    pub epochs_done: u64,
    pub steps: u64,
    pub lambda: f64,
    pub best_test_acc: f64,
    pub alpha_frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: ThriftyConfig,
    pub params: Params<S>,
    pub training: Option<TrainingState<S>>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor<S: Scalar>(&mut self, values: &[S]) {
        self.u64(values.len() as u64);
        for &v in values {
            v.write_le(&mut self.buf);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor<S: Scalar>(&mut self, expected: usize, what: &str) -> Result<Vec<S>> {
        let n = self.u64()?;
        if n != expected as u64 {
            return Err(Error::Checkpoint(format!(
                "{what}: {n} elements stored, config implies {expected}"
            )));
        }
        let w = S::WIDTH as usize;
        let raw = self.take(expected * w)?;
        Ok(raw.chunks_exact(w).map(S::read_le).collect())
    }
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn encode<S: Scalar>(ckpt: &Checkpoint<S>) -> Result<Vec<u8>> {
    let c = &ckpt.config;
    c.validate()?;
    ckpt.params.check(c)?;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(c.filters)?;
    w.u32(c.kernel.0)?;
    w.u32(c.kernel.1)?;
    w.u32(c.iterations)?;
    w.u32(c.history)?;
    w.u8(match c.conv_mode {
        ConvMode::Classical => 0,
        ConvMode::Grouped => 1,
    });
    w.u8(match c.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    w.u32(c.num_classes)?;
    w.u32(c.input_channels)?;
    w.u32(c.schedule.len())?;
    w.buf.extend_from_slice(c.schedule.factors());
    w.u8(S::WIDTH);

    let p = &ckpt.params;
    match &p.conv {
        ConvWeights::Classical(k) => w.tensor(k.data()),
        ConvWeights::Grouped {
            depthwise,
            pointwise,
        } => {
            w.tensor(depthwise.data());
            w.tensor(pointwise.data());
        }
    }
    for s in &p.bn {
        w.tensor(&s.gamma);
        w.tensor(&s.beta);
        w.tensor(&s.running_mean);
        w.tensor(&s.running_var);
        w.f64(s.momentum);
        w.f64(s.epsilon);
    }
    if let Some(al) = &p.alpha {
        w.tensor(al.values());
    }
    w.tensor(p.fc_weight.data());
    w.tensor(p.fc_bias.data());

    if let Some(t) = &ckpt.training {
        w.buf.extend_from_slice(OPT_MAGIC);
        w.u32(t.velocity.len())?;
        for v in &t.velocity {
            w.tensor(v);
        }
        w.u64(t.epochs_done);
        w.u64(t.steps);
        w.f64(t.lambda);
        w.f64(t.best_test_acc);
        w.u8(t.alpha_frozen as u8);
    }
    Ok(w.buf)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic, not a THRIFTY1 checkpoint".into()));
    }
    let filters = r.u32()?;
    let kernel = (r.u32()?, r.u32()?);
    let iterations = r.u32()?;
    let history = r.u32()?;
    let conv_mode = match r.u8()? {
        0 => ConvMode::Classical,
        1 => ConvMode::Grouped,
        v => return Err(Error::Checkpoint(format!("unknown conv mode tag {v}"))),
    };
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        v => return Err(Error::Checkpoint(format!("unknown activation tag {v}"))),
    };
    let num_classes = r.u32()?;
    let input_channels = r.u32()?;
    let sched_len = r.u32()?;
    let schedule = DownsampleSchedule::new(r.take(sched_len)?.to_vec())
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let config = ThriftyConfig {
        filters,
        kernel,
        iterations,
        history,
        schedule,
        conv_mode,
        activation,
        num_classes,
        input_channels,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;
    let width = r.u8()?;
    if width != S::WIDTH {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {width}-byte scalars, loader expects {}",
            S::WIDTH
        )));
    }

    let f = filters;
    let (a, b) = kernel;
    let tensor = |r: &mut Reader, dims: Dims, what: &str| -> Result<Tensor4<S>> {
        Tensor4::from_vec(dims, r.tensor(dims.len(), what)?)
    };
    let conv = match conv_mode {
        ConvMode::Classical => ConvWeights::Classical(tensor(&mut r, Dims::new(f, f, a, b), "conv")?),
        ConvMode::Grouped => ConvWeights::Grouped {
            depthwise: tensor(&mut r, Dims::new(f, 1, a, b), "depthwise")?,
            pointwise: tensor(&mut r, Dims::new(f, f, 1, 1), "pointwise")?,
        },
    };
    let mut bn = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        bn.push(BatchNormState {
            gamma: r.tensor(f, "gamma")?,
            beta: r.tensor(f, "beta")?,
            running_mean: r.tensor(f, "running_mean")?,
            running_var: r.tensor(f, "running_var")?,
            momentum: r.f64()?,
            epsilon: r.f64()?,
        });
    }
    let alpha = if config.is_residual() {
        let values = r.tensor(iterations * (history + 1), "alpha")?;
        Some(AlphaMatrix::from_values(iterations, history, values)?)
    } else {
        None
    };
    let fc_weight = tensor(&mut r, Dims::new(1, 1, f, num_classes), "fc weights")?;
    let fc_bias = tensor(&mut r, Dims::new(1, 1, 1, num_classes), "fc bias")?;
    let params = Params {
        conv,
        bn,
        alpha,
        fc_weight,
        fc_bias,
    };

    let training = if r.done() {
        None
    } else {
        if r.take(8)? != OPT_MAGIC {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        let n = r.u32()?;
        let expected: Vec<usize> = params.trainables().iter().map(|(_, v)| v.len()).collect();
        if n != expected.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {n} buffers, model has {} trainables",
                expected.len()
            )));
        }
        let velocity = expected
            .iter()
            .map(|&len| r.tensor(len, "velocity"))
            .collect::<Result<Vec<_>>>()?;
        Some(TrainingState {
            velocity,
            epochs_done: r.u64()?,
            steps: r.u64()?,
            lambda: r.f64()?,
            best_test_acc: r.f64()?,
            alpha_frozen: r.u8()? != 0,
        })
    };
    if !r.done() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        params,
        training,
    })
}

pub fn save<S: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<S>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ckpt)?;
    // write-then-rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
