use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::activation::Activation;
use crate::ops::pool::pooled_size;
use crate::tensor::Dims;

/// How the shared convolution is parametrized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// One dense `f×f×a×b` kernel.
    Classical,
    /// Depthwise `a×b` (groups = f) then pointwise `1×1`.
    Grouped,
}

impl std::str::FromStr for ConvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classical" => Ok(ConvMode::Classical),
            "grouped" => Ok(ConvMode::Grouped),
            _ => Err(Error::Config(format!("unknown conv mode {s:?} (classical, grouped)"))),
        }
    }
}

/// Per-iteration spatial reduction factors: 1 keeps the resolution, 2
/// applies a 2×2 max pool at the end of that iteration.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct DownsampleSchedule {
    factors: Vec<u8>,
}

impl DownsampleSchedule {
    pub fn new(factors: Vec<u8>) -> Result<Self> {
        if let Some(bad) = factors.iter().find(|&&f| f != 1 && f != 2) {
            return Err(Error::Config(format!(
                "downsampling factor {bad} not in {{1, 2}}"
            )));
        }
        Ok(DownsampleSchedule { factors })
    }

    /// No downsampling at any of the `t` iterations.
    pub fn identity(iterations: usize) -> Self {
        DownsampleSchedule {
            factors: vec![1; iterations],
        }
    }

    /// Pools exactly after the listed (0-based) iterations.
    pub fn from_positions(iterations: usize, positions: &[usize]) -> Result<Self> {
        let mut factors = vec![1; iterations];
        for &p in positions {
            if p >= iterations {
                return Err(Error::Config(format!(
                    "pool position {p} outside 0..{iterations}"
                )));
            }
            if factors[p] == 2 {
                return Err(Error::Config(format!("pool position {p} listed twice")));
            }
            factors[p] = 2;
        }
        Ok(DownsampleSchedule { factors })
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn factors(&self) -> &[u8] {
        &self.factors
    }

    pub fn fires(&self, t: usize) -> bool {
        self.factors[t] == 2
    }

    pub fn pool_count(&self) -> usize {
        self.factors.iter().filter(|&&f| f == 2).count()
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&t| self.fires(t)).collect()
    }

    /// Resolution of `x_t` for `t = 0..=T`, starting at `(h, w)`.
    pub fn resolutions(&self, (h, w): (usize, usize)) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len() + 1);
        let (mut h, mut w) = (h, w);
        out.push((h, w));
        for t in 0..self.len() {
            if self.fires(t) {
                h = pooled_size(h);
                w = pooled_size(w);
            }
            out.push((h, w));
        }
        out
    }

    /// Checks that the overall reduction fits an `h×w` input.
    pub fn check_fits(&self, (h, w): (usize, usize)) -> Result<()> {
        let pools = self.pool_count();
        let reduction = 1usize.checked_shl(pools as u32).unwrap_or(usize::MAX);
        if pools >= usize::BITS as usize || reduction > h.min(w) {
            return Err(Error::Schedule(format!(
                "{pools} pools reduce by {reduction}, more than the {h}×{w} input allows"
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<u8>> for DownsampleSchedule {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        DownsampleSchedule::new(v)
    }
}

impl From<DownsampleSchedule> for Vec<u8> {
    fn from(s: DownsampleSchedule) -> Vec<u8> {
        s.factors
    }
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThriftyConfig {
    pub filters: usize,
    /// Kernel (height, width); both odd.
    pub kernel: (usize, usize),
    pub iterations: usize,
    /// Number of past activations beyond the current one in the residual
    /// sum. Zero selects the plain recursion.
    pub history: usize,
    pub schedule: DownsampleSchedule,
    pub conv_mode: ConvMode,
    pub activation: Activation,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl ThriftyConfig {
    /// 3×3 classical ReLU network on 3-channel input with no pooling.
    pub fn new(filters: usize, iterations: usize, history: usize, num_classes: usize) -> Self {
        ThriftyConfig {
            filters,
            kernel: (3, 3),
            iterations,
            history,
            schedule: DownsampleSchedule::identity(iterations),
            conv_mode: ConvMode::Classical,
            activation: Activation::Relu,
            num_classes,
            input_channels: 3,
        }
    }

    pub fn with_schedule(mut self, schedule: DownsampleSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn is_residual(&self) -> bool {
        self.history > 0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.filters == 0 {
            return fail("filters must be positive".into());
        }
        let (a, b) = self.kernel;
        if a == 0 || b == 0 || a % 2 == 0 || b % 2 == 0 {
            return fail(format!("kernel {a}×{b} must have odd positive sides"));
        }
        if self.iterations == 0 {
            return fail("iterations must be positive".into());
        }
        if self.schedule.len() != self.iterations {
            return fail(format!(
                "schedule has {} entries for {} iterations",
                self.schedule.len(),
                self.iterations
            ));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.input_channels == 0 || self.input_channels > self.filters {
            return fail(format!(
                "{} input channels cannot be embedded in {} filters",
                self.input_channels, self.filters
            ));
        }
        Ok(())
    }

    /// Validates the configuration against a concrete input batch.
    pub fn validate_input(&self, dims: Dims) -> Result<()> {
        self.validate()?;
        if dims.c != self.input_channels {
            return Err(Error::Config(format!(
                "input has {} channels, model expects {}",
                dims.c, self.input_channels
            )));
        }
        self.schedule.check_fits((dims.h, dims.w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values_restricted() {
        assert!(DownsampleSchedule::new(vec![1, 2, 1]).is_ok());
        assert!(DownsampleSchedule::new(vec![1, 3]).is_err());
        assert!(DownsampleSchedule::from_positions(3, &[3]).is_err());
    }

    #[test]
    fn resolutions_ceil_halve() {
        let s = DownsampleSchedule::new(vec![2, 1, 2, 2]).unwrap();
        assert_eq!(
            s.resolutions((5, 8)),
            vec![(5, 8), (3, 4), (3, 4), (2, 2), (1, 1)]
        );
        assert!(s.check_fits((8, 8)).is_ok());
        assert!(s.check_fits((7, 8)).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ThriftyConfig::new(4, 3, 0, 10);
        assert!(c.validate().is_ok());
        c.input_channels = 5;
        assert!(c.validate().is_err());
        let mut c = ThriftyConfig::new(4, 3, 0, 10);
        c.kernel = (2, 3);
        assert!(c.validate().is_err());
        let c = ThriftyConfig::new(4, 3, 0, 10).with_schedule(DownsampleSchedule::identity(2));
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedule_serializes_as_list() {
        let c = ThriftyConfig::new(4, 2, 1, 3).with_schedule(DownsampleSchedule::new(vec![2, 1]).unwrap());
        let text = toml::to_string(&c).unwrap();
        assert!(text.contains("schedule = [2, 1]"), "{text}");
        let back: ThriftyConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
