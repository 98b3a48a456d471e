use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::{ConvMode, ThriftyConfig};
use crate::ops::batchnorm::BatchNormState;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

/// Identifies one trainable tensor. The derived order is the enumeration
/// order used for gradients, optimizer state and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Conv,
    Depthwise,
    Pointwise,
    Gamma(usize),
    Beta(usize),
    Alpha,
    FcWeight,
    FcBias,
}

/// Coarse grouping used in gradient-check reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Conv,
    Gamma,
    Beta,
    Alpha,
    FcWeight,
    FcBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Conv,
        ParamGroup::Gamma,
        ParamGroup::Beta,
        ParamGroup::Alpha,
        ParamGroup::FcWeight,
        ParamGroup::FcBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Conv => "conv",
            ParamGroup::Gamma => "gamma",
            ParamGroup::Beta => "beta",
            ParamGroup::Alpha => "alpha",
            ParamGroup::FcWeight => "fc_w",
            ParamGroup::FcBias => "fc_b",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl ParamId {
    pub fn group(self) -> ParamGroup {
        match self {
            ParamId::Conv | ParamId::Depthwise | ParamId::Pointwise => ParamGroup::Conv,
            ParamId::Gamma(_) => ParamGroup::Gamma,
            ParamId::Beta(_) => ParamGroup::Beta,
            ParamId::Alpha => ParamGroup::Alpha,
            ParamId::FcWeight => ParamGroup::FcWeight,
            ParamId::FcBias => ParamGroup::FcBias,
        }
    }
}

/// Shortcut weights `α[t, i]`, `t ∈ [0, T)`, `i ∈ [0, h]`, row-major.
///
/// Entry `(t, i)` with `i > t` refers to an activation before `x_0` and is
/// masked out of the forward sum.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatrix<S> {
    iterations: usize,
    lags: usize,
    values: Vec<S>,
}

impl<S: Scalar> AlphaMatrix<S> {
    /// `α[t, 0] = 1`, every other lag 0.
    pub fn lag_zero(iterations: usize, history: usize) -> Self {
        let lags = history + 1;
        let mut values = vec![S::zero(); iterations * lags];
        for t in 0..iterations {
            values[t * lags] = S::one();
        }
        AlphaMatrix {
            iterations,
            lags,
            values,
        }
    }

    pub fn from_values(iterations: usize, history: usize, values: Vec<S>) -> Result<Self> {
        if values.len() != iterations * (history + 1) {
            return Err(Error::Config(format!(
                "alpha needs {}×{} values, got {}",
                iterations,
                history + 1,
                values.len()
            )));
        }
        Ok(AlphaMatrix {
            iterations,
            lags: history + 1,
            values,
        })
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn history(&self) -> usize {
        self.lags - 1
    }

    pub fn get(&self, t: usize, lag: usize) -> S {
        self.values[t * self.lags + lag]
    }

    pub fn set(&mut self, t: usize, lag: usize, v: S) {
        self.values[t * self.lags + lag] = v;
    }

    pub fn is_masked(&self, t: usize, lag: usize) -> bool {
        lag > t
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    /// `(t, i, value)` for every entry that takes part in the forward sum.
    pub fn unmasked(&self) -> impl Iterator<Item = (usize, usize, S)> + '_ {
        (0..self.iterations).flat_map(move |t| {
            (0..self.lags)
                .filter(move |&i| !self.is_masked(t, i))
                .map(move |i| (t, i, self.get(t, i)))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConvWeights<S> {
    Classical(Tensor4<S>),
    Grouped {
        depthwise: Tensor4<S>,
        pointwise: Tensor4<S>,
    },
}

/// Every parameter of a model: trainables plus batch-norm running stats.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S> {
    pub conv: ConvWeights<S>,
    /// One state per iteration.
    pub bn: Vec<BatchNormState<S>>,
    /// Present iff the model is residual (history ≥ 1).
    pub alpha: Option<AlphaMatrix<S>>,
    /// `(1, 1, f, K)`.
    pub fc_weight: Tensor4<S>,
    /// `(1, 1, 1, K)`.
    pub fc_bias: Tensor4<S>,
}

fn glorot_bound(dims: Dims) -> f64 {
    let receptive = (dims.h * dims.w) as f64;
    let fan_in = dims.c as f64 * receptive;
    let fan_out = dims.n as f64 * receptive;
    (6.0 / (fan_in + fan_out)).sqrt()
}

/// Deterministic initialization from `seed`: Glorot-uniform conv and FC
/// weights, zero FC bias, gamma 1, beta 0, and α selecting lag 0 only.
pub fn init_params<S: Scalar>(config: &ThriftyConfig, seed: u64) -> Result<Params<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = config.filters;
    let (a, b) = config.kernel;
    let glorot = |dims: Dims, rng: &mut ChaCha8Rng| Tensor4::uniform(dims, glorot_bound(dims), rng);
    let conv = match config.conv_mode {
        ConvMode::Classical => ConvWeights::Classical(glorot(Dims::new(f, f, a, b), &mut rng)),
        ConvMode::Grouped => {
            let depthwise = glorot(Dims::new(f, 1, a, b), &mut rng);
            let pointwise = glorot(Dims::new(f, f, 1, 1), &mut rng);
            ConvWeights::Grouped {
                depthwise,
                pointwise,
            }
        }
    };
    let k = config.num_classes;
    let fc_dims = Dims::new(1, 1, f, k);
    // Glorot for a dense F→K map.
    let fc_weight = Tensor4::uniform(fc_dims, (6.0 / (f + k) as f64).sqrt(), &mut rng);
    Ok(Params {
        conv,
        bn: (0..config.iterations).map(|_| BatchNormState::new(f)).collect(),
        alpha: config
            .is_residual()
            .then(|| AlphaMatrix::lag_zero(config.iterations, config.history)),
        fc_weight,
        fc_bias: Tensor4::zeros(Dims::new(1, 1, 1, k)),
    })
}

impl<S: Scalar> Params<S> {
    /// Trainable tensors in enumeration order.
    pub fn trainables(&self) -> Vec<(ParamId, &[S])> {
        let mut out: Vec<(ParamId, &[S])> = Vec::new();
        match &self.conv {
            ConvWeights::Classical(w) => out.push((ParamId::Conv, w.data())),
            ConvWeights::Grouped {
                depthwise,
                pointwise,
            } => {
                out.push((ParamId::Depthwise, depthwise.data()));
                out.push((ParamId::Pointwise, pointwise.data()));
            }
        }
        for (t, bn) in self.bn.iter().enumerate() {
            out.push((ParamId::Gamma(t), &bn.gamma));
            out.push((ParamId::Beta(t), &bn.beta));
        }
        if let Some(alpha) = &self.alpha {
            out.push((ParamId::Alpha, alpha.values()));
        }
        out.push((ParamId::FcWeight, self.fc_weight.data()));
        out.push((ParamId::FcBias, self.fc_bias.data()));
        out
    }

    /// Mutable trainable tensors, same order as [`Params::trainables`].
    pub fn trainables_mut(&mut self) -> Vec<(ParamId, &mut [S])> {
        let Params {
            conv,
            bn,
            alpha,
            fc_weight,
            fc_bias,
        } = self;
        let mut out: Vec<(ParamId, &mut [S])> = Vec::new();
        match conv {
            ConvWeights::Classical(w) => out.push((ParamId::Conv, w.data_mut())),
            ConvWeights::Grouped {
                depthwise,
                pointwise,
            } => {
                out.push((ParamId::Depthwise, depthwise.data_mut()));
                out.push((ParamId::Pointwise, pointwise.data_mut()));
            }
        }
        for (t, state) in bn.iter_mut().enumerate() {
            out.push((ParamId::Gamma(t), &mut state.gamma));
            out.push((ParamId::Beta(t), &mut state.beta));
        }
        if let Some(alpha) = alpha {
            out.push((ParamId::Alpha, alpha.values_mut()));
        }
        out.push((ParamId::FcWeight, fc_weight.data_mut()));
        out.push((ParamId::FcBias, fc_bias.data_mut()));
        out
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainables().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            conv: match &self.conv {
                ConvWeights::Classical(w) => ConvWeights::Classical(w.cast()),
                ConvWeights::Grouped {
                    depthwise,
                    pointwise,
                } => ConvWeights::Grouped {
                    depthwise: depthwise.cast(),
                    pointwise: pointwise.cast(),
                },
            },
            bn: self.bn.iter().map(|s| s.cast()).collect(),
            alpha: self.alpha.as_ref().map(|a| AlphaMatrix {
                iterations: a.iterations,
                lags: a.lags,
                values: a.values.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect(),
            }),
            fc_weight: self.fc_weight.cast(),
            fc_bias: self.fc_bias.cast(),
        }
    }

    /// Checks that tensor shapes agree with `config`.
    pub fn check(&self, config: &ThriftyConfig) -> Result<()> {
        let f = config.filters;
        let (a, b) = config.kernel;
        let bad = |what: &str| Err(Error::Config(format!("parameters do not match config: {what}")));
        match (&self.conv, config.conv_mode) {
            (ConvWeights::Classical(w), ConvMode::Classical) if w.dims() == Dims::new(f, f, a, b) => {}
            (
                ConvWeights::Grouped {
                    depthwise,
                    pointwise,
                },
                ConvMode::Grouped,
            ) if depthwise.dims() == Dims::new(f, 1, a, b)
                && pointwise.dims() == Dims::new(f, f, 1, 1) => {}
            _ => return bad("convolution weights"),
        }
        if self.bn.len() != config.iterations || self.bn.iter().any(|s| s.channels() != f) {
            return bad("batch norm states");
        }
        match (&self.alpha, config.is_residual()) {
            (None, false) => {}
            (Some(al), true)
                if al.iterations() == config.iterations && al.history() == config.history => {}
            _ => return bad("alpha matrix"),
        }
        if self.fc_weight.dims() != Dims::new(1, 1, f, config.num_classes)
            || self.fc_bias.dims() != Dims::new(1, 1, 1, config.num_classes)
        {
            return bad("classifier head");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let c = ThriftyConfig::new(8, 4, 2, 10);
        let a = init_params::<f32>(&c, 11).unwrap();
        let b = init_params::<f32>(&c, 11).unwrap();
        assert_eq!(a, b);
        let d = init_params::<f32>(&c, 12).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn alpha_starts_at_lag_zero() {
        let c = ThriftyConfig::new(4, 3, 2, 10);
        let p = init_params::<f64>(&c, 0).unwrap();
        let al = p.alpha.unwrap();
        for t in 0..3 {
            assert_eq!(al.get(t, 0), 1.0);
            assert_eq!(al.get(t, 1), 0.0);
            assert_eq!(al.get(t, 2), 0.0);
        }
        assert!(al.is_masked(0, 1) && !al.is_masked(2, 2));
        assert_eq!(al.unmasked().count(), 1 + 2 + 3);
    }

    #[test]
    fn conv_weights_centered() {
        let mut c = ThriftyConfig::new(64, 1, 0, 10);
        c.kernel = (3, 3);
        let p = init_params::<f64>(&c, 5).unwrap();
        let ConvWeights::Classical(w) = &p.conv else { unreachable!() };
        // 36864 draws from U(±0.059)
        let mean = w.sum() / w.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        let bound = (6.0f64 / (2.0 * 64.0 * 9.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn enumeration_order() {
        let mut c = ThriftyConfig::new(4, 2, 1, 3);
        c.conv_mode = ConvMode::Grouped;
        let p = init_params::<f32>(&c, 0).unwrap();
        let ids: Vec<ParamId> = p.trainables().into_iter().map(|(id, _)| id).collect();
        assert_eq!(
            ids,
            vec![
                ParamId::Depthwise,
                ParamId::Pointwise,
                ParamId::Gamma(0),
                ParamId::Beta(0),
                ParamId::Gamma(1),
                ParamId::Beta(1),
                ParamId::Alpha,
                ParamId::FcWeight,
                ParamId::FcBias
            ]
        );
        assert!(p.check(&c).is_ok());
    }
}
