//! Forward passes of the plain and residual recursions.
//!
//! Plain:    `x_{t+1} = D_t[BN_t(x_t + σ(W ⋆ x_t))]`
//! Residual: `x_{t+1} = D_t[BN_t(σ(W ⋆ x_t) + Σ_i α[t,i] · x_{t-i})]`
//!
//! with `x_0 = PAD(x)` and logits `FC(globalmax(x_T))`. Whenever `D_t`
//! pools, every stored history entry is pooled as well so all entries
//! share the resolution of the newest activation.

use std::collections::VecDeque;

use crate::error::Result;
use crate::model::config::ThriftyConfig;
use crate::model::params::{ConvWeights, ParamId, Params};
use crate::ops::batchnorm::{batch_stats, running_stats, BatchStats, Mode};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape, Term};
use crate::tensor::{Dims, Tensor4};

/// Per-iteration channel sums collected during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationSums {
    /// `[t][c]`: sum of channel `c` of `x_{t+1}`.
    pub state: Vec<Vec<f64>>,
    /// `[t][c]`: sum of channel `c` of `σ(W ⋆ x_t)`.
    pub pre_shortcut: Vec<Vec<f64>>,
    /// `[t]`: number of values per channel in `x_{t+1}` (N·H·W).
    pub state_count: Vec<usize>,
    /// `[t]`: number of values per channel in `σ(W ⋆ x_t)`.
    pub pre_shortcut_count: Vec<usize>,
}

impl ActivationSums {
    pub fn merge(&mut self, other: &ActivationSums) {
        if self.state.is_empty() {
            *self = other.clone();
            return;
        }
        let add = |a: &mut Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            for (ra, rb) in a.iter_mut().zip(b) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x += y;
                }
            }
        };
        add(&mut self.state, &other.state);
        add(&mut self.pre_shortcut, &other.pre_shortcut);
        for (a, b) in self.state_count.iter_mut().zip(&other.state_count) {
            *a += b;
        }
        for (a, b) in self.pre_shortcut_count.iter_mut().zip(&other.pre_shortcut_count) {
            *a += b;
        }
    }
}

/// Handles into the tape produced by one forward pass.
pub struct Forward {
    /// `(N, K, 1, 1)` class scores.
    pub logits: NodeId,
    /// Train mode only: batch statistics of every iteration with their
    /// per-channel sample counts, for the running-stat update.
    pub batch_stats: Vec<(BatchStats, usize)>,
    pub activations: Option<ActivationSums>,
    /// Tape key ↔ parameter for every registered trainable.
    pub keys: Vec<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Recursion {
    Plain,
    Residual,
}

/// Plain recursion. Any α in `params` is ignored.
pub fn forward_thrifty<S: Scalar>(
    config: &ThriftyConfig,
    params: &Params<S>,
    input: &Tensor4<S>,
    mode: Mode,
    tape: &mut Tape<S>,
    probe: bool,
) -> Result<Forward> {
    run(config, params, input, mode, tape, probe, Recursion::Plain)
}

/// Residual recursion with shortcut weights α; needs `history ≥ 1`.
pub fn forward_residual<S: Scalar>(
    config: &ThriftyConfig,
    params: &Params<S>,
    input: &Tensor4<S>,
    mode: Mode,
    tape: &mut Tape<S>,
    probe: bool,
) -> Result<Forward> {
    if !config.is_residual() || params.alpha.is_none() {
        return Err(crate::Error::Config(
            "residual forward needs history ≥ 1 and an alpha matrix".into(),
        ));
    }
    run(config, params, input, mode, tape, probe, Recursion::Residual)
}

/// Dispatches on `config.history`.
pub fn forward<S: Scalar>(
    config: &ThriftyConfig,
    params: &Params<S>,
    input: &Tensor4<S>,
    mode: Mode,
    tape: &mut Tape<S>,
    probe: bool,
) -> Result<Forward> {
    if config.is_residual() {
        forward_residual(config, params, input, mode, tape, probe)
    } else {
        forward_thrifty(config, params, input, mode, tape, probe)
    }
}

struct Leaves {
    conv: Vec<NodeId>,
    alpha: Option<NodeId>,
    fc_weight: NodeId,
    fc_bias: NodeId,
}

fn channel_sums<S: Scalar>(t: &Tensor4<S>) -> Vec<f64> {
    let d = t.dims();
    (0..d.c)
        .map(|c| {
            (0..d.n)
                .map(|n| t.plane(n, c).iter().map(|v| v.to_f64_lossy()).sum::<f64>())
                .sum()
        })
        .collect()
}

fn run<S: Scalar>(
    config: &ThriftyConfig,
    params: &Params<S>,
    input: &Tensor4<S>,
    mode: Mode,
    tape: &mut Tape<S>,
    probe: bool,
    recursion: Recursion,
) -> Result<Forward> {
    config.validate_input(input.dims())?;
    params.check(config)?;
    let f = config.filters;
    let (a, b) = config.kernel;
    let padding = ((a - 1) / 2, (b - 1) / 2);

    let mut keys = Vec::new();
    let mut register = |tape: &mut Tape<S>, id: ParamId, value: Tensor4<S>| {
        keys.push(id);
        tape.param(keys.len() - 1, value)
    };
    let conv = match &params.conv {
        ConvWeights::Classical(w) => vec![register(tape, ParamId::Conv, w.clone())],
        ConvWeights::Grouped {
            depthwise,
            pointwise,
        } => vec![
            register(tape, ParamId::Depthwise, depthwise.clone()),
            register(tape, ParamId::Pointwise, pointwise.clone()),
        ],
    };
    let bn_dims = Dims::new(1, f, 1, 1);
    let mut bn_leaves = Vec::with_capacity(config.iterations);
    for (t, state) in params.bn.iter().enumerate() {
        let g = register(tape, ParamId::Gamma(t), Tensor4::from_vec(bn_dims, state.gamma.clone())?);
        let be = register(tape, ParamId::Beta(t), Tensor4::from_vec(bn_dims, state.beta.clone())?);
        bn_leaves.push((g, be));
    }
    let alpha = match (&params.alpha, recursion) {
        (Some(al), Recursion::Residual) => {
            let dims = Dims::new(1, 1, al.iterations(), al.history() + 1);
            Some(register(tape, ParamId::Alpha, Tensor4::from_vec(dims, al.values().to_vec())?))
        }
        _ => None,
    };
    let leaves = Leaves {
        conv,
        alpha,
        fc_weight: register(tape, ParamId::FcWeight, params.fc_weight.clone()),
        fc_bias: register(tape, ParamId::FcBias, params.fc_bias.clone()),
    };

    let raw = tape.constant(input.clone());
    let mut x = tape.channel_pad(raw, f)?;
    tape.release(raw);

    let mut sums = probe.then(ActivationSums::default);
    let mut stats_out = Vec::new();
    // history[0] = x_t, history[i] = x_{t-i}
    let mut history: VecDeque<NodeId> = VecDeque::new();
    history.push_back(x);

    for t in 0..config.iterations {
        let conv_out = match leaves.conv.as_slice() {
            [w] => tape.conv2d(x, *w, 1, padding)?,
            [dw, pw] => {
                let mid = tape.conv2d(x, *dw, f, padding)?;
                let out = tape.conv2d(mid, *pw, 1, (0, 0))?;
                tape.release(mid);
                out
            }
            _ => unreachable!("one or two conv stages"),
        };
        let act = tape.activation(config.activation, conv_out);
        tape.release(conv_out);
        if let Some(s) = sums.as_mut() {
            let v = tape.value(act);
            s.pre_shortcut.push(channel_sums(v));
            s.pre_shortcut_count.push(v.dims().n * v.dims().plane());
        }

        let summed = match (recursion, leaves.alpha) {
            (Recursion::Residual, Some(coeffs)) => {
                let lags = config.history + 1;
                let terms = history
                    .iter()
                    .enumerate()
                    .take(lags)
                    .filter(|&(i, _)| i <= t)
                    .map(|(i, &tensor)| Term {
                        coeffs,
                        index: t * lags + i,
                        tensor,
                    })
                    .collect();
                tape.weighted_sum(act, terms)
            }
            _ => tape.add(x, act),
        };
        tape.release(act);

        let (gamma, beta) = bn_leaves[t];
        let (stats, coupled) = match mode {
            Mode::Train => {
                let s = batch_stats(tape.value(summed), params.bn[t].epsilon)?;
                let d = tape.dims(summed);
                stats_out.push((s.clone(), d.n * d.plane()));
                (s, true)
            }
            Mode::Eval => (running_stats(&params.bn[t]), false),
        };
        let mut next = tape.batchnorm(summed, gamma, beta, stats, coupled)?;
        tape.release(summed);

        if config.schedule.fires(t) {
            let pooled = tape.maxpool2x2(next);
            tape.release(next);
            next = pooled;
            if recursion == Recursion::Residual {
                for entry in history.iter_mut() {
                    let p = tape.maxpool2x2(*entry);
                    tape.release(*entry);
                    *entry = p;
                }
            }
        }
        if let Some(s) = sums.as_mut() {
            let v = tape.value(next);
            s.state.push(channel_sums(v));
            s.state_count.push(v.dims().n * v.dims().plane());
        }

        match recursion {
            Recursion::Residual => {
                history.push_front(next);
                while history.len() > config.history + 1 {
                    let old = history.pop_back().expect("non-empty history");
                    tape.release(old);
                }
            }
            Recursion::Plain => {
                tape.release(x);
                history.clear();
            }
        }
        x = next;
    }

    let pooled = tape.global_max_pool(x);
    let logits = tape.linear(pooled, leaves.fc_weight, leaves.fc_bias)?;
    Ok(Forward {
        logits,
        batch_stats: stats_out,
        activations: sums,
        keys,
    })
}

/// Gradients of every trainable, aligned with [`Params::trainables`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    pub entries: Vec<(ParamId, Vec<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&[S]> {
        self.entries
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<S>> {
        self.entries.iter_mut().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

/// Backpropagates `seed` (d loss / d logits) through `tape` and returns
/// the gradient of every trainable in `params`, including zero entries for
/// trainables the forward did not touch (α in a plain forward).
pub fn backward<S: Scalar>(
    params: &Params<S>,
    tape: &Tape<S>,
    fwd: &Forward,
    seed: Tensor4<S>,
) -> Result<Gradients<S>> {
    let raw = tape.backward(fwd.logits, seed)?;
    let mut by_key: Vec<Option<Tensor4<S>>> = vec![None; fwd.keys.len()];
    for (key, g) in raw.into_entries() {
        by_key[key] = Some(g);
    }
    let entries = params
        .trainables()
        .into_iter()
        .map(|(id, values)| {
            let g = fwd
                .keys
                .iter()
                .position(|k| *k == id)
                .and_then(|key| by_key[key].take())
                .map(|t| t.into_vec())
                .unwrap_or_else(|| vec![S::zero(); values.len()]);
            (id, g)
        })
        .collect();
    Ok(Gradients { entries })
}

impl<S: Scalar> Params<S> {
    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, fwd: &Forward) {
        for (state, (stats, count)) in self.bn.iter_mut().zip(&fwd.batch_stats) {
            state.update_running(stats, *count);
        }
    }
}

/// Runs an inference-only forward pass and returns the logits.
pub fn predict<S: Scalar>(
    config: &ThriftyConfig,
    params: &Params<S>,
    input: &Tensor4<S>,
    mode: Mode,
) -> Result<Tensor4<S>> {
    let mut tape = Tape::inference();
    let fwd = forward(config, params, input, mode, &mut tape, false)?;
    Ok(tape.value(fwd.logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ConvMode, DownsampleSchedule};
    use crate::model::params::init_params;
    use crate::ops::loss::softmax_cross_entropy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(dims: Dims, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::uniform(dims, 1.0, &mut rng)
    }

    #[test]
    fn lag_zero_residual_matches_plain() {
        let config = ThriftyConfig::new(5, 4, 2, 3)
            .with_schedule(DownsampleSchedule::new(vec![1, 2, 1, 2]).unwrap());
        let params = init_params::<f64>(&config, 3).unwrap();
        let x = batch(Dims::new(2, 3, 6, 6), 1);
        for mode in [Mode::Train, Mode::Eval] {
            let mut t1 = Tape::new();
            let plain = forward_thrifty(&config, &params, &x, mode, &mut t1, false).unwrap();
            let mut t2 = Tape::new();
            let res = forward_residual(&config, &params, &x, mode, &mut t2, false).unwrap();
            assert_eq!(t1.value(plain.logits), t2.value(res.logits));
        }
    }

    #[test]
    fn shapes_and_probe() {
        let mut config = ThriftyConfig::new(4, 3, 1, 7)
            .with_schedule(DownsampleSchedule::new(vec![2, 2, 1]).unwrap());
        config.conv_mode = ConvMode::Grouped;
        let params = init_params::<f32>(&config, 0).unwrap();
        let x = batch(Dims::new(3, 3, 5, 5), 2).cast::<f32>();
        let mut tape = Tape::inference();
        let fwd = forward(&config, &params, &x, Mode::Train, &mut tape, true).unwrap();
        assert_eq!(tape.dims(fwd.logits), Dims::new(3, 7, 1, 1));
        let sums = fwd.activations.unwrap();
        assert_eq!(sums.state.len(), 3);
        assert_eq!(sums.state_count, vec![3 * 9, 3 * 4, 3 * 4]);
        assert_eq!(sums.pre_shortcut_count, vec![3 * 25, 3 * 9, 3 * 4]);
        assert_eq!(fwd.batch_stats.len(), 3);
    }

    #[test]
    fn input_validation() {
        let config = ThriftyConfig::new(4, 3, 0, 2)
            .with_schedule(DownsampleSchedule::new(vec![2, 2, 2]).unwrap());
        let params = init_params::<f64>(&config, 0).unwrap();
        assert!(predict(&config, &params, &batch(Dims::new(1, 3, 4, 4), 0), Mode::Eval).is_err());
        assert!(predict(&config, &params, &batch(Dims::new(1, 2, 8, 8), 0), Mode::Eval).is_err());
        assert!(predict(&config, &params, &batch(Dims::new(1, 3, 8, 8), 0), Mode::Eval).is_ok());
    }

    #[test]
    fn alpha_gradient_matches_difference_quotient() {
        let config = ThriftyConfig::new(4, 3, 1, 3);
        let mut params = init_params::<f64>(&config, 5).unwrap();
        let x = batch(Dims::new(2, 3, 4, 4), 9);
        let labels = [0usize, 2];
        let loss = |p: &Params<f64>| {
            let logits = predict(&config, p, &x, Mode::Train).unwrap();
            softmax_cross_entropy(&logits, &labels).unwrap().0
        };
        let mut tape = Tape::new();
        let fwd = forward(&config, &params, &x, Mode::Train, &mut tape, false).unwrap();
        let (_, seed) = softmax_cross_entropy(tape.value(fwd.logits), &labels).unwrap();
        let grads = backward(&params, &tape, &fwd, seed).unwrap();
        let g = grads.get(ParamId::Alpha).unwrap().to_vec();
        // masked entry (t = 0, lag 1) receives no gradient
        assert_eq!(g[1], 0.0);
        let h = 1e-6;
        for idx in [0, 2, 3, 4, 5] {
            let orig = params.alpha.as_ref().unwrap().values()[idx];
            params.alpha.as_mut().unwrap().values_mut()[idx] = orig + h;
            let up = loss(&params);
            params.alpha.as_mut().unwrap().values_mut()[idx] = orig - h;
            let down = loss(&params);
            params.alpha.as_mut().unwrap().values_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - g[idx]).abs() < 1e-6 * (1.0 + numeric.abs()), "{idx}: {numeric} vs {}", g[idx]);
        }
    }
}
