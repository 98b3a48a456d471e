use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Double-well penalty on α with a geometrically growing weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaRegConfig {
    pub lambda0: f64,
    /// λ is multiplied by `1 + eps` after every optimizer step.
    pub eps: f64,
    /// The penalty is active during epochs `0..epochs`.
    pub epochs: usize,
}

impl AlphaRegConfig {
    pub const DEFAULT_LAMBDA0: f64 = 3e-4;
    pub const DEFAULT_EPS: f64 = 1.5e-4;

    pub fn with_defaults(epochs: usize) -> Self {
        AlphaRegConfig {
            lambda0: Self::DEFAULT_LAMBDA0,
            eps: Self::DEFAULT_EPS,
            epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// Epochs at which the learning rate is divided by 10.
    pub lr_drops: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha_reg: Option<AlphaRegConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr0: 0.1,
            lr_drops: vec![50, 100, 150],
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 128,
            seed: 0,
            alpha_reg: None,
        }
    }
}

impl TrainConfig {
    /// Defaults with `epochs` and drops at one and two thirds of it.
    pub fn scaled(epochs: usize) -> Self {
        let mut drops = vec![epochs / 3, 2 * epochs / 3];
        drops.retain(|&d| d > 0);
        drops.dedup();
        TrainConfig {
            epochs,
            lr_drops: drops,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("lr drops {:?} not strictly increasing", self.lr_drops));
        }
        if let Some(&d) = self.lr_drops.iter().find(|&&d| d >= self.epochs) {
            return fail(format!("lr drop at epoch {d} not below {} epochs", self.epochs));
        }
        if let Some(r) = &self.alpha_reg {
            if !(r.lambda0 >= 0.0 && r.eps >= 0.0 && r.lambda0.is_finite() && r.eps.is_finite()) {
                return fail("alpha_reg lambda0 and eps must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Learning rate of `epoch` (0-based): `lr0 / 10^k` with `k` the number
    /// of drops at or before it.
    pub fn lr(&self, epoch: usize) -> f64 {
        let k = self.lr_drops.iter().filter(|&&d| d <= epoch).count();
        self.lr0 / 10f64.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let c = TrainConfig::default();
        let lrs: Vec<f64> = [0, 49, 50, 99, 100, 149, 150, 199].iter().map(|&e| c.lr(e)).collect();
        let want = [0.1, 0.1, 0.01, 0.01, 0.001, 0.001, 0.0001, 0.0001];
        for (a, b) in lrs.iter().zip(want) {
            assert!((a - b).abs() < 1e-15 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr_drops: vec![100, 50], ..Default::default() },
            TrainConfig { lr_drops: vec![200], ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert_eq!(TrainConfig::scaled(150).lr_drops, vec![50, 100]);
        assert!(TrainConfig::scaled(2).validate().is_ok());
    }

    #[test]
    fn toml_defaults_fill_in() {
        let c: TrainConfig = toml::from_str("epochs = 20\n[alpha_reg]\nlambda0 = 0.001\neps = 0.0\nepochs = 5\n").unwrap();
        assert_eq!(c.epochs, 20);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.alpha_reg.unwrap().epochs, 5);
    }
}
