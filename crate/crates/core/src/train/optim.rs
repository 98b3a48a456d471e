use crate::error::{Error, Result};
use crate::model::forward::Gradients;
use crate::model::params::{AlphaMatrix, ParamId, Params};
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// velocity: `v ← m·v + g + wd·p`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per trainable, in enumeration order.
    pub velocity: Vec<Vec<S>>,
    /// When set, α is neither updated nor decayed.
    pub alpha_frozen: bool,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(params: &Params<S>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params
                .trainables()
                .iter()
                .map(|(_, v)| vec![S::zero(); v.len()])
                .collect(),
            alpha_frozen: false,
        }
    }

    /// Applies one update. Fails without touching `params` if any gradient
    /// is non-finite or the gradient set does not line up.
    pub fn step(&mut self, params: &mut Params<S>, grads: &Gradients<S>, lr: f64) -> Result<()> {
        if grads.entries.len() != self.velocity.len() {
            return Err(Error::Internal(format!(
                "{} gradients for {} velocity buffers",
                grads.entries.len(),
                self.velocity.len()
            )));
        }
        for (id, g) in &grads.entries {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {id:?} at index {pos} is {}",
                    g[pos]
                )));
            }
        }
        let m = S::from_f64_lossy(self.momentum);
        let wd = S::from_f64_lossy(self.weight_decay);
        let lr = S::from_f64_lossy(lr);
        for (((id, p), (gid, g)), v) in params
            .trainables_mut()
            .into_iter()
            .zip(&grads.entries)
            .zip(&mut self.velocity)
        {
            if id != *gid || p.len() != g.len() || p.len() != v.len() {
                return Err(Error::Internal(format!("gradient {gid:?} does not match {id:?}")));
            }
            if self.alpha_frozen && id == ParamId::Alpha {
                continue;
            }
            for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = m * *v + g + wd * *p;
                *p = *p - lr * *v;
            }
        }
        Ok(())
    }
}

/// `λ·Σ x²(1−x)²` over the unmasked entries and its gradient
/// `2λx(1−x)(1−2x)`; masked entries get zero gradient.
pub fn alpha_reg_loss<S: Scalar>(alpha: &AlphaMatrix<S>, lambda: f64) -> (f64, Vec<S>) {
    let lags = alpha.history() + 1;
    let mut grad = vec![S::zero(); alpha.values().len()];
    let mut loss = 0.0;
    for (t, i, x) in alpha.unmasked() {
        let x = x.to_f64_lossy();
        let u = x * (1.0 - x);
        loss += u * u;
        grad[t * lags + i] = S::from_f64_lossy(2.0 * lambda * u * (1.0 - 2.0 * x));
    }
    (lambda * loss, grad)
}

/// Thresholds unmasked entries at 0.5: `x ≥ 0.5 → 1`, otherwise 0.
pub fn binarize_alpha<S: Scalar>(alpha: &AlphaMatrix<S>) -> AlphaMatrix<S> {
    let mut out = alpha.clone();
    for (t, i, x) in alpha.unmasked() {
        let b = if x.to_f64_lossy() >= 0.5 { S::one() } else { S::zero() };
        out.set(t, i, b);
    }
    out
}

/// Mean over unmasked entries of `min(|x|, |1−x|)`.
pub fn alpha_well_distance<S: Scalar>(alpha: &AlphaMatrix<S>) -> f64 {
    let (sum, n) = alpha.unmasked().fold((0.0, 0usize), |(s, n), (_, _, x)| {
        let x = x.to_f64_lossy();
        (s + x.abs().min((1.0 - x).abs()), n + 1)
    });
    sum / n.max(1) as f64
}

/// Weight of the α penalty, grown after every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaRegState {
    pub lambda: f64,
    pub eps: f64,
}

impl AlphaRegState {
    pub fn step(&mut self) {
        self.lambda *= 1.0 + self.eps;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ThriftyConfig;
    use crate::model::params::init_params;

    #[test]
    fn plain_and_momentum_updates() {
        let config = ThriftyConfig::new(3, 1, 0, 2);
        let mut p = init_params::<f64>(&config, 0).unwrap();
        let before = p.clone();
        let grads = Gradients {
            entries: p
                .trainables()
                .iter()
                .map(|(id, v)| (*id, vec![0.5; v.len()]))
                .collect(),
        };
        let mut sgd = Sgd::new(&p, 0.0, 0.0);
        sgd.step(&mut p, &grads, 0.1).unwrap();
        assert_eq!(p.fc_bias.data()[0], before.fc_bias.data()[0] - 0.05);

        let mut p = before.clone();
        let mut sgd = Sgd::new(&p, 0.9, 0.0);
        sgd.step(&mut p, &grads, 1.0).unwrap();
        assert_eq!(p.fc_bias.data()[0], -0.5);
        sgd.step(&mut p, &grads, 1.0).unwrap();
        assert!((p.fc_bias.data()[0] - (-0.5 - 0.95)).abs() < 1e-15);

        let zero = Gradients {
            entries: grads.entries.iter().map(|(id, g)| (*id, vec![0.0; g.len()])).collect(),
        };
        let mut p = before.clone();
        Sgd::new(&p, 0.9, 0.0).step(&mut p, &zero, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let config = ThriftyConfig::new(3, 1, 0, 2);
        let mut p = init_params::<f32>(&config, 0).unwrap();
        let before = p.clone();
        let mut entries: Vec<_> = p.trainables().iter().map(|(id, v)| (*id, vec![0.0f32; v.len()])).collect();
        entries[1].1[0] = f32::NAN;
        let err = Sgd::new(&p, 0.9, 0.0).step(&mut p, &Gradients { entries }, 0.1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, before);
    }

    #[test]
    fn frozen_alpha_untouched() {
        let config = ThriftyConfig::new(3, 2, 1, 2);
        let mut p = init_params::<f64>(&config, 0).unwrap();
        let alpha = p.alpha.clone();
        let grads = Gradients {
            entries: p.trainables().iter().map(|(id, v)| (*id, vec![1.0; v.len()])).collect(),
        };
        let mut sgd = Sgd::new(&p, 0.9, 0.1);
        sgd.alpha_frozen = true;
        sgd.step(&mut p, &grads, 0.1).unwrap();
        assert_eq!(p.alpha, alpha);
        assert_ne!(p.fc_bias.data()[0], 0.0);
    }

    #[test]
    fn penalty_values() {
        let a = AlphaMatrix::from_values(1, 0, vec![0.5f64]).unwrap();
        let (l, g) = alpha_reg_loss(&a, 1.0);
        assert_eq!(l, 0.0625);
        assert_eq!(g, vec![0.0]);
        let a = AlphaMatrix::from_values(2, 1, vec![1.0f64, 0.3, 0.0, 1.0]).unwrap();
        let (l, g) = alpha_reg_loss(&a, 2.0);
        // entry (0, 1) is masked
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0; 4]);
    }

    #[test]
    fn binarize_contract() {
        let a = AlphaMatrix::from_values(1, 2, vec![0.49f64, 0.5, 0.51]).unwrap();
        // only lag 0 is unmasked at t = 0
        assert_eq!(binarize_alpha(&a).values(), &[0.0, 0.5, 0.51]);
        let a = AlphaMatrix::from_values(3, 0, vec![0.49f64, 0.5, 0.51]).unwrap();
        let b = binarize_alpha(&a);
        assert_eq!(b.values(), &[0.0, 1.0, 1.0]);
        assert_eq!(binarize_alpha(&b), b);
        let z = AlphaMatrix::from_values(2, 0, vec![0.0f64; 2]).unwrap();
        assert_eq!(binarize_alpha(&z), z);
    }

    #[test]
    fn lambda_growth() {
        let mut s = AlphaRegState { lambda: 3e-4, eps: 1.5e-4 };
        let mut prev = s.lambda;
        for _ in 0..1000 {
            s.step();
            assert!(s.lambda > prev);
            prev = s.lambda;
        }
        let want = 3e-4 * (1.0f64 + 1.5e-4).powi(1000);
        assert!((s.lambda - want).abs() <= 1e-12 * want);
    }
}
