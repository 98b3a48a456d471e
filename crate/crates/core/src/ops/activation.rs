use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(crate::error::Error::Config(format!("unknown activation {s:?} (relu, tanh)"))),
        }
    }
}

impl Activation {
    pub fn forward<S: Scalar>(self, input: &Tensor4<S>) -> Tensor4<S> {
        match self {
            Activation::Relu => relu(input),
            Activation::Tanh => tanh_act(input),
        }
    }

    /// `input` is the pre-activation, `output` the activation; relu reads
    /// the former, tanh the latter.
    pub fn backward<S: Scalar>(
        self,
        grad_out: &Tensor4<S>,
        input: &Tensor4<S>,
        output: &Tensor4<S>,
    ) -> Tensor4<S> {
        match self {
            Activation::Relu => relu_backward(grad_out, input),
            Activation::Tanh => tanh_backward(grad_out, output),
        }
    }
}

pub fn relu<S: Scalar>(input: &Tensor4<S>) -> Tensor4<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<S: Scalar>(grad_out: &Tensor4<S>, input: &Tensor4<S>) -> Tensor4<S> {
    grad_out.zip_map(input, |g, x| if x > S::zero() { g } else { S::zero() })
}

pub fn tanh_act<S: Scalar>(input: &Tensor4<S>) -> Tensor4<S> {
    input.map(|v| v.tanh())
}

pub fn tanh_backward<S: Scalar>(grad_out: &Tensor4<S>, output: &Tensor4<S>) -> Tensor4<S> {
    grad_out.zip_map(output, |g, y| g * (S::one() - y * y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn relu_values_and_kink() {
        let x = Tensor4::<f64>::from_vec(Dims::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&Tensor4::full(x.dims(), 1.0), &x);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn tanh_is_odd_at_zero() {
        let x = Tensor4::<f64>::zeros(Dims::new(1, 1, 1, 1));
        assert_eq!(tanh_act(&x).data(), &[0.0]);
        let y = tanh_act(&x);
        assert_eq!(tanh_backward(&Tensor4::full(x.dims(), 3.0), &y).data(), &[3.0]);
    }
}
