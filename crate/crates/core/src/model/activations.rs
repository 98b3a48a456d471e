use crate::error::{Error, Result};
use crate::model::config::ThriftyConfig;
use crate::model::forward::{forward, ActivationSums};
use crate::model::params::Params;
use crate::ops::batchnorm::Mode;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor4;

/// Which tensor of an iteration is averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ActivationSite {
    /// The iteration output `x_{t+1}`.
    #[default]
    State,
    /// The activation `σ(W ⋆ x_t)` before the shortcut is added.
    PreShortcut,
}

/// Mean of every channel of every iteration over all samples and spatial
/// positions, as a `T × f` matrix. Runs in eval mode.
pub fn export_mean_activations<S: Scalar>(
    config: &ThriftyConfig,
    params: &Params<S>,
    batches: impl IntoIterator<Item = Tensor4<S>>,
    site: ActivationSite,
) -> Result<Vec<Vec<f64>>> {
    let mut total = ActivationSums::default();
    for batch in batches {
        let mut tape = Tape::inference();
        let fwd = forward(config, params, &batch, Mode::Eval, &mut tape, true)?;
        total.merge(fwd.activations.as_ref().expect("probe requested"));
    }
    if total.state.is_empty() {
        return Err(Error::Data("no batches to average over".into()));
    }
    let (sums, counts) = match site {
        ActivationSite::State => (&total.state, &total.state_count),
        ActivationSite::PreShortcut => (&total.pre_shortcut, &total.pre_shortcut_count),
    };
    Ok(sums
        .iter()
        .zip(counts)
        .map(|(row, &n)| row.iter().map(|s| s / n as f64).collect())
        .collect())
}
