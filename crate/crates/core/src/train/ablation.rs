use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::metrics::{self, CsvRow, MetricLog};
use crate::model::config::ThriftyConfig;
use crate::model::params::{init_params, AlphaMatrix, Params};
use crate::scalar::Scalar;
use crate::train::config::{AlphaRegConfig, TrainConfig};
use crate::train::optim::{alpha_well_distance, binarize_alpha};
use crate::train::trainer::{evaluate, train, TrainOptions};

/// Settings of the shortcut-freezing experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Phase 1; must carry `alpha_reg`. Its seed also seeds the initial
    /// weights.
    pub phase1: TrainConfig,
    /// Shared by the three phase-2 runs; `alpha_reg` is ignored.
    pub phase2: TrainConfig,
    /// Initialization seed of variant (c).
    pub fresh_seed: u64,
}

impl AblationConfig {
    /// `epochs` per phase, drops at thirds, default penalty constants
    /// active for all of phase 1.
    pub fn scaled(epochs: usize, batch_size: usize, seed: u64) -> Self {
        let base = TrainConfig {
            batch_size,
            seed,
            ..TrainConfig::scaled(epochs)
        };
        AblationConfig {
            phase1: TrainConfig {
                alpha_reg: Some(AlphaRegConfig::with_defaults(epochs)),
                ..base.clone()
            },
            phase2: base,
            fresh_seed: seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    pub log: MetricLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    /// Phase-1 model with real-valued α.
    pub baseline: VariantResult,
    /// Phase-1 model right after binarizing α, without retraining.
    pub binarized_test_acc: f64,
    /// (a) phase-2 training continued from the phase-1 weights.
    pub continued: VariantResult,
    /// (b) weights reset to the phase-1 initialization.
    pub same_init: VariantResult,
    /// (c) weights from a fresh initialization.
    pub fresh_init: VariantResult,
    pub alpha_start_distance: f64,
    pub alpha_end_distance: f64,
    /// Binarized α, row-major `T × (h+1)`.
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub description: String,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
}

impl CsvRow for AblationRow {
    const HEADER: &'static [&'static str] =
        &["variant", "description", "final_test_acc", "best_test_acc"];
}

impl AblationReport {
    pub fn rows(&self) -> Vec<AblationRow> {
        let row = |v: &str, d: &str, r: &VariantResult| AblationRow {
            variant: v.into(),
            description: d.into(),
            final_test_acc: r.final_test_acc,
            best_test_acc: r.best_test_acc,
        };
        vec![
            row("baseline", "real-valued alpha", &self.baseline),
            AblationRow {
                variant: "binarized".into(),
                description: "baseline with alpha thresholded, no retraining".into(),
                final_test_acc: self.binarized_test_acc,
                best_test_acc: self.binarized_test_acc,
            },
            row("a", "frozen alpha, continue training", &self.continued),
            row("b", "frozen alpha, same initialization", &self.same_init),
            row("c", "frozen alpha, fresh initialization", &self.fresh_init),
        ]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        metrics::write_rows(path, &self.rows())
    }
}

fn result<S>(out: &crate::train::trainer::TrainOutcome<S>) -> VariantResult {
    VariantResult {
        final_test_acc: out.final_test_acc().unwrap_or(f64::NAN),
        best_test_acc: out.state.best_test_acc,
        log: out.log.clone(),
    }
}

/// Trains with the α penalty, binarizes and freezes α, then retrains the
/// other weights three ways. Per-phase outputs go to subdirectories of
/// `out_dir` when given.
pub fn ablation_alpha<S: Scalar>(
    config: &ThriftyConfig,
    train_set: &ImageDataset,
    test_set: &ImageDataset,
    ab: &AblationConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&str, &crate::metrics::MetricRow),
) -> Result<AblationReport> {
    if !config.is_residual() {
        return Err(Error::Config("ablation needs a residual model (history ≥ 1)".into()));
    }
    if ab.phase1.alpha_reg.is_none() {
        return Err(Error::Config("phase 1 of the ablation needs alpha_reg".into()));
    }
    let phase2 = TrainConfig {
        alpha_reg: None,
        ..ab.phase2.clone()
    };
    phase2.validate()?;
    let sub = |name: &str| out_dir.map(|d| d.join(name));

    let init: Params<S> = init_params(config, ab.phase1.seed)?;
    let start_distance = alpha_well_distance(init.alpha.as_ref().expect("residual"));
    let p1 = train(
        config,
        init,
        train_set,
        test_set,
        &ab.phase1,
        None,
        TrainOptions {
            out_dir: sub("phase1"),
            on_epoch: Some(Box::new(|r| progress("phase1", r))),
            ..Default::default()
        },
    )?;
    let baseline = result(&p1);
    let trained_alpha = p1.params.alpha.clone().expect("residual");
    let end_distance = alpha_well_distance(&trained_alpha);
    let frozen: AlphaMatrix<S> = binarize_alpha(&trained_alpha);

    let mut binarized = p1.params;
    binarized.alpha = Some(frozen.clone());
    let binarized_test_acc = evaluate(config, &binarized, test_set, phase2.batch_size)?;

    let mut run = |name: &str, params: Params<S>| -> Result<VariantResult> {
        let out = train(
            config,
            params,
            train_set,
            test_set,
            &phase2,
            None,
            TrainOptions {
                out_dir: sub(name),
                freeze_alpha: true,
                on_epoch: Some(Box::new(|r| progress(name, r))),
                ..Default::default()
            },
        )?;
        if out.params.alpha.as_ref() != Some(&frozen) {
            return Err(Error::Internal("frozen alpha changed during training".into()));
        }
        Ok(result(&out))
    };
    let with_alpha = |mut p: Params<S>| {
        p.alpha = Some(frozen.clone());
        p
    };
    let continued = run("a", binarized.clone())?;
    let same_init = run("b", with_alpha(init_params(config, ab.phase1.seed)?))?;
    let fresh_init = run("c", with_alpha(init_params(config, ab.fresh_seed)?))?;

    Ok(AblationReport {
        baseline,
        binarized_test_acc,
        continued,
        same_init,
        fresh_init,
        alpha_start_distance: start_distance,
        alpha_end_distance: end_distance,
        alpha: frozen.values().iter().map(|v| v.to_f64_lossy()).collect(),
    })
}
