//! Trade-off sweeps: train a list of configurations with one shared
//! training setup and tabulate size, cost and accuracy.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::metrics::{CsvRow, MetricRow};
use crate::model::config::{ConvMode, ThriftyConfig};
use crate::model::params::init_params;
use crate::ops::activation::Activation;
use crate::planner::{make_schedule, mac_count, param_count, solve_filters, BudgetConvention, Placement};
use crate::train::{train, TrainConfig, TrainOptions};

/// One `[[config]]` table of a manifest. Unset fields fall back to the
/// manifest's `[defaults]` table. `filters` wins over `budget`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub name: Option<String>,
    pub filters: Option<usize>,
    pub budget: Option<u64>,
    pub convention: Option<BudgetConvention>,
    pub iterations: Option<usize>,
    pub history: Option<usize>,
    pub pools: Option<usize>,
    /// `regular`, `front_loaded` or a comma-separated list of iterations.
    pub placement: Option<String>,
    pub kernel: Option<(usize, usize)>,
    pub conv_mode: Option<ConvMode>,
    pub activation: Option<Activation>,
}

impl SweepEntry {
    fn or(&self, d: &SweepEntry) -> SweepEntry {
        SweepEntry {
            name: self.name.clone().or_else(|| d.name.clone()),
            filters: self.filters.or(d.filters),
            budget: self.budget.or(d.budget),
            convention: self.convention.or(d.convention),
            iterations: self.iterations.or(d.iterations),
            history: self.history.or(d.history),
            pools: self.pools.or(d.pools),
            placement: self.placement.clone().or_else(|| d.placement.clone()),
            kernel: self.kernel.or(d.kernel),
            conv_mode: self.conv_mode.or(d.conv_mode),
            activation: self.activation.or(d.activation),
        }
    }

    /// Builds the configuration, solving `f` from the budget if needed.
    pub fn resolve(
        &self,
        num_classes: usize,
        input_channels: usize,
        input_hw: (usize, usize),
    ) -> Result<ThriftyConfig> {
        let iterations = self
            .iterations
            .ok_or_else(|| Error::Config("iterations not given".into()))?;
        let placement = Placement::parse(self.placement.as_deref().unwrap_or("regular"))?;
        let pools = match (&placement, self.pools) {
            (_, Some(n)) => n,
            (Placement::Explicit(p), None) => p.len(),
            _ => 0,
        };
        let mut config = ThriftyConfig::new(1, iterations, self.history.unwrap_or(0), num_classes);
        config.input_channels = input_channels;
        config.kernel = self.kernel.unwrap_or((3, 3));
        config.conv_mode = self.conv_mode.unwrap_or(ConvMode::Classical);
        config.activation = self.activation.unwrap_or(Activation::Relu);
        config.schedule = make_schedule(iterations, pools, &placement, input_hw)?;
        config.filters = match (self.filters, self.budget) {
            (Some(f), _) => f,
            (None, Some(b)) => solve_filters(b, &config, self.convention.unwrap_or_default())?,
            (None, None) => {
                return Err(Error::Config("either filters or budget must be given".into()))
            }
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepManifest {
    #[serde(default)]
    pub defaults: SweepEntry,
    #[serde(default)]
    pub config: Vec<SweepEntry>,
}

impl SweepManifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("sweep manifest: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Entry names (explicit or positional) with their resolved configs.
    pub fn resolve(
        &self,
        num_classes: usize,
        input_channels: usize,
        input_hw: (usize, usize),
    ) -> Vec<(String, Result<ThriftyConfig>)> {
        self.config
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let merged = e.or(&SweepEntry {
                    name: None,
                    ..self.defaults.clone()
                });
                let name = merged.name.clone().unwrap_or_else(|| format!("config{i}"));
                (name, merged.resolve(num_classes, input_channels, input_hw))
            })
            .collect()
    }
}

/// One line of the trade-off table. Architecture fields are empty when the
/// configuration itself could not be resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub f: Option<usize>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    pub h: Option<usize>,
    pub n_pools: Option<usize>,
    pub params_total: Option<u64>,
    pub macs_total: Option<u64>,
    /// Mean final-epoch test accuracy over the repeats.
    pub test_acc: Option<f64>,
    /// Sample standard deviation; empty for a single run.
    pub test_acc_std: Option<f64>,
    pub best_test_acc: Option<f64>,
    pub runs: usize,
    pub status: String,
}

impl CsvRow for SweepRow {
    const HEADER: &'static [&'static str] = &[
        "name",
        "f",
        "T",
        "h",
        "n_pools",
        "params_total",
        "macs_total",
        "test_acc",
        "test_acc_std",
        "best_test_acc",
        "runs",
        "status",
    ];
}

/// Trains every configuration `repeats` times (seeds `tc.seed + r`) and
/// returns one row per configuration in input order. A failing entry is
/// recorded with its error and the sweep moves on.
pub fn sweep(
    configs: &[(String, Result<ThriftyConfig>)],
    train_set: &ImageDataset,
    test_set: &ImageDataset,
    tc: &TrainConfig,
    repeats: usize,
    mut progress: impl FnMut(&str, usize, &MetricRow),
) -> Vec<SweepRow> {
    let input_hw = (train_set.images.dims().h, train_set.images.dims().w);
    configs
        .iter()
        .map(|(name, config)| {
            let mut row = SweepRow {
                name: name.clone(),
                f: None,
                t: None,
                h: None,
                n_pools: None,
                params_total: None,
                macs_total: None,
                test_acc: None,
                test_acc_std: None,
                best_test_acc: None,
                runs: 0,
                status: String::new(),
            };
            let config = match config {
                Ok(c) => c,
                Err(e) => {
                    row.status = format!("failed: {e}");
                    return row;
                }
            };
            row.f = Some(config.filters);
            row.t = Some(config.iterations);
            row.h = Some(config.history);
            row.n_pools = Some(config.schedule.pool_count());
            row.params_total = Some(param_count(config).total);
            row.macs_total = Some(mac_count(config, input_hw).total);
            let mut finals = Vec::new();
            let mut best = f64::NEG_INFINITY;
            for r in 0..repeats.max(1) {
                let run_tc = TrainConfig {
                    seed: tc.seed + r as u64,
                    ..tc.clone()
                };
                let outcome = init_params::<f32>(config, run_tc.seed).and_then(|p| {
                    train(
                        config,
                        p,
                        train_set,
                        test_set,
                        &run_tc,
                        None,
                        TrainOptions {
                            on_epoch: Some(Box::new(|m| progress(name, r, m))),
                            ..Default::default()
                        },
                    )
                });
                match outcome {
                    Ok(o) => {
                        finals.push(o.final_test_acc().unwrap_or(f64::NAN));
                        best = best.max(o.state.best_test_acc);
                    }
                    Err(e) => {
                        row.status = format!("failed: {e}");
                        break;
                    }
                }
            }
            row.runs = finals.len();
            if !finals.is_empty() {
                let n = finals.len() as f64;
                let mean = finals.iter().sum::<f64>() / n;
                row.test_acc = Some(mean);
                row.best_test_acc = Some(best);
                if finals.len() > 1 {
                    let var = finals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
                    row.test_acc_std = Some(var.sqrt());
                }
            }
            if row.status.is_empty() {
                row.status = "ok".into();
            }
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = r#"
[defaults]
budget = 40000
iterations = 30
history = 5

[[config]]
name = "one-pool"
pools = 1

[[config]]
pools = 4
placement = "front_loaded"

[[config]]
filters = 16
iterations = 4
placement = "0,2"

[[config]]
pools = 9
"#;

    #[test]
    fn manifest_resolution() {
        let m = SweepManifest::parse(MANIFEST).unwrap();
        let r = m.resolve(10, 3, (32, 32));
        assert_eq!(r.len(), 4);
        assert_eq!(r[0].0, "one-pool");
        assert_eq!(r[1].0, "config1");
        let c0 = r[0].1.as_ref().unwrap();
        assert_eq!(c0.schedule.pool_count(), 1);
        assert!(param_count(c0).total <= 40_000);
        let c1 = r[1].1.as_ref().unwrap();
        assert_eq!(c1.schedule.positions(), vec![0, 1, 2, 3]);
        let c2 = r[2].1.as_ref().unwrap();
        assert_eq!((c2.filters, c2.iterations), (16, 4));
        assert_eq!(c2.schedule.positions(), vec![0, 2]);
        assert!(r[3].1.is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(SweepManifest::parse("[[config]]\nfilterz = 3\n").is_err());
    }
}
