//! Parameter and multiply-accumulate accounting, budget-driven filter
//! selection and downsampling schedule templates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{ConvMode, DownsampleSchedule, ThriftyConfig};

/// Trainable parameter counts of one configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Shared convolution plus per-iteration gamma and beta.
    pub core: u64,
    /// `T·(h+1)`: size of the full α matrix.
    pub alpha_full: u64,
    /// Classifier weights and bias, `f·K + K`.
    pub head: u64,
    /// Exact number of trainables: core, α (residual only) and head.
    pub total: u64,
    /// `core + h·T`, the tabulated convention.
    pub table1_total: u64,
}

/// Which total a parameter budget constrains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetConvention {
    /// `ParamCount::total`.
    #[default]
    Full,
    /// `ParamCount::table1_total` (no head, `h·T` shortcut weights).
    Table1,
}

impl std::str::FromStr for BudgetConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(BudgetConvention::Full),
            "table1" => Ok(BudgetConvention::Table1),
            _ => Err(Error::Config(format!("unknown budget convention {s:?} (full, table1)"))),
        }
    }
}

impl ParamCount {
    pub fn budgeted(&self, convention: BudgetConvention) -> u64 {
        match convention {
            BudgetConvention::Full => self.total,
            BudgetConvention::Table1 => self.table1_total,
        }
    }
}

/// Multiply-accumulates for one input sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MacCount {
    pub per_iteration: Vec<u64>,
    pub head: u64,
    pub total: u64,
}

struct Shape {
    f: u64,
    ab: u64,
    t: u64,
    h: u64,
    k: u64,
    grouped: bool,
}

impl Shape {
    fn of(config: &ThriftyConfig) -> Self {
        Shape {
            f: config.filters as u64,
            ab: (config.kernel.0 * config.kernel.1) as u64,
            t: config.iterations as u64,
            h: config.history as u64,
            k: config.num_classes as u64,
            grouped: config.conv_mode == ConvMode::Grouped,
        }
    }

    fn count(&self) -> ParamCount {
        let Shape { f, ab, t, h, k, .. } = *self;
        let conv = if self.grouped { f * (ab + f) } else { f * f * ab };
        let core = conv + 2 * f * t;
        let alpha_full = t * (h + 1);
        let head = f * k + k;
        let total = core + if h > 0 { alpha_full } else { 0 } + head;
        ParamCount {
            core,
            alpha_full,
            head,
            total,
            table1_total: core + h * t,
        }
    }
}

pub fn param_count(config: &ThriftyConfig) -> ParamCount {
    Shape::of(config).count()
}

/// Analytic multiply-accumulate count for one `input_hw` sample. Only
/// convolutions and the classifier contribute.
pub fn mac_count(config: &ThriftyConfig, input_hw: (usize, usize)) -> MacCount {
    let s = Shape::of(config);
    let per_pixel = if s.grouped { s.f * s.ab + s.f * s.f } else { s.f * s.f * s.ab };
    let per_iteration: Vec<u64> = config
        .schedule
        .resolutions(input_hw)
        .iter()
        .take(config.iterations)
        .map(|&(h, w)| per_pixel * (h * w) as u64)
        .collect();
    let head = s.f * s.k;
    let total = per_iteration.iter().sum::<u64>() + head;
    MacCount {
        per_iteration,
        head,
        total,
    }
}

/// Largest `f` whose budgeted count fits `budget`. Every field of
/// `template` except `filters` is kept.
pub fn solve_filters(
    budget: u64,
    template: &ThriftyConfig,
    convention: BudgetConvention,
) -> Result<usize> {
    let mut s = Shape::of(template);
    let fits = |s: &mut Shape, f: u64| {
        s.f = f;
        s.count().budgeted(convention) <= budget
    };
    // count(f) = q·f² + l·f + c
    let q = if s.grouped { 1 } else { s.ab };
    let l = if s.grouped { s.ab } else { 0 }
        + 2 * s.t
        + match convention {
            BudgetConvention::Full => s.k,
            BudgetConvention::Table1 => 0,
        };
    let c = {
        s.f = 0;
        s.count().budgeted(convention)
    };
    if !fits(&mut s, 1) {
        s.f = 1;
        return Err(Error::Infeasible(format!(
            "budget {budget} is below the {} parameters of a single filter",
            s.count().budgeted(convention)
        )));
    }
    let (q, l, rest) = (q as f64, l as f64, (budget - c) as f64);
    let mut f = ((-l + (l * l + 4.0 * q * rest).sqrt()) / (2.0 * q)).floor().max(1.0) as u64;
    while f > 1 && !fits(&mut s, f) {
        f -= 1;
    }
    while fits(&mut s, f + 1) {
        f += 1;
    }
    Ok(f as usize)
}

/// Where the pools of a schedule go.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Evenly spaced: pool `k` fires after iteration `⌊(k+1)·T/(n+1)⌋ − 1`.
    Regular,
    /// Pools after iterations `0..n`.
    FrontLoaded,
    /// Pools after the listed iterations.
    Explicit(Vec<usize>),
}

impl Placement {
    /// `regular`, `front_loaded` / `front-loaded`, or a comma-separated
    /// list of iteration indices.
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "regular" => Ok(Placement::Regular),
            "front_loaded" | "front-loaded" => Ok(Placement::FrontLoaded),
            list => list
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim().parse::<usize>().map_err(|_| {
                        Error::Config(format!("bad schedule placement {text:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Placement::Explicit),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Placement::Regular => "regular".into(),
            Placement::FrontLoaded => "front_loaded".into(),
            Placement::Explicit(p) => p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        }
    }
}

pub fn make_schedule(
    iterations: usize,
    n_pools: usize,
    placement: &Placement,
    input_hw: (usize, usize),
) -> Result<DownsampleSchedule> {
    if n_pools > iterations {
        return Err(Error::Config(format!(
            "{n_pools} pools do not fit in {iterations} iterations"
        )));
    }
    let positions: Vec<usize> = match placement {
        Placement::Regular if n_pools == iterations => (0..n_pools).collect(),
        Placement::Regular => (0..n_pools)
            .map(|k| (k + 1) * iterations / (n_pools + 1) - 1)
            .collect(),
        Placement::FrontLoaded => (0..n_pools).collect(),
        Placement::Explicit(p) => {
            if p.len() != n_pools {
                return Err(Error::Config(format!(
                    "explicit schedule lists {} pools, expected {n_pools}",
                    p.len()
                )));
            }
            p.clone()
        }
    };
    let schedule = DownsampleSchedule::from_positions(iterations, &positions)?;
    schedule
        .check_fits(input_hw)
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(schedule)
}

/// One row of a plan report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRow {
    pub f: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub h: usize,
    pub n_pools: usize,
    pub params_core: u64,
    pub params_total: u64,
    pub macs_total: u64,
    pub placement: String,
}

impl PlanRow {
    pub fn of(config: &ThriftyConfig, placement: &Placement, input_hw: (usize, usize)) -> Self {
        let p = param_count(config);
        PlanRow {
            f: config.filters,
            t: config.iterations,
            h: config.history,
            n_pools: config.schedule.pool_count(),
            params_core: p.core,
            params_total: p.total,
            macs_total: mac_count(config, input_hw).total,
            placement: placement.name(),
        }
    }
}

impl crate::metrics::CsvRow for PlanRow {
    const HEADER: &'static [&'static str] = &[
        "f",
        "T",
        "h",
        "n_pools",
        "params_core",
        "params_total",
        "macs_total",
        "placement",
    ];
}

/// Search space of [`plan`].
#[derive(Clone, Debug)]
pub struct PlanRequest {
    pub budget: u64,
    pub convention: BudgetConvention,
    pub iterations: Vec<usize>,
    pub history: Vec<usize>,
    pub pools: Vec<usize>,
    pub placements: Vec<Placement>,
    /// Kernel, conv mode, classes and input channels.
    pub template: ThriftyConfig,
    pub input_hw: (usize, usize),
}

/// Solves `f` for every combination in the request and returns the
/// feasible configurations sorted by Mac total. Infeasible combinations
/// are skipped.
pub fn plan(req: &PlanRequest) -> Vec<(ThriftyConfig, PlanRow)> {
    let mut rows = Vec::new();
    for &t in &req.iterations {
        for &h in &req.history {
            for &n in &req.pools {
                for placement in &req.placements {
                    let Ok(schedule) = make_schedule(t, n, placement, req.input_hw) else {
                        continue;
                    };
                    let mut config = req.template.clone();
                    config.iterations = t;
                    config.history = h;
                    config.schedule = schedule;
                    let Ok(f) = solve_filters(req.budget, &config, req.convention) else {
                        continue;
                    };
                    config.filters = f;
                    if config.validate().is_err() {
                        continue;
                    }
                    let row = PlanRow::of(&config, placement, req.input_hw);
                    rows.push((config, row));
                }
            }
        }
    }
    rows.sort_by_key(|(_, r)| r.macs_total);
    rows
}
