//! Central-difference verification of the analytic gradients of the full
//! network, grouped by parameter kind.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::config::ThriftyConfig;
use crate::model::forward::{backward, forward};
use crate::model::params::{init_params, ParamGroup, Params};
use crate::ops::batchnorm::Mode;
use crate::ops::loss::softmax_cross_entropy;
use crate::planner::{make_schedule, Placement};
use crate::tape::Tape;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub model: ThriftyConfig,
    pub batch: usize,
    pub input_hw: (usize, usize),
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient of one group.
    pub corrupt: Option<ParamGroup>,
}

impl Default for GradcheckConfig {
    /// f=4, T=3, h=2, K=3, one pool, two 8×8 samples.
    fn default() -> Self {
        let model = ThriftyConfig::new(4, 3, 2, 3)
            .with_schedule(make_schedule(3, 1, &Placement::Regular, (8, 8)).expect("fits"));
        GradcheckConfig {
            model,
            batch: 2,
            input_hw: (8, 8),
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Entries whose ±step evaluations crossed a ReLU or max-pool switch
    /// and were re-checked with a smaller step.
    pub kinks: usize,
    /// Entries still crossing a switch at the smallest step; not judged.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Moves the parameters away from their initial values so every group
/// (including gamma, beta, bias and α) has generic, non-trivial
/// gradients.
pub fn randomized_params(config: &ThriftyConfig, seed: u64) -> Result<Params<f64>> {
    let mut params = init_params::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for state in &mut params.bn {
        for g in &mut state.gamma {
            *g = rng.gen_range(0.5..1.5);
        }
        for b in &mut state.beta {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    if let Some(alpha) = params.alpha.as_mut() {
        for v in alpha.values_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
    }
    for b in params.fc_bias.data_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    Ok(params)
}

/// Times the step is divided by 10 when an evaluation crosses a switch.
const KINK_RETRIES: usize = 3;

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let config = &cfg.model;
    let mut params = randomized_params(config, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let dims = Dims::new(cfg.batch, config.input_channels, cfg.input_hw.0, cfg.input_hw.1);
    let x = Tensor4::<f64>::uniform(dims, 1.0, &mut rng);
    let labels: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..config.num_classes)).collect();

    let mut tape = Tape::new();
    let fwd = forward(config, &params, &x, Mode::Train, &mut tape, false)?;
    let (_, seed) = softmax_cross_entropy(tape.value(fwd.logits), &labels)?;
    let grads = backward(&params, &tape, &fwd, seed)?;

    let base = tape.branch_signature();
    drop(tape);

    // loss and branch signature at `p`
    let loss = |p: &Params<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let fwd = forward(config, p, &x, Mode::Train, &mut tape, false)?;
        let l = softmax_cross_entropy(tape.value(fwd.logits), &labels)?.0;
        Ok((l, tape.branch_signature()))
    };

    let mut groups: Vec<GroupReport> = Vec::new();
    for (slot, (id, analytic)) in grads.entries.iter().enumerate() {
        let group = id.group();
        let name = group.name().to_owned();
        if !groups.iter().any(|g| g.group == name) {
            groups.push(GroupReport {
                group: name.clone(),
                checked: 0,
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                kinks: 0,
                skipped: 0,
                passed: true,
            });
        }
        for (i, &a) in analytic.iter().enumerate() {
            let a = if cfg.corrupt == Some(group) { a * 1.1 + 1e-3 } else { a };
            let orig = params.trainables()[slot].1[i];
            let set = |p: &mut Params<f64>, v: f64| p.trainables_mut()[slot].1[i] = v;
            let mut step = cfg.step;
            let mut numeric = None;
            let mut crossed = false;
            for _ in 0..=KINK_RETRIES {
                set(&mut params, orig + step);
                let (up, sig_up) = loss(&params)?;
                set(&mut params, orig - step);
                let (down, sig_down) = loss(&params)?;
                set(&mut params, orig);
                if sig_up == base && sig_down == base {
                    numeric = Some((up - down) / (2.0 * step));
                    break;
                }
                crossed = true;
                step /= 10.0;
            }
            let report = groups.iter_mut().find(|g| g.group == name).expect("inserted");
            report.kinks += crossed as usize;
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let rel = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.passed &= rel < cfg.tolerance;
        }
    }
    // keep a stable order regardless of conv mode
    groups.sort_by_key(|g| ParamGroup::parse(&g.group).map(|p| p as usize));
    Ok(GradcheckReport { groups })
}
