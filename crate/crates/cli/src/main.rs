use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thrifty::data::ImageDataset;
use thrifty::gradcheck::{gradcheck, GradcheckConfig};
use thrifty::metrics::{self, MetricRow, SweepManifest};
use thrifty::model::{checkpoint, export_mean_activations, init_params, ActivationSite, ConvMode, ParamGroup};
use thrifty::ops::activation::Activation;
use thrifty::planner::{self, make_schedule, BudgetConvention, Placement, PlanRequest};
use thrifty::train::{self, AblationConfig, TrainConfig, TrainOptions, LAST_CHECKPOINT, METRICS_FILE};
use thrifty::{Error, Result, ThriftyConfig};

mod spec;

use spec::{parse_hw, ArchArgs, DataArgs, RunSpec, TrainArgs};

const SPEC_FILE: &str = "spec.toml";
const ABLATION_EPOCHS: usize = 150;

#[derive(Parser, Debug)]
#[command(name = "thrifty", version, about = "Train, size and inspect weight-shared recursive convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics and checkpoints
    Train(TrainCmd),
    /// Test accuracy of a checkpoint
    Eval(EvalCmd),
    /// Enumerate configurations under a parameter budget, cheapest first
    Plan(PlanCmd),
    /// Parameter and multiply-accumulate counts of one configuration
    Count(CountCmd),
    /// Compare analytic gradients with finite differences
    Gradcheck(GradcheckCmd),
    /// Binarize and freeze the shortcut weights, then retrain three ways
    Ablate(AblateCmd),
    /// Mean activation of every filter at every iteration, as CSV
    ExportActivations(ExportCmd),
    /// Train every configuration of a manifest and tabulate the results
    Sweep(SweepCmd),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML file with [model], [train] and [data] tables; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    data: DataArgs,
}

impl RunArgs {
    /// `base` is the training setup when no config file is given.
    fn spec(&self, base: TrainConfig) -> Result<RunSpec> {
        let mut spec = RunSpec::load(self.config.as_deref())?;
        if self.config.is_none() {
            spec.train = base;
        }
        self.arch.apply(&mut spec.model);
        self.train.apply(&mut spec.train);
        self.data.apply(&mut spec.data);
        if let Some(out) = &self.out {
            spec.out = Some(out.clone());
        }
        spec.train.validate()?;
        Ok(spec)
    }
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from last.ckpt in the output directory
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalCmd {
    /// Checkpoint file
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluation batch size
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
}

/// Shape of the data a model is sized for.
#[derive(Args, Debug)]
struct InputArgs {
    /// Number of classes
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Input channels
    #[arg(long, default_value_t = 3)]
    input_channels: usize,
    /// Input resolution, HxW or N
    #[arg(long, value_parser = parse_hw, default_value = "32x32")]
    input_hw: (usize, usize),
}

#[derive(Args, Debug)]
struct PlanCmd {
    /// Parameter budget
    #[arg(long)]
    budget: u64,
    /// Which count the budget constrains
    #[arg(long, default_value = "full")]
    convention: BudgetConvention,
    /// Iteration counts to try, comma-separated
    #[arg(long, value_delimiter = ',', required = true)]
    iterations: Vec<usize>,
    /// Shortcut histories to try, comma-separated
    #[arg(long, value_delimiter = ',', default_value = "0")]
    history: Vec<usize>,
    /// Pool counts to try, comma-separated
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pools: Vec<usize>,
    /// Placements to try; repeat the flag for several
    #[arg(long, default_value = "regular")]
    schedule: Vec<String>,
    /// Kernel size, HxW or N
    #[arg(long, value_parser = parse_hw, default_value = "3x3")]
    kernel: (usize, usize),
    /// Convolution parametrization
    #[arg(long, default_value = "classical")]
    conv_mode: ConvMode,
    #[command(flatten)]
    input: InputArgs,
    /// Also write the table to this CSV file
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CountCmd {
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Args, Debug)]
struct GradcheckCmd {
    /// Filter count
    #[arg(long, default_value_t = 4)]
    filters: usize,
    /// Iterations
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    /// Shortcut history
    #[arg(long, default_value_t = 2)]
    history: usize,
    /// Number of classes
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Number of regularly placed pools
    #[arg(long, default_value_t = 1)]
    pools: usize,
    /// Convolution parametrization
    #[arg(long, default_value = "classical")]
    conv_mode: ConvMode,
    /// Nonlinearity
    #[arg(long, default_value = "relu")]
    activation: Activation,
    /// Input resolution, HxW or N
    #[arg(long, value_parser = parse_hw, default_value = "8x8")]
    input_hw: (usize, usize),
    /// Samples in the batch
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Seed of the parameters and inputs
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true, value_parser = parse_group)]
    corrupt: Option<ParamGroup>,
}

/// Phase lengths follow --epochs [default: 150, drops at 50,100].
#[derive(Args, Debug)]
struct AblateCmd {
    #[command(flatten)]
    run: RunArgs,
    /// Initialization seed of the fresh-initialization variant [default: derived from --seed]
    #[arg(long)]
    fresh_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SiteArg {
    /// The state after each iteration
    State,
    /// The nonlinearity output before the shortcut is added
    PreShortcut,
}

#[derive(Args, Debug)]
struct ExportCmd {
    /// Checkpoint file
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Split to average over
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Where activations are measured
    #[arg(long, value_enum, default_value_t = SiteArg::State)]
    site: SiteArg,
    /// Batch size
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Output CSV file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepCmd {
    /// Manifest with [defaults] and [[config]] tables
    #[arg(long)]
    manifest: PathBuf,
    /// Training runs per configuration, seeds --seed, --seed+1, ...
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// TOML file with [train] and [data] tables; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Output CSV file; the table is printed either way
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_group(s: &str) -> std::result::Result<ParamGroup, String> {
    ParamGroup::parse(s).ok_or_else(|| format!("unknown parameter group {s:?}"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Schedule(_) | Error::Infeasible(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Checkpoint(_) | Error::Io { .. } | Error::Csv(_) => 3,
        Error::NonFinite(_) | Error::DegenerateBatch(_) | Error::Internal(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Plan(c) => cmd_plan(c),
        Command::Count(c) => cmd_count(c),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::ExportActivations(c) => cmd_export(c),
        Command::Sweep(c) => cmd_sweep(c),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn describe(config: &ThriftyConfig, input_hw: (usize, usize)) -> String {
    let p = planner::param_count(config);
    let m = planner::mac_count(config, input_hw);
    format!(
        "f={} T={} h={} pools_after={:?} conv_mode={:?} params_total={} macs_total={}",
        config.filters,
        config.iterations,
        config.history,
        config.schedule.positions(),
        config.conv_mode,
        p.total,
        m.total
    )
}

fn print_row(r: &MetricRow) {
    println!(
        "epoch {:>4}  lr {:<8} loss {:.4}  train {:6.2}%  test {:6.2}%",
        r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc
    );
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn hw(ds: &ImageDataset) -> (usize, usize) {
    let d = ds.images.dims();
    (d.h, d.w)
}

/// Records the resolved architecture in the spec so the echoed file
/// reproduces the run without re-solving the budget.
fn pin_model(spec: &mut RunSpec, config: &ThriftyConfig) {
    let m = &mut spec.model;
    m.filters = Some(config.filters);
    m.iterations = Some(config.iterations);
    m.history = Some(config.history);
    m.pools = Some(config.schedule.pool_count());
    m.placement = Some(Placement::Explicit(config.schedule.positions()).name());
    m.kernel = Some(config.kernel);
    m.conv_mode = Some(config.conv_mode);
    m.activation = Some(config.activation);
}

fn cmd_train(cmd: TrainCmd) -> Result<u8> {
    let mut spec = cmd.run.spec(TrainConfig::default())?;
    let out = spec
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory given (--out)".into()))?;
    spec.data.check()?;
    let data = spec.data.load()?;
    let config = spec.resolve_model(&data.train)?;
    println!("{}", describe(&config, hw(&data.train)));

    let (params, resume) = if cmd.resume {
        let ckpt = checkpoint::load::<f32>(out.join(LAST_CHECKPOINT))?;
        if ckpt.config != config {
            return Err(Error::Config("checkpoint was trained with a different model".into()));
        }
        let state = ckpt
            .training
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        (ckpt.params, Some(state))
    } else {
        (init_params::<f32>(&config, spec.train.seed)?, None)
    };

    create_dir(&out)?;
    pin_model(&mut spec, &config);
    spec.write(&out.join(SPEC_FILE))?;
    let outcome = train::train(
        &config,
        params,
        &data.train,
        &data.test,
        &spec.train,
        resume,
        TrainOptions {
            out_dir: Some(out.clone()),
            on_epoch: Some(Box::new(print_row)),
            ..Default::default()
        },
    )?;
    if let Some(acc) = outcome.final_test_acc() {
        println!("final test_acc {acc}");
    }
    println!("wrote {}", out.join(METRICS_FILE).display());
    Ok(0)
}

fn cmd_eval(cmd: EvalCmd) -> Result<u8> {
    let data = cmd.data.spec();
    data.check()?;
    let ckpt = checkpoint::load::<f32>(&cmd.checkpoint)?;
    let sets = data.load()?;
    if sets.test.class_count != ckpt.config.num_classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset {}",
            ckpt.config.num_classes, sets.test.class_count
        )));
    }
    let acc = train::evaluate(&ckpt.config, &ckpt.params, &sets.test, cmd.batch_size)?;
    println!("test_acc {acc}");
    Ok(0)
}

fn cmd_plan(cmd: PlanCmd) -> Result<u8> {
    let placements = cmd
        .schedule
        .iter()
        .map(|s| Placement::parse(s))
        .collect::<Result<Vec<_>>>()?;
    let mut template = ThriftyConfig::new(1, 1, 0, cmd.input.classes);
    template.kernel = cmd.kernel;
    template.conv_mode = cmd.conv_mode;
    template.input_channels = cmd.input.input_channels;
    let rows: Vec<_> = planner::plan(&PlanRequest {
        budget: cmd.budget,
        convention: cmd.convention,
        iterations: cmd.iterations,
        history: cmd.history,
        pools: cmd.pools,
        placements,
        template,
        input_hw: cmd.input.input_hw,
    })
    .into_iter()
    .map(|(_, r)| r)
    .collect();
    if rows.is_empty() {
        return Err(Error::Infeasible("no configuration fits the budget".into()));
    }
    println!(
        "{:>5} {:>4} {:>3} {:>6} {:>12} {:>12} {:>14}  placement",
        "f", "T", "h", "pools", "params_core", "params_total", "macs_total"
    );
    for r in &rows {
        println!(
            "{:>5} {:>4} {:>3} {:>6} {:>12} {:>12} {:>14}  {}",
            r.f, r.t, r.h, r.n_pools, r.params_core, r.params_total, r.macs_total, r.placement
        );
    }
    if let Some(path) = &cmd.csv {
        metrics::write_rows(path, &rows)?;
    }
    Ok(0)
}

fn cmd_count(cmd: CountCmd) -> Result<u8> {
    let mut entry = Default::default();
    cmd.arch.apply(&mut entry);
    let config = entry.resolve(cmd.input.classes, cmd.input.input_channels, cmd.input.input_hw)?;
    let p = planner::param_count(&config);
    let m = planner::mac_count(&config, cmd.input.input_hw);
    println!("filters        {}", config.filters);
    println!("iterations     {}", config.iterations);
    println!("history        {}", config.history);
    println!("pools_after    {:?}", config.schedule.positions());
    println!("params core    {}", p.core);
    println!("params alpha   {}", p.alpha_full);
    println!("params head    {}", p.head);
    println!("params total   {}", p.total);
    println!("params table1  {}", p.table1_total);
    println!("macs conv      {}", m.per_iteration.iter().sum::<u64>());
    println!("macs head      {}", m.head);
    println!("macs total     {}", m.total);
    Ok(0)
}

fn cmd_gradcheck(cmd: GradcheckCmd) -> Result<u8> {
    let mut model = ThriftyConfig::new(cmd.filters, cmd.iterations, cmd.history, cmd.classes);
    model.conv_mode = cmd.conv_mode;
    model.activation = cmd.activation;
    model.schedule = make_schedule(cmd.iterations, cmd.pools, &Placement::Regular, cmd.input_hw)?;
    model.validate()?;
    let report = gradcheck(&GradcheckConfig {
        model,
        batch: cmd.batch,
        input_hw: cmd.input_hw,
        step: cmd.step,
        tolerance: cmd.tolerance,
        seed: cmd.seed,
        corrupt: cmd.corrupt,
        ..Default::default()
    })?;
    for g in &report.groups {
        println!(
            "{:<6} {}  max_rel_err {:.3e}  max_abs_err {:.3e}  checked {}  kinks {}  skipped {}",
            g.group,
            if g.passed { "PASS" } else { "FAIL" },
            g.max_rel_err,
            g.max_abs_err,
            g.checked,
            g.kinks,
            g.skipped
        );
    }
    Ok(if report.passed() { 0 } else { 4 })
}

fn cmd_ablate(cmd: AblateCmd) -> Result<u8> {
    let mut spec = cmd.run.spec(TrainConfig::scaled(ABLATION_EPOCHS))?;
    let out = spec
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory given (--out)".into()))?;
    spec.data.check()?;
    let data = spec.data.load()?;
    let config = spec.resolve_model(&data.train)?;
    if !config.is_residual() {
        return Err(Error::Config("ablation needs --history ≥ 1".into()));
    }
    println!("{}", describe(&config, hw(&data.train)));

    let tc = &spec.train;
    let mut ab = AblationConfig::scaled(tc.epochs, tc.batch_size, tc.seed);
    ab.phase2 = TrainConfig {
        alpha_reg: None,
        ..tc.clone()
    };
    ab.phase1 = tc.clone();
    ab.phase1
        .alpha_reg
        .get_or_insert_with(|| thrifty::train::AlphaRegConfig::with_defaults(tc.epochs));
    if let Some(s) = cmd.fresh_seed {
        ab.fresh_seed = s;
    }

    create_dir(&out)?;
    spec.train = ab.phase1.clone();
    pin_model(&mut spec, &config);
    spec.write(&out.join(SPEC_FILE))?;
    let report = train::ablation_alpha::<f32>(&config, &data.train, &data.test, &ab, Some(&out), |phase, r| {
        print!("[{phase}] ");
        print_row(r);
    })?;
    report.write_csv(out.join("ablation.csv"))?;
    let alpha: Vec<Vec<f64>> = report
        .alpha
        .chunks(config.history + 1)
        .map(<[f64]>::to_vec)
        .collect();
    metrics::write_matrix(out.join("alpha.csv"), "t", "lag", &alpha)?;
    println!(
        "alpha distance to {{0,1}}: {:.4} -> {:.4}",
        report.alpha_start_distance, report.alpha_end_distance
    );
    for r in report.rows() {
        println!(
            "{:<10} final {:6.2}%  best {:6.2}%  {}",
            r.variant, r.final_test_acc, r.best_test_acc, r.description
        );
    }
    Ok(0)
}

fn cmd_export(cmd: ExportCmd) -> Result<u8> {
    let data = cmd.data.spec();
    data.check()?;
    let ckpt = checkpoint::load::<f32>(&cmd.checkpoint)?;
    let mut sets = data.load()?;
    let ds = match cmd.split {
        SplitArg::Train => {
            sets.train.augmentation = None;
            &sets.train
        }
        SplitArg::Test => &sets.test,
    };
    let site = match cmd.site {
        SiteArg::State => ActivationSite::State,
        SiteArg::PreShortcut => ActivationSite::PreShortcut,
    };
    let matrix = export_mean_activations(
        &ckpt.config,
        &ckpt.params,
        ds.eval_batches(cmd.batch_size).map(|b| b.images),
        site,
    )?;
    metrics::write_matrix(&cmd.out, "t", "filter", &matrix)?;
    println!(
        "wrote {}x{} matrix to {}",
        matrix.len(),
        matrix.first().map_or(0, Vec::len),
        cmd.out.display()
    );
    Ok(0)
}

fn cmd_sweep(cmd: SweepCmd) -> Result<u8> {
    let manifest = SweepManifest::load(&cmd.manifest).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
        e => e,
    })?;
    let mut spec = RunSpec::load(cmd.config.as_deref())?;
    cmd.train.apply(&mut spec.train);
    cmd.data.apply(&mut spec.data);
    spec.train.validate()?;
    spec.data.check()?;
    let data = spec.data.load()?;
    let d = data.train.images.dims();
    let configs = manifest.resolve(data.train.class_count, d.c, (d.h, d.w));
    let rows = metrics::sweep(&configs, &data.train, &data.test, &spec.train, cmd.repeats, |name, run, r| {
        eprint!("[{name} #{run}] ");
        eprintln!(
            "epoch {:>4}  train {:6.2}%  test {:6.2}%",
            r.epoch, r.train_acc, r.test_acc
        );
    });
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.2}"));
    println!(
        "{:<16} {:>5} {:>4} {:>3} {:>6} {:>12} {:>14} {:>8} {:>6}  status",
        "name", "f", "T", "h", "pools", "params_total", "macs_total", "test_acc", "std"
    );
    for r in &rows {
        let o = |v: Option<u64>| v.map_or_else(String::new, |v| v.to_string());
        println!(
            "{:<16} {:>5} {:>4} {:>3} {:>6} {:>12} {:>14} {:>8} {:>6}  {}",
            r.name,
            o(r.f.map(|v| v as u64)),
            o(r.t.map(|v| v as u64)),
            o(r.h.map(|v| v as u64)),
            o(r.n_pools.map(|v| v as u64)),
            o(r.params_total),
            o(r.macs_total),
            opt(r.test_acc),
            opt(r.test_acc_std),
            r.status
        );
    }
    if let Some(out) = &cmd.out {
        metrics::write_rows(out, &rows)?;
    }
    Ok(if rows.iter().all(|r| r.status == "ok") { 0 } else { 4 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Infeasible("x".into())), 2);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 3);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 4);
    }

    #[test]
    fn flags_override_file() {
        let cli = Cli::try_parse_from(["thrifty", "count", "--filters", "64", "--iterations", "15", "--history", "5"]).unwrap();
        let Command::Count(c) = cli.command else { panic!() };
        let mut entry = thrifty::metrics::SweepEntry {
            filters: Some(8),
            ..Default::default()
        };
        c.arch.apply(&mut entry);
        assert_eq!(entry.filters, Some(64));
        assert_eq!(entry.iterations, Some(15));
    }
}
