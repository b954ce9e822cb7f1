//! `il-lab`: training runs, gradient checks and spacing sweeps.
//!
//! Exit codes: 0 success, 1 numeric failure or gradient check over tolerance,
//! 2 configuration error, 3 data error.

mod plot;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use il_lab::data::{
    load_mnist_dir, run_training_observed, two_moons, write_metrics_csv, write_weights, Dataset, Metrics, RunConfig,
    Split,
};
use il_lab::energy::{Activation, Init, LossKind, NetworkSpec};
use il_lab::numeric::{finite_difference_gradient, relative_error, Matrix, Rng, Vector};
use il_lab::trainers::{batch_gradient, forward_pass, AdaptiveTau, MethodKind, SpacingSchedule, TauPolicy, TrainerConfig};

#[derive(Parser, Debug)]
#[command(name = "il-lab", version, about = "Inference-learning experiments on MNIST and synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network and write per-epoch metrics as CSV
    Train(TrainArgs),
    /// Compare a method's gradient with finite differences and back-propagation
    Gradcheck(GradcheckArgs),
    /// Train once per spacing value and plot all runs together
    Sweep(SweepArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Bp,
    FenchelBp,
    Gcl,
    Mac,
    Lpom,
}

impl Method {
    fn kind(self) -> MethodKind {
        match self {
            Method::Bp => MethodKind::Bp,
            Method::FenchelBp => MethodKind::FenchelBp,
            Method::Gcl => MethodKind::Gcl,
            Method::Mac => MethodKind::MacLcl,
            Method::Lpom => MethodKind::Lpom,
        }
    }

    fn default_spacing(self) -> f64 {
        match self {
            Method::Bp => 1.0,
            _ => 0.1,
        }
    }

    /// Name of the spacing parameter in labels and file names.
    fn spacing_name(self) -> &'static str {
        match self {
            Method::Bp | Method::FenchelBp => "tau",
            _ => "beta",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Act {
    Relu,
    Hardsigmoid,
}

impl From<Act> for Activation {
    fn from(a: Act) -> Activation {
        match a {
            Act::Relu => Activation::Relu,
            Act::Hardsigmoid => Activation::HardSigmoid,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum LossArg {
    Squared,
    CrossEntropy,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum InitArg {
    Glorot,
    Negative,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Policy {
    /// The spacing schedule as given
    Fixed,
    /// One step per layer and sample from the pre-activation to feedback ratio
    Layer,
    /// Per-unit steps that move dead units back into their active region
    Escape,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "bp")]
    method: Method,
    /// Layer widths, input first
    #[arg(long, default_value = "784-64-64-64-10")]
    arch: String,
    /// Hidden-layer activation
    #[arg(long, value_enum, default_value = "relu")]
    activation: Act,
    /// Squared error uses a linear output, cross-entropy a softmax output
    #[arg(long, value_enum, default_value = "squared")]
    loss: LossArg,
    /// Append a constant input to every layer
    #[arg(long)]
    bias: bool,
    #[arg(long, value_enum, default_value = "glorot")]
    init: InitArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Spacing τ: one value or a comma-separated per-layer list
    #[arg(long, conflicts_with = "beta")]
    tau: Option<String>,
    /// Spacing β: one value or a comma-separated per-layer list
    #[arg(long)]
    beta: Option<String>,
    #[arg(long, value_enum, default_value = "fixed")]
    tau_policy: Policy,
    /// Shorthand for `--tau-policy escape`
    #[arg(long)]
    adaptive_tau: bool,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau_min: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.125)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Directory with the MNIST IDX files (optionally gzipped)
    #[arg(long, env = "IL_LAB_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Use a seeded two-moons problem instead of MNIST (architecture 2-...-2)
    #[arg(long)]
    synthetic: bool,
    /// Use only the first N training samples
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test samples
    #[arg(long)]
    test_limit: Option<usize>,
    /// Write 0 for wall_ms so that output is reproducible byte for byte
    #[arg(long)]
    no_timing: bool,
    /// Do not print per-epoch progress
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Also write an SVG of error against epoch
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Dump the trained weights as flat little-endian binary
    #[arg(long)]
    weights_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated τ values, one run each
    #[arg(long, conflicts_with = "beta_list", required_unless_present = "beta_list")]
    tau_list: Option<String>,
    /// Comma-separated β values, one run each
    #[arg(long)]
    beta_list: Option<String>,
    /// Base CSV path; each run appends its spacing value to the stem
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    /// Combined SVG (default: the base path with an .svg extension)
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "fenchel-bp")]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layer widths, at most 32 each
    #[arg(long, default_value = "4-8-8-3")]
    dims: String,
    #[arg(long, value_enum, default_value = "relu")]
    activation: Act,
    #[arg(long, conflicts_with = "beta")]
    tau: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    /// Largest accepted relative error against finite differences
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Numeric(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numeric(m) => write!(f, "{m}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config<E: fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn parse_dims(s: &str) -> CliResult<Vec<usize>> {
    let dims = s
        .split('-')
        .map(|d| d.trim().parse::<usize>().map_err(|_| config(format!("bad layer width {d:?} in {s:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    if dims.len() < 2 || dims.contains(&0) {
        return Err(config(format!("architecture {s:?} needs at least two positive widths")));
    }
    Ok(dims)
}

fn parse_list(s: &str) -> CliResult<Vec<f64>> {
    let values = s
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.trim().parse::<f64>().map_err(|_| config(format!("bad number {v:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    if values.is_empty() {
        return Err(config("empty list"));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(config(format!("spacing values must be positive, got {v}")));
    }
    Ok(values)
}

fn schedule(spec: Option<&str>, method: Method, depth: usize) -> CliResult<SpacingSchedule> {
    let values = match spec {
        Some(s) => parse_list(s)?,
        None => vec![method.default_spacing()],
    };
    let steps = match values.len() {
        1 => vec![values[0]; depth],
        n if n == depth => values,
        n => return Err(config(format!("{n} spacing values for {depth} layers"))),
    };
    SpacingSchedule::new(steps).map_err(config)
}

fn tau_policy(m: &ModelArgs) -> CliResult<TauPolicy> {
    let mut p = AdaptiveTau::default();
    let policy = if m.adaptive_tau { Policy::Escape } else { m.tau_policy };
    if policy == Policy::Escape {
        p.rho = 2.0;
    }
    if let Some(r) = m.rho {
        p.rho = r;
    }
    if let Some(t) = m.tau_min {
        p.tau_min = t;
    }
    if !(p.rho > 0.0 && p.tau_min > 0.0) {
        return Err(config("--rho and --tau-min must be positive"));
    }
    if policy != Policy::Fixed && m.method != Method::FenchelBp {
        return Err(config("adaptive spacing applies to fenchel-bp only"));
    }
    Ok(match policy {
        Policy::Fixed => TauPolicy::Fixed,
        Policy::Layer => TauPolicy::AdaptiveLayer(p),
        Policy::Escape => TauPolicy::DeadUnitEscape(p),
    })
}

fn build_net(m: &ModelArgs, dims: &[usize], rng: &mut Rng) -> CliResult<NetworkSpec> {
    let (output, loss) = match m.loss {
        LossArg::Squared => (Activation::Identity, LossKind::SquaredError),
        LossArg::CrossEntropy => (Activation::Softmax, LossKind::CrossEntropy),
    };
    if m.method == Method::Mac && loss == LossKind::CrossEntropy {
        return Err(config("mac supports the squared loss only"));
    }
    let init = match m.init {
        InitArg::Glorot => Init::Glorot,
        InitArg::Negative => Init::Negative,
    };
    let form = m.method.kind().natural_form();
    NetworkSpec::mlp(dims, m.activation.into(), output, form, loss, m.bias, init, rng).map_err(config)
}

struct Experiment {
    net: NetworkSpec,
    trainer: TrainerConfig,
    run: RunConfig,
}

fn experiment(r: &RunArgs, spacing: Option<&str>) -> CliResult<Experiment> {
    let m = &r.model;
    let dims = parse_dims(&m.arch)?;
    let depth = dims.len() - 1;
    let sched = schedule(spacing, m.method, depth)?;
    let net = build_net(m, &dims, &mut Rng::fork(m.seed, 0))?;
    let trainer = TrainerConfig::new(m.method.kind(), sched).with_tau_policy(tau_policy(m)?);
    if r.batch == 0 {
        return Err(config("--batch must be at least 1"));
    }
    if !(r.lr > 0.0 && r.lr.is_finite()) {
        return Err(config("--lr must be positive"));
    }
    let run = RunConfig {
        epochs: r.epochs,
        batch_size: r.batch,
        lr: r.lr,
        timing: !r.no_timing,
    };
    Ok(Experiment { net, trainer, run })
}

fn load_data(r: &RunArgs) -> CliResult<(Dataset, Dataset)> {
    let (train, test) = if r.synthetic {
        let mut rng = Rng::fork(r.model.seed, 2);
        let train = two_moons(r.train_limit.unwrap_or(1000), 0.1, &mut rng);
        let test = two_moons(r.test_limit.unwrap_or(500), 0.1, &mut rng);
        (train, test)
    } else {
        let dir = r.data_dir.as_ref().ok_or_else(|| {
            Failure::Data("no MNIST directory: pass --data-dir, set IL_LAB_DATA_DIR or use --synthetic".into())
        })?;
        let load = |split| load_mnist_dir(dir, split).map_err(|e| Failure::Data(e.to_string()));
        (load(Split::Train)?, load(Split::Test)?)
    };
    let limit = |d: Dataset, n: Option<usize>| match n {
        Some(n) => d.head(n),
        None => d,
    };
    Ok((limit(train, r.train_limit), limit(test, r.test_limit)))
}

fn check_shapes(net: &NetworkSpec, data: &Dataset) -> CliResult<()> {
    if net.input_dim() != data.input_dim() || net.output_dim() != data.n_classes {
        return Err(config(format!(
            "architecture maps {} to {} but {} has {} inputs and {} classes",
            net.input_dim(),
            net.output_dim(),
            data.name,
            data.input_dim(),
            data.n_classes
        )));
    }
    Ok(())
}

fn train_once(
    exp: &mut Experiment,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    quiet: bool,
    label: &str,
) -> CliResult<Vec<Metrics>> {
    let mut rng = Rng::fork(seed, 1);
    let mut last_train = 0.0;
    let observe = |m: &Metrics| {
        if quiet {
            return;
        }
        match m.split {
            Split::Train => last_train = m.error_rate,
            Split::Test => eprintln!(
                "{label} epoch {:>3}  train {:6.2}%  test {:6.2}%  loss {:.5}",
                m.epoch,
                100.0 * last_train,
                100.0 * m.error_rate,
                m.mean_loss
            ),
        }
    };
    run_training_observed(&mut exp.net, &exp.trainer, &exp.run, train, test, &mut rng, observe)
        .map_err(|e| Failure::Numeric(format!("training aborted: {e}")))
}

fn write_csv(metrics: &[Metrics], path: &Path) -> CliResult<()> {
    write_metrics_csv(metrics, path).map_err(|e| Failure::Data(e.to_string()))
}

fn write_svg(series: &[plot::Series], path: &Path) -> CliResult<()> {
    std::fs::write(path, plot::render(series)).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let m = &a.run.model;
    let mut exp = experiment(&a.run, m.tau.as_deref().or(m.beta.as_deref()))?;
    let (train, test) = load_data(&a.run)?;
    check_shapes(&exp.net, &train)?;
    let label = m.method.kind().name();
    let metrics = train_once(&mut exp, m.seed, &train, &test, a.run.quiet, label)?;
    write_csv(&metrics, &a.out)?;
    if let Some(p) = &a.plot {
        write_svg(
            &[plot::Series {
                label: label.to_string(),
                metrics: &metrics,
            }],
            p,
        )?;
    }
    if let Some(p) = &a.weights_out {
        write_weights(&exp.net, p).map_err(|e| Failure::Data(e.to_string()))?;
    }
    Ok(())
}

fn suffixed(base: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = base.file_stem().map_or_else(|| "sweep".into(), |s| s.to_string_lossy().into_owned());
    base.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let m = &a.run.model;
    if m.tau.is_some() || m.beta.is_some() {
        return Err(config("use --tau-list or --beta-list instead of --tau/--beta in a sweep"));
    }
    let (list, name) = match (&a.tau_list, &a.beta_list) {
        (Some(t), _) => (t, "tau"),
        (None, Some(b)) => (b, "beta"),
        (None, None) => return Err(config("--tau-list or --beta-list is required")),
    };
    let values = parse_list(list)?;
    let (train, test) = load_data(&a.run)?;
    let mut runs = Vec::with_capacity(values.len());
    for v in &values {
        let spacing = v.to_string();
        let mut exp = experiment(&a.run, Some(&spacing))?;
        check_shapes(&exp.net, &train)?;
        let label = format!("{} {name}={spacing}", m.method.kind().name());
        let metrics = train_once(&mut exp, m.seed, &train, &test, a.run.quiet, &label)?;
        write_csv(&metrics, &suffixed(&a.out, &format!("-{name}{spacing}"), "csv"))?;
        runs.push((label, metrics));
    }
    let series: Vec<plot::Series> = runs
        .iter()
        .map(|(label, metrics)| plot::Series {
            label: label.clone(),
            metrics,
        })
        .collect();
    let svg = a.plot.clone().unwrap_or_else(|| suffixed(&a.out, "", "svg"));
    write_svg(&series, &svg)
}

/// Input and target whose pre-activations stay `margin` away from every kink.
fn smooth_sample(net: &NetworkSpec, rng: &mut Rng, margin: f64) -> CliResult<(Vector, Vector)> {
    for _ in 0..10_000 {
        let x = rng.uniform_vector(net.input_dim(), -1.0, 1.0);
        let s = forward_pass(net, &x).map_err(config)?;
        let clear = net.layers.iter().zip(&s.pre).all(|(l, u)| {
            u.iter().all(|&v| match l.activation {
                Activation::Relu => v.abs() > margin,
                Activation::HardSigmoid => v.abs() > margin && (v - 1.0).abs() > margin,
                _ => true,
            })
        });
        if clear {
            return Ok((x, rng.uniform_vector(net.output_dim(), -1.0, 1.0)));
        }
    }
    Err(Failure::Numeric("no input away from activation kinks found".into()))
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let dims = parse_dims(&a.dims)?;
    if dims.iter().any(|&d| d > 32) {
        return Err(config("gradcheck widths are limited to 32"));
    }
    if !(a.tol > 0.0) {
        return Err(config("--tol must be positive"));
    }
    let depth = dims.len() - 1;
    let sched = schedule(a.tau.as_deref().or(a.beta.as_deref()), a.method, depth)?;
    let mut rng = Rng::new(a.seed);
    let net = NetworkSpec::mlp(
        &dims,
        a.activation.into(),
        Activation::Identity,
        a.method.kind().natural_form(),
        LossKind::SquaredError,
        false,
        Init::Glorot,
        &mut rng,
    )
    .map_err(config)?;
    let (x, y) = smooth_sample(&net, &mut rng, 0.02)?;
    let numeric = |e: il_lab::Error| Failure::Numeric(e.to_string());

    let cfg = TrainerConfig::new(a.method.kind(), sched);
    let (got, _) = batch_gradient(&net, &[&x], &[&y], &cfg).map_err(numeric)?;
    let bp_net = net.with_form(MethodKind::Bp.natural_form());
    let bp_cfg = TrainerConfig::new(MethodKind::Bp, SpacingSchedule::uniform(depth, 1.0).map_err(config)?);
    let (bp, _) = batch_gradient(&bp_net, &[&x], &[&y], &bp_cfg).map_err(numeric)?;

    let mut fd_err = 0.0f64;
    let mut bp_err = 0.0f64;
    for (i, g) in got.iter().enumerate() {
        let fd = finite_difference_gradient(
            |w: &Matrix| {
                let mut n = bp_net.clone();
                n.layers[i].weight = w.clone();
                n.deep_loss(&x, &y)
            },
            &net.layers[i].weight,
            1e-6,
        )
        .map_err(numeric)?;
        fd_err = fd_err.max(relative_error(g, &fd));
        bp_err = bp_err.max(relative_error(g, &bp[i]));
    }
    let spacing: Vec<String> = cfg.schedule.steps().iter().map(f64::to_string).collect();
    println!(
        "method={} dims={} {}={} max_rel_err_fd={fd_err:.3e} max_rel_err_bp={bp_err:.3e} tol={:e}",
        a.method.kind().name(),
        a.dims,
        a.method.spacing_name(),
        spacing.join(","),
        a.tol
    );
    if fd_err <= a.tol {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(Failure::Numeric(format!("relative error {fd_err:.3e} exceeds {:e}", a.tol)))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("il-lab: {f}");
            ExitCode::from(f.code())
        }
    }
}
