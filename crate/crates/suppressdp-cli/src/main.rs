mod config;
mod files;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use suppressdp::accounting::{
    amplify_poisson, calibrate_sampling, calibrate_suppression, suppression_bound, Branch,
    MMParams, Sensitivity,
};
use suppressdp::harness::{
    self, contour_csv, gen_synthetic_clusters, known_bounds, metric_mode_error, metric_mpe,
    run_sampling_experiment, run_suppression_experiment, utility_differences, wilson_ci,
    write_rows, DatasetSpec, DeltaRule, ExperimentConfig, OutputFormat, ADULT_NUMERIC_COLUMNS,
    CI_LEVEL, DEFAULT_SCALE,
};
use suppressdp::mechanisms::{MechanismKind, NoiseKind};
use suppressdp::oracle::{
    deterministic_sensitivity, neighbor_pairs_within, submultisets, suppression_theorem_bounds,
    tight_dp_of_finite_mechanism, verify_bound_forward, verify_bound_inverse,
    DEFAULT_FORWARD_BUDGET,
};
use suppressdp::suppression::{DistanceFn, SuppressionKernel, Suppressor};
use suppressdp::{Database, PrivacyParams, Record, ValueBounds};

/// Privacy accounting, oracles and utility experiments for suppression
/// algorithms.
#[derive(Debug, Parser)]
#[command(name = "suppressdp", version)]
struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write rows here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Row format: jsonl or csv.
    #[arg(long, global = true, default_value_t = OutputFormat::Jsonl)]
    format: OutputFormat,
    /// Multiplier on the default repetition counts.
    #[arg(long, global = true, default_value_t = DEFAULT_SCALE)]
    scale: f64,
    /// File of key=value lines, one per flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Guarantee of a mechanism preceded by Poisson sampling.
    Amplify {
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Keep probability.
        #[arg(long)]
        p: f64,
    },
    /// Base budget that meets a target after sampling (--p) or outlier-score
    /// suppression (--m, --M).
    Calibrate {
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long, conflicts_with_all = ["m", "big_m"], required_unless_present = "m")]
        p: Option<f64>,
        #[arg(long, requires = "big_m")]
        m: Option<f64>,
        #[arg(long = "M", requires = "m")]
        big_m: Option<f64>,
    },
    /// Outlier-score suppression bound.
    EpsS {
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long)]
        m: f64,
        #[arg(long = "M")]
        big_m: f64,
    },
    /// Numerical check of the suppression bound.
    #[command(subcommand)]
    Verify(VerifyCmd),
    /// Exact privacy oracles on small inputs.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Utility experiments.
    #[command(subcommand)]
    Run(RunCmd),
    /// Synthetic clustering points (or their centers).
    Synth {
        #[arg(long)]
        centers: bool,
    },
    /// Utility metrics and intervals.
    #[command(subcommand)]
    Metrics(MetricsCmd),
}

#[derive(Debug, Subcommand)]
enum VerifyCmd {
    Forward {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        m: f64,
        #[arg(long = "M")]
        big_m: f64,
        /// Objective evaluations of the stochastic search.
        #[arg(long, default_value_t = DEFAULT_FORWARD_BUDGET)]
        budget: u64,
    },
    Inverse {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        m: f64,
        #[arg(long = "M")]
        big_m: f64,
    },
}

#[derive(Debug, Subcommand)]
enum OracleCmd {
    /// Suppression-theorem bounds of two explicit kernels.
    Kernel {
        /// Values of the 1-dim database D.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        records: Vec<f64>,
        /// The record added to form D + y.
        #[arg(long, allow_hyphen_values = true)]
        y: f64,
        /// Kernel of D.
        #[arg(long)]
        kernel: PathBuf,
        /// Kernel of D + y, with y as the last record.
        #[arg(long)]
        kernel_plus: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        lower: f64,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        upper: f64,
    },
    /// Tight epsilon of a finite mechanism given by its output tables.
    Tight {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Neighboring inputs as a:b pairs; all pairs by default.
        #[arg(long)]
        pairs: Option<String>,
    },
    /// Sensitivity of a deterministic suppression over all sub-multisets of
    /// a universe.
    Sensitivity {
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        universe: Vec<f64>,
        #[arg(long, value_enum)]
        algorithm: Algorithm,
        /// Set suppression keeps records at or below this value.
        #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
        cutoff: f64,
        /// Average-distance threshold.
        #[arg(long, default_value_t = 0.5)]
        k: f64,
        /// Fraction removed by top-fraction suppression.
        #[arg(long, default_value_t = 0.25)]
        fraction: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        lower: f64,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        upper: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Algorithm {
    Set,
    AvgThreshold,
    TopFraction,
}

#[derive(Debug, Subcommand)]
enum RunCmd {
    /// Plain mechanism against Poisson-preprocessed runs over a p grid.
    Sampling(RunArgs),
    /// Plain mechanism against outlier-score suppression over an (m, M) grid.
    Suppression(RunArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Source {
    /// One column of a CSV file.
    Csv,
    /// Several CSV columns scaled to [-1, 1].
    Normalized,
    /// Generated 2-dim clusters.
    Synthetic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mechanism {
    NoisyAverage,
    Rnm,
    ExpMechMode,
    DpLloyd,
    KMedian,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Noise {
    Laplace,
    Gaussian,
    Exponential,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, value_enum, default_value_t = Source::Csv)]
    dataset: Source,
    #[arg(long)]
    path: Option<PathBuf>,
    /// Dataset name in the output; defaults to the file stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    column: Option<String>,
    /// Columns of a normalized dataset; defaults to the Adult numeric ones.
    #[arg(long, value_delimiter = ',')]
    columns: Vec<String>,
    /// Value bounds of --column when they are not built in.
    #[arg(long, allow_hyphen_values = true, requires = "upper")]
    lower: Option<f64>,
    #[arg(long, allow_hyphen_values = true, requires = "lower")]
    upper: Option<f64>,
    #[arg(long, value_enum)]
    mechanism: Mechanism,
    /// Defaults to laplace, or exponential for exp-mech-mode and k-median.
    #[arg(long, value_enum)]
    noise: Option<Noise>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Vec<f64>,
    /// Fixed target delta; otherwise 0, or |D|^-2 with Gaussian noise.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    p_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    mm_grid: Vec<f64>,
    /// Repetitions per cell; overrides --scale.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Skip the recalibrated variant.
    #[arg(long)]
    no_recalibrate: bool,
    /// Also write the difference lattice as epsilon,m,M,value CSV.
    #[arg(long)]
    contour: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum MetricsCmd {
    /// Mean percent error.
    Mpe {
        #[arg(long, allow_hyphen_values = true)]
        true_mean: f64,
        #[arg(long, allow_hyphen_values = true)]
        noisy_mean: f64,
    },
    /// Fraction of outputs that miss the true mode.
    ModeError {
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        outputs: Vec<f64>,
        #[arg(long, allow_hyphen_values = true)]
        true_mode: f64,
    },
    /// Wilson score interval of a proportion.
    Wilson {
        #[arg(long)]
        successes: u64,
        #[arg(long)]
        trials: u64,
        #[arg(long, default_value_t = CI_LEVEL)]
        level: f64,
    },
}

#[derive(Serialize)]
struct AmplifyRow {
    base_epsilon: f64,
    base_delta: f64,
    p: f64,
    epsilon: f64,
    delta: f64,
}

#[derive(Serialize)]
struct CalibrateRow {
    target_epsilon: f64,
    target_delta: f64,
    p: Option<f64>,
    m: Option<f64>,
    #[serde(rename = "M")]
    big_m: Option<f64>,
    epsilon: f64,
    delta: f64,
}

#[derive(Serialize)]
struct EpsSRow {
    epsilon: f64,
    delta: f64,
    m: f64,
    #[serde(rename = "M")]
    big_m: f64,
    eps_s: f64,
    delta_s: f64,
    argmax_p: f64,
    active_branch: Branch,
    outside_verified_range: bool,
}

#[derive(Serialize)]
struct KernelRow {
    eps_fwd: f64,
    eps_bwd: f64,
    delta_fwd: f64,
    delta_bwd: f64,
    epsilon: f64,
    delta: f64,
}

#[derive(Serialize)]
struct TightRow {
    delta: f64,
    epsilon: f64,
}

#[derive(Serialize)]
struct SensitivityRow {
    /// Empty when infinite.
    sensitivity: Option<u64>,
    infinite: bool,
    witness_a: Option<String>,
    witness_b: Option<String>,
}

#[derive(Serialize)]
struct SynthRow {
    x: i64,
    y: i64,
    x_norm: f64,
    y_norm: f64,
}

#[derive(Serialize)]
struct MpeRow {
    true_mean: f64,
    noisy_mean: f64,
    mpe: f64,
}

#[derive(Serialize)]
struct ModeErrorRow {
    true_mode: f64,
    outputs: usize,
    error: f64,
}

#[derive(Serialize)]
struct WilsonRow {
    successes: u64,
    trials: u64,
    level: f64,
    rate: f64,
    ci_low: f64,
    ci_high: f64,
}

/// Parses the command line, filling flags it leaves unset from `--config`.
fn parse_args(args: Vec<OsString>) -> Result<Cli> {
    let Some(path) = config::config_path(&args) else {
        return Ok(Cli::parse_from(args));
    };
    let entries = config::read_config(Path::new(&path))?;
    let root = Cli::command();
    let partial = root
        .clone()
        .ignore_errors(true)
        .try_get_matches_from(&args)?;
    let mut full = args;
    full.extend(config::tokens_for_unset(&root, &partial, &entries)?);
    let matches = root.get_matches_from(full);
    Ok(Cli::from_arg_matches(&matches)?)
}

fn output(cli: &Cli) -> Result<Box<dyn Write>> {
    Ok(match &cli.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit<T: Serialize>(cli: &Cli, rows: &[T]) -> Result<()> {
    write_rows(rows, cli.format, output(cli)?)?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = parse_args(std::env::args_os().collect())?;
    match &cli.command {
        Cmd::Amplify { eps, delta, p } => {
            let base = PrivacyParams::new(*eps, *delta)?;
            let r = amplify_poisson(base, *p)?;
            emit(
                &cli,
                &[AmplifyRow {
                    base_epsilon: *eps,
                    base_delta: *delta,
                    p: *p,
                    epsilon: r.epsilon,
                    delta: r.delta,
                }],
            )
        }
        Cmd::Calibrate {
            eps,
            delta,
            p,
            m,
            big_m,
        } => {
            let target = PrivacyParams::new(*eps, *delta)?;
            let r = match (p, m, big_m) {
                (Some(p), _, _) => calibrate_sampling(target, *p)?,
                (None, Some(m), Some(big_m)) => {
                    calibrate_suppression(target, MMParams::new(*m, *big_m)?)?
                }
                _ => bail!("calibrate needs --p or both --m and --M"),
            };
            emit(
                &cli,
                &[CalibrateRow {
                    target_epsilon: *eps,
                    target_delta: *delta,
                    p: *p,
                    m: *m,
                    big_m: *big_m,
                    epsilon: r.epsilon,
                    delta: r.delta,
                }],
            )
        }
        Cmd::EpsS {
            eps,
            delta,
            m,
            big_m,
        } => {
            let b = suppression_bound(PrivacyParams::new(*eps, *delta)?, MMParams::new(*m, *big_m)?)?;
            emit(
                &cli,
                &[EpsSRow {
                    epsilon: *eps,
                    delta: *delta,
                    m: *m,
                    big_m: *big_m,
                    eps_s: b.eps_s,
                    delta_s: b.delta_s,
                    argmax_p: b.argmax_p,
                    active_branch: b.active_branch,
                    outside_verified_range: b.outside_verified_range,
                }],
            )
        }
        Cmd::Verify(v) => {
            let report = match v {
                VerifyCmd::Forward {
                    eps,
                    m,
                    big_m,
                    budget,
                } => verify_bound_forward(*eps, MMParams::new(*m, *big_m)?, *budget, cli.seed)?,
                VerifyCmd::Inverse { eps, m, big_m } => {
                    verify_bound_inverse(*eps, MMParams::new(*m, *big_m)?)?
                }
            };
            emit(&cli, &[report])
        }
        Cmd::Oracle(o) => run_oracle(&cli, o),
        Cmd::Run(r) => run_experiment(&cli, r),
        Cmd::Synth { centers } => {
            let s = gen_synthetic_clusters(cli.seed);
            let pts = if *centers { &s.centers } else { &s.raw };
            let rows: Vec<SynthRow> = pts
                .iter()
                .map(|&[x, y]| SynthRow {
                    x,
                    y,
                    x_norm: harness::normalize_grid_coordinate(x),
                    y_norm: harness::normalize_grid_coordinate(y),
                })
                .collect();
            emit(&cli, &rows)
        }
        Cmd::Metrics(m) => match m {
            MetricsCmd::Mpe {
                true_mean,
                noisy_mean,
            } => emit(
                &cli,
                &[MpeRow {
                    true_mean: *true_mean,
                    noisy_mean: *noisy_mean,
                    mpe: metric_mpe(*true_mean, *noisy_mean)?,
                }],
            ),
            MetricsCmd::ModeError { outputs, true_mode } => emit(
                &cli,
                &[ModeErrorRow {
                    true_mode: *true_mode,
                    outputs: outputs.len(),
                    error: metric_mode_error(outputs, *true_mode)?,
                }],
            ),
            MetricsCmd::Wilson {
                successes,
                trials,
                level,
            } => {
                let (lo, hi) = wilson_ci(*successes, *trials, *level)?;
                emit(
                    &cli,
                    &[WilsonRow {
                        successes: *successes,
                        trials: *trials,
                        level: *level,
                        rate: *successes as f64 / *trials as f64,
                        ci_low: lo,
                        ci_high: hi,
                    }],
                )
            }
        },
    }
}

fn run_oracle(cli: &Cli, cmd: &OracleCmd) -> Result<()> {
    match cmd {
        OracleCmd::Kernel {
            records,
            y,
            kernel,
            kernel_plus,
            eps,
            delta,
            lower,
            upper,
        } => {
            let bounds = ValueBounds::new(*lower, *upper)?;
            let d = Database::from_values(records, bounds)?;
            let y = Record::scalar(*y);
            let d2 = d.with_record(y.clone())?;
            let kd = SuppressionKernel::from_masses(d, files::parse_kernel(&files::read(kernel)?)?)
                .context("kernel of D")?;
            let kd2 =
                SuppressionKernel::from_masses(d2, files::parse_kernel(&files::read(kernel_plus)?)?)
                    .context("kernel of D + y")?;
            let b = suppression_theorem_bounds(&kd, &kd2, &y, PrivacyParams::new(*eps, *delta)?)?;
            emit(
                cli,
                &[KernelRow {
                    eps_fwd: b.eps_fwd,
                    eps_bwd: b.eps_bwd,
                    delta_fwd: b.delta_fwd,
                    delta_bwd: b.delta_bwd,
                    epsilon: b.epsilon(),
                    delta: b.delta(),
                }],
            )
        }
        OracleCmd::Tight {
            tables,
            delta,
            pairs,
        } => {
            let t = files::parse_tables(&files::read(tables)?)?;
            let pairs = match pairs {
                Some(s) => files::parse_pairs(s)?,
                None => {
                    let n = t.len();
                    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
                }
            };
            let epsilon = tight_dp_of_finite_mechanism(&t, &pairs, *delta)?;
            emit(cli, &[TightRow { delta: *delta, epsilon }])
        }
        OracleCmd::Sensitivity {
            universe,
            algorithm,
            cutoff,
            k,
            fraction,
            lower,
            upper,
        } => {
            let bounds = ValueBounds::new(*lower, *upper)?;
            let u = Database::from_values(universe, bounds)?;
            let dist = DistanceFn::abs_scaled(bounds);
            let s = match algorithm {
                Algorithm::Set => {
                    let c = *cutoff;
                    Suppressor::by_set(move |r| r.0[0] <= c)
                }
                Algorithm::AvgThreshold => Suppressor::AvgThreshold { k: *k, dist },
                Algorithm::TopFraction => Suppressor::TopFraction {
                    fraction: *fraction,
                    dist,
                },
            };
            let class = submultisets(&u);
            let pairs = neighbor_pairs_within(&class);
            let rep = deterministic_sensitivity(&s, &class, &pairs)?;
            let (a, b) = match rep.witness {
                Some((a, b)) => (Some(a.to_string()), Some(b.to_string())),
                None => (None, None),
            };
            emit(
                cli,
                &[SensitivityRow {
                    sensitivity: match rep.sensitivity {
                        Sensitivity::Finite(v) => Some(v),
                        Sensitivity::Infinite => None,
                    },
                    infinite: rep.sensitivity == Sensitivity::Infinite,
                    witness_a: a,
                    witness_b: b,
                }],
            )
        }
    }
}

fn dataset_spec(cli: &Cli, a: &RunArgs) -> Result<DatasetSpec> {
    let name = |path: &Path| {
        a.name.clone().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".into())
        })
    };
    Ok(match a.dataset {
        Source::Synthetic => DatasetSpec::Synthetic { seed: cli.seed },
        Source::Csv => {
            let Some(path) = &a.path else {
                bail!("--dataset csv needs --path");
            };
            let Some(column) = &a.column else {
                bail!("--dataset csv needs --column");
            };
            let bounds = match (a.lower, a.upper) {
                (Some(lo), Some(hi)) => ValueBounds::new(lo, hi)?,
                _ => known_bounds(column).with_context(|| {
                    format!("no built-in bounds for {column:?}; pass --lower and --upper")
                })?,
            };
            DatasetSpec::Column {
                name: name(path),
                path: path.clone(),
                column: column.clone(),
                bounds,
            }
        }
        Source::Normalized => {
            let Some(path) = &a.path else {
                bail!("--dataset normalized needs --path");
            };
            let columns = if a.columns.is_empty() {
                ADULT_NUMERIC_COLUMNS.iter().map(|c| c.to_string()).collect()
            } else {
                a.columns.clone()
            };
            DatasetSpec::Normalized {
                name: name(path),
                path: path.clone(),
                columns,
            }
        }
    })
}

fn experiment_config(cli: &Cli, a: &RunArgs) -> Result<ExperimentConfig> {
    let mechanism = match a.mechanism {
        Mechanism::NoisyAverage => MechanismKind::NoisyAverage,
        Mechanism::Rnm => MechanismKind::Rnm,
        Mechanism::ExpMechMode => MechanismKind::ExpMechMode,
        Mechanism::DpLloyd => MechanismKind::DpLloyd,
        Mechanism::KMedian => MechanismKind::KMedian,
    };
    let noise = match a.noise {
        Some(Noise::Laplace) => NoiseKind::Laplace,
        Some(Noise::Gaussian) => NoiseKind::Gaussian,
        Some(Noise::Exponential) => NoiseKind::Exponential,
        None => match mechanism {
            MechanismKind::ExpMechMode | MechanismKind::KMedian => NoiseKind::Exponential,
            _ => NoiseKind::Laplace,
        },
    };
    let mut cfg =
        ExperimentConfig::new(dataset_spec(cli, a)?, mechanism, noise).with_scale(cli.scale);
    cfg.seed = cli.seed;
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(i) = a.iterations {
        cfg.iterations = i;
    }
    if let Some(d) = a.delta {
        cfg.delta_rule = DeltaRule::Fixed(d);
    }
    if !a.epsilons.is_empty() {
        cfg.epsilons = a.epsilons.clone();
    }
    if !a.p_grid.is_empty() {
        cfg.p_grid = a.p_grid.clone();
    }
    if !a.mm_grid.is_empty() {
        cfg.mm_grid = a.mm_grid.clone();
    }
    cfg.recalibrate = !a.no_recalibrate;
    cfg.validate()?;
    Ok(cfg)
}

fn run_experiment(cli: &Cli, cmd: &RunCmd) -> Result<()> {
    let (args, rows) = match cmd {
        RunCmd::Sampling(a) => (a, run_sampling_experiment(&experiment_config(cli, a)?)?),
        RunCmd::Suppression(a) => (a, run_suppression_experiment(&experiment_config(cli, a)?)?),
    };
    if let Some(path) = &args.contour {
        std::fs::write(path, contour_csv(&utility_differences(&rows)))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    emit(cli, &rows)
}
