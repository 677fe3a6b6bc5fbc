//! Command-line front end: simulate windows, initialize them, sweep settings
//! and run the self-checks.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ffinit::cloud::format::FrameFormat;
use ffinit::cloud::RegionDims;
use ffinit::diagnostics::{bench, jacobian_study, rank_study, DiagnosticsError, TruthWindow};
use ffinit::eval::FailureCategory;
use ffinit::io::{read_config, read_window_data, write_ablation, write_ablation_csv, write_dataset, write_run_outputs, ConfigFile, IoError};
use ffinit::linear_init::DEFAULT_RANK_TOL;
use ffinit::pipeline::{run_ablation, run_pipeline, AblationSpec, InitVariant, PipelineError, RunConfig, RunOutput, SweepAxis};
use ffinit::sim::{simulate, Scenario, SensorSpec, SimError};

#[derive(Parser)]
#[command(name = "ffinit", version, about = "Visual-inertial initialization from up-to-scale point clouds")]
struct Cli {
    /// JSON or TOML file with optional `run` and `simulation` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated dataset directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FormatArg::Bin)]
        format: FormatArg,
        #[command(flatten)]
        sim: SimArgs,
        /// Keyframes and window length of the dataset.
        #[command(flatten)]
        run: RunArgs,
    },
    /// Initialize one window, read from `--data` or simulated from `--seed`.
    Init {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for run.json, metrics.csv and states.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write lm_log.csv (needs --out).
        #[arg(long)]
        log: bool,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sweep one setting over simulated windows and write the medians as CSV.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated values, e.g. `10,20,50`, `0.5,1.0`, `1x1,3x3`,
        /// `on,off` or `ff,sc,dongsi`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Number of windows per cell.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// First window seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare analytic and finite-difference Jacobians of every factor.
    CheckJacobians {
        #[arg(long, default_value_t = 100)]
        states: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        perturbation: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Rank of feature-free systems over random exact-motion windows.
    CheckRank {
        #[arg(long, default_value_t = 2)]
        frames: usize,
        #[arg(long, default_value_t = 6)]
        points: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Relative cloud point perturbation; 0 keeps the clouds exact.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
        rank_tol: f64,
    },
    /// Time the pipeline stages over simulated windows.
    Bench {
        #[arg(long, default_value_t = 20)]
        windows: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Bin,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Samples,
    Window,
    Regions,
    Ransac,
    Variant,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Ff,
    Sc,
    Dongsi,
}

impl From<VariantArg> for InitVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Ff => InitVariant::Ff,
            VariantArg::Sc => InitVariant::Sc,
            VariantArg::Dongsi => InitVariant::Dongsi,
        }
    }
}

/// Scenario overrides for simulated windows.
#[derive(Args)]
struct SimArgs {
    /// Consumer-grade IMU noise and 1 px feature tracks.
    #[arg(long)]
    noisy: bool,
    /// Tracked features in the scene.
    #[arg(long)]
    features: Option<usize>,
}

impl SimArgs {
    fn apply(&self, scenario: &mut Scenario) {
        if self.noisy {
            scenario.sensor = SensorSpec::consumer();
            scenario.feature_pixel_noise = Scenario::noisy().feature_pixel_noise;
        }
        if let Some(n) = self.features {
            scenario.num_features = n;
        }
    }
}

/// Overrides of `RunConfig` fields; unset flags keep the config file value.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    keyframes: Option<usize>,
    /// Window length, seconds.
    #[arg(long)]
    window: Option<f64>,
    /// Cloud samples per frame.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    conf_min: Option<f64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    no_ransac: bool,
    #[arg(long)]
    ransac_iterations: Option<usize>,
    #[arg(long)]
    ransac_threshold: Option<f64>,
    #[arg(long)]
    ransac_subset: Option<usize>,
    /// Region grid as `ROWSxCOLS`.
    #[arg(long, value_parser = parse_dims)]
    regions: Option<RegionDims>,
    /// Evaluate the linear solution without refinement.
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Fail windows rejected by the chi-square test.
    #[arg(long)]
    chi_square_gate: bool,
    /// Window ATE threshold, meters.
    #[arg(long)]
    ate_threshold: Option<f64>,
    /// Fill the timing columns of the metrics.
    #[arg(long)]
    timings: bool,
}

impl RunArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Copy>(dst: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *dst = v;
            }
        }
        set(&mut cfg.num_keyframes, self.keyframes);
        set(&mut cfg.window, self.window);
        set(&mut cfg.samples, self.samples);
        set(&mut cfg.conf_min, self.conf_min);
        set(&mut cfg.variant, self.variant.map(Into::into));
        set(&mut cfg.ransac.iterations, self.ransac_iterations);
        set(&mut cfg.ransac.threshold, self.ransac_threshold);
        set(&mut cfg.ransac.subset_per_frame, self.ransac_subset);
        set(&mut cfg.regions, self.regions);
        set(&mut cfg.refine.lm.max_iterations, self.max_iterations);
        set(&mut cfg.ate_threshold, self.ate_threshold);
        cfg.use_ransac &= !self.no_ransac;
        cfg.refine_enabled &= !self.no_refine;
        cfg.chi_square_gate |= self.chi_square_gate;
        cfg.record_timings |= self.timings;
    }
}

fn parse_dims(s: &str) -> Result<RegionDims, String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok(RegionDims::new(parse(r)?, parse(c)?))
}

/// A failed command, named by stage and failure category. Errors outside the
/// initialization pipeline (arguments, config files, output writes) carry no
/// category and exit with 1.
#[derive(Debug)]
struct CliError {
    stage: String,
    category: Option<FailureCategory>,
    message: String,
}

impl CliError {
    fn new(stage: &str, category: Option<FailureCategory>, message: impl fmt::Display) -> Self {
        Self { stage: stage.into(), category, message: message.to_string() }
    }

    fn exit_code(&self) -> u8 {
        self.category.map_or(1, |c| c.exit_code() as u8)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let category = self.category.map_or("uncategorized", |c| c.label());
        write!(f, "{} stage failed [{}]: {}", self.stage, category, self.message)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self::new(&e.stage.to_string(), Some(e.category), &e.error)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        Self::new("simulation", Some(FailureCategory::Obs), e)
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Pipeline(p) => p.into(),
            DiagnosticsError::Sim(s) => s.into(),
            other => Self::new("diagnostics", None, other),
        }
    }
}

fn output_err(e: IoError) -> CliError {
    CliError::new("output", None, e)
}

/// Config file (if any) with the command-line overrides applied.
fn load_config(path: Option<&Path>, sim: Option<&SimArgs>, run: Option<&RunArgs>) -> Result<ConfigFile, CliError> {
    let mut file = match path {
        Some(p) => read_config::<ConfigFile>(p).map_err(|e| CliError::new("config", None, e))?,
        None => ConfigFile::default(),
    };
    if let Some(sim) = sim {
        sim.apply(&mut file.simulation);
    }
    if let Some(run) = run {
        run.apply(&mut file.run);
    }
    file.run.apply_to(&mut file.simulation);
    Ok(file)
}

fn opt(v: Option<f64>, unit: &str) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}{unit}"))
}

fn print_summary(out: &RunOutput) {
    let r = &out.report;
    println!("keyframes     {}", out.keyframe_times.len());
    if let Some(lin) = &out.linear {
        let inliers = lin.inliers.map_or_else(String::new, |n| format!(", {n}/{} inliers", lin.blocks));
        println!("linear        rank {}, cond {:.3e}{inliers}", lin.rank, lin.condition_number);
    }
    if let Some(nl) = &out.refined {
        println!("refinement    {} iterations, cost {:.4e} -> {:.4e} ({:?})", nl.iterations, nl.initial_cost, nl.final_cost, nl.termination);
    }
    println!("gravity       {} (linear {})", opt(r.gravity_deg, " deg"), opt(r.gravity_lin_deg, " deg"));
    println!("velocity      {} (linear {})", opt(r.velocity_mps, " m/s"), opt(r.velocity_lin_mps, " m/s"));
    println!("scale error   {} (linear {})", opt(r.scale_nl_pct, " %"), opt(r.scale_lin_pct, " %"));
    println!("ATE           {} / {}", opt(r.ate_m, " m"), opt(r.ate_deg, " deg"));
    if let Some(chi) = &r.chi_square {
        println!("chi-square    {:.2} vs {:.2} ({} dof)", chi.statistic, chi.threshold, chi.dof);
    }
    println!("result        {}", if r.success { "success" } else { "failure" });
}

fn sweep_axis(axis: AxisArg, values: &[String]) -> Result<SweepAxis, CliError> {
    fn all<T>(values: &[String], f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, CliError> {
        values.iter().map(|v| f(v.trim())).collect::<Result<_, _>>().map_err(|m| CliError::new("config", None, m))
    }
    Ok(match axis {
        AxisArg::Samples => SweepAxis::Samples(all(values, |v| v.parse().map_err(|e| format!("{v:?}: {e}")))?),
        AxisArg::Window => SweepAxis::Window(all(values, |v| v.parse().map_err(|e| format!("{v:?}: {e}")))?),
        AxisArg::Regions => SweepAxis::Regions(all(values, parse_dims)?),
        AxisArg::Ransac => SweepAxis::Ransac(all(values, |v| match v {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            _ => Err(format!("expected on or off, got {v:?}")),
        })?),
        AxisArg::Variant => SweepAxis::Variant(all(values, |v| VariantArg::from_str(v, true).map(Into::into))?),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Simulate { out, seed, format, sim, run } => {
            let cfg = load_config(config, Some(&sim), Some(&run))?;
            let ds = simulate(&cfg.simulation, seed)?;
            let format = match format {
                FormatArg::Bin => FrameFormat::Bin,
                FormatArg::Csv => FrameFormat::Csv,
            };
            write_dataset(&out, &ds, format).map_err(output_err)?;
            println!("wrote {} keyframes, {} tracks, true scale {:.6} to {}", ds.truth.keyframes.len(), ds.tracks.len(), ds.truth.scale, out.display());
        }
        Command::Init { data, seed, out, log, sim, run } => {
            let mut cfg = load_config(config, Some(&sim), Some(&run))?;
            cfg.run.seed = seed;
            let window = match &data {
                Some(dir) => read_window_data(dir).map_err(|e| CliError::new("input", Some(FailureCategory::Obs), e))?,
                None => ffinit::io::WindowData::from_dataset(&simulate(&cfg.simulation, seed)?),
            };
            let output = run_pipeline(&cfg.run, &window)?;
            print_summary(&output);
            if let Some(dir) = &out {
                write_run_outputs(dir, &cfg.run, &output, log).map_err(output_err)?;
            } else if log {
                log::warn!("--log has no effect without --out");
            }
            if let Some(failure) = output.failure {
                return Err(failure.into());
            }
        }
        Command::Ablate { axis, values, seeds, seed, out, sim, run } => {
            let cfg = load_config(config, Some(&sim), Some(&run))?;
            let spec = AblationSpec { base: cfg.run, scenario: cfg.simulation, ..AblationSpec::new(sweep_axis(axis, &values)?, (seed..seed + seeds).collect()) };
            let rows = run_ablation(&spec)?;
            match out {
                Some(path) => {
                    write_ablation_csv(&path, &rows).map_err(output_err)?;
                    println!("wrote {} rows to {}", rows.len(), path.display());
                }
                None => write_ablation(std::io::stdout().lock(), &rows).map_err(|e| CliError::new("output", None, e))?,
            }
        }
        Command::CheckJacobians { states, seed, perturbation, tolerance } => {
            let cfg = load_config(config, None, None)?;
            let mut scenario = Scenario { sensor: SensorSpec::consumer(), ..cfg.simulation };
            cfg.run.apply_to(&mut scenario);
            let window = TruthWindow::simulate(&scenario, seed)?;
            let studies = jacobian_study(&window, &cfg.run.refine, states, seed, perturbation, tolerance)?;
            let mut failed = Vec::new();
            for s in &studies {
                println!("{:?}: {} states, max error {:.3e} ({})", s.variant, s.states_checked, s.max_error, if s.passed() { "PASS" } else { "FAIL" });
                for (name, e) in &s.worst_by_factor {
                    println!("  {name:<12} {e:.3e}");
                }
                if !s.passed() {
                    failed.push(format!("{:?}", s.variant));
                }
            }
            if !failed.is_empty() {
                return Err(CliError::new("refinement", Some(FailureCategory::NL), format!("Jacobian check above {tolerance:e} for {}", failed.join(", "))));
            }
        }
        Command::CheckRank { frames, points, trials, noise, seed, rank_tol } => {
            let study = rank_study(frames, points, trials, noise, seed, rank_tol)?;
            println!("{frames} frames x {points} points, relative point noise {noise}, {trials} trials");
            for (rank, count) in study.histogram() {
                println!("  rank {rank}: {count}");
            }
        }
        Command::Bench { windows, seed, sim, run } => {
            let cfg = load_config(config, Some(&sim), Some(&run))?;
            let seeds: Vec<u64> = (seed..seed + windows).collect();
            let b = bench(&cfg.simulation, &cfg.run, &seeds)?;
            println!("{} windows, {} successes", b.runs, b.successes);
            println!("median linear     {}", opt(b.median_lin_ms, " ms"));
            println!("median refinement {}", opt(b.median_nl_ms, " ms"));
            println!("median total      {}", opt(b.median_total_ms, " ms"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
