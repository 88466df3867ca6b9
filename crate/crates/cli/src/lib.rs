//! Command-line front end: separation sweeps, KL tables and self-validation.

mod output;
mod validate;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gsf_bounds::filters::GsfRFeedback;
use gsf_bounds::sim::{self, NoiseModel, ScenarioConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<gsf_bounds::Error> for CliError {
    fn from(e: gsf_bounds::Error) -> Self {
        CliError::Numeric(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "gsfb", version, about = "Gaussian sum filter MMSE bounds: sweeps, KL tables, validation")]
struct Cli {
    /// Cap on worker threads (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the measurement-separation sweep of a scenario config.
    Sweep(ExperimentArgs),
    /// Run one (model, c) experiment.
    Run {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Measurement separation; defaults to the first value in the config.
        #[arg(long)]
        c: Option<f64>,
    },
    /// Print KL divergence of the noise generators against their moment-matched Gaussians.
    Kl {
        #[arg(long)]
        model: Vec<u8>,
        #[arg(long = "c")]
        c: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Run the built-in invariant groups.
    Validate {
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long, value_parser = parse_feedback)]
    feedback: Option<GsfRFeedback>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    InnovationSign,
}

fn parse_feedback(s: &str) -> Result<GsfRFeedback, String> {
    s.parse().map_err(|e: gsf_bounds::Error| e.to_string())
}

fn load_config(args: &ExperimentArgs) -> Result<ScenarioConfig, CliError> {
    let path = &args.config;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: ScenarioConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(fb) = args.feedback {
        cfg.feedback = fb;
    }
    cfg.validate()
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}

fn out_dir(args: &ExperimentArgs) -> Result<PathBuf, CliError> {
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn cmd_sweep(args: &ExperimentArgs, err: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(args)?;
    if cfg.c_measurement.len() < 2 {
        return Err(CliError::Usage("a sweep needs at least 2 c_measurement values".into()));
    }
    let report = sim::sweep(&cfg)?;
    let stem = format!("sweep_model{}", cfg.model_id);
    let written = output::write_report(&dir, &stem, &report, args.format)?;
    output::write_manifest(&dir, "sweep", &report, args.format, std::slice::from_ref(&written))?;
    let _ = writeln!(err, "wrote {}", written.display());
    Ok(())
}

fn cmd_run(args: &ExperimentArgs, c: Option<f64>, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let mut cfg = load_config(args)?;
    if let Some(c) = c {
        cfg.c_measurement = vec![c];
    } else {
        cfg.c_measurement.truncate(1);
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let row = sim::run_experiment(&cfg, 0)?;
    let report = sim::SweepReport { config: cfg.clone(), rows: vec![row] };
    match &args.out {
        Some(_) => {
            let dir = out_dir(args)?;
            let stem = format!("run_model{}", cfg.model_id);
            let written = output::write_report(&dir, &stem, &report, args.format)?;
            output::write_manifest(&dir, "run", &report, args.format, &[written])?;
        }
        None => output::print_report(out, &report, args.format)?,
    }
    Ok(())
}

fn cmd_kl(models: &[u8], cs: &[f64], format: Format, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let models = if models.is_empty() { vec![1, 2, 3] } else { models.to_vec() };
    let cs = if cs.is_empty() { vec![1.0] } else { cs.to_vec() };
    let mut rows = Vec::new();
    for &m in &models {
        let model = NoiseModel::from_id(m).map_err(|e| CliError::Usage(e.to_string()))?;
        for &c in &cs {
            if !(c.is_finite() && c >= 0.0) {
                return Err(CliError::Usage(format!("c must be finite and ≥ 0, got {c}")));
            }
            // both roles use the same scalar family; the process mixture is its lift by
            // [dt, 1]ᵀ, an injective map that leaves the divergence unchanged
            let kl = model.generator(c)?.kl_vs_moment_matched()?.value;
            for role in ["process", "measurement"] {
                rows.push(output::KlRow { model: m, role, c, kl_nats: kl });
            }
        }
    }
    output::print_kl(out, &rows, format)
}

fn dispatch(cli: &Cli, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<(), CliError> {
    match &cli.command {
        Command::Sweep(args) => cmd_sweep(args, err),
        Command::Run { common, c } => cmd_run(common, *c, out),
        Command::Kl { model, c, format } => cmd_kl(model, c, *format, out),
        Command::Validate { inject_fault } => validate::cmd_validate(*inject_fault, out),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.workers {
        Some(0) => Err(CliError::Usage("--workers must be ≥ 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli, out, err)),
            Err(e) => Err(CliError::Usage(format!("cannot start {n} workers: {e}"))),
        },
        None => dispatch(&cli, out, err),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "gsfb: {e}");
            e.exit_code()
        }
    }
}
