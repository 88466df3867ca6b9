use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gsf_bounds::sim::{SweepReport, SweepRow};
use serde::Serialize;

use crate::{CliError, Format};

pub const CSV_HEADER: [&str; 23] = [
    "c",
    "kl_nats",
    "mse_gsf",
    "ci_gsf",
    "mse_gsfr",
    "ci_gsfr",
    "mse_matched",
    "ci_matched",
    "mse_lmmse",
    "ci_lmmse",
    "lb",
    "ub_gsfr",
    "ub_lmmse",
    "ub_combined",
    "diverged_runs",
    "mse_gsf_db",
    "mse_gsfr_db",
    "mse_matched_db",
    "mse_lmmse_db",
    "lb_db",
    "ub_gsfr_db",
    "ub_lmmse_db",
    "ub_combined_db",
];

/// 17 significant digits, round-trips every f64.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_record(r: &SweepRow) -> Vec<String> {
    let mut rec: Vec<String> = [
        r.c,
        r.kl_nats,
        r.mse_gsf.mse,
        r.mse_gsf.ci95,
        r.mse_gsfr.mse,
        r.mse_gsfr.ci95,
        r.mse_matched.mse,
        r.mse_matched.ci95,
        r.mse_lmmse.mse,
        r.mse_lmmse.ci95,
        r.lb,
        r.ub_gsfr,
        r.ub_lmmse,
        r.ub_combined,
    ]
    .iter()
    .map(|v| num(*v))
    .collect();
    rec.push(r.diverged_runs.to_string());
    rec.extend(
        [
            r.mse_gsf_db(),
            r.mse_gsfr_db(),
            r.mse_matched_db(),
            r.mse_lmmse_db(),
            r.lb_db(),
            r.ub_gsfr_db(),
            r.ub_lmmse_db(),
            r.ub_combined_db(),
        ]
        .iter()
        .map(|v| num(*v)),
    );
    rec
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("cannot write {}: {e}", path.display()))
}

fn write_csv<W: Write>(w: W, report: &SweepReport) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_HEADER)?;
    for r in &report.rows {
        wr.write_record(csv_record(r))?;
    }
    wr.flush()?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serialises");
    s.push('\n');
    s
}

pub fn write_report(dir: &Path, stem: &str, report: &SweepReport, format: Format) -> Result<PathBuf, CliError> {
    let path = dir.join(match format {
        Format::Csv => format!("{stem}.csv"),
        Format::Json => format!("{stem}.json"),
    });
    match format {
        Format::Csv => {
            let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            write_csv(f, report).map_err(|e| io_err(&path, e))?;
        }
        Format::Json => fs::write(&path, to_json(report)).map_err(|e| io_err(&path, e))?,
    }
    Ok(path)
}

pub fn print_report(out: &mut dyn Write, report: &SweepReport, format: Format) -> Result<(), CliError> {
    match format {
        Format::Csv => write_csv(out, report).map_err(|e| CliError::Usage(e.to_string())),
        Format::Json => out
            .write_all(to_json(report).as_bytes())
            .map_err(|e| CliError::Usage(e.to_string())),
    }
}

#[derive(Serialize)]
struct RowDiagnostics {
    c: f64,
    diverged_runs: usize,
    bound_order_violations: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    format: Format,
    seed: u64,
    config: &'a gsf_bounds::sim::ScenarioConfig,
    outputs: Vec<String>,
    rows: Vec<RowDiagnostics>,
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    report: &SweepReport,
    format: Format,
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    let manifest = Manifest {
        tool: "gsfb",
        version: env!("CARGO_PKG_VERSION"),
        command,
        format,
        seed: report.config.seed,
        config: &report.config,
        outputs: outputs
            .iter()
            .map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
        rows: report
            .rows
            .iter()
            .map(|r| RowDiagnostics {
                c: r.c,
                diverged_runs: r.diverged_runs,
                bound_order_violations: r.bound_order_violations,
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, to_json(&manifest)).map_err(|e| io_err(&path, e))
}

#[derive(Debug, Serialize)]
pub struct KlRow {
    pub model: u8,
    pub role: &'static str,
    pub c: f64,
    pub kl_nats: f64,
}

pub fn print_kl(out: &mut dyn Write, rows: &[KlRow], format: Format) -> Result<(), CliError> {
    let res = match format {
        Format::Csv => {
            let mut wr = csv::Writer::from_writer(&mut *out);
            let mut go = || -> csv::Result<()> {
                wr.write_record(["model", "role", "c", "kl_nats"])?;
                for r in rows {
                    wr.write_record([r.model.to_string(), r.role.to_string(), num(r.c), num(r.kl_nats)])?;
                }
                wr.flush()?;
                Ok(())
            };
            go().map_err(|e| e.to_string())
        }
        Format::Json => out.write_all(to_json(&rows).as_bytes()).map_err(|e| e.to_string()),
    };
    res.map_err(CliError::Usage)
}
