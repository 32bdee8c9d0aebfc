//! `simclock`: runs an experiment preset and writes its records, summary,
//! noise budget and resolved configuration into an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use simclock_core::config::{Preset, Settings};
use simclock_core::error::{Error, Result};
use simclock_core::experiments::{self, Table};

#[derive(Parser, Debug)]
#[command(name = "simclock", version, about = "Simulate squeezed-state Ramsey clock experiments")]
struct Args {
    /// Experiment preset
    #[arg(value_parser = parse_preset)]
    preset: Preset,

    /// TOML configuration layered over the preset
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for the trial loop; results do not depend on it
    #[arg(long, value_name = "N")]
    workers: Option<u64>,

    /// Output directory (default: simclock-<preset>)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Write into an existing output directory
    #[arg(long)]
    force: bool,

    /// Override one setting, e.g. --set n_cycles=10 --set 'gap="20 us"'
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse::<Preset>().map_err(|e| e.to_string())
}

fn write_csv(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Io(format!("{}: {e}", path.display()));
    w.write_record(&table.header).map_err(io)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|c| c.to_string())).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = !dir.is_dir() || fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::Io(format!("output directory {} already exists; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn run(args: Args) -> Result<PathBuf> {
    let mut overrides = Vec::new();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(w) = args.workers {
        overrides.push(format!("workers={w}"));
    }
    overrides.extend(args.overrides);
    let settings = Settings::resolve(args.preset, args.config.as_deref(), &overrides)?;
    let dir = args.out.unwrap_or_else(|| PathBuf::from(format!("simclock-{}", args.preset)));
    // check before the possibly long run so a collision fails fast
    prepare_dir(&dir, args.force)?;

    let out = experiments::run(&settings)?;
    write_csv(&dir.join("records.csv"), &out.records)?;
    if let Some(b) = &out.budget {
        write_csv(&dir.join("budget.csv"), b)?;
    }
    let json = serde_json::to_string_pretty(&out.summary).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    fs::write(dir.join("resolved_config.toml"), settings.to_toml())?;
    Ok(dir)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
