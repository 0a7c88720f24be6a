use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cvqkd_core::campaign::{self, Stats};
use cvqkd_core::channel::transmittance_from_distance;
use cvqkd_core::config::{ExperimentConfig, VERSION};
use cvqkd_core::estimation::EstimatedParams;
use cvqkd_core::keyrate::{secret_fraction, skr, Regime};
use cvqkd_core::Error;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "cvqkd", version, about = "Shaped-QAM CV-QKD link simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file, applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// 100 blocks of 1.8e6 symbols instead of the desk-scale defaults.
    #[arg(long, global = true)]
    full_scale: bool,
    /// Output directory.
    #[arg(long, default_value = "results", global = true)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Minimised ε_prep over the cardinality × V_A grid.
    EpsprepSweep,
    /// Back-to-back ideal vs DSP-measured SNR.
    B2b,
    /// Multi-block campaign: per-block CSV and summary JSON.
    Campaign,
    /// Measured excess noise against roll-off with low-frequency noise on.
    RolloffSweep,
    /// Secret fraction against distance and its zero crossing.
    DistanceSweep,
    /// Secret fraction and key rate for given link parameters.
    Keyrate(KeyrateArgs),
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Args)]
struct KeyrateArgs {
    /// Channel transmittance; defaults to the configured distance.
    #[arg(long, conflicts_with = "distance_km")]
    t: Option<f64>,
    #[arg(long)]
    distance_km: Option<f64>,
    /// Bob-side excess noise in SNU.
    #[arg(long)]
    xi_b: Option<f64>,
    #[arg(long)]
    v_a: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    v_el: Option<f64>,
    /// Symbols per polarisation used for parameter estimation.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum, default_value_t = RegimeArg::Finite)]
    regime: RegimeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Finite,
    Asymptotic,
}

enum Failure {
    Config(String),
    Run(String),
    FailedBlocks(Vec<u64>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            e => Failure::Run(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn resolve_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut config = match &c.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Failure::Config(format!("{}: {io}", path.display())),
            e => Failure::from(e),
        })?,
        None => ExperimentConfig::default(),
    };
    if c.full_scale {
        config = config.full_scale();
    }
    for assignment in &c.set {
        config.apply_override(assignment).map_err(|e| Failure::Config(e.to_string()))?;
    }
    config.validate()?;
    Ok(config)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// JSON artifact with the same provenance as the CSV headers.
fn write_json(dir: &Path, name: &str, config: &ExperimentConfig, results: impl Serialize) -> Result<(), Failure> {
    let entries: serde_json::Map<String, Value> = config.entries().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect();
    let doc = json!({
        "version": VERSION,
        "config_sha256": config.hash(),
        "config": entries,
        "results": serde_json::to_value(results).map_err(|e| Failure::Run(e.to_string()))?,
    });
    let mut out = create(dir, name)?;
    serde_json::to_writer_pretty(&mut out, &doc).map_err(|e| Failure::Run(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn describe(name: &str, s: &Stats) -> String {
    format!("{name}: mean {:.5} min {:.5} max {:.5}", s.mean, s.min, s.max)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = resolve_config(&cli.common)?;
    let dir = cli.common.out.as_path();
    match cli.command {
        Command::ShowConfig => print!("{}", config.render()),
        Command::Campaign => {
            let result = campaign::run_block_campaign(&config)?;
            let mut csv = create(dir, "blocks.csv")?;
            campaign::write_block_csv(&config, &result.outcomes, &mut csv)?;
            csv.flush()?;
            write_json(dir, "summary.json", &config, &result.summary)?;
            let s = &result.summary;
            println!("{} blocks, {} failed", s.blocks, s.failed_blocks.len());
            println!("{}", describe("xi_B_hat", &s.xi_b_hat));
            println!("{}", describe("xi_B_worst", &s.xi_b_worst));
            println!("SKR mean {:.3} Mb/s", s.skr_bps.mean / 1e6);
            if !s.failed_blocks.is_empty() {
                return Err(Failure::FailedBlocks(s.failed_blocks.clone()));
            }
        }
        Command::B2b => {
            let rows = campaign::run_b2b_snr(&config, &config.sweep.snr_db, config.sweep.noise_off_point)?;
            let mut csv = create(dir, "b2b.csv")?;
            campaign::write_b2b_csv(&config, &rows, &mut csv)?;
            csv.flush()?;
            write_json(dir, "b2b.json", &config, &rows)?;
            for r in &rows {
                let target = r.target_snr_db.map_or("noise-off".to_string(), |t| format!("{t} dB"));
                println!("{target}: ideal {:.3} dB, DSP {:.3} dB", r.ideal_snr_db, r.dsp_snr_db);
            }
        }
        Command::RolloffSweep => {
            let rows = campaign::run_rolloff_sweep(&config)?;
            let mut csv = create(dir, "rolloff.csv")?;
            campaign::write_rolloff_csv(&config, &rows, &mut csv)?;
            csv.flush()?;
            write_json(dir, "rolloff.json", &config, &rows)?;
            for r in &rows {
                println!("rolloff {}: {}", r.rolloff, describe("xi_B_hat", &r.xi_b_hat));
            }
        }
        Command::DistanceSweep => {
            let (rows, crossing) = campaign::run_distance_sweep(&config)?;
            let mut csv = create(dir, "distance.csv")?;
            campaign::write_distance_csv(&config, &rows, &mut csv)?;
            csv.flush()?;
            write_json(dir, "distance.json", &config, json!({ "zero_crossing_km": crossing, "rows": rows }))?;
            match crossing {
                Some(d) => println!("finite-size secret fraction reaches zero at {d:.3} km"),
                None => println!("no zero crossing within the swept distances"),
            }
        }
        Command::EpsprepSweep => {
            let rows = campaign::run_eps_prep_sweep(&config)?;
            let mut csv = create(dir, "eps_prep.csv")?;
            campaign::write_eps_prep_csv(&config, &rows, &mut csv)?;
            csv.flush()?;
            write_json(dir, "eps_prep.json", &config, &rows)?;
            for r in &rows {
                println!("K={} V_A={}: nu {:.5} eps {:.4e}", r.cardinality, r.target_va, r.nu, r.eps);
            }
        }
        Command::Keyrate(args) => keyrate(&config, &args)?,
    }
    Ok(())
}

fn keyrate(config: &ExperimentConfig, a: &KeyrateArgs) -> Result<(), Failure> {
    let ch = &config.channel;
    let t = match (a.t, a.distance_km) {
        (Some(t), _) => t,
        (None, Some(d)) => transmittance_from_distance(d, ch.loss_db_per_km)?,
        (None, None) => ch.transmittance()?,
    };
    let params = EstimatedParams::nominal(
        a.v_a.unwrap_or(config.constellation.v_a),
        t,
        a.eta.unwrap_or(ch.eta),
        a.v_el.unwrap_or(ch.v_el),
        a.xi_b.unwrap_or(ch.xi_b),
        a.n.unwrap_or(config.run.symbols_per_block),
    );
    let eps_prep = match config.eps_prep {
        Some(e) => e,
        None => {
            let spec = campaign::resolve_constellation(config)?;
            campaign::resolve_eps_prep(config, &spec)?
        }
    };
    let regime = match a.regime {
        RegimeArg::Finite => Regime::FiniteSize,
        RegimeArg::Asymptotic => Regime::Asymptotic,
    };
    let result = secret_fraction(&params, &config.security_params(eps_prep), regime)?;
    let rate = skr(result.secret_fraction, config.waveform.symbol_rate, config.frame.pilot_fraction)?;
    let doc = json!({ "params": params, "eps_prep": eps_prep, "key_rate": result, "skr_bps": rate });
    println!("{}", serde_json::to_string_pretty(&doc).map_err(|e| Failure::Run(e.to_string()))?);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::FailedBlocks(blocks)) => {
            eprintln!("error: blocks {blocks:?} failed; see blocks.csv");
            ExitCode::from(3)
        }
    }
}
