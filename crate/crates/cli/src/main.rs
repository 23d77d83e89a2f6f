use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use prekeysim_core::attack::experiments::{dos_clog, pfs_experiment, table2, DosConfig, DosReport, PfsCell, PfsExperimentConfig};
use prekeysim_core::device::{DeviceCondition, PhoneModel};
use prekeysim_core::scenario::{
    parse_duration, run_scenario, AttackOp, AttackOutcome, ModeName, RunOutput, ScenarioConfig, ScenarioError,
};
use prekeysim_core::time::SimTime;

const FIXTURE_WORLD: &str = include_str!("../../../scenarios/fixture_account.toml");

#[derive(Parser)]
#[command(name = "prekeysim", version, about = "Prekey depletion attack simulator")]
struct Cli {
    /// Seed for all randomness in the run.
    #[arg(long, env = "PREKEYSIM_SEED", global = true)]
    seed: Option<u64>,
    /// Directory for CSV, report and log files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct World {
    /// Scenario file whose devices form the world; defaults to the demo account.
    #[arg(long)]
    world: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Drain a device's one-time prekeys.
    Deplete {
        #[arg(long)]
        target: String,
        #[arg(long = "async")]
        asynchronous: bool,
        #[arg(long, requires = "asynchronous")]
        rate: Option<u32>,
        /// Keep depleting until the horizon.
        #[arg(long)]
        continuous: bool,
        #[arg(long, value_parser = parse_duration)]
        horizon: Option<SimTime>,
        #[command(flatten)]
        world: World,
    },
    /// List the device ids registered for a phone number.
    QueryDevices {
        #[arg(long)]
        target: String,
        #[command(flatten)]
        world: World,
    },
    /// Guess a device's client platform from its prekey bundle.
    Fingerprint {
        #[arg(long)]
        target: String,
        /// Only look at one bundle, never drain the store.
        #[arg(long)]
        no_deplete: bool,
        #[arg(long)]
        hash_key_ids: bool,
        #[arg(long)]
        uniform_initial_batch: Option<u32>,
        #[command(flatten)]
        world: World,
    },
    /// Infer when a device is online from its refill behaviour.
    Monitor {
        #[arg(long)]
        target: String,
        #[arg(long, value_parser = parse_duration, default_value = "1day")]
        horizon: SimTime,
        #[arg(long, value_parser = parse_duration)]
        poll_interval: Option<SimTime>,
        #[command(flatten)]
        world: World,
    },
    /// Clog a device's bundle endpoint while honest contacts try to reach it.
    Dos {
        #[arg(long, default_value_t = 2000)]
        rate: u32,
        #[arg(long, value_parser = parse_duration, default_value = "60s")]
        duration: SimTime,
        #[arg(long, default_value_t = 200)]
        probes: u32,
        #[arg(long, value_parser = parse_duration, default_value = "30s")]
        restart_after: SimTime,
    },
    /// Share of sessions without a one-time prekey under continuous depletion.
    PfsExperiment {
        #[arg(long, required_unless_present = "all")]
        profile: Option<PhoneModel>,
        #[arg(long, required_unless_present = "all")]
        state: Option<DeviceCondition>,
        /// Run every phone model and state.
        #[arg(long, conflicts_with_all = ["profile", "state"])]
        all: bool,
        #[arg(long, default_value_t = 500)]
        trials: u32,
        #[arg(long, default_value_t = 100)]
        cycles: u32,
    },
    /// Execute a scenario file.
    Run { scenario: PathBuf },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("writing output: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    NotFound(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Scenario(e) if e.is_config_error() => 2,
            _ => 3,
        }
    }
}

fn load_world(world: &World) -> Result<ScenarioConfig, ScenarioError> {
    let mut cfg = match &world.world {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::from_toml(FIXTURE_WORLD)?,
    };
    cfg.attacks.clear();
    cfg.compare_baseline = false;
    Ok(cfg)
}

fn with_op(mut cfg: ScenarioConfig, op: AttackOp, seed: Option<u64>) -> Result<ScenarioConfig, ScenarioError> {
    cfg.attacks.push(op);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_run(dir: &Path, out: &RunOutput) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    for (name, csv) in out.report.csv_tables() {
        write_file(dir, &name, &csv)?;
    }
    let json = serde_json::to_string_pretty(&out.report).expect("report serializes");
    write_file(dir, "report.json", &json)?;
    out.sim
        .timeline()
        .write_ndjson(BufWriter::new(fs::File::create(dir.join("timeline.ndjson"))?))?;
    out.sim
        .channel_log()
        .write_framed(BufWriter::new(fs::File::create(dir.join("channel.bin"))?))?;
    Ok(())
}

fn emit_csv(out_dir: Option<&Path>, name: &str, csv: &str) -> Result<(), CliError> {
    match out_dir {
        Some(d) => write_file(d, name, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn run_single(cfg: ScenarioConfig, out_dir: Option<&Path>) -> Result<AttackOutcome, CliError> {
    let out = run_scenario(&cfg)?;
    if let Some(d) = out_dir {
        write_run(d, &out)?;
    }
    Ok(out.report.attacks.into_iter().next().expect("one op").outcome)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let out_dir = cli.out_dir.as_deref();
    match cli.command {
        Command::Deplete {
            target,
            asynchronous,
            rate,
            continuous,
            horizon,
            world,
        } => {
            let mut cfg = load_world(&world)?;
            if let Some(h) = horizon {
                cfg.horizon = h;
            }
            let op = AttackOp::Deplete {
                target,
                mode: if asynchronous { ModeName::Async } else { ModeName::Sync },
                rate: if asynchronous { Some(rate.unwrap_or(100)) } else { None },
                at: 0,
                continuous,
                until: None,
            };
            let AttackOutcome::Deplete(report) = run_single(with_op(cfg, op, cli.seed)?, out_dir)? else {
                unreachable!()
            };
            print!("{}", report.summary());
            if out_dir.is_none() {
                println!();
            }
            emit_csv(
                out_dir,
                "depletion.csv",
                &csv(prekeysim_core::attack::DepletionReport::CSV_HEADER, [report.csv_row()]),
            )
        }
        Command::QueryDevices { target, world } => {
            let cfg = load_world(&world)?;
            let op = AttackOp::QueryDevices { phone: target.clone(), at: 0 };
            let AttackOutcome::QueryDevices { devices, .. } = run_single(with_op(cfg, op, cli.seed)?, out_dir)? else {
                unreachable!()
            };
            println!("{devices:?}");
            if devices.is_empty() {
                return Err(CliError::NotFound(format!("no devices registered for {target}")));
            }
            Ok(())
        }
        Command::Fingerprint {
            target,
            no_deplete,
            hash_key_ids,
            uniform_initial_batch,
            world,
        } => {
            let mut cfg = load_world(&world)?;
            cfg.countermeasures.hash_key_ids |= hash_key_ids;
            if uniform_initial_batch.is_some() {
                cfg.countermeasures.uniform_initial_batch = uniform_initial_batch;
            }
            let op = AttackOp::Fingerprint {
                target,
                at: 0,
                allow_depletion: !no_deplete,
            };
            let AttackOutcome::Fingerprint { verdict, .. } = run_single(with_op(cfg, op, cli.seed)?, out_dir)? else {
                unreachable!()
            };
            let verdict = verdict.ok_or_else(|| CliError::NotFound("fingerprint did not finish".into()))?;
            match verdict.os_guess {
                Some(os) => println!("{}: {os} (confidence {:.2})", verdict.target, verdict.confidence),
                None => println!("{}: unknown", verdict.target),
            }
            for e in &verdict.evidence {
                println!("  {} = {} ({})", e.feature, e.value, e.rule);
            }
            emit_csv(
                out_dir,
                "fingerprint.csv",
                &csv(prekeysim_core::attack::FingerprintVerdict::CSV_HEADER, [verdict.csv_row()]),
            )
        }
        Command::Monitor {
            target,
            horizon,
            poll_interval,
            world,
        } => {
            let mut cfg = load_world(&world)?;
            cfg.horizon = horizon;
            let op = AttackOp::Monitor {
                target,
                at: 0,
                poll_interval,
            };
            let AttackOutcome::Monitor(timeline) = run_single(with_op(cfg, op, cli.seed)?, out_dir)? else {
                unreachable!()
            };
            for (start, end) in timeline.offline_spans(horizon) {
                println!("offline {:.0}s .. {:.0}s", start as f64 / 1e3, end as f64 / 1e3);
            }
            emit_csv(
                out_dir,
                "monitor.csv",
                &csv(prekeysim_core::attack::OnlineTimeline::CSV_HEADER, timeline.csv_rows()),
            )
        }
        Command::Dos {
            rate,
            duration,
            probes,
            restart_after,
        } => {
            let report = dos_clog(&DosConfig {
                rate,
                duration,
                probes,
                restart_after,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            })
            .map_err(ScenarioError::from)?;
            println!(
                "{} of {} contact fetches failed during the attack",
                report.probe_failures, report.probes
            );
            match report.message_delivered_at {
                Some(t) => println!("queued message delivered at {:.1}s", t as f64 / 1e3),
                None => println!("queued message not delivered"),
            }
            emit_csv(out_dir, "dos.csv", &csv(DosReport::CSV_HEADER, [report.csv_row()]))
        }
        Command::PfsExperiment {
            profile,
            state,
            all,
            trials,
            cycles,
        } => {
            let base = PfsExperimentConfig {
                trials,
                cycles,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let cells = if all {
                table2(&base).map_err(ScenarioError::from)?
            } else {
                let cfg = PfsExperimentConfig {
                    model: profile.expect("required by clap"),
                    condition: state.expect("required by clap"),
                    ..base
                };
                vec![pfs_experiment(&cfg).map_err(ScenarioError::from)?]
            };
            for c in &cells {
                println!(
                    "{} {}: {:.1}% of {} sessions without a one-time prekey (target {:.0}%)",
                    c.model,
                    c.condition,
                    100.0 * c.success_rate,
                    c.trials,
                    100.0 * c.target_rate
                );
            }
            emit_csv(out_dir, "pfs_cells.csv", &csv(PfsCell::CSV_HEADER, cells.iter().map(PfsCell::csv_row)))
        }
        Command::Run { scenario } => {
            let mut cfg = ScenarioConfig::load(&scenario)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = run_scenario(&cfg)?;
            let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| {
                let stem = scenario.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
                PathBuf::from("out").join(stem)
            });
            write_run(&dir, &out)?;
            let r = &out.report;
            println!("{} attack steps, {} contact sessions", r.attacks.len(), r.contacts.sessions);
            println!(
                "sessions without a one-time prekey: {} of {} ({:.2}%)",
                r.contacts.without_one_time_prekey,
                r.contacts.established,
                100.0 * r.contacts.depletion_success_rate
            );
            for d in &r.devices {
                println!(
                    "{}: {} refills, {} bytes uploaded, store empty {:.2}% of the time",
                    d.jid,
                    d.refill_events,
                    d.bytes,
                    100.0 * d.empty_fraction
                );
            }
            println!("results written to {}", dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
