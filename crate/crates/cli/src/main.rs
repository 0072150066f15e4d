mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fpauth::attacks::{
    self, run_hw_mimic, run_replay_attack, write_reports, AttackReport, AttackStrategy,
};
use fpauth::experiment::{
    self, append_rows, run_experiment, tamper_success_rate, write_rows, SweepAxis, Testbed,
};
use fpauth::hwsim::{spawn_fleet_with, FleetFile, Model};
use fpauth::mapping::{Feature, MappingVariant, Request};
use fpauth::service::{Loopback, Server, ServerConfig, ServiceClient, TcpTransport, Transport};
use fpauth::{Backend, Client};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::Config;

#[derive(Parser)]
#[command(
    name = "fpauth",
    version,
    about = "Request-bound hardware fingerprint authentication on a simulated fleet"
)]
struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Versioned TOML configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// CSV file to append results to; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fleet descriptions.
    #[command(subcommand)]
    Fleet(FleetCommand),
    /// Enroll every device of a fleet file.
    Enroll {
        #[arg(long)]
        fleet: PathBuf,
        #[command(flatten)]
        target: Target,
    },
    /// Run the backend service.
    Serve {
        #[arg(long, env = "FPAUTH_ADDR")]
        addr: Option<String>,
        /// Loaded at start if present, written after each enrollment.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Generate tokens on a fleet device and authenticate them.
    Auth {
        #[arg(long)]
        fleet: PathBuf,
        /// Claimed device id.
        #[arg(long)]
        device: u16,
        /// Sign with this device's hardware instead of the claimed one.
        #[arg(long)]
        signer: Option<u16>,
        #[arg(long, default_value = "UNLOCK")]
        op: String,
        /// Payload bytes in hex; repeatable.
        #[arg(long = "payload", default_values = ["00"])]
        payloads: Vec<String>,
        /// First nonce; defaults to one past the backend's last seen nonce.
        #[arg(long)]
        nonce: Option<u32>,
        #[arg(long, default_value_t = 1)]
        count: u32,
        #[command(flatten)]
        target: Target,
    },
    /// Run an attack against a freshly enrolled fleet.
    #[command(subcommand)]
    Attack(AttackCommand),
    /// Run an evaluation sweep.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Print a CSV produced by `eval` or `attack` as a table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum FleetCommand {
    /// Generate a fleet and write it as JSON.
    Spawn {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        model: Option<Model>,
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Target {
    /// A running service.
    #[arg(long, env = "FPAUTH_ADDR")]
    addr: Option<String>,
    /// A snapshot file used in-process; created by `enroll` if missing.
    #[arg(long)]
    snapshot: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    All,
    Full,
    H1Only,
    H3Only,
    H1H2,
}

#[derive(Subcommand)]
enum AttackCommand {
    Replay {
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
    Tamper {
        /// Tasks per round.
        #[arg(long, default_value_t = 100)]
        d: u32,
        #[arg(long, default_value_t = 100)]
        budget: u64,
        #[arg(long, value_enum, default_value = "all")]
        variant: VariantArg,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    MimicHw {
        /// Attacker hardware model; the victim's own model when absent.
        #[arg(long)]
        attacker_model: Option<Model>,
    },
    MimicSw {
        /// Eavesdropped tokens; the config value when absent.
        #[arg(long)]
        tokens: Option<usize>,
    },
    Identify {
        #[arg(long)]
        noise_lo: Option<f64>,
        #[arg(long)]
        noise_hi: Option<f64>,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    Features {
        #[arg(long, value_delimiter = ',')]
        features: Option<Vec<Feature>>,
    },
    SweepUsednum {
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    SweepAcceptnum {
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    NoiseCurve {
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    TamperCurve {
        #[arg(long, default_value_t = 100)]
        d: u32,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 10, 100, 1000])]
        budgets: Vec<u64>,
    },
}

/// A failure with a short machine-readable kind.
struct Failure {
    kind: &'static str,
    message: String,
}

trait Context<T> {
    fn kind(self, kind: &'static str) -> Result<T, Failure>;
}

impl<T, E: std::fmt::Display> Context<T> for Result<T, E> {
    fn kind(self, kind: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            kind,
            message: e.to_string(),
        })
    }
}

fn fail<T>(kind: &'static str, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure {
        kind,
        message: message.into(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = serde_json::to_string(&f.message).unwrap_or_default();
            eprintln!("error kind={} message={message}", f.kind);
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path).kind("config")?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.experiment.seed = seed;
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::Fleet(FleetCommand::Spawn { file, model, count }) => {
            let spec = &config.experiment;
            let seed = cli.seed.unwrap_or(spec.fleet_seed);
            let fleet = FleetFile::generate(
                model.unwrap_or(spec.model),
                count.unwrap_or(spec.count),
                seed,
                spec.sim,
            )
            .kind("sim")?;
            fleet.save(&file).kind("io")?;
            let ids: Vec<String> = fleet
                .devices
                .iter()
                .map(|d| d.device_id.to_string())
                .collect();
            println!(
                "wrote {} {:?} devices to {}: {}",
                fleet.count,
                fleet.model,
                file.display(),
                ids.join(",")
            );
            Ok(())
        }
        Command::Enroll { fleet, target } => enroll(&config, &fleet, &target),
        Command::Serve { addr, snapshot } => serve(&config, addr, snapshot),
        Command::Auth {
            fleet,
            device,
            signer,
            op,
            payloads,
            nonce,
            count,
            target,
        } => {
            let payloads = payloads
                .iter()
                .map(|p| unhex(p))
                .collect::<Result<Vec<_>, _>>()?;
            authenticate(
                &config, &fleet, device, signer, &op, payloads, nonce, count, &target,
            )
        }
        Command::Attack(cmd) => attack(&config, cmd, out),
        Command::Eval(cmd) => eval(&config, cmd, out),
        Command::Report { inputs } => report(&inputs),
    }
}

fn unhex(s: &str) -> Result<Vec<u8>, Failure> {
    if !s.len().is_multiple_of(2) {
        return fail("usage", format!("odd-length hex payload `{s}`"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16))
        .collect::<Result<_, _>>()
        .kind("usage")
}

fn load_backend(config: &Config, snapshot: &Path) -> Result<Backend, Failure> {
    if snapshot.exists() {
        Backend::load(snapshot).kind("backend")
    } else {
        Backend::new(config.experiment.backend_config()).kind("backend")
    }
}

fn enroll(config: &Config, fleet: &Path, target: &Target) -> Result<(), Failure> {
    let fleet = FleetFile::load(fleet).kind("sim")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.experiment.seed);
    let started = Instant::now();
    if let Some(addr) = &target.addr {
        let mut svc = ServiceClient::new(TcpTransport::connect(addr.as_str()).kind("service")?);
        experiment::enroll_fleet(&mut svc, &fleet.devices, &config.experiment, &mut rng)
            .kind("enroll")?;
    } else if let Some(path) = &target.snapshot {
        let backend = load_backend(config, path)?;
        let mut svc = ServiceClient::new(Loopback { backend: &backend });
        experiment::enroll_fleet(&mut svc, &fleet.devices, &config.experiment, &mut rng)
            .kind("enroll")?;
        backend.save(path).kind("io")?;
        for d in &fleet.devices {
            if let Some(cal) = backend.calibration(d.device_id) {
                let parts: Vec<String> = cal
                    .iter()
                    .map(|(f, c)| format!("{f} tpr={:.3} fpr={:.3}", c.tpr, c.fpr))
                    .collect();
                println!("device {}: {}", d.device_id, parts.join(", "));
            }
        }
    }
    println!(
        "enrolled {} devices in {:.1?}",
        fleet.devices.len(),
        started.elapsed()
    );
    Ok(())
}

fn serve(config: &Config, addr: Option<String>, snapshot: Option<PathBuf>) -> Result<(), Failure> {
    let backend = match &snapshot {
        Some(path) => load_backend(config, path)?,
        None => Backend::new(config.experiment.backend_config()).kind("backend")?,
    };
    let addr = addr.unwrap_or_else(|| config.service.addr.clone());
    let server = Server::spawn(
        addr.as_str(),
        Arc::new(backend),
        ServerConfig {
            snapshot,
            read_timeout: None,
        },
    )
    .kind("service")?;
    println!("listening on {}", server.local_addr());
    let _ = std::io::stdout().flush();
    server.wait();
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn authenticate(
    config: &Config,
    fleet: &Path,
    device: u16,
    signer: Option<u16>,
    op: &str,
    payloads: Vec<Vec<u8>>,
    nonce: Option<u32>,
    count: u32,
    target: &Target,
) -> Result<(), Failure> {
    let fleet = FleetFile::load(fleet).kind("sim")?;
    let signer_id = signer.unwrap_or(device);
    let Some(profile) = fleet.devices.iter().find(|d| d.device_id == signer_id) else {
        return fail(
            "usage",
            format!("device {signer_id} is not in the fleet file"),
        );
    };
    let spec = &config.experiment;
    let mut client =
        Client::new(profile.clone(), spec.auth, spec.mapping.clone()).kind("client")?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let local = match &target.snapshot {
        Some(path) => Some(Backend::load(path).kind("backend")?),
        None => None,
    };
    let transport: Box<dyn Transport + '_> = match (&local, &target.addr) {
        (Some(backend), _) => Box::new(Loopback { backend }),
        (None, Some(addr)) => Box::new(TcpTransport::connect(addr.as_str()).kind("service")?),
        (None, None) => return fail("usage", "need --addr or --snapshot"),
    };
    let first = match (nonce, &local) {
        (Some(n), _) => n,
        (None, Some(b)) => b.last_seen_nonce(device).map_or(1, |n| n.saturating_add(1)),
        (None, None) => 1,
    };
    let mut svc = ServiceClient::new(transport);
    for i in 0..count {
        let request = Request::new(op, first.saturating_add(i), payloads.clone());
        let token = client.generate_token(&request, &mut rng).kind("client")?;
        let r = svc.authenticate(device, &request, &token).kind("service")?;
        println!(
            "nonce={} decision={:?} matched={} reason={:?}",
            request.nonce, r.decision, r.matched_count, r.reason
        );
    }
    drop(svc);
    if let (Some(backend), Some(path)) = (&local, &target.snapshot) {
        backend.save(path).kind("io")?;
    }
    Ok(())
}

fn emit_attacks(out: Option<&Path>, reports: &[AttackReport]) -> Result<(), Failure> {
    match out {
        Some(path) => {
            let fresh = std::fs::metadata(path)
                .map(|m| m.len() == 0)
                .unwrap_or(true);
            let mut buf = Vec::new();
            write_reports(&mut buf, reports).kind("io")?;
            let text = String::from_utf8_lossy(&buf);
            let body = if fresh {
                &text[..]
            } else {
                text.split_once('\n').map_or("", |(_, rest)| rest)
            };
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .kind("io")?;
            f.write_all(body.as_bytes()).kind("io")
        }
        None => write_reports(std::io::stdout().lock(), reports).kind("io"),
    }
}

fn attack(config: &Config, cmd: AttackCommand, out: Option<&Path>) -> Result<(), Failure> {
    let spec = &config.experiment;
    let seed = spec.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    if let AttackCommand::Tamper {
        d,
        budget,
        variant,
        trials,
    } = cmd
    {
        let variants = match variant {
            VariantArg::All => MappingVariant::ALL.to_vec(),
            VariantArg::Full => vec![MappingVariant::Full],
            VariantArg::H1Only => vec![MappingVariant::H1Only],
            VariantArg::H3Only => vec![MappingVariant::H3Only],
            VariantArg::H1H2 => vec![MappingVariant::H1H2],
        };
        for v in variants {
            let started = Instant::now();
            let rate = tamper_success_rate(d, v, budget, trials, seed).kind("attack")?;
            let wins = (rate * trials as f64).round() as u64;
            reports.push(AttackReport::new(
                "tamper",
                v.name(),
                seed,
                trials as u64,
                wins,
                started,
            ));
        }
        eprintln!(
            "closed form for d={d}, n={budget}: {:.6}",
            attacks::closed_form_tamper_prob(d as u64, budget)
        );
        return emit_attacks(out, &reports);
    }

    let started = Instant::now();
    let bed = Testbed::build(spec).kind("experiment")?;
    eprintln!(
        "enrolled {} devices in {:.1?}",
        bed.fleet.len(),
        started.elapsed()
    );
    let victim = &bed.fleet[0];
    match cmd {
        AttackCommand::Tamper { .. } => unreachable!(),
        AttackCommand::Replay { trials } => {
            let started = Instant::now();
            let mut client =
                Client::new(victim.clone(), spec.auth, spec.mapping.clone()).kind("client")?;
            let (attempted, flagged, accepted) =
                run_replay_attack(&mut client, &bed.backend, trials, &mut rng).kind("attack")?;
            eprintln!("{flagged} of {attempted} replays flagged");
            reports.push(AttackReport::new(
                "replay",
                "",
                seed,
                attempted as u64,
                accepted as u64,
                started,
            ));
        }
        AttackCommand::MimicHw { attacker_model } => {
            let model = attacker_model.unwrap_or(spec.model);
            let attackers = if model == spec.model {
                bed.fleet[1..].to_vec()
            } else {
                spawn_fleet_with(model, spec.count.min(3), seed, &spec.sim).kind("sim")?
            };
            for a in attackers.iter().take(3) {
                let started = Instant::now();
                let rate = run_hw_mimic(a, victim.device_id, &bed.backend, spec.trials, &mut rng)
                    .kind("attack")?;
                let variant = format!("{:?}#{}->{}", a.model, a.device_id, victim.device_id);
                let wins = (rate * spec.trials as f64).round() as u64;
                reports.push(AttackReport::new(
                    "mimic-hw",
                    &variant,
                    seed,
                    spec.trials as u64,
                    wins,
                    started,
                ));
            }
        }
        AttackCommand::MimicSw { tokens } => {
            let tested = Testbed {
                spec: experiment::ExperimentSpec {
                    traffic_tokens: tokens.unwrap_or(spec.traffic_tokens),
                    ..spec.clone()
                },
                ..bed
            };
            let started = Instant::now();
            let m = experiment::mimic_comparison(&tested, 0, 30).kind("attack")?;
            for (traffic, rates) in [("poisoned", m.poisoned), ("clean", m.clean)] {
                for (strategy, rate) in AttackStrategy::ALL.iter().zip(rates) {
                    let variant = format!("{}/{traffic}", strategy.name());
                    let wins = (rate * spec.trials as f64).round() as u64;
                    reports.push(AttackReport::new(
                        "mimic-sw",
                        &variant,
                        seed,
                        spec.trials as u64,
                        wins,
                        started,
                    ));
                }
            }
        }
        AttackCommand::Identify { noise_lo, noise_hi } => {
            let range = (
                noise_lo.unwrap_or(spec.auth.noise_lo),
                noise_hi.unwrap_or(spec.auth.noise_hi),
            );
            if !(0.0 < range.0 && range.0 <= range.1) {
                return fail("usage", "need 0 < noise-lo <= noise-hi");
            }
            let started = Instant::now();
            let (supervised, extra) =
                experiment::identification(&bed, 0, range, 40).kind("attack")?;
            for (name, r) in [("supervised", supervised), ("extra-device", extra)] {
                let correct = (r.accuracy * r.evaluated as f64).round() as u64;
                reports.push(AttackReport::new(
                    "identify",
                    name,
                    seed,
                    r.evaluated as u64,
                    correct,
                    started,
                ));
            }
        }
    }
    emit_attacks(out, &reports)
}

fn eval(config: &Config, cmd: EvalCommand, out: Option<&Path>) -> Result<(), Failure> {
    let spec = &config.experiment;
    let axis = match cmd {
        EvalCommand::Features { features } => {
            SweepAxis::Features(features.unwrap_or_else(|| Feature::ALL.to_vec()))
        }
        EvalCommand::SweepUsednum { values } => {
            SweepAxis::UsedNum(values.unwrap_or_else(|| (1..=spec.auth.total_num).collect()))
        }
        EvalCommand::SweepAcceptnum { values } => {
            SweepAxis::AcceptNum(values.unwrap_or_else(|| (1..=spec.auth.used_num).collect()))
        }
        EvalCommand::NoiseCurve { values } => SweepAxis::Noise(
            values.unwrap_or_else(|| vec![0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.15, 0.2, 0.3, 0.5]),
        ),
        EvalCommand::TamperCurve { d, budgets } => SweepAxis::TamperBudget { d, budgets },
    };
    let started = Instant::now();
    let rows = run_experiment(spec, &axis).kind("experiment")?;
    eprintln!("{} rows in {:.1?}", rows.len(), started.elapsed());
    match out {
        Some(path) => append_rows(path, &rows).kind("io"),
        None => write_rows(std::io::stdout().lock(), &rows).kind("io"),
    }
}

fn report(inputs: &[PathBuf]) -> Result<(), Failure> {
    for path in inputs {
        let mut reader = csv::Reader::from_path(path).kind("io")?;
        let headers: Vec<String> = reader
            .headers()
            .kind("io")?
            .iter()
            .map(String::from)
            .collect();
        let rows: Vec<Vec<String>> = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(pretty).collect()))
            .collect::<Result<_, _>>()
            .kind("io")?;
        let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
        for r in &rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        println!("{} ({} rows)", path.display(), rows.len());
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            println!("  {}", padded.join("  "));
        };
        line(&headers);
        for r in &rows {
            line(r);
        }
    }
    Ok(())
}

/// Shortens long floats for display.
fn pretty(cell: &str) -> String {
    match cell.parse::<f64>() {
        Ok(v) if cell.contains('.') && cell.len() > 7 => format!("{v:.4}"),
        _ => cell.to_string(),
    }
}
