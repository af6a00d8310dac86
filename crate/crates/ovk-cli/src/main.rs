//! `ovk`: emulate ownership-key authenticators and relying services from
//! the command line.
//!
//! Typical single-machine walkthrough:
//!
//! ```text
//! ovk manufacturer create --id acme --out mf.json
//! ovk device create --manufacturer mf.json --model phone --out a.json
//! ovk device create --manufacturer mf.json --model laptop --out b.json
//! ovk device negotiate --device a.json --channel /tmp/q --id 0 --parties 2 --password pw --epoch 1 &
//! ovk device negotiate --device b.json --channel /tmp/q --id 1 --parties 2 --password pw --epoch 1
//! ovk policy create --manufacturer mf.json --models phone,laptop --out policy.json
//! ovk service init --origin https://demo.example --policy policy.json --store store.json --out svc.json
//! ovk service serve --config svc.json --port 8080 &
//! ovk device register --device a.json --url http://127.0.0.1:8080 --origin https://demo.example --user alice
//! ovk device login --device b.json --url http://127.0.0.1:8080 --origin https://demo.example --user alice
//! ```
//!
//! Exit codes: 0 success, 1 protocol failure (module error name on
//! stderr), 2 usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use ovk_core::attestation::{Manufacturer, TrustPolicy};
use ovk_core::authenticator::{Authenticator, DeviceError, LoginOutcome, RetentionPolicy, UpdateOutcome};
use ovk_core::clock::{Clock, SystemClock};
use ovk_core::seed_exchange::NegotiationConfig;
use ovk_core::service::{ServiceConfig, ServiceState};
use ovk_harness::channel::{DirChannel, negotiate_over_dir};
use ovk_harness::http::{HttpClient, HttpServer};
use ovk_harness::{RaceConfig, TransportKind, Winner, run_race, run_scenario};

#[derive(Parser)]
#[command(name = "ovk", version, about = "ownership-verification-key harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a manufacturer root for issuing device identities.
    Manufacturer {
        #[command(subcommand)]
        command: ManufacturerCommand,
    },
    /// Build a service trust policy.
    Policy {
        #[command(subcommand)]
        command: PolicyCommand,
    },
    /// Operate an emulated authenticator stored in a JSON file.
    Device {
        #[command(subcommand)]
        command: DeviceCommand,
    },
    /// Configure and run a relying service.
    Service {
        #[command(subcommand)]
        command: ServiceCommand,
    },
    /// Execute a scripted scenario file.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Simulate an update race between a user and an attacker.
    Race {
        #[command(subcommand)]
        command: RaceCommand,
    },
}

#[derive(Subcommand)]
enum ManufacturerCommand {
    Create {
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Trust a manufacturer root and a list of device models.
    Create {
        #[arg(long)]
        manufacturer: PathBuf,
        /// Comma-separated model names granted both policy criteria.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ServiceTarget {
    /// Device state file, updated in place.
    #[arg(long)]
    device: PathBuf,
    /// Service base URL, e.g. http://127.0.0.1:8080.
    #[arg(long)]
    url: String,
    /// Trusted service origin (the channel's authenticated identity).
    #[arg(long)]
    origin: String,
    /// Account name.
    #[arg(long)]
    user: String,
}

#[derive(Subcommand)]
enum DeviceCommand {
    /// Mint a device identity from a manufacturer file.
    Create {
        #[arg(long)]
        manufacturer: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Join a seed negotiation over a shared directory channel.
    Negotiate {
        #[arg(long)]
        device: PathBuf,
        /// Directory used as the message channel.
        #[arg(long)]
        channel: PathBuf,
        /// This party's identifier, 0-based.
        #[arg(long)]
        id: u32,
        #[arg(long)]
        parties: u32,
        #[arg(long)]
        password: String,
        /// Seed generation counter; all parties must pass the same value.
        #[arg(long)]
        epoch: u64,
        /// PBKDF2 iteration count for the password envelopes.
        #[arg(long)]
        iterations: Option<u32>,
        /// Seconds to wait for each incoming round.
        #[arg(long, default_value_t = 60)]
        timeout_secs: u64,
    },
    /// Register a new account (first key plus ownership key).
    Register {
        #[command(flatten)]
        target: ServiceTarget,
    },
    /// Sign in; enrolls seamlessly if this device has no credential yet.
    Login {
        #[command(flatten)]
        target: ServiceTarget,
    },
    /// Send the updating message due after a re-share.
    Update {
        #[command(flatten)]
        target: ServiceTarget,
    },
}

#[derive(Subcommand)]
enum ServiceCommand {
    /// Write a service configuration file.
    Init {
        #[arg(long)]
        origin: String,
        #[arg(long)]
        policy: PathBuf,
        /// Persistence file for the service state.
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 86_400)]
        migration_period_secs: u64,
        #[arg(long, default_value_t = 300)]
        challenge_ttl_secs: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service against the real clock.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Listening port; overrides the OVK_PORT environment variable.
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    Run {
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = TransportArg::Loopback)]
        transport: TransportArg,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TransportArg {
    Loopback,
    Http,
}

#[derive(Subcommand)]
enum RaceCommand {
    Run {
        /// Declared device count in the account metadata.
        #[arg(long)]
        n: u32,
        /// Registered devices the user still holds.
        #[arg(long)]
        nu: u32,
        /// Registered devices the attacker controls.
        #[arg(long)]
        na: u32,
        /// The attacker's updating message arrives first.
        #[arg(long, default_value_t = false)]
        attacker_first: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failure carrying the module error name for stderr and the exit code.
struct CliFailure {
    name: String,
    detail: String,
}

impl CliFailure {
    fn new(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self { name: name.into(), detail: detail.into() }
    }
}

fn device_error_name(error: &DeviceError) -> String {
    match error {
        DeviceError::Service { code, .. } => code.clone(),
        DeviceError::DeviceLocked => "DeviceLocked".into(),
        DeviceError::NoSeed => "NoSeed".into(),
        DeviceError::AlreadyRegistered => "AlreadyRegistered".into(),
        DeviceError::NoCredential => "NoCredential".into(),
        DeviceError::WrongService => "WrongService".into(),
        DeviceError::NoMatchingSeed => "NoMatchingSeed".into(),
        DeviceError::EpochOrder => "EpochOrder".into(),
        DeviceError::ConsentRequired => "ConsentRequired".into(),
        DeviceError::Transport(_) => "Transport".into(),
        DeviceError::Protocol(_) => "Protocol".into(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliFailure> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliFailure::new("Io", format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&raw)
        .map_err(|e| CliFailure::new("ParseError", format!("{what} {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliFailure> {
    let json = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, json)
        .map_err(|e| CliFailure::new("Io", format!("{}: {e}", path.display())))
}

fn load_device(path: &Path) -> Result<Authenticator, CliFailure> {
    let mut device: Authenticator = read_json(path, "device file")?;
    // Loading the file stands in for the user passing local verification.
    device.unlock(true);
    Ok(device)
}

fn with_device<T>(
    path: &Path,
    run: impl FnOnce(&mut Authenticator) -> Result<T, DeviceError>,
) -> Result<T, CliFailure> {
    let mut device = load_device(path)?;
    let outcome = run(&mut device)
        .map_err(|e| CliFailure::new(device_error_name(&e), e.to_string()))?;
    write_json(path, &device)?;
    Ok(outcome)
}

fn run() -> Result<(), CliFailure> {
    let cli = Cli::parse();
    let mut rng = rand::rng();

    match cli.command {
        Command::Manufacturer { command: ManufacturerCommand::Create { id, out } } => {
            let manufacturer = Manufacturer::new(id, &mut rng);
            write_json(&out, &manufacturer)?;
            println!("manufacturer written to {}", out.display());
        }
        Command::Policy { command: PolicyCommand::Create { manufacturer, models, out } } => {
            let manufacturer: Manufacturer = read_json(&manufacturer, "manufacturer file")?;
            let mut policy = TrustPolicy::default();
            policy.trust_root(manufacturer.root_point());
            for model in models {
                policy.compliant_models.insert(model.clone());
                policy.secure_storage_models.insert(model);
            }
            write_json(&out, &policy)?;
            println!("policy written to {}", out.display());
        }
        Command::Device { command } => run_device(command, &mut rng)?,
        Command::Service { command } => run_service(command, &mut rng)?,
        Command::Scenario { command: ScenarioCommand::Run { path, transport } } => {
            let transport = match transport {
                TransportArg::Loopback => TransportKind::Loopback,
                TransportArg::Http => TransportKind::Http,
            };
            let report = run_scenario(&path, transport)
                .map_err(|e| CliFailure::new("ScenarioParse", e.to_string()))?;
            print!("{}", report.to_json_lines());
            if !report.all_passed() {
                let failing: Vec<usize> = report
                    .records
                    .iter()
                    .filter(|r| !r.ok)
                    .map(|r| r.step)
                    .collect();
                return Err(CliFailure::new(
                    "AssertionFailed",
                    format!("failing steps: {failing:?}"),
                ));
            }
        }
        Command::Race { command: RaceCommand::Run { n, nu, na, attacker_first, seed } } => {
            let config = RaceConfig { n, n_u: nu, n_a: na, attacker_first };
            let outcome =
                run_race(&config, seed).map_err(|e| CliFailure::new("Race", e.to_string()))?;
            println!("{}", serde_json::to_string(&outcome).expect("serializable"));
            println!(
                "winner: {}",
                match outcome.winner {
                    Winner::User => "user",
                    Winner::Attacker => "attacker",
                }
            );
        }
    }
    Ok(())
}

fn run_device(command: DeviceCommand, rng: &mut impl rand::CryptoRng) -> Result<(), CliFailure> {
    match command {
        DeviceCommand::Create { manufacturer, model, out } => {
            let manufacturer: Manufacturer = read_json(&manufacturer, "manufacturer file")?;
            let identity = manufacturer.issue_device(model, rng);
            let device = Authenticator::new(identity, RetentionPolicy::default());
            write_json(&out, &device)?;
            println!("device written to {}", out.display());
        }
        DeviceCommand::Negotiate {
            device,
            channel,
            id,
            parties,
            password,
            epoch,
            iterations,
            timeout_secs,
        } => {
            let mut state = load_device(&device)?;
            let mut config = NegotiationConfig::new(password, id, parties, epoch)
                .map_err(|e| CliFailure::new("Config", e.to_string()))?;
            if let Some(iterations) = iterations {
                config = config.with_iterations(iterations);
            }
            let channel = DirChannel::new(&channel)
                .map_err(|e| CliFailure::new("Io", e.to_string()))?;
            let record = negotiate_over_dir(
                config,
                state.identity(),
                &channel,
                Duration::from_secs(timeout_secs),
                rng,
            )
            .map_err(|e| CliFailure::new("Exchange", e.to_string()))?;

            let now = SystemClock.now();
            let fingerprint = record.seed.fingerprint();
            let peers = record.peer_models.clone();
            state
                .store_seed(record, now)
                .map_err(|e| CliFailure::new(device_error_name(&e), e.to_string()))?;
            write_json(&device, &state)?;
            println!("agreed seed epoch={epoch} fingerprint={fingerprint} peers={peers:?}");
        }
        DeviceCommand::Register { target } => {
            let receipt = with_device(&target.device, |device| {
                let mut client = HttpClient::new(&target.url, &target.origin);
                device.register_account(&mut client, &target.user, &mut rand::rng())
            })?;
            println!(
                "registered: credential={} capacity={}",
                receipt.credential_id, receipt.capacity
            );
        }
        DeviceCommand::Login { target } => {
            let outcome = with_device(&target.device, |device| {
                let mut client = HttpClient::new(&target.url, &target.origin);
                device.login_or_enroll(&mut client, &target.user, &mut rand::rng())
            })?;
            match outcome {
                LoginOutcome::Session { update_ack: None } => println!("signed in"),
                LoginOutcome::Session { update_ack: Some(ack) } => {
                    println!("signed in; update acknowledged: {ack:?}")
                }
                LoginOutcome::Enrolled { credential_id } => {
                    println!("seamless enrollment performed: credential={credential_id}")
                }
                LoginOutcome::CredentialRevoked => {
                    println!("credential revoked by the service; re-enroll on next login")
                }
            }
        }
        DeviceCommand::Update { target } => {
            let outcome = with_device(&target.device, |device| {
                let mut client = HttpClient::new(&target.url, &target.origin);
                device.send_update(&mut client, &target.user, &mut rand::rng())
            })?;
            match outcome {
                UpdateOutcome::Committed { revoked } => {
                    println!("update committed; revoked {revoked:?}")
                }
                UpdateOutcome::Pending { deadline } => {
                    println!("update pending until t={deadline}")
                }
                UpdateOutcome::AlreadyCurrent => println!("service already current"),
            }
        }
    }
    Ok(())
}

/// On-disk service configuration.
#[derive(serde::Serialize, serde::Deserialize)]
struct ServiceFileConfig {
    origin: String,
    migration_period_secs: u64,
    challenge_ttl_secs: u64,
    store_path: PathBuf,
    trust_policy_path: PathBuf,
}

fn run_service(command: ServiceCommand, rng: &mut impl rand::CryptoRng) -> Result<(), CliFailure> {
    match command {
        ServiceCommand::Init {
            origin,
            policy,
            store,
            migration_period_secs,
            challenge_ttl_secs,
            out,
        } => {
            // Validate the policy parses before writing the config.
            let _: TrustPolicy = read_json(&policy, "policy file")?;
            let config = ServiceFileConfig {
                origin,
                migration_period_secs,
                challenge_ttl_secs,
                store_path: store,
                trust_policy_path: policy,
            };
            write_json(&out, &config)?;
            println!("service config written to {}", out.display());
        }
        ServiceCommand::Serve { config, port } => {
            let file: ServiceFileConfig = read_json(&config, "service config")?;
            let state = if file.store_path.exists() {
                ServiceState::restore(&file.store_path)
                    .map_err(|e| CliFailure::new(e.code(), e.to_string()))?
            } else {
                let policy: TrustPolicy = read_json(&file.trust_policy_path, "policy file")?;
                let mut service_config = ServiceConfig::new(file.origin.clone());
                service_config.migration_period_secs = file.migration_period_secs;
                service_config.challenge_ttl_secs = file.challenge_ttl_secs;
                ServiceState::new(service_config, policy, rng)
            };

            let port = port
                .or_else(|| std::env::var("OVK_PORT").ok().and_then(|p| p.parse().ok()))
                .unwrap_or(8080);
            let server = HttpServer::spawn(
                Arc::new(Mutex::new(state)),
                Arc::new(ovk_core::clock::SystemClock),
                &format!("127.0.0.1:{port}"),
                Some(file.store_path.clone()),
            )
            .map_err(|e| CliFailure::new("Io", e.to_string()))?;
            println!("listening on {}", server.addr());
            println!("origin {}", file.origin);

            // Serve until interrupted.
            loop {
                std::thread::sleep(Duration::from_secs(3600));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("{}: {}", failure.name, failure.detail);
            ExitCode::from(1)
        }
    }
}
