//! Scripted end-to-end scenarios over an injected clock.
//!
//! A scenario file declares emulated devices and services and an ordered
//! script of actions: seed shares, registrations, logins, updates, clock
//! advances, and expectations. The engine executes the script
//! deterministically (all randomness flows from the scenario's `rng_seed`)
//! and emits one report record per action, as JSON lines with a stable
//! field order. Loopback and HTTP transports must produce identical
//! reports for identical scripts.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use ovk_core::attestation::{Manufacturer, TrustPolicy};
use ovk_core::authenticator::{Authenticator, LoginOutcome, RetentionPolicy, UpdateOutcome};
use ovk_core::clock::{Clock, SimClock};
use ovk_core::crypto;
use ovk_core::seed_exchange::NegotiationConfig;
use ovk_core::service::{ServiceConfig, ServiceState};
use ovk_core::wire::{FrameLog, Loopback, OvkState, ServiceClient};

use crate::channel::run_in_memory;
use crate::http::{HttpClient, HttpServer};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("scenario invalid: {0}")]
    Invalid(String),
    #[error("step {step} ({action}) failed: {message}")]
    Action { step: usize, action: String, message: String },
}

/// Which transport carries device-service traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Loopback,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    #[serde(default)]
    pub model: Option<String>,
    /// Simulated time at which an attacker gains control of this device;
    /// recorded in the report when the clock crosses it.
    #[serde(default)]
    pub compromise_at: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub origin: String,
    #[serde(default = "default_migration_period")]
    pub migration_period_secs: u64,
    #[serde(default = "default_challenge_ttl")]
    pub challenge_ttl_secs: u64,
}

fn default_migration_period() -> u64 {
    24 * 60 * 60
}

fn default_challenge_ttl() -> u64 {
    300
}

/// Expected outcome of a `login` action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoginExpect {
    Session,
    Enrolled,
    Revoked,
}

/// Expected outcome of an `update` action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateExpect {
    Pending,
    Committed,
    AlreadyCurrent,
}

/// Service- and device-probing assertions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "what", rename_all = "snake_case")]
pub enum Check {
    /// The device can sign in with its existing credential.
    LoginOk { device: String, service: String, username: String },
    /// The login is denied with the given error code.
    LoginDenied { device: String, service: String, username: String, error: String },
    /// The device has no credential yet and enrolls seamlessly.
    SeamlessEnroll { device: String, service: String, username: String },
    /// Number of active credentials on the account.
    ActiveCredentials { service: String, username: String, count: usize },
    /// The account's ownership-key state.
    OvkState { service: String, username: String, state: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Run a password-authenticated seed exchange among the named devices.
    ShareSeed { devices: Vec<String>, password: String },
    /// Create an account with a fresh key and ownership key.
    Register { device: String, service: String, username: String },
    /// Sign in; enrolls seamlessly when the device has no credential.
    Login {
        device: String,
        service: String,
        username: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect: Option<LoginExpect>,
    },
    /// Send the updating message due for this service.
    Update {
        device: String,
        service: String,
        username: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect: Option<UpdateExpect>,
    },
    /// Mark a device lost: it keeps its state but may not join re-shares.
    LoseDevice { device: String },
    /// Advance the simulated clock.
    AdvanceClock { secs: u64 },
    /// Assert a condition.
    Expect { check: Check },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub rng_seed: u64,
    pub devices: Vec<DeviceSpec>,
    pub services: Vec<ServiceSpec>,
    pub script: Vec<Action>,
}

impl Scenario {
    pub fn from_json(json: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario =
            serde_json::from_str(json).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let device_names: Vec<&str> = self.devices.iter().map(|d| d.name.as_str()).collect();
        let service_names: Vec<&str> = self.services.iter().map(|s| s.name.as_str()).collect();
        let know_device = |name: &str| device_names.contains(&name);
        let know_service = |name: &str| service_names.contains(&name);

        for (index, action) in self.script.iter().enumerate() {
            let bad = |what: &str| {
                Err(ScenarioError::Invalid(format!("step {index}: unknown {what}")))
            };
            match action {
                Action::ShareSeed { devices, .. } => {
                    if devices.len() < 2 {
                        return Err(ScenarioError::Invalid(format!(
                            "step {index}: share_seed needs at least 2 devices"
                        )));
                    }
                    if !devices.iter().all(|d| know_device(d)) {
                        return bad("device");
                    }
                }
                Action::Register { device, service, .. }
                | Action::Login { device, service, .. }
                | Action::Update { device, service, .. } => {
                    if !know_device(device) {
                        return bad("device");
                    }
                    if !know_service(service) {
                        return bad("service");
                    }
                }
                Action::LoseDevice { device } => {
                    if !know_device(device) {
                        return bad("device");
                    }
                }
                Action::AdvanceClock { secs } => {
                    if *secs == 0 {
                        return Err(ScenarioError::Invalid(format!(
                            "step {index}: clock must advance strictly"
                        )));
                    }
                }
                Action::Expect { check } => {
                    let (device, service) = match check {
                        Check::LoginOk { device, service, .. }
                        | Check::LoginDenied { device, service, .. }
                        | Check::SeamlessEnroll { device, service, .. } => {
                            (Some(device), service)
                        }
                        Check::ActiveCredentials { service, .. }
                        | Check::OvkState { service, .. } => (None, service),
                    };
                    if let Some(device) = device
                        && !know_device(device)
                    {
                        return bad("device");
                    }
                    if !know_service(service) {
                        return bad("service");
                    }
                }
            }
        }
        Ok(())
    }
}

/// One line of the run report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub step: usize,
    pub action: String,
    pub detail: String,
    pub outcome: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub records: Vec<ActionRecord>,
    pub passed: usize,
    pub failed: usize,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }

    /// JSON lines: one record per line, then a summary line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out.push_str(
            &serde_json::to_string(&serde_json::json!({
                "scenario": self.scenario,
                "passed": self.passed,
                "failed": self.failed,
            }))
            .expect("summary serializes"),
        );
        out.push('\n');
        out
    }
}

struct ServiceHandle {
    state: Arc<Mutex<ServiceState>>,
    origin: String,
    server: Option<HttpServer>,
}

/// The emulated world executing one scenario.
pub struct Engine {
    devices: BTreeMap<String, Authenticator>,
    lost: BTreeMap<String, bool>,
    compromise_at: BTreeMap<String, u64>,
    services: BTreeMap<String, ServiceHandle>,
    clock: SimClock,
    log: FrameLog,
    rng: ChaCha20Rng,
    transport: TransportKind,
    next_epoch: u64,
}

impl Engine {
    pub fn new(scenario: &Scenario, transport: TransportKind) -> Result<Self, ScenarioError> {
        let mut rng = ChaCha20Rng::seed_from_u64(scenario.rng_seed);
        let clock = SimClock::new(0);
        let log = FrameLog::new();

        let manufacturer = Manufacturer::new("acme", &mut rng);
        let mut policy = TrustPolicy::default();
        policy.trust_root(manufacturer.root_point());

        let mut devices = BTreeMap::new();
        let mut lost = BTreeMap::new();
        let mut compromise_at = BTreeMap::new();
        for spec in &scenario.devices {
            let model = spec
                .model
                .clone()
                .unwrap_or_else(|| format!("model-{}", spec.name.to_lowercase()));
            policy.compliant_models.insert(model.clone());
            policy.secure_storage_models.insert(model.clone());
            let mut device =
                Authenticator::new(manufacturer.issue_device(model, &mut rng), RetentionPolicy::default());
            device.unlock(true);
            if devices.insert(spec.name.clone(), device).is_some() {
                return Err(ScenarioError::Invalid(format!("duplicate device {}", spec.name)));
            }
            lost.insert(spec.name.clone(), false);
            if let Some(at) = spec.compromise_at {
                compromise_at.insert(spec.name.clone(), at);
            }
        }

        let mut services = BTreeMap::new();
        for spec in &scenario.services {
            let mut config = ServiceConfig::new(spec.origin.clone());
            config.migration_period_secs = spec.migration_period_secs;
            config.challenge_ttl_secs = spec.challenge_ttl_secs;
            let state = Arc::new(Mutex::new(ServiceState::new(config, policy.clone(), &mut rng)));
            let server = match transport {
                TransportKind::Loopback => None,
                TransportKind::Http => Some(
                    HttpServer::spawn(
                        state.clone(),
                        Arc::new(clock.clone()),
                        "127.0.0.1:0",
                        None,
                    )
                    .map_err(|e| ScenarioError::Invalid(format!("http server: {e}")))?,
                ),
            };
            let handle = ServiceHandle { state, origin: spec.origin.clone(), server };
            if services.insert(spec.name.clone(), handle).is_some() {
                return Err(ScenarioError::Invalid(format!("duplicate service {}", spec.name)));
            }
        }

        Ok(Self {
            devices,
            lost,
            compromise_at,
            services,
            clock,
            log,
            rng,
            transport,
            next_epoch: 0,
        })
    }

    pub fn devices(&self) -> &BTreeMap<String, Authenticator> {
        &self.devices
    }

    pub fn frame_log(&self) -> &FrameLog {
        &self.log
    }

    pub fn service_state(&self, name: &str) -> Option<Arc<Mutex<ServiceState>>> {
        self.services.get(name).map(|handle| handle.state.clone())
    }

    fn client(&self, service: &str) -> Box<dyn ServiceClient> {
        let handle = &self.services[service];
        match self.transport {
            TransportKind::Loopback => Box::new(
                Loopback::new(handle.state.clone(), Arc::new(self.clock.clone()))
                    .with_log(self.log.clone()),
            ),
            TransportKind::Http => {
                let server = handle.server.as_ref().expect("http transport has a server");
                Box::new(
                    HttpClient::new(server.base_url(), handle.origin.clone())
                        .with_log(self.log.clone()),
                )
            }
        }
    }

    fn share_seed(&mut self, names: &[String], password: &str) -> Result<String, String> {
        for name in names {
            if self.lost[name] {
                return Err(format!("device {name} is lost and cannot join a re-share"));
            }
        }
        self.next_epoch += 1;
        let epoch = self.next_epoch;
        let configs: Vec<NegotiationConfig> = (0..names.len() as u32)
            .map(|id| {
                NegotiationConfig::new(password, id, names.len() as u32, epoch)
                    .map(|c| c.with_iterations(crypto::MIN_PBES2_ITERATIONS))
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let identities: Vec<_> =
            names.iter().map(|name| self.devices[name].identity().clone()).collect();
        let identity_refs: Vec<&_> = identities.iter().collect();
        let records =
            run_in_memory(configs, &identity_refs, &mut self.rng).map_err(|e| e.to_string())?;

        let now = self.clock.now();
        let mut fingerprint = String::new();
        for (name, record) in names.iter().zip(records) {
            fingerprint = record.seed.fingerprint();
            self.devices
                .get_mut(name)
                .expect("validated")
                .store_seed(record, now)
                .map_err(|e| e.to_string())?;
        }
        Ok(format!("epoch={epoch} fingerprint={fingerprint}"))
    }

    fn login(
        &mut self,
        device: &str,
        service: &str,
        username: &str,
    ) -> Result<LoginOutcome, ovk_core::authenticator::DeviceError> {
        let mut client = self.client(service);
        let rng = &mut self.rng;
        self.devices
            .get_mut(device)
            .expect("validated")
            .login_or_enroll(client.as_mut(), username, rng)
    }

    fn run_check(&mut self, check: &Check) -> Result<String, String> {
        match check {
            Check::LoginOk { device, service, username } => {
                match self.login(device, service, username) {
                    Ok(LoginOutcome::Session { .. }) => Ok("session".into()),
                    Ok(other) => Err(format!("expected session, got {other:?}")),
                    Err(err) => Err(format!("expected session, got error {err}")),
                }
            }
            Check::LoginDenied { device, service, username, error } => {
                match self.login(device, service, username) {
                    Ok(LoginOutcome::CredentialRevoked) if error == "RevokedCredential" => {
                        Ok("denied: RevokedCredential".into())
                    }
                    Err(err) if err.is_service_code(error) => Ok(format!("denied: {error}")),
                    Err(ovk_core::authenticator::DeviceError::WrongService)
                        if error == "WrongService" =>
                    {
                        Ok("denied: WrongService".into())
                    }
                    Ok(outcome) => Err(format!("expected denial {error}, got {outcome:?}")),
                    Err(err) => Err(format!("expected denial {error}, got {err}")),
                }
            }
            Check::SeamlessEnroll { device, service, username } => {
                match self.login(device, service, username) {
                    Ok(LoginOutcome::Enrolled { credential_id }) => {
                        Ok(format!("enrolled as {credential_id}"))
                    }
                    Ok(other) => Err(format!("expected enrollment, got {other:?}")),
                    Err(err) => Err(format!("expected enrollment, got error {err}")),
                }
            }
            Check::ActiveCredentials { service, username, count } => {
                let state = self.services[service].state.lock().expect("service lock");
                let account = state
                    .account(username)
                    .ok_or_else(|| format!("no account {username}"))?;
                let active = account.active_count();
                if active == *count {
                    Ok(format!("{active} active"))
                } else {
                    Err(format!("expected {count} active credentials, found {active}"))
                }
            }
            Check::OvkState { service, username, state } => {
                // Commit any due migration first, mirroring lazy
                // finalization on access.
                let now = self.clock.now();
                let handle = &self.services[service];
                let mut service_state = handle.state.lock().expect("service lock");
                service_state.finalize_due(now);
                let account = service_state
                    .account(username)
                    .ok_or_else(|| format!("no account {username}"))?;
                let actual = if account.migration.is_some() {
                    OvkState::Migrating
                } else {
                    OvkState::Stable
                };
                let actual_str = match actual {
                    OvkState::Migrating => "migrating",
                    OvkState::Stable => "stable",
                };
                if actual_str == state {
                    Ok(actual_str.into())
                } else {
                    Err(format!("expected {state}, found {actual_str}"))
                }
            }
        }
    }

    /// Executes one action, returning (detail, outcome, ok).
    fn run_action(&mut self, action: &Action) -> (String, String, bool) {
        match action {
            Action::ShareSeed { devices, password } => {
                let detail = format!("devices={devices:?}");
                match self.share_seed(devices, password) {
                    Ok(outcome) => (detail, outcome, true),
                    Err(err) => (detail, err, false),
                }
            }
            Action::Register { device, service, username } => {
                let detail = format!("{device} -> {service} as {username}");
                let mut client = self.client(service);
                let rng = &mut self.rng;
                let result = self
                    .devices
                    .get_mut(device)
                    .expect("validated")
                    .register_account(client.as_mut(), username, rng);
                match result {
                    Ok(receipt) => (
                        detail,
                        format!("registered {} capacity={}", receipt.credential_id, receipt.capacity),
                        true,
                    ),
                    Err(err) => (detail, err.to_string(), false),
                }
            }
            Action::Login { device, service, username, expect } => {
                let detail = format!("{device} -> {service} as {username}");
                match self.login(device, service, username) {
                    Ok(outcome) => {
                        let label = match &outcome {
                            LoginOutcome::Session { update_ack: None } => "session".to_string(),
                            LoginOutcome::Session { update_ack: Some(_) } => {
                                "session+update".to_string()
                            }
                            LoginOutcome::Enrolled { credential_id } => {
                                format!("enrolled as {credential_id}")
                            }
                            LoginOutcome::CredentialRevoked => "revoked".to_string(),
                        };
                        let ok = match expect {
                            None => !matches!(outcome, LoginOutcome::CredentialRevoked),
                            Some(LoginExpect::Session) => {
                                matches!(outcome, LoginOutcome::Session { .. })
                            }
                            Some(LoginExpect::Enrolled) => {
                                matches!(outcome, LoginOutcome::Enrolled { .. })
                            }
                            Some(LoginExpect::Revoked) => {
                                matches!(outcome, LoginOutcome::CredentialRevoked)
                            }
                        };
                        (detail, label, ok)
                    }
                    Err(err) => (detail, err.to_string(), false),
                }
            }
            Action::Update { device, service, username, expect } => {
                let detail = format!("{device} -> {service} as {username}");
                let mut client = self.client(service);
                let rng = &mut self.rng;
                let result = self
                    .devices
                    .get_mut(device)
                    .expect("validated")
                    .send_update(client.as_mut(), username, rng);
                match result {
                    Ok(outcome) => {
                        let label = match &outcome {
                            UpdateOutcome::Pending { deadline } => format!("pending until {deadline}"),
                            UpdateOutcome::Committed { revoked } => {
                                format!("committed, revoked {revoked:?}")
                            }
                            UpdateOutcome::AlreadyCurrent => "already current".to_string(),
                        };
                        let ok = match expect {
                            None => true,
                            Some(UpdateExpect::Pending) => {
                                matches!(outcome, UpdateOutcome::Pending { .. })
                            }
                            Some(UpdateExpect::Committed) => {
                                matches!(outcome, UpdateOutcome::Committed { .. })
                            }
                            Some(UpdateExpect::AlreadyCurrent) => {
                                matches!(outcome, UpdateOutcome::AlreadyCurrent)
                            }
                        };
                        (detail, label, ok)
                    }
                    Err(err) => (detail, err.to_string(), false),
                }
            }
            Action::LoseDevice { device } => {
                self.lost.insert(device.clone(), true);
                (device.to_string(), "marked lost".into(), true)
            }
            Action::AdvanceClock { secs } => {
                self.clock.advance(*secs);
                let now = self.clock.now();
                let mut compromised = Vec::new();
                for (name, at) in &self.compromise_at {
                    if *at <= now {
                        compromised.push(name.clone());
                    }
                }
                let detail = format!("+{secs}s -> t={now}");
                let outcome = if compromised.is_empty() {
                    "ok".to_string()
                } else {
                    format!("ok; compromised={compromised:?}")
                };
                (detail, outcome, true)
            }
            Action::Expect { check } => {
                let detail = serde_json::to_string(check).expect("check serializes");
                match self.run_check(check) {
                    Ok(outcome) => (detail, outcome, true),
                    Err(err) => (detail, err, false),
                }
            }
        }
    }

    pub fn run(&mut self, scenario: &Scenario) -> Report {
        let mut records = Vec::with_capacity(scenario.script.len());
        let mut passed = 0;
        let mut failed = 0;
        for (step, action) in scenario.script.iter().enumerate() {
            let name = match action {
                Action::ShareSeed { .. } => "share_seed",
                Action::Register { .. } => "register",
                Action::Login { .. } => "login",
                Action::Update { .. } => "update",
                Action::LoseDevice { .. } => "lose_device",
                Action::AdvanceClock { .. } => "advance_clock",
                Action::Expect { .. } => "expect",
            };
            let (detail, outcome, ok) = self.run_action(action);
            if ok {
                passed += 1;
            } else {
                failed += 1;
            }
            records.push(ActionRecord {
                step,
                action: name.to_string(),
                detail,
                outcome,
                ok,
            });
        }
        Report { scenario: scenario.name.clone(), records, passed, failed }
    }
}

/// Parses, validates, and executes a scenario file.
pub fn run_scenario(path: &Path, transport: TransportKind) -> Result<Report, ScenarioError> {
    let scenario = Scenario::from_file(path)?;
    let mut engine = Engine::new(&scenario, transport)?;
    Ok(engine.run(&scenario))
}

/// Executes an already-parsed scenario.
pub fn run_parsed(scenario: &Scenario, transport: TransportKind) -> Result<Report, ScenarioError> {
    let mut engine = Engine::new(scenario, transport)?;
    Ok(engine.run(scenario))
}
