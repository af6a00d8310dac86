//! Update-race simulation: a legitimate user and an attacker who controls
//! some registered devices re-share disjoint seeds and race their updating
//! messages against one migration window.
//!
//! The full protocol stack runs for real: devices negotiate seeds, enroll,
//! and send signed updating messages through a service with an injected
//! clock. The winner is read off behaviorally at the end: whichever
//! party's devices can still sign in owns the committed key.

use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use ovk_core::attestation::{Manufacturer, TrustPolicy};
use ovk_core::authenticator::{Authenticator, DeviceError, LoginOutcome, RetentionPolicy, UpdateOutcome};
use ovk_core::clock::{Clock, SimClock};
use ovk_core::crypto;
use ovk_core::seed_exchange::NegotiationConfig;
use ovk_core::service::{ServiceConfig, ServiceState};
use ovk_core::wire::Loopback;

use crate::channel::run_in_memory;

const MIGRATION_PERIOD: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RaceError {
    #[error("invalid race config: {0}")]
    Invalid(String),
    #[error("race execution failed: {0}")]
    Execution(String),
}

/// Counts of registered devices per party.
///
/// `n` is the declared device count in the account metadata; `n_u` of the
/// registered credentials belong to the user and `n_a` to the attacker.
/// `attacker_first` decides whose updating message the service sees first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaceConfig {
    pub n: u32,
    pub n_u: u32,
    pub n_a: u32,
    pub attacker_first: bool,
}

impl RaceConfig {
    pub fn validate(&self) -> Result<(), RaceError> {
        if self.n < 2 {
            return Err(RaceError::Invalid("n must be at least 2".into()));
        }
        if self.n_u < 1 || self.n_a < 1 {
            return Err(RaceError::Invalid("both parties need at least one device".into()));
        }
        if self.n_u + self.n_a > self.n {
            return Err(RaceError::Invalid("n_u + n_a must not exceed n".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    User,
    Attacker,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaceOutcome {
    pub winner: Winner,
    /// Whether the commit happened by majority before the deadline.
    pub by_majority: bool,
    pub votes_user: u32,
    pub votes_attacker: u32,
}

/// Runs one race. Deterministic for a given `(config, ordering_seed)`.
pub fn run_race(config: &RaceConfig, ordering_seed: u64) -> Result<RaceOutcome, RaceError> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(ordering_seed);
    let n = config.n as usize;
    let registered = (config.n_u + config.n_a) as usize;

    let manufacturer = Manufacturer::new("acme", &mut rng);
    let mut policy = TrustPolicy::default();
    policy.trust_root(manufacturer.root_point());
    // n original devices, one user replacement, one attacker helper.
    let mut devices: Vec<Authenticator> = (0..n + 2)
        .map(|i| {
            let model = format!("model-{i}");
            policy.compliant_models.insert(model.clone());
            policy.secure_storage_models.insert(model.clone());
            let mut device = Authenticator::new(
                manufacturer.issue_device(model, &mut rng),
                RetentionPolicy::default(),
            );
            device.unlock(true);
            device
        })
        .collect();

    let mut service_config = ServiceConfig::new("https://race.example");
    service_config.migration_period_secs = MIGRATION_PERIOD;
    let state = Arc::new(Mutex::new(ServiceState::new(service_config, policy, &mut rng)));
    let clock = SimClock::new(0);
    let client = || Loopback::new(state.clone(), Arc::new(clock.clone()));

    let exec = |err: DeviceError| RaceError::Execution(err.to_string());

    // All n declared devices share the original seed.
    share(&mut devices, &(0..n).collect::<Vec<_>>(), 1, "user-pw", &mut rng)?;
    devices[0]
        .register_account(&mut client(), "victim", &mut rng)
        .map_err(exec)?;
    for device in devices.iter_mut().take(registered).skip(1) {
        device.login_or_enroll(&mut client(), "victim", &mut rng).map_err(exec)?;
    }

    // Disjoint re-shares: the user with a replacement device, the attacker
    // with a helper of their own.
    let user_indices: Vec<usize> = (0..config.n_u as usize).collect();
    let attacker_indices: Vec<usize> = (config.n_u as usize..registered).collect();
    let mut user_group = user_indices.clone();
    user_group.push(n); // replacement device
    let mut attacker_group = attacker_indices.clone();
    attacker_group.push(n + 1); // attacker's own device
    share(&mut devices, &user_group, 2, "user-pw-2", &mut rng)?;
    share(&mut devices, &attacker_group, 2, "attacker-pw", &mut rng)?;

    // Vote order: the leading party's first device votes first; the rest
    // of the schedule is shuffled. The winner never depends on the tail
    // order, only on counts and on who was first.
    let (leading, trailing) = if config.attacker_first {
        (attacker_indices.clone(), user_indices.clone())
    } else {
        (user_indices.clone(), attacker_indices.clone())
    };
    let mut tail: Vec<usize> =
        leading[1..].iter().chain(trailing.iter()).copied().collect();
    tail.shuffle(&mut rng);
    let mut schedule = vec![leading[0]];
    schedule.extend(tail);

    let mut by_majority = false;
    for index in schedule {
        clock.advance(1);
        match devices[index].send_update(&mut client(), "victim", &mut rng) {
            Ok(UpdateOutcome::Committed { .. }) => by_majority = true,
            Ok(_) => {}
            // After a majority commit the losing side's metadata no longer
            // matches any seed it holds; its late votes abort client-side.
            Err(DeviceError::NoMatchingSeed) => {}
            Err(err) if err.is_service_code("RevokedCredential") => {}
            Err(err) => return Err(exec(err)),
        }
    }

    // Let any still-open window expire and commit.
    clock.advance(MIGRATION_PERIOD + 1);
    state.lock().expect("service lock").finalize_due(clock.now());

    let probe = |device: &mut Authenticator, rng: &mut ChaCha20Rng| -> Result<bool, RaceError> {
        match device.login_or_enroll(&mut client(), "victim", rng) {
            Ok(LoginOutcome::Session { .. }) => Ok(true),
            Ok(LoginOutcome::CredentialRevoked) => Ok(false),
            Ok(other) => Err(RaceError::Execution(format!("unexpected probe outcome {other:?}"))),
            Err(err) => Err(RaceError::Execution(format!("probe failed: {err}"))),
        }
    };
    let mut user_alive = false;
    for index in &user_indices {
        if probe(&mut devices[*index], &mut rng)? {
            user_alive = true;
        }
    }
    let mut attacker_alive = false;
    for index in &attacker_indices {
        if probe(&mut devices[*index], &mut rng)? {
            attacker_alive = true;
        }
    }
    if user_alive == attacker_alive {
        return Err(RaceError::Execution(format!(
            "exactly one party must survive, got user={user_alive} attacker={attacker_alive}"
        )));
    }
    state
        .lock()
        .expect("service lock")
        .assert_invariants()
        .map_err(RaceError::Execution)?;

    Ok(RaceOutcome {
        winner: if user_alive { Winner::User } else { Winner::Attacker },
        by_majority,
        votes_user: config.n_u,
        votes_attacker: config.n_a,
    })
}

fn share(
    devices: &mut [Authenticator],
    indices: &[usize],
    epoch: u64,
    password: &str,
    rng: &mut ChaCha20Rng,
) -> Result<(), RaceError> {
    let configs: Vec<NegotiationConfig> = (0..indices.len() as u32)
        .map(|id| {
            NegotiationConfig::new(password, id, indices.len() as u32, epoch)
                .map(|c| c.with_iterations(crypto::MIN_PBES2_ITERATIONS))
        })
        .collect::<Result<_, _>>()
        .map_err(|e| RaceError::Execution(e.to_string()))?;
    let identities: Vec<_> =
        indices.iter().map(|i| devices[*i].identity().clone()).collect();
    let identity_refs: Vec<&_> = identities.iter().collect();
    let records = run_in_memory(configs, &identity_refs, rng)
        .map_err(|e| RaceError::Execution(e.to_string()))?;
    for (index, record) in indices.iter().zip(records) {
        devices[*index]
            .store_seed(record, 0)
            .map_err(|e| RaceError::Execution(e.to_string()))?;
    }
    Ok(())
}
