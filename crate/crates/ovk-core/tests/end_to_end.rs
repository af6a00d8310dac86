//! Full protocol flows over the loopback transport: registration, seamless
//! enrollment, key rotation with immediate and deadline commits, and the
//! misdirected-registration defense.

use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use ovk_core::attestation::{Manufacturer, TrustPolicy};
use ovk_core::authenticator::{Authenticator, DeviceError, LoginOutcome, RetentionPolicy, UpdateOutcome};
use ovk_core::clock::{Clock, SimClock};
use ovk_core::crypto;
use ovk_core::seed_exchange::{Negotiation, NegotiationConfig, SeedRecord, StepOutcome};
use ovk_core::service::{ServiceConfig, ServiceState};
use ovk_core::wire::{FrameLog, Loopback};

const PASSWORD: &str = "between two ferns";
const TEST_ITERATIONS: u32 = crypto::MIN_PBES2_ITERATIONS;

struct World {
    devices: Vec<Authenticator>,
    services: Vec<Arc<Mutex<ServiceState>>>,
    clock: SimClock,
    log: FrameLog,
    rng: ChaCha20Rng,
}

impl World {
    /// `n` devices from one manufacturer, all models trusted by every
    /// service policy.
    fn new(n_devices: usize, origins: &[&str], rng_seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
        let manufacturer = Manufacturer::new("acme", &mut rng);
        let devices: Vec<Authenticator> = (0..n_devices)
            .map(|i| {
                let identity = manufacturer.issue_device(format!("model-{i}"), &mut rng);
                let mut device = Authenticator::new(identity, RetentionPolicy::default());
                device.unlock(true);
                device
            })
            .collect();

        let mut policy = TrustPolicy::default();
        policy.trust_root(manufacturer.root_point());
        for i in 0..n_devices {
            policy.compliant_models.insert(format!("model-{i}"));
            policy.secure_storage_models.insert(format!("model-{i}"));
        }

        let services = origins
            .iter()
            .map(|origin| {
                let mut config = ServiceConfig::new(*origin);
                config.migration_period_secs = 1000;
                Arc::new(Mutex::new(ServiceState::new(config, policy.clone(), &mut rng)))
            })
            .collect();

        Self { devices, services, clock: SimClock::new(0), log: FrameLog::new(), rng }
    }

    fn client(&self, service: usize) -> Loopback {
        Loopback::new(self.services[service].clone(), Arc::new(self.clock.clone()))
            .with_log(self.log.clone())
    }

    /// Runs the ring exchange among the listed devices and stores the
    /// resulting seed on each, returning a copy of the record.
    fn share_seed(&mut self, participants: &[usize], epoch: u64) -> SeedRecord {
        let n = participants.len() as u32;
        let mut negotiations = Vec::new();
        let mut outgoing = Vec::new();
        for (id, device_index) in participants.iter().enumerate() {
            let config = NegotiationConfig::new(PASSWORD, id as u32, n, epoch)
                .unwrap()
                .with_iterations(TEST_ITERATIONS);
            let (negotiation, first) = Negotiation::start(
                config,
                self.devices[*device_index].identity(),
                &mut self.rng,
            )
            .unwrap();
            negotiations.push(negotiation);
            outgoing.push(first);
        }
        let mut records: Vec<Option<SeedRecord>> = participants.iter().map(|_| None).collect();
        while !outgoing.is_empty() {
            let mut next = Vec::new();
            for message in outgoing {
                let to = message.to_id as usize;
                match negotiations[to].step(&message, &mut self.rng).unwrap() {
                    StepOutcome::Send(forward) => next.push(forward),
                    StepOutcome::Finalized(record) => records[to] = Some(record),
                }
            }
            outgoing = next;
        }
        let now = self.clock.now();
        let mut sample = None;
        for (id, device_index) in participants.iter().enumerate() {
            let record = records[id].take().unwrap();
            sample.get_or_insert_with(|| record.clone());
            self.devices[*device_index].store_seed(record, now).unwrap();
        }
        sample.unwrap()
    }

    fn assert_service_invariants(&self) {
        for service in &self.services {
            service.lock().unwrap().assert_invariants().unwrap();
        }
    }
}

#[test]
fn register_then_seamlessly_enroll_and_login() {
    let mut world = World::new(2, &["https://alpha.example"], 101);
    world.share_seed(&[0, 1], 1);

    let mut client = world.client(0);
    let mut rng = world.rng.clone();
    let receipt = world.devices[0]
        .register_account(&mut client, "alice", &mut rng)
        .unwrap();
    assert_eq!(receipt.credential_id, "cred-1");
    assert_eq!(receipt.capacity, 2);

    // Device 1 has no credential: login performs seamless enrollment.
    let outcome = world.devices[1]
        .login_or_enroll(&mut client, "alice", &mut rng)
        .unwrap();
    assert_eq!(outcome, LoginOutcome::Enrolled { credential_id: "cred-2".into() });

    // Both devices now authenticate with plain challenge-response.
    for device in world.devices.iter_mut() {
        let outcome = device.login_or_enroll(&mut client, "alice", &mut rng).unwrap();
        assert_eq!(outcome, LoginOutcome::Session { update_ack: None });
    }
    world.assert_service_invariants();
}

#[test]
fn locked_device_cannot_register() {
    let mut world = World::new(2, &["https://alpha.example"], 102);
    world.share_seed(&[0, 1], 1);
    let mut rng = world.rng.clone();
    let mut client = world.client(0);
    world.devices[0].unlock(false);
    assert_eq!(
        world.devices[0]
            .register_account(&mut client, "alice", &mut rng)
            .unwrap_err(),
        DeviceError::DeviceLocked
    );
    // Unlocking re-enables the flow.
    world.devices[0].unlock(true);
    world.devices[0].register_account(&mut client, "alice", &mut rng).unwrap();
}

#[test]
fn misdirected_metadata_is_rejected_before_any_registration_frame() {
    let mut world = World::new(2, &["https://alpha.example"], 103);
    world.share_seed(&[0, 1], 1);
    let mut rng = world.rng.clone();

    let mut alpha = world.client(0);
    world.devices[0].register_account(&mut alpha, "alice", &mut rng).unwrap();

    // A malicious origin replays alpha's stored metadata under its own
    // trusted hint. The device derives for the hinted origin, the MAC
    // fails, and the flow aborts without emitting any enroll frame.
    let mut mallory = world.client(0).with_origin("https://mallory.example");
    let before_enrolls = world.log.count_kind("enroll_req");
    let err = world.devices[1]
        .login_or_enroll(&mut mallory, "alice", &mut rng)
        .unwrap_err();
    assert_eq!(err, DeviceError::WrongService);
    assert_eq!(world.log.count_kind("enroll_req"), before_enrolls);
    assert_eq!(world.log.count_kind("register_req"), 1);
}

#[test]
fn fourth_device_with_same_seed_hits_the_declared_limit() {
    let mut world = World::new(4, &["https://alpha.example"], 104);
    // Three devices negotiate; the fourth is handed the same record (a
    // clone outside the declared count).
    let record = world.share_seed(&[0, 1, 2], 1);
    world.devices[3].store_seed(record, 0).unwrap();

    let mut client = world.client(0);
    let mut rng = world.rng.clone();
    world.devices[0].register_account(&mut client, "alice", &mut rng).unwrap();
    for i in [1, 2] {
        assert!(matches!(
            world.devices[i].login_or_enroll(&mut client, "alice", &mut rng).unwrap(),
            LoginOutcome::Enrolled { .. }
        ));
    }
    let err = world.devices[3]
        .login_or_enroll(&mut client, "alice", &mut rng)
        .unwrap_err();
    assert!(err.is_service_code("NLimitExceeded"), "{err:?}");
    world.assert_service_invariants();
}

#[test]
fn attacker_without_the_account_seed_cannot_enroll() {
    let mut world = World::new(4, &["https://alpha.example"], 105);
    // The account's key comes from the seed shared by devices 0 and 1.
    world.share_seed(&[0, 1], 1);
    let mut rng = world.rng.clone();
    let mut client = world.client(0);
    world.devices[0].register_account(&mut client, "alice", &mut rng).unwrap();

    // Devices 2 and 3 share their own, disjoint seed. Device 2's derive
    // fails the metadata MAC and the flow aborts with no enroll frame.
    world.share_seed(&[2, 3], 2);
    let before_enrolls = world.log.count_kind("enroll_req");
    let err = world.devices[2]
        .login_or_enroll(&mut client, "alice", &mut rng)
        .unwrap_err();
    assert_eq!(err, DeviceError::WrongService);
    assert_eq!(world.log.count_kind("enroll_req"), before_enrolls);
}

#[test]
fn majority_rotation_revokes_the_lost_device() {
    let mut world = World::new(3, &["https://alpha.example"], 106);
    world.share_seed(&[0, 1, 2], 1);
    let mut rng = world.rng.clone();
    let mut client = world.client(0);

    world.devices[0].register_account(&mut client, "alice", &mut rng).unwrap();
    for i in [1, 2] {
        world.devices[i].login_or_enroll(&mut client, "alice", &mut rng).unwrap();
    }

    // Device 2 is lost; 0 and 1 re-share.
    world.share_seed(&[0, 1], 2);

    // First update: pending, one of three votes.
    let outcome = world.devices[0].send_update(&mut client, "alice", &mut rng).unwrap();
    assert!(matches!(outcome, UpdateOutcome::Pending { .. }));
    assert!(world.devices[0].has_pending_update("https://alpha.example"));

    // The lost device can still sign in while the migration is pending.
    assert_eq!(
        world.devices[2].login_or_enroll(&mut client, "alice", &mut rng).unwrap(),
        LoginOutcome::Session { update_ack: None }
    );

    // Second matching update reaches a majority and commits.
    let outcome = world.devices[1].send_update(&mut client, "alice", &mut rng).unwrap();
    match outcome {
        UpdateOutcome::Committed { revoked } => assert_eq!(revoked.len(), 1),
        other => panic!("expected commit, got {other:?}"),
    }

    // The lost device is revoked; its login drops the stale credential.
    assert_eq!(
        world.devices[2].login_or_enroll(&mut client, "alice", &mut rng).unwrap(),
        LoginOutcome::CredentialRevoked
    );
    // It holds only the old seed, so re-enrollment is impossible.
    assert_eq!(
        world.devices[2].login_or_enroll(&mut client, "alice", &mut rng).unwrap_err(),
        DeviceError::WrongService
    );

    // Survivors keep working; the first updater clears its pending state.
    assert_eq!(
        world.devices[0].login_or_enroll(&mut client, "alice", &mut rng).unwrap(),
        LoginOutcome::Session { update_ack: None }
    );
    assert!(!world.devices[0].has_pending_update("https://alpha.example"));
    world.assert_service_invariants();
}

#[test]
fn deadline_commit_then_absent_sibling_reenrolls() {
    let mut world = World::new(3, &["https://svc2.example"], 107);
    world.share_seed(&[0, 1, 2], 1);
    let mut rng = world.rng.clone();
    let mut client = world.client(0);

    // Only devices 1 and 2 are enrolled with this service.
    world.devices[1].register_account(&mut client, "alice", &mut rng).unwrap();
    world.devices[2].login_or_enroll(&mut client, "alice", &mut rng).unwrap();

    // Device 2 is lost; 0 and 1 re-share.
    world.share_seed(&[0, 1], 2);

    // One vote out of an electorate of two: pending until the deadline.
    let outcome = world.devices[1].send_update(&mut client, "alice", &mut rng).unwrap();
    let deadline = match outcome {
        UpdateOutcome::Pending { deadline } => deadline,
        other => panic!("expected pending, got {other:?}"),
    };

    // Lost device still signs in before the deadline.
    assert_eq!(
        world.devices[2].login_or_enroll(&mut client, "alice", &mut rng).unwrap(),
        LoginOutcome::Session { update_ack: None }
    );

    // Past the deadline the lone proposal commits lazily on next touch.
    world.clock.set(deadline);
    assert_eq!(
        world.devices[2].login_or_enroll(&mut client, "alice", &mut rng).unwrap(),
        LoginOutcome::CredentialRevoked
    );

    // Device 0 holds the new seed and was never enrolled here: seamless
    // re-registration under the rotated key.
    let outcome = world.devices[0].login_or_enroll(&mut client, "alice", &mut rng).unwrap();
    assert!(matches!(outcome, LoginOutcome::Enrolled { .. }), "{outcome:?}");
    world.assert_service_invariants();
}

#[test]
fn resent_pending_update_is_idempotent() {
    let mut world = World::new(3, &["https://alpha.example"], 108);
    world.share_seed(&[0, 1, 2], 1);
    let mut rng = world.rng.clone();
    let mut client = world.client(0);
    world.devices[0].register_account(&mut client, "alice", &mut rng).unwrap();
    world.devices[1].login_or_enroll(&mut client, "alice", &mut rng).unwrap();
    world.devices[2].login_or_enroll(&mut client, "alice", &mut rng).unwrap();

    world.share_seed(&[0, 1], 2);
    let first = world.devices[0].send_update(&mut client, "alice", &mut rng).unwrap();
    assert!(matches!(first, UpdateOutcome::Pending { .. }));

    // Re-sending (e.g. after a crash) does not double-count the vote.
    let second = world.devices[0].send_update(&mut client, "alice", &mut rng).unwrap();
    assert!(matches!(second, UpdateOutcome::Pending { .. }));
    {
        let state = world.services[0].lock().unwrap();
        let account = state.account("alice").unwrap();
        let migration = account.migration.as_ref().unwrap();
        assert_eq!(migration.proposals.len(), 1);
        assert_eq!(migration.proposals[0].supporters.len(), 1);
    }

    // A login of the same device re-attaches the identical message.
    let outcome = world.devices[0].login_or_enroll(&mut client, "alice", &mut rng).unwrap();
    assert!(matches!(outcome, LoginOutcome::Session { update_ack: Some(_) }));
    world.assert_service_invariants();
}

#[test]
fn per_service_keys_are_independent() {
    let mut world = World::new(2, &["https://alpha.example", "https://beta.example"], 109);
    world.share_seed(&[0, 1], 1);
    let mut rng = world.rng.clone();

    let mut alpha = world.client(0);
    let mut beta = world.client(1);
    world.devices[0].register_account(&mut alpha, "alice", &mut rng).unwrap();
    world.devices[0].register_account(&mut beta, "alice", &mut rng).unwrap();

    let ovpk_alpha = {
        let state = world.services[0].lock().unwrap();
        crypto::point_sec1(&state.account("alice").unwrap().ovpk)
    };
    let ovpk_beta = {
        let state = world.services[1].lock().unwrap();
        crypto::point_sec1(&state.account("alice").unwrap().ovpk)
    };
    assert_ne!(ovpk_alpha, ovpk_beta);

    // Sibling enrolls with both, independently.
    world.devices[1].login_or_enroll(&mut alpha, "alice", &mut rng).unwrap();
    world.devices[1].login_or_enroll(&mut beta, "alice", &mut rng).unwrap();
    world.assert_service_invariants();
}

#[test]
fn transport_capture_contains_no_secret_material() {
    let mut world = World::new(3, &["https://alpha.example"], 110);
    world.share_seed(&[0, 1, 2], 1);
    let mut rng = world.rng.clone();
    let mut client = world.client(0);
    world.devices[0].register_account(&mut client, "alice", &mut rng).unwrap();
    world.devices[1].login_or_enroll(&mut client, "alice", &mut rng).unwrap();
    world.share_seed(&[0, 1], 2);
    world.devices[0].send_update(&mut client, "alice", &mut rng).unwrap();
    world.devices[1].send_update(&mut client, "alice", &mut rng).unwrap();

    let traffic = world.log.traffic_hex();
    assert!(!world.log.is_empty());
    for device in &world.devices {
        for secret in device.secrecy_scan_material() {
            let needle = hex::encode(&secret);
            assert!(!traffic.contains(&needle), "secret bytes leaked to transport");
        }
    }
    assert!(!traffic.contains(&hex::encode(PASSWORD.as_bytes())));
}
