//! Message channels for seed exchange.
//!
//! The in-memory driver runs a whole ring synchronously inside one process;
//! the directory channel drops each round message as a JSON file so
//! separate processes (one per device) can negotiate by polling a shared
//! directory, standing in for a short-range channel like QR codes.

use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::CryptoRng;

use ovk_core::attestation::DeviceIdentity;
use ovk_core::seed_exchange::{
    ExchangeError, Negotiation, NegotiationConfig, RoundMessage, SeedRecord, StepOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("exchange failed: {0}")]
    Exchange(#[from] ExchangeError),
    #[error("channel io: {0}")]
    Io(#[from] io::Error),
    #[error("timed out waiting for {0}")]
    Timeout(String),
}

/// Runs a complete ring among co-located parties and returns each party's
/// finalized record, in party-id order.
pub fn run_in_memory<R: CryptoRng + ?Sized>(
    configs: Vec<NegotiationConfig>,
    devices: &[&DeviceIdentity],
    rng: &mut R,
) -> Result<Vec<SeedRecord>, ChannelError> {
    NegotiationConfig::validate_set(&configs)?;
    assert_eq!(configs.len(), devices.len());
    let n = configs.len();

    let mut parties = Vec::with_capacity(n);
    let mut outgoing = Vec::with_capacity(n);
    for (config, device) in configs.into_iter().zip(devices) {
        let (negotiation, first) = Negotiation::start(config, device, rng)?;
        parties.push(negotiation);
        outgoing.push(first);
    }

    let mut records: Vec<Option<SeedRecord>> = (0..n).map(|_| None).collect();
    while !outgoing.is_empty() {
        let mut next = Vec::new();
        for message in outgoing {
            let to = message.to_id as usize;
            match parties[to].step(&message, rng)? {
                StepOutcome::Send(forward) => next.push(forward),
                StepOutcome::Finalized(record) => records[to] = Some(record),
            }
        }
        outgoing = next;
    }
    Ok(records.into_iter().map(|r| r.expect("every party finalizes")).collect())
}

/// A directory of JSON round files shared by negotiation processes.
pub struct DirChannel {
    dir: PathBuf,
}

impl DirChannel {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn file_name(round: u32, from: u32, to: u32) -> String {
        format!("round{round}_from{from}_to{to}.json")
    }

    /// Writes a round message atomically (temp file + rename) so a polling
    /// reader never sees a partial file.
    pub fn send(&self, message: &RoundMessage) -> io::Result<()> {
        let name = Self::file_name(message.round, message.from_id, message.to_id);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let target = self.dir.join(name);
        std::fs::write(&tmp, serde_json::to_vec_pretty(message)?)?;
        std::fs::rename(tmp, target)
    }

    /// Polls for the expected round file until it appears or the timeout
    /// elapses.
    pub fn receive(
        &self,
        round: u32,
        from: u32,
        to: u32,
        timeout: Duration,
    ) -> Result<RoundMessage, ChannelError> {
        let path = self.dir.join(Self::file_name(round, from, to));
        let deadline = Instant::now() + timeout;
        loop {
            match std::fs::read(&path) {
                Ok(bytes) => {
                    let message: RoundMessage = serde_json::from_slice(&bytes)
                        .map_err(|e| ChannelError::Io(io::Error::other(e)))?;
                    return Ok(message);
                }
                Err(err) if err.kind() == io::ErrorKind::NotFound => {
                    if Instant::now() >= deadline {
                        return Err(ChannelError::Timeout(path.display().to_string()));
                    }
                    std::thread::sleep(Duration::from_millis(25));
                }
                Err(err) => return Err(err.into()),
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }
}

/// Drives one party's negotiation over a directory channel to completion.
pub fn negotiate_over_dir<R: CryptoRng + ?Sized>(
    config: NegotiationConfig,
    device: &DeviceIdentity,
    channel: &DirChannel,
    timeout: Duration,
    rng: &mut R,
) -> Result<SeedRecord, ChannelError> {
    let self_id = config.self_id;
    let n = config.n_parties;
    let prev = (self_id + n - 1) % n;

    let (mut negotiation, first) = Negotiation::start(config, device, rng)?;
    channel.send(&first)?;

    for round in 1..n {
        let incoming = channel.receive(round, prev, self_id, timeout)?;
        match negotiation.step(&incoming, rng)? {
            StepOutcome::Send(message) => channel.send(&message)?,
            StepOutcome::Finalized(record) => return Ok(record),
        }
    }
    unreachable!("ring always finalizes at round n-1")
}
