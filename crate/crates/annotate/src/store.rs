//! Append-only JSONL event log with periodic state snapshots.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{Event, ServiceError, State};

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 100;

#[derive(Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    event: Event,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    state: State,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |source| ServiceError::Io { path: path.display().to_string(), source }
}

/// Durable event store. Without a directory it only counts events.
pub struct EventStore {
    dir: Option<PathBuf>,
    log: Option<File>,
    seq: u64,
    snapshot_every: u64,
}

impl EventStore {
    pub fn in_memory() -> Self {
        Self { dir: None, log: None, seq: 0, snapshot_every: DEFAULT_SNAPSHOT_EVERY }
    }

    /// Opens (or creates) a store and rebuilds state from the latest snapshot
    /// plus the events logged after it.
    pub fn open(dir: impl Into<PathBuf>) -> Result<(Self, State), ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let (mut seq, mut state) = match fs::read_to_string(&snap_path) {
            Ok(text) => {
                let snap: Snapshot = serde_json::from_str(&text)
                    .map_err(|e| ServiceError::Corrupt(format!("{}: {e}", snap_path.display())))?;
                (snap.seq, snap.state)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (0, State::default()),
            Err(e) => return Err(io_err(&snap_path)(e)),
        };
        let log_path = dir.join(LOG_FILE);
        let mut replayed = 0;
        if log_path.exists() {
            let file = File::open(&log_path).map_err(io_err(&log_path))?;
            let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io_err(&log_path))?;
            let last = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LogLine = match serde_json::from_str(line) {
                    Ok(e) => e,
                    Err(e) if i + 1 == last => {
                        log::warn!("ignoring torn final line of {}: {e}", log_path.display());
                        break;
                    }
                    Err(e) => return Err(ServiceError::Corrupt(format!("{} line {}: {e}", log_path.display(), i + 1))),
                };
                if entry.seq <= seq {
                    continue;
                }
                if entry.seq != seq + 1 {
                    return Err(ServiceError::Corrupt(format!("sequence jumps from {seq} to {}", entry.seq)));
                }
                state
                    .apply(&entry.event)
                    .map_err(|e| ServiceError::Corrupt(format!("event {} does not apply: {e}", entry.seq)))?;
                seq = entry.seq;
                replayed += 1;
            }
        }
        log::info!("opened store {} at seq {seq} ({replayed} events replayed)", dir.display());
        let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
        Ok((Self { dir: Some(dir), log: Some(log), seq, snapshot_every: DEFAULT_SNAPSHOT_EVERY }, state))
    }

    pub fn with_snapshot_every(mut self, n: u64) -> Self {
        self.snapshot_every = n.max(1);
        self
    }

    /// Sequence number of the last stored event.
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Appends and fsyncs one event.
    pub fn append(&mut self, event: &Event) -> Result<u64, ServiceError> {
        let seq = self.seq + 1;
        if let (Some(log), Some(dir)) = (self.log.as_mut(), self.dir.as_ref()) {
            let path = dir.join(LOG_FILE);
            let mut line = serde_json::to_string(&LogLine { seq, event: event.clone() }).expect("events serialize");
            line.push('\n');
            log.write_all(line.as_bytes()).map_err(io_err(&path))?;
            log.sync_data().map_err(io_err(&path))?;
        }
        self.seq = seq;
        Ok(seq)
    }

    /// Writes a snapshot when the configured number of events has passed.
    pub fn maybe_snapshot(&self, state: &State) -> Result<(), ServiceError> {
        if self.seq.is_multiple_of(self.snapshot_every) {
            self.snapshot(state)?;
        }
        Ok(())
    }

    /// Atomically replaces the snapshot with `state` at the current sequence.
    pub fn snapshot(&self, state: &State) -> Result<(), ServiceError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(SNAPSHOT_FILE);
        let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let body = serde_json::to_vec(&Snapshot { seq: self.seq, state: state.clone() }).expect("state serializes");
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(())
    }
}

/// Every event in a store's log, in order.
pub fn read_log(dir: &Path) -> Result<Vec<Event>, ServiceError> {
    let path = dir.join(LOG_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<LogLine>(l)
                .map(|e| e.event)
                .map_err(|e| ServiceError::Corrupt(format!("{}: {e}", path.display())))
        })
        .collect()
}
