//! Byte-accurate accounting of simulated uploads and downloads.
//!
//! Scalars are 64-bit floats (8 bytes); category tokens count by serialized
//! UTF-8 length. The in-process transport has no framing, so payload bytes
//! are exactly 8 * scalars + token bytes. Closed-form per-phase costs live in
//! [`closed_form`] for cross-checking measured totals.

use std::fmt;
use std::sync::Mutex;

use crate::error::Result;

/// Pipeline phase a message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    GmmRound,
    Frequency,
    Moments,
    CovarianceBroadcast,
    ModelRound,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::GmmRound,
        Phase::Frequency,
        Phase::Moments,
        Phase::CovarianceBroadcast,
        Phase::ModelRound,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::GmmRound => "gmm_round",
            Phase::Frequency => "frequency",
            Phase::Moments => "moments",
            Phase::CovarianceBroadcast => "covariance_broadcast",
            Phase::ModelRound => "model_round",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Upload,
    Download,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Upload => "upload",
            Direction::Download => "download",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One recorded message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub phase: Phase,
    pub direction: Direction,
    pub client: u32,
    pub scalar_count: u64,
    pub token_bytes: u64,
}

impl Entry {
    pub fn payload_bytes(&self) -> u64 {
        self.scalar_count * 8 + self.token_bytes
    }
}

/// Append-only message log. Appends serialize through a mutex; totals are
/// order-insensitive sums, so concurrent interleavings summarize identically.
#[derive(Debug, Default)]
pub struct CommLedger {
    entries: Mutex<Vec<Entry>>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, phase: Phase, direction: Direction, client: u32, scalar_count: u64) {
        self.record_with_tokens(phase, direction, client, scalar_count, 0);
    }

    pub fn record_with_tokens(
        &self,
        phase: Phase,
        direction: Direction,
        client: u32,
        scalar_count: u64,
        token_bytes: u64,
    ) {
        self.entries.lock().expect("ledger poisoned").push(Entry {
            phase,
            direction,
            client,
            scalar_count,
            token_bytes,
        });
    }

    pub fn extend(&self, entries: Vec<Entry>) {
        self.entries.lock().expect("ledger poisoned").extend(entries);
    }

    pub fn snapshot(&self) -> Vec<Entry> {
        self.entries.lock().expect("ledger poisoned").clone()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.lock().expect("ledger poisoned").is_empty()
    }

    /// Drops all entries of one phase (used when a stage reruns).
    pub fn clear_phase(&self, phase: Phase) {
        self.entries
            .lock()
            .expect("ledger poisoned")
            .retain(|e| e.phase != phase);
    }

    pub fn summarize(&self) -> LedgerSummary {
        let entries = self.snapshot();
        let mut per_phase = Vec::new();
        for phase in Phase::ALL {
            for direction in [Direction::Upload, Direction::Download] {
                let mut totals = Totals::default();
                for e in entries
                    .iter()
                    .filter(|e| e.phase == phase && e.direction == direction)
                {
                    totals.scalar_count += e.scalar_count;
                    totals.token_bytes += e.token_bytes;
                    totals.payload_bytes += e.payload_bytes();
                    totals.messages += 1;
                }
                if totals.messages > 0 {
                    per_phase.push(PhaseTotals {
                        phase,
                        direction,
                        totals,
                    });
                }
            }
        }
        let mut upload = Totals::default();
        let mut download = Totals::default();
        for e in &entries {
            let side = match e.direction {
                Direction::Upload => &mut upload,
                Direction::Download => &mut download,
            };
            side.scalar_count += e.scalar_count;
            side.token_bytes += e.token_bytes;
            side.payload_bytes += e.payload_bytes();
            side.messages += 1;
        }
        LedgerSummary {
            per_phase,
            upload,
            download,
        }
    }

    /// Writes entries as CSV in recorded order.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["phase", "direction", "client", "scalar_count", "token_bytes", "payload_bytes"])?;
        for e in self.snapshot() {
            w.write_record([
                e.phase.as_str().to_string(),
                e.direction.as_str().to_string(),
                e.client.to_string(),
                e.scalar_count.to_string(),
                e.token_bytes.to_string(),
                e.payload_bytes().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads entries previously written by [`CommLedger::write_csv`].
    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<CommLedger> {
        let mut r = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for record in r.records() {
            let record = record?;
            let phase = match &record[0] {
                "gmm_round" => Phase::GmmRound,
                "frequency" => Phase::Frequency,
                "moments" => Phase::Moments,
                "covariance_broadcast" => Phase::CovarianceBroadcast,
                "model_round" => Phase::ModelRound,
                other => {
                    return Err(crate::error::Error::Config(format!(
                        "unknown ledger phase '{other}'"
                    )))
                }
            };
            let direction = match &record[1] {
                "upload" => Direction::Upload,
                "download" => Direction::Download,
                other => {
                    return Err(crate::error::Error::Config(format!(
                        "unknown ledger direction '{other}'"
                    )))
                }
            };
            let parse = |s: &str| {
                s.parse::<u64>().map_err(|_| {
                    crate::error::Error::Config(format!("bad ledger number '{s}'"))
                })
            };
            entries.push(Entry {
                phase,
                direction,
                client: parse(&record[2])? as u32,
                scalar_count: parse(&record[3])?,
                token_bytes: parse(&record[4])?,
            });
        }
        let ledger = CommLedger::new();
        ledger.extend(entries);
        Ok(ledger)
    }
}

/// Scalar/byte totals for one slice of the log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Totals {
    pub scalar_count: u64,
    pub token_bytes: u64,
    pub payload_bytes: u64,
    pub messages: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseTotals {
    pub phase: Phase,
    pub direction: Direction,
    pub totals: Totals,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerSummary {
    pub per_phase: Vec<PhaseTotals>,
    pub upload: Totals,
    pub download: Totals,
}

impl LedgerSummary {
    pub fn phase_totals(&self, phase: Phase, direction: Direction) -> Totals {
        self.per_phase
            .iter()
            .find(|p| p.phase == phase && p.direction == direction)
            .map(|p| p.totals)
            .unwrap_or_default()
    }
}

/// Closed-form per-phase scalar counts for a run with K clients, n_c
/// continuous columns of t modes fitted for m rounds, total_categories
/// global categories across discrete columns, and width l = 2 n_c + n_d.
pub mod closed_form {
    /// Per-client frequency upload: one dense count per global category.
    pub fn frequency_upload(clients: u64, total_categories: u64) -> u64 {
        clients * total_categories
    }

    /// Per-client frequency download mirrors the global frequency vector.
    pub fn frequency_download(clients: u64, total_categories: u64) -> u64 {
        clients * total_categories
    }

    /// Per-client moments upload: E(X_k) is l scalars, E(X_k^T X_k) is l^2,
    /// so each client costs l (l + 1).
    pub fn covariance_upload(clients: u64, l: u64) -> u64 {
        clients * l * (l + 1)
    }

    /// Per-client factor download: the dense l x l matrix.
    pub fn covariance_download(clients: u64, l: u64) -> u64 {
        clients * l * l
    }

    /// Mixture-fit upload for one column over m rounds: per round each client
    /// sends per-mode responsibility sums, weighted sums and scatter (3t)
    /// plus the responsibility entropy and data-fit share (2).
    pub fn gmm_upload_per_column(clients: u64, modes: u64, rounds: u64) -> u64 {
        clients * rounds * (3 * modes + 2)
    }

    /// Mixture-fit download for one column over m rounds: the posterior
    /// (5t: alpha, beta, nu, m, w), the global mode means (t), and the
    /// continue/stop flag (1) per round.
    pub fn gmm_download_per_column(clients: u64, modes: u64, rounds: u64) -> u64 {
        clients * rounds * (6 * modes + 1)
    }

    /// One-time range scan preceding a column fit: local (min, max) up.
    pub fn gmm_range_upload_per_column(clients: u64) -> u64 {
        clients * 2
    }
}
