//! Bank-based event data model.
//!
//! An [`Event`] is an identity triple (experiment, run, event number) plus an
//! ordered set of named [`Bank`]s. Banks are the only data-interchange
//! currency between processing modules: each one is a named, versioned
//! payload of fixed-width records. Payloads are opaque bytes; whatever
//! wrote a bank decides what its records mean.

mod file;
mod serial;

pub use file::{
    read_file_header, EventFileHeader, EventFileReader, EventFileWriter, FileType,
    FILE_HEADER_MAGIC,
};
pub use serial::{deserialize_event, serialize_event, uncompressed_record_size, EVENT_MAGIC};

use std::fmt;

use thiserror::Error;

/// Maximum bank name length in bytes.
pub const MAX_BANK_NAME_LEN: usize = 32;

/// Errors from the event model and its serialized forms.
#[derive(Debug, Error)]
pub enum EventError {
    #[error("invalid bank name {0:?}")]
    InvalidBankName(String),
    #[error("record width must be at least 1")]
    ZeroRecordWidth,
    #[error("payload of {payload} bytes is not a multiple of record width {width}")]
    PayloadSizeMismatch { payload: usize, width: u16 },
    #[error("bank {0:?} already present in event")]
    DuplicateBank(String),
    #[error("event is sealed")]
    SealedEvent,
    #[error("event is not sealed")]
    UnsealedEvent,
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("event {got} out of order after {last}")]
    OutOfOrderEvent { last: u64, got: u64 },
    #[error("event ({experiment}, {run}) does not match file header ({file_experiment}, {file_run})")]
    HeaderMismatch {
        experiment: u32,
        run: u32,
        file_experiment: u32,
        file_run: u32,
    },
    #[error("file header event count {header} does not match body count {body}")]
    EventCountMismatch { header: u64, body: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Validated bank name: `[A-Za-z_][A-Za-z0-9_]{0,31}`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BankName(String);

impl BankName {
    pub fn new(name: impl Into<String>) -> Result<Self, EventError> {
        let name = name.into();
        if Self::is_valid(&name) {
            Ok(Self(name))
        } else {
            Err(EventError::InvalidBankName(name))
        }
    }

    pub fn is_valid(name: &str) -> bool {
        let bytes = name.as_bytes();
        if bytes.is_empty() || bytes.len() > MAX_BANK_NAME_LEN {
            return false;
        }
        let head_ok = bytes[0].is_ascii_alphabetic() || bytes[0] == b'_';
        head_ok
            && bytes[1..]
                .iter()
                .all(|b| b.is_ascii_alphanumeric() || *b == b'_')
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BankName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Name, schema version and record width of a bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankDescriptor {
    name: BankName,
    schema_version: u16,
    record_width_bytes: u16,
}

impl BankDescriptor {
    pub fn new(
        name: impl Into<String>,
        schema_version: u16,
        record_width_bytes: u16,
    ) -> Result<Self, EventError> {
        if record_width_bytes == 0 {
            return Err(EventError::ZeroRecordWidth);
        }
        Ok(Self {
            name: BankName::new(name)?,
            schema_version,
            record_width_bytes,
        })
    }

    pub fn name(&self) -> &BankName {
        &self.name
    }

    pub fn schema_version(&self) -> u16 {
        self.schema_version
    }

    pub fn record_width_bytes(&self) -> u16 {
        self.record_width_bytes
    }
}

/// A named payload of fixed-width records.
///
/// The payload held here is always the uncompressed logical view; whether a
/// bank travels compressed is a property of the serialized form only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bank {
    descriptor: BankDescriptor,
    payload: Vec<u8>,
}

impl Bank {
    /// Builds a bank, checking that the payload length is a whole number of
    /// records.
    pub fn new(descriptor: BankDescriptor, payload: Vec<u8>) -> Result<Self, EventError> {
        if payload.len() % descriptor.record_width_bytes as usize != 0 {
            return Err(EventError::PayloadSizeMismatch {
                payload: payload.len(),
                width: descriptor.record_width_bytes,
            });
        }
        Ok(Self {
            descriptor,
            payload,
        })
    }

    pub fn descriptor(&self) -> &BankDescriptor {
        &self.descriptor
    }

    pub fn name(&self) -> &BankName {
        self.descriptor.name()
    }

    pub fn record_count(&self) -> u32 {
        (self.payload.len() / self.descriptor.record_width_bytes as usize) as u32
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Record `index` as a byte slice, or `None` past the end.
    pub fn record(&self, index: u32) -> Option<&[u8]> {
        let width = self.descriptor.record_width_bytes as usize;
        let start = index as usize * width;
        self.payload.get(start..start + width)
    }

    /// Appends the records of `other` to this bank. Record widths must match.
    pub fn append_records(&mut self, other: &Bank) -> Result<(), EventError> {
        if other.descriptor.record_width_bytes != self.descriptor.record_width_bytes {
            return Err(EventError::PayloadSizeMismatch {
                payload: other.payload.len(),
                width: self.descriptor.record_width_bytes,
            });
        }
        self.payload.extend_from_slice(&other.payload);
        Ok(())
    }
}

/// Where an event came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Beam,
    Mc,
    McOverlaid,
}

impl Provenance {
    pub(crate) fn to_wire(self) -> u8 {
        match self {
            Provenance::Beam => 0,
            Provenance::Mc => 1,
            Provenance::McOverlaid => 2,
        }
    }

    pub(crate) fn from_wire(v: u8) -> Option<Self> {
        match v {
            0 => Some(Provenance::Beam),
            1 => Some(Provenance::Mc),
            2 => Some(Provenance::McOverlaid),
            _ => None,
        }
    }
}

/// Unit of processing: identity triple plus an insertion-ordered set of banks.
///
/// Identity is fixed at construction. Banks may be added until the event is
/// sealed; sealed events are immutable and safe to hand between threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    experiment: u32,
    run: u32,
    event_number: u64,
    provenance: Provenance,
    banks: Vec<Bank>,
    sealed: bool,
}

impl Event {
    pub fn new(experiment: u32, run: u32, event_number: u64, provenance: Provenance) -> Self {
        Self {
            experiment,
            run,
            event_number,
            provenance,
            banks: Vec::new(),
            sealed: false,
        }
    }

    pub fn experiment(&self) -> u32 {
        self.experiment
    }

    pub fn run(&self) -> u32 {
        self.run
    }

    pub fn event_number(&self) -> u64 {
        self.event_number
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Number of banks.
    pub fn bank_count(&self) -> usize {
        self.banks.len()
    }

    /// Banks in insertion order.
    pub fn banks(&self) -> impl Iterator<Item = &Bank> {
        self.banks.iter()
    }

    pub fn bank(&self, name: &str) -> Option<&Bank> {
        self.banks.iter().find(|b| b.name().as_str() == name)
    }

    /// Inserts a bank, preserving insertion order.
    pub fn put_bank(&mut self, bank: Bank) -> Result<(), EventError> {
        if self.sealed {
            return Err(EventError::SealedEvent);
        }
        if self.bank(bank.name().as_str()).is_some() {
            return Err(EventError::DuplicateBank(bank.name().as_str().to_owned()));
        }
        self.banks.push(bank);
        Ok(())
    }

    /// Removes a bank by name and returns it, if present.
    pub fn take_bank(&mut self, name: &str) -> Result<Option<Bank>, EventError> {
        if self.sealed {
            return Err(EventError::SealedEvent);
        }
        let pos = self.banks.iter().position(|b| b.name().as_str() == name);
        Ok(pos.map(|i| self.banks.remove(i)))
    }

    /// Replaces the payload-carrying bank at `name` in place (same position).
    pub fn replace_bank(&mut self, bank: Bank) -> Result<(), EventError> {
        if self.sealed {
            return Err(EventError::SealedEvent);
        }
        match self
            .banks
            .iter()
            .position(|b| b.name() == bank.name())
        {
            Some(i) => {
                self.banks[i] = bank;
                Ok(())
            }
            None => {
                self.banks.push(bank);
                Ok(())
            }
        }
    }

    /// Freezes the event. Identity and banks are immutable afterwards.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    /// Mutable working copy of a (possibly sealed) event, same identity.
    pub fn to_unsealed(&self) -> Event {
        let mut e = self.clone();
        e.sealed = false;
        e
    }

    /// Copy of this event with a different provenance, preserving seal state.
    pub fn with_provenance(&self, provenance: Provenance) -> Event {
        let mut e = self.clone();
        e.provenance = provenance;
        e
    }
}
