//! Bit-exact serialized event records.
//!
//! Record layout (all integers little-endian):
//!
//! ```text
//! "EVNT" | experiment u32 | run u32 | event_number u64 | provenance u8
//!        | bank_count u16 | banks… | crc32 u32
//! bank:  name (u8 length + bytes) | schema_version u16 | record_width u16
//!        | record_count u32 | compressed u8 | stored_length u32 | stored bytes
//! ```
//!
//! The checksum covers every record byte before the crc32 field itself. A
//! bank is stored compressed (zlib stream) only when that actually shrinks
//! it; otherwise the raw payload is stored and the flag stays 0.

use std::io::Read;

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;

use super::{Bank, BankDescriptor, Event, EventError, Provenance};

/// Magic prefix of one serialized event record.
pub const EVENT_MAGIC: [u8; 4] = *b"EVNT";

/// Exact byte length [`serialize_event`] would produce with compression off.
pub fn uncompressed_record_size(event: &Event) -> usize {
    let banks: usize = event
        .banks()
        .map(|b| 14 + b.name().as_str().len() + b.payload().len())
        .sum();
    27 + banks
}

/// Serializes a sealed event, optionally compressing each bank payload.
pub fn serialize_event(event: &Event, compression: bool) -> Result<Vec<u8>, EventError> {
    if !event.is_sealed() {
        return Err(EventError::UnsealedEvent);
    }
    if event.bank_count() > u16::MAX as usize {
        return Err(EventError::MalformedRecord(format!(
            "{} banks exceed the u16 bank count",
            event.bank_count()
        )));
    }
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&EVENT_MAGIC);
    out.extend_from_slice(&event.experiment().to_le_bytes());
    out.extend_from_slice(&event.run().to_le_bytes());
    out.extend_from_slice(&event.event_number().to_le_bytes());
    out.push(event.provenance().to_wire());
    out.extend_from_slice(&(event.bank_count() as u16).to_le_bytes());
    for bank in event.banks() {
        write_bank(&mut out, bank, compression);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn write_bank(out: &mut Vec<u8>, bank: &Bank, compression: bool) {
    let d = bank.descriptor();
    let name = d.name().as_str().as_bytes();
    out.push(name.len() as u8);
    out.extend_from_slice(name);
    out.extend_from_slice(&d.schema_version().to_le_bytes());
    out.extend_from_slice(&d.record_width_bytes().to_le_bytes());
    out.extend_from_slice(&bank.record_count().to_le_bytes());
    let stored = if compression {
        compress_if_smaller(bank.payload())
    } else {
        None
    };
    match stored {
        Some(z) => {
            out.push(1);
            out.extend_from_slice(&(z.len() as u32).to_le_bytes());
            out.extend_from_slice(&z);
        }
        None => {
            out.push(0);
            out.extend_from_slice(&(bank.payload().len() as u32).to_le_bytes());
            out.extend_from_slice(bank.payload());
        }
    }
}

fn compress_if_smaller(payload: &[u8]) -> Option<Vec<u8>> {
    use std::io::Write;
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(payload).ok()?;
    let z = enc.finish().ok()?;
    (z.len() < payload.len()).then_some(z)
}

/// Deserializes one event record, exact inverse of [`serialize_event`].
///
/// The whole input must be consumed; compressed banks come back decompressed.
pub fn deserialize_event(bytes: &[u8]) -> Result<Event, EventError> {
    let mut reader = bytes;
    let event = read_event_record(&mut reader)?;
    if !reader.is_empty() {
        return Err(EventError::MalformedRecord(format!(
            "{} trailing bytes after record",
            reader.len()
        )));
    }
    Ok(event)
}

/// Reads one event record from a byte stream, verifying its checksum.
pub(crate) fn read_event_record<R: Read>(reader: &mut R) -> Result<Event, EventError> {
    let mut r = HashingReader::new(reader);
    let magic = r.read_array::<4>("magic")?;
    if magic != EVENT_MAGIC {
        return Err(EventError::MalformedRecord(format!(
            "bad event magic {magic:02x?}"
        )));
    }
    let experiment = u32::from_le_bytes(r.read_array("experiment")?);
    let run = u32::from_le_bytes(r.read_array("run")?);
    let event_number = u64::from_le_bytes(r.read_array("event number")?);
    let provenance_raw = r.read_array::<1>("provenance")?[0];
    let provenance = Provenance::from_wire(provenance_raw).ok_or_else(|| {
        EventError::MalformedRecord(format!("unknown provenance {provenance_raw}"))
    })?;
    let bank_count = u16::from_le_bytes(r.read_array("bank count")?);

    let mut event = Event::new(experiment, run, event_number, provenance);
    for _ in 0..bank_count {
        let bank = read_bank(&mut r)?;
        event.put_bank(bank)?;
    }
    let computed = r.finish();
    let stored = u32::from_le_bytes(read_exactly(reader, "crc32")?);
    if stored != computed {
        return Err(EventError::ChecksumMismatch { stored, computed });
    }
    event.seal();
    Ok(event)
}

fn read_bank<R: Read>(r: &mut HashingReader<'_, R>) -> Result<Bank, EventError> {
    let name_len = r.read_array::<1>("bank name length")?[0] as usize;
    let name_bytes = r.read_vec(name_len, "bank name")?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| EventError::MalformedRecord("bank name is not UTF-8".into()))?;
    let schema_version = u16::from_le_bytes(r.read_array("schema version")?);
    let record_width = u16::from_le_bytes(r.read_array("record width")?);
    let record_count = u32::from_le_bytes(r.read_array("record count")?);
    let compressed = r.read_array::<1>("compressed flag")?[0];
    let stored_length = u32::from_le_bytes(r.read_array("stored length")?) as usize;
    let stored = r.read_vec(stored_length, "stored bank bytes")?;

    if record_width == 0 {
        return Err(EventError::MalformedRecord(format!(
            "bank {name:?} has zero record width"
        )));
    }
    let expected = record_count as usize * record_width as usize;
    let payload = match compressed {
        0 => {
            if stored.len() != expected {
                return Err(EventError::MalformedRecord(format!(
                    "bank {name:?} stores {} bytes, expected {expected}",
                    stored.len()
                )));
            }
            stored
        }
        1 => {
            let mut payload = Vec::with_capacity(expected.min(1 << 20));
            let mut dec = ZlibDecoder::new(stored.as_slice()).take(expected as u64 + 1);
            dec.read_to_end(&mut payload).map_err(|e| {
                EventError::MalformedRecord(format!("bank {name:?} decompression failed: {e}"))
            })?;
            if payload.len() != expected {
                return Err(EventError::MalformedRecord(format!(
                    "bank {name:?} decompressed to {} bytes, expected {expected}",
                    payload.len()
                )));
            }
            payload
        }
        other => {
            return Err(EventError::MalformedRecord(format!(
                "bank {name:?} has invalid compression flag {other}"
            )));
        }
    };
    Bank::new(BankDescriptor::new(name, schema_version, record_width)?, payload)
}

/// Reader wrapper that feeds every consumed byte into a crc32 hasher.
struct HashingReader<'a, R: Read> {
    inner: &'a mut R,
    hasher: crc32fast::Hasher,
}

impl<'a, R: Read> HashingReader<'a, R> {
    fn new(inner: &'a mut R) -> Self {
        Self {
            inner,
            hasher: crc32fast::Hasher::new(),
        }
    }

    fn read_array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], EventError> {
        let buf = read_exactly(self.inner, what)?;
        self.hasher.update(&buf);
        Ok(buf)
    }

    fn read_vec(&mut self, len: usize, what: &str) -> Result<Vec<u8>, EventError> {
        // take + read_to_end so a corrupt length cannot trigger a huge upfront
        // allocation; we only ever hold bytes that actually arrived.
        let mut buf = Vec::with_capacity(len.min(1 << 20));
        self.inner
            .take(len as u64)
            .read_to_end(&mut buf)
            .map_err(EventError::Io)?;
        if buf.len() != len {
            return Err(EventError::MalformedRecord(format!(
                "truncated while reading {what}: wanted {len} bytes, got {}",
                buf.len()
            )));
        }
        self.hasher.update(&buf);
        Ok(buf)
    }

    fn finish(self) -> u32 {
        self.hasher.finalize()
    }
}

fn read_exactly<R: Read, const N: usize>(reader: &mut R, what: &str) -> Result<[u8; N], EventError> {
    let mut buf = [0u8; N];
    let mut filled = 0;
    while filled < N {
        let n = reader.read(&mut buf[filled..]).map_err(EventError::Io)?;
        if n == 0 {
            return Err(EventError::MalformedRecord(format!(
                "truncated while reading {what}: wanted {N} bytes, got {filled}"
            )));
        }
        filled += n;
    }
    Ok(buf)
}
