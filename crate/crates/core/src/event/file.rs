//! Sequential event file container — the "tape" and "disk file" abstraction.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "BEVF" | format_version u16 | file_type u8 | experiment u32 | run u32
//!        | event_count u64 | stream_label (u8 length + bytes) | event records…
//! ```
//!
//! Events are appended in strictly ascending event-number order and must all
//! carry the header's (experiment, run). The event count is patched into the
//! header on close, so a file that was never closed reads back as corrupt.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::serial::read_event_record;
use super::{serialize_event, Event, EventError};

/// Magic prefix of an event file.
pub const FILE_HEADER_MAGIC: [u8; 4] = *b"BEVF";

/// Current container format version.
pub const FORMAT_VERSION: u16 = 1;

/// Byte offset of the `event_count` field inside the file header.
const EVENT_COUNT_OFFSET: u64 = 4 + 2 + 1 + 4 + 4;

/// Kind of data a file carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum FileType {
    Raw,
    Dst,
    MiniDst,
    Mc,
    Background,
    Skim,
}

impl FileType {
    pub fn to_wire(self) -> u8 {
        match self {
            FileType::Raw => 0,
            FileType::Dst => 1,
            FileType::MiniDst => 2,
            FileType::Mc => 3,
            FileType::Background => 4,
            FileType::Skim => 5,
        }
    }

    pub fn from_wire(v: u8) -> Option<Self> {
        match v {
            0 => Some(FileType::Raw),
            1 => Some(FileType::Dst),
            2 => Some(FileType::MiniDst),
            3 => Some(FileType::Mc),
            4 => Some(FileType::Background),
            5 => Some(FileType::Skim),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FileType::Raw => "RAW",
            FileType::Dst => "DST",
            FileType::MiniDst => "MINIDST",
            FileType::Mc => "MC",
            FileType::Background => "BACKGROUND",
            FileType::Skim => "SKIM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RAW" => Some(FileType::Raw),
            "DST" => Some(FileType::Dst),
            "MINIDST" => Some(FileType::MiniDst),
            "MC" => Some(FileType::Mc),
            "BACKGROUND" => Some(FileType::Background),
            "SKIM" => Some(FileType::Skim),
            _ => None,
        }
    }
}

impl std::fmt::Display for FileType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Typed header of an event file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFileHeader {
    pub file_type: FileType,
    pub experiment: u32,
    pub run: u32,
    pub event_count: u64,
    pub stream_label: String,
}

impl EventFileHeader {
    pub fn new(
        file_type: FileType,
        experiment: u32,
        run: u32,
        stream_label: impl Into<String>,
    ) -> Self {
        Self {
            file_type,
            experiment,
            run,
            event_count: 0,
            stream_label: stream_label.into(),
        }
    }

    fn encode(&self) -> Result<Vec<u8>, EventError> {
        let label = self.stream_label.as_bytes();
        if label.len() > u8::MAX as usize {
            return Err(EventError::MalformedRecord(format!(
                "stream label of {} bytes exceeds the u8 length",
                label.len()
            )));
        }
        let mut out = Vec::with_capacity(24 + label.len());
        out.extend_from_slice(&FILE_HEADER_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.file_type.to_wire());
        out.extend_from_slice(&self.experiment.to_le_bytes());
        out.extend_from_slice(&self.run.to_le_bytes());
        out.extend_from_slice(&self.event_count.to_le_bytes());
        out.push(label.len() as u8);
        out.extend_from_slice(label);
        Ok(out)
    }

    fn decode<R: Read>(r: &mut R) -> Result<Self, EventError> {
        let mut fixed = [0u8; 24];
        r.read_exact(&mut fixed).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                EventError::MalformedRecord("truncated file header".into())
            } else {
                EventError::Io(e)
            }
        })?;
        if fixed[0..4] != FILE_HEADER_MAGIC {
            return Err(EventError::MalformedRecord(format!(
                "bad file magic {:02x?}",
                &fixed[0..4]
            )));
        }
        let version = u16::from_le_bytes([fixed[4], fixed[5]]);
        if version != FORMAT_VERSION {
            return Err(EventError::MalformedRecord(format!(
                "unsupported format version {version}"
            )));
        }
        let file_type = FileType::from_wire(fixed[6]).ok_or_else(|| {
            EventError::MalformedRecord(format!("unknown file type {}", fixed[6]))
        })?;
        let experiment = u32::from_le_bytes(fixed[7..11].try_into().unwrap());
        let run = u32::from_le_bytes(fixed[11..15].try_into().unwrap());
        let event_count = u64::from_le_bytes(fixed[15..23].try_into().unwrap());
        let label_len = fixed[23] as usize;
        let mut label = vec![0u8; label_len];
        r.read_exact(&mut label)
            .map_err(|_| EventError::MalformedRecord("truncated stream label".into()))?;
        let stream_label = String::from_utf8(label)
            .map_err(|_| EventError::MalformedRecord("stream label is not UTF-8".into()))?;
        Ok(Self {
            file_type,
            experiment,
            run,
            event_count,
            stream_label,
        })
    }
}

/// Reads just the header of an event file.
pub fn read_file_header(path: impl AsRef<Path>) -> Result<EventFileHeader, EventError> {
    let mut reader = BufReader::new(File::open(path)?);
    EventFileHeader::decode(&mut reader)
}

/// Single-owner append handle for a new event file.
pub struct EventFileWriter {
    path: PathBuf,
    header: EventFileHeader,
    out: BufWriter<File>,
    compression: bool,
    written: u64,
    last_event_number: Option<u64>,
}

impl EventFileWriter {
    /// Creates the file and writes a header with a zero event count; the real
    /// count is patched in by [`close`](Self::close).
    pub fn create(
        path: impl AsRef<Path>,
        header: EventFileHeader,
        compression: bool,
    ) -> Result<Self, EventError> {
        let path = path.as_ref().to_path_buf();
        let mut out = BufWriter::new(File::create(&path)?);
        let mut on_disk = header.clone();
        on_disk.event_count = 0;
        out.write_all(&on_disk.encode()?)?;
        Ok(Self {
            path,
            header,
            out,
            compression,
            written: 0,
            last_event_number: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    /// Serializes and appends a sealed event.
    pub fn append_event(&mut self, event: &Event) -> Result<(), EventError> {
        self.check_order(event.experiment(), event.run(), event.event_number())?;
        let bytes = serialize_event(event, self.compression)?;
        self.out.write_all(&bytes)?;
        self.written += 1;
        Ok(())
    }

    /// Appends an already-serialized event record verbatim.
    ///
    /// Only the identity fields are peeked for the ordering and header
    /// checks; the bytes land on disk untouched.
    pub fn append_serialized(&mut self, record: &[u8]) -> Result<(), EventError> {
        if record.len() < 23 || record[0..4] != super::serial::EVENT_MAGIC {
            return Err(EventError::MalformedRecord(
                "not an event record".into(),
            ));
        }
        let experiment = u32::from_le_bytes(record[4..8].try_into().unwrap());
        let run = u32::from_le_bytes(record[8..12].try_into().unwrap());
        let event_number = u64::from_le_bytes(record[12..20].try_into().unwrap());
        self.check_order(experiment, run, event_number)?;
        self.out.write_all(record)?;
        self.written += 1;
        Ok(())
    }

    fn check_order(&mut self, experiment: u32, run: u32, event_number: u64) -> Result<(), EventError> {
        if experiment != self.header.experiment || run != self.header.run {
            return Err(EventError::HeaderMismatch {
                experiment,
                run,
                file_experiment: self.header.experiment,
                file_run: self.header.run,
            });
        }
        if let Some(last) = self.last_event_number {
            if event_number <= last {
                return Err(EventError::OutOfOrderEvent {
                    last,
                    got: event_number,
                });
            }
        }
        self.last_event_number = Some(event_number);
        Ok(())
    }

    /// Patches the final event count into the header and flushes.
    pub fn close(mut self) -> Result<u64, EventError> {
        self.out.flush()?;
        let file = self.out.get_mut();
        file.seek(SeekFrom::Start(EVENT_COUNT_OFFSET))?;
        file.write_all(&self.written.to_le_bytes())?;
        file.flush()?;
        Ok(self.written)
    }
}

/// Sequential reader over a closed event file.
pub struct EventFileReader {
    header: EventFileHeader,
    input: BufReader<File>,
    read: u64,
}

impl EventFileReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EventError> {
        let mut input = BufReader::new(File::open(path)?);
        let header = EventFileHeader::decode(&mut input)?;
        Ok(Self {
            header,
            input,
            read: 0,
        })
    }

    pub fn header(&self) -> &EventFileHeader {
        &self.header
    }

    /// Next event, or `None` once the header's count has been read.
    ///
    /// The final call checks that the body really ends where the header said
    /// it would.
    pub fn next_event(&mut self) -> Result<Option<Event>, EventError> {
        if self.read == self.header.event_count {
            let mut probe = [0u8; 1];
            let n = self.input.read(&mut probe)?;
            if n != 0 {
                return Err(EventError::MalformedRecord(
                    "trailing bytes after final event record".into(),
                ));
            }
            return Ok(None);
        }
        match read_event_record(&mut self.input) {
            Ok(event) => {
                self.read += 1;
                Ok(Some(event))
            }
            Err(EventError::MalformedRecord(m)) => Err(EventError::MalformedRecord(format!(
                "record {} of {}: {m}",
                self.read + 1,
                self.header.event_count
            ))),
            Err(e) => Err(e),
        }
    }

    /// Next event record as validated raw bytes, or `None` at the end.
    ///
    /// The record is parsed (structure and checksum verified) but handed
    /// back exactly as stored, so it can be forwarded without re-encoding.
    pub fn next_record_bytes(&mut self) -> Result<Option<Vec<u8>>, EventError> {
        if self.read == self.header.event_count {
            let mut probe = [0u8; 1];
            let n = self.input.read(&mut probe)?;
            if n != 0 {
                return Err(EventError::MalformedRecord(
                    "trailing bytes after final event record".into(),
                ));
            }
            return Ok(None);
        }
        let mut tee = TeeReader {
            inner: &mut self.input,
            captured: Vec::new(),
        };
        read_event_record(&mut tee)?;
        self.read += 1;
        Ok(Some(tee.captured))
    }

    /// Reads and validates the whole body: count, identity and strict
    /// event-number ordering.
    pub fn read_all(mut self) -> Result<Vec<Event>, EventError> {
        let mut events = Vec::with_capacity(self.header.event_count as usize);
        let mut last: Option<u64> = None;
        while let Some(event) = self.next_event()? {
            if event.experiment() != self.header.experiment || event.run() != self.header.run {
                return Err(EventError::HeaderMismatch {
                    experiment: event.experiment(),
                    run: event.run(),
                    file_experiment: self.header.experiment,
                    file_run: self.header.run,
                });
            }
            if let Some(last) = last {
                if event.event_number() <= last {
                    return Err(EventError::OutOfOrderEvent {
                        last,
                        got: event.event_number(),
                    });
                }
            }
            last = Some(event.event_number());
            events.push(event);
        }
        Ok(events)
    }
}

impl Iterator for EventFileReader {
    type Item = Result<Event, EventError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_event().transpose()
    }
}

/// Read adapter that keeps a copy of every byte it hands out.
struct TeeReader<'a, R: Read> {
    inner: &'a mut R,
    captured: Vec<u8>,
}

impl<R: Read> Read for TeeReader<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.captured.extend_from_slice(&buf[..n]);
        Ok(n)
    }
}
