//! Metadata catalog: logical files, physical replicas, audit history.
//!
//! A catalog server maps logical file attributes (type, run, stream, event
//! count, checksum) to the physical replicas that carry them. Queries see
//! only logical attributes, so replicas can move freely underneath running
//! jobs. Every mutation appends one record to an audit log; replaying the
//! log from empty reproduces the server state exactly, and that is also how
//! a server comes back from disk.
//!
//! Two servers cooperate: mutations land on the primary, and a one-way
//! mirror copies its content to the secondary at a recorded generation.
//! Snapshots are plain tar archives of the persisted state.

pub mod proto;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{read_file_header, EventError, FileType};

/// Catalog persistence format version.
pub const STORE_VERSION: u32 = 1;

const AUDIT_FILE: &str = "audit.log";
const TABLE_FILE: &str = "table.json";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("logical name {0:?} already registered")]
    DuplicateLogicalName(String),
    #[error("{logical}: physical header disagrees with metadata: {detail}")]
    HeaderMismatch { logical: String, detail: String },
    #[error("unknown logical file {0:?}")]
    UnknownLogicalFile(String),
    #[error("{logical}: no replica at {path:?}")]
    UnknownReplica { logical: String, path: String },
    #[error("{logical}: checksum {found:#010x} does not match catalog {expected:#010x}")]
    ChecksumMismatch {
        logical: String,
        expected: u32,
        found: u32,
    },
    #[error("no online replica for {0:?}")]
    NoOnlineReplica(String),
    #[error("secondary has local writes; refusing to mirror over them")]
    MirrorConflict,
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Logical attributes of one file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalFile {
    pub logical_name: String,
    pub file_type: FileType,
    pub experiment: u32,
    pub run: u32,
    pub stream_label: String,
    pub event_count: u64,
    /// crc32 of the physical file; computed by the catalog at registration.
    pub checksum: u32,
    /// Seconds since the epoch, stamped at registration.
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplicaStatus {
    Online,
    Retired,
}

/// One physical copy of a logical file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replica {
    pub logical_name: String,
    pub site: String,
    pub physical_path: String,
    pub status: ReplicaStatus,
}

impl Replica {
    pub fn online(logical_name: impl Into<String>, site: impl Into<String>, path: impl Into<String>) -> Self {
        Self {
            logical_name: logical_name.into(),
            site: site.into(),
            physical_path: path.into(),
            status: ReplicaStatus::Online,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ServerRole {
    Primary,
    Secondary,
}

/// Attribute filter; `None` fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFilter {
    pub file_type: Option<FileType>,
    /// Inclusive run range.
    pub run_range: Option<(u32, u32)>,
    pub stream_label: Option<String>,
    pub experiment: Option<u32>,
}

impl QueryFilter {
    fn matches(&self, file: &LogicalFile) -> bool {
        self.file_type.is_none_or(|t| t == file.file_type)
            && self
                .run_range
                .is_none_or(|(lo, hi)| file.run >= lo && file.run <= hi)
            && self
                .stream_label
                .as_ref()
                .is_none_or(|s| *s == file.stream_label)
            && self.experiment.is_none_or(|e| e == file.experiment)
    }
}

/// One mutation, as stored in the audit log (JSON lines, one per record).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum AuditRecord {
    Register {
        generation: u64,
        file: LogicalFile,
        replica: Replica,
    },
    Move {
        generation: u64,
        logical_name: String,
        from_path: String,
        to: Replica,
    },
}

impl AuditRecord {
    pub fn generation(&self) -> u64 {
        match self {
            AuditRecord::Register { generation, .. } | AuditRecord::Move { generation, .. } => {
                *generation
            }
        }
    }
}

/// Snapshot of the logical state, used for the compacted table file, for
/// mirroring and for full-content comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogContent {
    pub version: u32,
    pub generation: u64,
    pub files: BTreeMap<String, LogicalFile>,
    pub replicas: BTreeMap<String, Vec<Replica>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotManifest {
    version: u32,
    generation: u64,
    role: ServerRole,
}

/// One catalog server, in memory or backed by a directory.
pub struct CatalogServer {
    role: ServerRole,
    generation: u64,
    files: BTreeMap<String, LogicalFile>,
    replicas: BTreeMap<String, Vec<Replica>>,
    audit: Vec<AuditRecord>,
    storage: Option<PathBuf>,
    has_local_writes: bool,
}

impl CatalogServer {
    pub fn in_memory(role: ServerRole) -> Self {
        Self {
            role,
            generation: 0,
            files: BTreeMap::new(),
            replicas: BTreeMap::new(),
            audit: Vec::new(),
            storage: None,
            has_local_writes: false,
        }
    }

    /// Opens (or creates) a directory-backed server, replaying its history.
    pub fn open(dir: impl AsRef<Path>, role: ServerRole) -> Result<Self, CatalogError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut server = Self::in_memory(role);
        server.storage = Some(dir.clone());

        let table_path = dir.join(TABLE_FILE);
        let mut table_generation = 0;
        if table_path.exists() {
            let content: CatalogContent = serde_json::from_reader(File::open(&table_path)?)?;
            if content.version != STORE_VERSION {
                return Err(CatalogError::CorruptStore(format!(
                    "table version {} unsupported",
                    content.version
                )));
            }
            table_generation = content.generation;
            server.generation = content.generation;
            server.files = content.files;
            server.replicas = content.replicas;
        }
        let audit_path = dir.join(AUDIT_FILE);
        if audit_path.exists() {
            for (idx, line) in BufReader::new(File::open(&audit_path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: AuditRecord = serde_json::from_str(&line).map_err(|e| {
                    CatalogError::CorruptStore(format!("audit line {}: {e}", idx + 1))
                })?;
                if record.generation() > table_generation {
                    server.apply(&record);
                }
                server.audit.push(record);
            }
        }
        Ok(server)
    }

    pub fn role(&self) -> ServerRole {
        self.role
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn file_count(&self) -> usize {
        self.files.len()
    }

    pub fn audit_log(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn has_local_writes(&self) -> bool {
        self.has_local_writes
    }

    /// Full logical content, for mirroring and content comparison.
    pub fn content(&self) -> CatalogContent {
        CatalogContent {
            version: STORE_VERSION,
            generation: self.generation,
            files: self.files.clone(),
            replicas: self.replicas.clone(),
        }
    }

    pub fn replicas_of(&self, logical_name: &str) -> &[Replica] {
        self.replicas
            .get(logical_name)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Registers a new logical file with its first replica.
    ///
    /// The physical file is opened: its header must agree with the metadata,
    /// and its crc32 becomes the catalog checksum (whatever `meta.checksum`
    /// said). `created_at` is stamped here.
    pub fn register_file(&mut self, meta: LogicalFile, replica: Replica) -> Result<(), CatalogError> {
        if self.files.contains_key(&meta.logical_name) {
            return Err(CatalogError::DuplicateLogicalName(meta.logical_name));
        }
        let header = read_file_header(&replica.physical_path)?;
        let mut mismatch = Vec::new();
        if header.event_count != meta.event_count {
            mismatch.push(format!(
                "event_count {} vs {}",
                header.event_count, meta.event_count
            ));
        }
        if header.file_type != meta.file_type {
            mismatch.push(format!("file_type {} vs {}", header.file_type, meta.file_type));
        }
        if header.experiment != meta.experiment {
            mismatch.push(format!("experiment {} vs {}", header.experiment, meta.experiment));
        }
        if header.run != meta.run {
            mismatch.push(format!("run {} vs {}", header.run, meta.run));
        }
        if header.stream_label != meta.stream_label {
            mismatch.push(format!(
                "stream {:?} vs {:?}",
                header.stream_label, meta.stream_label
            ));
        }
        if !mismatch.is_empty() {
            return Err(CatalogError::HeaderMismatch {
                logical: meta.logical_name,
                detail: mismatch.join(", "),
            });
        }

        let mut file = meta;
        file.checksum = file_crc32(&replica.physical_path)?;
        file.created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_secs();
        let mut replica = replica;
        replica.status = ReplicaStatus::Online;
        replica.logical_name = file.logical_name.clone();

        let record = AuditRecord::Register {
            generation: self.generation + 1,
            file,
            replica,
        };
        self.commit(record)
    }

    /// Registers a file whose metadata is read straight from its header.
    pub fn register_event_file(
        &mut self,
        logical_name: impl Into<String>,
        path: impl AsRef<Path>,
        site: impl Into<String>,
    ) -> Result<(), CatalogError> {
        let logical_name = logical_name.into();
        let path = path.as_ref();
        let header = read_file_header(path)?;
        let meta = LogicalFile {
            logical_name: logical_name.clone(),
            file_type: header.file_type,
            experiment: header.experiment,
            run: header.run,
            stream_label: header.stream_label,
            event_count: header.event_count,
            checksum: 0,
            created_at: 0,
        };
        let replica = Replica::online(logical_name, site, path.to_string_lossy());
        self.register_file(meta, replica)
    }

    /// All logical files matching the filter, ordered by
    /// (experiment, run, logical_name).
    pub fn query(&self, filter: &QueryFilter) -> Vec<LogicalFile> {
        let mut hits: Vec<LogicalFile> = self
            .files
            .values()
            .filter(|f| filter.matches(f))
            .cloned()
            .collect();
        hits.sort_by(|a, b| {
            (a.experiment, a.run, &a.logical_name).cmp(&(b.experiment, b.run, &b.logical_name))
        });
        hits
    }

    /// One online physical path per matching logical file, preferring the
    /// KEK site, tie-broken by lexicographic path. Stable while the catalog
    /// does not change.
    pub fn resolve_for_job(
        &self,
        filter: &QueryFilter,
    ) -> Result<Vec<(String, String)>, CatalogError> {
        let mut out = Vec::new();
        for file in self.query(filter) {
            let mut online: Vec<&Replica> = self
                .replicas_of(&file.logical_name)
                .iter()
                .filter(|r| r.status == ReplicaStatus::Online)
                .collect();
            online.sort_by_key(|r| (r.site != "KEK", r.physical_path.clone()));
            match online.first() {
                Some(replica) => out.push((file.logical_name, replica.physical_path.clone())),
                None => return Err(CatalogError::NoOnlineReplica(file.logical_name)),
            }
        }
        Ok(out)
    }

    /// Moves one replica: the destination must already hold a copy whose
    /// checksum matches the catalog. On success the old replica is retired
    /// and the new one is online; logical attributes do not change.
    pub fn move_replica(
        &mut self,
        logical_name: &str,
        from_path: &str,
        to: Replica,
    ) -> Result<(), CatalogError> {
        let file = self
            .files
            .get(logical_name)
            .ok_or_else(|| CatalogError::UnknownLogicalFile(logical_name.to_owned()))?;
        let known = self
            .replicas_of(logical_name)
            .iter()
            .any(|r| r.physical_path == from_path);
        if !known {
            return Err(CatalogError::UnknownReplica {
                logical: logical_name.to_owned(),
                path: from_path.to_owned(),
            });
        }
        let found = file_crc32(&to.physical_path)?;
        if found != file.checksum {
            return Err(CatalogError::ChecksumMismatch {
                logical: logical_name.to_owned(),
                expected: file.checksum,
                found,
            });
        }
        let mut to = to;
        to.status = ReplicaStatus::Online;
        to.logical_name = logical_name.to_owned();
        let record = AuditRecord::Move {
            generation: self.generation + 1,
            logical_name: logical_name.to_owned(),
            from_path: from_path.to_owned(),
            to,
        };
        self.commit(record)
    }

    /// Applies a validated mutation: audit first, then state.
    fn commit(&mut self, record: AuditRecord) -> Result<(), CatalogError> {
        if let Some(dir) = &self.storage {
            let mut out = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(AUDIT_FILE))?;
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        self.apply(&record);
        self.audit.push(record);
        self.has_local_writes = true;
        Ok(())
    }

    /// Pure state transition shared by live mutation, replay and loading.
    fn apply(&mut self, record: &AuditRecord) {
        match record {
            AuditRecord::Register {
                generation,
                file,
                replica,
            } => {
                self.files.insert(file.logical_name.clone(), file.clone());
                self.replicas
                    .entry(file.logical_name.clone())
                    .or_default()
                    .push(replica.clone());
                self.generation = *generation;
            }
            AuditRecord::Move {
                generation,
                logical_name,
                from_path,
                to,
            } => {
                let replicas = self.replicas.entry(logical_name.clone()).or_default();
                for replica in replicas.iter_mut() {
                    if replica.physical_path == *from_path {
                        replica.status = ReplicaStatus::Retired;
                    }
                }
                replicas.push(to.clone());
                self.generation = *generation;
            }
        }
    }

    /// Rebuilds a server by replaying an audit log from empty.
    pub fn replay(records: &[AuditRecord], role: ServerRole) -> Self {
        let mut server = Self::in_memory(role);
        for record in records {
            server.apply(record);
            server.audit.push(record.clone());
        }
        server
    }

    /// Writes the compacted table file next to the audit log.
    pub fn compact(&self) -> Result<(), CatalogError> {
        if let Some(dir) = &self.storage {
            let table = serde_json::to_vec_pretty(&self.content())?;
            std::fs::write(dir.join(TABLE_FILE), table)?;
        }
        Ok(())
    }
}

/// Copies the primary's content onto the secondary and returns the mirrored
/// generation. Errors if the secondary holds writes of its own; a second
/// mirror with nothing new is a no-op.
pub fn mirror(primary: &CatalogServer, secondary: &mut CatalogServer) -> Result<u64, CatalogError> {
    if secondary.has_local_writes {
        return Err(CatalogError::MirrorConflict);
    }
    if secondary.generation == primary.generation {
        return Ok(secondary.generation);
    }
    secondary.files = primary.files.clone();
    secondary.replicas = primary.replicas.clone();
    secondary.generation = primary.generation;
    secondary.audit = primary.audit.clone();
    if let Some(dir) = &secondary.storage {
        let mut out = Vec::new();
        for record in &secondary.audit {
            serde_json::to_writer(&mut out, record)?;
            out.push(b'\n');
        }
        std::fs::write(dir.join(AUDIT_FILE), out)?;
        secondary.compact()?;
    }
    Ok(secondary.generation)
}

/// Archives a server's full state as a tar file; the archive records the
/// generation it was taken at.
pub fn backup_snapshot(server: &CatalogServer, out_path: impl AsRef<Path>) -> Result<u64, CatalogError> {
    let manifest = SnapshotManifest {
        version: STORE_VERSION,
        generation: server.generation(),
        role: server.role(),
    };
    let mut builder = tar::Builder::new(File::create(out_path.as_ref())?);
    append_bytes(&mut builder, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    append_bytes(
        &mut builder,
        TABLE_FILE,
        &serde_json::to_vec_pretty(&server.content())?,
    )?;
    let mut audit = Vec::new();
    for record in server.audit_log() {
        serde_json::to_writer(&mut audit, record)?;
        audit.push(b'\n');
    }
    append_bytes(&mut builder, AUDIT_FILE, &audit)?;
    builder.finish()?;
    Ok(manifest.generation)
}

/// Reads the generation recorded in a snapshot without restoring it.
pub fn snapshot_generation(archive: impl AsRef<Path>) -> Result<u64, CatalogError> {
    let (manifest, _, _) = read_snapshot(archive.as_ref())?;
    Ok(manifest.generation)
}

/// Restores a snapshot into a fresh server. With `dir` set, the restored
/// server is directory-backed at that location.
pub fn restore_snapshot(
    archive: impl AsRef<Path>,
    dir: Option<&Path>,
) -> Result<CatalogServer, CatalogError> {
    let (manifest, content, audit) = read_snapshot(archive.as_ref())?;
    let mut server = CatalogServer::in_memory(manifest.role);
    server.generation = content.generation;
    server.files = content.files;
    server.replicas = content.replicas;
    server.audit = audit;
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        server.storage = Some(dir.to_path_buf());
        let mut out = Vec::new();
        for record in &server.audit {
            serde_json::to_writer(&mut out, record)?;
            out.push(b'\n');
        }
        std::fs::write(dir.join(AUDIT_FILE), out)?;
        server.compact()?;
    }
    Ok(server)
}

fn read_snapshot(
    archive: &Path,
) -> Result<(SnapshotManifest, CatalogContent, Vec<AuditRecord>), CatalogError> {
    let mut tar = tar::Archive::new(File::open(archive)?);
    let mut manifest = None;
    let mut content = None;
    let mut audit = Vec::new();
    for entry in tar.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes)?;
        match name.as_str() {
            "manifest.json" => manifest = Some(serde_json::from_slice(&bytes)?),
            TABLE_FILE => content = Some(serde_json::from_slice(&bytes)?),
            AUDIT_FILE => {
                for line in bytes.split(|b| *b == b'\n') {
                    if line.iter().all(|b| b.is_ascii_whitespace()) {
                        continue;
                    }
                    audit.push(serde_json::from_slice(line)?);
                }
            }
            other => {
                return Err(CatalogError::CorruptStore(format!(
                    "unexpected archive entry {other:?}"
                )))
            }
        }
    }
    let manifest: SnapshotManifest =
        manifest.ok_or_else(|| CatalogError::CorruptStore("missing manifest".into()))?;
    if manifest.version != STORE_VERSION {
        return Err(CatalogError::CorruptStore(format!(
            "snapshot version {} unsupported",
            manifest.version
        )));
    }
    let content =
        content.ok_or_else(|| CatalogError::CorruptStore("missing table".into()))?;
    Ok((manifest, content, audit))
}

fn append_bytes(
    builder: &mut tar::Builder<File>,
    name: &str,
    bytes: &[u8],
) -> Result<(), CatalogError> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_cksum();
    builder.append_data(&mut header, name, bytes)?;
    Ok(())
}

/// crc32 of a whole file.
pub fn file_crc32(path: impl AsRef<Path>) -> Result<u32, CatalogError> {
    let mut hasher = crc32fast::Hasher::new();
    let mut reader = BufReader::new(File::open(path.as_ref())?);
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize())
}
