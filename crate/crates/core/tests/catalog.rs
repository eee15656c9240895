//! Catalog behaviour against linear-scan and replay oracles, replica moves,
//! mirroring, snapshots and the framed query protocol.

use std::path::{Path, PathBuf};
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use bfp_core::catalog::{
    backup_snapshot, mirror, proto, restore_snapshot, snapshot_generation, CatalogError,
    CatalogServer, LogicalFile, QueryFilter, Replica, ReplicaStatus, ServerRole,
};
use bfp_core::event::{EventFileHeader, EventFileWriter, FileType};
use bfp_core::generator::{beam_event, GeneratorConfig};
use bfp_core::wire::wire_pair;

/// Writes a tiny but real event file and returns its path.
fn physical_file(dir: &Path, name: &str, file_type: FileType, run: u32, events: u64) -> PathBuf {
    let cfg = GeneratorConfig {
        raw_target_bytes: 512,
        ..GeneratorConfig::default()
    };
    let path = dir.join(name);
    let header = EventFileHeader::new(file_type, cfg.experiment, run, "beam");
    let mut writer = EventFileWriter::create(&path, header, true).unwrap();
    for n in 1..=events {
        writer.append_event(&beam_event(&cfg, 0x11, run, n)).unwrap();
    }
    writer.close().unwrap();
    path
}

fn meta(name: &str, file_type: FileType, run: u32, events: u64) -> LogicalFile {
    LogicalFile {
        logical_name: name.to_owned(),
        file_type,
        experiment: 1,
        run,
        stream_label: "beam".to_owned(),
        event_count: events,
        checksum: 0,
        created_at: 0,
    }
}

#[test]
fn register_then_query_by_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = physical_file(dir.path(), "dst-100.bevf", FileType::Dst, 12, 100);
    let mut server = CatalogServer::in_memory(ServerRole::Primary);
    server
        .register_file(
            meta("dst/run-12", FileType::Dst, 12, 100),
            Replica::online("dst/run-12", "KEK", path.to_string_lossy()),
        )
        .unwrap();

    let hits = server.query(&QueryFilter {
        run_range: Some((12, 12)),
        ..QueryFilter::default()
    });
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].event_count, 100);
    assert_ne!(hits[0].checksum, 0);
    assert_eq!(server.generation(), 1);
}

#[test]
fn duplicate_logical_name_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = physical_file(dir.path(), "raw.bevf", FileType::Raw, 1, 5);
    let mut server = CatalogServer::in_memory(ServerRole::Primary);
    for attempt in 0..2 {
        let result = server.register_file(
            meta("raw/run-1", FileType::Raw, 1, 5),
            Replica::online("raw/run-1", "KEK", path.to_string_lossy()),
        );
        match attempt {
            0 => result.unwrap(),
            _ => assert!(matches!(
                result,
                Err(CatalogError::DuplicateLogicalName(n)) if n == "raw/run-1"
            )),
        }
    }
}

#[test]
fn header_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = physical_file(dir.path(), "raw.bevf", FileType::Raw, 1, 5);
    let mut server = CatalogServer::in_memory(ServerRole::Primary);
    let result = server.register_file(
        meta("raw/run-1", FileType::Raw, 1, 7),
        Replica::online("raw/run-1", "KEK", path.to_string_lossy()),
    );
    assert!(matches!(result, Err(CatalogError::HeaderMismatch { .. })));
    assert_eq!(server.file_count(), 0);
}

#[test]
fn random_queries_match_linear_scan_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let mut server = CatalogServer::in_memory(ServerRole::Primary);
    let types = [FileType::Raw, FileType::Dst, FileType::MiniDst, FileType::Mc];
    let streams = ["beam", "b0b0bar", "continuum"];

    // A small pool of physical files; logical entries reuse them.
    let pool: Vec<(PathBuf, u32, u64, FileType, &str)> = (0..12)
        .map(|i| {
            let run = rng.random_range(1..30u32);
            let events = rng.random_range(0..8u64);
            let ftype = types[rng.random_range(0..types.len())];
            let stream = streams[rng.random_range(0..streams.len())];
            let cfg = GeneratorConfig {
                raw_target_bytes: 256,
                ..GeneratorConfig::default()
            };
            let path = dir.path().join(format!("pool-{i}.bevf"));
            let header = EventFileHeader::new(ftype, cfg.experiment, run, stream);
            let mut writer = EventFileWriter::create(&path, header, true).unwrap();
            for n in 1..=events {
                writer.append_event(&beam_event(&cfg, 0x22, run, n)).unwrap();
            }
            writer.close().unwrap();
            (path, run, events, ftype, stream)
        })
        .collect();

    let mut expected = Vec::new();
    for i in 0..1000 {
        let (path, run, events, ftype, stream) = &pool[rng.random_range(0..pool.len())];
        let name = format!("file-{i:04}");
        let mut m = meta(&name, *ftype, *run, *events);
        m.stream_label = (*stream).to_owned();
        server
            .register_file(
                m.clone(),
                Replica::online(&name, "KEK", path.to_string_lossy()),
            )
            .unwrap();
        expected.push(m);
    }

    for _ in 0..200 {
        let filter = QueryFilter {
            file_type: rng
                .random_bool(0.5)
                .then(|| types[rng.random_range(0..types.len())]),
            run_range: rng.random_bool(0.5).then(|| {
                let lo = rng.random_range(1..30u32);
                (lo, lo + rng.random_range(0..10u32))
            }),
            stream_label: rng
                .random_bool(0.4)
                .then(|| streams[rng.random_range(0..streams.len())].to_owned()),
            experiment: rng.random_bool(0.3).then_some(1),
        };
        // Independent oracle: plain filter + sort over the shadow list.
        let mut triples: Vec<(u32, u32, String)> = expected
            .iter()
            .filter(|f| {
                filter.file_type.is_none_or(|t| t == f.file_type)
                    && filter.run_range.is_none_or(|(lo, hi)| f.run >= lo && f.run <= hi)
                    && filter.stream_label.as_ref().is_none_or(|s| *s == f.stream_label)
                    && filter.experiment.is_none_or(|e| e == f.experiment)
            })
            .map(|f| (f.experiment, f.run, f.logical_name.clone()))
            .collect();
        triples.sort();
        let oracle: Vec<String> = triples.into_iter().map(|(_, _, name)| name).collect();
        let got: Vec<String> = server
            .query(&filter)
            .into_iter()
            .map(|f| f.logical_name)
            .collect();
        assert_eq!(got, oracle, "filter {filter:?}");
    }
}

#[test]
fn resolve_prefers_kek_and_is_stable_across_moves() {
    let dir = tempfile::tempdir().unwrap();
    let here = physical_file(dir.path(), "kek.bevf", FileType::Dst, 3, 10);
    let mut server = CatalogServer::in_memory(ServerRole::Primary);
    server
        .register_file(
            meta("dst/run-3", FileType::Dst, 3, 10),
            Replica::online("dst/run-3", "nagoya", here.to_string_lossy()),
        )
        .unwrap();

    let filter = QueryFilter::default();
    let resolved = server.resolve_for_job(&filter).unwrap();
    assert_eq!(resolved[0].1, here.to_string_lossy());

    // A KEK copy appears: resolution switches to it.
    let kek_copy = dir.path().join("kek-copy.bevf");
    std::fs::copy(&here, &kek_copy).unwrap();
    server
        .move_replica(
            "dst/run-3",
            &here.to_string_lossy(),
            Replica::online("dst/run-3", "KEK", kek_copy.to_string_lossy()),
        )
        .unwrap();

    let resolved = server.resolve_for_job(&filter).unwrap();
    assert_eq!(resolved[0].1, kek_copy.to_string_lossy());
    // Logical view unchanged by the move.
    assert_eq!(server.query(&filter).len(), 1);
    assert_eq!(server.query(&filter)[0].event_count, 10);
}

#[test]
fn move_with_corrupt_destination_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let src = physical_file(dir.path(), "src.bevf", FileType::Dst, 4, 10);
    let mut server = CatalogServer::in_memory(ServerRole::Primary);
    server
        .register_file(
            meta("dst/run-4", FileType::Dst, 4, 10),
            Replica::online("dst/run-4", "KEK", src.to_string_lossy()),
        )
        .unwrap();
    let before = server.content();

    let mut corrupt = std::fs::read(&src).unwrap();
    let len = corrupt.len();
    corrupt[len - 3] ^= 0x01;
    let bad = dir.path().join("bad.bevf");
    std::fs::write(&bad, corrupt).unwrap();

    let result = server.move_replica(
        "dst/run-4",
        &src.to_string_lossy(),
        Replica::online("dst/run-4", "KEK", bad.to_string_lossy()),
    );
    assert!(matches!(result, Err(CatalogError::ChecksumMismatch { .. })));
    assert_eq!(server.content(), before, "failed move mutated the catalog");

    let result = server.move_replica(
        "dst/run-4",
        "no/such/replica",
        Replica::online("dst/run-4", "KEK", src.to_string_lossy()),
    );
    assert!(matches!(result, Err(CatalogError::UnknownReplica { .. })));
}

#[test]
fn random_moves_keep_resolution_online_and_replay_reproduces_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(47);
    let mut server = CatalogServer::in_memory(ServerRole::Primary);

    let mut current_paths = Vec::new();
    for i in 0..10 {
        let path = physical_file(dir.path(), &format!("f{i}.bevf"), FileType::Dst, i, 3);
        let name = format!("dst/run-{i}");
        server
            .register_file(
                meta(&name, FileType::Dst, i, 3),
                Replica::online(&name, "KEK", path.to_string_lossy()),
            )
            .unwrap();
        current_paths.push((name, path));
    }

    for step in 0..60 {
        let idx = rng.random_range(0..current_paths.len());
        let (name, old_path) = current_paths[idx].clone();
        let new_path = dir.path().join(format!("moved-{step}.bevf"));
        std::fs::copy(&old_path, &new_path).unwrap();
        let site = if rng.random_bool(0.5) { "KEK" } else { "remote" };
        server
            .move_replica(
                &name,
                &old_path.to_string_lossy(),
                Replica::online(&name, site, new_path.to_string_lossy()),
            )
            .unwrap();
        current_paths[idx] = (name, new_path);

        // Resolution always lands on an online replica path that exists.
        for (logical, path) in server.resolve_for_job(&QueryFilter::default()).unwrap() {
            assert!(PathBuf::from(&path).exists(), "{logical} resolved to {path}");
            let replica = server
                .replicas_of(&logical)
                .iter()
                .find(|r| r.physical_path == path)
                .unwrap();
            assert_eq!(replica.status, ReplicaStatus::Online);
        }
    }

    // Audit replay from empty reproduces the live state exactly.
    let replayed = CatalogServer::replay(server.audit_log(), ServerRole::Primary);
    assert_eq!(replayed.content(), server.content());
}

#[test]
fn mirror_copies_content_once_and_rejects_dirty_secondary() {
    let dir = tempfile::tempdir().unwrap();
    let mut primary = CatalogServer::in_memory(ServerRole::Primary);
    for i in 0..10 {
        let path = physical_file(dir.path(), &format!("m{i}.bevf"), FileType::Raw, i, 2);
        let name = format!("raw/run-{i}");
        primary
            .register_file(
                meta(&name, FileType::Raw, i, 2),
                Replica::online(&name, "KEK", path.to_string_lossy()),
            )
            .unwrap();
    }

    let mut secondary = CatalogServer::in_memory(ServerRole::Secondary);
    let generation = mirror(&primary, &mut secondary).unwrap();
    assert_eq!(generation, primary.generation());
    assert_eq!(secondary.content(), primary.content());
    // Identical answers to any query.
    let filter = QueryFilter {
        run_range: Some((2, 6)),
        ..QueryFilter::default()
    };
    assert_eq!(secondary.query(&filter), primary.query(&filter));

    // Idempotent when nothing changed.
    let again = mirror(&primary, &mut secondary).unwrap();
    assert_eq!(again, generation);

    // A local write on the secondary blocks mirroring.
    let path = physical_file(dir.path(), "rogue.bevf", FileType::Raw, 99, 1);
    secondary
        .register_file(
            meta("rogue", FileType::Raw, 99, 1),
            Replica::online("rogue", "KEK", path.to_string_lossy()),
        )
        .unwrap();
    assert!(matches!(
        mirror(&primary, &mut secondary),
        Err(CatalogError::MirrorConflict)
    ));
}

#[test]
fn snapshot_wipe_restore_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut server = CatalogServer::in_memory(ServerRole::Primary);
    for i in 0..7 {
        let path = physical_file(dir.path(), &format!("s{i}.bevf"), FileType::Skim, i, 1);
        let name = format!("skim/run-{i}");
        server
            .register_file(
                meta_with_stream(&name, FileType::Skim, i, 1, "beam"),
                Replica::online(&name, "KEK", path.to_string_lossy()),
            )
            .unwrap();
    }
    let archive = dir.path().join("backup.tar");
    let generation = backup_snapshot(&server, &archive).unwrap();
    assert_eq!(generation, server.generation());
    assert_eq!(snapshot_generation(&archive).unwrap(), generation);

    let before = server.content();
    drop(server); // wipe

    let restored = restore_snapshot(&archive, None).unwrap();
    assert_eq!(restored.content(), before);
    assert_eq!(restored.generation(), generation);
}

fn meta_with_stream(name: &str, t: FileType, run: u32, events: u64, stream: &str) -> LogicalFile {
    let mut m = meta(name, t, run, events);
    m.stream_label = stream.to_owned();
    m
}

#[test]
fn empty_catalog_snapshot_restores_to_empty() {
    let dir = tempfile::tempdir().unwrap();
    let server = CatalogServer::in_memory(ServerRole::Primary);
    let archive = dir.path().join("empty.tar");
    assert_eq!(backup_snapshot(&server, &archive).unwrap(), 0);
    let restored = restore_snapshot(&archive, None).unwrap();
    assert_eq!(restored.file_count(), 0);
    assert_eq!(restored.generation(), 0);
}

#[test]
fn persistent_server_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("catalog");
    let path = physical_file(dir.path(), "p.bevf", FileType::Dst, 8, 4);
    {
        let mut server = CatalogServer::open(&store, ServerRole::Primary).unwrap();
        server
            .register_file(
                meta("dst/run-8", FileType::Dst, 8, 4),
                Replica::online("dst/run-8", "KEK", path.to_string_lossy()),
            )
            .unwrap();
        server.compact().unwrap();
        let copy = dir.path().join("p2.bevf");
        std::fs::copy(&path, &copy).unwrap();
        server
            .move_replica(
                "dst/run-8",
                &path.to_string_lossy(),
                Replica::online("dst/run-8", "KEK", copy.to_string_lossy()),
            )
            .unwrap();
    }
    let reopened = CatalogServer::open(&store, ServerRole::Primary).unwrap();
    assert_eq!(reopened.generation(), 2);
    assert_eq!(reopened.file_count(), 1);
    assert_eq!(reopened.replicas_of("dst/run-8").len(), 2);
    // Replay of the reopened audit equals the reopened state.
    let replayed = CatalogServer::replay(reopened.audit_log(), ServerRole::Primary);
    assert_eq!(replayed.content(), reopened.content());
}

#[test]
fn framed_protocol_answers_query_and_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let path = physical_file(dir.path(), "q.bevf", FileType::Dst, 21, 6);
    let mut server = CatalogServer::in_memory(ServerRole::Primary);
    server
        .register_file(
            meta("dst/run-21", FileType::Dst, 21, 6),
            Replica::online("dst/run-21", "KEK", path.to_string_lossy()),
        )
        .unwrap();
    let server = RwLock::new(server);

    let (client_end, server_end) = wire_pair();
    std::thread::scope(|scope| {
        let server_ref = &server;
        scope.spawn(move || proto::serve(server_ref, &server_end));
        let mut client = proto::CatalogClient::new(client_end, 1);
        let hits = client
            .query(&QueryFilter {
                run_range: Some((21, 21)),
                ..QueryFilter::default()
            })
            .unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].event_count, 6);

        let resolved = client.resolve(&QueryFilter::default()).unwrap();
        assert_eq!(resolved.len(), 1);
        assert_eq!(resolved[0].0, "dst/run-21");
        // Dropping the client ends the serve loop.
    });
}
