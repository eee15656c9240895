//! Black-box checks of the `bfp` binary.

use std::path::Path;
use std::process::{Command, Output};

fn bfp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bfp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = bfp(args, cwd);
    assert!(
        out.status.success(),
        "bfp {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small-event workflow config written to disk for the CLI to pick up.
fn write_config(dir: &Path, runs: &str, events: u64) -> std::path::PathBuf {
    let path = dir.join("workflow.conf");
    std::fs::write(
        &path,
        format!(
            "seed = 1\nruns = {runs}\nevents_per_run = {events}\nraw_kb = 2\ndst_kb = 4\n\
             mini_kb = 1\nworker_count = 4\nheartbeat_timeout_ms = 800\n\
             data_dir = data\ncatalog_dir = catalog\n"
        ),
    )
    .unwrap();
    path
}

fn write_script(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("recon.path");
    std::fs::write(&path, "module unpack\nmodule reco dst_kb=4 mini_kb=1\n").unwrap();
    path
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "1..2", 15);
    for variant in ["a", "b"] {
        ok(
            &[
                "gen",
                "--config",
                "workflow.conf",
                "--seed",
                "9",
                "--data-dir",
                &format!("{variant}/data"),
                "--catalog-dir",
                &format!("{variant}/catalog"),
            ],
            dir.path(),
        );
    }
    for run in ["run-00001.bevf", "run-00002.bevf"] {
        let a = std::fs::read(dir.path().join("a/data/raw").join(run)).unwrap();
        let b = std::fs::read(dir.path().join("b/data/raw").join(run)).unwrap();
        assert_eq!(a, b, "{run} differs between identical seeds");
    }
}

#[test]
fn produce_with_kill_matches_fault_free_output() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "5", 60);
    let script = write_script(dir.path());
    ok(
        &["gen", "--config", "workflow.conf", "--seed", "3"],
        dir.path(),
    );
    let raw = "data/raw/run-00005.bevf";

    let stdout = ok(
        &[
            "produce", "--in", raw, "--out", "clean.dst.bevf", "--script",
            script.to_str().unwrap(), "--workers", "4", "--report-csv", "clean.csv",
        ],
        dir.path(),
    );
    assert!(stdout.contains("delivered=60"), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("clean.csv")).unwrap();
    assert!(csv.starts_with("worker_id,processed,status\n"));
    assert_eq!(csv.lines().count(), 5);

    let stdout = ok(
        &[
            "produce", "--in", raw, "--out", "faulty.dst.bevf", "--script",
            script.to_str().unwrap(), "--workers", "4", "--kill-worker", "2@3",
            "--heartbeat-timeout-ms", "500",
        ],
        dir.path(),
    );
    assert!(stdout.contains("workers_died=1"), "{stdout}");

    let clean = std::fs::read(dir.path().join("clean.dst.bevf")).unwrap();
    let faulty = std::fs::read(dir.path().join("faulty.dst.bevf")).unwrap();
    assert_eq!(clean, faulty);
}

#[test]
fn skim_splits_and_reduces() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "7", 80);
    let script = write_script(dir.path());
    ok(&["gen", "--config", "workflow.conf", "--seed", "4"], dir.path());
    ok(
        &[
            "produce", "--in", "data/raw/run-00007.bevf", "--out", "run7.dst.bevf",
            "--script", script.to_str().unwrap(), "--workers", "2",
        ],
        dir.path(),
    );
    let stdout = ok(
        &[
            "skim", "--in", "run7.dst.bevf",
            "--skim", "hadronic=ntrk >= 3:had.bevf",
            "--skim", "all=ntrk >= 0:all.bevf",
            "--mini-out", "run7.mini.bevf",
        ],
        dir.path(),
    );
    assert!(stdout.contains("input_count=80"), "{stdout}");
    assert!(stdout.contains("skim.all.accepted=80"), "{stdout}");
    assert!(stdout.contains("mini_events=80"), "{stdout}");
    assert!(dir.path().join("had.bevf").exists());
    assert!(dir.path().join("run7.mini.bevf").exists());
}

#[test]
fn mc_schedule_harvest_run_flow() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "1..2", 20);
    ok(&["gen", "--config", "workflow.conf", "--seed", "6"], dir.path());
    let stdout = ok(
        &[
            "mc", "schedule", "--runs", "data/raw", "--multiplier", "3",
            "--remote-fraction", "0.25", "--out", "requests.txt",
        ],
        dir.path(),
    );
    assert!(stdout.contains("requests=6"), "{stdout}");
    assert!(stdout.contains("target_events=120"), "{stdout}");

    ok(
        &["mc", "harvest", "--runs", "data/raw", "--out", "background"],
        dir.path(),
    );
    let stdout = ok(
        &[
            "mc", "run", "--request", "requests.txt", "--runs", "data/raw",
            "--background", "background", "--seed", "6", "--mc-dir", "mc",
            "--remote-dir", "remote", "--catalog", "catalog",
        ],
        dir.path(),
    );
    assert!(stdout.contains("files_written=6"), "{stdout}");
    assert!(stdout.contains("events_written=120"), "{stdout}");

    let stdout = ok(
        &["catalog", "query", "--store", "catalog", "--type", "MC"],
        dir.path(),
    );
    assert_eq!(stdout.lines().count(), 7, "{stdout}"); // header + 6 rows
}

#[test]
fn catalog_cli_register_move_backup_restore() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "3", 10);
    ok(&["gen", "--config", "workflow.conf", "--seed", "2"], dir.path());
    // gen already registered the file; move its replica to a copied path.
    std::fs::copy(
        dir.path().join("data/raw/run-00003.bevf"),
        dir.path().join("copy.bevf"),
    )
    .unwrap();
    ok(
        &[
            "catalog", "move", "--store", "catalog", "--name", "raw/run-00003",
            "--from", "data/raw/run-00003.bevf", "--to-path", "copy.bevf",
            "--to-site", "KEK",
        ],
        dir.path(),
    );
    let stdout = ok(
        &["catalog", "resolve", "--store", "catalog"],
        dir.path(),
    );
    assert!(stdout.contains("copy.bevf"), "{stdout}");

    ok(
        &["catalog", "backup", "--store", "catalog", "--out", "snap.tar"],
        dir.path(),
    );
    let stdout = ok(
        &["catalog", "restore", "--archive", "snap.tar", "--store", "catalog2"],
        dir.path(),
    );
    assert!(stdout.contains("files=1"), "{stdout}");
    let a = ok(&["catalog", "query", "--store", "catalog"], dir.path());
    let b = ok(&["catalog", "query", "--store", "catalog2"], dir.path());
    assert_eq!(a, b);
}

#[test]
fn plan_reports_published_totals() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/table2.tsv");
    let stdout = ok(
        &[
            "plan", "--inventory", fixtures.to_str().unwrap(),
            "--anchor", "0.7x4x40@1.0",
        ],
        dir.path(),
    );
    assert!(stdout.contains("total_nodes=500"), "{stdout}");
    assert!(stdout.contains("total_ghz=1508"), "{stdout}");
    assert!(stdout.contains("ghz_days_per_invfb=112"), "{stdout}");
}

#[test]
fn e2e_runs_clean_and_reports_ratio() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "1..2", 20);
    let stdout = ok(
        &["e2e", "--config", "workflow.conf", "--seed", "12"],
        dir.path(),
    );
    assert!(stdout.contains("runs=2"), "{stdout}");
    assert!(stdout.contains("mc_files=6"), "{stdout}");
    assert!(stdout.contains("mc_over_beam=3.0000"), "{stdout}");
    assert!(dir.path().join("data/reports/e2e.txt").exists());
}

#[test]
fn run_subcommand_processes_one_file() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "9", 12);
    let script = write_script(dir.path());
    ok(&["gen", "--config", "workflow.conf", "--seed", "8"], dir.path());
    let stdout = ok(
        &[
            "run", "--script", script.to_str().unwrap(),
            "--in", "data/raw/run-00009.bevf", "--out", "out.bevf",
            "--out-type", "DST",
        ],
        dir.path(),
    );
    assert!(stdout.contains("events_delivered=12"), "{stdout}");
    let header = bfp_core::event::read_file_header(dir.path().join("out.bevf")).unwrap();
    assert_eq!(header.file_type, bfp_core::event::FileType::Dst);
    assert_eq!(header.event_count, 12);
}

#[test]
fn bad_flags_fail_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = bfp(&["produce", "--in", "missing.bevf", "--out", "x", "--script", "nope"], dir.path());
    assert!(!out.status.success());
    let out = bfp(&["skim", "--in", "missing.bevf"], dir.path());
    assert!(!out.status.success());
}
