//! End-to-end workflow orchestration.
//!
//! One seed drives everything: generation, distribution, skimming, MC
//! scheduling, overlay and fault injection all draw from named sub-streams
//! of it, so a whole campaign is reproducible byte for byte (catalog
//! timestamps aside, which is why determinism comparisons hash the data
//! directory and not the catalog store).
//!
//! Directory layout under the data dir: `raw/`, `dst/`, `skim/`, `mini/`,
//! `background/`, `mc/` (home site), `remote/` (remote staging), `reports/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::catalog::{CatalogServer, QueryFilter, ReplicaStatus, ServerRole};
use crate::event::FileType;
use crate::generator::{generate_run_file, stream_seed, GeneratorConfig};
use crate::mc::{
    derive_run_conditions, harvest_background, run_mc_production, schedule_mc, write_request_file,
    BackgroundLibrary, McProductionConfig, RunConditions, Site,
};
use crate::production::{run_production, KillPoint, ProductionJob};
use crate::skim::{run_skims, write_minidst_file, Predicate, SkimDef, DEFAULT_MINIDST_KEEP};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> WorkflowError {
    move |e| WorkflowError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Default skim selections applied by the end-to-end workflow.
pub const DEFAULT_SKIMS: [(&str, &str); 2] = [
    ("hadronic", "ntrk >= 3"),
    ("lowmult", "ntrk <= 2 and esum < 9000"),
];

/// Everything an end-to-end campaign needs; round-trips through the
/// `key = value` text format.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowConfig {
    pub seed: u64,
    pub experiment: u32,
    pub runs: Vec<u32>,
    pub events_per_run: u64,
    pub raw_kb: f64,
    pub dst_kb: f64,
    pub mini_kb: f64,
    pub background_rate: f64,
    pub multiplier: f64,
    pub split: [f64; 3],
    pub remote_fraction: f64,
    pub worker_count: u32,
    pub heartbeat_timeout_ms: u64,
    pub compression: bool,
    /// Desk-scale mapping of one inverse femtobarn to synthetic events.
    pub events_per_invfb: u64,
    pub data_dir: PathBuf,
    pub catalog_dir: PathBuf,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            experiment: 1,
            runs: (1..=4).collect(),
            events_per_run: 50,
            raw_kb: 35.0,
            dst_kb: 60.0,
            mini_kb: 12.0,
            background_rate: 3.0,
            multiplier: 3.0,
            split: [0.25, 0.25, 0.5],
            remote_fraction: 0.25,
            worker_count: 4,
            heartbeat_timeout_ms: 5000,
            compression: true,
            events_per_invfb: 10_000,
            data_dir: PathBuf::from("data"),
            catalog_dir: PathBuf::from("catalog"),
        }
    }
}

impl WorkflowConfig {
    /// Emits the config in its text form.
    pub fn to_text(&self) -> String {
        let runs = self
            .runs
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "experiment = {}", self.experiment);
        let _ = writeln!(out, "runs = {runs}");
        let _ = writeln!(out, "events_per_run = {}", self.events_per_run);
        let _ = writeln!(out, "raw_kb = {}", self.raw_kb);
        let _ = writeln!(out, "dst_kb = {}", self.dst_kb);
        let _ = writeln!(out, "mini_kb = {}", self.mini_kb);
        let _ = writeln!(out, "background_rate = {}", self.background_rate);
        let _ = writeln!(out, "multiplier = {}", self.multiplier);
        let _ = writeln!(
            out,
            "split = {},{},{}",
            self.split[0], self.split[1], self.split[2]
        );
        let _ = writeln!(out, "remote_fraction = {}", self.remote_fraction);
        let _ = writeln!(out, "worker_count = {}", self.worker_count);
        let _ = writeln!(out, "heartbeat_timeout_ms = {}", self.heartbeat_timeout_ms);
        let _ = writeln!(out, "compression = {}", self.compression);
        let _ = writeln!(out, "events_per_invfb = {}", self.events_per_invfb);
        let _ = writeln!(out, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(out, "catalog_dir = {}", self.catalog_dir.display());
        out
    }

    /// Parses the text form; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, WorkflowError> {
        let mut config = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.split('#').next().unwrap_or("").trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| WorkflowError::Config(format!("line {line}: expected key = value")))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |e: String| WorkflowError::Config(format!("line {line}: {key}: {e}"));
            match key {
                "seed" => config.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "experiment" => config.experiment = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "runs" => config.runs = parse_runs(value).map_err(bad)?,
                "events_per_run" => config.events_per_run = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "raw_kb" => config.raw_kb = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "dst_kb" => config.dst_kb = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "mini_kb" => config.mini_kb = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "background_rate" => config.background_rate = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "multiplier" => config.multiplier = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "split" => config.split = parse_split(value).map_err(bad)?,
                "remote_fraction" => config.remote_fraction = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "worker_count" => config.worker_count = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "heartbeat_timeout_ms" => config.heartbeat_timeout_ms = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "compression" => config.compression = value.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?,
                "events_per_invfb" => config.events_per_invfb = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "data_dir" => config.data_dir = PathBuf::from(value),
                "catalog_dir" => config.catalog_dir = PathBuf::from(value),
                other => return Err(WorkflowError::Config(format!("line {line}: unknown key {other:?}"))),
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), WorkflowError> {
        if self.runs.is_empty() {
            return Err(WorkflowError::Config("run list is empty".into()));
        }
        if self.worker_count == 0 {
            return Err(WorkflowError::Config("worker_count must be ≥ 1".into()));
        }
        if self.events_per_run == 0 {
            return Err(WorkflowError::Config("events_per_run must be ≥ 1".into()));
        }
        for (name, v) in [
            ("raw_kb", self.raw_kb),
            ("dst_kb", self.dst_kb),
            ("mini_kb", self.mini_kb),
            ("multiplier", self.multiplier),
        ] {
            if !(v > 0.0) {
                return Err(WorkflowError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            experiment: self.experiment,
            raw_target_bytes: (self.raw_kb * 1024.0) as usize,
            background_rate: self.background_rate,
            ..GeneratorConfig::default()
        }
    }

    /// The standard reconstruction script at this config's size targets.
    pub fn reconstruction_script(&self) -> String {
        format!(
            "module unpack\nmodule calib gain=1.0\nmodule reco dst_kb={} mini_kb={}\n",
            self.dst_kb, self.mini_kb
        )
    }

    pub fn raw_path(&self, run: u32) -> PathBuf {
        self.data_dir.join(format!("raw/run-{run:05}.bevf"))
    }

    pub fn dst_path(&self, run: u32) -> PathBuf {
        self.data_dir.join(format!("dst/run-{run:05}.bevf"))
    }

    pub fn skim_path(&self, run: u32, skim: &str) -> PathBuf {
        self.data_dir.join(format!("skim/{skim}-run-{run:05}.bevf"))
    }

    pub fn mini_path(&self, run: u32) -> PathBuf {
        self.data_dir.join(format!("mini/run-{run:05}.bevf"))
    }

    pub fn background_path(&self, run: u32) -> PathBuf {
        self.data_dir.join(format!("background/run-{run:05}.bevf"))
    }
}

fn parse_runs(value: &str) -> Result<Vec<u32>, String> {
    let mut runs = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        match part.split_once("..") {
            Some((lo, hi)) => {
                let lo: u32 = lo.trim().parse().map_err(|e| format!("{e}"))?;
                let hi: u32 = hi.trim().parse().map_err(|e| format!("{e}"))?;
                if hi < lo {
                    return Err(format!("empty range {part:?}"));
                }
                runs.extend(lo..=hi);
            }
            None => runs.push(part.parse().map_err(|e| format!("{e}"))?),
        }
    }
    if runs.is_empty() {
        return Err("no runs given".into());
    }
    Ok(runs)
}

fn parse_split(value: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three fractions, got {}", parts.len()));
    }
    let mut split = [0.0; 3];
    for (slot, part) in split.iter_mut().zip(parts) {
        *slot = part.parse().map_err(|e| format!("{e}"))?;
    }
    Ok(split)
}

/// Counters from one end-to-end campaign.
#[derive(Debug, Clone, Default)]
pub struct E2eReport {
    pub runs: u64,
    pub beam_events: u64,
    pub dst_events: u64,
    pub skim_accepted: BTreeMap<String, u64>,
    pub mini_events: u64,
    pub mc_files: u64,
    pub mc_events: u64,
    pub remote_requests: u64,
    pub total_requests: u64,
    pub workers_died: u64,
}

impl E2eReport {
    pub fn mc_over_beam(&self) -> f64 {
        if self.beam_events == 0 {
            0.0
        } else {
            self.mc_events as f64 / self.beam_events as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "runs={}", self.runs);
        let _ = writeln!(out, "beam_events={}", self.beam_events);
        let _ = writeln!(out, "dst_events={}", self.dst_events);
        for (name, accepted) in &self.skim_accepted {
            let _ = writeln!(out, "skim.{name}.accepted={accepted}");
        }
        let _ = writeln!(out, "mini_events={}", self.mini_events);
        let _ = writeln!(out, "mc_files={}", self.mc_files);
        let _ = writeln!(out, "mc_events={}", self.mc_events);
        let _ = writeln!(out, "mc_over_beam={:.4}", self.mc_over_beam());
        let _ = writeln!(out, "remote_requests={}", self.remote_requests);
        let _ = writeln!(out, "total_requests={}", self.total_requests);
        let _ = writeln!(out, "workers_died={}", self.workers_died);
        out
    }
}

/// Generates the per-run raw files and registers them.
pub fn gen_stage(
    config: &WorkflowConfig,
    catalog: &mut CatalogServer,
) -> Result<u64, WorkflowError> {
    std::fs::create_dir_all(config.data_dir.join("raw"))?;
    let gen_cfg = config.generator_config();
    let stream = stream_seed(config.seed, "generator");
    let mut total = 0;
    for &run in &config.runs {
        let path = config.raw_path(run);
        total += generate_run_file(&gen_cfg, stream, run, config.events_per_run, &path, config.compression)
            .map_err(stage_err("gen"))?;
        catalog
            .register_event_file(format!("raw/run-{run:05}"), &path, "KEK")
            .map_err(stage_err("gen"))?;
    }
    Ok(total)
}

/// Distributed reconstruction of every raw file into its processed file.
pub fn produce_stage(
    config: &WorkflowConfig,
    kill_plan: &[KillPoint],
    registry: &std::sync::Arc<crate::pipeline::ModuleRegistry>,
    catalog: &mut CatalogServer,
) -> Result<(u64, u64), WorkflowError> {
    std::fs::create_dir_all(config.data_dir.join("dst"))?;
    let mut dst_events = 0;
    let mut workers_died = 0;
    for &run in &config.runs {
        let mut job = ProductionJob::new(
            config.raw_path(run),
            config.dst_path(run),
            config.reconstruction_script(),
        );
        job.worker_count = config.worker_count;
        job.compression = config.compression;
        job.heartbeat_timeout = Duration::from_millis(config.heartbeat_timeout_ms);
        job.heartbeat_interval = Duration::from_millis((config.heartbeat_timeout_ms / 8).max(10));
        job.kill_plan = kill_plan.to_vec();
        let report = run_production(&job, registry).map_err(stage_err("produce"))?;
        dst_events += report.delivered;
        workers_died += u64::from(report.workers_died);
        catalog
            .register_event_file(format!("dst/run-{run:05}"), config.dst_path(run), "KEK")
            .map_err(stage_err("produce"))?;
    }
    Ok((dst_events, workers_died))
}

/// Skims every processed file and writes its compact form.
pub fn skim_stage(
    config: &WorkflowConfig,
    catalog: &mut CatalogServer,
) -> Result<(BTreeMap<String, u64>, u64), WorkflowError> {
    std::fs::create_dir_all(config.data_dir.join("skim"))?;
    std::fs::create_dir_all(config.data_dir.join("mini"))?;
    let mut accepted: BTreeMap<String, u64> = BTreeMap::new();
    let mut mini_events = 0;
    for &run in &config.runs {
        let defs: Vec<SkimDef> = DEFAULT_SKIMS
            .iter()
            .map(|(name, expr)| {
                Predicate::parse(expr).map(|p| SkimDef::new(*name, p, config.skim_path(run, name)))
            })
            .collect::<Result<_, _>>()
            .map_err(stage_err("skim"))?;
        let report = run_skims(config.dst_path(run), &defs, config.compression).map_err(stage_err("skim"))?;
        for (def, count) in defs.iter().zip(&report.accepted) {
            *accepted.entry(def.name.clone()).or_default() += count;
            catalog
                .register_event_file(
                    format!("skim/{}-run-{run:05}", def.name),
                    &def.output,
                    "KEK",
                )
                .map_err(stage_err("skim"))?;
        }
        mini_events +=
            write_minidst_file(config.dst_path(run), config.mini_path(run), &DEFAULT_MINIDST_KEEP, config.compression)
                .map_err(stage_err("skim"))?;
        catalog
            .register_event_file(format!("mini/run-{run:05}"), config.mini_path(run), "KEK")
            .map_err(stage_err("skim"))?;
    }
    Ok((accepted, mini_events))
}

/// Derives conditions, harvests background, schedules and runs generation.
pub fn mc_stage(
    config: &WorkflowConfig,
    registry: &crate::pipeline::ModuleRegistry,
    catalog: &mut CatalogServer,
) -> Result<(u64, u64, u64, u64), WorkflowError> {
    std::fs::create_dir_all(config.data_dir.join("background"))?;
    let mut library = BackgroundLibrary::new();
    let mut conditions: BTreeMap<u32, RunConditions> = BTreeMap::new();
    let mut beam_runs = Vec::new();
    for &run in &config.runs {
        let raw = config.raw_path(run);
        let bg = config.background_path(run);
        harvest_background(&raw, &bg, config.compression).map_err(stage_err("mc"))?;
        library.load_file(&bg).map_err(stage_err("mc"))?;
        catalog
            .register_event_file(format!("background/run-{run:05}"), &bg, "KEK")
            .map_err(stage_err("mc"))?;
        let cond = derive_run_conditions(&raw).map_err(stage_err("mc"))?;
        conditions.insert(run, cond);
        let header = crate::event::read_file_header(&raw).map_err(stage_err("mc"))?;
        beam_runs.push((run, header.event_count));
    }

    let requests = schedule_mc(&beam_runs, config.multiplier, config.split, config.remote_fraction)
        .map_err(stage_err("mc"))?;
    std::fs::create_dir_all(config.data_dir.join("mc"))?;
    write_request_file(&requests, config.data_dir.join("mc/requests.txt")).map_err(stage_err("mc"))?;

    let mut mc_config = McProductionConfig::new(
        config.seed,
        config.experiment,
        config.data_dir.join("mc"),
        config.data_dir.join("remote"),
    );
    mc_config.compression = config.compression;
    let report = run_mc_production(&requests, &library, &conditions, &mut mc_config, registry, catalog)
        .map_err(stage_err("mc"))?;
    let remote = requests.iter().filter(|r| r.site == Site::Remote).count() as u64;
    Ok((
        report.files_written,
        report.events_written,
        remote,
        requests.len() as u64,
    ))
}

/// Runs the full campaign and verifies its closing invariants.
pub fn e2e(config: &WorkflowConfig, kill_plan: &[KillPoint]) -> Result<E2eReport, WorkflowError> {
    config.validate()?;
    let registry = std::sync::Arc::new(crate::pipeline::ModuleRegistry::with_builtins());
    let mut catalog = CatalogServer::open(&config.catalog_dir, ServerRole::Primary)
        .map_err(stage_err("catalog"))?;

    let mut report = E2eReport {
        runs: config.runs.len() as u64,
        ..E2eReport::default()
    };
    report.beam_events = gen_stage(config, &mut catalog)?;
    let (dst_events, workers_died) = produce_stage(config, kill_plan, &registry, &mut catalog)?;
    report.dst_events = dst_events;
    report.workers_died = workers_died;
    let (accepted, mini_events) = skim_stage(config, &mut catalog)?;
    report.skim_accepted = accepted;
    report.mini_events = mini_events;
    let (mc_files, mc_events, remote, total_requests) = mc_stage(config, &registry, &mut catalog)?;
    report.mc_files = mc_files;
    report.mc_events = mc_events;
    report.remote_requests = remote;
    report.total_requests = total_requests;
    catalog.compact().map_err(stage_err("catalog"))?;

    // Closing invariants.
    let dst_count = catalog
        .query(&QueryFilter {
            file_type: Some(FileType::Dst),
            ..QueryFilter::default()
        })
        .len() as u64;
    if dst_count != report.runs {
        return Err(WorkflowError::InvariantViolation(format!(
            "{dst_count} processed files for {} runs",
            report.runs
        )));
    }
    if report.mc_files != report.total_requests {
        return Err(WorkflowError::InvariantViolation(format!(
            "{} generated files for {} requests",
            report.mc_files, report.total_requests
        )));
    }
    let expected_mc: u64 = config
        .runs
        .iter()
        .map(|_| (config.multiplier * config.events_per_run as f64).round() as u64)
        .sum();
    if report.mc_events != expected_mc {
        return Err(WorkflowError::InvariantViolation(format!(
            "{} generated events, scheduler promised {expected_mc}",
            report.mc_events
        )));
    }
    verify_catalog_closure(&config.data_dir, &catalog)?;

    std::fs::create_dir_all(config.data_dir.join("reports"))?;
    std::fs::write(config.data_dir.join("reports/e2e.txt"), report.to_text())?;
    Ok(report)
}

/// Every event file on disk is registered, and every online replica's path
/// exists on disk.
pub fn verify_catalog_closure(
    data_dir: &Path,
    catalog: &CatalogServer,
) -> Result<(), WorkflowError> {
    let mut on_disk = Vec::new();
    collect_event_files(data_dir, &mut on_disk)?;
    let files = catalog.query(&QueryFilter::default());
    for path in &on_disk {
        let wanted = path.to_string_lossy();
        let registered = files
            .iter()
            .any(|f| catalog.replicas_of(&f.logical_name).iter().any(|r| r.physical_path == wanted));
        if !registered {
            return Err(WorkflowError::InvariantViolation(format!(
                "{} exists on disk but is not catalogued",
                path.display()
            )));
        }
    }
    for file in &files {
        for replica in catalog.replicas_of(&file.logical_name) {
            if replica.status == ReplicaStatus::Online
                && !Path::new(&replica.physical_path).exists()
            {
                return Err(WorkflowError::InvariantViolation(format!(
                    "online replica {} of {} is missing on disk",
                    replica.physical_path, file.logical_name
                )));
            }
        }
    }
    Ok(())
}

fn collect_event_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), WorkflowError> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_event_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "bevf") {
            out.push(path);
        }
    }
    Ok(())
}

/// Combined crc32 over every data file (reports excluded), used for
/// determinism comparisons across campaigns.
pub fn hash_data_dir(data_dir: &Path) -> Result<String, WorkflowError> {
    let mut files = Vec::new();
    collect_all_files(data_dir, &mut files)?;
    files.retain(|p| !p.starts_with(data_dir.join("reports")));
    files.sort();
    let mut hasher = crc32fast::Hasher::new();
    for path in files {
        let relative = path.strip_prefix(data_dir).unwrap_or(&path);
        hasher.update(relative.to_string_lossy().as_bytes());
        hasher.update(&std::fs::read(&path)?);
    }
    Ok(format!("{:08x}", hasher.finalize()))
}

fn collect_all_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), WorkflowError> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_all_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
