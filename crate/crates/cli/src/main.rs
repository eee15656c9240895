//! `bfp` — batch front-end tying the whole offline chain together:
//! generate → produce → skim → mc → catalog → plan, plus the end-to-end
//! campaign driver with deterministic seeds and fault-injection hooks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bfp_core::catalog::{
    backup_snapshot, mirror, restore_snapshot, CatalogServer, QueryFilter, Replica, ServerRole,
};
use bfp_core::event::{read_file_header, FileType};
use bfp_core::farm::{
    aggregate_capacity, calibrate, campaign_report, load_inventory, parse_campaign_log,
    predict_rate, FarmConfig, NodeSpec,
};
use bfp_core::mc::{
    derive_run_conditions, harvest_background, parse_request_file, run_mc_production, schedule_mc,
    write_request_file, BackgroundLibrary, McProductionConfig, RunConditions,
};
use bfp_core::pipeline::{build_path, run_path_over_file, ModuleRegistry};
use bfp_core::production::{run_production, KillPoint, ProductionError, ProductionJob};
use bfp_core::skim::{run_skims, write_minidst_file, SkimDef, DEFAULT_MINIDST_KEEP};
use bfp_core::workflow::{e2e, gen_stage, WorkflowConfig, WorkflowError};

#[derive(Parser)]
#[command(name = "bfp", version, about = "Offline event-data production toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic per-run raw files and register them.
    Gen(GenArgs),
    /// Run a module path over one event file, single-threaded.
    Run(RunArgs),
    /// Distributed reconstruction of a raw file into a processed file.
    Produce(ProduceArgs),
    /// Stream a processed file through named selections.
    Skim(SkimArgs),
    /// Monte Carlo scheduling and generation.
    #[command(subcommand)]
    Mc(McCommand),
    /// Metadata catalog operations.
    #[command(subcommand)]
    Catalog(CatalogCommand),
    /// Farm capacity aggregation and throughput prediction.
    Plan(PlanArgs),
    /// Full campaign: gen → produce → skim → mc, all catalogued.
    E2e(E2eArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Workflow config file (key = value lines); defaults apply if absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the run list, e.g. `1..20` or `1,3,7`.
    #[arg(long)]
    runs: Option<String>,
    /// Override events per run.
    #[arg(long)]
    events_per_run: Option<u64>,
    /// Override the worker count.
    #[arg(long)]
    workers: Option<u32>,
    /// Override the data directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Override the catalog directory.
    #[arg(long)]
    catalog_dir: Option<PathBuf>,
    /// Override the remote fraction.
    #[arg(long)]
    remote_fraction: Option<f64>,
    /// Override the statistics multiplier.
    #[arg(long)]
    multiplier: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<WorkflowConfig> {
        let mut config = match &self.config {
            Some(path) => WorkflowConfig::parse(
                &std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?,
            )?,
            None => WorkflowConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(runs) = &self.runs {
            config.runs = WorkflowConfig::parse(&format!("runs = {runs}"))?.runs;
        }
        if let Some(n) = self.events_per_run {
            config.events_per_run = n;
        }
        if let Some(n) = self.workers {
            config.worker_count = n;
        }
        if let Some(dir) = &self.data_dir {
            config.data_dir = dir.clone();
        }
        if let Some(dir) = &self.catalog_dir {
            config.catalog_dir = dir.clone();
        }
        if let Some(f) = self.remote_fraction {
            config.remote_fraction = f;
        }
        if let Some(m) = self.multiplier {
            config.multiplier = m;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RunArgs {
    /// Path script file.
    #[arg(long)]
    script: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// Output file type (defaults to the input's).
    #[arg(long)]
    out_type: Option<String>,
    #[arg(long)]
    no_compress: bool,
}

#[derive(Args)]
struct ProduceArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// Path script file.
    #[arg(long)]
    script: PathBuf,
    #[arg(long, default_value_t = 4)]
    workers: u32,
    /// Per-worker in-flight window.
    #[arg(long, default_value_t = 4)]
    credit: usize,
    /// Reorder buffer capacity (defaults to workers × credit).
    #[arg(long)]
    reorder_capacity: Option<usize>,
    #[arg(long, default_value_t = 5000)]
    heartbeat_timeout_ms: u64,
    /// Fault injection: kill WORKER after it receives its Nth event
    /// (`WORKER@N`, repeatable).
    #[arg(long = "kill-worker")]
    kill_worker: Vec<String>,
    #[arg(long)]
    no_compress: bool,
    /// Write the per-worker report rows to this CSV file.
    #[arg(long)]
    report_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SkimArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Selection in `name=EXPR:OUT` form (repeatable).
    #[arg(long = "skim")]
    skims: Vec<String>,
    /// Also reduce every input event into this compact-format file.
    #[arg(long)]
    mini_out: Option<PathBuf>,
    #[arg(long)]
    no_compress: bool,
}

#[derive(Subcommand)]
enum McCommand {
    /// Build the request list from a directory of beam run files.
    Schedule(McScheduleArgs),
    /// Extract per-run background libraries from beam run files.
    Harvest(McHarvestArgs),
    /// Generate, overlay and register the requests of a request file.
    Run(McRunArgs),
}

#[derive(Args)]
struct McScheduleArgs {
    /// Directory of beam run files (*.bevf).
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    multiplier: f64,
    /// Three comma-separated sample fractions.
    #[arg(long, default_value = "0.25,0.25,0.5")]
    split: String,
    #[arg(long, default_value_t = 0.25)]
    remote_fraction: f64,
    /// Request file to write.
    #[arg(long = "out")]
    output: PathBuf,
}

#[derive(Args)]
struct McHarvestArgs {
    /// Directory of beam run files (*.bevf).
    #[arg(long)]
    runs: PathBuf,
    /// Directory the background files land in.
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long)]
    no_compress: bool,
}

#[derive(Args)]
struct McRunArgs {
    /// Request file from `mc schedule`.
    #[arg(long)]
    request: PathBuf,
    /// Directory of beam run files, for run conditions.
    #[arg(long)]
    runs: PathBuf,
    /// Directory of harvested background files.
    #[arg(long)]
    background: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Home-site output directory.
    #[arg(long)]
    mc_dir: PathBuf,
    /// Remote-site staging directory.
    #[arg(long)]
    remote_dir: PathBuf,
    /// Catalog store directory for registrations.
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    no_compress: bool,
}

#[derive(Subcommand)]
enum CatalogCommand {
    /// Register one event file.
    Register {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        path: PathBuf,
        #[arg(long, default_value = "KEK")]
        site: String,
    },
    /// Query logical files; results print as TSV.
    Query {
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Resolve one online physical path per matching logical file.
    Resolve {
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Move a replica to a new verified physical copy.
    Move {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to_path: String,
        #[arg(long, default_value = "KEK")]
        to_site: String,
    },
    /// Mirror the primary store onto the secondary.
    Mirror {
        #[arg(long)]
        primary: PathBuf,
        #[arg(long)]
        secondary: PathBuf,
    },
    /// Archive a store into a tar snapshot.
    Backup {
        #[arg(long)]
        store: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Restore a snapshot into a (fresh) store directory.
    Restore {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long = "type")]
    file_type: Option<String>,
    #[arg(long)]
    run_min: Option<u32>,
    #[arg(long)]
    run_max: Option<u32>,
    #[arg(long)]
    stream: Option<String>,
    #[arg(long)]
    experiment: Option<u32>,
}

impl FilterArgs {
    fn build(&self) -> Result<QueryFilter> {
        let file_type = match &self.file_type {
            Some(t) => Some(FileType::parse(t).with_context(|| format!("unknown file type {t:?}"))?),
            None => None,
        };
        let run_range = match (self.run_min, self.run_max) {
            (None, None) => None,
            (lo, hi) => Some((lo.unwrap_or(0), hi.unwrap_or(u32::MAX))),
        };
        Ok(QueryFilter {
            file_type,
            run_range,
            stream_label: self.stream.clone(),
            experiment: self.experiment,
        })
    }
}

#[derive(Args)]
struct PlanArgs {
    /// Inventory TSV file.
    #[arg(long)]
    inventory: PathBuf,
    /// Calibration anchor, `GHZxCPUSxNODES@RATE` (e.g. `0.7x4x40@1.0`).
    #[arg(long)]
    anchor: Option<String>,
    /// Campaign log to fold into a cumulative CSV.
    #[arg(long)]
    campaign: Option<PathBuf>,
    /// Where to write the campaign CSV (stdout if absent).
    #[arg(long)]
    campaign_out: Option<PathBuf>,
}

#[derive(Args)]
struct E2eArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Fault injection: kill WORKER after its Nth event (`WORKER@N`,
    /// repeatable; applies to every production job of the campaign).
    #[arg(long = "kill-worker")]
    kill_worker: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Produce(args) => cmd_produce(args),
        Command::Skim(args) => cmd_skim(args),
        Command::Mc(args) => cmd_mc(args),
        Command::Catalog(args) => cmd_catalog(args),
        Command::Plan(args) => cmd_plan(args),
        Command::E2e(args) => cmd_e2e(args),
    }
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    let config = args.config.resolve()?;
    let mut catalog = CatalogServer::open(&config.catalog_dir, ServerRole::Primary)?;
    let events = gen_stage(&config, &mut catalog)?;
    catalog.compact()?;
    println!("runs={}", config.runs.len());
    println!("events={events}");
    println!("catalog_files={}", catalog.file_count());
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let registry = ModuleRegistry::with_builtins();
    let script = std::fs::read_to_string(&args.script)
        .with_context(|| format!("reading {}", args.script.display()))?;
    let id = args
        .script
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "path".into());
    let path = build_path(&id, &script, &registry)?;
    let out_type = match &args.out_type {
        Some(t) => Some(FileType::parse(t).with_context(|| format!("unknown file type {t:?}"))?),
        None => None,
    };
    let stats = run_path_over_file(
        &path,
        &registry,
        &args.input,
        &args.output,
        out_type,
        !args.no_compress,
    )
    .map_err(|abort| anyhow::anyhow!("{abort}"))?;
    println!("events_seen={}", stats.events_seen);
    println!("events_delivered={}", stats.events_delivered);
    println!("events_skipped={}", stats.events_skipped);
    for (module, ms) in stats.module_cost_ms() {
        println!("module.{module}.cost_ms={ms:.3}");
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_kill_plan(flags: &[String]) -> Result<Vec<KillPoint>> {
    flags
        .iter()
        .map(|s| KillPoint::parse(s).map_err(|e| anyhow::anyhow!(e)))
        .collect()
}

fn cmd_produce(args: ProduceArgs) -> Result<ExitCode> {
    let script = std::fs::read_to_string(&args.script)
        .with_context(|| format!("reading {}", args.script.display()))?;
    let mut job = ProductionJob::new(&args.input, &args.output, script);
    job.worker_count = args.workers;
    job.credit = args.credit;
    job.reorder_capacity = args.reorder_capacity;
    job.heartbeat_timeout = Duration::from_millis(args.heartbeat_timeout_ms);
    job.heartbeat_interval = Duration::from_millis((args.heartbeat_timeout_ms / 8).max(10));
    job.compression = !args.no_compress;
    job.kill_plan = parse_kill_plan(&args.kill_worker)?;

    let registry = Arc::new(ModuleRegistry::with_builtins());
    match run_production(&job, &registry) {
        Ok(report) => {
            print!("{}", report.to_key_values());
            if let Some(csv) = &args.report_csv {
                std::fs::write(csv, report.to_csv())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ ProductionError::AllWorkersDead) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(3))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_skim(args: SkimArgs) -> Result<ExitCode> {
    if args.skims.is_empty() && args.mini_out.is_none() {
        bail!("nothing to do: give at least one --skim or --mini-out");
    }
    let defs: Vec<SkimDef> = args
        .skims
        .iter()
        .map(|s| SkimDef::parse_flag(s).map_err(|e| anyhow::anyhow!(e)))
        .collect::<Result<_>>()?;
    if !defs.is_empty() {
        let report = run_skims(&args.input, &defs, !args.no_compress)?;
        print!("{}", report.to_text());
    }
    if let Some(mini) = &args.mini_out {
        let written =
            write_minidst_file(&args.input, mini, &DEFAULT_MINIDST_KEEP, !args.no_compress)?;
        println!("mini_events={written}");
    }
    Ok(ExitCode::SUCCESS)
}

/// (run, event count) pairs from every event file in a directory.
fn scan_beam_dir(dir: &Path) -> Result<Vec<(u32, u64, PathBuf)>> {
    let mut runs = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "bevf") {
            let header = read_file_header(&path)?;
            runs.push((header.run, header.event_count, path));
        }
    }
    runs.sort();
    if runs.is_empty() {
        bail!("no event files in {}", dir.display());
    }
    Ok(runs)
}

fn cmd_mc(command: McCommand) -> Result<ExitCode> {
    match command {
        McCommand::Schedule(args) => {
            let beam: Vec<(u32, u64)> = scan_beam_dir(&args.runs)?
                .into_iter()
                .map(|(run, count, _)| (run, count))
                .collect();
            let split = parse_split_flag(&args.split)?;
            let requests = schedule_mc(&beam, args.multiplier, split, args.remote_fraction)?;
            write_request_file(&requests, &args.output)?;
            let total: u64 = requests.iter().map(|r| r.target_events).sum();
            println!("requests={}", requests.len());
            println!("target_events={total}");
            Ok(ExitCode::SUCCESS)
        }
        McCommand::Harvest(args) => {
            std::fs::create_dir_all(&args.output)?;
            let mut harvested = 0;
            for (run, _, path) in scan_beam_dir(&args.runs)? {
                let out = args.output.join(format!("run-{run:05}.bevf"));
                harvested += harvest_background(&path, &out, !args.no_compress)?;
            }
            println!("background_events={harvested}");
            Ok(ExitCode::SUCCESS)
        }
        McCommand::Run(args) => {
            let requests = parse_request_file(&args.request)?;
            let mut library = BackgroundLibrary::new();
            for entry in std::fs::read_dir(&args.background)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "bevf") {
                    library.load_file(&path)?;
                }
            }
            let mut conditions: BTreeMap<u32, RunConditions> = BTreeMap::new();
            let mut experiment = None;
            for (run, _, path) in scan_beam_dir(&args.runs)? {
                conditions.insert(run, derive_run_conditions(&path)?);
                experiment.get_or_insert(read_file_header(&path)?.experiment);
            }
            let mut mc_config = McProductionConfig::new(
                args.seed,
                experiment.unwrap_or(1),
                &args.mc_dir,
                &args.remote_dir,
            );
            mc_config.compression = !args.no_compress;
            let registry = ModuleRegistry::with_builtins();
            let mut catalog = CatalogServer::open(&args.catalog, ServerRole::Primary)?;
            let report = run_mc_production(
                &requests,
                &library,
                &conditions,
                &mut mc_config,
                &registry,
                &mut catalog,
            )?;
            catalog.compact()?;
            println!("files_written={}", report.files_written);
            println!("events_written={}", report.events_written);
            println!("remote_transfers={}", report.remote_transfers);
            println!("retried_transfers={}", report.retried_transfers);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_split_flag(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("expected three comma-separated fractions, got {s:?}");
    }
    let mut split = [0.0; 3];
    for (slot, part) in split.iter_mut().zip(parts) {
        *slot = part.parse().with_context(|| format!("bad fraction {part:?}"))?;
    }
    Ok(split)
}

fn cmd_catalog(command: CatalogCommand) -> Result<ExitCode> {
    match command {
        CatalogCommand::Register { store, name, path, site } => {
            let mut server = CatalogServer::open(&store, ServerRole::Primary)?;
            server.register_event_file(&name, &path, site)?;
            server.compact()?;
            println!("registered={name}");
            println!("generation={}", server.generation());
        }
        CatalogCommand::Query { store, filter } => {
            let server = CatalogServer::open(&store, ServerRole::Primary)?;
            println!("logical_name\tfile_type\texperiment\trun\tstream\tevent_count\tchecksum");
            for f in server.query(&filter.build()?) {
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{:08x}",
                    f.logical_name, f.file_type, f.experiment, f.run, f.stream_label, f.event_count, f.checksum
                );
            }
        }
        CatalogCommand::Resolve { store, filter } => {
            let server = CatalogServer::open(&store, ServerRole::Primary)?;
            println!("logical_name\tphysical_path");
            for (name, path) in server.resolve_for_job(&filter.build()?)? {
                println!("{name}\t{path}");
            }
        }
        CatalogCommand::Move { store, name, from, to_path, to_site } => {
            let mut server = CatalogServer::open(&store, ServerRole::Primary)?;
            server.move_replica(&name, &from, Replica::online(&name, to_site, to_path))?;
            server.compact()?;
            println!("moved={name}");
            println!("generation={}", server.generation());
        }
        CatalogCommand::Mirror { primary, secondary } => {
            let primary = CatalogServer::open(&primary, ServerRole::Primary)?;
            let mut secondary = CatalogServer::open(&secondary, ServerRole::Secondary)?;
            let generation = mirror(&primary, &mut secondary)?;
            println!("mirrored_generation={generation}");
        }
        CatalogCommand::Backup { store, output } => {
            let server = CatalogServer::open(&store, ServerRole::Primary)?;
            let generation = backup_snapshot(&server, &output)?;
            println!("snapshot_generation={generation}");
        }
        CatalogCommand::Restore { archive, store } => {
            let server = restore_snapshot(&archive, Some(&store))?;
            println!("restored_generation={}", server.generation());
            println!("files={}", server.file_count());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_anchor(s: &str) -> Result<(FarmConfig, f64)> {
    let (spec, rate) = s
        .split_once('@')
        .with_context(|| format!("expected GHZxCPUSxNODES@RATE, got {s:?}"))?;
    let parts: Vec<&str> = spec.split('x').collect();
    if parts.len() != 3 {
        bail!("expected GHZxCPUSxNODES, got {spec:?}");
    }
    let ghz: f64 = parts[0].parse().context("bad clock")?;
    let cpus: u32 = parts[1].parse().context("bad cpu count")?;
    let nodes: u32 = parts[2].parse().context("bad node count")?;
    let rate: f64 = rate.parse().context("bad rate")?;
    let config = FarmConfig::new(
        "anchor",
        vec![NodeSpec::new("anchor", "anchor", ghz, cpus, nodes).map_err(|e| anyhow::anyhow!(e))?],
    );
    Ok((config, rate))
}

fn cmd_plan(args: PlanArgs) -> Result<ExitCode> {
    let farm = load_inventory(&args.inventory)?;
    println!("vendor\tprocessor\tclock_ghz\tcpus_per_node\tnode_count\ttotal_ghz");
    for node in &farm.nodes {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            node.vendor,
            node.processor,
            node.clock_ghz(),
            node.cpus_per_node,
            node.node_count,
            node.reported_ghz()
        );
    }
    println!("total_nodes={}", farm.total_nodes());
    println!("total_cpus={}", farm.total_cpus());
    println!("total_ghz={}", farm.reported_total_ghz());
    println!("capacity_ghz={}", aggregate_capacity(&farm));

    if let Some(anchor) = &args.anchor {
        let (anchor_farm, rate) = parse_anchor(anchor)?;
        let cost = calibrate(&anchor_farm, rate)?;
        println!("anchor_capacity_ghz={}", aggregate_capacity(&anchor_farm));
        println!("ghz_days_per_invfb={}", cost.ghz_days_per_invfb());
        println!("predicted_rate_invfb_per_day={}", predict_rate(&farm, &cost)?);
    }
    if let Some(campaign) = &args.campaign {
        let entries = parse_campaign_log(&std::fs::read_to_string(campaign)?)?;
        let report = campaign_report(&entries);
        match &args.campaign_out {
            Some(path) => std::fs::write(path, report.to_csv())?,
            None => print!("{}", report.to_csv()),
        }
        println!("campaign_final={}", report.final_cumulative());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_e2e(args: E2eArgs) -> Result<ExitCode> {
    // Campaigns must be reproducible, so the seed is never implicit here.
    if args.config.seed.is_none() {
        bail!("--seed is required for e2e");
    }
    let config = args.config.resolve()?;
    let kill_plan = parse_kill_plan(&args.kill_worker)?;
    match e2e(&config, &kill_plan) {
        Ok(report) => {
            print!("{}", report.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ WorkflowError::InvariantViolation(_)) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(2))
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(3))
        }
    }
}
