//! Distributed reconstruction over one input file.
//!
//! One master owns the input reader, the output writer and the scheduling
//! state; workers run the processing path over whatever events they are
//! handed and mail the results back. Frames travel over the in-process
//! loopback transport using the normative wire format, so everything the
//! protocol does — hello, credit assignment, results, heartbeats, retirement,
//! aborts — is exercised on every run.
//!
//! The output is order-preserving and byte-identical to a single-worker run
//! of the same job, whatever the worker count or fault schedule, as long as
//! at least one worker survives. Workers are crash-stop: a dead worker's
//! in-flight events are reassigned, and duplicated results after a
//! false-positive death are dropped by sequence number.

pub mod scheduler;

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

/// Flips the flag when dropped, so every worker exit path stops the
/// heartbeat thread — including the simulated crashes.
struct StopOnDrop(Arc<AtomicBool>);

impl Drop for StopOnDrop {
    fn drop(&mut self) {
        self.0.store(true, Ordering::Relaxed);
    }
}

use thiserror::Error;

use crate::event::{
    deserialize_event, serialize_event, EventError, EventFileHeader, EventFileReader,
    EventFileWriter, FileType,
};
use crate::pipeline::{build_path, ActivePath, ModuleRegistry, Path, PipelineError};
use crate::wire::{Frame, FrameType, WireEndpoint, WireError};

use scheduler::{Action, Scheduler, WorkerStatus};

#[derive(Debug, Error)]
pub enum ProductionError {
    #[error("input corrupt: {0}")]
    InputCorrupt(EventError),
    #[error("all workers dead with work remaining")]
    AllWorkersDead,
    #[error("worker {worker}: {message}")]
    ModuleError { worker: u32, message: String },
    #[error("reorder capacity {capacity} is below worker_count × credit = {required}")]
    ReorderOverflow { capacity: usize, required: usize },
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error(transparent)]
    Script(#[from] PipelineError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Fault-injection hook: worker `worker` exits, without a word, the moment
/// it receives its `after_events`-th event frame (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KillPoint {
    pub worker: u32,
    pub after_events: u64,
}

impl KillPoint {
    /// Parses the `WORKER@EVENT` flag form.
    pub fn parse(s: &str) -> Result<Self, String> {
        let (w, e) = s
            .split_once('@')
            .ok_or_else(|| format!("expected WORKER@EVENT, got {s:?}"))?;
        Ok(Self {
            worker: w.trim().parse().map_err(|e| format!("bad worker id: {e}"))?,
            after_events: e.trim().parse().map_err(|e| format!("bad event count: {e}"))?,
        })
    }
}

/// Everything one distributed reconstruction job needs.
#[derive(Debug, Clone)]
pub struct ProductionJob {
    pub input: PathBuf,
    pub output: PathBuf,
    pub script: String,
    pub worker_count: u32,
    /// Per-worker in-flight window.
    pub credit: usize,
    /// Reorder buffer capacity; defaults to `worker_count × credit`.
    pub reorder_capacity: Option<usize>,
    pub heartbeat_timeout: Duration,
    pub heartbeat_interval: Duration,
    pub compression: bool,
    pub kill_plan: Vec<KillPoint>,
}

impl ProductionJob {
    pub fn new(
        input: impl Into<PathBuf>,
        output: impl Into<PathBuf>,
        script: impl Into<String>,
    ) -> Self {
        Self {
            input: input.into(),
            output: output.into(),
            script: script.into(),
            worker_count: 4,
            credit: 4,
            reorder_capacity: None,
            heartbeat_timeout: Duration::from_secs(5),
            heartbeat_interval: Duration::from_millis(500),
            compression: true,
            kill_plan: Vec::new(),
        }
    }

    pub fn with_workers(mut self, n: u32) -> Self {
        self.worker_count = n;
        self
    }

    fn capacity(&self) -> usize {
        self.reorder_capacity
            .unwrap_or(self.worker_count as usize * self.credit)
    }
}

#[derive(Debug, Clone)]
pub struct WorkerReport {
    pub worker_id: u32,
    pub processed: u64,
    pub status: &'static str,
}

#[derive(Debug, Clone)]
pub struct ProductionReport {
    pub input_events: u64,
    pub delivered: u64,
    pub skipped: u64,
    pub workers: Vec<WorkerReport>,
    pub workers_died: u32,
    pub wall: Duration,
}

impl ProductionReport {
    pub fn events_per_sec(&self) -> f64 {
        let secs = self.wall.as_secs_f64();
        if secs > 0.0 {
            self.delivered as f64 / secs
        } else {
            0.0
        }
    }

    /// Key=value block for logs and humans.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("input_events={}\n", self.input_events));
        out.push_str(&format!("delivered={}\n", self.delivered));
        out.push_str(&format!("skipped={}\n", self.skipped));
        out.push_str(&format!("workers={}\n", self.workers.len()));
        out.push_str(&format!("workers_died={}\n", self.workers_died));
        out.push_str(&format!("wall_ms={}\n", self.wall.as_millis()));
        out.push_str(&format!("events_per_sec={:.2}\n", self.events_per_sec()));
        out
    }

    /// Machine-readable per-worker rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("worker_id,processed,status\n");
        for w in &self.workers {
            out.push_str(&format!("{},{},{}\n", w.worker_id, w.processed, w.status));
        }
        out
    }
}

/// Runs the full master/worker job; see the module docs for the contract.
pub fn run_production(
    job: &ProductionJob,
    registry: &Arc<ModuleRegistry>,
) -> Result<ProductionReport, ProductionError> {
    if job.worker_count == 0 {
        return Err(ProductionError::InvalidJob("worker_count must be ≥ 1".into()));
    }
    if job.credit == 0 {
        return Err(ProductionError::InvalidJob("credit must be ≥ 1".into()));
    }
    let required = job.worker_count as usize * job.credit;
    if job.capacity() < required {
        return Err(ProductionError::ReorderOverflow {
            capacity: job.capacity(),
            required,
        });
    }
    let path = build_path("production", &job.script, registry)?;

    let mut reader = EventFileReader::open(&job.input).map_err(ProductionError::InputCorrupt)?;
    if reader.header().file_type != FileType::Raw {
        return Err(ProductionError::InvalidJob(format!(
            "input must be RAW, found {}",
            reader.header().file_type
        )));
    }
    let in_header = reader.header().clone();
    let out_header = EventFileHeader::new(
        FileType::Dst,
        in_header.experiment,
        in_header.run,
        in_header.stream_label.clone(),
    );
    let mut writer = EventFileWriter::create(&job.output, out_header, job.compression)?;

    let started = Instant::now();
    let now_ms = move || started.elapsed().as_millis() as u64;
    let timeout_ms = job.heartbeat_timeout.as_millis() as u64;
    let check_interval = (job.heartbeat_timeout / 8)
        .max(Duration::from_millis(2))
        .min(Duration::from_millis(250));

    // Spawn the farm. Worker→master traffic aggregates onto one channel;
    // each worker has a private inbox.
    let (agg_tx, agg_rx): (Sender<Vec<u8>>, Receiver<Vec<u8>>) = mpsc::channel();
    let mut inboxes: BTreeMap<u32, Sender<Vec<u8>>> = BTreeMap::new();
    let mut handles = Vec::new();
    for worker_id in 0..job.worker_count {
        let (inbox_tx, inbox_rx) = mpsc::channel();
        inboxes.insert(worker_id, inbox_tx);
        let endpoint = WireEndpoint::from_parts(agg_tx.clone(), inbox_rx);
        let config = WorkerConfig {
            worker_id,
            path: path.clone(),
            registry: Arc::clone(registry),
            compression: job.compression,
            heartbeat_interval: job.heartbeat_interval,
            kill_after: job
                .kill_plan
                .iter()
                .filter(|k| k.worker == worker_id)
                .map(|k| k.after_events)
                .min(),
        };
        handles.push(thread::spawn(move || worker_loop(config, endpoint)));
    }
    drop(agg_tx);

    let mut sched = Scheduler::new(0..job.worker_count, job.credit, job.capacity(), now_ms());
    let outcome = master_loop(
        &mut reader, &mut writer, &mut sched, &agg_rx, &inboxes, &now_ms, timeout_ms,
        check_interval,
    );

    if outcome.is_err() {
        broadcast_abort(&inboxes);
    }
    drop(inboxes);
    for handle in handles {
        if handle.join().is_err() {
            log::error!("worker thread panicked");
        }
    }
    outcome?;

    writer.close()?;
    let workers = sched
        .workers()
        .iter()
        .map(|(id, w)| WorkerReport {
            worker_id: *id,
            processed: w.processed,
            status: match w.status {
                WorkerStatus::Live => "live",
                WorkerStatus::Dead => "dead",
                WorkerStatus::Retired => "retired",
            },
        })
        .collect::<Vec<_>>();
    let workers_died = workers.iter().filter(|w| w.status == "dead").count() as u32;
    Ok(ProductionReport {
        input_events: sched.delivered() + sched.skipped(),
        delivered: sched.delivered(),
        skipped: sched.skipped(),
        workers,
        workers_died,
        wall: started.elapsed(),
    })
}

#[allow(clippy::too_many_arguments)]
fn master_loop(
    reader: &mut EventFileReader,
    writer: &mut EventFileWriter,
    sched: &mut Scheduler,
    agg_rx: &Receiver<Vec<u8>>,
    inboxes: &BTreeMap<u32, Sender<Vec<u8>>>,
    now_ms: &impl Fn() -> u64,
    timeout_ms: u64,
    check_interval: Duration,
) -> Result<(), ProductionError> {
    let mut pending: VecDeque<Action> = VecDeque::new();
    loop {
        // Keep the reader ahead of the free credit, inside the window.
        while sched.needs_fresh() {
            match reader.next_record_bytes() {
                Ok(Some(bytes)) => {
                    sched.push_fresh(bytes);
                }
                Ok(None) => {
                    sched.mark_exhausted();
                    break;
                }
                Err(e) => return Err(ProductionError::InputCorrupt(e)),
            }
        }
        pending.extend(sched.poll());

        // Carry out scheduler decisions. A failed send means the worker's
        // inbox is gone — it crashed; fold that back in as a death.
        while let Some(action) = pending.pop_front() {
            match action {
                Action::Assign { worker, seq, payload } => {
                    let frame = Frame::new(FrameType::Event, worker, seq, payload);
                    if inboxes[&worker].send(frame.encode()).is_err() {
                        log::info!("worker {worker} unreachable during assign");
                        pending.extend(sched.on_worker_dead(worker));
                    }
                }
                Action::SendEof { worker } => {
                    let frame = Frame::control(FrameType::Eof, worker, 0);
                    if inboxes[&worker].send(frame.encode()).is_err() {
                        pending.extend(sched.on_worker_dead(worker));
                    }
                }
                Action::Deliver { result, .. } => {
                    if let Some(bytes) = result {
                        writer.append_serialized(&bytes)?;
                    }
                }
            }
        }

        if sched.is_done() {
            return Ok(());
        }
        if sched.is_stuck() {
            return Err(ProductionError::AllWorkersDead);
        }

        match agg_rx.recv_timeout(check_interval) {
            Ok(bytes) => {
                let frame = match Frame::decode(&bytes) {
                    Ok(f) => f,
                    Err(e) => {
                        log::warn!("dropping undecodable frame: {e}");
                        continue;
                    }
                };
                match frame.production_type() {
                    Ok(FrameType::Hello) => pending.extend(sched.on_hello(frame.worker_id, now_ms())),
                    Ok(FrameType::Heartbeat) => sched.on_heartbeat(frame.worker_id, now_ms()),
                    Ok(FrameType::Result) => {
                        let result = (!frame.payload.is_empty()).then_some(frame.payload);
                        pending.extend(sched.on_result(frame.worker_id, frame.sequence, result, now_ms()));
                    }
                    Ok(FrameType::Retire) => sched.on_retire(frame.worker_id),
                    Ok(FrameType::Abort) => {
                        return Err(ProductionError::ModuleError {
                            worker: frame.worker_id,
                            message: String::from_utf8_lossy(&frame.payload).into_owned(),
                        });
                    }
                    Ok(other) => log::warn!("dropping unexpected {other:?} frame from worker"),
                    Err(e) => log::warn!("dropping frame: {e}"),
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => {
                // Every worker endpoint is gone. Whatever is not finished
                // now never will be.
                for worker in sched.stale_workers(u64::MAX, 0) {
                    pending.extend(sched.on_worker_dead(worker));
                }
                if sched.is_done() {
                    return Ok(());
                }
                return Err(ProductionError::AllWorkersDead);
            }
        }

        for worker in sched.stale_workers(now_ms(), timeout_ms) {
            log::info!("worker {worker} heartbeat timed out");
            pending.extend(sched.on_worker_dead(worker));
        }
    }
}

fn broadcast_abort(inboxes: &BTreeMap<u32, Sender<Vec<u8>>>) {
    for (worker, tx) in inboxes {
        let _ = tx.send(Frame::control(FrameType::Abort, *worker, 0).encode());
    }
}

struct WorkerConfig {
    worker_id: u32,
    path: Path,
    registry: Arc<ModuleRegistry>,
    compression: bool,
    heartbeat_interval: Duration,
    kill_after: Option<u64>,
}

fn worker_loop(config: WorkerConfig, endpoint: WireEndpoint) {
    let id = config.worker_id;
    // Liveness must not depend on how long one event takes: a side thread
    // heartbeats at a steady cadence until the worker stops, however it
    // stops. A simulated crash silences it too.
    let stop = Arc::new(AtomicBool::new(false));
    let beat = endpoint.sender();
    {
        let stop = Arc::clone(&stop);
        let interval = config.heartbeat_interval;
        thread::spawn(move || loop {
            thread::sleep(interval);
            if stop.load(Ordering::Relaxed) {
                return;
            }
            if beat.send(&Frame::control(FrameType::Heartbeat, id, 0)).is_err() {
                return;
            }
        });
    }
    let _silence_on_exit = StopOnDrop(stop);

    let abort = |message: String| {
        let _ = endpoint.send(&Frame::new(FrameType::Abort, id, 0, message.into_bytes()));
    };
    let mut active = match ActivePath::new(&config.path, &config.registry) {
        Ok(a) => a,
        Err(e) => return abort(e.to_string()),
    };
    if endpoint.send(&Frame::control(FrameType::Hello, id, 0)).is_err() {
        return;
    }
    let mut events_received = 0u64;
    loop {
        let frame = match endpoint.recv() {
            Ok(frame) => frame,
            Err(_) => return,
        };
        match frame.production_type() {
            Ok(FrameType::Event) => {
                events_received += 1;
                if config.kill_after == Some(events_received) {
                    // Crash-stop: no goodbye, no result, nothing.
                    return;
                }
                let event = match deserialize_event(&frame.payload) {
                    Ok(e) => e,
                    Err(e) => return abort(format!("undecodable event: {e}")),
                };
                let reply = match active.process(&event) {
                    Ok(Some(out)) => match serialize_event(&out, config.compression) {
                        Ok(bytes) => Frame::new(FrameType::Result, id, frame.sequence, bytes),
                        Err(e) => return abort(format!("unserializable result: {e}")),
                    },
                    Ok(None) => Frame::new(FrameType::Result, id, frame.sequence, Vec::new()),
                    Err(e) => return abort(e.to_string()),
                };
                if endpoint.send(&reply).is_err() {
                    return;
                }
            }
            Ok(FrameType::Eof) => {
                if let Err(e) = active.finish() {
                    return abort(e.to_string());
                }
                let _ = endpoint.send(&Frame::control(FrameType::Retire, id, 0));
                return;
            }
            Ok(FrameType::Abort) => return,
            _ => log::warn!("worker {id} dropping unexpected frame"),
        }
    }
}
