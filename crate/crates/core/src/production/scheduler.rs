//! Pull-based credit scheduling with order-restoring delivery.
//!
//! The scheduler is a pure state machine: every callback returns the actions
//! the caller must carry out (assign an event, send an end-of-input marker,
//! deliver a result downstream). Keeping it free of I/O and clocks makes the
//! whole scheduling discipline exhaustively checkable in tests.
//!
//! Discipline:
//!
//! - a live worker never holds more than `credit` events in flight;
//! - an event is assigned to exactly one live worker at a time;
//! - fresh events are only admitted while their sequence number fits inside
//!   the reorder window `[next_write, next_write + capacity)`, which bounds
//!   buffer occupancy and stalls assignment when the writer falls behind;
//! - a dead worker's in-flight events are requeued exactly once each and
//!   take priority over fresh input;
//! - late results from workers wrongly declared dead are accepted, and the
//!   duplicates that follow are dropped by sequence number.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

/// Liveness of one worker connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerStatus {
    Live,
    Dead,
    Retired,
}

/// Scheduler-side record of one worker.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub status: WorkerStatus,
    pub in_flight: BTreeSet<u64>,
    pub last_heartbeat_ms: u64,
    pub processed: u64,
    pub said_hello: bool,
    pub eof_sent: bool,
}

impl WorkerState {
    fn new(now_ms: u64) -> Self {
        Self {
            status: WorkerStatus::Live,
            in_flight: BTreeSet::new(),
            last_heartbeat_ms: now_ms,
            processed: 0,
            said_hello: false,
            eof_sent: false,
        }
    }
}

/// What the caller must do next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Send event `seq` (with the given serialized payload) to `worker`.
    Assign {
        worker: u32,
        seq: u64,
        payload: Vec<u8>,
    },
    /// Tell `worker` there is no more work coming.
    SendEof { worker: u32 },
    /// Write this completed result downstream; `None` means the path skipped
    /// the event. Emitted strictly in ascending `seq` order.
    Deliver { seq: u64, result: Option<Vec<u8>> },
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    credit: usize,
    capacity: usize,
    workers: BTreeMap<u32, WorkerState>,
    /// Fresh events staged for first assignment.
    input: VecDeque<u64>,
    /// Events owned by dead workers, waiting for reassignment.
    requeue: VecDeque<u64>,
    /// Serialized input payloads for every sequence not yet completed.
    payloads: HashMap<u64, Vec<u8>>,
    /// Completed results waiting for earlier sequences.
    buffer: BTreeMap<u64, Option<Vec<u8>>>,
    next_write: u64,
    next_fresh: u64,
    exhausted: bool,
    delivered: u64,
    skipped: u64,
}

impl Scheduler {
    /// `capacity` must be at least `worker_count × credit`; the production
    /// layer rejects configurations that violate this before building one.
    pub fn new(worker_ids: impl IntoIterator<Item = u32>, credit: usize, capacity: usize, now_ms: u64) -> Self {
        let workers = worker_ids
            .into_iter()
            .map(|id| (id, WorkerState::new(now_ms)))
            .collect();
        Self {
            credit,
            capacity,
            workers,
            input: VecDeque::new(),
            requeue: VecDeque::new(),
            payloads: HashMap::new(),
            buffer: BTreeMap::new(),
            next_write: 0,
            next_fresh: 0,
            exhausted: false,
            delivered: 0,
            skipped: 0,
        }
    }

    pub fn workers(&self) -> &BTreeMap<u32, WorkerState> {
        &self.workers
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn live_worker_count(&self) -> usize {
        self.workers
            .values()
            .filter(|w| w.status == WorkerStatus::Live)
            .count()
    }

    /// Reorder-buffer occupancy; bounded by `capacity` at all times.
    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// True while the caller should read more input into the scheduler.
    pub fn needs_fresh(&self) -> bool {
        if self.exhausted || self.next_fresh >= self.next_write + self.capacity as u64 {
            return false;
        }
        let free_credit: usize = self
            .workers
            .values()
            .filter(|w| w.status == WorkerStatus::Live)
            .map(|w| self.credit - w.in_flight.len().min(self.credit))
            .sum();
        self.input.len() + self.requeue.len() < free_credit
    }

    /// Stages one fresh input event; returns its sequence number.
    pub fn push_fresh(&mut self, payload: Vec<u8>) -> u64 {
        let seq = self.next_fresh;
        self.next_fresh += 1;
        self.payloads.insert(seq, payload);
        self.input.push_back(seq);
        seq
    }

    /// No more input will arrive.
    pub fn mark_exhausted(&mut self) {
        self.exhausted = true;
    }

    pub fn on_hello(&mut self, worker: u32, now_ms: u64) -> Vec<Action> {
        match self.workers.get_mut(&worker) {
            Some(w) if w.status == WorkerStatus::Live => {
                w.said_hello = true;
                w.last_heartbeat_ms = now_ms;
                self.poll()
            }
            _ => {
                log::warn!("dropping hello from unknown or finished worker {worker}");
                Vec::new()
            }
        }
    }

    pub fn on_heartbeat(&mut self, worker: u32, now_ms: u64) {
        if let Some(w) = self.workers.get_mut(&worker) {
            if w.status == WorkerStatus::Live {
                w.last_heartbeat_ms = now_ms;
            }
        }
    }

    /// Accepts a completed result. Duplicates and results for unknown
    /// workers are dropped.
    pub fn on_result(
        &mut self,
        worker: u32,
        seq: u64,
        result: Option<Vec<u8>>,
        now_ms: u64,
    ) -> Vec<Action> {
        if !self.workers.contains_key(&worker) {
            log::warn!("dropping result from unknown worker {worker}");
            return Vec::new();
        }
        let complete = seq < self.next_write || self.buffer.contains_key(&seq);
        if complete || seq >= self.next_fresh {
            // Duplicate after a false-positive death, or nonsense.
            log::debug!("dropping duplicate or stray result for seq {seq} from worker {worker}");
            return Vec::new();
        }
        // Whoever holds the assignment gives it up; that may be a different
        // worker than the sender when a death was declared falsely.
        for state in self.workers.values_mut() {
            state.in_flight.remove(&seq);
        }
        self.requeue.retain(|s| *s != seq);
        self.payloads.remove(&seq);
        if let Some(w) = self.workers.get_mut(&worker) {
            w.processed += 1;
            if w.status == WorkerStatus::Live {
                w.last_heartbeat_ms = now_ms;
            }
        }

        let mut actions = Vec::new();
        self.buffer.insert(seq, result);
        while let Some(result) = self.buffer.remove(&self.next_write) {
            match result {
                Some(bytes) => {
                    self.delivered += 1;
                    actions.push(Action::Deliver {
                        seq: self.next_write,
                        result: Some(bytes),
                    });
                }
                None => {
                    self.skipped += 1;
                    actions.push(Action::Deliver {
                        seq: self.next_write,
                        result: None,
                    });
                }
            }
            self.next_write += 1;
        }
        debug_assert!(self.buffer.len() <= self.capacity);
        actions.extend(self.poll());
        actions
    }

    pub fn on_retire(&mut self, worker: u32) {
        if let Some(w) = self.workers.get_mut(&worker) {
            if w.status == WorkerStatus::Live {
                w.status = WorkerStatus::Retired;
            }
        }
    }

    /// Declares a worker dead and requeues its in-flight work, exactly once
    /// per sequence. Idempotent.
    pub fn on_worker_dead(&mut self, worker: u32) -> Vec<Action> {
        let Some(w) = self.workers.get_mut(&worker) else {
            return Vec::new();
        };
        if w.status != WorkerStatus::Live {
            return Vec::new();
        }
        w.status = WorkerStatus::Dead;
        let orphaned: Vec<u64> = std::mem::take(&mut w.in_flight).into_iter().collect();
        log::info!(
            "worker {worker} declared dead with {} event(s) in flight",
            orphaned.len()
        );
        // Reassignment takes priority over fresh input; keep ascending order.
        for seq in orphaned.into_iter().rev() {
            self.requeue.push_front(seq);
        }
        self.poll()
    }

    /// Live workers whose heartbeat is older than `timeout_ms` at `now_ms`.
    ///
    /// Pure query; pair it with [`on_worker_dead`](Self::on_worker_dead) to
    /// apply the declarations.
    pub fn stale_workers(&self, now_ms: u64, timeout_ms: u64) -> Vec<u32> {
        self.workers
            .iter()
            .filter(|(_, w)| {
                w.status == WorkerStatus::Live
                    && now_ms.saturating_sub(w.last_heartbeat_ms) > timeout_ms
            })
            .map(|(id, _)| *id)
            .collect()
    }

    /// Work remains that no live worker could ever finish.
    pub fn is_stuck(&self) -> bool {
        self.live_worker_count() == 0 && !self.is_done()
    }

    /// Assigns staged work to free credit and retires idle workers once the
    /// input is exhausted.
    pub fn poll(&mut self) -> Vec<Action> {
        let mut actions = Vec::new();
        let worker_ids: Vec<u32> = self.workers.keys().copied().collect();
        loop {
            let mut assigned_any = false;
            for id in &worker_ids {
                let w = &self.workers[id];
                if w.status != WorkerStatus::Live || !w.said_hello || w.in_flight.len() >= self.credit
                {
                    continue;
                }
                let Some(seq) = self.take_next_assignable() else {
                    break;
                };
                let payload = self.payloads.get(&seq).expect("outstanding payload").clone();
                self.workers.get_mut(id).unwrap().in_flight.insert(seq);
                actions.push(Action::Assign {
                    worker: *id,
                    seq,
                    payload,
                });
                assigned_any = true;
            }
            if !assigned_any {
                break;
            }
        }

        // Retirement only once every assignment is acknowledged: any event
        // still in flight anywhere could yet be requeued onto the workers
        // sitting idle here, so nobody leaves early.
        let all_acknowledged = self.workers.values().all(|w| w.in_flight.is_empty());
        if self.exhausted && self.input.is_empty() && self.requeue.is_empty() && all_acknowledged {
            for (id, w) in self.workers.iter_mut() {
                if w.status == WorkerStatus::Live && !w.eof_sent {
                    w.eof_sent = true;
                    actions.push(Action::SendEof { worker: *id });
                }
            }
        }
        actions
    }

    fn take_next_assignable(&mut self) -> Option<u64> {
        if let Some(seq) = self.requeue.pop_front() {
            return Some(seq);
        }
        // Fresh input is admitted only inside the reorder window.
        let in_window = self
            .input
            .front()
            .is_some_and(|seq| *seq < self.next_write + self.capacity as u64);
        if in_window {
            self.input.pop_front()
        } else {
            None
        }
    }

    /// Every event delivered and every worker retired or dead.
    pub fn is_done(&self) -> bool {
        self.exhausted
            && self.input.is_empty()
            && self.requeue.is_empty()
            && self.buffer.is_empty()
            && self.next_write == self.next_fresh
            && self
                .workers
                .values()
                .all(|w| matches!(w.status, WorkerStatus::Retired | WorkerStatus::Dead))
    }
}
