//! Size- and age-triggered request windows, plus a deterministic
//! virtual-clock simulator of the serving queue.
//!
//! Times are microseconds on whatever clock the caller uses.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub max_batch_size: usize,
    /// Longest an event may sit in an open window, in microseconds.
    pub max_window_us: u64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            max_batch_size: 300,
            max_window_us: 3_000_000,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_batch_size == 0 || self.max_window_us == 0 {
            return Err(Error::Config("window needs a positive batch size and duration".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Size,
    Time,
    Flush,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// In arrival order.
    pub items: Vec<T>,
    pub arrivals: Vec<u64>,
    pub dispatched_at: u64,
    pub trigger: Trigger,
}

/// Single-writer accumulator for the open window.
#[derive(Debug)]
pub struct WindowBatcher<T> {
    cfg: WindowConfig,
    items: Vec<T>,
    arrivals: Vec<u64>,
}

impl<T> WindowBatcher<T> {
    pub fn new(cfg: WindowConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            items: Vec::new(),
            arrivals: Vec::new(),
        })
    }

    pub fn config(&self) -> WindowConfig {
        self.cfg
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// When the open window must close at the latest.
    pub fn deadline(&self) -> Option<u64> {
        self.arrivals.first().map(|&t| t + self.cfg.max_window_us)
    }

    /// Adds an event; returns the batch if this filled the window.
    pub fn push(&mut self, item: T, now: u64) -> Option<Batch<T>> {
        self.items.push(item);
        self.arrivals.push(now);
        (self.items.len() >= self.cfg.max_batch_size).then(|| self.take(now, Trigger::Size))
    }

    /// Closes the window if its oldest event has reached the age limit.
    pub fn poll(&mut self, now: u64) -> Option<Batch<T>> {
        match self.deadline() {
            Some(d) if now >= d => Some(self.take(now, Trigger::Time)),
            _ => None,
        }
    }

    /// Closes whatever is open.
    pub fn flush(&mut self, now: u64) -> Option<Batch<T>> {
        (!self.items.is_empty()).then(|| self.take(now, Trigger::Flush))
    }

    fn take(&mut self, now: u64, trigger: Trigger) -> Batch<T> {
        Batch {
            items: std::mem::take(&mut self.items),
            arrivals: std::mem::take(&mut self.arrivals),
            dispatched_at: now,
            trigger,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub id: u64,
    pub arrival_us: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub window: WindowConfig,
    /// Scheduler tick: age triggers are checked on tick boundaries.
    pub tick_us: u64,
    /// Events allowed in the open window plus batches awaiting a scorer.
    pub queue_capacity: usize,
    /// Batches scored at the same time.
    pub concurrency: usize,
    /// Virtual scoring time of a batch: `fixed + per_item · size`.
    pub service_fixed_us: u64,
    pub service_per_item_us: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            tick_us: 1_000,
            queue_capacity: 10_000,
            concurrency: 1,
            service_fixed_us: 20_000,
            service_per_item_us: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimOutcome {
    Scored,
    Rejected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimResponse {
    pub id: u64,
    pub outcome: SimOutcome,
    pub arrival_us: u64,
    /// Window close time; equals arrival for rejections.
    pub dispatched_us: u64,
    pub completed_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub size: usize,
    pub trigger: Trigger,
    pub dispatched_us: u64,
    pub started_us: u64,
    pub completed_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub responses: Vec<SimResponse>,
    pub batches: Vec<BatchRecord>,
    pub accepted: usize,
    pub rejected: usize,
    pub max_dispatch_delay_us: u64,
    pub max_latency_us: u64,
    pub max_in_flight: usize,
}

/// Replays `events` through a window batcher and a pool of
/// `concurrency` scorers on a virtual clock.
pub fn simulate(events: &[SimEvent], cfg: &SimConfig) -> Result<SimReport> {
    cfg.window.validate()?;
    if cfg.tick_us == 0 || cfg.concurrency == 0 || cfg.queue_capacity == 0 {
        return Err(Error::Config("tick, concurrency and queue capacity must be positive".into()));
    }
    if events.windows(2).any(|w| w[1].arrival_us < w[0].arrival_us) {
        return Err(Error::Precondition("event arrivals must be non-decreasing".into()));
    }
    let mut batcher = WindowBatcher::new(cfg.window)?;
    let mut waiting: VecDeque<Batch<SimEvent>> = VecDeque::new();
    // Completion times of batches being scored.
    let mut busy: Vec<u64> = Vec::new();
    let mut report = SimReport {
        responses: Vec::with_capacity(events.len()),
        batches: Vec::new(),
        accepted: 0,
        rejected: 0,
        max_dispatch_delay_us: 0,
        max_latency_us: 0,
        max_in_flight: 0,
    };

    let finish = |batch: Batch<SimEvent>, start: u64, report: &mut SimReport| -> u64 {
        let done = start + cfg.service_fixed_us + cfg.service_per_item_us * batch.items.len() as u64;
        for (e, &arr) in batch.items.iter().zip(&batch.arrivals) {
            report.max_dispatch_delay_us = report.max_dispatch_delay_us.max(batch.dispatched_at - arr);
            report.max_latency_us = report.max_latency_us.max(done - arr);
            report.responses.push(SimResponse {
                id: e.id,
                outcome: SimOutcome::Scored,
                arrival_us: arr,
                dispatched_us: batch.dispatched_at,
                completed_us: done,
            });
        }
        report.batches.push(BatchRecord {
            size: batch.items.len(),
            trigger: batch.trigger,
            dispatched_us: batch.dispatched_at,
            started_us: start,
            completed_us: done,
        });
        done
    };

    // Hands waiting batches to free scorers at time `now`.
    let start_ready = |now: u64, waiting: &mut VecDeque<Batch<SimEvent>>, busy: &mut Vec<u64>, report: &mut SimReport| {
        busy.retain(|&done| done > now);
        while busy.len() < cfg.concurrency {
            let Some(b) = waiting.pop_front() else { break };
            let start = now.max(b.dispatched_at);
            busy.push(finish(b, start, report));
        }
        report.max_in_flight = report.max_in_flight.max(busy.len());
    };

    let next_tick = |t: u64| t.div_ceil(cfg.tick_us) * cfg.tick_us;
    let mut i = 0;
    let mut now = 0u64;
    loop {
        // Next moment something can happen: an arrival, a window deadline
        // (seen at the following tick), or a scorer freeing up.
        let arrival = events.get(i).map(|e| e.arrival_us);
        let deadline = batcher.deadline().map(next_tick);
        let free = if waiting.is_empty() { None } else { busy.iter().copied().min() };
        let Some(t) = [arrival, deadline, free].into_iter().flatten().min() else {
            break;
        };
        now = now.max(t);
        start_ready(now, &mut waiting, &mut busy, &mut report);
        if let Some(b) = batcher.poll(now) {
            waiting.push_back(b);
        }
        while let Some(e) = events.get(i).filter(|e| e.arrival_us <= now) {
            i += 1;
            let queued: usize = batcher.len() + waiting.iter().map(|b| b.items.len()).sum::<usize>();
            if queued >= cfg.queue_capacity {
                report.rejected += 1;
                report.responses.push(SimResponse {
                    id: e.id,
                    outcome: SimOutcome::Rejected,
                    arrival_us: e.arrival_us,
                    dispatched_us: e.arrival_us,
                    completed_us: e.arrival_us,
                });
                continue;
            }
            report.accepted += 1;
            if let Some(b) = batcher.push(*e, now) {
                waiting.push_back(b);
            }
        }
        start_ready(now, &mut waiting, &mut busy, &mut report);
    }
    if let Some(b) = batcher.flush(now) {
        waiting.push_back(b);
    }
    while !waiting.is_empty() {
        let t = busy.iter().copied().min().unwrap_or(now);
        now = now.max(t);
        start_ready(now, &mut waiting, &mut busy, &mut report);
    }
    Ok(report)
}
