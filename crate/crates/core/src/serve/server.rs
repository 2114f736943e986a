//! Live scoring over newline-delimited JSON: one request object per input
//! line, one response object per output line.
//!
//! A single accumulator thread owns the open window; closed windows go to
//! a pool of scorer threads, and each response travels back through the
//! channel of the connection that sent the request.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::window::{Batch, WindowBatcher, WindowConfig};
use super::{BatchOptions, Predictor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: serde_json::Value,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<IndexMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    fn failure(id: serde_json::Value, error: impl Into<String>) -> Self {
        Self {
            id,
            scores: None,
            model_hash: None,
            error: Some(error.into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub window: WindowConfig,
    /// Batches scored at the same time.
    pub concurrency: usize,
    /// Accepted requests not yet answered; beyond this, requests are
    /// rejected with an error response.
    pub queue_capacity: usize,
    pub batch: BatchOptions,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            concurrency: 1,
            queue_capacity: 10_000,
            batch: BatchOptions::default(),
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.concurrency == 0 || self.queue_capacity == 0 || self.batch.max_batch == 0 {
            return Err(Error::Config("concurrency, queue capacity and batch size must be positive".into()));
        }
        Ok(())
    }
}

struct Job {
    request: Request,
    reply: Sender<Response>,
}

/// Accumulator plus scorer pool; dropping every [`Submitter`] drains it.
struct Engine {
    accumulator: JoinHandle<()>,
}

#[derive(Clone)]
struct Submitter {
    tx: Sender<Job>,
    pending: Arc<AtomicUsize>,
    capacity: usize,
}

impl Submitter {
    fn submit(&self, request: Request, reply: &Sender<Response>) {
        if self.pending.fetch_add(1, Ordering::SeqCst) >= self.capacity {
            self.pending.fetch_sub(1, Ordering::SeqCst);
            let _ = reply.send(Response::failure(request.id, "rejected: queue full"));
            return;
        }
        let job = Job {
            request,
            reply: reply.clone(),
        };
        if let Err(mpsc::SendError(job)) = self.tx.send(job) {
            self.pending.fetch_sub(1, Ordering::SeqCst);
            let _ = reply.send(Response::failure(job.request.id, "server is shutting down"));
        }
    }
}

fn start(predictor: Arc<Predictor>, cfg: ServerConfig) -> Result<(Engine, Submitter)> {
    cfg.validate()?;
    let (tx, rx) = mpsc::channel::<Job>();
    let pending = Arc::new(AtomicUsize::new(0));
    let submitter = Submitter {
        tx,
        pending: Arc::clone(&pending),
        capacity: cfg.queue_capacity,
    };
    let accumulator = thread::spawn(move || accumulate(rx, predictor, cfg, pending));
    Ok((Engine { accumulator }, submitter))
}

fn accumulate(rx: Receiver<Job>, predictor: Arc<Predictor>, cfg: ServerConfig, pending: Arc<AtomicUsize>) {
    let (btx, brx) = mpsc::channel::<Batch<Job>>();
    let brx = Arc::new(Mutex::new(brx));
    let scorers: Vec<JoinHandle<()>> = (0..cfg.concurrency)
        .map(|_| {
            let brx = Arc::clone(&brx);
            let predictor = Arc::clone(&predictor);
            let pending = Arc::clone(&pending);
            thread::spawn(move || loop {
                let next = brx.lock().expect("batch queue poisoned").recv();
                let Ok(batch) = next else { break };
                let n = batch.items.len();
                score_batch(&predictor, &cfg.batch, batch);
                pending.fetch_sub(n, Ordering::SeqCst);
            })
        })
        .collect();

    let origin = Instant::now();
    let micros = |t: Instant| t.duration_since(origin).as_micros() as u64;
    let mut window = WindowBatcher::new(cfg.window).expect("validated");
    loop {
        let job = match window.deadline() {
            None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
            Some(d) => {
                let now = micros(Instant::now());
                rx.recv_timeout(Duration::from_micros(d.saturating_sub(now)))
            }
        };
        match job {
            Ok(job) => {
                if let Some(b) = window.push(job, micros(Instant::now())) {
                    let _ = btx.send(b);
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        if let Some(b) = window.poll(micros(Instant::now())) {
            let _ = btx.send(b);
        }
    }
    if let Some(b) = window.flush(micros(Instant::now())) {
        let _ = btx.send(b);
    }
    drop(btx);
    for s in scorers {
        let _ = s.join();
    }
}

fn score_batch(predictor: &Predictor, opts: &BatchOptions, batch: Batch<Job>) {
    let texts: Vec<&str> = batch.items.iter().map(|j| j.request.text.as_str()).collect();
    match predictor.score(&texts, opts) {
        Ok(rows) => {
            for (job, row) in batch.items.iter().zip(rows) {
                let scores = predictor.cache().topic_ids.iter().cloned().zip(row).collect();
                let _ = job.reply.send(Response {
                    id: job.request.id.clone(),
                    scores: Some(scores),
                    model_hash: Some(predictor.model_hash().to_string()),
                    error: None,
                });
            }
        }
        Err(e) => {
            log::error!("batch of {} failed: {e}", batch.items.len());
            for job in &batch.items {
                let _ = job.reply.send(Response::failure(job.request.id.clone(), e.to_string()));
            }
        }
    }
}

/// Counts for one served stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServeStats {
    pub requests: usize,
    pub responses: usize,
    pub malformed: usize,
}

/// Reads requests from `reader` until end of input, answering on
/// `writer`. Returns once every request has been answered.
fn handle_stream<R: BufRead, W: Write>(reader: R, writer: W, submitter: &Submitter) -> Result<ServeStats> {
    let (reply_tx, reply_rx) = mpsc::channel::<Response>();
    let mut stats = ServeStats::default();
    let mut out = BufWriter::new(writer);
    let write = |r: &Response, out: &mut BufWriter<W>| -> Result<()> {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    };
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.requests += 1;
        match serde_json::from_str::<Request>(&line) {
            Ok(req) => submitter.submit(req, &reply_tx),
            Err(e) => {
                stats.malformed += 1;
                let _ = reply_tx.send(Response::failure(serde_json::Value::Null, format!("malformed request: {e}")));
            }
        }
        while let Ok(r) = reply_rx.try_recv() {
            write(&r, &mut out)?;
            stats.responses += 1;
        }
    }
    drop(reply_tx);
    while stats.responses < stats.requests {
        let Ok(r) = reply_rx.recv() else { break };
        write(&r, &mut out)?;
        stats.responses += 1;
    }
    Ok(stats)
}

/// Serves one line stream to completion.
pub fn serve_lines<R: BufRead, W: Write>(
    reader: R,
    writer: W,
    predictor: Arc<Predictor>,
    cfg: ServerConfig,
) -> Result<ServeStats> {
    let (engine, submitter) = start(predictor, cfg)?;
    let stats = handle_stream(reader, writer, &submitter);
    drop(submitter);
    let _ = engine.accumulator.join();
    stats
}

pub fn serve_stdio(predictor: Arc<Predictor>, cfg: ServerConfig) -> Result<ServeStats> {
    let stdin = std::io::stdin();
    serve_lines(stdin.lock(), std::io::stdout(), predictor, cfg)
}

/// Accepts connections on `addr`, one thread per connection, all sharing
/// one window. Stops after `max_connections` connections when given.
pub fn serve_tcp<A: ToSocketAddrs>(
    addr: A,
    predictor: Arc<Predictor>,
    cfg: ServerConfig,
    max_connections: Option<usize>,
    on_bound: impl FnOnce(std::net::SocketAddr),
) -> Result<()> {
    let listener = TcpListener::bind(addr)?;
    on_bound(listener.local_addr()?);
    let (engine, submitter) = start(predictor, cfg)?;
    let mut handlers = Vec::new();
    for (k, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let submitter = submitter.clone();
        handlers.push(thread::spawn(move || -> Result<ServeStats> {
            let reader = BufReader::new(stream.try_clone()?);
            handle_stream(reader, stream, &submitter)
        }));
        if max_connections.is_some_and(|m| k + 1 >= m) {
            break;
        }
    }
    for h in handlers {
        match h.join() {
            Ok(Err(e)) => log::warn!("connection ended with an error: {e}"),
            Err(_) => log::error!("connection handler panicked"),
            Ok(Ok(_)) => {}
        }
    }
    drop(submitter);
    let _ = engine.accumulator.join();
    Ok(())
}
