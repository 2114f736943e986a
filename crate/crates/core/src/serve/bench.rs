//! Throughput grid search and cost accounting.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchOptions, Predictor};
use crate::error::{Error, Result};

/// Instance price in USD per minute.
pub const DEFAULT_PRICE_PER_MIN: f64 = 0.06;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// `(batch_size, concurrency)` pairs, measured in order.
    pub configs: Vec<(usize, usize)>,
    /// Measurement time per configuration.
    pub duration_ms: u64,
    pub price_per_min: f64,
    pub bucket_by_length: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            configs: vec![(1, 50), (300, 3), (300, 1)],
            duration_ms: 2_000,
            price_per_min: DEFAULT_PRICE_PER_MIN,
            bucket_by_length: false,
            seed: 0,
        }
    }
}

impl BenchConfig {
    /// Every batch size paired with every concurrency level.
    pub fn grid(batch_sizes: &[usize], concurrency: &[usize]) -> Vec<(usize, usize)> {
        batch_sizes
            .iter()
            .flat_map(|&b| concurrency.iter().map(move |&c| (b, c)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub batch_size: usize,
    pub concurrency: usize,
    /// `None` when the configuration failed.
    pub throughput_per_min: Option<f64>,
    pub usd_per_1m: Option<f64>,
}

/// Cost of scoring one million texts at `throughput_per_min` on an
/// instance billed `price_per_min`.
pub fn cost_per_million(throughput_per_min: f64, price_per_min: f64) -> f64 {
    1e6 / throughput_per_min * price_per_min
}

/// Measures steady-state throughput for each configuration: `concurrency`
/// workers each score random batches of `batch_size` texts from `corpus`
/// back to back until the time budget is spent.
pub fn benchmark(predictor: &Predictor, corpus: &[&str], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if corpus.is_empty() {
        return Err(Error::Empty("benchmark corpus is empty".into()));
    }
    if !(cfg.price_per_min >= 0.0) {
        return Err(Error::Config("price_per_min must be non-negative".into()));
    }
    let mut rows = Vec::with_capacity(cfg.configs.len());
    for &(b, c) in &cfg.configs {
        let measured = if b == 0 || c == 0 {
            Err(Error::Config("batch size and concurrency must be positive".into()))
        } else {
            measure(predictor, corpus, b, c, cfg)
        };
        let row = match measured {
            Ok(tp) => BenchRow {
                batch_size: b,
                concurrency: c,
                throughput_per_min: Some(tp),
                usd_per_1m: Some(cost_per_million(tp, cfg.price_per_min)),
            },
            Err(e) => {
                log::warn!("configuration B={b} C={c} failed: {e}");
                BenchRow {
                    batch_size: b,
                    concurrency: c,
                    throughput_per_min: None,
                    usd_per_1m: None,
                }
            }
        };
        log::info!("B={b} C={c}: {:?} texts/min", row.throughput_per_min);
        rows.push(row);
    }
    Ok(rows)
}

fn measure(predictor: &Predictor, corpus: &[&str], b: usize, c: usize, cfg: &BenchConfig) -> Result<f64> {
    let opts = BatchOptions {
        max_batch: b,
        dynamic_padding: true,
        bucket_by_length: cfg.bucket_by_length,
    };
    // Warm-up pass, untimed.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let warm: Vec<&str> = (0..b).map(|_| *corpus.choose(&mut rng).unwrap()).collect();
    predictor.score(&warm, &opts)?;

    let budget = Duration::from_millis(cfg.duration_ms);
    let started = Instant::now();
    let counts: Vec<Result<usize>> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..c)
            .map(|w| {
                let seed = cfg.seed ^ ((b as u64) << 32) ^ ((c as u64) << 16) ^ w as u64;
                s.spawn(move || -> Result<usize> {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut done = 0;
                    while done == 0 || started.elapsed() < budget {
                        let batch: Vec<&str> = (0..b).map(|_| *corpus.choose(&mut rng).unwrap()).collect();
                        predictor.score(&batch, &opts)?;
                        done += b;
                    }
                    Ok(done)
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Task("benchmark worker panicked".into()))))
            .collect()
    });
    let elapsed = started.elapsed().as_secs_f64();
    let total: usize = counts.into_iter().sum::<Result<usize>>()?;
    Ok(total as f64 / elapsed * 60.0)
}

/// `batch_size,concurrency,throughput_per_min,usd_per_1m`; failed
/// configurations have empty measurement cells.
pub fn write_benchmark_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["batch_size", "concurrency", "throughput_per_min", "usd_per_1m"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
    for r in rows {
        csv.write_record([
            r.batch_size.to_string(),
            r.concurrency.to_string(),
            opt(r.throughput_per_min),
            opt(r.usd_per_1m),
        ])?;
    }
    csv.flush()?;
    Ok(())
}
