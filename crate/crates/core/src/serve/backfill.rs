//! Scores a historical JSONL corpus through the serving path, one full
//! window at a time, with a progress file so an interrupted run resumes
//! where it stopped.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{BatchOptions, Predictor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackfillConfig {
    /// Lines replayed per window; each window is scored as one batch.
    pub window_size: usize,
    pub batch: BatchOptions,
    /// Stop after this many input lines in this run (for controlled
    /// interruption).
    pub stop_after: Option<usize>,
}

impl Default for BackfillConfig {
    fn default() -> Self {
        Self {
            window_size: 300,
            batch: BatchOptions::default(),
            stop_after: None,
        }
    }
}

/// Durable position of a backfill run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub input_lines: usize,
    pub output_rows: usize,
    pub output_bytes: u64,
    pub malformed: usize,
    pub complete: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackfillSummary {
    pub resumed_from_line: usize,
    pub lines_read: usize,
    pub rows_written: usize,
    /// Malformed lines across all runs so far.
    pub malformed: usize,
    pub complete: bool,
}

#[derive(Deserialize)]
struct InputRecord {
    text_id: String,
    text: String,
}

#[derive(Serialize)]
struct OutputRow<'a> {
    text_id: &'a str,
    scores: IndexMap<&'a str, f64>,
}

fn read_progress(path: &Path) -> Result<Option<Progress>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(serde_json::from_str(&s)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_progress(path: &Path, p: &Progress) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string(p)? + "\n")?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Scores every well-formed `{"text_id", "text"}` line of `input` into
/// `output` (one JSON row per text, input order). Malformed lines are
/// logged, counted and skipped.
pub fn backfill(
    input: &Path,
    output: &Path,
    progress_path: &Path,
    predictor: &Predictor,
    cfg: &BackfillConfig,
) -> Result<BackfillSummary> {
    if cfg.window_size == 0 {
        return Err(Error::Config("window_size must be positive".into()));
    }
    let mut progress = read_progress(progress_path)?.unwrap_or_default();
    let resumed_from_line = progress.input_lines;
    let out_file = if resumed_from_line > 0 || progress.complete {
        let f = OpenOptions::new().write(true).open(output)?;
        f.set_len(progress.output_bytes)?;
        f
    } else {
        File::create(output)?
    };
    let mut out = BufWriter::new(out_file);
    out.seek(SeekFrom::Start(progress.output_bytes))?;

    let mut lines = BufReader::new(File::open(input)?).lines().skip(progress.input_lines);
    let mut lines_read = 0usize;
    let mut rows_written = 0usize;
    let budget = cfg.stop_after.unwrap_or(usize::MAX);
    while !progress.complete && lines_read < budget {
        let take = cfg.window_size.min(budget - lines_read);
        let mut window = Vec::with_capacity(take);
        let mut consumed = 0;
        for line in lines.by_ref().take(take) {
            let line = line?;
            consumed += 1;
            let lineno = progress.input_lines + consumed;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<InputRecord>(&line) {
                Ok(r) => window.push(r),
                Err(e) => {
                    log::warn!("{}:{lineno}: skipping malformed line: {e}", input.display());
                    progress.malformed += 1;
                }
            }
        }
        if consumed == 0 {
            progress.complete = true;
            write_progress(progress_path, &progress)?;
            break;
        }
        let texts: Vec<&str> = window.iter().map(|r| r.text.as_str()).collect();
        let scores = predictor.score(&texts, &cfg.batch)?;
        let topics = &predictor.cache().topic_ids;
        let mut bytes = Vec::new();
        for (r, row) in window.iter().zip(scores) {
            let row = OutputRow {
                text_id: &r.text_id,
                scores: topics.iter().map(String::as_str).zip(row).collect(),
            };
            serde_json::to_writer(&mut bytes, &row)?;
            bytes.push(b'\n');
        }
        out.write_all(&bytes)?;
        out.flush()?;
        out.get_ref().sync_data()?;
        progress.input_lines += consumed;
        progress.output_rows += window.len();
        progress.output_bytes += bytes.len() as u64;
        lines_read += consumed;
        rows_written += window.len();
        write_progress(progress_path, &progress)?;
    }
    Ok(BackfillSummary {
        resumed_from_line,
        lines_read,
        rows_written,
        malformed: progress.malformed,
        complete: progress.complete,
    })
}
