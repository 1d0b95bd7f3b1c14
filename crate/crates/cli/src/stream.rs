//! Line-oriented streaming detection.

use std::io::{BufRead, Write};
use std::time::Instant;

use anyhow::Result;
use nilm_core::pipeline::{ModelBundle, StreamDetector};
use nilm_core::Method;
use serde::Serialize;

#[derive(Debug, Default, Serialize)]
pub struct StreamStats {
    pub records: u64,
    pub emitted: u64,
    pub skipped: u64,
    /// Records whose spacing differed from the model's sampling step.
    pub off_step: u64,
    pub median_latency_us: f64,
    pub max_latency_us: f64,
}

fn parse_record(line: &str) -> Option<(i64, f64)> {
    let mut parts = line.split_whitespace();
    let epoch = parts.next()?.parse().ok()?;
    let watts: f64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || !watts.is_finite() {
        return None;
    }
    Some((epoch, watts))
}

/// Reads `epoch watts` records and writes one JSON object per detection.
pub fn run<R: BufRead, W: Write>(bundle: &ModelBundle, method: Method, step: u32, input: R, mut output: W) -> Result<StreamStats> {
    let mut detector = StreamDetector::new(bundle, method)?;
    let mut stats = StreamStats::default();
    let mut latencies = Vec::new();
    let mut last_epoch: Option<i64> = None;
    let mut record = String::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.records += 1;
        let Some((epoch, watts)) = parse_record(&line) else {
            stats.skipped += 1;
            log::warn!("skipping malformed record {:?} ({} so far)", line, stats.skipped);
            continue;
        };
        if let Some(prev) = last_epoch {
            if epoch - prev != i64::from(step) {
                stats.off_step += 1;
            }
        }
        last_epoch = Some(epoch);

        let started = Instant::now();
        let states = detector.push(watts)?;
        let latency_us = started.elapsed().as_secs_f64() * 1e6;
        let Some(states) = states else { continue };
        latencies.push(latency_us);
        stats.emitted += 1;

        record.clear();
        record.push_str(&format!("{{\"t\":{epoch},\"on\":{{"));
        for (i, (kind, on)) in states.iter().enumerate() {
            if i > 0 {
                record.push(',');
            }
            record.push_str(&serde_json::to_string(kind.name())?);
            record.push(':');
            record.push_str(if *on == 1 { "1" } else { "0" });
        }
        record.push_str(&format!("}},\"latency_us\":{latency_us:.3}}}\n"));
        output.write_all(record.as_bytes())?;
    }
    output.flush()?;
    if !latencies.is_empty() {
        latencies.sort_by(f64::total_cmp);
        stats.median_latency_us = latencies[latencies.len() / 2];
        stats.max_latency_us = *latencies.last().expect("non-empty");
    }
    if stats.skipped > 0 {
        log::warn!("{} malformed records skipped", stats.skipped);
    }
    Ok(stats)
}
