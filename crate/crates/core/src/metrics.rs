//! Per-cycle timing derived from the control center's records and the
//! aggregator's phase log, plus the summary report.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::Tick;
use crate::nodes::{AbortReason, CycleOutcome, CycleRecord, Phase, PhaseEntry};

/// Selection share of a cycle measured on the reference prototype.
pub const REFERENCE_SELECTION_FRACTION: f64 = 0.75;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One CSV row. Durations are in ticks (milliseconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: u64,
    pub total_ms: u64,
    pub acq_ms: u64,
    pub check_ms: u64,
    pub select_ms: u64,
    pub mine_ms: u64,
    pub verify_ms: u64,
    pub add_ms: u64,
    pub selection_fraction: f64,
    pub outcome: String,
    pub miner: String,
}

impl CycleMetrics {
    pub fn phase_sum(&self) -> u64 {
        self.acq_ms + self.check_ms + self.select_ms + self.mine_ms + self.verify_ms + self.add_ms
    }

    pub fn committed(&self) -> bool {
        self.outcome == "committed"
    }
}

fn slot(phase: Phase) -> Option<usize> {
    match phase {
        Phase::Acquiring => Some(0),
        Phase::ChainChecking => Some(1),
        Phase::Selecting => Some(2),
        Phase::Mining => Some(3),
        Phase::Verifying => Some(4),
        Phase::Adding => Some(5),
        _ => None,
    }
}

/// Splits each cycle's span into phases. A phase lasts from its entry until
/// the next logged transition; acquisition starts when the control center
/// sends its request and the final hop back to it is charged to the last
/// active phase, so the six durations always add up to the total.
pub fn cycle_metrics(records: &[CycleRecord], log: &[PhaseEntry]) -> Vec<CycleMetrics> {
    let mut by_cycle: BTreeMap<u64, Vec<&PhaseEntry>> = BTreeMap::new();
    for e in log {
        by_cycle.entry(e.cycle).or_default().push(e);
    }
    records
        .iter()
        .map(|r| {
            let entries = by_cycle.get(&r.cycle).map(Vec::as_slice).unwrap_or(&[]);
            let last_seen = entries.last().map(|e| e.at).unwrap_or(r.started);
            let end = r.ended.unwrap_or(last_seen).max(r.started);
            let mut spans = [0u64; 6];
            let mut current = 0usize;
            let mut since: Tick = r.started;
            for e in entries {
                let at = e.at.clamp(since, end);
                spans[current] += at - since;
                since = at;
                if let Some(s) = slot(e.phase) {
                    current = s;
                }
            }
            spans[current] += end - since;
            let total = end - r.started;
            let outcome = r
                .outcome
                .clone()
                .unwrap_or(CycleOutcome::Aborted(AbortReason::NoUpdate));
            CycleMetrics {
                cycle: r.cycle,
                total_ms: total,
                acq_ms: spans[0],
                check_ms: spans[1],
                select_ms: spans[2],
                mine_ms: spans[3],
                verify_ms: spans[4],
                add_ms: spans[5],
                selection_fraction: if total == 0 {
                    0.0
                } else {
                    spans[2] as f64 / total as f64
                },
                outcome: outcome.to_string(),
                miner: r.miner.as_ref().map(|m| m.to_string()).unwrap_or_default(),
            }
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[CycleMetrics], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "cycle",
            "total_ms",
            "acq_ms",
            "check_ms",
            "select_ms",
            "mine_ms",
            "verify_ms",
            "add_ms",
            "selection_fraction",
            "outcome",
            "miner",
        ])
        .map_err(|e| MetricsError::ParseError(e.to_string()))?;
    }
    for row in rows {
        w.serialize(row)
            .map_err(|e| MetricsError::ParseError(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[CycleMetrics]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is UTF-8")
}

/// Reads metrics CSV; an input without rows is an error.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<CycleMetrics>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r
        .deserialize()
        .collect::<Result<Vec<CycleMetrics>, _>>()
        .map_err(|e| MetricsError::ParseError(e.to_string()))?;
    if rows.is_empty() {
        return Err(MetricsError::ParseError("no metrics rows".into()));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub cycles: usize,
    pub committed: usize,
    pub mean_total_ms: f64,
    pub median_total_ms: f64,
    /// Averaged over committed cycles.
    pub mean_selection_fraction: f64,
    pub commit_rate: f64,
    pub miner_counts: BTreeMap<String, usize>,
}

pub fn summarize(rows: &[CycleMetrics]) -> Result<Summary, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::ParseError("no metrics rows".into()));
    }
    let n = rows.len();
    let committed: Vec<&CycleMetrics> = rows.iter().filter(|r| r.committed()).collect();
    let mut totals: Vec<u64> = rows.iter().map(|r| r.total_ms).collect();
    totals.sort_unstable();
    let median = if n % 2 == 1 {
        totals[n / 2] as f64
    } else {
        (totals[n / 2 - 1] + totals[n / 2]) as f64 / 2.0
    };
    let mut miner_counts = BTreeMap::new();
    for r in &committed {
        *miner_counts.entry(r.miner.clone()).or_insert(0) += 1;
    }
    let mean_selection_fraction = if committed.is_empty() {
        0.0
    } else {
        committed.iter().map(|r| r.selection_fraction).sum::<f64>() / committed.len() as f64
    };
    Ok(Summary {
        cycles: n,
        committed: committed.len(),
        mean_total_ms: totals.iter().sum::<u64>() as f64 / n as f64,
        median_total_ms: median,
        mean_selection_fraction,
        commit_rate: committed.len() as f64 / n as f64,
        miner_counts,
    })
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cycles:                 {}", self.cycles)?;
        writeln!(f, "committed:              {}", self.committed)?;
        writeln!(f, "commit rate:            {:.4}", self.commit_rate)?;
        writeln!(f, "mean cycle time:        {:.3} ms", self.mean_total_ms)?;
        writeln!(f, "median cycle time:      {:.3} ms", self.median_total_ms)?;
        writeln!(
            f,
            "mean selection share:   {:.2}% (reference prototype ~{:.0}%)",
            self.mean_selection_fraction * 100.0,
            REFERENCE_SELECTION_FRACTION * 100.0
        )?;
        writeln!(f, "miner counts:")?;
        for (node, count) in &self.miner_counts {
            let share = if self.committed == 0 {
                0.0
            } else {
                *count as f64 / self.committed as f64
            };
            writeln!(f, "  {node:<8} {count:>8}  {:.4}", share)?;
        }
        Ok(())
    }
}
