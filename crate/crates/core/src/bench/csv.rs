//! Timing rows and CSV output.

use std::io::{self, Write};

use crate::control::Strategy;

pub const HEADER: &str =
    "app,strategy,ckpt_mode,inject,world_size,rep,t_app,t_ckpt_write,t_ckpt_read,t_recovery,t_total";

/// Per-repetition phase timings, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TimingBreakdown {
    pub t_app: f64,
    pub t_ckpt_write: f64,
    pub t_ckpt_read: f64,
    pub t_recovery: f64,
    pub t_total: f64,
}

impl TimingBreakdown {
    pub fn phases_sum(&self) -> f64 {
        self.t_app + self.t_ckpt_write + self.t_ckpt_read + self.t_recovery
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub app: String,
    pub strategy: Strategy,
    pub ckpt_mode: String,
    pub inject: String,
    pub world_size: u32,
    pub rep: u32,
    pub timing: TimingBreakdown,
}

impl CsvRow {
    fn line(&self) -> String {
        let t = &self.timing;
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.app,
            self.strategy,
            self.ckpt_mode,
            self.inject,
            self.world_size,
            self.rep,
            t.t_app,
            t.t_ckpt_write,
            t.t_ckpt_read,
            t.t_recovery,
            t.t_total
        )
    }
}

/// Header plus one line per row, ordered by (strategy, world_size, rep).
pub fn emit_csv<W: Write>(rows: &[CsvRow], out: &mut W) -> io::Result<()> {
    let mut sorted: Vec<&CsvRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.strategy.name(), r.world_size, r.rep));
    writeln!(out, "{HEADER}")?;
    for r in sorted {
        writeln!(out, "{}", r.line())?;
    }
    Ok(())
}

pub fn to_csv_string(rows: &[CsvRow]) -> String {
    let mut buf = Vec::new();
    emit_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is ascii")
}
