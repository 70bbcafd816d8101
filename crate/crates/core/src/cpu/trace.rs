use std::fmt;

use serde::{Deserialize, Serialize};

use crate::predictor::CodeAddr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceEvent {
    Commit,
    /// Executed inside an open speculation frame.
    SpecExec,
    SpecEnter,
    SpecCommit,
    SpecSquash,
    Stall,
}

impl TraceEvent {
    pub fn name(self) -> &'static str {
        match self {
            TraceEvent::Commit => "commit",
            TraceEvent::SpecExec => "spec-exec",
            TraceEvent::SpecEnter => "spec-enter",
            TraceEvent::SpecCommit => "spec-commit",
            TraceEvent::SpecSquash => "spec-squash",
            TraceEvent::Stall => "stall",
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub depth: usize,
    pub pc: usize,
    pub mnemonic: &'static str,
    pub event: TraceEvent,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t{}", self.cycle, self.depth, self.pc, self.mnemonic, self.event)
    }
}

/// Tab-separated trace, one record per line.
pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

/// A RET as seen by the predictor: what the RSB offered versus what the stack held.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetObservation {
    pub cycle: u64,
    pub ret_site: usize,
    /// Speculation depth at which the RET executed (0 = architectural).
    pub depth: usize,
    pub predicted: Option<CodeAddr>,
    pub actual: CodeAddr,
}

impl RetObservation {
    pub fn mispredicted(&self) -> bool {
        self.predicted.is_some_and(|p| p != self.actual)
    }
}
