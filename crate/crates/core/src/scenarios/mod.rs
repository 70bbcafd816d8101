//! End-to-end reproductions: misprediction triggers, the cross-process
//! keystroke leak, and the in-process sandbox read.

pub mod cross_process;
pub mod in_process;
pub mod triggers;

use std::fmt::{self, Write as _};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::cpu::ExecError;
use crate::isa::AsmError;
use crate::os::OsError;

pub use cross_process::{build_cross_process, run_cross_process, CrossProcessPrograms};
pub use in_process::{build_in_process, run_in_process, InProcessParams};
pub use triggers::{demo_triggers, TriggerReport};

pub const PANGRAM: &str = "The quick brown fox jumps over the lazy dog";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("generated program failed to assemble: {0}")]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Os(#[from] OsError),
    #[error("{0}")]
    Unsupported(String),
    #[error("unknown scenario '{0}' (expected triggers, cross-process or in-process)")]
    UnknownScenario(String),
}

/// Unit-cost edit distance.
pub fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + (x != y) as usize).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - distance / max(len)`, clamped to [0, 1]; two empty strings score 1.
pub fn precision(truth: &[u8], recovered: &[u8]) -> f64 {
    let n = truth.len().max(recovered.len());
    if n == 0 {
        return 1.0;
    }
    (1.0 - levenshtein(truth, recovered) as f64 / n as f64).clamp(0.0, 1.0)
}

/// Length of the longest common subsequence: characters recovered in order.
pub fn matched_chars(a: &[u8], b: &[u8]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Deterministic per-stream seed derivation (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metric {
    /// Mean over trials.
    pub levenshtein_distance: f64,
    /// Mean over trials.
    pub precision: f64,
    /// Fraction of ground-truth bytes recovered (in order), mean over trials.
    pub accuracy: f64,
    pub bytes_per_second_sim: f64,
}

/// Summary of one independent trial (one sentence, or one leaked byte).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub recovered: Vec<u8>,
    pub distance: usize,
    pub precision: f64,
    /// Hot probe slots observed in total.
    pub hot_slots: usize,
    pub cycles: u64,
}

/// One row of the byte-level CSV.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ByteRow {
    pub trial: usize,
    pub byte_index: usize,
    pub expected: u8,
    pub recovered: Option<u8>,
}

impl ByteRow {
    pub fn correct(&self) -> bool {
        self.recovered == Some(self.expected)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub recovered: Vec<u8>,
    pub ground_truth: Vec<u8>,
    pub metric: Metric,
    pub per_trial: Vec<TrialSummary>,
    pub rows: Vec<ByteRow>,
    /// Timed probe loads issued by the harness (not by simulated programs).
    pub probe_loads: u64,
    pub config_echo: Vec<(String, String)>,
    pub notes: Vec<String>,
}

fn printable(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| if (0x20..0x7f).contains(&b) { b as char } else { '.' }).collect()
}

impl ScenarioReport {
    pub fn new(name: &str, config: &RunConfig) -> Self {
        ScenarioReport { name: name.into(), config_echo: config.echo(), ..ScenarioReport::default() }
    }

    pub fn total_hot_slots(&self) -> usize {
        self.per_trial.iter().map(|t| t.hot_slots).sum()
    }

    /// `trial,byte_index,expected,recovered,correct`; an unrecovered byte is an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,byte_index,expected,recovered,correct\n");
        for r in &self.rows {
            let rec = r.recovered.map_or_else(String::new, |b| b.to_string());
            writeln!(out, "{},{},{},{},{}", r.trial, r.byte_index, r.expected, rec, r.correct() as u8).unwrap();
        }
        out
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {}", self.name)?;
        writeln!(f, "ground truth: {}", printable(&self.ground_truth))?;
        writeln!(f, "recovered:    {}", printable(&self.recovered))?;
        writeln!(f, "trials: {}", self.per_trial.len())?;
        writeln!(f, "levenshtein distance (mean): {:.3}", self.metric.levenshtein_distance)?;
        writeln!(f, "precision (mean): {:.4}", self.metric.precision)?;
        writeln!(f, "accuracy (mean): {:.4}", self.metric.accuracy)?;
        writeln!(f, "hot slots: {}", self.total_hot_slots())?;
        writeln!(f, "harness probe loads: {}", self.probe_loads)?;
        writeln!(f, "simulated rate: {:.1} B/s", self.metric.bytes_per_second_sim)?;
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        writeln!(f, "config:")?;
        for (k, v) in &self.config_echo {
            writeln!(f, "  {k} = {v}")?;
        }
        Ok(())
    }
}

/// Result of [`run_named`].
pub enum Outcome {
    Triggers(TriggerReport),
    Report(ScenarioReport),
}

/// Runs a scenario by name.
pub fn run_named(name: &str, config: &RunConfig, jobs: usize) -> Result<Outcome, ScenarioError> {
    config.validate()?;
    match name {
        "triggers" => Ok(Outcome::Triggers(demo_triggers(config)?)),
        "cross-process" => Ok(Outcome::Report(run_cross_process(config, jobs)?)),
        "in-process" => Ok(Outcome::Report(run_in_process(config, jobs)?)),
        other => Err(ScenarioError::UnknownScenario(other.into())),
    }
}

/// A representative execution trace for a scenario: the return observations
/// of every trigger, the first keystroke of a cross-process sentence, or one
/// in-process attack run.
pub fn trace_named(name: &str, config: &RunConfig) -> Result<String, ScenarioError> {
    match name {
        "triggers" => Ok(demo_triggers(config)?.to_csv()),
        "cross-process" => cross_process::trace_first_keystroke(config),
        "in-process" => in_process::trace_attack(config),
        other => Err(ScenarioError::UnknownScenario(other.into())),
    }
}

/// Runs `f` over `0..n` on up to `jobs` threads, returning results in index order.
/// Each item must be independent, so the result never depends on `jobs`.
pub(crate) fn par_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(b"abc", b"abc"), 0);
        assert_eq!(levenshtein(b"", b"abc"), 3);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn precision_bounds() {
        assert_eq!(precision(b"", b""), 1.0);
        assert_eq!(precision(b"abcd", b""), 0.0);
        assert_eq!(precision(b"abcd", b"abce"), 0.75);
    }

    #[test]
    fn lcs_counts_in_order_matches() {
        assert_eq!(matched_chars(b"abcd", b"acd"), 3);
        assert_eq!(matched_chars(b"abc", b""), 0);
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
