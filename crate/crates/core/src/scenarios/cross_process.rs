//! Cross-process keystroke leak. An attacker fills the RSB with the address
//! of a gadget in the victim's address space and yields. The victim's
//! returns out of its blocking character read then speculatively run the
//! gadget, which touches a shared probe slot indexed by the character. A
//! measurer process times the probe array with RDTSC and logs hot slots.
//!
//! Ring order is attacker, victim, measurer, background. Without jitter the
//! attacker always runs between the background process and the victim.
//! With jitter the background's own deep call chain sometimes overwrites
//! the poisoned entries first, and that keystroke is lost.

use std::ops::Range;

use serde::Serialize;

use super::{derive_seed, matched_chars, par_map, precision, ByteRow, Metric, ScenarioError, ScenarioReport, TrialSummary};
use crate::config::{ConfigError, RunConfig};
use crate::cpu::Machine;
use crate::harden::{apply_fence_after_call, apply_retpoline};
use crate::isa::{assemble, Program};
use crate::os::{InputEvent, Process, System};
use crate::sidechannel::{calibrate_threshold, ProbeArray};

pub const SHARED: Range<u64> = 0x1000_0000..0x1100_0000;
pub const ATTACKER: usize = 0;
pub const VICTIM: usize = 1;
pub const MEASURER: usize = 2;
pub const BACKGROUND: usize = 3;
const NAMES: [&str; 4] = ["attacker", "victim", "measurer", "background"];
/// Pushes per attacker round: the whole RSB.
const POISON_DEPTH: usize = 16;
/// Deeper than any RSB, so a background round overwrites every entry.
const BACKGROUND_DEPTH: usize = 20;
/// Pads the background's return sites past the end of the victim's code.
const BACKGROUND_PAD: usize = 200;

pub fn range(pid: usize) -> Range<u64> {
    let base = 0x2000_0000 + pid as u64 * 0x100_0000;
    base..base + 0x10_0000
}

/// Where the measurer appends the index of every hot slot it sees.
pub fn log_base() -> u64 {
    range(MEASURER).start + 0x1000
}

pub fn probe_array() -> ProbeArray {
    ProbeArray::ascii(SHARED.start)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossProcessPrograms {
    pub attacker: Program,
    pub victim: Program,
    pub measurer: Program,
    pub background: Program,
    /// Victim code index of the gadget, pushed by the attacker.
    pub gadget: usize,
    pub threshold: u64,
}

impl CrossProcessPrograms {
    pub fn processes(&self, with_attacker: bool) -> Vec<Process> {
        let progs = [&self.attacker, &self.victim, &self.measurer, &self.background];
        (0..4).filter(|&i| with_attacker || i != ATTACKER).map(|i| Process::new(NAMES[i], progs[i].clone(), range(i))).collect()
    }
}

fn victim_source(flush_stack: bool) -> String {
    let flush = if flush_stack { "        clflush [sp]\n" } else { "" };
    format!(
        ".entry main
main:   mov r12, {shared:#x}
loop:   call get_char
        add r13, 1
        jmp loop
get_char:
        call read_char
{flush}        ret
read_char:
        syscall 0
{flush}        ret
gadget: shl r0, 12
        load r1, [r12 + r0]
        halt
",
        shared = SHARED.start
    )
}

/// A CALL placed at `site` pushes `site + 1` on every round.
fn pusher_source(site: usize, depth: usize, prologue: usize) -> String {
    assert!(site >= prologue, "call site must follow the prologue");
    let mut s = format!(".entry start\nstart:  mov r2, sp\n        mov r1, {depth}\n        jmp site\n");
    s.push_str(&"        pause\n".repeat(site - prologue));
    s.push_str(
        "site:   call F
        halt
F:      sub r1, 1
        bne r1, 0, site
        mov sp, r2
        syscall 1
        jmp start
",
    );
    s
}

fn measurer_source(threshold: u64, slots: usize) -> String {
    format!(
        ".entry start
start:  mov r12, {shared:#x}
        mov r13, {log:#x}
pass:   mov r1, 0
        mov r2, r12
probe:  rdtsc r3
        load r4, [r2]
        rdtsc r5
        sub r5, r3
        sub r5, {limit}
        and r5, 0x8000000000000000
        beq r5, 0, cold
        storeb [r13], r1
        add r13, 1
cold:   clflush [r2]
        add r2, 4096
        add r1, 1
        bne r1, {slots}, probe
        syscall 1
        jmp pass
",
        shared = SHARED.start,
        log = log_base(),
        // RDTSC brackets add one cycle: hot iff latency + 1 < threshold + 1.
        limit = threshold + 1,
    )
}

pub fn build_cross_process(config: &RunConfig) -> Result<CrossProcessPrograms, ScenarioError> {
    let mut victim = assemble(&victim_source(config.bool("victim.flush_stack")))?;
    if config.bool("harden.retpoline") {
        victim = apply_retpoline(&victim);
    }
    if config.bool("harden.fence_after_call") {
        victim = apply_fence_after_call(&victim);
    }
    let gadget = victim.addr_of("gadget");
    let threshold = calibrate_threshold(&mut Machine::new(config.machine()));
    let attacker = assemble(&pusher_source(gadget - 1, POISON_DEPTH, 3))?;
    let background = assemble(&pusher_source(victim.len().max(BACKGROUND_PAD), BACKGROUND_DEPTH, 3))?;
    let measurer = assemble(&measurer_source(threshold, probe_array().n_slots))?;
    Ok(CrossProcessPrograms { attacker, victim, measurer, background, gadget, threshold })
}

/// Keystrokes from `input.events` (`ms:byte` pairs) or else `input.text` at `input.cadence_ms`.
pub fn input_events(config: &RunConfig) -> Result<Vec<InputEvent>, ConfigError> {
    let per_ms = config.u64("time.cycles_per_ms");
    let spec = config.get("input.events").trim();
    if spec.is_empty() {
        let cadence = config.u64("input.cadence_ms") * per_ms;
        return Ok(crate::os::keystrokes(config.get("input.text").as_bytes(), cadence, cadence));
    }
    let bad = |reason: &str| ConfigError::InvalidValue { key: "input.events".into(), value: spec.into(), reason: reason.into() };
    spec.split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (ms, ch) = item.split_once(':').ok_or_else(|| bad("expected ms:byte pairs"))?;
            let ms: u64 = ms.trim().parse().map_err(|_| bad("bad millisecond value"))?;
            let ch: u8 = ch.trim().parse().map_err(|_| bad("bad byte value"))?;
            Ok(InputEvent { at_cycle: ms * per_ms, ch })
        })
        .collect()
}

/// Bytes the measurer logged, in order.
pub fn measurer_log(sys: &System) -> Vec<u8> {
    let Some(idx) = sys.processes.iter().position(|p| p.name == NAMES[MEASURER]) else {
        return Vec::new();
    };
    let end = if sys.current() == Some(idx) { sys.machine.regs.general[13] } else { sys.processes[idx].context.general[13] };
    let base = log_base();
    sys.machine.memory.read_bytes(base, end.saturating_sub(base) as usize)
}

/// One sentence: the recovered bytes and the cycles simulated.
pub fn run_sentence(
    programs: &CrossProcessPrograms,
    config: &RunConfig,
    events: &[InputEvent],
    seed: u64,
    with_attacker: bool,
) -> Result<(Vec<u8>, u64), ScenarioError> {
    let procs = programs.processes(with_attacker);
    let mut sys = System::new(config.machine(), config.scheduler(), procs, SHARED, events.to_vec(), seed)?;
    let cadence = config.u64("input.cadence_ms") * config.u64("time.cycles_per_ms");
    let last = events.iter().map(|e| e.at_cycle).max().unwrap_or(0);
    sys.run(last + cadence);
    Ok((measurer_log(&sys), sys.machine.cycle))
}

/// System trace of the first sentence up to its first keystroke.
pub fn trace_first_keystroke(config: &RunConfig) -> Result<String, ScenarioError> {
    config.validate()?;
    let programs = build_cross_process(config)?;
    let events = input_events(config)?;
    let mut sys =
        System::new(config.machine(), config.scheduler(), programs.processes(true), SHARED, events.clone(), derive_seed(config.seed(), 0))?;
    sys.enable_trace();
    let cadence = config.u64("input.cadence_ms") * config.u64("time.cycles_per_ms");
    sys.run(events.first().map_or(0, |e| e.at_cycle) + cadence);
    Ok(sys.into_trace().to_text())
}

pub fn run_cross_process(config: &RunConfig, jobs: usize) -> Result<ScenarioReport, ScenarioError> {
    run_cross_process_with(config, jobs, true)
}

/// As [`run_cross_process`], optionally leaving the attacker out.
pub fn run_cross_process_with(config: &RunConfig, jobs: usize, with_attacker: bool) -> Result<ScenarioReport, ScenarioError> {
    config.validate()?;
    let programs = build_cross_process(config)?;
    let events = input_events(config)?;
    let truth: Vec<u8> = events.iter().map(|e| e.ch).collect();
    let n = config.usize("cross_process.sentences").max(1);
    let seed = config.seed();
    let results = par_map(n, jobs, |t| run_sentence(&programs, config, &events, derive_seed(seed, t as u64), with_attacker));

    let mut report = ScenarioReport::new("cross-process", config);
    report.ground_truth = truth.clone();
    let per_ms = config.u64("time.cycles_per_ms") as f64;
    let (mut matched, mut seconds) = (0usize, 0f64);
    for (t, r) in results.into_iter().enumerate() {
        let (rec, cycles) = r?;
        matched += matched_chars(&truth, &rec);
        seconds += cycles as f64 / (per_ms * 1000.0);
        for (i, &expected) in truth.iter().enumerate() {
            report.rows.push(ByteRow { trial: t, byte_index: i, expected, recovered: rec.get(i).copied() });
        }
        report.per_trial.push(TrialSummary {
            trial: t,
            distance: super::levenshtein(&truth, &rec),
            precision: precision(&truth, &rec),
            hot_slots: rec.len(),
            recovered: rec,
            cycles,
        });
    }
    let k = report.per_trial.len() as f64;
    report.metric = Metric {
        levenshtein_distance: report.per_trial.iter().map(|t| t.distance as f64).sum::<f64>() / k,
        precision: report.per_trial.iter().map(|t| t.precision).sum::<f64>() / k,
        accuracy: if truth.is_empty() { 1.0 } else { matched as f64 / (truth.len() as f64 * k) },
        bytes_per_second_sim: if seconds > 0.0 { matched as f64 / seconds } else { 0.0 },
    };
    report.recovered = report.per_trial[0].recovered.clone();
    report.notes.push(format!("gadget at victim index {}, probe threshold {} cycles", programs.gadget, programs.threshold));
    if !with_attacker {
        report.notes.push("attacker process omitted".into());
    }
    Ok(report)
}
