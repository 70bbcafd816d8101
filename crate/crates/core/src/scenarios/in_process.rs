//! In-process sandbox read. Two attacker functions share one thread:
//! A recurses `n_a` times, and its deepest frame calls B, which recurses
//! `n_b` (= RSB size) times and fills the cyclic RSB with B's return site.
//! B's returns consume those entries. Every later return of A then wraps
//! around to B's return site, and the code there runs speculatively with
//! A's registers. A has set the return value to an offset outside the
//! 32-bit sandbox.
//!
//! B's committed path keeps every value 32-bit clean before it returns, so
//! architecturally all heap accesses are in-sandbox. Only the speculative
//! path sees A's unmasked offset. The gadget's feedback load goes through
//! r9. B's own frames keep r9 on a scratch line, and A points it at the
//! probe array just before returning. Only A-context speculation touches
//! a probe slot, and the gadget resets r9 right after its probe access.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, levenshtein, par_map, precision, ByteRow, Metric, ScenarioError, ScenarioReport, TrialSummary, PANGRAM};
use crate::config::RunConfig;
use crate::cpu::{run_quiet, Machine, MachineConfig, RegisterFile};
use crate::harden::{apply_fence_after_call, apply_retpoline};
use crate::isa::{assemble, Program};
use crate::predictor::RsbVariant;
use crate::sidechannel::{calibrate_threshold, decode_nibbles, reload_and_time, ProbeArray};

pub const HEAP: u64 = 0x4000_0000;
/// Heap accesses are masked to 32 bits on the committed path.
pub const SANDBOX_SIZE: u64 = 1 << 32;
pub const PROBE_OFFSET: u64 = 0x4000;
pub const SCRATCH_OFFSET: u64 = 0x2_0000;
/// Secret for the direct variant: heap-relative, beyond the sandbox mask.
pub const SECRET_OFFSET: u64 = SANDBOX_SIZE;
/// Secret for the indirect variant: an absolute address below the heap.
pub const ABSOLUTE_SECRET: u64 = 0x0800_0000;
pub const DEFAULT_N_A: usize = 64;
const RUN_BUDGET: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InProcessParams {
    pub n_a: usize,
    pub n_b: usize,
    /// The value A returns: heap-relative (direct) or absolute (indirect).
    pub offset: u64,
    /// B recurses through an indirect call and reloads the heap base from its frame.
    pub indirect: bool,
    /// Leak bits 4..8 instead of 0..4.
    pub high_nibble: bool,
}

pub fn probe_array() -> ProbeArray {
    ProbeArray::nibble(HEAP + PROBE_OFFSET)
}

/// Where byte `i` of the planted secret lives, and the offset A must return to read it.
pub fn secret_location(indirect: bool, i: usize) -> (u64, u64) {
    if indirect {
        (ABSOLUTE_SECRET + i as u64, ABSOLUTE_SECRET + i as u64)
    } else {
        (HEAP + SECRET_OFFSET + i as u64, SECRET_OFFSET + i as u64)
    }
}

/// Emits the A/B program. Frames are one cache line each, so flushing a
/// return address never flushes the caller's frame slot.
pub fn build_in_process(params: &InProcessParams, rsb_size: usize) -> Result<Program, ScenarioError> {
    let InProcessParams { n_a, n_b, offset, indirect, high_nibble } = *params;
    if n_b != rsb_size {
        return Err(ScenarioError::Unsupported(format!("n_b must equal the RSB size ({rsb_size}), got {n_b}")));
    }
    if n_a == 0 {
        return Err(ScenarioError::Unsupported("n_a must be at least 1".into()));
    }
    let (mask, shift) = if high_nibble { (0xf0, 8) } else { (0x0f, 12) };
    let (b_call, reload) =
        if indirect { ("        mov r6, B\n        call r6\n", "        load r15, [sp]\n") } else { ("        call B\n", "") };
    let src = format!(
        ".entry main
main:   mov r15, {heap:#x}
        mov r14, {probe:#x}
        mov r13, {scratch:#x}
        mov r9, r13
        mov r11, 0
        mov r1, {n_a}
        mov r2, {b_depth}
        call A
        halt
A:      sub sp, 56
        store [sp], r11
        sub r1, 1
        beq r1, 0, A_deep
        call A
A_site: mov r0, {offset:#x}
        mov r9, r14
        add sp, 56
        clflush [sp]
        ret
A_deep: call B
        jmp A_site
B:      sub sp, 56
        store [sp], r15
        sub r2, 1
        beq r2, 0, B_base
{b_call}B_ret:
{reload}        loadb r0, [r15 + r0]
        and r0, {mask:#x}
        shl r0, {shift}
        loadb r3, [r9 + r0]
        mov r9, r13
        mov r0, r3
        and r0, 0xffffffff
        add sp, 56
        ret
B_base: mov r0, 0
        add sp, 56
        ret
",
        heap = HEAP,
        probe = HEAP + PROBE_OFFSET,
        scratch = HEAP + SCRATCH_OFFSET,
        b_depth = n_b + 1,
    );
    Ok(assemble(&src)?)
}

fn harden(p: Program, config: &RunConfig) -> Program {
    let p = if config.bool("harden.retpoline") { apply_retpoline(&p) } else { p };
    if config.bool("harden.fence_after_call") {
        apply_fence_after_call(&p)
    } else {
        p
    }
}

/// The planted secret: the pangram repeated to `len` bytes.
pub fn secret_bytes(len: usize) -> Vec<u8> {
    PANGRAM.bytes().cycle().take(len).collect()
}

/// A machine with the secret planted and caches cold.
pub fn planted_machine(cfg: MachineConfig, indirect: bool, secret: &[u8]) -> Machine {
    let mut m = Machine::new(cfg);
    m.memory.write_bytes(secret_location(indirect, 0).0, secret);
    m
}

/// Evicts every probe slot by walking its LLC set with attacker-owned lines.
pub fn evict_probe(m: &mut Machine, pa: &ProbeArray) {
    for s in 0..pa.n_slots {
        let set = m.caches.llc_set_of(pa.slot_addr(s));
        m.caches.evict_set_by_walking(set);
    }
}

/// One attack round: evict, run the program, reload all 16 slots.
fn attempt(
    m: &mut Machine,
    p: &Program,
    pa: &ProbeArray,
    threshold: u64,
    rng: &mut ChaCha8Rng,
    config: &RunConfig,
) -> Result<Vec<u64>, ScenarioError> {
    evict_probe(m, pa);
    m.restart(p, RegisterFile { sp: m.stack_top, ..RegisterFile::default() });
    run_quiet(p, m, RUN_BUDGET)?;
    Ok(reload_and_time(m, pa, threshold, rng, &config.noise()).latencies)
}

struct ByteOutcome {
    decided: Option<u8>,
    /// Per-trial decode (None when a nibble set was not a singleton).
    per_trial: Vec<Option<u8>>,
    hot: usize,
    cycles: u64,
    probe_loads: u64,
}

fn leak_byte(base: &Machine, config: &RunConfig, i: usize, threshold: u64) -> Result<ByteOutcome, ScenarioError> {
    let cfg = config.machine();
    let indirect = config.bool("in_process.indirect");
    let n_a = config.usize("in_process.n_a");
    let trials = config.usize("scenario.trials");
    let noisy = !config.noise().is_silent();
    let offset = secret_location(indirect, i).1;
    let build = |high_nibble| -> Result<Program, ScenarioError> {
        let params = InProcessParams { n_a, n_b: cfg.rsb_size, offset, indirect, high_nibble };
        Ok(harden(build_in_process(&params, cfg.rsb_size)?, config))
    };
    let (lo_prog, hi_prog) = (build(false)?, build(true)?);
    let pa = probe_array();
    let mut m = base.clone();
    let start = m.cycle;
    let loads = m.stats.probe_loads;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed(), i as u64));
    let mut votes = [0u32; 256];
    let mut sums = [[0u64; 16]; 2];
    let mut per_trial = Vec::with_capacity(trials);
    let mut hot = 0;
    for _ in 0..trials {
        let lo = attempt(&mut m, &lo_prog, &pa, threshold, &mut rng, config)?;
        let hi = attempt(&mut m, &hi_prog, &pa, threshold, &mut rng, config)?;
        let hot_of = |l: &[u64]| -> Vec<usize> { (0..16).filter(|&s| l[s] < threshold).collect() };
        let (lh, hh) = (hot_of(&lo), hot_of(&hi));
        hot += lh.len() + hh.len();
        let d = decode_nibbles(&lh, &hh);
        if let Some(b) = d {
            votes[b as usize] += 1;
        }
        per_trial.push(d);
        for s in 0..16 {
            sums[0][s] += lo[s];
            sums[1][s] += hi[s];
        }
    }
    let decided = if noisy {
        // Fastest average access time per nibble.
        let fastest = |s: &[u64; 16]| (0..16).min_by_key(|&k| (s[k], k)).unwrap() as u8;
        Some((fastest(&sums[1]) << 4) | fastest(&sums[0]))
    } else {
        let best = (0..256).max_by_key(|&b| (votes[b], std::cmp::Reverse(b))).unwrap();
        (votes[best] > 0).then_some(best as u8)
    };
    Ok(ByteOutcome { decided, per_trial, hot, cycles: m.cycle - start, probe_loads: m.stats.probe_loads - loads })
}

pub fn run_in_process(config: &RunConfig, jobs: usize) -> Result<ScenarioReport, ScenarioError> {
    config.validate()?;
    let cfg = config.machine();
    if cfg.rsb_variant != RsbVariant::Cyclic {
        return Err(ScenarioError::Unsupported(format!(
            "the in-process attack needs a cyclic RSB (rsb.variant = {}); under stop/btb use the \
             context-switch or overwrite triggers instead (scenario triggers)",
            cfg.rsb_variant
        )));
    }
    let n = config.usize("in_process.bytes");
    let indirect = config.bool("in_process.indirect");
    let secret = secret_bytes(n);
    let mut base = planted_machine(cfg, indirect, &secret);
    let threshold = calibrate_threshold(&mut base);
    let outcomes = par_map(n, jobs, |i| leak_byte(&base, config, i, threshold));
    let outcomes: Vec<ByteOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;

    let mut report = ScenarioReport::new("in-process", config);
    report.ground_truth = secret.clone();
    report.recovered = outcomes.iter().map(|o| o.decided.unwrap_or(0)).collect();
    for (i, o) in outcomes.iter().enumerate() {
        report.rows.push(ByteRow { trial: 0, byte_index: i, expected: secret[i], recovered: o.decided });
    }
    let trials = config.usize("scenario.trials");
    let cycles: u64 = outcomes.iter().map(|o| o.cycles).sum();
    for t in 0..trials {
        let rec: Vec<u8> = outcomes.iter().map(|o| o.per_trial[t].unwrap_or(0)).collect();
        report.per_trial.push(TrialSummary {
            trial: t,
            distance: levenshtein(&secret, &rec),
            precision: precision(&secret, &rec),
            hot_slots: 0,
            recovered: rec,
            cycles: 0,
        });
    }
    if let Some(first) = report.per_trial.first_mut() {
        first.hot_slots = outcomes.iter().map(|o| o.hot).sum();
        first.cycles = cycles;
    }
    report.probe_loads = outcomes.iter().map(|o| o.probe_loads).sum();
    let correct = report.rows.iter().filter(|r| r.correct()).count();
    let seconds = cycles as f64 / (config.u64("time.cycles_per_ms") as f64 * 1000.0);
    report.metric = Metric {
        levenshtein_distance: levenshtein(&secret, &report.recovered) as f64,
        precision: precision(&secret, &report.recovered),
        accuracy: if n == 0 { 1.0 } else { correct as f64 / n as f64 },
        bytes_per_second_sim: if seconds > 0.0 { correct as f64 / seconds } else { 0.0 },
    };
    let decision = if config.noise().is_silent() { "majority vote" } else { "fastest average" };
    report.notes.push(format!("{n} bytes x {trials} trials, 32 probe reloads per byte per trial, {decision}"));
    Ok(report)
}

/// Instruction trace of one attack run (byte 0, low nibble).
pub fn trace_attack(config: &RunConfig) -> Result<String, ScenarioError> {
    config.validate()?;
    let cfg = config.machine();
    let indirect = config.bool("in_process.indirect");
    let params = InProcessParams {
        n_a: config.usize("in_process.n_a"),
        n_b: cfg.rsb_size,
        offset: secret_location(indirect, 0).1,
        indirect,
        high_nibble: false,
    };
    let p = harden(build_in_process(&params, cfg.rsb_size)?, config);
    let mut m = planted_machine(cfg, indirect, &secret_bytes(1));
    evict_probe(&mut m, &probe_array());
    m.load(&p);
    m.enable_trace();
    run_quiet(&p, &mut m, RUN_BUDGET)?;
    Ok(crate::cpu::format_trace(&m.take_trace()))
}
