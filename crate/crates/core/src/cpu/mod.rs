//! Execution engines: an in-order architectural oracle ([`run_sequential`]) and a
//! speculative engine ([`Machine::step`]) that follows return predictions,
//! opens nested speculation frames, and rolls them back on misprediction.

mod sequential;
mod speculative;
mod trace;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{Imm, MemOperand, Operand, Program, Reg};
use crate::mem::{CacheConfig, CacheHierarchy, PhysicalMemory};
use crate::predictor::{BranchTargetBuffer, CodeAddr, ReturnStackBuffer, RsbVariant, DEFAULT_BTB_SIZE, DEFAULT_RSB_SIZE};

pub use sequential::run_sequential;
pub use speculative::SpeculationFrame;
pub use trace::{format_trace, RetObservation, TraceEvent, TraceRecord};

pub const SYS_READ_CHAR: u64 = 0;
pub const SYS_SCHED_YIELD: u64 = 1;
pub const SYS_EXIT: u64 = 2;

pub const DEFAULT_STACK_TOP: u64 = 0x7000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegisterFile {
    pub general: [u64; 16],
    pub sp: u64,
    pub pc: usize,
}

impl RegisterFile {
    pub fn get(&self, r: Reg) -> u64 {
        if r.is_sp() {
            self.sp
        } else {
            self.general[r.index()]
        }
    }

    pub fn set(&mut self, r: Reg, v: u64) {
        if r.is_sp() {
            self.sp = v
        } else {
            self.general[r.index()] = v
        }
    }

    pub fn operand(&self, op: Operand) -> u64 {
        match op {
            Operand::Reg(r) => self.get(r),
            Operand::Imm(v) => v as u64,
        }
    }

    pub fn effective_address(&self, m: &MemOperand) -> u64 {
        let idx = m.index.map_or(0, |r| self.get(r));
        self.get(m.base).wrapping_add(idx).wrapping_add(m.disp as u64)
    }
}

pub(crate) fn imm_value(imm: Imm) -> u64 {
    imm.bits()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreConfig {
    pub max_spec_depth: usize,
    pub max_spec_instructions: u64,
    /// Instructions a frame may execute before resolving even when its
    /// true-target load already completed.
    pub min_spec_on_hit: u64,
    /// FENCE waits for all open frames to resolve.
    pub fence_drains: bool,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig { max_spec_depth: 8, max_spec_instructions: 64, min_spec_on_hit: 2, fence_drains: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub core: CoreConfig,
    pub cache: CacheConfig,
    pub rsb_size: usize,
    pub rsb_variant: RsbVariant,
    pub btb_size: usize,
    pub stack_top: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            core: CoreConfig::default(),
            cache: CacheConfig::default(),
            rsb_size: DEFAULT_RSB_SIZE,
            rsb_variant: RsbVariant::Cyclic,
            btb_size: DEFAULT_BTB_SIZE,
            stack_top: DEFAULT_STACK_TOP,
        }
    }
}

/// Addresses a committed access may touch. Speculative accesses outside it squash silently.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum AddressSpace {
    #[default]
    Unrestricted,
    Ranges(Vec<Range<u64>>),
}

impl AddressSpace {
    pub fn contains(&self, addr: u64, len: u64) -> bool {
        match self {
            AddressSpace::Unrestricted => true,
            AddressSpace::Ranges(rs) => {
                let end = addr.saturating_add(len);
                rs.iter().any(|r| r.start <= addr && end <= r.end)
            }
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("pc {0:#x} is outside the program")]
    InvalidPc(usize),
    #[error("pc {pc}: access to unmapped address {addr:#x}")]
    UnmappedAccess { pc: usize, addr: u64 },
    #[error("pc {pc}: return with empty stack")]
    StackUnderflow { pc: usize },
    #[error("instruction budget exhausted")]
    BudgetExceeded,
    #[error("unknown syscall {0}")]
    UnknownSyscall(u64),
}

/// Outcome of one call to [`Machine::step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Executed,
    /// Speculation could not proceed; the cycle counter advanced to the next resolution.
    Stalled,
    /// A committed SYSCALL; pc already points past it.
    Syscall(u64),
    Halted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub committed: u64,
    pub speculative: u64,
    pub frames_opened: u64,
    pub frames_committed: u64,
    pub frames_squashed: u64,
    pub probe_loads: u64,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct Recorder {
    pub trace: Option<Vec<TraceRecord>>,
    pub rets: Option<Vec<RetObservation>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PendingStore {
    pub addr: u64,
    pub width: crate::isa::Width,
    pub value: u64,
    /// Number of frames open when the store executed; rewritten as frames resolve.
    pub tag: usize,
}

/// Architectural and microarchitectural state of one logical core plus its memory.
#[derive(Clone, Debug)]
pub struct Machine {
    pub regs: RegisterFile,
    pub memory: PhysicalMemory,
    pub caches: CacheHierarchy,
    pub rsb: ReturnStackBuffer,
    pub btb: BranchTargetBuffer,
    pub cycle: u64,
    pub config: MachineConfig,
    pub space: AddressSpace,
    /// Highest stack address; a RET with `sp >= stack_top` underflows.
    pub stack_top: u64,
    pub stats: Stats,
    pub(crate) spec: Vec<SpeculationFrame>,
    pub(crate) stores: Vec<PendingStore>,
    pub(crate) halted: bool,
    pub(crate) rec: Recorder,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Self {
        let regs = RegisterFile { sp: config.stack_top, ..RegisterFile::default() };
        Machine {
            regs,
            memory: PhysicalMemory::new(),
            caches: CacheHierarchy::new(config.cache),
            rsb: ReturnStackBuffer::new(config.rsb_size, config.rsb_variant),
            btb: BranchTargetBuffer::new(config.btb_size),
            cycle: 0,
            config,
            space: AddressSpace::Unrestricted,
            stack_top: config.stack_top,
            stats: Stats::default(),
            spec: Vec::new(),
            stores: Vec::new(),
            halted: false,
            rec: Recorder::default(),
        }
    }

    /// A fresh machine with `program`'s data loaded and pc at its entry.
    pub fn with_program(config: MachineConfig, program: &Program) -> Self {
        let mut m = Machine::new(config);
        m.load(program);
        m
    }

    /// Writes data segments and resets pc/sp for a new run of `program`.
    pub fn load(&mut self, program: &Program) {
        for seg in &program.data {
            self.memory.write_bytes(seg.addr, &seg.bytes);
        }
        self.regs.pc = program.entry;
        self.regs.sp = self.stack_top;
        self.halted = false;
    }

    /// Clears architectural registers and the halted flag; caches and predictors persist.
    pub fn restart(&mut self, program: &Program, regs: RegisterFile) {
        assert!(self.spec.is_empty(), "restart with open speculation");
        self.regs = RegisterFile { pc: program.entry, ..regs };
        self.halted = false;
    }

    pub fn enable_trace(&mut self) {
        self.rec.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.rec.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn record_returns(&mut self) {
        self.rec.rets.get_or_insert_with(Vec::new);
    }

    pub fn take_returns(&mut self) -> Vec<RetObservation> {
        self.rec.rets.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn spec_depth(&self) -> usize {
        self.spec.len()
    }

    pub fn frames(&self) -> &[SpeculationFrame] {
        &self.spec
    }

    /// Architectural register state (the outermost checkpoint while speculating).
    pub fn architectural_regs(&self) -> RegisterFile {
        self.spec.first().map_or(self.regs, |f| f.checkpoint)
    }

    /// RDTSC-bracketed committed load of `addr` issued by the harness; returns the
    /// measured latency and advances the cycle counter accordingly.
    pub fn timed_probe(&mut self, addr: u64) -> u64 {
        assert!(self.spec.is_empty(), "probe while speculating");
        let t0 = self.cycle;
        self.cycle += 1;
        let lat = self.caches.touch(addr);
        self.cycle += lat;
        let t1 = self.cycle;
        self.cycle += 1;
        self.stats.probe_loads += 1;
        t1 - t0 - 1
    }

    pub(crate) fn push_trace(&mut self, pc: usize, mnemonic: &'static str, event: TraceEvent) {
        if let Some(t) = self.rec.trace.as_mut() {
            t.push(TraceRecord { cycle: self.cycle, depth: self.spec.len(), pc, mnemonic, event });
        }
    }

    pub(crate) fn push_ret(&mut self, obs: RetObservation) {
        if let Some(r) = self.rec.rets.as_mut() {
            r.push(obs);
        }
    }
}

/// How a standalone [`run`] ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    Halted,
    BudgetExhausted,
}

/// Default syscall behavior outside the OS model: EXIT halts, READ_CHAR returns 0, SCHED_YIELD is a no-op.
pub(crate) fn standalone_syscall(regs: &mut RegisterFile, number: u64) -> Result<bool, ExecError> {
    match number {
        SYS_READ_CHAR => {
            regs.general[0] = 0;
            Ok(false)
        }
        SYS_SCHED_YIELD => Ok(false),
        SYS_EXIT => Ok(true),
        n => Err(ExecError::UnknownSyscall(n)),
    }
}

/// Drives the speculative engine until HALT or until `budget` cycles elapse.
pub fn run(program: &Program, mut machine: Machine, budget: u64) -> Result<(Machine, Vec<TraceRecord>, RunOutcome), ExecError> {
    machine.enable_trace();
    let outcome = run_quiet(program, &mut machine, budget)?;
    let trace = machine.take_trace();
    Ok((machine, trace, outcome))
}

/// [`run`] without forcing trace collection; mutates `machine` in place.
pub fn run_quiet(program: &Program, machine: &mut Machine, budget: u64) -> Result<RunOutcome, ExecError> {
    if program.is_empty() {
        machine.halted = true;
        return Ok(RunOutcome::Halted);
    }
    let limit = machine.cycle.saturating_add(budget);
    loop {
        if machine.cycle >= limit {
            return Ok(RunOutcome::BudgetExhausted);
        }
        match machine.step(program)? {
            Step::Halted => return Ok(RunOutcome::Halted),
            Step::Syscall(n) => {
                if standalone_syscall(&mut machine.regs, n)? {
                    machine.halted = true;
                    return Ok(RunOutcome::Halted);
                }
            }
            Step::Executed | Step::Stalled => {}
        }
    }
}

/// The code address a CALL at `pc` pushes.
pub fn return_address(pc: usize) -> CodeAddr {
    pc as CodeAddr + 1
}
