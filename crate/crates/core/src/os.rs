//! Processes sharing one logical core: round-robin scheduling, blocking
//! keystroke reads, and context switches that run kernel code against the RSB.

use std::collections::VecDeque;
use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpu::{
    AddressSpace, ExecError, Machine, MachineConfig, RegisterFile, Step, TraceRecord, SYS_EXIT, SYS_READ_CHAR, SYS_SCHED_YIELD,
};
use crate::isa::Program;
use crate::predictor::CodeAddr;

/// Start of the reserved kernel code range. No user program reaches it.
pub const KERNEL_BASE: CodeAddr = 0xffff_8000_0000_0000;
/// Address written into every RSB entry when flushing on a switch.
pub const KERNEL_BENIGN: CodeAddr = KERNEL_BASE;

/// Return address pushed by the `i`-th kernel-internal call during a switch.
pub fn kernel_return_site(i: usize) -> CodeAddr {
    KERNEL_BASE + 0x100 + i as CodeAddr
}

pub fn is_kernel_addr(a: CodeAddr) -> bool {
    a >= KERNEL_BASE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    RoundRobin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub quantum: u64,
    /// K: matched kernel call/return pairs executed on every switch.
    pub kernel_call_depth: usize,
    pub flush_rsb_on_switch: bool,
    /// Probability that a yield hands the core to a uniformly random ready process.
    pub jitter: f64,
    pub policy: Policy,
    /// Cycles charged per context switch.
    pub switch_cost: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            quantum: 100_000,
            kernel_call_depth: 3,
            flush_rsb_on_switch: false,
            jitter: 0.0,
            policy: Policy::RoundRobin,
            switch_cost: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputEvent {
    pub at_cycle: u64,
    pub ch: u8,
}

/// Keystrokes of `text`, one every `cadence` cycles starting at `start`.
pub fn keystrokes(text: &[u8], start: u64, cadence: u64) -> Vec<InputEvent> {
    text.iter().enumerate().map(|(i, &ch)| InputEvent { at_cycle: start + i as u64 * cadence, ch }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcState {
    Ready,
    Running,
    BlockedOnInput,
    Exited,
}

#[derive(Clone, Debug)]
pub struct Process {
    pub pid: usize,
    pub name: String,
    pub program: Program,
    pub context: RegisterFile,
    /// Private memory; the stack grows down from its end.
    pub range: Range<u64>,
    pub state: ProcState,
    pub affinity: usize,
    pub fault: Option<ExecError>,
}

impl Process {
    pub fn new(name: impl Into<String>, program: Program, range: Range<u64>) -> Self {
        let context = RegisterFile { pc: program.entry, sp: range.end, ..RegisterFile::default() };
        Process { pid: 0, name: name.into(), program, context, range, state: ProcState::Ready, affinity: 0, fault: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchReason {
    Start,
    Yield,
    Block,
    Preempt,
    Exit,
    Wake,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub cycle: u64,
    pub from: Option<usize>,
    pub to: usize,
    pub reason: SwitchReason,
}

impl fmt::Display for SwitchRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let from = self.from.map_or_else(|| "-".to_string(), |p| p.to_string());
        write!(f, "{}\t{}\t{}\t{:?}", self.cycle, from, self.to, self.reason)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SystemTrace {
    pub switches: Vec<SwitchRecord>,
    pub yields: u64,
    pub delivered: Vec<InputEvent>,
    /// Per-process instruction traces, indexed by pid (empty unless tracing is on).
    pub processes: Vec<Vec<TraceRecord>>,
}

impl SystemTrace {
    /// Line-oriented rendering; byte-identical for identical runs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.switches {
            out.push_str(&format!("switch\t{s}\n"));
        }
        for (pid, t) in self.processes.iter().enumerate() {
            for r in t {
                out.push_str(&format!("{pid}\t{r}\n"));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemOutcome {
    /// Every process exited, or all remaining ones wait for input that never comes.
    Finished,
    BudgetExhausted,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OsError {
    #[error("process {pid} range {start:#x}..{end:#x} overlaps another process or the shared range")]
    Overlap { pid: usize, start: u64, end: u64 },
    #[error("no processes")]
    Empty,
}

pub struct System {
    pub machine: Machine,
    pub processes: Vec<Process>,
    pub shared: Range<u64>,
    pub config: SchedulerConfig,
    pub trace: SystemTrace,
    events: VecDeque<InputEvent>,
    pending: VecDeque<u8>,
    current: Option<usize>,
    slice_start: u64,
    rng: ChaCha8Rng,
    tracing: bool,
}

fn overlaps(a: &Range<u64>, b: &Range<u64>) -> bool {
    a.start < b.end && b.start < a.end
}

impl System {
    pub fn new(
        machine: MachineConfig,
        config: SchedulerConfig,
        mut processes: Vec<Process>,
        shared: Range<u64>,
        mut events: Vec<InputEvent>,
        seed: u64,
    ) -> Result<Self, OsError> {
        if processes.is_empty() {
            return Err(OsError::Empty);
        }
        for i in 0..processes.len() {
            let r = processes[i].range.clone();
            if overlaps(&r, &shared) || processes[..i].iter().any(|q| overlaps(&q.range, &r)) {
                return Err(OsError::Overlap { pid: i, start: r.start, end: r.end });
            }
        }
        let mut m = Machine::new(machine);
        for (pid, p) in processes.iter_mut().enumerate() {
            p.pid = pid;
            for seg in &p.program.data {
                m.memory.write_bytes(seg.addr, &seg.bytes);
            }
        }
        events.sort_by_key(|e| e.at_cycle);
        let n = processes.len();
        Ok(System {
            machine: m,
            processes,
            shared,
            config,
            trace: SystemTrace { processes: vec![Vec::new(); n], ..SystemTrace::default() },
            events: events.into(),
            pending: VecDeque::new(),
            current: None,
            slice_start: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tracing: false,
        })
    }

    pub fn enable_trace(&mut self) {
        self.tracing = true;
        self.machine.enable_trace();
    }

    pub fn current(&self) -> Option<usize> {
        self.current
    }

    pub fn remaining_events(&self) -> usize {
        self.events.len()
    }

    fn collect_trace(&mut self) {
        if let (true, Some(cur)) = (self.tracing, self.current) {
            let t = self.machine.take_trace();
            self.trace.processes[cur].extend(t);
        }
    }

    fn deliver_events(&mut self) {
        while self.events.front().is_some_and(|e| e.at_cycle <= self.machine.cycle) {
            let e = self.events.pop_front().unwrap();
            self.trace.delivered.push(e);
            if let Some(p) = self.processes.iter_mut().find(|p| p.state == ProcState::BlockedOnInput) {
                p.context.general[0] = e.ch as u64;
                p.state = ProcState::Ready;
                if Some(p.pid) == self.current {
                    self.machine.regs.general[0] = e.ch as u64;
                }
            } else {
                self.pending.push_back(e.ch);
            }
        }
    }

    /// Next process to run after `after` (or from the start), per policy and jitter.
    fn choose_next(&mut self, after: Option<usize>) -> Option<usize> {
        let n = self.processes.len();
        let ready: Vec<usize> = (0..n).filter(|&i| self.processes[i].state == ProcState::Ready).collect();
        if ready.is_empty() {
            return None;
        }
        if self.config.jitter > 0.0 && self.rng.gen::<f64>() < self.config.jitter {
            let others: Vec<usize> = ready.iter().copied().filter(|&i| Some(i) != after).collect();
            let pool = if others.is_empty() { &ready } else { &others };
            return Some(pool[self.rng.gen_range(0..pool.len())]);
        }
        let start = after.map_or(0, |a| a + 1);
        (0..n).map(|k| (start + k) % n).find(|i| ready.contains(i))
    }

    /// Saves the running context, runs the kernel's call/return pairs (or
    /// flushes the RSB), and loads `to`.
    pub fn context_switch(&mut self, to: usize, reason: SwitchReason) {
        let from = self.current;
        self.collect_trace();
        if let Some(f) = from {
            self.machine.drain();
            self.processes[f].context = self.machine.regs;
            if self.processes[f].state == ProcState::Running {
                self.processes[f].state = ProcState::Ready;
            }
        }
        if reason != SwitchReason::Start {
            let k = self.config.kernel_call_depth;
            for i in 0..k {
                self.machine.rsb.push(kernel_return_site(i));
            }
            for i in (0..k).rev() {
                self.machine.rsb.predict_pop(&self.machine.btb, kernel_return_site(i) - 1);
            }
            if self.config.flush_rsb_on_switch {
                self.machine.rsb.flush_fill(KERNEL_BENIGN);
            }
            self.machine.cycle += self.config.switch_cost;
        }
        let p = &mut self.processes[to];
        p.state = ProcState::Running;
        self.machine.regs = p.context;
        self.machine.space = AddressSpace::Ranges(vec![p.range.clone(), self.shared.clone()]);
        self.machine.stack_top = p.range.end;
        self.machine.halted = false;
        self.current = Some(to);
        self.slice_start = self.machine.cycle;
        self.trace.switches.push(SwitchRecord { cycle: self.machine.cycle, from, to, reason });
    }

    /// Leaves the current process (already in its new state) and dispatches the next one.
    fn reschedule(&mut self, reason: SwitchReason) -> bool {
        self.deliver_events();
        let after = self.current;
        match self.choose_next(after) {
            Some(next) if Some(next) == after => {
                self.processes[next].state = ProcState::Running;
                self.slice_start = self.machine.cycle;
                true
            }
            Some(next) => {
                self.context_switch(next, reason);
                true
            }
            None => {
                // Idle: park the outgoing context and wait for input.
                if let Some(f) = self.current.take() {
                    self.machine.drain();
                    self.collect_trace_for(f);
                    self.processes[f].context = self.machine.regs;
                }
                false
            }
        }
    }

    fn collect_trace_for(&mut self, pid: usize) {
        if self.tracing {
            let t = self.machine.take_trace();
            self.trace.processes[pid].extend(t);
        }
    }

    fn dispatch_syscall(&mut self, cur: usize, number: u64) {
        match number {
            SYS_READ_CHAR => {
                if let Some(ch) = self.pending.pop_front() {
                    self.machine.regs.general[0] = ch as u64;
                } else {
                    self.processes[cur].state = ProcState::BlockedOnInput;
                    self.reschedule(SwitchReason::Block);
                }
            }
            SYS_SCHED_YIELD => {
                self.trace.yields += 1;
                self.processes[cur].state = ProcState::Ready;
                self.reschedule(SwitchReason::Yield);
            }
            SYS_EXIT => {
                self.processes[cur].state = ProcState::Exited;
                self.reschedule(SwitchReason::Exit);
            }
            n => self.fault(cur, ExecError::UnknownSyscall(n)),
        }
    }

    fn fault(&mut self, cur: usize, e: ExecError) {
        self.processes[cur].fault = Some(e);
        self.processes[cur].state = ProcState::Exited;
        self.reschedule(SwitchReason::Exit);
    }

    /// Runs until `budget` more cycles elapse or nothing is left to run.
    pub fn run(&mut self, budget: u64) -> SystemOutcome {
        let limit = self.machine.cycle.saturating_add(budget);
        loop {
            if self.machine.cycle >= limit {
                self.collect_trace();
                return SystemOutcome::BudgetExhausted;
            }
            let Some(cur) = self.current else {
                self.deliver_events();
                let reason = if self.trace.switches.is_empty() { SwitchReason::Start } else { SwitchReason::Wake };
                match self.choose_next(None) {
                    Some(next) => self.context_switch(next, reason),
                    None => match self.events.front() {
                        Some(e) => self.machine.cycle = self.machine.cycle.max(e.at_cycle),
                        None => return SystemOutcome::Finished,
                    },
                }
                continue;
            };
            if self.machine.cycle - self.slice_start >= self.config.quantum {
                self.deliver_events();
                if self.processes.iter().any(|p| p.pid != cur && p.state == ProcState::Ready) {
                    self.processes[cur].state = ProcState::Ready;
                    self.reschedule(SwitchReason::Preempt);
                    continue;
                }
                self.slice_start = self.machine.cycle;
            }
            let step = self.machine.step(&self.processes[cur].program);
            match step {
                Ok(Step::Executed) | Ok(Step::Stalled) => {}
                Ok(Step::Syscall(n)) => self.dispatch_syscall(cur, n),
                Ok(Step::Halted) => {
                    self.processes[cur].state = ProcState::Exited;
                    self.reschedule(SwitchReason::Exit);
                }
                Err(e) => self.fault(cur, e),
            }
        }
    }

    pub fn into_trace(mut self) -> SystemTrace {
        self.collect_trace();
        self.trace
    }
}

/// Builds a [`System`] and runs it for `budget` cycles.
pub fn run_system(
    processes: Vec<Process>,
    events: Vec<InputEvent>,
    machine: MachineConfig,
    config: SchedulerConfig,
    shared: Range<u64>,
    seed: u64,
    budget: u64,
) -> Result<(SystemTrace, SystemOutcome), OsError> {
    let mut sys = System::new(machine, config, processes, shared, events, seed)?;
    sys.enable_trace();
    let outcome = sys.run(budget);
    Ok((sys.into_trace(), outcome))
}

#[cfg(test)]
mod tests;
