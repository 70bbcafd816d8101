use serde::{Deserialize, Serialize};

use super::trace::{RetObservation, TraceEvent};
use super::{imm_value, return_address, ExecError, Machine, PendingStore, RegisterFile, Step};
use crate::isa::{Instruction, Program, Width};
use crate::mem::{access, MemOp};
use crate::predictor::CodeAddr;

/// One open return misprediction window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeculationFrame {
    /// Register state right after the RET retires architecturally; `pc` is the true target.
    pub checkpoint: RegisterFile,
    pub ret_site: usize,
    pub predicted_pc: CodeAddr,
    pub opened_at: u64,
    pub resolve_at: u64,
    pub instructions_executed: u64,
}

impl SpeculationFrame {
    pub fn resume_pc(&self) -> usize {
        self.checkpoint.pc
    }

    pub fn mispredicted(&self) -> bool {
        self.predicted_pc != self.checkpoint.pc as CodeAddr
    }
}

enum Mem {
    Done(u64),
    /// Speculative access that cannot complete before its frames resolve.
    Blocked,
}

impl Machine {
    fn speculating(&self) -> bool {
        !self.spec.is_empty()
    }

    /// Executes (or speculatively executes) one instruction.
    pub fn step(&mut self, p: &Program) -> Result<Step, ExecError> {
        if self.halted {
            return Ok(Step::Halted);
        }
        self.resolve_due(false);
        let pc = self.regs.pc;
        if self.speculating() && self.spec.iter().any(|f| f.instructions_executed >= self.config.core.max_spec_instructions) {
            self.stall(pc, "-");
            return Ok(Step::Stalled);
        }
        let Some(&ins) = p.get(pc) else {
            if self.speculating() {
                self.stall(pc, "-");
                return Ok(Step::Stalled);
            }
            return Err(ExecError::InvalidPc(pc));
        };
        let depth = self.spec.len();
        let r = self.execute(pc, ins)?;
        if r == Step::Stalled {
            self.stall(pc, ins.mnemonic());
            return Ok(r);
        }
        // Count against every frame that was open when this instruction started.
        for f in &mut self.spec[..depth] {
            f.instructions_executed += 1;
        }
        if depth == 0 {
            self.stats.committed += 1;
        } else {
            self.stats.speculative += 1;
        }
        Ok(r)
    }

    fn execute(&mut self, pc: usize, ins: Instruction) -> Result<Step, ExecError> {
        use Instruction::*;
        let mut next = pc + 1;
        let mut cost = 1;
        match ins {
            MovImm { dst, imm } => self.regs.set(dst, imm_value(imm)),
            MovReg { dst, src } => self.regs.set(dst, self.regs.get(src)),
            Add { dst, src } => self.regs.set(dst, self.regs.get(dst).wrapping_add(self.regs.operand(src))),
            Sub { dst, src } => self.regs.set(dst, self.regs.get(dst).wrapping_sub(self.regs.operand(src))),
            And { dst, src } => self.regs.set(dst, self.regs.get(dst) & self.regs.operand(src)),
            Shl { dst, amount } => self.regs.set(dst, self.regs.get(dst) << (self.regs.operand(amount) & 63)),
            Load { dst, addr, width } => {
                let a = self.regs.effective_address(&addr);
                let (v, lat) = match self.mem_load(pc, a, width)? {
                    (Mem::Done(v), lat) => (v, lat),
                    (Mem::Blocked, _) => return Ok(Step::Stalled),
                };
                self.regs.set(dst, v);
                cost = lat;
            }
            Store { src, addr, width } => {
                let a = self.regs.effective_address(&addr);
                match self.store(pc, a, width, self.regs.get(src))? {
                    Mem::Done(lat) => cost = lat,
                    Mem::Blocked => return Ok(Step::Stalled),
                }
            }
            CallDirect { target } => {
                let Mem::Done(lat) = self.push_return(pc)? else { return Ok(Step::Stalled) };
                cost = lat;
                next = target;
            }
            CallIndirect { reg } => {
                let target = self.regs.get(reg);
                let Mem::Done(lat) = self.push_return(pc)? else { return Ok(Step::Stalled) };
                self.btb.update(pc as CodeAddr, target);
                cost = lat;
                next = target as usize;
            }
            Ret => return self.ret(pc),
            Jmp { target } => next = target,
            Beq { lhs, rhs, target } => {
                if self.regs.get(lhs) == self.regs.operand(rhs) {
                    next = target
                }
            }
            Bne { lhs, rhs, target } => {
                if self.regs.get(lhs) != self.regs.operand(rhs) {
                    next = target
                }
            }
            Clflush { addr } => {
                // A speculative flush is dropped: it has no architectural effect to wait for.
                if !self.speculating() {
                    let a = self.regs.effective_address(&addr);
                    self.caches.clflush(a);
                }
            }
            Rdtsc { dst } => self.regs.set(dst, self.cycle),
            Fence => {
                if self.speculating() && self.config.core.fence_drains {
                    return Ok(Step::Stalled);
                }
            }
            Pause => {}
            Syscall { number } => {
                if self.speculating() {
                    return Ok(Step::Stalled);
                }
                self.finish(pc, ins.mnemonic(), cost, pc + 1);
                return Ok(Step::Syscall(number));
            }
            Halt => {
                if self.speculating() {
                    return Ok(Step::Stalled);
                }
                self.finish(pc, ins.mnemonic(), cost, pc);
                self.halted = true;
                return Ok(Step::Halted);
            }
        }
        self.finish(pc, ins.mnemonic(), cost, next);
        Ok(Step::Executed)
    }

    fn finish(&mut self, pc: usize, mnemonic: &'static str, cost: u64, next: usize) {
        let ev = if self.speculating() { TraceEvent::SpecExec } else { TraceEvent::Commit };
        self.push_trace(pc, mnemonic, ev);
        self.cycle += cost;
        self.regs.pc = next;
    }

    fn mem_load(&mut self, pc: usize, addr: u64, width: Width) -> Result<(Mem, u64), ExecError> {
        let len = width.bytes() as u64;
        if !self.speculating() {
            if !self.space.contains(addr, len) {
                return Err(ExecError::UnmappedAccess { pc, addr });
            }
            let (v, lat) = access(&mut self.caches, &mut self.memory, addr, MemOp::Read(width), false);
            return Ok((Mem::Done(v), lat));
        }
        // Speculative loads fill the cache even when they will later fault.
        let lat = self.caches.touch(addr);
        if !self.space.contains(addr, len) {
            return Ok((Mem::Blocked, lat));
        }
        Ok((Mem::Done(self.forwarded_read(addr, width)), lat))
    }

    /// Memory contents as seen through the pending speculative stores.
    fn forwarded_read(&self, addr: u64, width: Width) -> u64 {
        if self.stores.is_empty() {
            return self.memory.read(addr, width);
        }
        let mut v = 0u64;
        for i in 0..width.bytes() as u64 {
            let a = addr.wrapping_add(i);
            let mut b = self.memory.read_u8(a);
            for s in &self.stores {
                let off = a.wrapping_sub(s.addr);
                if off < s.width.bytes() as u64 {
                    b = (s.value >> (8 * off)) as u8;
                }
            }
            v |= (b as u64) << (8 * i);
        }
        v
    }

    fn store(&mut self, pc: usize, addr: u64, width: Width, value: u64) -> Result<Mem, ExecError> {
        let len = width.bytes() as u64;
        if !self.space.contains(addr, len) {
            if self.speculating() {
                return Ok(Mem::Blocked);
            }
            return Err(ExecError::UnmappedAccess { pc, addr });
        }
        let speculative = self.speculating();
        let (_, lat) = access(&mut self.caches, &mut self.memory, addr, MemOp::Write(width, value), speculative);
        if speculative {
            self.stores.push(PendingStore { addr, width, value, tag: self.spec.len() });
        }
        Ok(Mem::Done(lat))
    }

    fn push_return(&mut self, pc: usize) -> Result<Mem, ExecError> {
        let sp = self.regs.sp.wrapping_sub(8);
        let r = self.store(pc, sp, Width::Quad, return_address(pc))?;
        if let Mem::Done(_) = r {
            self.regs.sp = sp;
            self.rsb.push(return_address(pc));
        }
        Ok(r)
    }

    fn ret(&mut self, pc: usize) -> Result<Step, ExecError> {
        let sp = self.regs.sp;
        if sp >= self.stack_top {
            if self.speculating() {
                return Ok(Step::Stalled);
            }
            return Err(ExecError::StackUnderflow { pc });
        }
        let (actual, lat) = match self.mem_load(pc, sp, Width::Quad)? {
            (Mem::Done(v), lat) => (v, lat),
            (Mem::Blocked, _) => return Ok(Step::Stalled),
        };
        let predicted = self.rsb.predict_pop(&self.btb, pc as CodeAddr);
        self.btb.update(pc as CodeAddr, actual);
        let depth = self.spec.len();
        self.push_ret(RetObservation { cycle: self.cycle, ret_site: pc, depth, predicted, actual });

        self.regs.sp = sp.wrapping_add(8);
        self.regs.pc = actual as usize;
        let issue = self.cycle;
        match predicted {
            Some(target) if depth < self.config.core.max_spec_depth => {
                self.push_trace(pc, "ret", TraceEvent::SpecEnter);
                self.spec.push(SpeculationFrame {
                    checkpoint: self.regs,
                    ret_site: pc,
                    predicted_pc: target,
                    opened_at: issue,
                    resolve_at: issue + lat,
                    instructions_executed: 0,
                });
                self.stats.frames_opened += 1;
                self.cycle += 1;
                self.regs.pc = target as usize;
            }
            _ => {
                self.push_trace(pc, "ret", TraceEvent::Stall);
                self.cycle += lat;
            }
        }
        Ok(Step::Executed)
    }

    /// Advances the clock to the earliest pending resolution and resolves what is due.
    fn stall(&mut self, pc: usize, mnemonic: &'static str) {
        let Some(t) = self.spec.iter().map(|f| f.resolve_at).min() else { return };
        self.push_trace(pc, mnemonic, TraceEvent::Stall);
        self.cycle = self.cycle.max(t);
        self.resolve_due(true);
    }

    /// Resolves frames whose true-target load has completed, outermost first.
    /// `force` waives the minimum-instructions rule (used when nothing can execute).
    fn resolve_due(&mut self, force: bool) {
        let floor = self.config.core.min_spec_on_hit.min(self.config.core.max_spec_instructions);
        while let Some(i) = self.spec.iter().position(|f| f.resolve_at <= self.cycle && (force || f.instructions_executed >= floor)) {
            let frame = self.spec[i];
            if frame.mispredicted() {
                self.spec.truncate(i);
                self.stores.retain(|s| s.tag <= i);
                self.regs = frame.checkpoint;
                self.stats.frames_squashed += 1;
                self.push_trace(frame.ret_site, "ret", TraceEvent::SpecSquash);
            } else {
                self.spec.remove(i);
                for s in &mut self.stores {
                    if s.tag > i {
                        s.tag -= 1;
                    }
                }
                self.drain_committed_stores();
                self.stats.frames_committed += 1;
                self.push_trace(frame.ret_site, "ret", TraceEvent::SpecCommit);
            }
        }
    }

    fn drain_committed_stores(&mut self) {
        if !self.stores.iter().any(|s| s.tag == 0) {
            return;
        }
        let memory = &mut self.memory;
        self.stores.retain(|s| {
            if s.tag == 0 {
                memory.write(s.addr, s.width, s.value);
                false
            } else {
                true
            }
        });
    }

    /// Resolves every open frame, advancing the clock as needed.
    pub fn drain(&mut self) {
        while self.speculating() {
            let pc = self.regs.pc;
            self.stall(pc, "-");
        }
    }
}
