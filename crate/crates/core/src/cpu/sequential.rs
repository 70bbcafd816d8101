use super::{standalone_syscall, ExecError, Machine};
use crate::isa::{Imm, Instruction, Operand, Program};
use crate::mem::{access, MemOp};

/// In-order reference interpreter: no prediction, no speculation.
///
/// Caches are updated by every access so timing-dependent programs still see
/// realistic latencies, but the RSB and BTB are never consulted. Stops at HALT
/// (or SYSCALL EXIT); exceeding `budget` instructions is an error.
pub fn run_sequential(p: &Program, mut m: Machine, budget: u64) -> Result<Machine, ExecError> {
    assert!(m.spec.is_empty(), "sequential run on a speculating machine");
    let mut executed = 0u64;
    while !m.halted && !p.is_empty() {
        if executed == budget {
            return Err(ExecError::BudgetExceeded);
        }
        executed += 1;
        let pc = m.regs.pc;
        let ins = *p.get(pc).ok_or(ExecError::InvalidPc(pc))?;
        let mut next = pc + 1;
        let mut cost = 1;
        let r = &mut m.regs;
        let val = |r: &super::RegisterFile, o: Operand| match o {
            Operand::Reg(x) => r.get(x),
            Operand::Imm(i) => i as u64,
        };
        match ins {
            Instruction::MovImm { dst, imm } => r.set(
                dst,
                match imm {
                    Imm::Value(v) => v as u64,
                    Imm::Code(c) => c as u64,
                },
            ),
            Instruction::MovReg { dst, src } => {
                let v = r.get(src);
                r.set(dst, v)
            }
            Instruction::Add { dst, src } => {
                let v = r.get(dst).wrapping_add(val(r, src));
                r.set(dst, v)
            }
            Instruction::Sub { dst, src } => {
                let v = r.get(dst).wrapping_sub(val(r, src));
                r.set(dst, v)
            }
            Instruction::And { dst, src } => {
                let v = r.get(dst) & val(r, src);
                r.set(dst, v)
            }
            Instruction::Shl { dst, amount } => {
                let v = r.get(dst) << (val(r, amount) % 64);
                r.set(dst, v)
            }
            Instruction::Load { dst, addr, width } => {
                let a = r.effective_address(&addr);
                if !m.space.contains(a, width.bytes() as u64) {
                    return Err(ExecError::UnmappedAccess { pc, addr: a });
                }
                let (v, lat) = access(&mut m.caches, &mut m.memory, a, MemOp::Read(width), false);
                m.regs.set(dst, v);
                cost = lat;
            }
            Instruction::Store { src, addr, width } => {
                let a = r.effective_address(&addr);
                if !m.space.contains(a, width.bytes() as u64) {
                    return Err(ExecError::UnmappedAccess { pc, addr: a });
                }
                let v = r.get(src);
                cost = access(&mut m.caches, &mut m.memory, a, MemOp::Write(width, v), false).1;
            }
            Instruction::CallDirect { .. } | Instruction::CallIndirect { .. } => {
                let target = match ins {
                    Instruction::CallDirect { target } => target,
                    Instruction::CallIndirect { reg } => r.get(reg) as usize,
                    _ => unreachable!(),
                };
                let sp = r.sp.wrapping_sub(8);
                if !m.space.contains(sp, 8) {
                    return Err(ExecError::UnmappedAccess { pc, addr: sp });
                }
                cost = access(&mut m.caches, &mut m.memory, sp, MemOp::Write(crate::isa::Width::Quad, pc as u64 + 1), false).1;
                m.regs.sp = sp;
                next = target;
            }
            Instruction::Ret => {
                let sp = r.sp;
                if sp >= m.stack_top {
                    return Err(ExecError::StackUnderflow { pc });
                }
                if !m.space.contains(sp, 8) {
                    return Err(ExecError::UnmappedAccess { pc, addr: sp });
                }
                let (v, lat) = access(&mut m.caches, &mut m.memory, sp, MemOp::Read(crate::isa::Width::Quad), false);
                m.regs.sp = sp + 8;
                next = v as usize;
                cost = lat;
            }
            Instruction::Jmp { target } => next = target,
            Instruction::Beq { lhs, rhs, target } => {
                if r.get(lhs) == val(r, rhs) {
                    next = target
                }
            }
            Instruction::Bne { lhs, rhs, target } => {
                if r.get(lhs) != val(r, rhs) {
                    next = target
                }
            }
            Instruction::Clflush { addr } => {
                let a = r.effective_address(&addr);
                m.caches.clflush(a)
            }
            Instruction::Rdtsc { dst } => r.set(dst, m.cycle),
            Instruction::Fence | Instruction::Pause => {}
            Instruction::Syscall { number } => {
                if standalone_syscall(r, number)? {
                    m.halted = true;
                }
            }
            Instruction::Halt => {
                m.halted = true;
                next = pc;
            }
        }
        m.cycle += cost;
        m.regs.pc = next;
        m.stats.committed += 1;
    }
    if p.is_empty() {
        m.halted = true;
    }
    Ok(m)
}
