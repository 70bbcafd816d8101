//! Program rewrites that neutralise return misprediction: retpoline-style
//! return trampolines and a fence after every call.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cpu::{run_sequential, ExecError, Machine, MachineConfig, RegisterFile};
use crate::isa::{Instruction, Operand, Program, Reg};
use crate::mem::PAGE_SIZE;

pub const RETPOLINE_SPEC_PREFIX: &str = "__rp_spec_";
pub const RETPOLINE_NEW_PREFIX: &str = "__rp_new_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PassKind {
    Retpoline,
    FenceAfterCall,
}

/// Outcome of one rewrite, with the address translation needed to compare runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardeningPass {
    pub kind: PassKind,
    /// Instructions rewritten (RETs replaced, or CALLs given a fence).
    pub rewritten: usize,
    /// `index_map[i]` is the new index of old instruction `i`; one extra entry maps the end.
    pub index_map: Vec<usize>,
    /// New address control reaches when returning to old address `i`.
    pub return_map: Vec<usize>,
}

impl HardeningPass {
    pub fn identity(len: usize) -> Self {
        let m: Vec<usize> = (0..=len).collect();
        HardeningPass { kind: PassKind::FenceAfterCall, rewritten: 0, index_map: m.clone(), return_map: m }
    }

    /// Whether a value `new` in the hardened run stands for `old` in the original.
    pub fn corresponds(&self, old: u64, new: u64) -> bool {
        if old == new {
            return true;
        }
        match usize::try_from(old) {
            Ok(o) if o < self.index_map.len() => self.index_map[o] as u64 == new || self.return_map[o] as u64 == new,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hardened {
    pub program: Program,
    pub pass: HardeningPass,
}

/// Rebuilds `p` with `expand(i, ins)` producing the replacement of each instruction,
/// remapping every code reference to the first instruction of its replacement.
fn rewrite(
    p: &Program,
    mut expand: impl FnMut(usize, &Instruction) -> Option<(Vec<Instruction>, Vec<(String, usize)>)>,
) -> (Program, Vec<usize>, usize) {
    let mut map = Vec::with_capacity(p.len() + 1);
    let mut pieces = Vec::with_capacity(p.len());
    let mut next = 0;
    let mut rewritten = 0;
    for (i, ins) in p.instructions.iter().enumerate() {
        map.push(next);
        let piece = match expand(i, ins) {
            Some(piece) => {
                rewritten += 1;
                piece
            }
            None => (vec![*ins], Vec::new()),
        };
        next += piece.0.len();
        pieces.push(piece);
    }
    map.push(next);
    let mut out =
        Program { instructions: Vec::with_capacity(next), labels: BTreeMap::new(), data: p.data.clone(), entry: map[p.entry.min(p.len())] };
    for (name, &idx) in &p.labels {
        out.labels.insert(name.clone(), map[idx]);
    }
    for (i, (instrs, labels)) in pieces.into_iter().enumerate() {
        // Local targets inside a piece are relative to the piece start.
        let base = map[i];
        for (name, off) in labels {
            out.labels.insert(name, base + off);
        }
        out.instructions.extend(instrs.into_iter().map(|ins| ins.map_code_refs(|t| if t >= LOCAL { base + (t - LOCAL) } else { map[t] })));
    }
    (out, map, rewritten)
}

/// Marker for piece-relative targets in [`rewrite`].
const LOCAL: usize = usize::MAX / 2;

fn fresh_index(p: &Program) -> usize {
    p.labels
        .keys()
        .filter_map(|k| k.strip_prefix(RETPOLINE_SPEC_PREFIX).and_then(|n| n.parse::<usize>().ok()))
        .map(|n| n + 1)
        .max()
        .unwrap_or(0)
}

/// Indices of RETs that already close a trampoline.
fn trampoline_rets(p: &Program) -> Vec<usize> {
    p.labels.iter().filter(|(k, _)| k.starts_with(RETPOLINE_NEW_PREFIX)).map(|(_, &i)| i + 1).collect()
}

pub fn retpoline(p: &Program) -> Hardened {
    let mut n = fresh_index(p);
    let done = trampoline_rets(p);
    let (program, index_map, rewritten) = rewrite(p, |i, ins| {
        if *ins != Instruction::Ret || done.contains(&i) {
            return None;
        }
        let spec = format!("{RETPOLINE_SPEC_PREFIX}{n}");
        let new = format!("{RETPOLINE_NEW_PREFIX}{n}");
        n += 1;
        Some((
            vec![
                Instruction::CallDirect { target: LOCAL + 3 },
                Instruction::Pause,
                Instruction::Jmp { target: LOCAL + 1 },
                Instruction::Add { dst: Reg::SP, src: Operand::Imm(8) },
                Instruction::Ret,
            ],
            vec![(spec, 1), (new, 3)],
        ))
    });
    let return_map = index_map.clone();
    Hardened { program, pass: HardeningPass { kind: PassKind::Retpoline, rewritten, index_map, return_map } }
}

/// Replaces every RET by `call new; spec: pause; jmp spec; new: add sp, 8; ret`.
/// The RSB then always predicts the harmless `spec` loop. Idempotent.
pub fn apply_retpoline(p: &Program) -> Program {
    retpoline(p).program
}

pub fn fence_after_call(p: &Program) -> Hardened {
    let fenced = |i: usize| p.instructions.get(i + 1) == Some(&Instruction::Fence);
    let (program, index_map, rewritten) =
        rewrite(p, |i, ins| (ins.is_call() && !fenced(i)).then(|| (vec![*ins, Instruction::Fence], Vec::new())));
    // A call's pushed return address now names the inserted fence.
    let mut return_map = index_map.clone();
    for i in 1..p.len() + 1 {
        if p.instructions[i - 1].is_call() && !fenced(i - 1) {
            return_map[i] = index_map[i] - 1;
        }
    }
    Hardened { program, pass: HardeningPass { kind: PassKind::FenceAfterCall, rewritten, index_map, return_map } }
}

/// Inserts a FENCE after every CALL that is not already followed by one.
pub fn apply_fence_after_call(p: &Program) -> Program {
    fence_after_call(p).program
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub input: usize,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub runs: usize,
    pub divergence: Option<Divergence>,
    /// Hardened minus original cycle count, per input.
    pub cycle_overhead: Vec<i64>,
}

impl EquivalenceReport {
    pub fn equivalent(&self) -> bool {
        self.divergence.is_none()
    }

    pub fn overhead_non_negative(&self) -> bool {
        self.cycle_overhead.iter().all(|&c| c >= 0)
    }
}

/// Bytes of stack below `stack_top` excluded from memory comparison: trampolines
/// legitimately leave different scratch values there.
pub const STACK_WINDOW: u64 = 1 << 20;

fn error_shape(e: &ExecError) -> String {
    match e {
        ExecError::InvalidPc(_) => "invalid pc".into(),
        ExecError::StackUnderflow { .. } => "stack underflow".into(),
        other => other.to_string().split_once(": ").map_or_else(|| other.to_string(), |(_, rest)| rest.to_string()),
    }
}

/// Runs `original` and the hardened program under the sequential oracle from each
/// initial register file and reports the first architectural difference.
///
/// Code addresses move under rewriting, so registers and 8-byte-aligned memory
/// words are compared modulo the pass's address translation; stack memory
/// ([`STACK_WINDOW`] below the stack top) is ignored.
pub fn verify_equivalence(
    original: &Program,
    hardened: &Hardened,
    inputs: &[RegisterFile],
    config: MachineConfig,
    budget: u64,
) -> EquivalenceReport {
    let mut report = EquivalenceReport { runs: 0, divergence: None, cycle_overhead: Vec::new() };
    let map = &hardened.pass;
    for (k, regs) in inputs.iter().enumerate() {
        report.runs += 1;
        let start = |p: &Program| {
            let mut m = Machine::with_program(config, p);
            m.regs = RegisterFile { pc: p.entry, ..*regs };
            m
        };
        // The hardened program may execute more instructions for the same work.
        let a = run_sequential(original, start(original), budget);
        let b = run_sequential(&hardened.program, start(&hardened.program), budget.saturating_mul(4));
        let detail = match (&a, &b) {
            (Ok(a), Ok(b)) => {
                report.cycle_overhead.push(b.cycle as i64 - a.cycle as i64);
                compare(a, b, map)
            }
            (Err(x), Err(y)) if error_shape(x) == error_shape(y) => None,
            (x, y) => Some(format!("outcome differs: original {:?}, hardened {:?}", x.as_ref().err(), y.as_ref().err())),
        };
        if let Some(detail) = detail {
            report.divergence = Some(Divergence { input: k, detail });
            break;
        }
    }
    report
}

fn compare(a: &Machine, b: &Machine, map: &HardeningPass) -> Option<String> {
    for r in 0..16 {
        let (x, y) = (a.regs.general[r], b.regs.general[r]);
        if !map.corresponds(x, y) {
            return Some(format!("r{r}: original {x:#x}, hardened {y:#x}"));
        }
    }
    if a.regs.sp != b.regs.sp {
        return Some(format!("sp: original {:#x}, hardened {:#x}", a.regs.sp, b.regs.sp));
    }
    if !map.corresponds(a.regs.pc as u64, b.regs.pc as u64) {
        return Some(format!("pc: original {}, hardened {}", a.regs.pc, b.regs.pc));
    }
    let top = a.stack_top;
    let stack = top.saturating_sub(STACK_WINDOW)..top;
    let mut pages: Vec<u64> = a.memory.nonzero_pages().into_iter().chain(b.memory.nonzero_pages()).map(|(n, _)| n * PAGE_SIZE).collect();
    pages.sort_unstable();
    pages.dedup();
    // Compare aligned words so stored code addresses can be translated.
    for base in pages {
        for addr in (base..base + PAGE_SIZE).step_by(8).filter(|x| !stack.contains(x)) {
            let (x, y) = (a.memory.read_u64(addr), b.memory.read_u64(addr));
            if !map.corresponds(x, y) {
                return Some(format!("memory at {addr:#x}: original {x:#x}, hardened {y:#x}"));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{assemble, disassemble};

    #[test]
    fn single_ret_becomes_trampoline() {
        let p = assemble("ret").unwrap();
        let h = apply_retpoline(&p);
        assert_eq!(h.len(), 5);
        assert_eq!(disassemble(&h), "call __rp_new_0\n__rp_spec_0:\npause\njmp __rp_spec_0\n__rp_new_0:\nadd sp, 8\nret");
        assert_eq!(disassemble(&h).lines().count(), 7);
    }

    #[test]
    fn labels_are_unique_per_site() {
        let p = assemble("call F\ncall G\nhalt\nF: ret\nG: ret").unwrap();
        let h = retpoline(&p);
        assert_eq!(h.pass.rewritten, 2);
        assert!(h.program.labels.contains_key("__rp_spec_0") && h.program.labels.contains_key("__rp_spec_1"));
        assert_eq!(h.program.label("G"), Some(3 + 5));
    }

    #[test]
    fn no_rets_is_unchanged() {
        let p = assemble("mov r0, 1\nhalt").unwrap();
        assert_eq!(apply_retpoline(&p), p);
    }

    #[test]
    fn passes_are_idempotent() {
        let p = assemble("call F\nhalt\nF: call G\nret\nG: ret").unwrap();
        let once = apply_retpoline(&p);
        assert_eq!(apply_retpoline(&once), once);
        let once = apply_fence_after_call(&p);
        assert_eq!(apply_fence_after_call(&once), once);
    }

    #[test]
    fn fence_follows_every_call() {
        let p = assemble("call F\nhalt\nF: ret").unwrap();
        let h = apply_fence_after_call(&p);
        assert_eq!(h.instructions[1], Instruction::Fence);
        assert_eq!(h.len(), 4);
    }

    fn inputs() -> Vec<RegisterFile> {
        (0..4u64).map(|i| RegisterFile { general: [i; 16], sp: crate::cpu::DEFAULT_STACK_TOP, pc: 0 }).collect()
    }

    const CALLS: &str = "
        mov r1, 3
    L:  call F
        sub r1, 1
        bne r1, 0, L
        mov r5, X
        mov r6, 0x4000
        store [r6], r5
        storeb [r0 + 0x5000], r1
        halt
    F:  add r2, r1
        call G
        ret
    G:  add r3, 2
    X:  ret
    ";

    #[test]
    fn identity_has_no_divergence_or_overhead() {
        let p = assemble(CALLS).unwrap();
        let h = Hardened { program: p.clone(), pass: HardeningPass::identity(p.len()) };
        let r = verify_equivalence(&p, &h, &inputs(), MachineConfig::default(), 10_000);
        assert!(r.equivalent());
        assert!(r.cycle_overhead.iter().all(|&c| c == 0));
    }

    #[test]
    fn hardened_programs_are_equivalent_with_overhead() {
        let p = assemble(CALLS).unwrap();
        for h in [retpoline(&p), fence_after_call(&p)] {
            let r = verify_equivalence(&p, &h, &inputs(), MachineConfig::default(), 10_000);
            assert!(r.equivalent(), "{:?}", r.divergence);
            assert!(r.overhead_non_negative());
            assert!(r.cycle_overhead.iter().all(|&c| c > 0));
        }
    }

    #[test]
    fn corrupted_pass_is_detected() {
        let p = assemble(CALLS).unwrap();
        let mut h = retpoline(&p);
        let at = h.program.label("G").unwrap();
        h.program.instructions[at] = Instruction::Add { dst: Reg::r(3), src: Operand::Imm(3) };
        let r = verify_equivalence(&p, &h, &inputs(), MachineConfig::default(), 10_000);
        assert!(r.divergence.unwrap().detail.starts_with("r3"));
    }
}
