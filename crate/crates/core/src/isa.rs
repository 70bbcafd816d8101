//! Toy instruction set, its textual assembly format, assembler and disassembler.
//!
//! Code addresses are instruction indices. A return address stored on the
//! simulated stack is the index of the instruction following the call, encoded
//! as a 64-bit little-endian word.
//!
//! Grammar, one statement per line:
//!
//! ```text
//! line    := [label ':'] [mnemonic operands] [';' comment]
//! mem     := '[' reg ('+' reg)? (('+' | '-') imm)? ']'
//! .data ADDR byte,byte,...
//! .entry LABEL
//! ```
//!
//! Registers are `r0`..`r15` and `sp`. The common x86-64 names (`rax`, `rbx`,
//! `rcx`, `rdx`, `rbp`, `rsi`, `rdi`, `rsp`) are accepted as aliases and are
//! always printed back in canonical form.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A register id: 0..=15 are the general registers, 16 is the stack pointer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub const SP: Reg = Reg(16);

    /// General register `r{n}`; panics if `n > 15`.
    pub const fn r(n: u8) -> Reg {
        assert!(n < 16, "general registers are r0..r15");
        Reg(n)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_sp(self) -> bool {
        self.0 == 16
    }

    pub fn parse(name: &str) -> Option<Reg> {
        let lower = name.to_ascii_lowercase();
        let alias = match lower.as_str() {
            "sp" | "rsp" => return Some(Reg::SP),
            "rax" => 0,
            "rcx" => 1,
            "rdx" => 2,
            "rbx" => 3,
            "rbp" => 5,
            "rsi" => 6,
            "rdi" => 7,
            other => {
                let n: u8 = other.strip_prefix('r')?.parse().ok()?;
                if other.len() > 1 && other.as_bytes()[1] == b'0' && other.len() > 2 {
                    return None;
                }
                return (n < 16).then_some(Reg(n));
            }
        };
        Some(Reg(alias))
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_sp() {
            f.write_str("sp")
        } else {
            write!(f, "r{}", self.0)
        }
    }
}

/// Second operand of ALU and compare instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
}

/// Immediate of a `mov`: either a plain value or a code address resolved from a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Imm {
    Value(i64),
    Code(usize),
}

impl Imm {
    pub fn bits(self) -> u64 {
        match self {
            Imm::Value(v) => v as u64,
            Imm::Code(c) => c as u64,
        }
    }
}

/// `[base + index + disp]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemOperand {
    pub base: Reg,
    pub index: Option<Reg>,
    pub disp: i64,
}

impl MemOperand {
    pub fn base(base: Reg) -> Self {
        MemOperand { base, index: None, disp: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Width {
    Byte,
    Quad,
}

impl Width {
    pub fn bytes(self) -> usize {
        match self {
            Width::Byte => 1,
            Width::Quad => 8,
        }
    }
}

/// The instruction vocabulary, as a flat opcode tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Opcode {
    MovImm,
    MovReg,
    Add,
    Sub,
    And,
    Shl,
    Load,
    Store,
    CallDirect,
    CallIndirect,
    Ret,
    Jmp,
    Beq,
    Bne,
    Clflush,
    Rdtsc,
    Fence,
    Pause,
    Syscall,
    Halt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instruction {
    MovImm {
        dst: Reg,
        imm: Imm,
    },
    MovReg {
        dst: Reg,
        src: Reg,
    },
    Add {
        dst: Reg,
        src: Operand,
    },
    Sub {
        dst: Reg,
        src: Operand,
    },
    And {
        dst: Reg,
        src: Operand,
    },
    /// Shift left; an immediate amount is in 0..=63, a register amount is taken mod 64.
    Shl {
        dst: Reg,
        amount: Operand,
    },
    Load {
        dst: Reg,
        addr: MemOperand,
        width: Width,
    },
    Store {
        src: Reg,
        addr: MemOperand,
        width: Width,
    },
    CallDirect {
        target: usize,
    },
    CallIndirect {
        reg: Reg,
    },
    Ret,
    Jmp {
        target: usize,
    },
    Beq {
        lhs: Reg,
        rhs: Operand,
        target: usize,
    },
    Bne {
        lhs: Reg,
        rhs: Operand,
        target: usize,
    },
    Clflush {
        addr: MemOperand,
    },
    Rdtsc {
        dst: Reg,
    },
    Fence,
    Pause,
    /// Syscall number in the immediate; argument and result travel in r0.
    Syscall {
        number: u64,
    },
    Halt,
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        use Instruction::*;
        match self {
            MovImm { .. } => Opcode::MovImm,
            MovReg { .. } => Opcode::MovReg,
            Add { .. } => Opcode::Add,
            Sub { .. } => Opcode::Sub,
            And { .. } => Opcode::And,
            Shl { .. } => Opcode::Shl,
            Load { .. } => Opcode::Load,
            Store { .. } => Opcode::Store,
            CallDirect { .. } => Opcode::CallDirect,
            CallIndirect { .. } => Opcode::CallIndirect,
            Ret => Opcode::Ret,
            Jmp { .. } => Opcode::Jmp,
            Beq { .. } => Opcode::Beq,
            Bne { .. } => Opcode::Bne,
            Clflush { .. } => Opcode::Clflush,
            Rdtsc { .. } => Opcode::Rdtsc,
            Fence => Opcode::Fence,
            Pause => Opcode::Pause,
            Syscall { .. } => Opcode::Syscall,
            Halt => Opcode::Halt,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        use Instruction::*;
        match self {
            MovImm { .. } | MovReg { .. } => "mov",
            Add { .. } => "add",
            Sub { .. } => "sub",
            And { .. } => "and",
            Shl { .. } => "shl",
            Load { width: Width::Quad, .. } => "load",
            Load { width: Width::Byte, .. } => "loadb",
            Store { width: Width::Quad, .. } => "store",
            Store { width: Width::Byte, .. } => "storeb",
            CallDirect { .. } | CallIndirect { .. } => "call",
            Ret => "ret",
            Jmp { .. } => "jmp",
            Beq { .. } => "beq",
            Bne { .. } => "bne",
            Clflush { .. } => "clflush",
            Rdtsc { .. } => "rdtsc",
            Fence => "fence",
            Pause => "pause",
            Syscall { .. } => "syscall",
            Halt => "halt",
        }
    }

    pub fn is_call(&self) -> bool {
        matches!(self, Instruction::CallDirect { .. } | Instruction::CallIndirect { .. })
    }

    /// Statically known control-flow target, if any.
    pub fn target(&self) -> Option<usize> {
        match *self {
            Instruction::CallDirect { target }
            | Instruction::Jmp { target }
            | Instruction::Beq { target, .. }
            | Instruction::Bne { target, .. } => Some(target),
            _ => None,
        }
    }

    /// Every code address embedded in the instruction (branch targets and code immediates).
    pub fn code_refs(&self) -> Option<usize> {
        match *self {
            Instruction::MovImm { imm: Imm::Code(c), .. } => Some(c),
            _ => self.target(),
        }
    }

    /// Rewrites every embedded code address through `f`.
    pub fn map_code_refs(self, f: impl Fn(usize) -> usize) -> Instruction {
        use Instruction::*;
        match self {
            MovImm { dst, imm: Imm::Code(c) } => MovImm { dst, imm: Imm::Code(f(c)) },
            CallDirect { target } => CallDirect { target: f(target) },
            Jmp { target } => Jmp { target: f(target) },
            Beq { lhs, rhs, target } => Beq { lhs, rhs, target: f(target) },
            Bne { lhs, rhs, target } => Bne { lhs, rhs, target: f(target) },
            other => other,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSegment {
    pub addr: u64,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
    pub data: Vec<DataSegment>,
    pub entry: usize,
}

impl Program {
    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn get(&self, pc: usize) -> Option<&Instruction> {
        self.instructions.get(pc)
    }

    pub fn label(&self, name: &str) -> Option<usize> {
        self.labels.get(name).copied()
    }

    /// Panicking label lookup for scenario builders whose labels are fixed.
    pub fn addr_of(&self, name: &str) -> usize {
        self.label(name).unwrap_or_else(|| panic!("no label `{name}` in program"))
    }

    /// Checks the structural invariants an assembled program must satisfy.
    pub fn validate(&self) -> Result<(), ProgramError> {
        let len = self.instructions.len();
        for (i, ins) in self.instructions.iter().enumerate() {
            if let Some(t) = ins.code_refs() {
                if t >= len {
                    return Err(ProgramError::TargetOutOfRange { index: i, target: t });
                }
            }
            if let Instruction::Shl { amount: Operand::Imm(a), .. } = ins {
                if !(0..=63).contains(a) {
                    return Err(ProgramError::ShiftOutOfRange { index: i });
                }
            }
        }
        if len > 0 && self.entry >= len {
            return Err(ProgramError::EntryOutOfRange(self.entry));
        }
        let mut seen = HashMap::new();
        for (name, &idx) in &self.labels {
            if idx > len {
                return Err(ProgramError::LabelOutOfRange(name.clone()));
            }
            if let Some(other) = seen.insert(idx, name) {
                return Err(ProgramError::LabelNotInjective(other.clone(), name.clone()));
            }
        }
        let mut segs: Vec<_> = self.data.iter().filter(|s| !s.bytes.is_empty()).collect();
        segs.sort_by_key(|s| s.addr);
        for w in segs.windows(2) {
            if w[0].addr.saturating_add(w[0].bytes.len() as u64) > w[1].addr {
                return Err(ProgramError::OverlappingData(w[0].addr, w[1].addr));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProgramError {
    #[error("instruction {index}: target {target} outside program")]
    TargetOutOfRange { index: usize, target: usize },
    #[error("instruction {index}: shift amount outside 0..=63")]
    ShiftOutOfRange { index: usize },
    #[error("entry point {0} outside program")]
    EntryOutOfRange(usize),
    #[error("label `{0}` points outside program")]
    LabelOutOfRange(String),
    #[error("labels `{0}` and `{1}` name the same instruction")]
    LabelNotInjective(String, String),
    #[error("data segments at {0:#x} and {1:#x} overlap")]
    OverlappingData(u64, u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("undefined label '{0}'")]
    UndefinedLabel(String),
    #[error("duplicate label '{0}'")]
    DuplicateLabel(String),
    #[error("immediate out of range: {0}")]
    ImmediateOutOfRange(String),
    #[error("unknown mnemonic '{0}'")]
    UnknownMnemonic(String),
    #[error("invalid program: {0}")]
    Invalid(String),
}

fn is_label_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_int(tok: &str) -> Result<i64, AsmErrorKind> {
    let t = tok.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16)
    } else if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit() || b == b'_') {
        body.replace('_', "").parse::<u64>()
    } else {
        return Err(AsmErrorKind::Syntax(format!("expected integer, found '{tok}'")));
    }
    .map_err(|_| AsmErrorKind::ImmediateOutOfRange(tok.to_string()))?;
    if neg {
        if magnitude > 1u64 << 63 {
            return Err(AsmErrorKind::ImmediateOutOfRange(tok.to_string()));
        }
        Ok((magnitude as i64).wrapping_neg())
    } else if body.starts_with("0x") || body.starts_with("0X") {
        // Hex literals may spell any 64-bit pattern.
        Ok(magnitude as i64)
    } else if magnitude > i64::MAX as u64 {
        Err(AsmErrorKind::ImmediateOutOfRange(tok.to_string()))
    } else {
        Ok(magnitude as i64)
    }
}

fn looks_numeric(tok: &str) -> bool {
    let t = tok.trim_start_matches(['-', '+']);
    t.starts_with(|c: char| c.is_ascii_digit())
}

/// Operand with an unresolved label reference.
enum PendingRef {
    None,
    Target(String),
    CodeImm(String),
}

fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' => {
                depth += 1;
                cur.push(c)
            }
            ']' => {
                depth -= 1;
                cur.push(c)
            }
            ',' if depth == 0 => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur);
    }
    out.into_iter().map(|s| s.trim().to_string()).collect()
}

fn reg(tok: &str) -> Result<Reg, AsmErrorKind> {
    Reg::parse(tok).ok_or_else(|| AsmErrorKind::Syntax(format!("expected register, found '{tok}'")))
}

fn operand(tok: &str) -> Result<Operand, AsmErrorKind> {
    match Reg::parse(tok) {
        Some(r) => Ok(Operand::Reg(r)),
        None => parse_int(tok).map(Operand::Imm),
    }
}

fn mem(tok: &str) -> Result<MemOperand, AsmErrorKind> {
    let inner = tok
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| AsmErrorKind::Syntax(format!("expected memory operand, found '{tok}'")))?;
    // Tokenize into signed terms.
    let mut terms: Vec<(bool, String)> = Vec::new();
    let mut cur = String::new();
    let mut neg = false;
    for c in inner.chars() {
        if (c == '+' || c == '-') && !cur.trim().is_empty() {
            terms.push((neg, std::mem::take(&mut cur).trim().to_string()));
            neg = c == '-';
        } else if (c == '+' || c == '-') && terms.is_empty() && cur.trim().is_empty() {
            return Err(AsmErrorKind::Syntax(format!("memory operand must start with a register: '{tok}'")));
        } else if c == '+' || c == '-' {
            return Err(AsmErrorKind::Syntax(format!("malformed memory operand '{tok}'")));
        } else {
            cur.push(c);
        }
    }
    if cur.trim().is_empty() {
        return Err(AsmErrorKind::Syntax(format!("malformed memory operand '{tok}'")));
    }
    terms.push((neg, cur.trim().to_string()));

    let mut iter = terms.into_iter();
    let (_, first) = iter.next().expect("at least one term");
    let base = reg(&first)?;
    let mut index = None;
    let mut disp = None;
    for (neg, t) in iter {
        if let Some(r) = Reg::parse(&t) {
            if neg || index.is_some() || disp.is_some() {
                return Err(AsmErrorKind::Syntax(format!("malformed memory operand '{tok}'")));
            }
            index = Some(r);
        } else {
            if disp.is_some() {
                return Err(AsmErrorKind::Syntax(format!("malformed memory operand '{tok}'")));
            }
            let v = parse_int(&t)?;
            disp = Some(if neg { v.wrapping_neg() } else { v });
        }
    }
    Ok(MemOperand { base, index, disp: disp.unwrap_or(0) })
}

fn expect_n(ops: &[String], n: usize, mnemonic: &str) -> Result<(), AsmErrorKind> {
    if ops.len() != n {
        return Err(AsmErrorKind::Syntax(format!("'{mnemonic}' takes {n} operand(s), found {}", ops.len())));
    }
    Ok(())
}

fn label_ref(tok: &str) -> Result<String, AsmErrorKind> {
    if is_label_name(tok) && Reg::parse(tok).is_none() {
        Ok(tok.to_string())
    } else {
        Err(AsmErrorKind::Syntax(format!("expected label, found '{tok}'")))
    }
}

fn parse_instruction(mnemonic: &str, ops: &[String]) -> Result<(Instruction, PendingRef), AsmErrorKind> {
    use Instruction::*;
    let m = mnemonic.to_ascii_lowercase();
    let none = PendingRef::None;
    let ins = match m.as_str() {
        "mov" => {
            expect_n(ops, 2, &m)?;
            let dst = reg(&ops[0])?;
            if let Some(src) = Reg::parse(&ops[1]) {
                MovReg { dst, src }
            } else if looks_numeric(&ops[1]) {
                MovImm { dst, imm: Imm::Value(parse_int(&ops[1])?) }
            } else {
                let l = label_ref(&ops[1])?;
                return Ok((MovImm { dst, imm: Imm::Code(0) }, PendingRef::CodeImm(l)));
            }
        }
        "add" | "sub" | "and" | "shl" => {
            expect_n(ops, 2, &m)?;
            let dst = reg(&ops[0])?;
            let src = operand(&ops[1])?;
            match m.as_str() {
                "add" => Add { dst, src },
                "sub" => Sub { dst, src },
                "and" => And { dst, src },
                _ => {
                    if let Operand::Imm(a) = src {
                        if !(0..=63).contains(&a) {
                            return Err(AsmErrorKind::ImmediateOutOfRange(ops[1].clone()));
                        }
                    }
                    Shl { dst, amount: src }
                }
            }
        }
        "load" | "loadb" => {
            expect_n(ops, 2, &m)?;
            let width = if m == "loadb" { Width::Byte } else { Width::Quad };
            Load { dst: reg(&ops[0])?, addr: mem(&ops[1])?, width }
        }
        "store" | "storeb" => {
            expect_n(ops, 2, &m)?;
            let width = if m == "storeb" { Width::Byte } else { Width::Quad };
            Store { addr: mem(&ops[0])?, src: reg(&ops[1])?, width }
        }
        "call" => {
            expect_n(ops, 1, &m)?;
            if let Some(r) = Reg::parse(&ops[0]) {
                CallIndirect { reg: r }
            } else {
                return Ok((CallDirect { target: 0 }, PendingRef::Target(label_ref(&ops[0])?)));
            }
        }
        "jmp" => {
            expect_n(ops, 1, &m)?;
            return Ok((Jmp { target: 0 }, PendingRef::Target(label_ref(&ops[0])?)));
        }
        "beq" | "bne" => {
            expect_n(ops, 3, &m)?;
            let lhs = reg(&ops[0])?;
            let rhs = operand(&ops[1])?;
            let l = label_ref(&ops[2])?;
            let ins = if m == "beq" { Beq { lhs, rhs, target: 0 } } else { Bne { lhs, rhs, target: 0 } };
            return Ok((ins, PendingRef::Target(l)));
        }
        "clflush" => {
            expect_n(ops, 1, &m)?;
            Clflush { addr: mem(&ops[0])? }
        }
        "rdtsc" => {
            expect_n(ops, 1, &m)?;
            Rdtsc { dst: reg(&ops[0])? }
        }
        "syscall" => {
            expect_n(ops, 1, &m)?;
            let n = parse_int(&ops[0])?;
            if n < 0 {
                return Err(AsmErrorKind::ImmediateOutOfRange(ops[0].clone()));
            }
            Syscall { number: n as u64 }
        }
        "ret" | "fence" | "pause" | "halt" => {
            expect_n(ops, 0, &m)?;
            match m.as_str() {
                "ret" => Ret,
                "fence" => Fence,
                "pause" => Pause,
                _ => Halt,
            }
        }
        _ => return Err(AsmErrorKind::UnknownMnemonic(mnemonic.to_string())),
    };
    Ok((ins, none))
}

/// Assembles source text into a [`Program`] with all labels resolved.
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut instructions = Vec::new();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut pending: Vec<(usize, usize, PendingRef)> = Vec::new();
    let mut data = Vec::new();
    let mut entry_label: Option<(usize, String)> = None;

    for (lineno, raw) in source.lines().enumerate() {
        let line_no = lineno + 1;
        let err = |kind| AsmError { line: line_no, kind };
        let mut line = raw.split(';').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }

        if let Some(rest) = line.strip_prefix(".data") {
            if !rest.starts_with(char::is_whitespace) {
                return Err(err(AsmErrorKind::Syntax(format!("unknown directive '{line}'"))));
            }
            let rest = rest.trim();
            let (addr_tok, bytes_tok) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
            let addr = parse_int(addr_tok).map_err(err)? as u64;
            let mut bytes = Vec::new();
            for b in bytes_tok.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let v = parse_int(b).map_err(err)?;
                if !(0..=255).contains(&v) {
                    return Err(err(AsmErrorKind::ImmediateOutOfRange(b.to_string())));
                }
                bytes.push(v as u8);
            }
            data.push(DataSegment { addr, bytes });
            continue;
        }
        if let Some(rest) = line.strip_prefix(".entry") {
            let name = rest.trim();
            if !rest.starts_with(char::is_whitespace) || !is_label_name(name) {
                return Err(err(AsmErrorKind::Syntax(format!("malformed .entry directive '{line}'"))));
            }
            entry_label = Some((line_no, name.to_string()));
            continue;
        }

        if let Some((head, tail)) = line.split_once(':') {
            let name = head.trim();
            if is_label_name(name) && !head.contains('[') {
                if Reg::parse(name).is_some() {
                    return Err(err(AsmErrorKind::Syntax(format!("register name '{name}' used as label"))));
                }
                if labels.insert(name.to_string(), instructions.len()).is_some() {
                    return Err(err(AsmErrorKind::DuplicateLabel(name.to_string())));
                }
                line = tail.trim();
                if line.is_empty() {
                    continue;
                }
            } else {
                return Err(err(AsmErrorKind::Syntax(format!("malformed label '{}'", head.trim()))));
            }
        }

        let (mnemonic, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let ops = split_operands(rest);
        let (ins, pref) = parse_instruction(mnemonic, &ops).map_err(err)?;
        pending.push((line_no, instructions.len(), pref));
        instructions.push(ins);
    }

    // Resolve label references.
    for (line, idx, pref) in pending {
        let resolve = |name: &str| labels.get(name).copied().ok_or(AsmError { line, kind: AsmErrorKind::UndefinedLabel(name.to_string()) });
        let ins = &mut instructions[idx];
        match pref {
            PendingRef::None => {}
            PendingRef::Target(name) => {
                let t = resolve(&name)?;
                *ins = ins.map_code_refs(|_| t);
            }
            PendingRef::CodeImm(name) => {
                let t = resolve(&name)?;
                if let Instruction::MovImm { dst, .. } = *ins {
                    *ins = Instruction::MovImm { dst, imm: Imm::Code(t) };
                }
            }
        }
    }

    let entry = match entry_label {
        Some((line, name)) => *labels.get(&name).ok_or(AsmError { line, kind: AsmErrorKind::UndefinedLabel(name.clone()) })?,
        None => 0,
    };

    let mut program = Program { instructions, labels, data, entry };
    // Label map must be injective; with several labels on one index keep the first.
    dedup_labels(&mut program);
    program.validate().map_err(|e| AsmError { line: source.lines().count().max(1), kind: AsmErrorKind::Invalid(e.to_string()) })?;
    Ok(program)
}

/// Several source labels may name one instruction; the program keeps a single
/// canonical name per index (lexicographically smallest).
fn dedup_labels(p: &mut Program) {
    let mut by_index: BTreeMap<usize, String> = BTreeMap::new();
    for (name, &idx) in &p.labels {
        by_index.entry(idx).or_insert_with(|| name.clone());
    }
    p.labels = by_index.into_iter().map(|(i, n)| (n, i)).collect();
}

fn fmt_operand(op: &Operand) -> String {
    match op {
        Operand::Reg(r) => r.to_string(),
        Operand::Imm(v) => v.to_string(),
    }
}

fn fmt_mem(m: &MemOperand) -> String {
    let mut s = format!("[{}", m.base);
    if let Some(i) = m.index {
        let _ = write!(s, " + {i}");
    }
    if m.disp > 0 {
        let _ = write!(s, " + {:#x}", m.disp);
    } else if m.disp < 0 {
        let _ = write!(s, " - {:#x}", (m.disp as i128).unsigned_abs());
    }
    s.push(']');
    s
}

/// Renders a single instruction, naming code addresses through `name`.
pub fn format_instruction(ins: &Instruction, name: &dyn Fn(usize) -> String) -> String {
    use Instruction::*;
    let m = ins.mnemonic();
    match ins {
        MovImm { dst, imm: Imm::Value(v) } => format!("{m} {dst}, {v}"),
        MovImm { dst, imm: Imm::Code(c) } => format!("{m} {dst}, {}", name(*c)),
        MovReg { dst, src } => format!("{m} {dst}, {src}"),
        Add { dst, src } | Sub { dst, src } | And { dst, src } => format!("{m} {dst}, {}", fmt_operand(src)),
        Shl { dst, amount } => format!("{m} {dst}, {}", fmt_operand(amount)),
        Load { dst, addr, .. } => format!("{m} {dst}, {}", fmt_mem(addr)),
        Store { src, addr, .. } => format!("{m} {}, {src}", fmt_mem(addr)),
        CallDirect { target } | Jmp { target } => format!("{m} {}", name(*target)),
        CallIndirect { reg } => format!("{m} {reg}"),
        Beq { lhs, rhs, target } | Bne { lhs, rhs, target } => {
            format!("{m} {lhs}, {}, {}", fmt_operand(rhs), name(*target))
        }
        Clflush { addr } => format!("{m} {}", fmt_mem(addr)),
        Rdtsc { dst } => format!("{m} {dst}"),
        Syscall { number } => format!("{m} {number}"),
        Ret | Fence | Pause | Halt => m.to_string(),
    }
}

/// Renders a program back to assembly text that reassembles to the same instruction list.
pub fn disassemble(p: &Program) -> String {
    let mut names: BTreeMap<usize, String> = p.labels.iter().map(|(n, &i)| (i, n.clone())).collect();
    let mut needed: Vec<usize> = p.instructions.iter().filter_map(Instruction::code_refs).collect();
    if p.entry != 0 && !p.is_empty() {
        needed.push(p.entry);
    }
    for idx in needed {
        names.entry(idx).or_insert_with(|| {
            let mut candidate = format!("L{idx}");
            while p.labels.contains_key(&candidate) {
                candidate.push('_');
            }
            candidate
        });
    }

    let mut out = String::new();
    for seg in &p.data {
        let bytes: Vec<String> = seg.bytes.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(out, ".data {:#x} {}", seg.addr, bytes.join(","));
    }
    if p.entry != 0 && !p.is_empty() {
        let _ = writeln!(out, ".entry {}", names[&p.entry]);
    }
    let name = |i: usize| names.get(&i).cloned().unwrap_or_else(|| i.to_string());
    for (i, ins) in p.instructions.iter().enumerate() {
        if let Some(n) = names.get(&i) {
            let _ = writeln!(out, "{n}:");
        }
        let _ = writeln!(out, "{}", format_instruction(ins, &name));
    }
    if let Some(n) = names.get(&p.len()) {
        let _ = writeln!(out, "{n}:");
    }
    if out.ends_with('\n') {
        out.pop();
    }
    out
}
