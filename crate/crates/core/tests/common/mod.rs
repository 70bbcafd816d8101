//! Random program generator shared by the integration tests.
//!
//! Programs mix arithmetic, loads and stores to a data region, call chains,
//! bounded recursion, stack-line flushes before returns, stores of code
//! addresses, and return-address overwrites that divert into landing blocks.
//! Calls only go to higher-numbered functions (or recurse under a shared
//! counter), so every program terminates.

#![allow(dead_code)]

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsbsim::{MachineConfig, RegisterFile, RsbVariant};

pub const DATA: u64 = 0x5000_0000;
/// Offset of the words that hold code addresses, past every data access.
const CODE_SLOTS: u64 = 0x400;

struct Gen {
    rng: ChaCha8Rng,
    out: String,
    labels: usize,
    landings: Vec<String>,
}

impl Gen {
    fn label(&mut self, stem: &str) -> String {
        self.labels += 1;
        format!("{stem}_{}", self.labels)
    }

    /// Data registers. r6 and r7 only ever hold code addresses, which the
    /// rewrites relocate, so no arithmetic may mix them with data.
    fn reg(&mut self) -> String {
        format!("r{}", self.rng.gen_range(0..6))
    }

    fn line(&mut self, s: &str) {
        self.out.push_str("        ");
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn op(&mut self) {
        let (a, b) = (self.reg(), self.reg());
        let k: i64 = self.rng.gen_range(-50..300);
        let disp = self.rng.gen_range(0..64) * 8;
        let s = match self.rng.gen_range(0..12) {
            0 => format!("mov {a}, {k}"),
            1 => format!("mov {a}, {b}"),
            2 => format!("add {a}, {b}"),
            3 => format!("add {a}, {k}"),
            4 => format!("sub {a}, {b}"),
            5 => format!("and {a}, {}", self.rng.gen_range(0..0x1000)),
            6 => format!("shl {a}, {}", self.rng.gen_range(0..9)),
            7 => format!("load {a}, [r14 + {disp:#x}]"),
            8 => format!("store [r14 + {disp:#x}], {a}"),
            9 => format!("loadb {a}, [r14 + {:#x}]", self.rng.gen_range(0..512)),
            10 => format!("storeb [r14 + {:#x}], {a}", self.rng.gen_range(0..512)),
            _ => format!("clflush [r14 + {disp:#x}]"),
        };
        self.line(&s);
    }

    fn ops(&mut self, lo: usize, hi: usize) {
        for _ in 0..self.rng.gen_range(lo..=hi) {
            self.op();
        }
    }

    /// A forward conditional skip over a few ops.
    fn branch(&mut self) {
        let l = self.label("skip");
        let r = self.reg();
        let k = self.rng.gen_range(0..4);
        let m = if self.rng.gen_bool(0.5) { "beq" } else { "bne" };
        self.line(&format!("{m} {r}, {k}, {l}"));
        self.ops(1, 3);
        self.out.push_str(&format!("{l}:\n"));
    }

    fn function(&mut self, i: usize, n: usize) {
        self.out.push_str(&format!("F{i}:\n"));
        for _ in 0..self.rng.gen_range(1..=4) {
            match self.rng.gen_range(0..10) {
                0..=3 => self.ops(1, 4),
                4 | 5 if i + 1 < n => {
                    let j = self.rng.gen_range(i + 1..n);
                    self.line(&format!("call F{j}"));
                }
                6 => {
                    let l = self.label("norec");
                    self.line(&format!("beq r12, 0, {l}"));
                    self.line("sub r12, 1");
                    self.line(&format!("call F{i}"));
                    self.out.push_str(&format!("{l}:\n"));
                }
                7 => self.branch(),
                8 => {
                    // Store a code address as data.
                    let l = self.landings.choose(&mut self.rng).cloned().unwrap();
                    let disp = CODE_SLOTS + self.rng.gen_range(0..64) * 8;
                    self.line(&format!("mov r7, {l}"));
                    self.line(&format!("store [r14 + {disp:#x}], r7"));
                }
                _ => self.line("load r6, [sp]"),
            }
        }
        if self.rng.gen_bool(0.15) {
            // Divert this return into a landing block.
            let l = self.landings.choose(&mut self.rng).cloned().unwrap();
            self.line(&format!("mov r7, {l}"));
            self.line("store [sp], r7");
        }
        if self.rng.gen_bool(0.5) {
            self.line("clflush [sp]");
        }
        self.line("ret");
    }
}

/// Assembly source for fuzz case `seed`.
pub fn fuzz_source(seed: u64) -> String {
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed), out: String::new(), labels: 0, landings: Vec::new() };
    let n = g.rng.gen_range(1..=6);
    let n_land = g.rng.gen_range(1..=3);
    g.landings = (0..n_land).map(|k| format!("land{k}")).collect();
    let depth = g.rng.gen_range(0..8);
    g.out.push_str(".entry main\nmain:\n");
    g.line(&format!("mov r14, {DATA:#x}"));
    g.line(&format!("mov r12, {depth}"));
    for _ in 0..g.rng.gen_range(1..=5) {
        g.ops(0, 3);
        let j = g.rng.gen_range(0..n);
        g.line(&format!("call F{j}"));
    }
    g.ops(0, 3);
    g.line("halt");
    for i in 0..n {
        g.function(i, n);
    }
    for k in 0..n_land {
        g.out.push_str(&format!("land{k}:\n"));
        g.ops(0, 3);
        g.line("halt");
    }
    let _ = writeln!(g.out, "; fuzz case {seed}");
    g.out
}

/// A machine configuration that varies the predictor so speculation is exercised.
pub fn fuzz_machine(seed: u64) -> MachineConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let rsb_variant = *RsbVariant::ALL.choose(&mut rng).unwrap();
    let rsb_size = *[2usize, 4, 16].choose(&mut rng).unwrap();
    let mut cfg = MachineConfig { rsb_variant, rsb_size, ..MachineConfig::default() };
    cfg.core.max_spec_depth = rng.gen_range(1..=8);
    cfg
}

/// Random initial values for r0..r7.
pub fn fuzz_inputs(seed: u64, n: usize) -> Vec<RegisterFile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
    (0..n)
        .map(|_| {
            let mut r = RegisterFile { sp: rsbsim::cpu::DEFAULT_STACK_TOP, ..RegisterFile::default() };
            for g in &mut r.general[..8] {
                *g = rng.gen_range(0..16);
            }
            r
        })
        .collect()
}

/// Reference RSB. Stop and BTB fallback are a bounded stack that drops its
/// oldest entry. Cyclic predicts the most recent write to the slot the
/// stack position maps to, however long ago it was made.
pub struct RefRsb {
    n: usize,
    variant: RsbVariant,
    stack: std::collections::VecDeque<u64>,
    pos: i64,
    writes: Vec<(i64, u64)>,
}

impl RefRsb {
    pub fn new(n: usize, variant: RsbVariant) -> Self {
        RefRsb { n, variant, stack: Default::default(), pos: -1, writes: Vec::new() }
    }

    pub fn push(&mut self, a: u64) {
        if self.stack.len() == self.n {
            self.stack.pop_front();
        }
        self.stack.push_back(a);
        self.pos += 1;
        self.writes.push((self.pos, a));
    }

    pub fn pop(&mut self, btb: &RefBtb, site: u64) -> Option<u64> {
        match self.variant {
            RsbVariant::Cyclic => {
                let n = self.n as i64;
                let slot = self.pos.rem_euclid(n);
                let hit = self.writes.iter().rev().find(|(p, _)| p.rem_euclid(n) == slot).map(|&(_, a)| a);
                self.pos -= 1;
                self.stack.pop_back();
                hit
            }
            RsbVariant::StopOnUnderflow => self.stack.pop_back().inspect(|_| self.pos -= 1),
            RsbVariant::BtbFallback => match self.stack.pop_back() {
                Some(a) => {
                    self.pos -= 1;
                    Some(a)
                }
                None => btb.lookup(site),
            },
        }
    }
}

/// Reference direct-mapped BTB as a map from slot to the last (source, target).
pub struct RefBtb {
    size: u64,
    slots: std::collections::HashMap<u64, (u64, u64)>,
}

impl RefBtb {
    pub fn new(size: u64) -> Self {
        RefBtb { size, slots: Default::default() }
    }

    pub fn update(&mut self, src: u64, tgt: u64) {
        self.slots.insert(src % self.size, (src, tgt));
    }

    pub fn lookup(&self, src: u64) -> Option<u64> {
        self.slots.get(&(src % self.size)).filter(|(s, _)| *s == src).map(|&(_, t)| t)
    }
}

/// Reference inclusive two-level LRU cache using explicit timestamps.
/// An L1 hit does not refresh the line's LLC recency.
pub struct RefCache {
    cfg: rsbsim::CacheConfig,
    l1: std::collections::HashMap<u64, u64>,
    llc: std::collections::HashMap<u64, u64>,
    now: u64,
}

impl RefCache {
    pub fn new(cfg: rsbsim::CacheConfig) -> Self {
        RefCache { cfg, l1: Default::default(), llc: Default::default(), now: 0 }
    }

    fn insert(map: &mut std::collections::HashMap<u64, u64>, sets: usize, ways: usize, line: u64, now: u64) -> Option<u64> {
        let set = line % sets as u64;
        let members: Vec<(u64, u64)> = map.iter().filter(|(l, _)| *l % sets as u64 == set).map(|(&l, &t)| (l, t)).collect();
        let victim = if members.len() == ways { members.iter().min_by_key(|(_, t)| *t).map(|&(l, _)| l) } else { None };
        if let Some(v) = victim {
            map.remove(&v);
        }
        map.insert(line, now);
        victim
    }

    pub fn touch(&mut self, addr: u64) -> u64 {
        self.now += 1;
        let line = addr / self.cfg.line_size;
        let now = self.now;
        if let Some(t) = self.l1.get_mut(&line) {
            *t = now;
            return self.cfg.lat_l1;
        }
        if let Some(t) = self.llc.get_mut(&line) {
            *t = now;
            Self::insert(&mut self.l1, self.cfg.l1_sets, self.cfg.l1_ways, line, now);
            return self.cfg.lat_llc;
        }
        if let Some(v) = Self::insert(&mut self.llc, self.cfg.llc_sets, self.cfg.llc_ways, line, now) {
            self.l1.remove(&v);
        }
        Self::insert(&mut self.l1, self.cfg.l1_sets, self.cfg.l1_ways, line, now);
        self.cfg.lat_mem
    }

    pub fn clflush(&mut self, addr: u64) {
        let line = addr / self.cfg.line_size;
        self.l1.remove(&line);
        self.llc.remove(&line);
    }
}
