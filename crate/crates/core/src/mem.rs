//! Two-level inclusive cache hierarchy and flat physical memory.

use rustc_hash::FxHashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::Width;

pub const PAGE_SIZE: u64 = 4096;

/// Reserved physical range used for eviction-set walks. Never mapped into a process.
pub const EVICTION_BASE: u64 = 0x7f00_0000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub line_size: u64,
    pub l1_sets: usize,
    pub l1_ways: usize,
    pub llc_sets: usize,
    pub llc_ways: usize,
    pub lat_l1: u64,
    pub lat_llc: u64,
    pub lat_mem: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { line_size: 64, l1_sets: 64, l1_ways: 8, llc_sets: 2048, llc_ways: 16, lat_l1: 4, lat_llc: 40, lat_mem: 200 }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheConfigError {
    #[error("cache.{0} must be positive")]
    NotPositive(&'static str),
    #[error("cache.line_size must be a power of two")]
    LineSize,
    #[error("cache.llc_sets must be a multiple of cache.l1_sets")]
    SetRatio,
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheConfigError> {
        let fields = [
            ("line_size", self.line_size as usize),
            ("l1_sets", self.l1_sets),
            ("l1_ways", self.l1_ways),
            ("llc_sets", self.llc_sets),
            ("llc_ways", self.llc_ways),
            ("lat_l1", self.lat_l1 as usize),
            ("lat_llc", self.lat_llc as usize),
            ("lat_mem", self.lat_mem as usize),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(CacheConfigError::NotPositive(name));
        }
        if !self.line_size.is_power_of_two() {
            return Err(CacheConfigError::LineSize);
        }
        if !self.llc_sets.is_multiple_of(self.l1_sets) {
            return Err(CacheConfigError::SetRatio);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HitLevel {
    L1,
    Llc,
    Memory,
}

const INVALID: u64 = u64::MAX;

/// One set-associative level. Each set is a slice ordered by recency:
/// position 0 is most recently used, position `ways - 1` is the LRU victim.
/// A line's LRU age is therefore its position.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Level {
    sets: usize,
    ways: usize,
    lines: Vec<u64>,
}

impl Level {
    fn new(sets: usize, ways: usize) -> Self {
        Level { sets, ways, lines: vec![INVALID; sets * ways] }
    }

    fn set_mut(&mut self, line: u64) -> &mut [u64] {
        let s = (line % self.sets as u64) as usize;
        &mut self.lines[s * self.ways..(s + 1) * self.ways]
    }

    fn set(&self, line: u64) -> &[u64] {
        let s = (line % self.sets as u64) as usize;
        &self.lines[s * self.ways..(s + 1) * self.ways]
    }

    fn contains(&self, line: u64) -> bool {
        self.set(line).contains(&line)
    }

    /// Moves `line` to MRU if present.
    fn touch(&mut self, line: u64) -> bool {
        let set = self.set_mut(line);
        match set.iter().position(|&l| l == line) {
            Some(p) => {
                set[..=p].rotate_right(1);
                true
            }
            None => false,
        }
    }

    /// Inserts `line` as MRU, returning the evicted line if the set was full.
    fn fill(&mut self, line: u64) -> Option<u64> {
        let set = self.set_mut(line);
        set.rotate_right(1);
        let victim = std::mem::replace(&mut set[0], line);
        (victim != INVALID).then_some(victim)
    }

    fn remove(&mut self, line: u64) -> bool {
        let set = self.set_mut(line);
        match set.iter().position(|&l| l == line) {
            Some(p) => {
                set[p..].rotate_left(1);
                let last = set.len() - 1;
                set[last] = INVALID;
                true
            }
            None => false,
        }
    }

    fn resident(&self, set_index: usize) -> impl Iterator<Item = u64> + '_ {
        self.lines[set_index * self.ways..(set_index + 1) * self.ways].iter().copied().filter(|&l| l != INVALID)
    }
}

/// Inclusive L1 + LLC with LRU replacement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheHierarchy {
    config: CacheConfig,
    l1: Level,
    llc: Level,
}

impl CacheHierarchy {
    pub fn new(config: CacheConfig) -> Self {
        config.validate().expect("invalid cache configuration");
        CacheHierarchy { config, l1: Level::new(config.l1_sets, config.l1_ways), llc: Level::new(config.llc_sets, config.llc_ways) }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn line_of(&self, addr: u64) -> u64 {
        addr / self.config.line_size
    }

    pub fn latency_of(&self, level: HitLevel) -> u64 {
        match level {
            HitLevel::L1 => self.config.lat_l1,
            HitLevel::Llc => self.config.lat_llc,
            HitLevel::Memory => self.config.lat_mem,
        }
    }

    /// Where `addr` currently resides, without changing any state.
    pub fn level_of(&self, addr: u64) -> HitLevel {
        let line = self.line_of(addr);
        if self.l1.contains(line) {
            HitLevel::L1
        } else if self.llc.contains(line) {
            HitLevel::Llc
        } else {
            HitLevel::Memory
        }
    }

    pub fn is_cached(&self, addr: u64) -> bool {
        self.level_of(addr) != HitLevel::Memory
    }

    pub fn in_l1(&self, addr: u64) -> bool {
        self.l1.contains(self.line_of(addr))
    }

    /// Touches the line holding `addr`, filling both levels on a miss. Returns the latency.
    pub fn touch(&mut self, addr: u64) -> u64 {
        let line = self.line_of(addr);
        let level = if self.l1.touch(line) {
            HitLevel::L1
        } else if self.llc.touch(line) {
            self.l1.fill(line);
            HitLevel::Llc
        } else {
            if let Some(victim) = self.llc.fill(line) {
                self.l1.remove(victim);
            }
            self.l1.fill(line);
            HitLevel::Memory
        };
        self.latency_of(level)
    }

    /// Removes the line holding `addr` from every level.
    pub fn clflush(&mut self, addr: u64) {
        let line = self.line_of(addr);
        self.l1.remove(line);
        self.llc.remove(line);
    }

    /// LLC set index of `addr`.
    pub fn llc_set_of(&self, addr: u64) -> usize {
        (self.line_of(addr) % self.config.llc_sets as u64) as usize
    }

    /// Addresses used to walk LLC set `set_index`: `l1_ways + llc_ways` distinct
    /// lines in the eviction region, each mapping to that LLC set and to the
    /// corresponding L1 set.
    pub fn eviction_addresses(&self, set_index: usize) -> Vec<u64> {
        let c = &self.config;
        let sets = c.llc_sets as u64;
        let base_line = EVICTION_BASE / c.line_size;
        let first = base_line + (set_index as u64 + sets - base_line % sets) % sets;
        (0..(c.l1_ways + c.llc_ways) as u64).map(|k| (first + k * sets) * c.line_size).collect()
    }

    /// Evicts every prior resident of LLC set `set_index` (and of the matching
    /// L1 set) by touching eviction lines. Returns the number of accesses made.
    pub fn evict_set_by_walking(&mut self, set_index: usize) -> usize {
        assert!(set_index < self.config.llc_sets, "set index out of range");
        let addrs = self.eviction_addresses(set_index);
        for &a in &addrs {
            self.touch(a);
        }
        addrs.len()
    }

    /// Lines resident in L1 set `s`, MRU first.
    pub fn l1_set(&self, s: usize) -> Vec<u64> {
        self.l1.resident(s).collect()
    }

    /// Lines resident in LLC set `s`, MRU first.
    pub fn llc_set(&self, s: usize) -> Vec<u64> {
        self.llc.resident(s).collect()
    }

    /// Every line resident in L1 (unordered).
    pub fn l1_lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.l1.lines.iter().copied().filter(|&l| l != INVALID)
    }

    /// Every line resident in the LLC (unordered).
    pub fn llc_lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.llc.lines.iter().copied().filter(|&l| l != INVALID)
    }
}

/// Byte-addressed memory backed by 4 KiB pages; unwritten bytes read as zero.
#[derive(Clone, Debug, Default)]
pub struct PhysicalMemory {
    pages: FxHashMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl PhysicalMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read_u8(&self, addr: u64) -> u8 {
        self.pages.get(&(addr / PAGE_SIZE)).map_or(0, |p| p[(addr % PAGE_SIZE) as usize])
    }

    pub fn write_u8(&mut self, addr: u64, value: u8) {
        let page = self.pages.entry(addr / PAGE_SIZE).or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
        page[(addr % PAGE_SIZE) as usize] = value;
    }

    pub fn read(&self, addr: u64, width: Width) -> u64 {
        match width {
            Width::Byte => self.read_u8(addr) as u64,
            Width::Quad => self.read_u64(addr),
        }
    }

    pub fn write(&mut self, addr: u64, width: Width, value: u64) {
        match width {
            Width::Byte => self.write_u8(addr, value as u8),
            Width::Quad => self.write_u64(addr, value),
        }
    }

    pub fn read_u64(&self, addr: u64) -> u64 {
        let off = (addr % PAGE_SIZE) as usize;
        if off <= PAGE_SIZE as usize - 8 {
            return self.pages.get(&(addr / PAGE_SIZE)).map_or(0, |p| u64::from_le_bytes(p[off..off + 8].try_into().unwrap()));
        }
        let mut buf = [0u8; 8];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = self.read_u8(addr.wrapping_add(i as u64));
        }
        u64::from_le_bytes(buf)
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) {
        let off = (addr % PAGE_SIZE) as usize;
        if off <= PAGE_SIZE as usize - 8 {
            let page = self.pages.entry(addr / PAGE_SIZE).or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
            page[off..off + 8].copy_from_slice(&value.to_le_bytes());
            return;
        }
        for (i, b) in value.to_le_bytes().into_iter().enumerate() {
            self.write_u8(addr.wrapping_add(i as u64), b);
        }
    }

    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) {
        for (i, &b) in bytes.iter().enumerate() {
            self.write_u8(addr + i as u64, b);
        }
    }

    pub fn read_bytes(&self, addr: u64, len: usize) -> Vec<u8> {
        (0..len as u64).map(|i| self.read_u8(addr + i)).collect()
    }

    /// Non-zero pages, sorted by page number.
    pub fn nonzero_pages(&self) -> Vec<(u64, &[u8; PAGE_SIZE as usize])> {
        let mut v: Vec<_> = self.pages.iter().filter(|(_, p)| p.iter().any(|&b| b != 0)).map(|(&n, p)| (n, &**p)).collect();
        v.sort_by_key(|(n, _)| *n);
        v
    }

    /// Equality restricted to bytes whose address satisfies `keep`.
    pub fn eq_where(&self, other: &PhysicalMemory, keep: impl Fn(u64) -> bool) -> bool {
        let mut pages: Vec<u64> = self.pages.keys().chain(other.pages.keys()).copied().collect();
        pages.sort_unstable();
        pages.dedup();
        pages.into_iter().all(|n| {
            (0..PAGE_SIZE).all(|off| {
                let a = n * PAGE_SIZE + off;
                !keep(a) || self.read_u8(a) == other.read_u8(a)
            })
        })
    }
}

impl PartialEq for PhysicalMemory {
    fn eq(&self, other: &Self) -> bool {
        self.nonzero_pages() == other.nonzero_pages()
    }
}

impl Eq for PhysicalMemory {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemOp {
    Read(Width),
    Write(Width, u64),
}

/// One memory access through the hierarchy: returns `(value, latency)`.
///
/// Reads fill the caches whether or not they are speculative. A speculative
/// write leaves both memory and cache state untouched and reports the latency
/// the write would have seen; committed writes allocate the line.
pub fn access(caches: &mut CacheHierarchy, memory: &mut PhysicalMemory, addr: u64, op: MemOp, speculative: bool) -> (u64, u64) {
    match op {
        MemOp::Read(w) => {
            let lat = caches.touch(addr);
            (memory.read(addr, w), lat)
        }
        MemOp::Write(_, v) if speculative => (v, caches.latency_of(caches.level_of(addr))),
        MemOp::Write(w, v) => {
            let lat = caches.touch(addr);
            memory.write(addr, w, v);
            (v, lat)
        }
    }
}
