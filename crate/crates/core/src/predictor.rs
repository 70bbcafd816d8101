//! Return stack buffer and branch target buffer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Code address as seen by the predictors (instruction index, or a kernel-range address).
pub type CodeAddr = u64;

pub const DEFAULT_RSB_SIZE: usize = 16;
pub const DEFAULT_BTB_SIZE: usize = 256;

/// How the RSB behaves when a return finds it empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RsbVariant {
    /// Stop predicting while the buffer is empty.
    StopOnUnderflow,
    /// Hand the prediction to the BTB while the buffer is empty.
    BtbFallback,
    /// Ring buffer: the top pointer wraps modulo N and predictions never stop.
    Cyclic,
}

impl RsbVariant {
    pub const ALL: [RsbVariant; 3] = [RsbVariant::StopOnUnderflow, RsbVariant::BtbFallback, RsbVariant::Cyclic];

    pub fn key(self) -> &'static str {
        match self {
            RsbVariant::StopOnUnderflow => "stop",
            RsbVariant::BtbFallback => "btb",
            RsbVariant::Cyclic => "cyclic",
        }
    }
}

impl fmt::Display for RsbVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for RsbVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stop" => Ok(RsbVariant::StopOnUnderflow),
            "btb" => Ok(RsbVariant::BtbFallback),
            "cyclic" => Ok(RsbVariant::Cyclic),
            other => Err(format!("unknown RSB variant '{other}' (expected stop, btb or cyclic)")),
        }
    }
}

/// Fixed-size return stack buffer.
///
/// `top` indexes the most recently pushed entry. Slots that were never written
/// hold no address; a cyclic pop landing on one yields no prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReturnStackBuffer {
    entries: Vec<Option<CodeAddr>>,
    top: usize,
    occupancy: usize,
    variant: RsbVariant,
}

impl ReturnStackBuffer {
    pub fn new(capacity: usize, variant: RsbVariant) -> Self {
        assert!(capacity > 0, "RSB capacity must be positive");
        ReturnStackBuffer { entries: vec![None; capacity], top: capacity - 1, occupancy: 0, variant }
    }

    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    pub fn variant(&self) -> RsbVariant {
        self.variant
    }

    pub fn top(&self) -> usize {
        self.top
    }

    /// Entry under the top pointer, without popping.
    pub fn peek(&self) -> Option<CodeAddr> {
        self.entries[self.top]
    }

    /// Entries from oldest slot index 0 to N-1 (raw ring storage).
    pub fn raw_entries(&self) -> &[Option<CodeAddr>] {
        &self.entries
    }

    /// Records a call's return address; a full buffer discards its oldest entry.
    pub fn push(&mut self, return_addr: CodeAddr) {
        let n = self.entries.len();
        self.top = (self.top + 1) % n;
        self.entries[self.top] = Some(return_addr);
        self.occupancy = (self.occupancy + 1).min(n);
    }

    /// Consumes one entry and returns the predicted target of the return at `ret_site`.
    pub fn predict_pop(&mut self, btb: &BranchTargetBuffer, ret_site: CodeAddr) -> Option<CodeAddr> {
        let n = self.entries.len();
        if self.occupancy == 0 {
            match self.variant {
                RsbVariant::StopOnUnderflow => return None,
                RsbVariant::BtbFallback => return btb.lookup(ret_site),
                RsbVariant::Cyclic => {}
            }
        }
        let prediction = self.entries[self.top];
        self.top = (self.top + n - 1) % n;
        self.occupancy = self.occupancy.saturating_sub(1);
        prediction
    }

    /// Overwrites every entry with `benign_addr` and marks the buffer full.
    pub fn flush_fill(&mut self, benign_addr: CodeAddr) {
        self.entries.iter_mut().for_each(|e| *e = Some(benign_addr));
        self.occupancy = self.entries.len();
    }
}

/// Direct-mapped BTB: slot = src mod size, tag = src.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchTargetBuffer {
    slots: Vec<Option<(CodeAddr, CodeAddr)>>,
}

impl BranchTargetBuffer {
    pub fn new(size: usize) -> Self {
        assert!(size.is_power_of_two(), "BTB size must be a power of two");
        BranchTargetBuffer { slots: vec![None; size] }
    }

    pub fn size(&self) -> usize {
        self.slots.len()
    }

    fn slot(&self, src: CodeAddr) -> usize {
        (src & (self.slots.len() as u64 - 1)) as usize
    }

    pub fn update(&mut self, src: CodeAddr, tgt: CodeAddr) {
        let i = self.slot(src);
        self.slots[i] = Some((src, tgt));
    }

    pub fn lookup(&self, src: CodeAddr) -> Option<CodeAddr> {
        match self.slots[self.slot(src)] {
            Some((tag, tgt)) if tag == src => Some(tgt),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pops(rsb: &mut ReturnStackBuffer, btb: &BranchTargetBuffer, k: usize) -> Vec<Option<CodeAddr>> {
        (0..k).map(|_| rsb.predict_pop(btb, 0)).collect()
    }

    #[test]
    fn push_tracks_top_and_occupancy() {
        let mut rsb = ReturnStackBuffer::new(4, RsbVariant::StopOnUnderflow);
        rsb.push(10);
        assert_eq!(rsb.peek(), Some(10));
        assert_eq!(rsb.occupancy(), 1);
    }

    #[test]
    fn overflow_discards_oldest() {
        let btb = BranchTargetBuffer::new(16);
        let mut rsb = ReturnStackBuffer::new(4, RsbVariant::StopOnUnderflow);
        for a in [1, 2, 3, 4, 5] {
            rsb.push(a);
        }
        assert_eq!(rsb.occupancy(), 4);
        assert_eq!(pops(&mut rsb, &btb, 5), vec![Some(5), Some(4), Some(3), Some(2), None]);
    }

    #[test]
    fn seventeenth_push_keeps_occupancy() {
        let mut rsb = ReturnStackBuffer::new(16, RsbVariant::Cyclic);
        for a in 0..16 {
            rsb.push(a);
        }
        assert_eq!(rsb.occupancy(), 16);
        rsb.push(99);
        assert_eq!(rsb.occupancy(), 16);
    }

    #[test]
    fn cyclic_wraps_around() {
        let btb = BranchTargetBuffer::new(16);
        let mut rsb = ReturnStackBuffer::new(4, RsbVariant::Cyclic);
        for a in [0xa, 0xb, 0xc, 0xd] {
            rsb.push(a);
        }
        assert_eq!(pops(&mut rsb, &btb, 5), vec![Some(0xd), Some(0xc), Some(0xb), Some(0xa), Some(0xd)]);
    }

    #[test]
    fn underflow_behaviour_per_variant() {
        let mut btb = BranchTargetBuffer::new(16);
        btb.update(7, 42);
        let mut stop = ReturnStackBuffer::new(4, RsbVariant::StopOnUnderflow);
        assert_eq!(stop.predict_pop(&btb, 7), None);
        let mut fallback = ReturnStackBuffer::new(4, RsbVariant::BtbFallback);
        assert_eq!(fallback.predict_pop(&btb, 7), Some(42));
        assert_eq!(fallback.predict_pop(&btb, 8), None);
    }

    #[test]
    fn flush_fill_then_push() {
        let btb = BranchTargetBuffer::new(16);
        for variant in RsbVariant::ALL {
            let mut rsb = ReturnStackBuffer::new(16, variant);
            for a in 100..116 {
                rsb.push(a);
            }
            rsb.flush_fill(7);
            assert_eq!(rsb.occupancy(), 16);
            let mut copy = rsb.clone();
            assert!(pops(&mut copy, &btb, 16).iter().all(|p| *p == Some(7)));
            rsb.push(0x99);
            let got = pops(&mut rsb, &btb, 16);
            assert_eq!(got[0], Some(0x99));
            assert!(got[1..].iter().all(|p| *p == Some(7)));
        }
    }

    #[test]
    fn btb_aliasing() {
        let mut btb = BranchTargetBuffer::new(8);
        btb.update(3, 30);
        assert_eq!(btb.lookup(3), Some(30));
        assert_eq!(btb.lookup(4), None);
        btb.update(11, 110);
        assert_eq!(btb.lookup(11), Some(110));
        assert_eq!(btb.lookup(3), None);
    }
}
