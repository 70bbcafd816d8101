//! The four ways a return misprediction arises: an unwound exception, a
//! context switch, a directly overwritten return address, and a circular
//! RSB overflow.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::ScenarioError;
use crate::config::RunConfig;
use crate::cpu::{run_quiet, Machine, MachineConfig, RetObservation};
use crate::isa::{assemble, Program};
use crate::os::{Process, System};
use crate::predictor::RsbVariant;

const BUDGET: u64 = 1_000_000;
/// Work after every call site so a mispredicted path resolves before reaching another RET.
const FILL: &str = "add r9, 1\nadd r9, 1\nadd r9, 1\nadd r9, 1\nadd r9, 1\nadd r9, 1\n";

/// One architectural RET, with code addresses rendered as `label+offset`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RetLine {
    pub site: String,
    pub predicted: Option<String>,
    pub actual: String,
    pub mispredicted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TriggerResult {
    pub key: char,
    pub name: &'static str,
    /// False when the trigger cannot occur under this RSB variant.
    pub applicable: bool,
    /// The trigger produced the misprediction it is named for.
    pub mispredicted: bool,
    pub detail: String,
    pub rets: Vec<RetLine>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TriggerReport {
    pub variant: RsbVariant,
    pub rsb_size: usize,
    pub results: Vec<TriggerResult>,
}

impl TriggerReport {
    pub fn get(&self, key: char) -> Option<&TriggerResult> {
        self.results.iter().find(|r| r.key == key)
    }

    /// Every applicable trigger mispredicted and no inapplicable one did.
    pub fn as_expected(&self) -> bool {
        self.results.iter().all(|r| r.applicable == r.mispredicted)
    }

    pub fn mispredicted_count(&self) -> usize {
        self.results.iter().filter(|r| r.mispredicted).count()
    }
}

impl fmt::Display for TriggerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rsb variant: {} (size {})", self.variant, self.rsb_size)?;
        for r in &self.results {
            let status = match (r.applicable, r.mispredicted) {
                (true, true) => "mispredicted",
                (true, false) => "NOT mispredicted",
                (false, false) => "not applicable",
                (false, true) => "mispredicted (unexpected)",
            };
            writeln!(f, "({}) {}: {} - {}", r.key, r.name, status, r.detail)?;
            for l in &r.rets {
                let pred = l.predicted.as_deref().unwrap_or("-");
                let mark = if l.mispredicted { "  MISPREDICT" } else { "" };
                writeln!(f, "    ret at {:<8} predicted {:<10} actual {}{}", l.site, pred, l.actual, mark)?;
            }
        }
        write!(f, "{}/{} mispredicted", self.mispredicted_count(), self.results.len())
    }
}

impl TriggerReport {
    /// `trigger,site,predicted,actual,mispredicted` rows, one per architectural return.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trigger,site,predicted,actual,mispredicted\n");
        for r in &self.results {
            for l in &r.rets {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.key,
                    l.site,
                    l.predicted.as_deref().unwrap_or(""),
                    l.actual,
                    l.mispredicted as u8
                ));
            }
        }
        out
    }
}

/// `label+offset` for the nearest label at or before `addr`.
pub fn describe(p: &Program, addr: u64) -> String {
    let Ok(a) = usize::try_from(addr) else {
        return format!("{addr:#x}");
    };
    match p.labels.iter().filter(|(_, &i)| i <= a).max_by_key(|(_, &i)| i) {
        Some((name, &i)) if a < p.len() || a == i => {
            if a == i {
                name.clone()
            } else {
                format!("{name}+{}", a - i)
            }
        }
        _ => format!("{addr:#x}"),
    }
}

fn lines(p: &Program, obs: &[RetObservation]) -> Vec<RetLine> {
    obs.iter()
        .filter(|o| o.depth == 0)
        .map(|o| RetLine {
            site: describe(p, o.ret_site as u64),
            predicted: o.predicted.map(|a| describe(p, a)),
            actual: describe(p, o.actual),
            mispredicted: o.mispredicted(),
        })
        .collect()
}

fn arch(obs: Vec<RetObservation>) -> Vec<RetObservation> {
    obs.into_iter().filter(|o| o.depth == 0).collect()
}

fn run_single(src: &str, cfg: MachineConfig) -> Result<(Program, Vec<RetObservation>), ScenarioError> {
    let p = assemble(src)?;
    let mut m = Machine::with_program(cfg, &p);
    m.record_returns();
    run_quiet(&p, &mut m, BUDGET)?;
    Ok((p, arch(m.take_returns())))
}

fn longest_chain(obs: &[RetObservation]) -> usize {
    let mut best = 0;
    let mut cur = 0;
    for o in obs {
        cur = if o.mispredicted() { cur + 1 } else { 0 };
        best = best.max(cur);
    }
    best
}

/// (a) A `longjmp`-style unwind skips the returns of A, B and C, leaving
/// their entries on the RSB; each later return up the real stack consumes one.
fn exception(cfg: MachineConfig) -> Result<TriggerResult, ScenarioError> {
    let src = format!(
        ".entry main
main:   call M1
        halt
M1:     call M2
{FILL}        ret
M2:     call T
{FILL}        ret
T:      mov r10, sp
        call A
{FILL}        ret
catch:  ret
A:      call B
{FILL}        ret
B:      call C
{FILL}        ret
C:      mov sp, r10
        jmp catch
"
    );
    let (p, obs) = run_single(&src, cfg)?;
    let chain = longest_chain(&obs);
    Ok(TriggerResult {
        key: 'a',
        name: "exception unwind",
        applicable: true,
        mispredicted: chain >= 3,
        detail: format!("3 frames skipped, {chain} consecutive mispredictions"),
        rets: lines(&p, &obs),
    })
}

/// (b) The victim yields inside a call chain; another process deepens its
/// own chain and yields back. The victim's returns consume the other
/// process's entries.
fn context_switch(config: &RunConfig) -> Result<TriggerResult, ScenarioError> {
    let victim = format!(
        ".entry main
main:   call F
        halt
F:      call G
{FILL}        ret
G:      syscall 1
{FILL}        ret
"
    );
    let mut other = String::from(".entry main\nmain:   jmp P0\n");
    // Keep the other process's return sites beyond the victim's code.
    other.push_str(&"        pause\n".repeat(32));
    other.push_str("P0:     call P\n        halt\nP:      call Q\n        halt\nQ:      call R\n        halt\nR:      call S\n        halt\nS:      syscall 1\n        halt\n");
    let vp = assemble(&victim)?;
    let op = assemble(&other)?;
    let sites: BTreeSet<u64> = ["P0", "P", "Q", "R"].iter().map(|l| op.addr_of(l) as u64 + 1).collect();
    let procs =
        vec![Process::new("victim", vp.clone(), 0x2000_0000..0x2010_0000), Process::new("other", op.clone(), 0x2100_0000..0x2110_0000)];
    let mut sched = config.scheduler();
    sched.jitter = 0.0;
    let mut sys = System::new(config.machine(), sched, procs, 0x1000_0000..0x1100_0000, vec![], config.seed())?;
    sys.machine.record_returns();
    sys.run(BUDGET);
    let obs = arch(sys.machine.take_returns());
    let crossed = obs.iter().filter(|o| o.mispredicted() && o.predicted.is_some_and(|a| sites.contains(&a))).count();
    let mut rets = lines(&vp, &obs);
    for (l, o) in rets.iter_mut().zip(&obs) {
        if let Some(a) = o.predicted.filter(|a| sites.contains(a)) {
            l.predicted = Some(format!("other:{}", describe(&op, a)));
        }
    }
    Ok(TriggerResult {
        key: 'b',
        name: "context switch",
        applicable: true,
        mispredicted: crossed > 0,
        detail: format!("{crossed} victim return(s) predicted into the other process"),
        rets,
    })
}

/// (c) The callee overwrites its own return address on the stack.
fn overwrite(cfg: MachineConfig) -> Result<TriggerResult, ScenarioError> {
    let src = ".entry main
main:   call F
        halt
F:      mov r1, X
        store [sp], r1
        ret
X:      halt
";
    let (p, obs) = run_single(src, cfg)?;
    let hit = obs.iter().any(|o| o.mispredicted() && o.actual == p.addr_of("X") as u64);
    Ok(TriggerResult {
        key: 'c',
        name: "return address overwrite",
        applicable: true,
        mispredicted: hit,
        detail: "F stores X over its return address".into(),
        rets: lines(&p, &obs),
    })
}

/// (d) Nine nested calls through a four-entry RSB: after four correct
/// returns, the return from E wraps around and predicts H instead of D.
fn overflow(cfg: MachineConfig) -> Result<TriggerResult, ScenarioError> {
    let cfg = MachineConfig { rsb_size: 4, ..cfg };
    let names = ["A", "B", "C", "D", "E", "F", "G", "H", "I"];
    let mut src = String::from(".entry main\nmain:   call A\n        halt\n");
    for w in names.windows(2) {
        src.push_str(&format!("{}:      call {}\n{FILL}        ret\n", w[0], w[1]));
    }
    src.push_str("I:      ret\n");
    let (p, obs) = run_single(&src, cfg)?;
    let want_pred = p.addr_of("H") as u64 + 1;
    let want_actual = p.addr_of("D") as u64 + 1;
    let fifth = obs.get(4);
    let hit = fifth.is_some_and(|o| o.predicted == Some(want_pred) && o.actual == want_actual);
    let detail = match fifth.map(|o| o.predicted) {
        Some(Some(a)) => format!("return from E predicted {} (actual D+1)", describe(&p, a)),
        Some(None) => "return from E had no prediction (RSB underflow)".into(),
        None => "return from E not reached".into(),
    };
    Ok(TriggerResult {
        key: 'd',
        name: "circular overflow (rsb size 4)",
        applicable: cfg.rsb_variant == RsbVariant::Cyclic,
        mispredicted: hit,
        detail,
        rets: lines(&p, &obs),
    })
}

pub fn demo_triggers(config: &RunConfig) -> Result<TriggerReport, ScenarioError> {
    let cfg = config.machine();
    Ok(TriggerReport {
        variant: cfg.rsb_variant,
        rsb_size: cfg.rsb_size,
        results: vec![exception(cfg)?, context_switch(config)?, overwrite(cfg)?, overflow(cfg)?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(v: RsbVariant) -> TriggerReport {
        demo_triggers(&RunConfig::default().with("rsb.variant", v.key()).unwrap()).unwrap()
    }

    #[test]
    fn all_four_on_cyclic() {
        let r = report(RsbVariant::Cyclic);
        assert!(r.as_expected(), "{r}");
        assert_eq!(r.mispredicted_count(), 4);
        assert!(r.to_string().ends_with("4/4 mispredicted"));
    }

    #[test]
    fn overflow_only_on_cyclic() {
        for v in [RsbVariant::StopOnUnderflow, RsbVariant::BtbFallback] {
            let r = report(v);
            assert!(r.as_expected(), "{r}");
            assert!(!r.get('d').unwrap().applicable);
            assert_eq!(r.mispredicted_count(), 3);
        }
    }

    #[test]
    fn exception_chain_names_skipped_frames() {
        let r = report(RsbVariant::Cyclic);
        let a = r.get('a').unwrap();
        let preds: Vec<_> = a.rets.iter().filter(|l| l.mispredicted).filter_map(|l| l.predicted.clone()).collect();
        assert_eq!(preds, ["B+1", "A+1", "T+2"]);
    }
}
