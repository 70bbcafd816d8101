//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N <name>: PASS|FAIL (<evidence>)` line and asserts on it.

mod common;

use std::time::{Duration, Instant};

use common::{fuzz_inputs, fuzz_machine, fuzz_source, RefBtb, RefRsb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsbsim::harden::{retpoline, RETPOLINE_SPEC_PREFIX};
use rsbsim::scenarios::in_process::{build_in_process, planted_machine, secret_bytes, secret_location, InProcessParams, HEAP};
use rsbsim::scenarios::triggers::describe;
use rsbsim::scenarios::{demo_triggers, run_cross_process, run_in_process, PANGRAM};
use rsbsim::sidechannel::flush_all;
use rsbsim::{
    assemble, calibrate_threshold, reload_and_time, run_quiet, run_sequential, verify_equivalence, BranchTargetBuffer, Machine,
    MachineConfig, NoiseModel, ProbeArray, ReturnStackBuffer, RsbVariant, RunConfig,
};

const FUZZ_PROGRAMS: u64 = 500;

fn preset(name: &str) -> RunConfig {
    let path = format!("{}/../../configs/{name}.conf", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    RunConfig::from_text(&text).unwrap()
}

fn verdict(n: u32, name: &str, ok: bool, evidence: String, elapsed: Duration, limit: Duration) {
    let ok = ok && elapsed <= limit;
    let status = if ok { "PASS" } else { "FAIL" };
    println!("criterion {n} {name}: {status} ({evidence}; {:.1}s of {}s budget)", elapsed.as_secs_f64(), limit.as_secs());
    assert!(ok, "criterion {n} {name}: {evidence}; took {elapsed:?}, limit {limit:?}");
}

#[test]
fn criterion_1_trigger_fidelity() {
    let t = Instant::now();
    let mut ok = true;
    let mut ev = Vec::new();
    for v in [RsbVariant::StopOnUnderflow, RsbVariant::BtbFallback, RsbVariant::Cyclic] {
        let c = preset("triggers").with("rsb.variant", v.key()).unwrap();
        let r = demo_triggers(&c).unwrap();
        ok &= r.as_expected();
        ok &= r.get('d').unwrap().applicable == (v == RsbVariant::Cyclic);
        ev.push(format!("{}: {}/4", v.key(), r.mispredicted_count()));
        if v == RsbVariant::Cyclic {
            ok &= r.mispredicted_count() == 4;
            let d = r.get('d').unwrap();
            let fifth = &d.rets[4];
            ok &= fifth.predicted.as_deref() == Some("H+1") && fifth.actual == "D+1";
            let a = r.get('a').unwrap();
            let chain = a.rets.iter().filter(|l| l.mispredicted).count();
            ok &= chain >= 3;
            ev.push(format!("overflow predicted {:?} actual {}, exception chain {chain}", fifth.predicted, fifth.actual));
        }
    }
    verdict(1, "trigger fidelity", ok, ev.join(", "), t.elapsed(), Duration::from_secs(1));
}

#[test]
fn criterion_2_rsb_matches_reference() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut pops = 0;
    for seq in 0..10_000u64 {
        let v = [RsbVariant::StopOnUnderflow, RsbVariant::BtbFallback, RsbVariant::Cyclic][seq as usize % 3];
        let n = rng.gen_range(1..=32);
        let mut rsb = ReturnStackBuffer::new(n, v);
        let mut btb = BranchTargetBuffer::new(64);
        let mut r = RefRsb::new(n, v);
        let mut rb = RefBtb::new(64);
        for _ in 0..rng.gen_range(1..200) {
            match rng.gen_range(0..7) {
                0..=2 => {
                    let a = rng.gen_range(0..4096);
                    rsb.push(a);
                    r.push(a);
                }
                3..=5 => {
                    let site = rng.gen_range(0..256);
                    pops += 1;
                    mismatches += (rsb.predict_pop(&btb, site) != r.pop(&rb, site)) as usize;
                }
                _ => {
                    let (s, d) = (rng.gen_range(0..256), rng.gen_range(0..4096));
                    btb.update(s, d);
                    rb.update(s, d);
                }
            }
        }
    }
    let ev = format!("10000 sequences, {pops} predictions, {mismatches} mismatches");
    verdict(2, "rsb semantics", mismatches == 0, ev, t.elapsed(), Duration::from_secs(10));
}

#[test]
fn criterion_3_speculation_is_architecturally_invisible() {
    let t = Instant::now();
    let (mut diverged, mut squashed, mut spec) = (Vec::new(), 0, 0);
    for seed in 0..FUZZ_PROGRAMS {
        let p = assemble(&fuzz_source(seed)).unwrap();
        let cfg = fuzz_machine(seed);
        let seq = run_sequential(&p, Machine::with_program(cfg, &p), 100_000).unwrap();
        let mut m = Machine::with_program(cfg, &p);
        run_quiet(&p, &mut m, 100_000_000).unwrap();
        squashed += m.stats.frames_squashed;
        spec += m.stats.speculative;
        if m.regs != seq.regs || m.memory != seq.memory {
            diverged.push(seed);
        }
    }
    let ev = format!(
        "{FUZZ_PROGRAMS} programs, {} divergent {diverged:?}, {squashed} squashed frames, {spec} speculative steps",
        diverged.len()
    );
    verdict(3, "speculation invisible", diverged.is_empty() && squashed > 0, ev, t.elapsed(), Duration::from_secs(30));
}

#[test]
fn criterion_4_cross_process_leak() {
    let t = Instant::now();
    let det = run_cross_process(&preset("cross-process"), 1).unwrap();
    let noisy = run_cross_process(&preset("cross-process-noisy"), 4).unwrap();
    let ok = det.recovered == PANGRAM.as_bytes()
        && det.metric.precision == 1.0
        && noisy.per_trial.len() == 1000
        && noisy.metric.precision >= 0.84;
    let ev = format!(
        "deterministic precision {:.3} recovered {:?}, noisy mean precision {:.4} over {} sentences",
        det.metric.precision,
        String::from_utf8_lossy(&det.recovered),
        noisy.metric.precision,
        noisy.per_trial.len()
    );
    verdict(4, "cross-process leak", ok, ev, t.elapsed(), Duration::from_secs(120));
}

#[test]
fn criterion_5_flush_on_switch_blocks_leak() {
    let t = Instant::now();
    let text: String = PANGRAM.chars().cycle().take(128).collect();
    let c = preset("cross-process").with("sched.flush_rsb_on_switch", "true").unwrap().with("input.text", &text).unwrap();
    let r = run_cross_process(&c, 1).unwrap();
    let ok = r.metric.accuracy <= 2.0 / 128.0 && r.total_hot_slots() == 0;
    let ev = format!("accuracy {:.4} over 128 keystrokes, {} hot slots", r.metric.accuracy, r.total_hot_slots());
    verdict(5, "flush on switch", ok, ev, t.elapsed(), Duration::from_secs(30));
}

#[test]
fn criterion_6_in_process_read() {
    let t = Instant::now();
    let det_cfg = preset("in-process");
    let det = run_in_process(&det_cfg, 4).unwrap();
    let bytes = det_cfg.u64("in_process.bytes");
    let trials = det_cfg.u64("scenario.trials");
    let noisy = run_in_process(&preset("in-process-noisy"), 4).unwrap();
    let expected_loads = bytes * trials * 32;
    let ok =
        det.ground_truth.len() == 1024 && det.metric.accuracy == 1.0 && det.probe_loads == expected_loads && noisy.metric.accuracy >= 0.80;
    let ev = format!(
        "deterministic accuracy {:.4} over {bytes} bytes, {} probe loads (expected {expected_loads}), noisy accuracy {:.4}",
        det.metric.accuracy, det.probe_loads, noisy.metric.accuracy
    );
    verdict(6, "in-process read", ok, ev, t.elapsed(), Duration::from_secs(180));
}

#[test]
fn criterion_7_indirect_variant() {
    let t = Instant::now();
    let c = preset("in-process").with("in_process.indirect", "true").unwrap().with("in_process.bytes", "16").unwrap();
    let r = run_in_process(&c, 1).unwrap();
    let addr = secret_location(true, 0).0;
    let outside = addr + 16 <= HEAP || addr >= HEAP + (1 << 32);
    let ok = outside && r.recovered == secret_bytes(16);
    let ev = format!("read {:?} from absolute {addr:#x}", String::from_utf8_lossy(&r.recovered));
    verdict(7, "indirect variant", ok, ev, t.elapsed(), Duration::from_secs(10));
}

#[test]
fn criterion_8_retpoline() {
    let t = Instant::now();
    // Architectural equivalence on the fuzz corpus.
    let mut diverged = Vec::new();
    for seed in 0..FUZZ_PROGRAMS {
        let p = assemble(&fuzz_source(seed)).unwrap();
        let rep = verify_equivalence(&p, &retpoline(&p), &fuzz_inputs(seed, 3), fuzz_machine(seed), 100_000);
        if !rep.equivalent() || rep.runs != 3 {
            diverged.push(seed);
        }
    }
    // The in-process read no longer leaks.
    let c = preset("in-process")
        .with("harden.retpoline", "true")
        .unwrap()
        .with("in_process.bytes", "256")
        .unwrap()
        .with("scenario.trials", "10")
        .unwrap();
    let r = run_in_process(&c, 4).unwrap();
    let limit = 1.0 / 256.0 + 0.01;
    // Every predicted return target is a speculation trap.
    let cfg = MachineConfig::default();
    let params = InProcessParams { n_a: 64, n_b: cfg.rsb_size, offset: secret_location(false, 0).1, indirect: false, high_nibble: false };
    let hp = retpoline(&build_in_process(&params, cfg.rsb_size).unwrap()).program;
    let mut m = planted_machine(cfg, false, &secret_bytes(1));
    m.load(&hp);
    m.record_returns();
    run_quiet(&hp, &mut m, 10_000_000).unwrap();
    let obs = m.take_returns();
    let stray: Vec<String> =
        obs.iter().filter_map(|o| o.predicted).map(|a| describe(&hp, a)).filter(|d| !d.starts_with(RETPOLINE_SPEC_PREFIX)).collect();
    let predicted = obs.iter().filter(|o| o.predicted.is_some()).count();
    let ok = diverged.is_empty() && r.metric.accuracy <= limit && stray.is_empty() && predicted > 0;
    let ev = format!(
        "{FUZZ_PROGRAMS} programs x 3 inputs, divergent {diverged:?}; in-process accuracy {:.4} (limit {limit:.4}); {predicted} predicted returns, stray targets {stray:?}",
        r.metric.accuracy
    );
    verdict(8, "retpoline", ok, ev, t.elapsed(), Duration::from_secs(60));
}

#[test]
fn criterion_9_flush_reload_has_no_false_positives() {
    let t = Instant::now();
    let mut m = Machine::new(MachineConfig::default());
    let threshold = calibrate_threshold(&mut m);
    let pa = ProbeArray::ascii(0x1000_0000);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let quiet = NoiseModel::default();
    let mut false_hot = 0;
    for _ in 0..1000 {
        flush_all(&mut m, &pa);
        false_hot += reload_and_time(&mut m, &pa, threshold, &mut rng, &quiet).hot.len();
    }
    let mut exact = true;
    for slot in [0, 1, 65, 100, pa.n_slots - 1] {
        flush_all(&mut m, &pa);
        let p = assemble(&format!("mov r2, {:#x}\nload r1, [r2]\nhalt\n", pa.slot_addr(slot))).unwrap();
        m.load(&p);
        run_quiet(&p, &mut m, 1000).unwrap();
        exact &= reload_and_time(&mut m, &pa, threshold, &mut rng, &quiet).hot == vec![slot];
    }
    let ev = format!("{false_hot} hot slots over 1000 idle rounds, single planted load decoded exactly: {exact}");
    verdict(9, "flush+reload", false_hot == 0 && exact, ev, t.elapsed(), Duration::from_secs(10));
}
