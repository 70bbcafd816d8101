mod common;

use common::{fuzz_machine, fuzz_source, RefBtb, RefCache, RefRsb};
use proptest::prelude::*;
use rsbsim::{
    assemble, disassemble, run_quiet, run_sequential, BranchTargetBuffer, CacheConfig, CacheHierarchy, Machine, ReturnStackBuffer,
    RsbVariant,
};

#[derive(Clone, Debug)]
enum RsbOp {
    Push(u64),
    Pop(u64),
    Train(u64, u64),
}

fn rsb_op() -> impl Strategy<Value = RsbOp> {
    prop_oneof![
        3 => (0u64..1000).prop_map(RsbOp::Push),
        3 => (0u64..64).prop_map(RsbOp::Pop),
        1 => (0u64..64, 0u64..1000).prop_map(|(s, t)| RsbOp::Train(s, t)),
    ]
}

fn variant() -> impl Strategy<Value = RsbVariant> {
    prop_oneof![Just(RsbVariant::StopOnUnderflow), Just(RsbVariant::BtbFallback), Just(RsbVariant::Cyclic)]
}

proptest! {
    #[test]
    fn rsb_matches_reference(n in 1usize..20, v in variant(), ops in prop::collection::vec(rsb_op(), 0..80)) {
        let mut rsb = ReturnStackBuffer::new(n, v);
        let mut btb = BranchTargetBuffer::new(16);
        let mut r = RefRsb::new(n, v);
        let mut rb = RefBtb::new(16);
        for op in ops {
            match op {
                RsbOp::Push(a) => { rsb.push(a); r.push(a); }
                RsbOp::Pop(site) => prop_assert_eq!(rsb.predict_pop(&btb, site), r.pop(&rb, site)),
                RsbOp::Train(s, t) => { btb.update(s, t); rb.update(s, t); }
            }
        }
    }

    #[test]
    fn cache_matches_reference(ops in prop::collection::vec((0u64..48, any::<bool>()), 0..200)) {
        let cfg = CacheConfig { l1_sets: 2, l1_ways: 2, llc_sets: 4, llc_ways: 4, ..CacheConfig::default() };
        let mut c = CacheHierarchy::new(cfg);
        let mut r = RefCache::new(cfg);
        for (line, flush) in ops {
            let addr = line * 64 + 8;
            if flush {
                c.clflush(addr);
                r.clflush(addr);
            } else {
                prop_assert_eq!(c.touch(addr), r.touch(addr));
            }
        }
    }

    #[test]
    fn assembler_round_trips(seed in any::<u64>()) {
        let p = assemble(&fuzz_source(seed)).unwrap();
        prop_assert_eq!(assemble(&disassemble(&p)).unwrap(), p);
    }

    #[test]
    fn engines_agree_on_fuzzed_programs(seed in any::<u64>()) {
        let p = assemble(&fuzz_source(seed)).unwrap();
        let cfg = fuzz_machine(seed);
        let seq = run_sequential(&p, Machine::with_program(cfg, &p), 100_000).unwrap();
        let mut spec = Machine::with_program(cfg, &p);
        run_quiet(&p, &mut spec, 100_000_000).unwrap();
        prop_assert_eq!(spec.regs, seq.regs);
        prop_assert!(spec.memory == seq.memory);
    }
}
