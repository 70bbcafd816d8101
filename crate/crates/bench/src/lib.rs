//! Shared fixtures for the criterion benches.

use rsbsim::scenarios::in_process::{build_in_process, planted_machine, secret_bytes, secret_location, InProcessParams};
use rsbsim::{assemble, Machine, MachineConfig, Program};

/// Deep non-speculating recursion: `depth` calls and returns per run.
pub fn call_chain(depth: usize) -> Program {
    assemble(&format!(
        ".entry main
main:   mov r1, {depth}
        call F
        halt
F:      sub r1, 1
        beq r1, 0, done
        call F
done:   add r2, 1
        ret
"
    ))
    .expect("fixture assembles")
}

/// The in-process attack program for byte 0 and a machine with the secret planted.
pub fn in_process_attack() -> (Program, Machine) {
    let cfg = MachineConfig::default();
    let params = InProcessParams { n_a: 64, n_b: cfg.rsb_size, offset: secret_location(false, 0).1, indirect: false, high_nibble: false };
    let p = build_in_process(&params, cfg.rsb_size).expect("fixture assembles");
    let mut m = planted_machine(cfg, false, &secret_bytes(1));
    m.load(&p);
    (p, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rsbsim::{run_quiet, run_sequential, RunOutcome};

    #[test]
    fn fixtures_run_to_completion() {
        let p = call_chain(100);
        let m = run_sequential(&p, Machine::with_program(MachineConfig::default(), &p), 10_000).unwrap();
        assert_eq!(m.regs.general[2], 100);
        let (p, mut m) = in_process_attack();
        assert_eq!(run_quiet(&p, &mut m, 10_000_000).unwrap(), RunOutcome::Halted);
    }
}
