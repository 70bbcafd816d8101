//! Deterministic simulator for return-stack-buffer speculation, cache timing
//! side channels, and the attacks and mitigations built on them.

pub mod config;
pub mod cpu;
pub mod harden;
pub mod isa;
pub mod mem;
pub mod os;
pub mod predictor;
pub mod scenarios;
pub mod sidechannel;

pub use config::{ConfigError, RunConfig};
pub use cpu::{
    run, run_quiet, run_sequential, AddressSpace, CoreConfig, ExecError, Machine, MachineConfig, RegisterFile, RetObservation, RunOutcome,
    SpeculationFrame, Step, TraceEvent, TraceRecord,
};
pub use harden::{apply_fence_after_call, apply_retpoline, verify_equivalence, EquivalenceReport, Hardened, HardeningPass};
pub use isa::{assemble, disassemble, AsmError, Instruction, Program, Reg};
pub use mem::{CacheConfig, CacheHierarchy, HitLevel, PhysicalMemory};
pub use os::{InputEvent, Process, SchedulerConfig, System, SystemOutcome, SystemTrace};
pub use predictor::{BranchTargetBuffer, ReturnStackBuffer, RsbVariant};
pub use scenarios::{levenshtein, precision, run_named, trace_named, Outcome, ScenarioError, ScenarioReport, TriggerReport};
pub use sidechannel::{calibrate_threshold, decode_nibbles, reload_and_time, MeasurementResult, NoiseModel, ProbeArray};
