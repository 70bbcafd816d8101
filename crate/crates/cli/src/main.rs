//! `rsbsim`: assemble and run programs, and run the attack scenarios.
//!
//! Exit codes: 0 success, 1 `--check` failure, 2 usage or config error, 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rsbsim::cpu::format_trace;
use rsbsim::{
    assemble, disassemble, run, run_named, run_sequential, trace_named, Machine, Outcome, Program, RegisterFile, RunConfig, RunOutcome,
    ScenarioError, ScenarioReport, TriggerReport,
};

#[derive(Parser, Debug)]
#[command(name = "rsbsim", version, about = "Return stack buffer speculation simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Alias for --scenario-seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Write a CSV table here.
    #[arg(long, global = true, value_name = "PATH")]
    csv: Option<PathBuf>,
    /// Write an execution trace here.
    #[arg(long, global = true, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Worker threads for independent trials.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    jobs: usize,
    /// Check the outcome against the expected result; exit 1 on mismatch.
    #[arg(long, global = true)]
    check: bool,
    /// Set any config key: `--set rsb.size=8`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assemble a source file and print its disassembly.
    Assemble {
        path: PathBuf,
        /// Also write the assembled program as JSON.
        #[arg(short, long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Print the listing of an assembled program (JSON) or a source file.
    Disassemble { path: PathBuf },
    /// Run a program under one engine and print the final state.
    Run {
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = Engine::Speculative)]
        engine: Engine,
        /// Cycle budget (speculative) or instruction budget (sequential).
        #[arg(long, default_value_t = 10_000_000)]
        budget: u64,
    },
    /// Run a scenario: triggers, cross-process or in-process.
    Scenario {
        /// Defaults to `scenario.name` from the config.
        name: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Engine {
    #[value(alias = "seq")]
    Sequential,
    #[value(alias = "spec")]
    Speculative,
}

enum Failure {
    Check,
    Usage(String),
    Io(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Res<T> = Result<T, Failure>;

/// `rsb.variant` → `rsb-variant`; `harden.retpoline` also answers to `retpoline`.
fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

fn flag_alias(key: &str) -> Option<String> {
    key.strip_prefix("harden.").map(|k| k.replace('_', "-"))
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for key in RunConfig::keys() {
        let mut arg =
            Arg::new(key).long(flag_name(key)).global(true).help_heading("Config keys").action(ArgAction::Set).help(format!("Sets {key}"));
        if RunConfig::is_switch(key) {
            arg = arg.num_args(0..=1).default_missing_value("true").value_name("BOOL");
        } else {
            arg = arg.value_name("VALUE");
        }
        if let Some(alias) = flag_alias(key) {
            arg = arg.visible_alias(alias);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn read(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, body: &str) -> Res<()> {
    fs::write(path, body).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

/// Defaults, then the config file, then `--set`, then per-key flags.
fn load_config(g: &Global, m: &ArgMatches) -> Res<RunConfig> {
    let mut c = RunConfig::default();
    let bad = |e: rsbsim::ConfigError| Failure::Usage(e.to_string());
    if let Some(p) = &g.config {
        let text = read(p)?;
        c.apply_text(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
    }
    for kv in &g.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        c.set(k.trim(), v).map_err(bad)?;
    }
    let sub = m.subcommand().map(|(_, s)| s);
    for key in RunConfig::keys() {
        let v = sub.and_then(|s| s.get_one::<String>(key)).or_else(|| m.get_one::<String>(key));
        if let Some(v) = v {
            c.set(key, v).map_err(bad)?;
        }
    }
    if let Some(seed) = g.seed {
        c.set("scenario.seed", &seed.to_string()).map_err(bad)?;
    }
    c.validate().map_err(bad)?;
    Ok(c)
}

fn load_program(path: &Path) -> Res<Program> {
    let text = read(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let p: Program = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        p.validate().map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        Ok(p)
    } else {
        assemble(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
    }
}

fn cmd_assemble(path: &Path, output: Option<&Path>) -> Res<()> {
    let p = load_program(path)?;
    print!("{}", disassemble(&p));
    if let Some(out) = output {
        let json = serde_json::to_string_pretty(&p).map_err(|e| Failure::Io(e.to_string()))?;
        write(out, &json)?;
    }
    Ok(())
}

fn fmt_regs(r: &RegisterFile) -> String {
    let mut s = String::new();
    for (i, v) in r.general.iter().enumerate() {
        s.push_str(&format!("r{i:<2} = {v:#x}\n"));
    }
    s.push_str(&format!("sp  = {:#x}\npc  = {}\n", r.sp, r.pc));
    s
}

fn cmd_run(g: &Global, config: &RunConfig, path: &Path, engine: Engine, budget: u64) -> Res<()> {
    let p = load_program(path)?;
    let machine = Machine::with_program(config.machine(), &p);
    let fault = |e: rsbsim::ExecError| Failure::Usage(format!("{}: {e}", path.display()));
    match engine {
        Engine::Sequential => {
            let m = run_sequential(&p, machine, budget).map_err(fault)?;
            println!("engine: sequential\noutcome: halted\ncycles: {}", m.cycle);
            print!("{}", fmt_regs(&m.regs));
            if g.trace.is_some() {
                eprintln!("note: --trace records speculative execution; the sequential engine has none");
            }
        }
        Engine::Speculative => {
            let (m, trace, outcome) = run(&p, machine, budget).map_err(fault)?;
            let outcome = match outcome {
                RunOutcome::Halted => "halted",
                RunOutcome::BudgetExhausted => "budget exhausted",
            };
            if let Some(t) = &g.trace {
                write(t, &format_trace(&trace))?;
            }
            let s = m.stats;
            println!("engine: speculative\noutcome: {outcome}\ncycles: {}", m.cycle);
            println!(
                "committed: {}\nspeculative: {}\nframes: {} opened, {} committed, {} squashed",
                s.committed, s.speculative, s.frames_opened, s.frames_committed, s.frames_squashed
            );
            print!("{}", fmt_regs(&m.regs));
        }
    }
    Ok(())
}

/// What a scenario must show under its configuration.
fn check_report(name: &str, config: &RunConfig, r: &ScenarioReport) -> Result<String, String> {
    let mitigated = config.bool("harden.retpoline") || config.bool("harden.fence_after_call");
    let (ok, what) = match name {
        "cross-process" if mitigated || config.bool("sched.flush_rsb_on_switch") => {
            let limit = 2.0 / 128.0;
            (r.metric.accuracy <= limit, format!("leak blocked: accuracy {:.4} <= {limit:.4}", r.metric.accuracy))
        }
        "cross-process" if config.f64("sched.jitter") == 0.0 => {
            (r.metric.precision == 1.0, format!("exact recovery: precision {:.4} == 1", r.metric.precision))
        }
        "cross-process" => (r.metric.precision >= 0.84, format!("noisy recovery: mean precision {:.4} >= 0.84", r.metric.precision)),
        _ if mitigated => {
            let limit = 1.0 / 256.0 + 0.01;
            (r.metric.accuracy <= limit, format!("leak at chance: accuracy {:.4} <= {limit:.4}", r.metric.accuracy))
        }
        _ if config.noise().is_silent() => (r.metric.accuracy == 1.0, format!("exact read: accuracy {:.4} == 1", r.metric.accuracy)),
        _ => (r.metric.accuracy >= 0.80, format!("noisy read: accuracy {:.4} >= 0.80", r.metric.accuracy)),
    };
    if ok {
        Ok(what)
    } else {
        Err(what)
    }
}

fn check_triggers(r: &TriggerReport) -> Result<String, String> {
    let what = format!("{} mispredicted, as expected for {}", r.mispredicted_count(), r.variant);
    if r.as_expected() {
        Ok(what)
    } else {
        Err(format!("unexpected trigger outcome under {}", r.variant))
    }
}

fn cmd_scenario(g: &Global, config: &RunConfig, name: Option<&str>) -> Res<()> {
    let name = match name.or(Some(config.get("scenario.name")).filter(|n| !n.is_empty())) {
        Some(n) => n.to_string(),
        None => return Err(Failure::Usage("no scenario named (give one, or set scenario.name)".into())),
    };
    let outcome = run_named(&name, config, g.jobs.max(1))?;
    let (csv, verdict) = match &outcome {
        Outcome::Triggers(r) => {
            println!("{r}");
            (r.to_csv(), check_triggers(r))
        }
        Outcome::Report(r) => {
            print!("{r}");
            (r.to_csv(), check_report(&name, config, r))
        }
    };
    if let Some(p) = &g.csv {
        write(p, &csv)?;
    }
    if let Some(p) = &g.trace {
        write(p, &trace_named(&name, config)?)?;
    }
    if g.check {
        match verdict {
            Ok(what) => println!("check: PASS ({what})"),
            Err(what) => {
                println!("check: FAIL ({what})");
                return Err(Failure::Check);
            }
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli, m: &ArgMatches) -> Res<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Assemble { path, output } => cmd_assemble(path, output.as_deref()),
        Command::Disassemble { path } => {
            print!("{}", disassemble(&load_program(path)?));
            Ok(())
        }
        Command::Run { path, engine, budget } => cmd_run(g, &load_config(g, m)?, path, *engine, *budget),
        Command::Scenario { name } => cmd_scenario(g, &load_config(g, m)?, name.as_deref()),
    }
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
