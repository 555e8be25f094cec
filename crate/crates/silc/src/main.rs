//! silc driver: build (with dumps), run, and compare.

use clap::{Parser, Subcommand, ValueEnum};
use silc::ddg::OptFlags;
use silc::interp::{Interp, Value};
use silc::pipeline::{
    self, compile_baseline, compile_opt, parse_and_validate, timed_medians, PhaseNanos,
};
use silc::target::{dump_asm, ExecResult, Machine, TargetProgram};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "silc", about = "Stack-IL compiler for a modeled CISC register machine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Opt,
    Baseline,
    Interp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Dump {
    Cfg,
    Dom,
    Loops,
    Ddg,
    Asm,
    Frame,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a file and optionally dump an intermediate artifact.
    Build {
        file: String,
        #[arg(long, value_enum, default_value = "opt")]
        backend: Backend,
        #[arg(long, value_enum)]
        dump: Option<Dump>,
        #[arg(long)]
        no_fold: bool,
        #[arg(long)]
        no_repo: bool,
        #[arg(long)]
        no_dce: bool,
        #[arg(long)]
        no_embed: bool,
    },
    /// Compile and execute a method.
    Run {
        file: String,
        #[arg(long)]
        entry: String,
        /// Comma-separated integer arguments.
        #[arg(long, default_value = "")]
        args: String,
        /// Materializes a heap array and passes its reference as the first
        /// argument.
        #[arg(long)]
        array: Option<String>,
        #[arg(long, value_enum, default_value = "opt")]
        backend: Backend,
        #[arg(long, default_value_t = 1_000_000_000)]
        max_steps: u64,
        #[arg(long)]
        stats: bool,
        #[arg(long)]
        no_fold: bool,
        #[arg(long)]
        no_repo: bool,
        #[arg(long)]
        no_dce: bool,
        #[arg(long)]
        no_embed: bool,
    },
    /// Compile with both backends, report compile time (median of 30 runs),
    /// the phase breakdown, code size, and dynamic instruction counts.
    Compare {
        file: String,
        #[arg(long)]
        entry: String,
        #[arg(long, default_value = "")]
        args: String,
        #[arg(long)]
        array: Option<String>,
        #[arg(long, default_value_t = 1_000_000_000)]
        max_steps: u64,
    },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::from(0),
        Err(Error::User(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(1)
        }
        Err(Error::Internal(msg)) => {
            eprintln!("internal error: {}", msg);
            ExitCode::from(2)
        }
    }
}

enum Error {
    User(String),
    Internal(String),
}

impl From<pipeline::CompileError> for Error {
    fn from(e: pipeline::CompileError) -> Error {
        match e {
            pipeline::CompileError::Internal(i) => Error::Internal(i.to_string()),
            other => Error::User(other.to_string()),
        }
    }
}

fn parse_int_list(s: &str) -> Result<Vec<i32>, Error> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<i32>()
                .map_err(|_| Error::User(format!("bad integer `{}`", p)))
        })
        .collect()
}

fn read_file(path: &str) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::User(format!("{}: {}", path, e)))
}

fn opt_flags(no_fold: bool, no_repo: bool, no_dce: bool, no_embed: bool) -> OptFlags {
    OptFlags {
        fold: !no_fold,
        repo: !no_repo,
        dce: !no_dce,
        embed: !no_embed,
    }
}

fn dispatch() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Build {
            file,
            backend,
            dump,
            no_fold,
            no_repo,
            no_dce,
            no_embed,
        } => {
            let text = read_file(&file)?;
            let (program, depths) = parse_and_validate(&text)?;
            match backend {
                Backend::Interp => {
                    return Err(Error::User("nothing to build for the interpreter".into()))
                }
                Backend::Baseline => {
                    let prog = compile_baseline(&program);
                    match dump {
                        Some(Dump::Asm) => {
                            for (i, m) in prog.methods.iter().enumerate() {
                                println!("; method {}", m.name);
                                print!("{}", dump_asm(&prog, i));
                            }
                        }
                        Some(Dump::Frame) => {
                            for m in &prog.methods {
                                println!("; method {}", m.name);
                                print!("{}", m.frame.dump());
                            }
                        }
                        Some(_) => {
                            return Err(Error::User(
                                "baseline has no analysis artifacts to dump".into(),
                            ))
                        }
                        None => {}
                    }
                }
                Backend::Opt => {
                    let opts = opt_flags(no_fold, no_repo, no_dce, no_embed);
                    let (prog, artifacts, _) = compile_opt(&program, &depths, opts)?;
                    if let Some(d) = dump {
                        for (i, art) in artifacts.iter().enumerate() {
                            println!("; method {}", program.methods[i].name);
                            match d {
                                Dump::Cfg => print!(
                                    "{}",
                                    silc::cfg::dump_dot(&art.cfg, &program.methods[i].name)
                                ),
                                Dump::Dom => {
                                    print!("{}", silc::loops::dump_doms(&art.numbering, &art.idoms))
                                }
                                Dump::Loops => {
                                    print!("{}", silc::loops::dump_loops(&art.loop_tree))
                                }
                                Dump::Ddg => print!("{}", silc::ddg::dump_ddg(&art.ddg, &art.cfg)),
                                Dump::Asm => print!("{}", dump_asm(&prog, i)),
                                Dump::Frame => print!("{}", prog.methods[i].frame.dump()),
                            }
                        }
                    }
                }
            }
            Ok(())
        }
        Command::Run {
            file,
            entry,
            args,
            array,
            backend,
            max_steps,
            stats,
            no_fold,
            no_repo,
            no_dce,
            no_embed,
        } => {
            let text = read_file(&file)?;
            let (program, depths) = parse_and_validate(&text)?;
            let int_args = parse_int_list(&args)?;
            let array_vals = match &array {
                Some(s) => Some(parse_int_list(s)?),
                None => None,
            };
            let result = match backend {
                Backend::Interp => {
                    if program.find(&entry).is_none() {
                        return Err(Error::User(format!("unknown entry method `{}`", entry)));
                    }
                    let mut interp = Interp::new();
                    let mut vargs: Vec<Value> = Vec::new();
                    if let Some(vals) = &array_vals {
                        vargs.push(interp.alloc_array(vals));
                    }
                    vargs.extend(int_args.iter().map(|&v| Value::Int(v)));
                    interp
                        .run(&program, &entry, &vargs, max_steps)
                        .map_err(|e| Error::Internal(e.to_string()))?
                }
                Backend::Baseline => {
                    let prog = compile_baseline(&program);
                    execute(&prog, &entry, &int_args, &array_vals, max_steps)?
                }
                Backend::Opt => {
                    let opts = opt_flags(no_fold, no_repo, no_dce, no_embed);
                    let (prog, _, _) = compile_opt(&program, &depths, opts)?;
                    execute(&prog, &entry, &int_args, &array_vals, max_steps)?
                }
            };
            println!("{}", result.outcome);
            if stats {
                println!("steps={}", result.steps);
            }
            Ok(())
        }
        Command::Compare {
            file,
            entry,
            args,
            array,
            max_steps,
        } => {
            let text = read_file(&file)?;
            let (program, depths) = parse_and_validate(&text)?;
            let int_args = parse_int_list(&args)?;
            let array_vals = match &array {
                Some(s) => Some(parse_int_list(s)?),
                None => None,
            };

            let (opt_phases, baseline_ns) =
                timed_medians(&program, &depths, OptFlags::default(), 30)?;
            let base_prog = compile_baseline(&program);
            let (opt_prog, _, _) = compile_opt(&program, &depths, OptFlags::default())?;
            let base_run = execute(&base_prog, &entry, &int_args, &array_vals, max_steps)?;
            let opt_run = execute(&opt_prog, &entry, &int_args, &array_vals, max_steps)?;

            print_compare(
                &opt_phases,
                baseline_ns,
                &base_prog,
                &opt_prog,
                &base_run,
                &opt_run,
            );
            Ok(())
        }
    }
}

fn execute(
    prog: &TargetProgram,
    entry: &str,
    args: &[i32],
    array: &Option<Vec<i32>>,
    max_steps: u64,
) -> Result<ExecResult, Error> {
    if prog.find(entry).is_none() {
        return Err(Error::User(format!("unknown entry method `{}`", entry)));
    }
    let mut machine = Machine::new();
    let mut all_args: Vec<i32> = Vec::new();
    if let Some(vals) = array {
        let r = machine
            .alloc_array(vals)
            .map_err(|e| Error::Internal(e.to_string()))?;
        all_args.push(r);
    }
    all_args.extend_from_slice(args);
    machine
        .execute(prog, entry, &all_args, max_steps)
        .map_err(|e| Error::Internal(e.to_string()))
}

fn print_compare(
    opt: &PhaseNanos,
    baseline_ns: u64,
    base_prog: &TargetProgram,
    opt_prog: &TargetProgram,
    base_run: &ExecResult,
    opt_run: &ExecResult,
) {
    println!(
        "backend=baseline\tcompile_ns={}\tinstrs={}\tsteps={}\t{}",
        baseline_ns,
        base_prog.code.len(),
        base_run.steps,
        base_run.outcome,
    );
    println!(
        "backend=opt\tcompile_ns={}\tCGEN={}\tDDG={}\tCFG={}\tDFST={}\tIDOM={}\tLOOPS={}\tinstrs={}\tsteps={}\t{}",
        opt.total(),
        opt.cgen,
        opt.ddg,
        opt.cfg,
        opt.dfst,
        opt.idom,
        opt.loops,
        opt_prog.code.len(),
        opt_run.steps,
        opt_run.outcome,
    );
    let compile_ratio = opt.total() as f64 / baseline_ns.max(1) as f64;
    let step_ratio = base_run.steps as f64 / opt_run.steps.max(1) as f64;
    println!(
        "ratio\tcompile_opt_over_baseline={:.2}\tsteps_baseline_over_opt={:.2}",
        compile_ratio, step_ratio
    );
}
