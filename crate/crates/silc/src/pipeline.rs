//! Compilation driver: parse/validate once, then run either the single-pass
//! baseline or the three-pass optimizing pipeline per method, with optional
//! per-phase timing.

use crate::baseline::generate_baseline;
use crate::cfg::{build_cfg, Cfg};
use crate::codegen::generate;
use crate::ddg::{translate_method, DdgMethod, InternalError, OptFlags};
use crate::il::{self, Program, StackDepthMap, ValidateError};
use crate::loops::{compute_idoms, detect_natural_loops, number_blocks, IdomVector, LoopTree, Numbering};
use crate::target::{assemble, TargetProgram};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Parse(#[from] il::ParseError),
    #[error(transparent)]
    Validate(#[from] ValidateError),
    #[error(transparent)]
    Internal(#[from] InternalError),
}

/// Per-method analysis artifacts, kept for dumps.
pub struct MethodArtifacts {
    pub cfg: Cfg,
    pub numbering: Numbering,
    pub idoms: IdomVector,
    pub loop_tree: LoopTree,
    pub ddg: DdgMethod,
}

/// Nanoseconds per phase, using the names of the compilation-time breakdown:
/// CGEN, DDG, CFG, DFST, IDOM, LOOPS.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseNanos {
    pub cfg: u64,
    pub dfst: u64,
    pub idom: u64,
    pub loops: u64,
    pub ddg: u64,
    pub cgen: u64,
}

impl PhaseNanos {
    pub fn total(&self) -> u64 {
        self.cfg + self.dfst + self.idom + self.loops + self.ddg + self.cgen
    }

    pub fn add(&mut self, other: &PhaseNanos) {
        self.cfg += other.cfg;
        self.dfst += other.dfst;
        self.idom += other.idom;
        self.loops += other.loops;
        self.ddg += other.ddg;
        self.cgen += other.cgen;
    }
}

pub fn parse_and_validate(text: &str) -> Result<(Program, Vec<StackDepthMap>), CompileError> {
    let program = il::parse(text)?;
    let depths = il::validate_program(&program)?;
    Ok((program, depths))
}

/// The three passes for one method, with per-phase timing.
pub fn compile_method_opt(
    program: &Program,
    method_index: usize,
    depths: &StackDepthMap,
    opts: OptFlags,
) -> Result<(crate::target::MethodCode, MethodArtifacts, PhaseNanos), CompileError> {
    let method = &program.methods[method_index];
    let mut t = PhaseNanos::default();

    let now = Instant::now();
    let cfg = build_cfg(method);
    t.cfg = now.elapsed().as_nanos() as u64;

    let now = Instant::now();
    let numbering = number_blocks(&cfg);
    t.dfst = now.elapsed().as_nanos() as u64;

    let now = Instant::now();
    let idoms = compute_idoms(&cfg, &numbering);
    t.idom = now.elapsed().as_nanos() as u64;

    let now = Instant::now();
    let loop_tree = detect_natural_loops(&cfg, &numbering, &idoms);
    t.loops = now.elapsed().as_nanos() as u64;

    let now = Instant::now();
    let ddg = translate_method(program, method, &cfg, &numbering, depths, opts)?;
    t.ddg = now.elapsed().as_nanos() as u64;

    let now = Instant::now();
    let code = generate(&ddg, &cfg, method)?;
    t.cgen = now.elapsed().as_nanos() as u64;

    Ok((
        code,
        MethodArtifacts {
            cfg,
            numbering,
            idoms,
            loop_tree,
            ddg,
        },
        t,
    ))
}

pub fn compile_opt(
    program: &Program,
    depths: &[StackDepthMap],
    opts: OptFlags,
) -> Result<(TargetProgram, Vec<MethodArtifacts>, PhaseNanos), CompileError> {
    let mut methods = Vec::new();
    let mut artifacts = Vec::new();
    let mut phases = PhaseNanos::default();
    for i in 0..program.methods.len() {
        let (code, art, t) = compile_method_opt(program, i, &depths[i], opts)?;
        methods.push(code);
        artifacts.push(art);
        phases.add(&t);
    }
    Ok((assemble(methods), artifacts, phases))
}

pub fn compile_baseline(program: &Program) -> TargetProgram {
    let methods = program
        .methods
        .iter()
        .map(|m| generate_baseline(program, m))
        .collect();
    assemble(methods)
}

/// Baseline generation time for the whole program, in nanoseconds.
pub fn time_baseline(program: &Program) -> u64 {
    let now = Instant::now();
    let prog = compile_baseline(program);
    let ns = now.elapsed().as_nanos() as u64;
    std::hint::black_box(prog.code.len());
    ns
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Median-of-N timing for both backends; medians are taken per phase.
pub fn timed_medians(
    program: &Program,
    depths: &[StackDepthMap],
    opts: OptFlags,
    reps: usize,
) -> Result<(PhaseNanos, u64), CompileError> {
    let mut per_phase: Vec<PhaseNanos> = Vec::with_capacity(reps);
    let mut baseline: Vec<u64> = Vec::with_capacity(reps);
    for _ in 0..reps {
        let (_, _, t) = compile_opt(program, depths, opts)?;
        per_phase.push(t);
        baseline.push(time_baseline(program));
    }
    let opt = PhaseNanos {
        cfg: median(per_phase.iter().map(|t| t.cfg).collect()),
        dfst: median(per_phase.iter().map(|t| t.dfst).collect()),
        idom: median(per_phase.iter().map(|t| t.idom).collect()),
        loops: median(per_phase.iter().map(|t| t.loops).collect()),
        ddg: median(per_phase.iter().map(|t| t.ddg).collect()),
        cgen: median(per_phase.iter().map(|t| t.cgen).collect()),
    };
    Ok((opt, median(baseline)))
}
