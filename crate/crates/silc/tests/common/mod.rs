//! Shared test machinery: a structured random-IL generator whose output is
//! valid by construction, an unstructured junk generator for validator
//! fuzzing, random reachable digraphs, and an independent all-dominators
//! dataflow oracle.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use silc::cfg::Cfg;
use silc::ddg::OptFlags;
use silc::il::{validate_program, Method, Op, Program};
use silc::interp::{Interp, Value};
use silc::pipeline::{compile_baseline, compile_opt, parse_and_validate};
use silc::sem::{BinAlu, Cond, TrapCode, UnAlu};
use silc::target::{Machine, Outcome};

pub fn corpus_path(name: &str) -> String {
    format!("{}/../../corpus/{}", env!("CARGO_MANIFEST_DIR"), name)
}

pub fn load_corpus(name: &str) -> String {
    std::fs::read_to_string(corpus_path(name)).expect("corpus file")
}

// ---- structured program generator ----------------------------------------

const MAX_BODY: usize = 64;

struct MethodGen<'a> {
    rng: &'a mut ChaCha8Rng,
    body: Vec<Op>,
    /// (branch position, label id) patched when the label binds.
    patches: Vec<(usize, usize)>,
    labels: Vec<Option<u32>>,
    arg_count: u16,
    /// Local 3 holds the array when arrays are enabled; loop counters are
    /// taken from the back of the assignable pool.
    array_local: Option<u16>,
    free_counters: Vec<u16>,
    assignables: Vec<u16>,
    callees: Vec<(String, u16)>,
}

impl<'a> MethodGen<'a> {
    // Statement shells emit a short unchecked tail, so generation works
    // against a reduced budget; oversized methods are rejected and redrawn.
    fn budget_left(&self) -> usize {
        (MAX_BODY - 10).saturating_sub(self.body.len())
    }

    fn new_label(&mut self) -> usize {
        self.labels.push(None);
        self.labels.len() - 1
    }

    fn bind(&mut self, label: usize) {
        self.labels[label] = Some(self.body.len() as u32);
    }

    fn branch(&mut self, op: fn(u32) -> Op, label: usize) {
        self.patches.push((self.body.len(), label));
        self.body.push(op(u32::MAX));
    }

    fn cond_branch(&mut self, c: Cond, label: usize) {
        self.patches.push((self.body.len(), label));
        self.body.push(Op::Bc(c, u32::MAX));
    }

    /// Emits code that pushes exactly one integer value.
    fn expr(&mut self, depth: usize) {
        let leaf = depth == 0 || self.budget_left() < 10 || self.rng.gen_bool(0.35);
        if leaf {
            match self.rng.gen_range(0..10) {
                0..=3 => {
                    let specials = [0, 1, -1, 2, 7, 255, i32::MIN, i32::MAX];
                    let v = if self.rng.gen_bool(0.4) {
                        specials[self.rng.gen_range(0..specials.len())]
                    } else {
                        self.rng.gen_range(-100..100)
                    };
                    self.body.push(Op::Ldc(v));
                }
                4..=6 if !self.assignables.is_empty() => {
                    let k = self.assignables[self.rng.gen_range(0..self.assignables.len())];
                    self.body.push(Op::Ldloc(k));
                }
                _ if self.arg_count > 0 => {
                    let k = self.rng.gen_range(0..self.arg_count);
                    self.body.push(Op::Ldarg(k));
                }
                _ => self.body.push(Op::Ldc(self.rng.gen_range(-9..9))),
            }
            return;
        }
        match self.rng.gen_range(0..12) {
            0 | 1 => {
                self.expr(depth - 1);
                let op = if self.rng.gen_bool(0.5) {
                    UnAlu::Neg
                } else {
                    UnAlu::Not
                };
                self.body.push(Op::Un(op));
            }
            2 => {
                self.expr(depth - 1);
                self.body.push(Op::Dup);
                self.body.push(Op::Bin(BinAlu::Add));
            }
            3 if self.array_local.is_some() => {
                // Usually masked in-bounds; sometimes a raw (possibly
                // trapping) index.
                let a = self.array_local.unwrap();
                self.body.push(Op::Ldloc(a));
                self.expr(depth - 1);
                if self.rng.gen_bool(0.85) {
                    self.body.push(Op::Ldc(7));
                    self.body.push(Op::Bin(BinAlu::And));
                }
                self.body.push(Op::Ldelem);
            }
            4 if !self.callees.is_empty() => {
                let (name, argc) =
                    self.callees[self.rng.gen_range(0..self.callees.len())].clone();
                for _ in 0..argc {
                    self.expr(depth.saturating_sub(2));
                }
                self.body.push(Op::Call(name));
            }
            5 if self.array_local.is_some() => {
                let a = self.array_local.unwrap();
                self.body.push(Op::Ldloc(a));
                self.body.push(Op::Ldlen);
            }
            _ => {
                self.expr(depth - 1);
                self.expr(depth.saturating_sub(2));
                let ops = [
                    BinAlu::Add,
                    BinAlu::Sub,
                    BinAlu::Mul,
                    BinAlu::Div,
                    BinAlu::Rem,
                    BinAlu::And,
                    BinAlu::Or,
                    BinAlu::Xor,
                    BinAlu::Shl,
                    BinAlu::Shr,
                    BinAlu::Shru,
                ];
                self.body.push(Op::Bin(ops[self.rng.gen_range(0..ops.len())]));
            }
        }
    }

    fn stmt(&mut self, depth: usize) {
        if self.budget_left() < 14 {
            return;
        }
        match self.rng.gen_range(0..12) {
            0..=4 => {
                self.expr(2);
                if self.arg_count > 0 && self.rng.gen_bool(0.2) {
                    let k = self.rng.gen_range(0..self.arg_count);
                    self.body.push(Op::Starg(k));
                } else if !self.assignables.is_empty() {
                    let k = self.assignables[self.rng.gen_range(0..self.assignables.len())];
                    self.body.push(Op::Stloc(k));
                } else {
                    self.body.push(Op::Pop);
                }
            }
            5 | 6 if self.array_local.is_some() => {
                let a = self.array_local.unwrap();
                self.body.push(Op::Ldloc(a));
                self.expr(1);
                self.body.push(Op::Ldc(7));
                self.body.push(Op::Bin(BinAlu::And));
                self.expr(1);
                self.body.push(Op::Stelem);
            }
            7 | 8 if depth > 0 => {
                // if / if-else
                self.expr(1);
                let else_l = self.new_label();
                self.body.push(Op::Brfalse(u32::MAX));
                let brfalse_at = self.body.len() - 1;
                self.patches.push((brfalse_at, else_l));
                self.stmt(depth - 1);
                if self.rng.gen_bool(0.5) {
                    let end_l = self.new_label();
                    let use_leave = self.rng.gen_bool(0.2);
                    self.patches.push((self.body.len(), end_l));
                    self.body.push(if use_leave {
                        Op::Leave(u32::MAX)
                    } else {
                        Op::Br(u32::MAX)
                    });
                    self.bind(else_l);
                    self.stmt(depth - 1);
                    self.bind(end_l);
                } else {
                    self.bind(else_l);
                }
            }
            9 if depth > 0 && !self.free_counters.is_empty() => {
                // Bounded do-while loop on a dedicated counter local.
                let c = self.free_counters.pop().unwrap();
                let k = self.rng.gen_range(1..6);
                self.body.push(Op::Ldc(k));
                self.body.push(Op::Stloc(c));
                let head = self.body.len() as u32;
                self.stmt(depth - 1);
                self.body.push(Op::Ldloc(c));
                self.body.push(Op::Ldc(1));
                self.body.push(Op::Bin(BinAlu::Sub));
                self.body.push(Op::Stloc(c));
                self.body.push(Op::Ldloc(c));
                self.body.push(Op::Brtrue(head));
                self.free_counters.push(c);
            }
            10 if depth > 0 => {
                // switch over a masked selector.
                self.expr(1);
                self.body.push(Op::Ldc(3));
                self.body.push(Op::Bin(BinAlu::And));
                let a = self.new_label();
                let b = self.new_label();
                let end = self.new_label();
                self.patches.push((self.body.len(), a));
                self.patches.push((self.body.len(), b));
                self.body.push(Op::Switch(vec![u32::MAX, u32::MAX]));
                self.stmt(0);
                self.branch(Op::Br, end);
                self.bind(a);
                self.stmt(0);
                self.branch(Op::Br, end);
                self.bind(b);
                self.stmt(0);
                self.bind(end);
            }
            11 if self.rng.gen_ratio(1, 10) => {
                // Guarded explicit trap.
                self.expr(1);
                let skip = self.new_label();
                self.patches.push((self.body.len(), skip));
                self.body.push(Op::Brfalse(u32::MAX));
                self.body.push(Op::Trap(TrapCode::Explicit));
                self.bind(skip);
            }
            _ => {
                self.expr(2);
                self.body.push(Op::Pop);
            }
        }
    }

    fn finish(mut self, name: String, local_count: u16, returns: bool) -> Method {
        self.expr(1);
        self.body.push(Op::Ret);
        // Bind any labels still pointing past the end onto the final ret.
        for (at, label) in std::mem::take(&mut self.patches) {
            let target = self.labels[label].expect("unbound label");
            match &mut self.body[at] {
                Op::Br(t) | Op::Leave(t) | Op::Bc(_, t) | Op::Brtrue(t) | Op::Brfalse(t) => {
                    *t = target
                }
                Op::Switch(ts) => {
                    for t in ts.iter_mut() {
                        if *t == u32::MAX {
                            *t = target;
                            break;
                        }
                    }
                }
                other => panic!("patch site holds {:?}", other),
            }
        }
        Method {
            name,
            arg_count: self.arg_count,
            local_count,
            returns_value: returns,
            body: self.body,
        }
    }
}

/// A random multi-method program, valid by construction (asserted). Every
/// method returns an integer; later methods may call earlier ones.
/// Oversized methods are rejected and redrawn.
pub fn gen_program(rng: &mut ChaCha8Rng, with_arrays: bool) -> Program {
    loop {
        if let Some(p) = try_gen_program(rng, with_arrays) {
            return p;
        }
    }
}

fn try_gen_program(rng: &mut ChaCha8Rng, with_arrays: bool) -> Option<Program> {
    let method_count = rng.gen_range(1..=3);
    let mut program = Program::default();
    let mut callees: Vec<(String, u16)> = Vec::new();
    for mi in 0..method_count {
        let arg_count = rng.gen_range(0..=3u16);
        let local_count = 4u16;
        let arrays = with_arrays && rng.gen_bool(0.5);
        let array_local = if arrays { Some(3u16) } else { None };
        let assignables: Vec<u16> = if arrays { vec![0, 1] } else { vec![0, 1, 2] };
        let free_counters: Vec<u16> = if arrays { vec![2] } else { vec![3] };
        let mut g = MethodGen {
            rng,
            body: Vec::new(),
            patches: Vec::new(),
            labels: Vec::new(),
            arg_count,
            array_local,
            free_counters,
            assignables,
            callees: callees.clone(),
        };
        if let Some(a) = array_local {
            g.body.push(Op::Ldc(8));
            g.body.push(Op::Newarr);
            g.body.push(Op::Stloc(a));
        }
        let stmts = g.rng.gen_range(1..=5);
        for _ in 0..stmts {
            g.stmt(2);
        }
        let name = format!("f{}", mi);
        let method = g.finish(name.clone(), local_count, true);
        if method.body.len() > MAX_BODY {
            return None;
        }
        callees.push((name, arg_count));
        program.methods.push(method);
    }
    validate_program(&program).expect("generated program must validate");
    Some(program)
}

/// Unstructured instruction soup for validator fuzzing; frequently invalid.
pub fn gen_junk_method(rng: &mut ChaCha8Rng) -> Program {
    let len = rng.gen_range(2..24usize);
    let mut body = Vec::new();
    for i in 0..len - 1 {
        let target = rng.gen_range(0..len as u32);
        body.push(match rng.gen_range(0..14) {
            0 => Op::Ldc(rng.gen_range(-5..5)),
            1 => Op::Ldloc(rng.gen_range(0..2)),
            2 => Op::Stloc(rng.gen_range(0..2)),
            3 => Op::Bin(BinAlu::Add),
            4 => Op::Bin(BinAlu::Div),
            5 => Op::Un(UnAlu::Neg),
            6 => Op::Dup,
            7 => Op::Pop,
            8 => Op::Br(target),
            9 => Op::Bc(Cond::Lt, target),
            10 => Op::Brtrue(target),
            11 => Op::Ret,
            12 => Op::Trap(TrapCode::Explicit),
            _ => Op::Ldc(i as i32),
        });
    }
    body.push(if rng.gen_bool(0.8) {
        Op::Ret
    } else {
        Op::Br(rng.gen_range(0..len as u32 - 1))
    });
    Program {
        methods: vec![Method {
            name: "j".into(),
            arg_count: 1,
            local_count: 2,
            returns_value: false,
            body,
        }],
    }
}

// ---- random digraphs and the dominator oracle -----------------------------

/// A synthetic CFG: every node reachable via a random spanning arborescence,
/// plus random extra edges in both directions (self loops included).
pub fn random_cfg(rng: &mut ChaCha8Rng, n: usize) -> Cfg {
    let mut successors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 1..n {
        let j = rng.gen_range(0..i);
        successors[j].push(i);
    }
    let extra = rng.gen_range(0..=2 * n);
    for _ in 0..extra {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        successors[a].push(b);
    }
    let mut pred_count = vec![0u32; n];
    for succ in &successors {
        for &s in succ {
            pred_count[s] += 1;
        }
    }
    let blocks = (0..n)
        .map(|i| silc::cfg::BasicBlock {
            leader: i as u32,
            end: i as u32 + 1,
            successors: successors[i].clone(),
            pred_count: pred_count[i],
        })
        .collect();
    Cfg {
        blocks,
        first_block: 0,
        last_block: n - 1,
        leaders: (0..n as u32).collect(),
    }
}

/// Naive all-dominators dataflow: Dom(b) = {b} ∪ ⋂ Dom(preds), iterated to a
/// fixpoint over the reachable subgraph. Nodes are bitmask positions.
pub fn oracle_dominators(cfg: &Cfg) -> Vec<Option<u64>> {
    let n = cfg.blocks.len();
    assert!(n <= 64);
    let mut reach = vec![false; n];
    let mut stack = vec![cfg.first_block];
    reach[cfg.first_block] = true;
    while let Some(b) = stack.pop() {
        for &s in &cfg.blocks[b].successors {
            if !reach[s] {
                reach[s] = true;
                stack.push(s);
            }
        }
    }
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (b, blk) in cfg.blocks.iter().enumerate() {
        if reach[b] {
            for &s in &blk.successors {
                preds[s].push(b);
            }
        }
    }
    let full: u64 = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut dom: Vec<u64> = (0..n).map(|_| full).collect();
    dom[cfg.first_block] = 1u64 << cfg.first_block;
    let mut changed = true;
    while changed {
        changed = false;
        for b in 0..n {
            if !reach[b] || b == cfg.first_block {
                continue;
            }
            let mut new = full;
            for &p in &preds[b] {
                new &= dom[p];
            }
            new |= 1u64 << b;
            if new != dom[b] {
                dom[b] = new;
                changed = true;
            }
        }
    }
    (0..n)
        .map(|b| if reach[b] { Some(dom[b]) } else { None })
        .collect()
}

// ---- differential execution ------------------------------------------------

pub const FUZZ_MAX_STEPS: u64 = 2_000_000;

/// Runs one entry point through the interpreter, the baseline backend, and
/// the optimizing backend (with the given switches); panics on any
/// divergence or internal fault.
pub fn assert_agree(program: &Program, entry: &str, args: &[i32], opts: OptFlags) -> Outcome {
    let depths = validate_program(program).expect("validated");
    let vargs: Vec<Value> = args.iter().map(|&v| Value::Int(v)).collect();
    let reference = Interp::new()
        .run(program, entry, &vargs, FUZZ_MAX_STEPS)
        .unwrap_or_else(|e| panic!("interpreter fault on {}({:?}): {}", entry, args, e))
        .outcome;

    let base = compile_baseline(program);
    let base_out = Machine::new()
        .execute(&base, entry, args, FUZZ_MAX_STEPS)
        .unwrap_or_else(|e| panic!("baseline fault on {}({:?}): {}", entry, args, e))
        .outcome;
    assert_eq!(
        reference, base_out,
        "baseline diverges on {}({:?})\n{}",
        entry, args, silc::il::print(program)
    );

    let (opt, _, _) = compile_opt(program, &depths, opts).expect("compile");
    let opt_out = Machine::new()
        .execute(&opt, entry, args, FUZZ_MAX_STEPS)
        .unwrap_or_else(|e| panic!("opt fault on {}({:?}): {}", entry, args, e))
        .outcome;
    assert_eq!(
        reference, opt_out,
        "opt diverges on {}({:?}) with {:?}\n{}",
        entry, args, opts, silc::il::print(program)
    );
    reference
}

/// Compiles and runs a `.sil` text on a chosen backend with an optional
/// array argument, returning (outcome, steps).
pub fn run_backend(
    text: &str,
    entry: &str,
    array: Option<&[i32]>,
    args: &[i32],
    optimizing: bool,
    opts: OptFlags,
    max_steps: u64,
) -> (Outcome, u64) {
    let (program, depths) = parse_and_validate(text).expect("corpus parses");
    let prog = if optimizing {
        compile_opt(&program, &depths, opts).expect("compiles").0
    } else {
        compile_baseline(&program)
    };
    let mut m = Machine::new();
    let mut all = Vec::new();
    if let Some(vals) = array {
        all.push(m.alloc_array(vals).expect("array"));
    }
    all.extend_from_slice(args);
    let r = m.execute(&prog, entry, &all, max_steps).expect("executes");
    (r.outcome, r.steps)
}

pub fn run_interp(
    text: &str,
    entry: &str,
    array: Option<&[i32]>,
    args: &[i32],
    max_steps: u64,
) -> Outcome {
    let (program, _) = parse_and_validate(text).expect("corpus parses");
    let mut i = Interp::new();
    let mut all = Vec::new();
    if let Some(vals) = array {
        all.push(i.alloc_array(vals));
    }
    all.extend(args.iter().map(|&v| Value::Int(v)));
    i.run(&program, entry, &all, max_steps)
        .expect("interp executes")
        .outcome
}

/// Deterministic argument vectors (at least four) for a method.
pub fn arg_vectors(rng: &mut ChaCha8Rng, argc: u16, n: usize) -> Vec<Vec<i32>> {
    let specials = [0, 1, -1, 2, 7, i32::MIN, i32::MAX, 100];
    (0..n)
        .map(|_| {
            (0..argc)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        specials[rng.gen_range(0..specials.len())]
                    } else {
                        rng.gen_range(-1000..1000)
                    }
                })
                .collect()
        })
        .collect()
}
