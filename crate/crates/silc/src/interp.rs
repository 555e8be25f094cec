//! Reference interpreter for the IL — the ground truth every backend is
//! checked against. Executes raw IL directly, never the IR, with the shared
//! arithmetic table. Values are tagged so arrays and integers stay distinct;
//! compiled code sees plain machine words instead.

use crate::il::{Method, Op, Program};
use crate::sem::{self, TrapCode};
use crate::target::{ExecResult, Outcome};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Int(i32),
    /// Heap handle; 0 is null.
    Ref(u32),
}

impl Value {
    /// The untagged machine word compiled code would see.
    pub fn word(self) -> i32 {
        match self {
            Value::Int(v) => v,
            Value::Ref(h) => h as i32,
        }
    }
}

/// Faults that cannot occur on validated, well-typed input. Hitting one in a
/// differential run means a harness or generator bug, not a modeled trap.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterpError {
    #[error("operand stack underflow")]
    Underflow,
    #[error("arithmetic on a reference value")]
    TypeConfusion,
    #[error("fell past the end of a method body")]
    FellOffEnd,
    #[error("unknown entry method `{0}`")]
    UnknownEntry(String),
    #[error("heap exhausted")]
    HeapExhausted,
}

const HEAP_CAP_ELEMS: usize = 1 << 20;

struct Frame<'p> {
    method: &'p Method,
    pc: u32,
    args: Vec<Value>,
    locals: Vec<Value>,
    stack: Vec<Value>,
}

/// One interpreter instance per execution.
pub struct Interp {
    heap: Vec<Vec<i32>>,
    heap_elems: usize,
}

impl Default for Interp {
    fn default() -> Self {
        Interp::new()
    }
}

impl Interp {
    pub fn new() -> Interp {
        Interp {
            heap: Vec::new(),
            heap_elems: 0,
        }
    }

    /// Pre-allocates an array, for array-valued entry arguments.
    pub fn alloc_array(&mut self, values: &[i32]) -> Value {
        self.heap.push(values.to_vec());
        self.heap_elems += values.len();
        Value::Ref(self.heap.len() as u32)
    }

    pub fn read_array(&self, v: Value) -> Option<&[i32]> {
        match v {
            Value::Ref(h) if h > 0 => self.heap.get(h as usize - 1).map(|a| a.as_slice()),
            _ => None,
        }
    }

    fn array(&self, v: Value) -> Result<Option<usize>, TrapCode> {
        // Int(0) and Ref(0) are both null; a nonzero Int used as a reference
        // is type confusion and handled by the caller.
        match v {
            Value::Ref(0) | Value::Int(0) => Err(TrapCode::NullRef),
            Value::Ref(h) => Ok(Some(h as usize - 1)),
            Value::Int(_) => Ok(None),
        }
    }

    pub fn run(
        &mut self,
        program: &Program,
        entry: &str,
        args: &[Value],
        max_steps: u64,
    ) -> Result<ExecResult, InterpError> {
        let entry_ix = program
            .find(entry)
            .ok_or_else(|| InterpError::UnknownEntry(entry.to_string()))?;
        let mut steps: u64 = 0;
        let mut counts: BTreeMap<&'static str, u64> = BTreeMap::new();
        let mut frames: Vec<Frame> = vec![new_frame(&program.methods[entry_ix], args.to_vec())];

        let finish = |outcome: Outcome, steps: u64, counts: BTreeMap<&'static str, u64>| {
            Ok(ExecResult {
                outcome,
                steps,
                op_counts: counts,
            })
        };

        loop {
            if steps >= max_steps {
                return finish(Outcome::Trap(TrapCode::StepBudget), steps, counts);
            }
            let f = frames.last_mut().unwrap();
            let op = f
                .method
                .body
                .get(f.pc as usize)
                .ok_or(InterpError::FellOffEnd)?;
            steps += 1;
            *counts.entry(op_name(op)).or_insert(0) += 1;
            f.pc += 1;

            macro_rules! pop {
                () => {
                    f.stack.pop().ok_or(InterpError::Underflow)?
                };
            }
            macro_rules! int {
                ($v:expr) => {
                    match $v {
                        Value::Int(v) => v,
                        Value::Ref(_) => return Err(InterpError::TypeConfusion),
                    }
                };
            }

            match op {
                Op::Ldc(v) => f.stack.push(Value::Int(*v)),
                Op::Ldloc(i) => {
                    let v = f.locals[*i as usize];
                    f.stack.push(v);
                }
                Op::Stloc(i) => {
                    let v = pop!();
                    f.locals[*i as usize] = v;
                }
                Op::Ldarg(i) => {
                    let v = f.args[*i as usize];
                    f.stack.push(v);
                }
                Op::Starg(i) => {
                    let v = pop!();
                    f.args[*i as usize] = v;
                }
                Op::Bin(b) => {
                    let y = int!(pop!());
                    let x = int!(pop!());
                    match sem::bin(*b, x, y) {
                        Ok(v) => f.stack.push(Value::Int(v)),
                        Err(t) => return finish(Outcome::Trap(t), steps, counts),
                    }
                }
                Op::Un(u) => {
                    let x = int!(pop!());
                    f.stack.push(Value::Int(sem::un(*u, x)));
                }
                Op::Dup => {
                    let v = *f.stack.last().ok_or(InterpError::Underflow)?;
                    f.stack.push(v);
                }
                Op::Pop => {
                    pop!();
                }
                Op::Br(t) | Op::Leave(t) => f.pc = *t,
                Op::Bc(c, t) => {
                    let y = pop!().word();
                    let x = pop!().word();
                    if sem::cond_holds(*c, x, y) {
                        f.pc = *t;
                    }
                }
                Op::Brtrue(t) => {
                    if pop!().word() != 0 {
                        f.pc = *t;
                    }
                }
                Op::Brfalse(t) => {
                    if pop!().word() == 0 {
                        f.pc = *t;
                    }
                }
                Op::Switch(ts) => {
                    let v = int!(pop!());
                    if v >= 0 && (v as usize) < ts.len() {
                        f.pc = ts[v as usize];
                    }
                }
                Op::Ret => {
                    let rv = if f.method.returns_value {
                        Some(pop!())
                    } else {
                        None
                    };
                    frames.pop();
                    match frames.last_mut() {
                        None => {
                            return finish(
                                Outcome::Value(rv.map(Value::word)),
                                steps,
                                counts,
                            )
                        }
                        Some(caller) => {
                            if let Some(v) = rv {
                                caller.stack.push(v);
                            }
                        }
                    }
                }
                Op::Call(name) => {
                    let callee = &program.methods[program.find(name).unwrap()];
                    let argc = callee.arg_count as usize;
                    let at = f.stack.len().checked_sub(argc).ok_or(InterpError::Underflow)?;
                    let args: Vec<Value> = f.stack.split_off(at);
                    frames.push(new_frame(callee, args));
                }
                Op::Newarr => {
                    let len = int!(pop!());
                    if len < 0 {
                        return finish(Outcome::Trap(TrapCode::IndexRange), steps, counts);
                    }
                    if self.heap_elems + len as usize > HEAP_CAP_ELEMS {
                        return Err(InterpError::HeapExhausted);
                    }
                    let v = self.alloc_array(&vec![0; len as usize]);
                    f.stack.push(v);
                }
                Op::Ldlen => {
                    let r = pop!();
                    match self.array(r) {
                        Err(t) => return finish(Outcome::Trap(t), steps, counts),
                        Ok(None) => return Err(InterpError::TypeConfusion),
                        Ok(Some(h)) => f.stack.push(Value::Int(self.heap[h].len() as i32)),
                    }
                }
                Op::Ldelem => {
                    let idx = int!(pop!());
                    let r = pop!();
                    match self.element(r, idx) {
                        Err(t) => return finish(Outcome::Trap(t), steps, counts),
                        Ok(None) => return Err(InterpError::TypeConfusion),
                        Ok(Some(h)) => f.stack.push(Value::Int(self.heap[h][idx as usize])),
                    }
                }
                Op::Stelem => {
                    let val = pop!().word();
                    let idx = int!(pop!());
                    let r = pop!();
                    match self.element(r, idx) {
                        Err(t) => return finish(Outcome::Trap(t), steps, counts),
                        Ok(None) => return Err(InterpError::TypeConfusion),
                        Ok(Some(h)) => self.heap[h][idx as usize] = val,
                    }
                }
                Op::Trap(c) => return finish(Outcome::Trap(*c), steps, counts),
            }
        }
    }

    /// Null and bounds checks for an element access. The index comparison is
    /// unsigned, so any negative index traps.
    fn element(&self, r: Value, idx: i32) -> Result<Option<usize>, TrapCode> {
        let h = match self.array(r)? {
            Some(h) => h,
            None => return Ok(None),
        };
        if (idx as u32) >= self.heap[h].len() as u32 {
            return Err(TrapCode::IndexRange);
        }
        Ok(Some(h))
    }
}

fn new_frame(method: &Method, args: Vec<Value>) -> Frame<'_> {
    debug_assert_eq!(args.len(), method.arg_count as usize);
    Frame {
        method,
        pc: 0,
        args,
        locals: vec![Value::Int(0); method.local_count as usize],
        stack: Vec::new(),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Ldc(_) => "ldc",
        Op::Ldloc(_) => "ldloc",
        Op::Stloc(_) => "stloc",
        Op::Ldarg(_) => "ldarg",
        Op::Starg(_) => "starg",
        Op::Bin(b) => b.mnemonic(),
        Op::Un(u) => u.mnemonic(),
        Op::Dup => "dup",
        Op::Pop => "pop",
        Op::Br(_) => "br",
        Op::Leave(_) => "leave",
        Op::Bc(..) => "bc",
        Op::Brtrue(_) => "brtrue",
        Op::Brfalse(_) => "brfalse",
        Op::Switch(_) => "switch",
        Op::Ret => "ret",
        Op::Call(_) => "call",
        Op::Newarr => "newarr",
        Op::Ldlen => "ldlen",
        Op::Ldelem => "ldelem",
        Op::Stelem => "stelem",
        Op::Trap(_) => "trap",
    }
}
