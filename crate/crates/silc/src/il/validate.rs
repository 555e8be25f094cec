//! Structural validation: computes the operand-stack depth at every
//! instruction and rejects methods the downstream passes cannot handle.
//! After validation the compiler may assume well-formed input.

use super::{Method, Op, Program};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidateError {
    #[error("{method}@{offset}: stack underflow")]
    StackUnderflow { method: String, offset: u32 },
    #[error("{method}@{offset}: inconsistent join depth ({first} vs {second})")]
    InconsistentJoin {
        method: String,
        offset: u32,
        first: u32,
        second: u32,
    },
    #[error("{method}@{offset}: nonzero stack depth {depth} at backward-branch target")]
    LoopHeaderDepth {
        method: String,
        offset: u32,
        depth: u32,
    },
    #[error("{method}@{offset}: depth {found} at ret, expected {expected}")]
    ReturnDepth {
        method: String,
        offset: u32,
        expected: u32,
        found: u32,
    },
    #[error("{method}: fall-through past last instruction")]
    FallThroughEnd { method: String },
    #[error("{method}@{offset}: local index {index} out of range (count {count})")]
    BadLocalIndex {
        method: String,
        offset: u32,
        index: u16,
        count: u16,
    },
    #[error("{method}@{offset}: arg index {index} out of range (count {count})")]
    BadArgIndex {
        method: String,
        offset: u32,
        index: u16,
        count: u16,
    },
    #[error("{method}@{offset}: call to unknown method `{callee}`")]
    UnknownMethod {
        method: String,
        offset: u32,
        callee: String,
    },
}

/// Stack depth on entry, per instruction offset. `None` marks unreachable
/// instructions.
#[derive(Debug, Clone)]
pub struct StackDepthMap {
    pub entry_depth: Vec<Option<u32>>,
}

impl StackDepthMap {
    pub fn depth_at(&self, offset: u32) -> Option<u32> {
        self.entry_depth.get(offset as usize).copied().flatten()
    }
}

/// Stack pops/pushes of one instruction. CALL arity comes from the callee.
fn stack_effect(program: &Program, m: &Method, op: &Op) -> (u32, u32) {
    match op {
        Op::Ldc(_) | Op::Ldloc(_) | Op::Ldarg(_) => (0, 1),
        Op::Stloc(_) | Op::Starg(_) | Op::Pop => (1, 0),
        Op::Bin(_) => (2, 1),
        Op::Un(_) => (1, 1),
        Op::Dup => (1, 2),
        Op::Br(_) | Op::Leave(_) | Op::Trap(_) => (0, 0),
        Op::Bc(_, _) => (2, 0),
        Op::Brtrue(_) | Op::Brfalse(_) | Op::Switch(_) => (1, 0),
        Op::Ret => (if m.returns_value { 1 } else { 0 }, 0),
        Op::Call(name) => {
            // Existence checked before the dataflow starts.
            let callee = &program.methods[program.find(name).unwrap()];
            (
                callee.arg_count as u32,
                if callee.returns_value { 1 } else { 0 },
            )
        }
        Op::Newarr | Op::Ldlen => (1, 1),
        Op::Ldelem => (2, 1),
        Op::Stelem => (3, 0),
    }
}

pub fn validate(program: &Program, method_index: usize) -> Result<StackDepthMap, ValidateError> {
    let m = &program.methods[method_index];
    let name = m.name.clone();
    let len = m.body.len();

    if len == 0 {
        return Err(ValidateError::FallThroughEnd { method: name });
    }

    // Static operand checks first.
    for (k, op) in m.body.iter().enumerate() {
        let offset = k as u32;
        match op {
            Op::Ldloc(i) | Op::Stloc(i) if *i >= m.local_count => {
                return Err(ValidateError::BadLocalIndex {
                    method: name,
                    offset,
                    index: *i,
                    count: m.local_count,
                })
            }
            Op::Ldarg(i) | Op::Starg(i) if *i >= m.arg_count => {
                return Err(ValidateError::BadArgIndex {
                    method: name,
                    offset,
                    index: *i,
                    count: m.arg_count,
                })
            }
            Op::Call(callee) if program.find(callee).is_none() => {
                return Err(ValidateError::UnknownMethod {
                    method: name,
                    offset,
                    callee: callee.clone(),
                })
            }
            _ => {}
        }
        debug_assert!(op.branch_targets().iter().all(|&t| (t as usize) < len));
    }

    let mut entry: Vec<Option<u32>> = vec![None; len];
    let mut work: Vec<u32> = vec![0];
    entry[0] = Some(0);

    // Propagates `depth` into `target`; `backward` edges must deliver 0.
    let flow = |entry: &mut Vec<Option<u32>>,
                    work: &mut Vec<u32>,
                    target: u32,
                    depth: u32,
                    backward: bool|
     -> Result<(), ValidateError> {
        if backward && depth != 0 {
            return Err(ValidateError::LoopHeaderDepth {
                method: name.clone(),
                offset: target,
                depth,
            });
        }
        match entry[target as usize] {
            None => {
                entry[target as usize] = Some(depth);
                work.push(target);
            }
            Some(d) if d != depth => {
                return Err(ValidateError::InconsistentJoin {
                    method: name.clone(),
                    offset: target,
                    first: d,
                    second: depth,
                })
            }
            Some(_) => {}
        }
        Ok(())
    };

    while let Some(offset) = work.pop() {
        let op = &m.body[offset as usize];
        let depth = entry[offset as usize].unwrap();
        let (pops, pushes) = stack_effect(program, m, op);
        if depth < pops {
            return Err(ValidateError::StackUnderflow {
                method: name,
                offset,
            });
        }
        let after = depth - pops + pushes;

        if let Op::Ret = op {
            let expected = if m.returns_value { 1 } else { 0 };
            if depth != expected {
                return Err(ValidateError::ReturnDepth {
                    method: name,
                    offset,
                    expected,
                    found: depth,
                });
            }
            continue;
        }
        if let Op::Trap(_) = op {
            continue;
        }

        for &t in op.branch_targets() {
            flow(&mut entry, &mut work, t, after, t <= offset)?;
        }
        if !op.is_terminator() {
            let next = offset + 1;
            if next as usize == len {
                return Err(ValidateError::FallThroughEnd { method: name });
            }
            flow(&mut entry, &mut work, next, after, false)?;
        }
    }

    Ok(StackDepthMap { entry_depth: entry })
}

pub fn validate_program(program: &Program) -> Result<Vec<StackDepthMap>, ValidateError> {
    (0..program.methods.len())
        .map(|i| validate(program, i))
        .collect()
}
