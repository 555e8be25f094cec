//! The source stack IL: instruction set, method model, textual format.
//!
//! Offsets are instruction indices (unit-width instructions), so the offset
//! of instruction `k` in a method body is always `k`. Branch operands hold
//! resolved offsets after parsing.

mod parse;
mod validate;

pub use parse::{parse, ParseError};
pub use validate::{validate, validate_program, StackDepthMap, ValidateError};

use crate::sem::{BinAlu, Cond, TrapCode, UnAlu};
use std::fmt::Write;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Ldc(i32),
    Ldloc(u16),
    Stloc(u16),
    Ldarg(u16),
    Starg(u16),
    Bin(BinAlu),
    Un(UnAlu),
    Dup,
    Pop,
    Br(u32),
    Leave(u32),
    Bc(Cond, u32),
    Brtrue(u32),
    Brfalse(u32),
    Switch(Vec<u32>),
    Ret,
    Call(String),
    Newarr,
    Ldlen,
    Ldelem,
    Stelem,
    Trap(TrapCode),
}

impl Op {
    /// True for instructions that never fall through.
    pub fn is_terminator(&self) -> bool {
        matches!(self, Op::Br(_) | Op::Leave(_) | Op::Ret | Op::Trap(_))
    }

    /// Explicit branch targets, in operand order.
    pub fn branch_targets(&self) -> &[u32] {
        match self {
            Op::Br(t) | Op::Leave(t) | Op::Bc(_, t) | Op::Brtrue(t) | Op::Brfalse(t) => {
                std::slice::from_ref(t)
            }
            Op::Switch(ts) => ts,
            _ => &[],
        }
    }

    /// True for any instruction after which Fig-1-style construction starts a
    /// new leader (all branches plus RET/TRAP).
    pub fn ends_block(&self) -> bool {
        self.is_terminator() || !self.branch_targets().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Method {
    pub name: String,
    pub arg_count: u16,
    pub local_count: u16,
    pub returns_value: bool,
    pub body: Vec<Op>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Program {
    pub methods: Vec<Method>,
}

impl Program {
    pub fn find(&self, name: &str) -> Option<usize> {
        self.methods.iter().position(|m| m.name == name)
    }
}

/// Canonical text form. `parse(print(p)) == p` for any structurally valid
/// program; labels are synthesized as `L<offset>` at branch targets.
pub fn print(program: &Program) -> String {
    let mut out = String::new();
    for m in &program.methods {
        let mut is_target = vec![false; m.body.len()];
        for op in &m.body {
            for &t in op.branch_targets() {
                if (t as usize) < is_target.len() {
                    is_target[t as usize] = true;
                }
            }
        }
        writeln!(
            out,
            ".method {} {} args {} locals {}",
            m.name,
            m.arg_count,
            m.local_count,
            if m.returns_value { "ret" } else { "void" }
        )
        .unwrap();
        for (k, op) in m.body.iter().enumerate() {
            if is_target[k] {
                write!(out, "L{}: ", k).unwrap();
            } else {
                out.push(' ');
            }
            print_op(&mut out, op);
            out.push('\n');
        }
    }
    out
}

fn print_op(out: &mut String, op: &Op) {
    match op {
        Op::Ldc(v) => write!(out, "ldc {}", v).unwrap(),
        Op::Ldloc(i) => write!(out, "ldloc {}", i).unwrap(),
        Op::Stloc(i) => write!(out, "stloc {}", i).unwrap(),
        Op::Ldarg(i) => write!(out, "ldarg {}", i).unwrap(),
        Op::Starg(i) => write!(out, "starg {}", i).unwrap(),
        Op::Bin(b) => out.push_str(&b.mnemonic().to_lowercase()),
        Op::Un(u) => out.push_str(&u.mnemonic().to_lowercase()),
        Op::Dup => out.push_str("dup"),
        Op::Pop => out.push_str("pop"),
        Op::Br(t) => write!(out, "br L{}", t).unwrap(),
        Op::Leave(t) => write!(out, "leave L{}", t).unwrap(),
        Op::Bc(c, t) => write!(out, "{} L{}", c.mnemonic(), t).unwrap(),
        Op::Brtrue(t) => write!(out, "brtrue L{}", t).unwrap(),
        Op::Brfalse(t) => write!(out, "brfalse L{}", t).unwrap(),
        Op::Switch(ts) => {
            out.push_str("switch (");
            for (i, t) in ts.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "L{}", t).unwrap();
            }
            out.push(')');
        }
        Op::Ret => out.push_str("ret"),
        Op::Call(name) => write!(out, "call {}", name).unwrap(),
        Op::Newarr => out.push_str("newarr"),
        Op::Ldlen => out.push_str("ldlen"),
        Op::Ldelem => out.push_str("ldelem"),
        Op::Stelem => out.push_str("stelem"),
        Op::Trap(c) => write!(out, "trap {}", *c as i32).unwrap(),
    }
}
