//! Shared arithmetic and comparison semantics.
//!
//! The constant folder, the reference interpreter and the target emulator all
//! evaluate operations through this single table, so a value computed at
//! compile time is bit-identical to one computed at run time.

use std::fmt;

/// Terminal abnormal outcomes. Replaces exception objects in this model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrapCode {
    DivZero = 1,
    Overflow = 2,
    NullRef = 3,
    IndexRange = 4,
    Explicit = 5,
    StepBudget = 6,
}

impl TrapCode {
    pub fn name(self) -> &'static str {
        match self {
            TrapCode::DivZero => "DIV_ZERO",
            TrapCode::Overflow => "OVERFLOW",
            TrapCode::NullRef => "NULL_REF",
            TrapCode::IndexRange => "INDEX_RANGE",
            TrapCode::Explicit => "EXPLICIT",
            TrapCode::StepBudget => "STEP_BUDGET",
        }
    }

    pub fn from_code(code: i64) -> Option<TrapCode> {
        Some(match code {
            1 => TrapCode::DivZero,
            2 => TrapCode::Overflow,
            3 => TrapCode::NullRef,
            4 => TrapCode::IndexRange,
            5 => TrapCode::Explicit,
            6 => TrapCode::StepBudget,
            _ => return None,
        })
    }
}

impl fmt::Display for TrapCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Two-operand ALU operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinAlu {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Shru,
}

impl BinAlu {
    pub fn is_commutative(self) -> bool {
        matches!(
            self,
            BinAlu::Add | BinAlu::Mul | BinAlu::And | BinAlu::Or | BinAlu::Xor
        )
    }

    pub fn may_trap(self) -> bool {
        matches!(self, BinAlu::Div | BinAlu::Rem)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinAlu::Add => "ADD",
            BinAlu::Sub => "SUB",
            BinAlu::Mul => "MUL",
            BinAlu::Div => "DIV",
            BinAlu::Rem => "REM",
            BinAlu::And => "AND",
            BinAlu::Or => "OR",
            BinAlu::Xor => "XOR",
            BinAlu::Shl => "SHL",
            BinAlu::Shr => "SHR",
            BinAlu::Shru => "SHRU",
        }
    }
}

/// One-operand ALU operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnAlu {
    Neg,
    Not,
}

impl UnAlu {
    pub fn mnemonic(self) -> &'static str {
        match self {
            UnAlu::Neg => "NEG",
            UnAlu::Not => "NOT",
        }
    }
}

/// Signed comparison conditions used by the IL conditional branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cond {
    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "beq",
            Cond::Ne => "bne",
            Cond::Lt => "blt",
            Cond::Le => "ble",
            Cond::Gt => "bgt",
            Cond::Ge => "bge",
        }
    }
}

/// 32-bit two's-complement evaluation. ADD/SUB/MUL wrap; DIV/REM trap on a
/// zero divisor and on INT_MIN / -1; shift counts are masked to 5 bits.
pub fn bin(op: BinAlu, a: i32, b: i32) -> Result<i32, TrapCode> {
    Ok(match op {
        BinAlu::Add => a.wrapping_add(b),
        BinAlu::Sub => a.wrapping_sub(b),
        BinAlu::Mul => a.wrapping_mul(b),
        BinAlu::Div => {
            check_divide(a, b)?;
            a.wrapping_div(b)
        }
        BinAlu::Rem => {
            check_divide(a, b)?;
            a.wrapping_rem(b)
        }
        BinAlu::And => a & b,
        BinAlu::Or => a | b,
        BinAlu::Xor => a ^ b,
        BinAlu::Shl => a.wrapping_shl(b as u32 & 31),
        BinAlu::Shr => a >> (b as u32 & 31),
        BinAlu::Shru => ((a as u32) >> (b as u32 & 31)) as i32,
    })
}

fn check_divide(a: i32, b: i32) -> Result<(), TrapCode> {
    if b == 0 {
        Err(TrapCode::DivZero)
    } else if a == i32::MIN && b == -1 {
        Err(TrapCode::Overflow)
    } else {
        Ok(())
    }
}

pub fn un(op: UnAlu, a: i32) -> i32 {
    match op {
        UnAlu::Neg => a.wrapping_neg(),
        UnAlu::Not => !a,
    }
}

pub fn cond_holds(c: Cond, a: i32, b: i32) -> bool {
    match c {
        Cond::Eq => a == b,
        Cond::Ne => a != b,
        Cond::Lt => a < b,
        Cond::Le => a <= b,
        Cond::Gt => a > b,
        Cond::Ge => a >= b,
    }
}
