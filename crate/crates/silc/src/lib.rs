//! silc: a three-pass optimizing compiler from a stack-based IL to a modeled
//! CISC register machine, with a single-pass baseline generator and a
//! reference interpreter for differential testing.
//!
//! Pipeline: `il` (parse + validate) → `cfg` → `loops` → `ddg` → `codegen`,
//! or the `baseline` template generator. Both backends produce a
//! [`target::TargetProgram`] executed by the metering emulator in `target`.

pub mod baseline;
pub mod cfg;
pub mod codegen;
pub mod ddg;
pub mod il;
pub mod interp;
pub mod loops;
pub mod pipeline;
pub mod sem;
pub mod target;
