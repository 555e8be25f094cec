//! The modeled CISC register machine: registers, two-address instructions
//! with register/immediate/memory operands, the stack frame layout, and a
//! metering emulator with an array heap.
//!
//! Instructions are stored structurally; branch "offsets" are instruction
//! indices. Addresses are byte addresses, word-aligned, with the heap at low
//! addresses (0 is null) and the machine stack at the high end growing down.

use crate::sem::{self, BinAlu, TrapCode, UnAlu};
use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use thiserror::Error;

/// R0..R5 model the allocatable IA-32 set (eax, ebx, ecx, edx, esi, edi);
/// FP and SP are never allocated. R1 and R5 are callee-saved, R0 carries
/// return values, DIV constrains R0/R3, variable shift counts live in R2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reg {
    R0,
    R1,
    R2,
    R3,
    R4,
    R5,
    Fp,
    Sp,
}

impl Reg {
    pub const ALLOCATABLE: [Reg; 6] = [Reg::R0, Reg::R1, Reg::R2, Reg::R3, Reg::R4, Reg::R5];

    pub fn index(self) -> usize {
        match self {
            Reg::R0 => 0,
            Reg::R1 => 1,
            Reg::R2 => 2,
            Reg::R3 => 3,
            Reg::R4 => 4,
            Reg::R5 => 5,
            Reg::Fp => 6,
            Reg::Sp => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Reg::R0 => "R0",
            Reg::R1 => "R1",
            Reg::R2 => "R2",
            Reg::R3 => "R3",
            Reg::R4 => "R4",
            Reg::R5 => "R5",
            Reg::Fp => "FP",
            Reg::Sp => "SP",
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `[base + index*scale + disp]`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemOperand {
    pub base: Option<Reg>,
    pub index: Option<Reg>,
    pub scale: u8,
    pub disp: i32,
}

impl MemOperand {
    pub fn base_disp(base: Reg, disp: i32) -> MemOperand {
        MemOperand {
            base: Some(base),
            index: None,
            scale: 1,
            disp,
        }
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        let mut first = true;
        if let Some(b) = self.base {
            write!(f, "{}", b)?;
            first = false;
        }
        if let Some(i) = self.index {
            if !first {
                f.write_str(" + ")?;
            }
            write!(f, "{}*{}", i, self.scale)?;
            first = false;
        }
        if self.disp != 0 || first {
            if first {
                write!(f, "{}", self.disp)?;
            } else if self.disp < 0 {
                write!(f, " - {}", -(self.disp as i64))?;
            } else {
                write!(f, " + {}", self.disp)?;
            }
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Reg(Reg),
    Imm(i32),
    Mem(MemOperand),
}

impl Operand {
    pub fn mem(self) -> Option<MemOperand> {
        match self {
            Operand::Mem(m) => Some(m),
            _ => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{}", r),
            Operand::Imm(v) => write!(f, "{}", v),
            Operand::Mem(m) => write!(f, "{}", m),
        }
    }
}

/// Jcc conditions. The unsigned ones implement bounds checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cc {
    Eq,
    Ne,
    LtS,
    LeS,
    GtS,
    GeS,
    /// Unsigned above-or-equal.
    AeU,
    /// Unsigned below-or-equal.
    BeU,
}

impl Cc {
    pub fn name(self) -> &'static str {
        match self {
            Cc::Eq => "JE",
            Cc::Ne => "JNE",
            Cc::LtS => "JL",
            Cc::LeS => "JLE",
            Cc::GtS => "JG",
            Cc::GeS => "JGE",
            Cc::AeU => "JAE",
            Cc::BeU => "JBE",
        }
    }

    pub fn holds(self, a: i32, b: i32) -> bool {
        match self {
            Cc::Eq => a == b,
            Cc::Ne => a != b,
            Cc::LtS => a < b,
            Cc::LeS => a <= b,
            Cc::GtS => a > b,
            Cc::GeS => a >= b,
            Cc::AeU => (a as u32) >= (b as u32),
            Cc::BeU => (a as u32) <= (b as u32),
        }
    }
}

/// Branch destination: a block id until fixup, an instruction index after.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JumpTarget {
    Block(usize),
    Stub(TrapCode),
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallTarget {
    /// Index into `TargetProgram::methods`.
    Method(usize),
    /// Heap allocation builtin: pops nothing itself; reads the length
    /// argument from the stack like a one-arg call, result ref in R0.
    NewArr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inst {
    Mov { dst: Operand, src: Operand },
    Bin { op: BinAlu, dst: Operand, src: Operand },
    Un { op: UnAlu, dst: Operand },
    /// Divides R0 by `src`: quotient to R0, remainder to R3.
    Div { src: Operand },
    Cmp { a: Operand, b: Operand },
    Jcc { cc: Cc, target: JumpTarget },
    Jmp { target: JumpTarget },
    Push { src: Operand },
    Pop { dst: Reg },
    Call { target: CallTarget },
    Ret,
    TrapStub { code: TrapCode },
}

impl Inst {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Inst::Mov { .. } => "MOV",
            Inst::Bin { op, .. } => op.mnemonic(),
            Inst::Un { op, .. } => op.mnemonic(),
            Inst::Div { .. } => "DIV",
            Inst::Cmp { .. } => "CMP",
            Inst::Jcc { .. } => "JCC",
            Inst::Jmp { .. } => "JMP",
            Inst::Push { .. } => "PUSH",
            Inst::Pop { .. } => "POP",
            Inst::Call { .. } => "CALL",
            Inst::Ret => "RET",
            Inst::TrapStub { .. } => "TRAPSTUB",
        }
    }
}

/// Frame layout, FP-relative (all offsets in bytes):
///
/// ```text
///   [FP + 8 + 4*(argc-1-i)]  incoming arg i (pushed left to right)
///   [FP + 4]                 return address
///   [FP + 0]                 saved FP
///   [FP - 4]                 saved R1
///   [FP - 8]                 saved R5
///   [FP - 12 - 4k]           local k
///   [FP - 12 - 4(L + j)]     temporary j   (block-adaptation zone)
///   [FP - 12 - 4(L+T+s)]     spill slot s  (managed like a stack)
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame {
    pub arg_count: u16,
    pub local_count: u16,
    pub temp_slots: u16,
    pub spill_slots: u16,
}

impl Frame {
    pub fn arg_offset(&self, i: u16) -> i32 {
        8 + 4 * (self.arg_count as i32 - 1 - i as i32)
    }

    pub fn local_offset(&self, k: u16) -> i32 {
        -12 - 4 * k as i32
    }

    pub fn temp_offset(&self, j: u16) -> i32 {
        -12 - 4 * (self.local_count as i32 + j as i32)
    }

    pub fn spill_offset(&self, s: u16) -> i32 {
        -12 - 4 * (self.local_count as i32 + self.temp_slots as i32 + s as i32)
    }

    /// Bytes reserved below the two callee-save slots.
    pub fn reserve_bytes(&self) -> i32 {
        4 * (self.local_count as i32 + self.temp_slots as i32 + self.spill_slots as i32)
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        writeln!(out, "zone            offset  size").unwrap();
        writeln!(
            out,
            "args            [FP+8..FP+{}]  {}",
            8 + 4 * self.arg_count.max(1) as i32 - 4,
            4 * self.arg_count as i32
        )
        .unwrap();
        writeln!(out, "ret-addr        [FP+4]  4").unwrap();
        writeln!(out, "saved-fp        [FP+0]  4").unwrap();
        writeln!(out, "saved-r1        [FP-4]  4").unwrap();
        writeln!(out, "saved-r5        [FP-8]  4").unwrap();
        writeln!(
            out,
            "locals          [FP{}..]  {}",
            self.local_offset(0),
            4 * self.local_count as i32
        )
        .unwrap();
        writeln!(
            out,
            "temporaries     [FP{}..]  {}",
            self.temp_offset(0),
            4 * self.temp_slots as i32
        )
        .unwrap();
        writeln!(
            out,
            "spill           [FP{}..]  {}",
            self.spill_offset(0),
            4 * self.spill_slots as i32
        )
        .unwrap();
        out
    }
}

/// Per-line annotation for the asm dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineTag {
    /// CFG block id (optimizing backend) or IL offset (baseline).
    Block(usize),
    Prologue,
    Stub,
}

/// One compiled method before program assembly. Branch targets are still
/// method-local instruction indices.
#[derive(Debug, Clone)]
pub struct MethodCode {
    pub name: String,
    pub code: Vec<Inst>,
    pub tags: Vec<LineTag>,
    pub frame: Frame,
    pub returns_value: bool,
}

#[derive(Debug, Clone)]
pub struct TargetMethodInfo {
    pub name: String,
    pub entry: usize,
    pub code_len: usize,
    pub frame: Frame,
    pub returns_value: bool,
}

#[derive(Debug, Clone)]
pub struct TargetProgram {
    pub code: Vec<Inst>,
    pub tags: Vec<LineTag>,
    pub methods: Vec<TargetMethodInfo>,
}

impl TargetProgram {
    pub fn find(&self, name: &str) -> Option<usize> {
        self.methods.iter().position(|m| m.name == name)
    }
}

/// Concatenates per-method code, shifting method-local branch indices to
/// program-global ones. Call targets are method indices and need no shift.
pub fn assemble(methods: Vec<MethodCode>) -> TargetProgram {
    let mut prog = TargetProgram {
        code: Vec::new(),
        tags: Vec::new(),
        methods: Vec::new(),
    };
    for m in methods {
        let base = prog.code.len();
        prog.methods.push(TargetMethodInfo {
            name: m.name,
            entry: base,
            code_len: m.code.len(),
            frame: m.frame,
            returns_value: m.returns_value,
        });
        for inst in m.code {
            prog.code.push(match inst {
                Inst::Jcc {
                    cc,
                    target: JumpTarget::Index(i),
                } => Inst::Jcc {
                    cc,
                    target: JumpTarget::Index(i + base),
                },
                Inst::Jmp {
                    target: JumpTarget::Index(i),
                } => Inst::Jmp {
                    target: JumpTarget::Index(i + base),
                },
                other => other,
            });
        }
        prog.tags.extend(m.tags);
    }
    prog
}

/// One instruction per line: `B<block>: <mnemonic> <dst>, <src>`; trap stubs
/// listed at the end of each method.
pub fn dump_asm(prog: &TargetProgram, method: usize) -> String {
    let info = &prog.methods[method];
    let mut out = String::new();
    for i in info.entry..info.entry + info.code_len {
        let tag = match prog.tags[i] {
            LineTag::Block(b) => format!("B{}", b),
            LineTag::Prologue => "pro".to_string(),
            LineTag::Stub => "stub".to_string(),
        };
        writeln!(out, "{}: {}", tag, format_inst(&prog.code[i])).unwrap();
    }
    out
}

pub fn format_inst(inst: &Inst) -> String {
    match inst {
        Inst::Mov { dst, src } => format!("MOV {}, {}", dst, src),
        Inst::Bin { op, dst, src } => format!("{} {}, {}", op.mnemonic(), dst, src),
        Inst::Un { op, dst } => format!("{} {}", op.mnemonic(), dst),
        Inst::Div { src } => format!("DIV {}", src),
        Inst::Cmp { a, b } => format!("CMP {}, {}", a, b),
        Inst::Jcc { cc, target } => format!("{} {}", cc.name(), format_target(target)),
        Inst::Jmp { target } => format!("JMP {}", format_target(target)),
        Inst::Push { src } => format!("PUSH {}", src),
        Inst::Pop { dst } => format!("POP {}", dst),
        Inst::Call { target } => match target {
            CallTarget::Method(i) => format!("CALL m{}", i),
            CallTarget::NewArr => "CALL __newarr".to_string(),
        },
        Inst::Ret => "RET".to_string(),
        Inst::TrapStub { code } => format!("TRAPSTUB {}", code),
    }
}

fn format_target(t: &JumpTarget) -> String {
    match t {
        JumpTarget::Block(b) => format!("@B{}", b),
        JumpTarget::Stub(c) => format!("@stub:{}", c),
        JumpTarget::Index(i) => format!("@{}", i),
    }
}

/// Exactly one of return value / trap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Value(Option<i32>),
    Trap(TrapCode),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Value(Some(v)) => write!(f, "result={}", v),
            Outcome::Value(None) => write!(f, "result=void"),
            Outcome::Trap(c) => write!(f, "trap={}", c),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExecResult {
    pub outcome: Outcome,
    /// Dynamic instruction count.
    pub steps: u64,
    pub op_counts: BTreeMap<&'static str, u64>,
}

/// Internal machine faults. These signal a compiler bug or a bad program,
/// never a modeled trap.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("wild memory access at address {addr}")]
    WildAccess { addr: i32 },
    #[error("unresolved branch target")]
    Unresolved,
    #[error("Jcc with no preceding CMP")]
    CmpMissing,
    #[error("malformed instruction: {0}")]
    Malformed(String),
    #[error("emulated stack overflow")]
    StackOverflow,
    #[error("heap exhausted")]
    HeapExhausted,
    #[error("unknown entry method `{0}`")]
    UnknownEntry(String),
}

const HEAP_WORDS: usize = 1 << 20;
const STACK_WORDS: usize = 1 << 16;
const RETURN_SENTINEL: i32 = -1;

/// Fetch-decode-execute machine. One execution per instance.
pub struct Machine {
    regs: [i32; 8],
    mem: Vec<i32>,
    heap_top: usize,
    /// (address, element count) per allocation, in address order.
    allocs: Vec<(i32, i32)>,
    cmp: Option<(i32, i32)>,
    steps: u64,
    counts: BTreeMap<&'static str, u64>,
}

impl Default for Machine {
    fn default() -> Self {
        Machine::new()
    }
}

impl Machine {
    pub fn new() -> Machine {
        Machine {
            regs: [0; 8],
            mem: vec![0; HEAP_WORDS + STACK_WORDS],
            heap_top: 4,
            allocs: Vec::new(),
            cmp: None,
            steps: 0,
            counts: BTreeMap::new(),
        }
    }

    fn stack_base(&self) -> i32 {
        ((HEAP_WORDS + STACK_WORDS) * 4) as i32
    }

    /// Allocates an array before execution; used for array-valued arguments.
    pub fn alloc_array(&mut self, values: &[i32]) -> Result<i32, MachineError> {
        let addr = self.alloc(values.len() as i32)?;
        for (i, v) in values.iter().enumerate() {
            self.mem[addr as usize / 4 + 1 + i] = *v;
        }
        Ok(addr)
    }

    pub fn read_array(&self, addr: i32) -> Option<Vec<i32>> {
        let (base, len) = *self.allocs.iter().find(|(a, _)| *a == addr)?;
        let start = base as usize / 4 + 1;
        Some(self.mem[start..start + len as usize].to_vec())
    }

    fn alloc(&mut self, len: i32) -> Result<i32, MachineError> {
        debug_assert!(len >= 0);
        let words = len as usize + 1;
        if self.heap_top / 4 + words > HEAP_WORDS {
            return Err(MachineError::HeapExhausted);
        }
        let addr = self.heap_top as i32;
        self.mem[self.heap_top / 4] = len;
        self.heap_top += words * 4;
        self.allocs.push((addr, len));
        Ok(addr)
    }

    /// Word accesses must stay inside the live stack (above SP) or inside an
    /// allocated array including its length header; anything else aborts.
    fn check_addr(&self, addr: i32) -> Result<usize, MachineError> {
        if addr <= 0 || addr % 4 != 0 {
            return Err(MachineError::WildAccess { addr });
        }
        if addr >= (HEAP_WORDS * 4) as i32
            && addr >= self.regs[Reg::Sp.index()]
            && addr < self.stack_base()
        {
            return Ok(addr as usize / 4);
        }
        if addr < self.heap_top as i32 {
            // Inside some allocation: find the last allocation at or below.
            let i = self.allocs.partition_point(|&(a, _)| a <= addr);
            if i > 0 {
                let (base, len) = self.allocs[i - 1];
                if addr < base + 4 + 4 * len {
                    return Ok(addr as usize / 4);
                }
            }
        }
        Err(MachineError::WildAccess { addr })
    }

    fn load(&self, addr: i32) -> Result<i32, MachineError> {
        Ok(self.mem[self.check_addr(addr)?])
    }

    fn store(&mut self, addr: i32, value: i32) -> Result<(), MachineError> {
        let ix = self.check_addr(addr)?;
        self.mem[ix] = value;
        Ok(())
    }

    fn eff_addr(&self, m: &MemOperand) -> i32 {
        let mut addr = m.disp;
        if let Some(b) = m.base {
            addr = addr.wrapping_add(self.regs[b.index()]);
        }
        if let Some(i) = m.index {
            addr = addr.wrapping_add(self.regs[i.index()].wrapping_mul(m.scale as i32));
        }
        addr
    }

    fn read(&self, op: &Operand) -> Result<i32, MachineError> {
        match op {
            Operand::Reg(r) => Ok(self.regs[r.index()]),
            Operand::Imm(v) => Ok(*v),
            Operand::Mem(m) => self.load(self.eff_addr(m)),
        }
    }

    fn write(&mut self, op: &Operand, value: i32) -> Result<(), MachineError> {
        match op {
            Operand::Reg(r) => {
                self.regs[r.index()] = value;
                Ok(())
            }
            Operand::Mem(m) => self.store(self.eff_addr(m), value),
            Operand::Imm(_) => Err(MachineError::Malformed("write to immediate".into())),
        }
    }

    fn push(&mut self, value: i32) -> Result<(), MachineError> {
        let sp = self.regs[Reg::Sp.index()] - 4;
        if (sp as usize) < HEAP_WORDS * 4 {
            return Err(MachineError::StackOverflow);
        }
        self.regs[Reg::Sp.index()] = sp;
        self.store(sp, value)
    }

    fn pop(&mut self) -> Result<i32, MachineError> {
        let sp = self.regs[Reg::Sp.index()];
        let v = self.load(sp)?;
        self.regs[Reg::Sp.index()] = sp + 4;
        Ok(v)
    }

    pub fn execute(
        &mut self,
        prog: &TargetProgram,
        entry: &str,
        args: &[i32],
        max_steps: u64,
    ) -> Result<ExecResult, MachineError> {
        let method = prog
            .find(entry)
            .ok_or_else(|| MachineError::UnknownEntry(entry.to_string()))?;
        let info = &prog.methods[method];
        self.regs[Reg::Sp.index()] = self.stack_base();
        for &a in args {
            self.push(a)?;
        }
        self.push(RETURN_SENTINEL)?;
        let mut pc = info.entry;

        loop {
            if self.steps >= max_steps {
                return Ok(self.finish(Outcome::Trap(TrapCode::StepBudget)));
            }
            let inst = prog
                .code
                .get(pc)
                .ok_or_else(|| MachineError::Malformed(format!("pc {} out of code", pc)))?;
            self.steps += 1;
            *self.counts.entry(inst.mnemonic()).or_insert(0) += 1;
            pc += 1;

            match inst {
                Inst::Mov { dst, src } => {
                    let v = self.read(src)?;
                    self.write(dst, v)?;
                }
                Inst::Bin { op, dst, src } => {
                    if matches!(op, BinAlu::Div | BinAlu::Rem) {
                        return Err(MachineError::Malformed("Bin with div/rem".into()));
                    }
                    if matches!(op, BinAlu::Shl | BinAlu::Shr | BinAlu::Shru) {
                        match src {
                            Operand::Imm(_) | Operand::Reg(Reg::R2) => {}
                            _ => {
                                return Err(MachineError::Malformed(
                                    "variable shift count must be in R2".into(),
                                ))
                            }
                        }
                    }
                    let a = self.read(dst)?;
                    let b = self.read(src)?;
                    // Non-div ops cannot fail.
                    let v = sem::bin(*op, a, b).unwrap();
                    self.write(dst, v)?;
                }
                Inst::Un { op, dst } => {
                    let a = self.read(dst)?;
                    self.write(dst, sem::un(*op, a))?;
                }
                Inst::Div { src } => {
                    let a = self.regs[Reg::R0.index()];
                    let b = self.read(src)?;
                    match (sem::bin(BinAlu::Div, a, b), sem::bin(BinAlu::Rem, a, b)) {
                        (Ok(q), Ok(r)) => {
                            self.regs[Reg::R0.index()] = q;
                            self.regs[Reg::R3.index()] = r;
                        }
                        (Err(t), _) | (_, Err(t)) => return Ok(self.finish(Outcome::Trap(t))),
                    }
                }
                Inst::Cmp { a, b } => {
                    let x = self.read(a)?;
                    let y = self.read(b)?;
                    self.cmp = Some((x, y));
                }
                Inst::Jcc { cc, target } => {
                    let (a, b) = self.cmp.ok_or(MachineError::CmpMissing)?;
                    if cc.holds(a, b) {
                        pc = resolve(target)?;
                    }
                }
                Inst::Jmp { target } => pc = resolve(target)?,
                Inst::Push { src } => {
                    let v = self.read(src)?;
                    self.push(v)?;
                }
                Inst::Pop { dst } => {
                    let v = self.pop()?;
                    self.regs[dst.index()] = v;
                }
                Inst::Call { target } => match target {
                    CallTarget::Method(mi) => {
                        let callee = prog
                            .methods
                            .get(*mi)
                            .ok_or_else(|| MachineError::Malformed("bad call target".into()))?;
                        self.push(pc as i32)?;
                        pc = callee.entry;
                    }
                    CallTarget::NewArr => {
                        self.push(pc as i32)?;
                        let len = self.load(self.regs[Reg::Sp.index()] + 4)?;
                        if len < 0 {
                            return Ok(self.finish(Outcome::Trap(TrapCode::IndexRange)));
                        }
                        let addr = self.alloc(len)?;
                        self.regs[Reg::R0.index()] = addr;
                        let ret = self.pop()?;
                        pc = ret as usize;
                    }
                },
                Inst::Ret => {
                    let ret = self.pop()?;
                    if ret == RETURN_SENTINEL {
                        let value = if info.returns_value {
                            Some(self.regs[Reg::R0.index()])
                        } else {
                            None
                        };
                        return Ok(self.finish(Outcome::Value(value)));
                    }
                    pc = ret as usize;
                }
                Inst::TrapStub { code } => return Ok(self.finish(Outcome::Trap(*code))),
            }
        }
    }

    fn finish(&mut self, outcome: Outcome) -> ExecResult {
        ExecResult {
            outcome,
            steps: self.steps,
            op_counts: std::mem::take(&mut self.counts),
        }
    }
}

fn resolve(t: &JumpTarget) -> Result<usize, MachineError> {
    match t {
        JumpTarget::Index(i) => Ok(*i),
        _ => Err(MachineError::Unresolved),
    }
}
