//! Single-pass template generator: the comparison baseline.
//!
//! One switch over IL instructions, each emitting a fixed code template that
//! keeps every intermediate on the machine stack, using almost exclusively
//! R0 with R3 as scratch (R2 where the ISA demands it). Same call
//! convention, frame base, and trap semantics as the optimizing backend; no
//! temporaries or spill zones, no scaled-index addressing.

use crate::il::{Method, Op, Program};
use crate::sem::{BinAlu, Cond, TrapCode};
use crate::target::{
    Cc, CallTarget, Frame, Inst, JumpTarget, LineTag, MemOperand, MethodCode, Operand, Reg,
};
use std::collections::BTreeMap;

const R0: Operand = Operand::Reg(Reg::R0);
const R2: Operand = Operand::Reg(Reg::R2);
const R3: Operand = Operand::Reg(Reg::R3);

struct Gen {
    code: Vec<Inst>,
    tags: Vec<LineTag>,
    tag: LineTag,
    frame: Frame,
    /// (code index, IL target offset) pairs patched at the end.
    fixups: Vec<(usize, u32)>,
    starts: Vec<usize>,
    stubs: BTreeMap<TrapCode, Vec<usize>>,
}

impl Gen {
    fn emit(&mut self, i: Inst) {
        self.code.push(i);
        self.tags.push(self.tag);
    }

    fn push(&mut self, src: Operand) {
        self.emit(Inst::Push { src });
    }

    fn pop(&mut self, dst: Reg) {
        self.emit(Inst::Pop { dst });
    }

    fn local(&self, k: u16) -> Operand {
        Operand::Mem(MemOperand::base_disp(Reg::Fp, self.frame.local_offset(k)))
    }

    fn arg(&self, k: u16) -> Operand {
        Operand::Mem(MemOperand::base_disp(Reg::Fp, self.frame.arg_offset(k)))
    }

    fn branch(&mut self, cc: Option<Cc>, target: u32) {
        self.fixups.push((self.code.len(), target));
        match cc {
            Some(cc) => self.emit(Inst::Jcc {
                cc,
                target: JumpTarget::Index(0),
            }),
            None => self.emit(Inst::Jmp {
                target: JumpTarget::Index(0),
            }),
        }
    }

    fn jcc_stub(&mut self, cc: Cc, code: TrapCode) {
        self.stubs.entry(code).or_default().push(self.code.len());
        self.emit(Inst::Jcc {
            cc,
            target: JumpTarget::Index(0),
        });
    }

    fn epilogue(&mut self) {
        self.emit(Inst::Mov {
            dst: Operand::Reg(Reg::R1),
            src: Operand::Mem(MemOperand::base_disp(Reg::Fp, -4)),
        });
        self.emit(Inst::Mov {
            dst: Operand::Reg(Reg::R5),
            src: Operand::Mem(MemOperand::base_disp(Reg::Fp, -8)),
        });
        self.emit(Inst::Mov {
            dst: Operand::Reg(Reg::Sp),
            src: Operand::Reg(Reg::Fp),
        });
        self.pop(Reg::Fp);
        self.emit(Inst::Ret);
    }

    /// Null + bounds check with ref in R0 and index in R3, then replace R0
    /// with the element address base (no scaled-index operands here:
    /// the index is shifted and added explicitly).
    fn element_address(&mut self) {
        self.emit(Inst::Cmp {
            a: R0,
            b: Operand::Imm(0),
        });
        self.jcc_stub(Cc::Eq, TrapCode::NullRef);
        self.emit(Inst::Cmp {
            a: R3,
            b: Operand::Mem(MemOperand::base_disp(Reg::R0, 0)),
        });
        self.jcc_stub(Cc::AeU, TrapCode::IndexRange);
        self.emit(Inst::Bin {
            op: BinAlu::Shl,
            dst: R3,
            src: Operand::Imm(2),
        });
        self.emit(Inst::Bin {
            op: BinAlu::Add,
            dst: R0,
            src: R3,
        });
    }
}

fn cond_cc(c: Cond) -> Cc {
    match c {
        Cond::Eq => Cc::Eq,
        Cond::Ne => Cc::Ne,
        Cond::Lt => Cc::LtS,
        Cond::Le => Cc::LeS,
        Cond::Gt => Cc::GtS,
        Cond::Ge => Cc::GeS,
    }
}

/// Compiles one method with per-IL templates. Asm lines are tagged with the
/// emitting IL offset (there is no CFG in this single-pass path).
pub fn generate_baseline(program: &Program, method: &Method) -> MethodCode {
    let frame = Frame {
        arg_count: method.arg_count,
        local_count: method.local_count,
        temp_slots: 0,
        spill_slots: 0,
    };
    let mut g = Gen {
        code: Vec::new(),
        tags: Vec::new(),
        tag: LineTag::Prologue,
        frame,
        fixups: Vec::new(),
        starts: Vec::new(),
        stubs: BTreeMap::new(),
    };

    // Prologue: push FP, establish frame, save callee-saved pair, reserve
    // and zero the locals.
    g.push(Operand::Reg(Reg::Fp));
    g.emit(Inst::Mov {
        dst: Operand::Reg(Reg::Fp),
        src: Operand::Reg(Reg::Sp),
    });
    g.push(Operand::Reg(Reg::R1));
    g.push(Operand::Reg(Reg::R5));
    if frame.reserve_bytes() > 0 {
        g.emit(Inst::Bin {
            op: BinAlu::Sub,
            dst: Operand::Reg(Reg::Sp),
            src: Operand::Imm(frame.reserve_bytes()),
        });
    }
    for k in 0..method.local_count {
        let dst = g.local(k);
        g.emit(Inst::Mov {
            dst,
            src: Operand::Imm(0),
        });
    }

    for (offset, op) in method.body.iter().enumerate() {
        g.starts.push(g.code.len());
        g.tag = LineTag::Block(offset);
        match op {
            Op::Ldc(v) => {
                g.emit(Inst::Mov {
                    dst: R0,
                    src: Operand::Imm(*v),
                });
                g.push(R0);
            }
            Op::Ldloc(k) => {
                let src = g.local(*k);
                g.emit(Inst::Mov { dst: R0, src });
                g.push(R0);
            }
            Op::Stloc(k) => {
                g.pop(Reg::R0);
                let dst = g.local(*k);
                g.emit(Inst::Mov { dst, src: R0 });
            }
            Op::Ldarg(k) => {
                let src = g.arg(*k);
                g.emit(Inst::Mov { dst: R0, src });
                g.push(R0);
            }
            Op::Starg(k) => {
                g.pop(Reg::R0);
                let dst = g.arg(*k);
                g.emit(Inst::Mov { dst, src: R0 });
            }
            Op::Bin(b) => {
                match b {
                    BinAlu::Div | BinAlu::Rem => {
                        g.pop(Reg::R2);
                        g.pop(Reg::R0);
                        g.emit(Inst::Div { src: R2 });
                        if *b == BinAlu::Rem {
                            g.emit(Inst::Mov { dst: R0, src: R3 });
                        }
                    }
                    BinAlu::Shl | BinAlu::Shr | BinAlu::Shru => {
                        g.pop(Reg::R2);
                        g.pop(Reg::R0);
                        g.emit(Inst::Bin {
                            op: *b,
                            dst: R0,
                            src: R2,
                        });
                    }
                    _ => {
                        g.pop(Reg::R3);
                        g.pop(Reg::R0);
                        g.emit(Inst::Bin {
                            op: *b,
                            dst: R0,
                            src: R3,
                        });
                    }
                }
                g.push(R0);
            }
            Op::Un(u) => {
                g.pop(Reg::R0);
                g.emit(Inst::Un { op: *u, dst: R0 });
                g.push(R0);
            }
            Op::Dup => {
                g.pop(Reg::R0);
                g.push(R0);
                g.push(R0);
            }
            Op::Pop => g.pop(Reg::R0),
            Op::Br(t) | Op::Leave(t) => g.branch(None, *t),
            Op::Bc(c, t) => {
                g.pop(Reg::R3);
                g.pop(Reg::R0);
                g.emit(Inst::Cmp { a: R0, b: R3 });
                g.branch(Some(cond_cc(*c)), *t);
            }
            Op::Brtrue(t) => {
                g.pop(Reg::R0);
                g.emit(Inst::Cmp {
                    a: R0,
                    b: Operand::Imm(0),
                });
                g.branch(Some(Cc::Ne), *t);
            }
            Op::Brfalse(t) => {
                g.pop(Reg::R0);
                g.emit(Inst::Cmp {
                    a: R0,
                    b: Operand::Imm(0),
                });
                g.branch(Some(Cc::Eq), *t);
            }
            Op::Switch(ts) => {
                g.pop(Reg::R0);
                for (k, t) in ts.iter().enumerate() {
                    g.emit(Inst::Cmp {
                        a: R0,
                        b: Operand::Imm(k as i32),
                    });
                    g.branch(Some(Cc::Eq), *t);
                }
            }
            Op::Ret => {
                if method.returns_value {
                    g.pop(Reg::R0);
                }
                g.epilogue();
            }
            Op::Call(name) => {
                // Arguments already sit on the machine stack in push order.
                let callee = program.find(name).unwrap();
                let info = &program.methods[callee];
                g.emit(Inst::Call {
                    target: CallTarget::Method(callee),
                });
                if info.arg_count > 0 {
                    g.emit(Inst::Bin {
                        op: BinAlu::Add,
                        dst: Operand::Reg(Reg::Sp),
                        src: Operand::Imm(4 * info.arg_count as i32),
                    });
                }
                if info.returns_value {
                    g.push(R0);
                }
            }
            Op::Newarr => {
                g.emit(Inst::Call {
                    target: CallTarget::NewArr,
                });
                g.emit(Inst::Bin {
                    op: BinAlu::Add,
                    dst: Operand::Reg(Reg::Sp),
                    src: Operand::Imm(4),
                });
                g.push(R0);
            }
            Op::Ldlen => {
                g.pop(Reg::R0);
                g.emit(Inst::Cmp {
                    a: R0,
                    b: Operand::Imm(0),
                });
                g.jcc_stub(Cc::Eq, TrapCode::NullRef);
                g.emit(Inst::Mov {
                    dst: R0,
                    src: Operand::Mem(MemOperand::base_disp(Reg::R0, 0)),
                });
                g.push(R0);
            }
            Op::Ldelem => {
                g.pop(Reg::R3);
                g.pop(Reg::R0);
                g.element_address();
                g.emit(Inst::Mov {
                    dst: R0,
                    src: Operand::Mem(MemOperand::base_disp(Reg::R0, 4)),
                });
                g.push(R0);
            }
            Op::Stelem => {
                g.pop(Reg::R2);
                g.pop(Reg::R3);
                g.pop(Reg::R0);
                g.element_address();
                g.emit(Inst::Mov {
                    dst: Operand::Mem(MemOperand::base_disp(Reg::R0, 4)),
                    src: R2,
                });
            }
            Op::Trap(c) => {
                g.stubs.entry(*c).or_default().push(g.code.len());
                g.emit(Inst::Jmp {
                    target: JumpTarget::Index(0),
                });
            }
        }
    }

    // Trap stubs at the end, then patch branches to IL offsets and stubs.
    g.tag = LineTag::Stub;
    let stubs = std::mem::take(&mut g.stubs);
    for (code, sites) in stubs {
        let at = g.code.len();
        g.emit(Inst::TrapStub { code });
        for site in sites {
            patch(&mut g.code[site], at);
        }
    }
    let fixups = std::mem::take(&mut g.fixups);
    for (site, il_target) in fixups {
        let at = g.starts[il_target as usize];
        patch(&mut g.code[site], at);
    }

    MethodCode {
        name: method.name.clone(),
        code: g.code,
        tags: g.tags,
        frame,
        returns_value: method.returns_value,
    }
}

fn patch(inst: &mut Inst, at: usize) {
    match inst {
        Inst::Jcc { target, .. } | Inst::Jmp { target } => *target = JumpTarget::Index(at),
        _ => unreachable!("patch target is not a branch"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::il::parse;
    use crate::target::{assemble, Machine, Outcome};

    fn run(text: &str, entry: &str, args: &[i32]) -> Outcome {
        let p = parse(text).unwrap();
        crate::il::validate_program(&p).unwrap();
        let methods = p
            .methods
            .iter()
            .map(|m| generate_baseline(&p, m))
            .collect();
        let prog = assemble(methods);
        Machine::new()
            .execute(&prog, entry, args, 1_000_000)
            .unwrap()
            .outcome
    }

    #[test]
    fn ldc_template_shape() {
        let p = parse(".method m 0 args 0 locals ret\n ldc 5\n ret").unwrap();
        let mc = generate_baseline(&p, &p.methods[0]);
        // MOV R0, 5; PUSH R0 right after the prologue.
        let body: Vec<&Inst> = mc
            .code
            .iter()
            .zip(&mc.tags)
            .filter(|(_, t)| matches!(t, LineTag::Block(0)))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(
            body[0],
            &Inst::Mov {
                dst: Operand::Reg(Reg::R0),
                src: Operand::Imm(5)
            }
        );
        assert_eq!(
            body[1],
            &Inst::Push {
                src: Operand::Reg(Reg::R0)
            }
        );
    }

    #[test]
    fn add_template_computes() {
        assert_eq!(
            run(".method m 0 args 0 locals ret\n ldc 2\n ldc 3\n add\n ret", "m", &[]),
            Outcome::Value(Some(5))
        );
    }

    #[test]
    fn arithmetic_and_locals() {
        let text = ".method m 2 args 1 locals ret\n ldarg 0\n ldarg 1\n mul\n stloc 0\n ldloc 0\n ldarg 0\n sub\n ret";
        assert_eq!(run(text, "m", &[7, 6]), Outcome::Value(Some(35)));
    }

    #[test]
    fn division_and_traps() {
        let t = ".method m 2 args 0 locals ret\n ldarg 0\n ldarg 1\n div\n ret";
        assert_eq!(run(t, "m", &[42, 5]), Outcome::Value(Some(8)));
        assert_eq!(run(t, "m", &[1, 0]), Outcome::Trap(TrapCode::DivZero));
        let r = ".method m 2 args 0 locals ret\n ldarg 0\n ldarg 1\n rem\n ret";
        assert_eq!(run(r, "m", &[42, 5]), Outcome::Value(Some(2)));
    }

    #[test]
    fn loops_and_branches() {
        // sum 1..=n
        let text = ".method m 1 args 1 locals ret\nL: ldloc 0\n ldarg 0\n add\n stloc 0\n ldarg 0\n ldc 1\n sub\n starg 0\n ldarg 0\n brtrue L\n ldloc 0\n ret";
        assert_eq!(run(text, "m", &[10]), Outcome::Value(Some(55)));
    }

    #[test]
    fn arrays_end_to_end() {
        let text = ".method m 0 args 1 locals ret\n ldc 3\n newarr\n stloc 0\n ldloc 0\n ldc 1\n ldc 42\n stelem\n ldloc 0\n ldc 1\n ldelem\n ldloc 0\n ldlen\n add\n ret";
        assert_eq!(run(text, "m", &[]), Outcome::Value(Some(45)));
    }

    #[test]
    fn array_bounds_trap() {
        let text = ".method m 1 args 1 locals ret\n ldc 2\n newarr\n stloc 0\n ldloc 0\n ldarg 0\n ldelem\n ret";
        assert_eq!(run(text, "m", &[5]), Outcome::Trap(TrapCode::IndexRange));
        assert_eq!(run(text, "m", &[-1]), Outcome::Trap(TrapCode::IndexRange));
        assert_eq!(run(text, "m", &[1]), Outcome::Value(Some(0)));
    }

    #[test]
    fn null_trap() {
        let text = ".method m 0 args 1 locals ret\n ldloc 0\n ldlen\n ret";
        assert_eq!(run(text, "m", &[]), Outcome::Trap(TrapCode::NullRef));
    }

    #[test]
    fn calls_nest() {
        let text = "\
.method sq 1 args 0 locals ret
 ldarg 0
 ldarg 0
 mul
 ret
.method m 2 args 0 locals ret
 ldarg 0
 call sq
 ldarg 1
 call sq
 add
 ret
";
        assert_eq!(run(text, "m", &[3, 4]), Outcome::Value(Some(25)));
    }

    #[test]
    fn explicit_trap() {
        assert_eq!(
            run(".method m 0 args 0 locals void\n trap 5", "m", &[]),
            Outcome::Trap(TrapCode::Explicit)
        );
    }

    #[test]
    fn no_scaled_index_operands() {
        let text = ".method m 2 args 0 locals ret\n ldarg 0\n ldarg 1\n ldelem\n ret";
        let p = parse(text).unwrap();
        let mc = generate_baseline(&p, &p.methods[0]);
        for inst in &mc.code {
            let mems = match inst {
                Inst::Mov { dst, src } => vec![dst.mem(), src.mem()],
                Inst::Bin { dst, src, .. } => vec![dst.mem(), src.mem()],
                Inst::Cmp { a, b } => vec![a.mem(), b.mem()],
                _ => vec![],
            };
            for m in mems.into_iter().flatten() {
                assert!(m.index.is_none());
            }
        }
    }

    #[test]
    fn switch_dispatch() {
        let text = ".method m 1 args 0 locals ret\n ldarg 0\n switch (A,B)\n ldc 9\n ret\nA: ldc 10\n ret\nB: ldc 11\n ret";
        assert_eq!(run(text, "m", &[0]), Outcome::Value(Some(10)));
        assert_eq!(run(text, "m", &[1]), Outcome::Value(Some(11)));
        assert_eq!(run(text, "m", &[2]), Outcome::Value(Some(9)));
    }
}
