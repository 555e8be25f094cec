//! Third major pass: IR to target code with simultaneous register
//! allocation.
//!
//! Blocks are emitted in original IL order. Allocation follows the
//! most-recently-released-first rule for free registers and evicts the
//! least recently occupied one when none are free (spilling through a
//! stack-managed frame zone). Embeddable loads fold into consumer memory
//! operands, embeddable stores fold into memory-destination forms when the
//! instruction allows it, and everything that cannot fold is materialized
//! by the additional data-movement step. Register state resets at block
//! boundaries: values cross blocks only through memory.

use crate::cfg::Cfg;
use crate::ddg::{DdgMethod, InternalError, IrId, IrNode, IrOp};
use crate::il::Method;
use crate::sem::{BinAlu, Cond, TrapCode, UnAlu};
use crate::target::{
    Cc, CallTarget, Frame, Inst, JumpTarget, LineTag, MemOperand, MethodCode, Operand, Reg,
};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loc {
    /// Not materialized (skipped embeddable load, or not yet emitted).
    None,
    Reg(Reg),
    Spill(u16),
    Imm(i32),
    /// Lives in a frame slot (embedded load source or folded store target).
    Mem(MemOperand),
}

/// Initial pop order R1, R4, R5, R2, R3, R0: constrained registers last.
const INITIAL_FREE: [Reg; 6] = [Reg::R0, Reg::R3, Reg::R2, Reg::R5, Reg::R4, Reg::R1];
const CALLER_SAVED: [Reg; 4] = [Reg::R0, Reg::R2, Reg::R3, Reg::R4];

fn imm_ok(op: BinAlu) -> bool {
    !matches!(op, BinAlu::Div | BinAlu::Rem)
}

fn mem_dst_ok(op: BinAlu) -> bool {
    !matches!(op, BinAlu::Mul | BinAlu::Div | BinAlu::Rem)
}

fn mem_src_ok(op: BinAlu) -> bool {
    !matches!(op, BinAlu::Shl | BinAlu::Shr | BinAlu::Shru)
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

struct Gen<'a> {
    ddg: &'a DdgMethod,
    frame: Frame,
    code: Vec<Inst>,
    tags: Vec<LineTag>,
    tag: LineTag,
    /// Free list: the most recently released register sits at the end and
    /// is the next one reused.
    free: Vec<Reg>,
    /// Occupied, oldest first: the front is the spill victim.
    occupied: Vec<Reg>,
    owner: [Option<IrId>; 6],
    loc: Vec<Loc>,
    /// Remaining-use counters, copied from the DAG's usage counters.
    uses: Vec<u32>,
    /// First consumer of each node, for pre-allocation preferences.
    consumer0: Vec<Option<IrId>>,
    /// Registers pinned for the instruction being emitted.
    reserved: Vec<Reg>,
    spill: Vec<Option<IrId>>,
    spill_peak: usize,
    block_start: Vec<Option<usize>>,
    stubs_used: std::collections::BTreeSet<TrapCode>,
}

pub fn generate(ddg: &DdgMethod, cfg: &Cfg, method: &Method) -> Result<MethodCode, InternalError> {
    let frame = Frame {
        arg_count: method.arg_count,
        local_count: method.local_count,
        temp_slots: ddg.temp_zone_slots,
        spill_slots: 0,
    };
    let mut consumer0 = vec![None; ddg.nodes.len()];
    for bb in 0..ddg.blocks.len() {
        for id in ddg.block_nodes(bb) {
            for &input in &ddg.node(id).ins {
                if consumer0[input.ix()].is_none() {
                    consumer0[input.ix()] = Some(id);
                }
            }
        }
    }
    let mut g = Gen {
        ddg,
        frame,
        code: Vec::new(),
        tags: Vec::new(),
        tag: LineTag::Prologue,
        free: INITIAL_FREE.to_vec(),
        occupied: Vec::new(),
        owner: [None; 6],
        loc: vec![Loc::None; ddg.nodes.len()],
        uses: ddg.nodes.iter().map(|n| n.counter).collect(),
        consumer0,
        reserved: Vec::new(),
        spill: Vec::new(),
        spill_peak: 0,
        block_start: vec![None; cfg.blocks.len()],
        stubs_used: std::collections::BTreeSet::new(),
    };

    // Prologue; the stack reservation is patched once the spill peak is
    // known.
    g.emit(Inst::Push {
        src: Operand::Reg(Reg::Fp),
    });
    g.emit(Inst::Mov {
        dst: Operand::Reg(Reg::Fp),
        src: Operand::Reg(Reg::Sp),
    });
    g.emit(Inst::Push {
        src: Operand::Reg(Reg::R1),
    });
    g.emit(Inst::Push {
        src: Operand::Reg(Reg::R5),
    });
    let reserve_at = g.code.len();
    g.emit(Inst::Bin {
        op: BinAlu::Sub,
        dst: Operand::Reg(Reg::Sp),
        src: Operand::Imm(0),
    });
    for k in 0..method.local_count {
        g.emit(Inst::Mov {
            dst: Operand::Mem(MemOperand::base_disp(Reg::Fp, frame.local_offset(k))),
            src: Operand::Imm(0),
        });
    }

    for bb in cfg.blocks_in_layout_order() {
        if !ddg.blocks[bb].translated {
            continue;
        }
        g.block_start[bb] = Some(g.code.len());
        g.tag = LineTag::Block(bb);
        g.reset_regs();
        for id in ddg.block_nodes(bb) {
            if ddg.node(id).flags.unreachable {
                continue;
            }
            g.reserved.clear();
            g.emit_ir(id);
            g.settle_dead(id);
            #[cfg(debug_assertions)]
            g.check_state();
        }
        if !ddg.blocks[bb].trapped {
            debug_assert!(
                g.occupied.is_empty(),
                "registers live across block boundary: {:?}",
                g.occupied
            );
        }
    }

    // Trap stubs, then the fixup pass over the generated code.
    g.tag = LineTag::Stub;
    let mut stub_at: BTreeMap<TrapCode, usize> = BTreeMap::new();
    for code in g.stubs_used.clone() {
        stub_at.insert(code, g.code.len());
        g.emit(Inst::TrapStub { code });
    }
    let spill_slots = g.spill_peak as u16;
    let mut mc = MethodCode {
        name: method.name.clone(),
        code: g.code,
        tags: g.tags,
        frame: Frame {
            spill_slots,
            ..frame
        },
        returns_value: method.returns_value,
    };
    mc.code[reserve_at] = Inst::Bin {
        op: BinAlu::Sub,
        dst: Operand::Reg(Reg::Sp),
        src: Operand::Imm(mc.frame.reserve_bytes()),
    };
    fixup_branches(&mut mc.code, &g.block_start, &stub_at)?;
    Ok(mc)
}

/// The final pass over generated code that corrects all branch targets.
fn fixup_branches(
    code: &mut [Inst],
    block_start: &[Option<usize>],
    stub_at: &BTreeMap<TrapCode, usize>,
) -> Result<(), InternalError> {
    for inst in code.iter_mut() {
        let target = match inst {
            Inst::Jcc { target, .. } | Inst::Jmp { target } => target,
            _ => continue,
        };
        *target = match *target {
            JumpTarget::Block(b) => JumpTarget::Index(
                block_start[b]
                    .ok_or_else(|| InternalError(format!("branch to unemitted block B{}", b)))?,
            ),
            JumpTarget::Stub(c) => JumpTarget::Index(stub_at[&c]),
            JumpTarget::Index(i) => JumpTarget::Index(i),
        };
    }
    Ok(())
}

impl<'a> Gen<'a> {
    fn node(&self, id: IrId) -> &IrNode {
        self.ddg.node(id)
    }

    fn emit(&mut self, inst: Inst) {
        self.code.push(inst);
        self.tags.push(self.tag);
    }

    fn reset_regs(&mut self) {
        self.free = INITIAL_FREE.to_vec();
        self.occupied.clear();
        self.owner = [None; 6];
    }

    #[cfg(debug_assertions)]
    fn check_state(&self) {
        for r in Reg::ALLOCATABLE {
            let in_free = self.free.contains(&r);
            let in_occ = self.occupied.contains(&r);
            assert!(in_free != in_occ, "{} in both or neither list", r);
            match self.owner[r.index()] {
                Some(id) => {
                    assert!(in_occ, "{} owned but not occupied", r);
                    assert_eq!(self.loc[id.ix()], Loc::Reg(r));
                    assert!(self.uses[id.ix()] > 0, "dead value owns {}", r);
                }
                None => assert!(in_free, "{} unowned but not free", r),
            }
        }
        for (slot, entry) in self.spill.iter().enumerate() {
            if let Some(id) = entry {
                assert_eq!(self.loc[id.ix()], Loc::Spill(slot as u16));
            }
        }
    }

    // ---- frame operands --------------------------------------------------

    fn var_mem(&self, op: &IrOp) -> MemOperand {
        let disp = match op {
            IrOp::Ldloc(i) | IrOp::Stloc(i) => self.frame.local_offset(*i),
            IrOp::Ldarg(i) | IrOp::Starg(i) => self.frame.arg_offset(*i),
            IrOp::Ldtmp(s) | IrOp::Sttmp(s) => self.frame.temp_offset(*s),
            _ => unreachable!("not a frame-slot op"),
        };
        MemOperand::base_disp(Reg::Fp, disp)
    }

    fn spill_mem(&self, slot: u16) -> MemOperand {
        MemOperand::base_disp(Reg::Fp, self.frame.spill_offset(slot))
    }

    // ---- register machinery ----------------------------------------------

    fn reserve(&mut self, r: Reg) {
        if !self.reserved.contains(&r) {
            self.reserved.push(r);
        }
    }

    fn bind(&mut self, r: Reg, id: IrId) {
        debug_assert!(self.owner[r.index()].is_none());
        if let Some(pos) = self.free.iter().position(|&f| f == r) {
            self.free.remove(pos);
        }
        debug_assert!(!self.occupied.contains(&r));
        self.owner[r.index()] = Some(id);
        self.occupied.push(r);
        self.loc[id.ix()] = Loc::Reg(r);
    }

    fn free_reg(&mut self, r: Reg) {
        self.owner[r.index()] = None;
        self.occupied.retain(|&o| o != r);
        self.free.push(r);
    }

    /// Most recently released first, honoring a pre-allocation preference;
    /// spills the least recently occupied register when none are free.
    /// Reserved registers are never taken.
    fn alloc_reg(&mut self, prefer: Option<Reg>) -> Reg {
        if let Some(p) = prefer {
            if !self.reserved.contains(&p) {
                if let Some(pos) = self.free.iter().position(|&r| r == p) {
                    self.free.remove(pos);
                    return p;
                }
            }
        }
        if let Some(pos) = self.free.iter().rposition(|r| !self.reserved.contains(r)) {
            return self.free.remove(pos);
        }
        self.spill_victim()
    }

    fn spill_victim(&mut self) -> Reg {
        let pos = self
            .occupied
            .iter()
            .position(|r| !self.reserved.contains(r))
            .expect("every register reserved at once");
        let r = self.occupied.remove(pos);
        let id = self.owner[r.index()].unwrap();
        let slot = self.spill_push(id);
        self.emit(Inst::Mov {
            dst: Operand::Mem(self.spill_mem(slot)),
            src: Operand::Reg(r),
        });
        self.loc[id.ix()] = Loc::Spill(slot);
        self.owner[r.index()] = None;
        r
    }

    fn spill_push(&mut self, id: IrId) -> u16 {
        let slot = self.spill.len() as u16;
        self.spill.push(Some(id));
        self.spill_peak = self.spill_peak.max(self.spill.len());
        slot
    }

    /// Frees a spill slot; the zone retreats only from the top.
    fn spill_free(&mut self, slot: u16) {
        self.spill[slot as usize] = None;
        while self.spill.last() == Some(&None) {
            self.spill.pop();
        }
    }

    /// Relocates the owner of `r` (into a free register when one exists,
    /// else the spill zone) so `r` can be pre-allocated.
    fn evict(&mut self, r: Reg) {
        let id = match self.owner[r.index()] {
            Some(id) => id,
            None => return,
        };
        self.reserve(r);
        if self.free.iter().any(|f| !self.reserved.contains(f)) {
            let dst = self.alloc_reg(None);
            self.emit(Inst::Mov {
                dst: Operand::Reg(dst),
                src: Operand::Reg(r),
            });
            self.owner[r.index()] = None;
            self.occupied.retain(|&o| o != r);
            self.free.push(r);
            self.bind(dst, id);
        } else {
            let slot = self.spill_push(id);
            self.emit(Inst::Mov {
                dst: Operand::Mem(self.spill_mem(slot)),
                src: Operand::Reg(r),
            });
            self.loc[id.ix()] = Loc::Spill(slot);
            self.owner[r.index()] = None;
            self.occupied.retain(|&o| o != r);
            self.free.push(r);
        }
    }

    /// Pre-allocation preference, one consumer ahead: RET operands and DIV
    /// dividends want R0, variable shift counts want R2.
    fn prefer(&self, id: IrId) -> Option<Reg> {
        if self.node(id).counter != 1 {
            return None;
        }
        let c = self.consumer0[id.ix()]?;
        match &self.node(c).op {
            IrOp::Ret => Some(Reg::R0),
            IrOp::Bin(BinAlu::Div) | IrOp::Bin(BinAlu::Rem)
                if self.node(c).ins.first() == Some(&id) =>
            {
                Some(Reg::R0)
            }
            IrOp::Bin(BinAlu::Shl) | IrOp::Bin(BinAlu::Shr) | IrOp::Bin(BinAlu::Shru)
                if self.node(c).ins.get(1) == Some(&id) =>
            {
                Some(Reg::R2)
            }
            _ => None,
        }
    }

    // ---- operand views ---------------------------------------------------

    /// A readable view of a value: register, immediate, or memory (frame
    /// slot, spill slot read in place, or a lazily resolved element
    /// address). Registers backing the view are pinned for the current
    /// instruction.
    fn view(&mut self, id: IrId) -> Operand {
        match self.loc[id.ix()] {
            Loc::Reg(r) => {
                self.reserve(r);
                Operand::Reg(r)
            }
            Loc::Imm(v) => Operand::Imm(v),
            Loc::Mem(m) => Operand::Mem(m),
            Loc::Spill(s) => Operand::Mem(self.spill_mem(s)),
            Loc::None => {
                // Skipped embeddable element load: build the scaled-index
                // operand from its still-live base and index.
                debug_assert!(matches!(self.node(id).op, IrOp::LdelemAddr));
                let ins = self.node(id).ins.clone();
                Operand::Mem(self.elem_mem(ins[0], ins[1]))
            }
        }
    }

    /// `[ref + idx*4 + 4]`, with a constant index folded into the
    /// displacement.
    fn elem_mem(&mut self, aref: IrId, idx: IrId) -> MemOperand {
        let base = self.ensure_reg(aref);
        match self.loc[idx.ix()] {
            // Wrapping: an out-of-range constant index still folds into a
            // displacement, but the bounds check traps before any use.
            Loc::Imm(k) => MemOperand {
                base: Some(base),
                index: None,
                scale: 1,
                disp: k.wrapping_mul(4).wrapping_add(4),
            },
            _ => {
                let ix = self.ensure_reg(idx);
                MemOperand {
                    base: Some(base),
                    index: Some(ix),
                    scale: 4,
                    disp: 4,
                }
            }
        }
    }

    /// Materializes a value into a register (reloading spills, loading
    /// immediates and memory operands).
    fn ensure_reg(&mut self, id: IrId) -> Reg {
        let src = match self.loc[id.ix()] {
            Loc::Reg(r) => {
                self.reserve(r);
                return r;
            }
            Loc::Imm(v) => Operand::Imm(v),
            Loc::Mem(m) => Operand::Mem(m),
            Loc::Spill(s) => Operand::Mem(self.spill_mem(s)),
            Loc::None => {
                debug_assert!(matches!(self.node(id).op, IrOp::LdelemAddr));
                let ins = self.node(id).ins.clone();
                let m = Operand::Mem(self.elem_mem(ins[0], ins[1]));
                let r = self.alloc_reg(None);
                self.emit(Inst::Mov {
                    dst: Operand::Reg(r),
                    src: m,
                });
                // The element has been read; settle base and index uses.
                self.consume(ins[0], 1);
                self.consume(ins[1], 1);
                self.bind(r, id);
                self.reserve(r);
                // Not an element operand anymore.
                return r;
            }
        };
        let r = self.alloc_reg(self.prefer(id));
        self.emit(Inst::Mov {
            dst: Operand::Reg(r),
            src,
        });
        // Only after the reload is emitted may the slot retreat; a victim
        // spilled during allocation must not reuse it first.
        if let Loc::Spill(s) = self.loc[id.ix()] {
            self.spill_free(s);
        }
        self.bind(r, id);
        self.reserve(r);
        r
    }

    /// Settles `times` uses of `id`. Reaching zero frees its register or
    /// spill slot; a still-unread skipped element load settles its base and
    /// index uses.
    fn consume(&mut self, id: IrId, times: u32) {
        debug_assert!(self.uses[id.ix()] >= times, "over-consumed {:?}", id);
        self.uses[id.ix()] -= times;
        if self.uses[id.ix()] > 0 {
            return;
        }
        match self.loc[id.ix()] {
            Loc::Reg(r) => {
                self.free_reg(r);
                self.loc[id.ix()] = Loc::None;
            }
            Loc::Spill(s) => {
                self.spill_free(s);
                self.loc[id.ix()] = Loc::None;
            }
            Loc::None => {
                if matches!(self.node(id).op, IrOp::LdelemAddr) {
                    let ins = self.node(id).ins.clone();
                    self.consume(ins[0], 1);
                    self.consume(ins[1], 1);
                }
            }
            Loc::Imm(_) | Loc::Mem(_) => {}
        }
    }

    /// Two-address destination: reuse input #1's register when this
    /// instruction is its last use, otherwise copy the value out first
    /// because the operation destroys it.
    fn dst_for(&mut self, node: IrId, in1: IrId, mult: u32, avoid: &[Reg]) -> Reg {
        if self.uses[in1.ix()] == mult {
            if let Loc::Reg(r) = self.loc[in1.ix()] {
                if !avoid.contains(&r) {
                    // Ownership transfer; refresh the occupation order.
                    self.uses[in1.ix()] = 0;
                    self.loc[in1.ix()] = Loc::None;
                    self.owner[r.index()] = None;
                    self.occupied.retain(|&o| o != r);
                    self.bind(r, node);
                    self.reserve(r);
                    return r;
                }
            }
        }
        let src = self.view(in1);
        for &r in avoid {
            self.reserve(r);
        }
        let r = self.alloc_reg(self.prefer(node));
        self.emit(Inst::Mov {
            dst: Operand::Reg(r),
            src,
        });
        self.consume(in1, mult);
        self.bind(r, node);
        self.reserve(r);
        r
    }

    /// A value emitted with no remaining uses (dead code kept by a kill
    /// switch) releases its register at once.
    fn settle_dead(&mut self, id: IrId) {
        if self.uses[id.ix()] == 0 {
            if let Loc::Reg(r) = self.loc[id.ix()] {
                self.free_reg(r);
                self.loc[id.ix()] = Loc::None;
            }
        }
    }

    /// Emits the separated store for a producer whose embeddable store could
    /// not fold into the instruction itself.
    fn separate_store(&mut self, node: IrId) {
        if let Some(store) = self.node(node).store_embed_target {
            let dst = Operand::Mem(self.var_mem(&self.node(store).op));
            let src = self.view(node);
            debug_assert!(!matches!(src, Operand::Mem(_)));
            self.emit(Inst::Mov { dst, src });
            self.consume(node, 1);
        }
    }

    fn is_skipped_load(&self, id: IrId) -> bool {
        let n = self.node(id);
        n.flags.embeddable
            && n.store_embed_target.is_none()
            && matches!(n.op, IrOp::Ldloc(_) | IrOp::Ldarg(_) | IrOp::LdelemAddr)
    }

    // ---- per-node emission -------------------------------------------------

    fn emit_ir(&mut self, id: IrId) {
        match self.node(id).op.clone() {
            IrOp::Const(v) => {
                self.loc[id.ix()] = Loc::Imm(v);
                if let Some(store) = self.node(id).store_embed_target {
                    // The constant materializes straight into its slot.
                    let dst = Operand::Mem(self.var_mem(&self.node(store).op));
                    self.emit(Inst::Mov {
                        dst,
                        src: Operand::Imm(v),
                    });
                    self.consume(id, 1);
                }
            }
            IrOp::Ldloc(_) | IrOp::Ldarg(_) | IrOp::Ldtmp(_) => {
                let mem = self.var_mem(&self.node(id).op);
                if self.is_skipped_load(id) {
                    // The consumer folds this slot into its memory operand.
                    self.loc[id.ix()] = Loc::Mem(mem);
                } else {
                    let r = self.alloc_reg(self.prefer(id));
                    self.emit(Inst::Mov {
                        dst: Operand::Reg(r),
                        src: Operand::Mem(mem),
                    });
                    self.bind(r, id);
                    self.separate_store(id);
                }
            }
            IrOp::Stloc(_) | IrOp::Starg(_) | IrOp::Sttmp(_) => {
                if self.node(id).flags.embeddable {
                    // Folded into the producer; already stored.
                    return;
                }
                let value = self.node(id).ins[0];
                let mut src = self.view(value);
                if matches!(src, Operand::Mem(_)) {
                    src = Operand::Reg(self.ensure_reg(value));
                }
                let dst = Operand::Mem(self.var_mem(&self.node(id).op));
                self.emit(Inst::Mov { dst, src });
                self.consume(value, 1);
            }
            IrOp::Bin(op) => self.emit_bin(id, op),
            IrOp::Un(op) => self.emit_un(id, op),
            IrOp::Br { target } => {
                self.emit(Inst::Jmp {
                    target: JumpTarget::Block(target),
                });
            }
            IrOp::Bc { cond, target } => {
                let ins = self.node(id).ins.clone();
                self.emit_cmp(ins[0], ins[1]);
                self.emit(Inst::Jcc {
                    cc: cond_cc(cond),
                    target: JumpTarget::Block(target),
                });
            }
            IrOp::Brtrue { target } | IrOp::Brfalse { target } => {
                let value = self.node(id).ins[0];
                let mut a = self.view(value);
                if matches!(a, Operand::Imm(_)) {
                    a = Operand::Reg(self.ensure_reg(value));
                }
                self.emit(Inst::Cmp {
                    a,
                    b: Operand::Imm(0),
                });
                self.consume(value, 1);
                let cc = if matches!(self.node(id).op, IrOp::Brtrue { .. }) {
                    Cc::Ne
                } else {
                    Cc::Eq
                };
                self.emit(Inst::Jcc {
                    cc,
                    target: JumpTarget::Block(target),
                });
            }
            IrOp::Switch { targets } => {
                let sel = self.node(id).ins[0];
                let mut a = self.view(sel);
                if matches!(a, Operand::Imm(_)) {
                    a = Operand::Reg(self.ensure_reg(sel));
                }
                for (k, t) in targets.iter().enumerate() {
                    self.emit(Inst::Cmp {
                        a,
                        b: Operand::Imm(k as i32),
                    });
                    self.emit(Inst::Jcc {
                        cc: Cc::Eq,
                        target: JumpTarget::Block(*t),
                    });
                }
                self.consume(sel, 1);
            }
            IrOp::Ret => {
                if let Some(&value) = self.node(id).ins.first() {
                    let src = self.view(value);
                    if src != Operand::Reg(Reg::R0) {
                        self.emit(Inst::Mov {
                            dst: Operand::Reg(Reg::R0),
                            src,
                        });
                    }
                    self.consume(value, 1);
                }
                self.epilogue();
            }
            IrOp::Call {
                method,
                argc,
                returns,
            } => {
                let args = self.node(id).ins.clone();
                for &a in &args {
                    self.reserved.clear();
                    let src = self.view(a);
                    self.emit(Inst::Push { src });
                }
                for &a in &args {
                    self.consume(a, 1);
                }
                self.flush_caller_saved();
                self.emit(Inst::Call {
                    target: CallTarget::Method(method),
                });
                if argc > 0 {
                    self.emit(Inst::Bin {
                        op: BinAlu::Add,
                        dst: Operand::Reg(Reg::Sp),
                        src: Operand::Imm(4 * argc as i32),
                    });
                }
                if returns {
                    self.bind(Reg::R0, id);
                    self.separate_store(id);
                }
            }
            IrOp::Newarr => {
                let len = self.node(id).ins[0];
                let src = self.view(len);
                self.emit(Inst::Push { src });
                self.consume(len, 1);
                self.flush_caller_saved();
                self.emit(Inst::Call {
                    target: CallTarget::NewArr,
                });
                self.emit(Inst::Bin {
                    op: BinAlu::Add,
                    dst: Operand::Reg(Reg::Sp),
                    src: Operand::Imm(4),
                });
                self.bind(Reg::R0, id);
                self.separate_store(id);
            }
            IrOp::Ldlen => {
                let aref = self.node(id).ins[0];
                let base = self.ensure_reg(aref);
                let r = self.alloc_reg(self.prefer(id));
                self.emit(Inst::Mov {
                    dst: Operand::Reg(r),
                    src: Operand::Mem(MemOperand::base_disp(base, 0)),
                });
                self.consume(aref, 1);
                self.bind(r, id);
                self.separate_store(id);
            }
            IrOp::Chknull => {
                let aref = self.node(id).ins[0];
                let mut a = self.view(aref);
                if matches!(a, Operand::Imm(_)) {
                    a = Operand::Reg(self.ensure_reg(aref));
                }
                self.emit(Inst::Cmp {
                    a,
                    b: Operand::Imm(0),
                });
                self.consume(aref, 1);
                self.jcc_stub(Cc::Eq, TrapCode::NullRef);
            }
            IrOp::Chkidx => {
                let ins = self.node(id).ins.clone();
                let (aref, idx) = (ins[0], ins[1]);
                let base = self.ensure_reg(aref);
                let len = Operand::Mem(MemOperand::base_disp(base, 0));
                match self.loc[idx.ix()] {
                    Loc::Imm(k) => {
                        // len <= idx (unsigned) traps.
                        self.emit(Inst::Cmp {
                            a: len,
                            b: Operand::Imm(k),
                        });
                        self.jcc_stub(Cc::BeU, TrapCode::IndexRange);
                    }
                    _ => {
                        let ir = self.ensure_reg(idx);
                        self.emit(Inst::Cmp {
                            a: Operand::Reg(ir),
                            b: len,
                        });
                        self.jcc_stub(Cc::AeU, TrapCode::IndexRange);
                    }
                }
                self.consume(aref, 1);
                self.consume(idx, 1);
            }
            IrOp::LdelemAddr => {
                if self.is_skipped_load(id) {
                    // The consumer resolves the element address lazily.
                    return;
                }
                let ins = self.node(id).ins.clone();
                let m = self.elem_mem(ins[0], ins[1]);
                let r = self.alloc_reg(self.prefer(id));
                self.emit(Inst::Mov {
                    dst: Operand::Reg(r),
                    src: Operand::Mem(m),
                });
                self.consume(ins[0], 1);
                self.consume(ins[1], 1);
                self.bind(r, id);
                self.separate_store(id);
            }
            IrOp::StelemAddr => {
                let ins = self.node(id).ins.clone();
                let (aref, idx, value) = (ins[0], ins[1], ins[2]);
                let m = self.elem_mem(aref, idx);
                let mut src = self.view(value);
                if matches!(src, Operand::Mem(_)) {
                    src = Operand::Reg(self.ensure_reg(value));
                }
                self.emit(Inst::Mov {
                    dst: Operand::Mem(m),
                    src,
                });
                self.consume(aref, 1);
                self.consume(idx, 1);
                self.consume(value, 1);
            }
            IrOp::ThrowTrap(code) => {
                self.stubs_used.insert(code);
                self.emit(Inst::Jmp {
                    target: JumpTarget::Stub(code),
                });
            }
        }
    }

    fn emit_bin(&mut self, id: IrId, op: BinAlu) {
        if matches!(op, BinAlu::Div | BinAlu::Rem) {
            return self.emit_div(id, op);
        }
        let ins = self.node(id).ins.clone();
        let (mut x, mut y) = (ins[0], ins[1]);
        let same = x == y;
        let mult = if same { 2 } else { 1 };

        let is_imm = |g: &Self, v: IrId| matches!(g.loc[v.ix()], Loc::Imm(_));

        if matches!(op, BinAlu::Shl | BinAlu::Shr | BinAlu::Shru) && !is_imm(self, y) {
            return self.emit_shift(id, op, x, y);
        }

        // Step 1a: may input #2 be an immediate? (swap when commutative)
        let mut imm_form = false;
        if imm_ok(op) {
            if is_imm(self, y) {
                imm_form = true;
            } else if op.is_commutative() && is_imm(self, x) {
                std::mem::swap(&mut x, &mut y);
                imm_form = true;
            }
        }

        // Step 1b: memory-destination form. Input #1 must be an embeddable
        // load and the output the corresponding embeddable store of the
        // same slot.
        let store = self.node(id).store_embed_target;
        let mem_dst_with = |g: &Self, v: IrId| -> Option<MemOperand> {
            let s = store?;
            if !mem_dst_ok(op) || !g.is_skipped_load(v) {
                return None;
            }
            let vk = g.node(v).op.var_key();
            if vk.is_some() && vk == g.node(s).op.var_key() {
                Some(g.var_mem(&g.node(v).op))
            } else {
                None
            }
        };
        let mut mem_dst = mem_dst_with(self, x);
        if mem_dst.is_none() && op.is_commutative() && !imm_form && !same {
            if let Some(m) = mem_dst_with(self, y) {
                std::mem::swap(&mut x, &mut y);
                mem_dst = Some(m);
            }
        }

        if let Some(m) = mem_dst {
            // MI / MR: operate directly on the variable's slot.
            let src = {
                let v = self.view(y);
                if matches!(v, Operand::Mem(_)) {
                    Operand::Reg(self.ensure_reg(y))
                } else {
                    v
                }
            };
            self.emit(Inst::Bin {
                op,
                dst: Operand::Mem(m),
                src,
            });
            self.loc[id.ix()] = Loc::Mem(m);
            self.consume(x, 1);
            self.consume(y, 1);
            // The load and the store both folded; settle the store's link.
            self.consume(id, 1);
            return;
        }

        // Step 1c: RM form reads input #2 straight from memory; commutative
        // instructions may swap an embeddable input #1 into that role.
        let src = if imm_form {
            self.view(y)
        } else {
            if !same
                && op.is_commutative()
                && !self.is_skipped_load(y)
                && !matches!(self.loc[y.ix()], Loc::Spill(_) | Loc::Mem(_))
                && self.is_skipped_load(x)
            {
                std::mem::swap(&mut x, &mut y);
            }
            let v = self.view(y);
            match v {
                Operand::Mem(_) if mem_src_ok(op) => v,
                Operand::Mem(_) => Operand::Reg(self.ensure_reg(y)),
                Operand::Imm(_) => Operand::Reg(self.ensure_reg(y)),
                other => other,
            }
        };
        let dst = self.dst_for(id, x, mult, &[]);
        let src = if same { Operand::Reg(dst) } else { src };
        self.emit(Inst::Bin {
            op,
            dst: Operand::Reg(dst),
            src,
        });
        if !same {
            self.consume(y, 1);
        }
        self.separate_store(id);
    }

    fn emit_un(&mut self, id: IrId, op: UnAlu) {
        let x = self.node(id).ins[0];
        // Memory-destination form when operating in place on the slot that
        // both sources and receives the value.
        if let Some(s) = self.node(id).store_embed_target {
            if self.is_skipped_load(x) {
                let vk = self.node(x).op.var_key();
                if vk.is_some() && vk == self.node(s).op.var_key() {
                    let m = self.var_mem(&self.node(x).op);
                    self.emit(Inst::Un {
                        op,
                        dst: Operand::Mem(m),
                    });
                    self.loc[id.ix()] = Loc::Mem(m);
                    self.consume(x, 1);
                    self.consume(id, 1);
                    return;
                }
            }
        }
        let dst = self.dst_for(id, x, 1, &[]);
        self.emit(Inst::Un {
            op,
            dst: Operand::Reg(dst),
        });
        self.separate_store(id);
    }

    /// Variable shift counts live in R2.
    fn emit_shift(&mut self, id: IrId, op: BinAlu, x: IrId, y: IrId) {
        let same = x == y;
        let mult = if same { 2 } else { 1 };
        // Secure the destination first; it must not be R2.
        let dst = self.dst_for(id, x, mult, &[Reg::R2]);
        if same {
            // The count equals the pre-shift value sitting in dst.
            self.evict(Reg::R2);
            self.emit(Inst::Mov {
                dst: Operand::Reg(Reg::R2),
                src: Operand::Reg(dst),
            });
        } else if self.loc[y.ix()] != Loc::Reg(Reg::R2) {
            self.evict(Reg::R2);
            self.reserve(Reg::R2);
            let src = self.view(y);
            self.emit(Inst::Mov {
                dst: Operand::Reg(Reg::R2),
                src,
            });
        }
        self.emit(Inst::Bin {
            op,
            dst: Operand::Reg(dst),
            src: Operand::Reg(Reg::R2),
        });
        if !same {
            self.consume(y, 1);
        }
        self.separate_store(id);
    }

    /// DIV/REM: dividend in R0, remainder lands in R3, quotient in R0; the
    /// divisor may be any register or memory operand.
    fn emit_div(&mut self, id: IrId, op: BinAlu) {
        let ins = self.node(id).ins.clone();
        let (x, y) = (ins[0], ins[1]);
        let same = x == y;
        let mult = if same { 2 } else { 1 };

        // Values that survive this instruction cannot stay in the clobbered
        // pair.
        self.reserve(Reg::R0);
        self.reserve(Reg::R3);
        if self.owner[Reg::R0.index()] == Some(x) {
            if self.uses[x.ix()] > mult {
                self.evict(Reg::R0);
            }
        } else {
            self.evict(Reg::R0);
        }
        if self.owner[Reg::R3.index()].is_some() {
            let keep_dying_divisor =
                !same && self.owner[Reg::R3.index()] == Some(y) && self.uses[y.ix()] == 1;
            if !keep_dying_divisor {
                self.evict(Reg::R3);
            }
        }

        if self.loc[x.ix()] != Loc::Reg(Reg::R0) {
            let src = self.view(x);
            self.emit(Inst::Mov {
                dst: Operand::Reg(Reg::R0),
                src,
            });
        }
        let src = if same {
            Operand::Reg(Reg::R0)
        } else {
            match self.view(y) {
                Operand::Imm(_) => Operand::Reg(self.ensure_reg(y)),
                other => other,
            }
        };
        self.emit(Inst::Div { src });
        self.consume(x, mult);
        if !same {
            self.consume(y, 1);
        }
        debug_assert!(self.owner[Reg::R0.index()].is_none());
        debug_assert!(self.owner[Reg::R3.index()].is_none());
        let result = if op == BinAlu::Rem { Reg::R3 } else { Reg::R0 };
        self.bind(result, id);
        self.separate_store(id);
    }

    fn emit_cmp(&mut self, a: IrId, b: IrId) {
        let same = a == b;
        let mut av = self.view(a);
        if matches!(av, Operand::Imm(_)) || (same && matches!(av, Operand::Mem(_))) {
            av = Operand::Reg(self.ensure_reg(a));
        }
        let mut bv = if same { av } else { self.view(b) };
        if matches!(av, Operand::Mem(_)) && matches!(bv, Operand::Mem(_)) {
            bv = Operand::Reg(self.ensure_reg(b));
        }
        self.emit(Inst::Cmp { a: av, b: bv });
        self.consume(a, if same { 2 } else { 1 });
        if !same {
            self.consume(b, 1);
        }
    }

    fn flush_caller_saved(&mut self) {
        for r in CALLER_SAVED {
            if let Some(id) = self.owner[r.index()] {
                let slot = self.spill_push(id);
                self.emit(Inst::Mov {
                    dst: Operand::Mem(self.spill_mem(slot)),
                    src: Operand::Reg(r),
                });
                self.loc[id.ix()] = Loc::Spill(slot);
                self.free_reg(r);
            }
        }
    }

    fn jcc_stub(&mut self, cc: Cc, code: TrapCode) {
        self.stubs_used.insert(code);
        self.emit(Inst::Jcc {
            cc,
            target: JumpTarget::Stub(code),
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
        self.emit(Inst::Pop { dst: Reg::Fp });
        self.emit(Inst::Ret);
    }
}
