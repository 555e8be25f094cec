//! Second major pass: per-block IR DAG construction with local
//! optimizations.
//!
//! Blocks are translated in reverse postorder while a virtual stack
//! simulates IL execution; every IR node points at the nodes that produce
//! its operands. Optimizations performed while issuing nodes: constant
//! folding and algebraic simplification (with trap substitution), redundant
//! load/store elimination through per-block virtual data repositories,
//! usage-counter dead-code elimination, load embedding (CanEmbed), and
//! store embedding with a backward window of 8 intervening nodes. Stack
//! residue at block boundaries travels through STTMP/LDTMP temporaries.

use crate::cfg::Cfg;
use crate::il::{Method, Op, Program, StackDepthMap};
use crate::loops::Numbering;
use crate::sem::{self, BinAlu, Cond, TrapCode, UnAlu};
use std::fmt::Write as _;
use thiserror::Error;

/// Pipeline inconsistency; signals a compiler bug, never user error.
#[derive(Debug, Clone, Error)]
#[error("internal compiler error: {0}")]
pub struct InternalError(pub String);

/// Kill switches for A/B statistics. All on by default.
#[derive(Debug, Clone, Copy)]
pub struct OptFlags {
    pub fold: bool,
    pub repo: bool,
    pub dce: bool,
    pub embed: bool,
}

impl Default for OptFlags {
    fn default() -> Self {
        OptFlags {
            fold: true,
            repo: true,
            dce: true,
            embed: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IrId(pub u32);

impl IrId {
    pub fn ix(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IrOp {
    Const(i32),
    Ldloc(u16),
    Stloc(u16),
    Ldarg(u16),
    Starg(u16),
    Bin(BinAlu),
    Un(UnAlu),
    Br { target: usize },
    Bc { cond: Cond, target: usize },
    Brtrue { target: usize },
    Brfalse { target: usize },
    Switch { targets: Vec<usize> },
    Ret,
    Call { method: usize, argc: u16, returns: bool },
    Newarr,
    Ldlen,
    Chknull,
    Chkidx,
    LdelemAddr,
    StelemAddr,
    Sttmp(u16),
    Ldtmp(u16),
    ThrowTrap(TrapCode),
}

impl IrOp {
    pub fn name(&self) -> String {
        match self {
            IrOp::Const(v) => format!("CONST {}", v),
            IrOp::Ldloc(i) => format!("LDLOC {}", i),
            IrOp::Stloc(i) => format!("STLOC {}", i),
            IrOp::Ldarg(i) => format!("LDARG {}", i),
            IrOp::Starg(i) => format!("STARG {}", i),
            IrOp::Bin(b) => b.mnemonic().to_string(),
            IrOp::Un(u) => u.mnemonic().to_string(),
            IrOp::Br { target } => format!("BR B{}", target),
            IrOp::Bc { cond, target } => {
                format!("{} B{}", cond.mnemonic().to_uppercase(), target)
            }
            IrOp::Brtrue { target } => format!("BRTRUE B{}", target),
            IrOp::Brfalse { target } => format!("BRFALSE B{}", target),
            IrOp::Switch { targets } => {
                let t: Vec<String> = targets.iter().map(|b| format!("B{}", b)).collect();
                format!("SWITCH ({})", t.join(","))
            }
            IrOp::Ret => "RET".to_string(),
            IrOp::Call { method, .. } => format!("CALL m{}", method),
            IrOp::Newarr => "NEWARR".to_string(),
            IrOp::Ldlen => "LDLEN".to_string(),
            IrOp::Chknull => "CHKNULL".to_string(),
            IrOp::Chkidx => "CHKIDX".to_string(),
            IrOp::LdelemAddr => "LDELEM_ADDR".to_string(),
            IrOp::StelemAddr => "STELEM_ADDR".to_string(),
            IrOp::Sttmp(s) => format!("STTMP {}", s),
            IrOp::Ldtmp(s) => format!("LDTMP {}", s),
            IrOp::ThrowTrap(c) => format!("THROWTRAP {}", c),
        }
    }

    /// Storage identity for the store-embedding conflict walk.
    pub fn var_key(&self) -> Option<(u8, u16)> {
        match self {
            IrOp::Ldloc(i) | IrOp::Stloc(i) => Some((0, *i)),
            IrOp::Ldarg(i) | IrOp::Starg(i) => Some((1, *i)),
            IrOp::Ldtmp(s) | IrOp::Sttmp(s) => Some((2, *s)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrType {
    Int32,
    ArrayRef,
    None,
}

/// Node flags. `volatile_mem`, `tail_call` and `unaligned` exist in the
/// structure but are inert: the IL subset has no volatile memory or tail
/// calls. `unreachable` marks nodes after an unconditional trap in the same
/// block; the code generator skips them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IrFlags {
    pub throws: bool,
    pub embeddable: bool,
    pub volatile_mem: bool,
    pub tail_call: bool,
    pub unaligned: bool,
    pub unreachable: bool,
}

#[derive(Debug, Clone)]
pub struct IrNode {
    pub op: IrOp,
    /// Ordered producer links; ins[0] is the deepest popped operand.
    pub ins: Vec<IrId>,
    pub ty: IrType,
    pub flags: IrFlags,
    /// Set on a producer whose result is written straight to the linked
    /// store's slot.
    pub store_embed_target: Option<IrId>,
    pub bb: usize,
    pub prev: Option<IrId>,
    pub next: Option<IrId>,
    /// Outstanding references: consumer links plus pending virtual-stack and
    /// repository references during translation.
    pub counter: u32,
    pub removed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct BlockIr {
    pub head: Option<IrId>,
    pub tail: Option<IrId>,
    pub entry_residue: u32,
    pub exit_residue: u32,
    pub translated: bool,
    /// Block ends in an unconditional trap emitted mid-translation.
    pub trapped: bool,
}

#[derive(Debug, Clone)]
pub struct DdgMethod {
    pub nodes: Vec<IrNode>,
    /// Indexed by CFG block id.
    pub blocks: Vec<BlockIr>,
    /// Fixed temporaries-zone size: the maximum residue any block leaves.
    pub temp_zone_slots: u16,
}

impl DdgMethod {
    pub fn node(&self, id: IrId) -> &IrNode {
        &self.nodes[id.ix()]
    }

    /// Nodes of a block in list (prev/next) order.
    pub fn block_nodes(&self, bb: usize) -> Vec<IrId> {
        let mut out = Vec::new();
        let mut cur = self.blocks[bb].head;
        while let Some(id) = cur {
            out.push(id);
            cur = self.nodes[id.ix()].next;
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RepoKind {
    Load,
    Store,
}

/// Outcome of a fold attempt over the topmost stack operands.
enum Fold {
    Const(i32),
    Trap(TrapCode),
    /// Reuse an existing node's link as the result: the identity cases
    /// return the non-constant operand, absorbing cases the constant.
    Keep { kept: IrId, dropped: IrId },
    None,
}

struct Translator<'a> {
    program: &'a Program,
    method: &'a Method,
    cfg: &'a Cfg,
    depths: &'a StackDepthMap,
    opts: OptFlags,
    out: DdgMethod,
    /// Leader offset -> block id.
    block_of_leader: Vec<Option<usize>>,
    stack: Vec<IrId>,
    /// Virtual data repositories: one array for locals, one for args. Each
    /// line points at the last load or store touching that index; lines are
    /// maintained even with `--no-repo` so the embedding staleness check
    /// keeps working.
    repo: [Vec<Option<(RepoKind, IrId)>>; 2],
    /// Bumped by any operation that may write the heap; an element load is
    /// only embeddable while its epoch is current.
    heap_epoch: u32,
    node_epoch: Vec<u32>,
    cur_bb: usize,
    trapped: bool,
}

pub fn translate_method(
    program: &Program,
    method: &Method,
    cfg: &Cfg,
    numbering: &Numbering,
    depths: &StackDepthMap,
    opts: OptFlags,
) -> Result<DdgMethod, InternalError> {
    let mut block_of_leader = vec![None; method.body.len() + 1];
    for (id, b) in cfg.blocks.iter().enumerate() {
        block_of_leader[b.leader as usize] = Some(id);
    }
    let mut tr = Translator {
        program,
        method,
        cfg,
        depths,
        opts,
        out: DdgMethod {
            nodes: Vec::new(),
            blocks: vec![BlockIr::default(); cfg.blocks.len()],
            temp_zone_slots: 0,
        },
        block_of_leader,
        stack: Vec::new(),
        repo: [
            vec![None; method.local_count as usize],
            vec![None; method.arg_count as usize],
        ],
        heap_epoch: 0,
        node_epoch: Vec::new(),
        cur_bb: 0,
        trapped: false,
    };
    for &bb in &numbering.rpo {
        if bb == cfg.last_block {
            continue;
        }
        tr.translate_block(bb)?;
    }
    Ok(tr.out)
}

impl<'a> Translator<'a> {
    fn node(&self, id: IrId) -> &IrNode {
        &self.out.nodes[id.ix()]
    }

    fn node_mut(&mut self, id: IrId) -> &mut IrNode {
        &mut self.out.nodes[id.ix()]
    }

    // ---- list plumbing -------------------------------------------------

    fn append(&mut self, id: IrId) {
        let bb = self.cur_bb;
        let tail = self.out.blocks[bb].tail;
        self.node_mut(id).prev = tail;
        self.node_mut(id).next = None;
        match tail {
            Some(t) => self.out.nodes[t.ix()].next = Some(id),
            None => self.out.blocks[bb].head = Some(id),
        }
        self.out.blocks[bb].tail = Some(id);
    }

    fn insert_after(&mut self, anchor: IrId, id: IrId) {
        let bb = self.node(anchor).bb;
        let next = self.node(anchor).next;
        self.node_mut(id).prev = Some(anchor);
        self.node_mut(id).next = next;
        self.node_mut(anchor).next = Some(id);
        match next {
            Some(n) => self.out.nodes[n.ix()].prev = Some(id),
            None => self.out.blocks[bb].tail = Some(id),
        }
    }

    fn unlink(&mut self, id: IrId) {
        let bb = self.node(id).bb;
        let prev = self.node(id).prev;
        let next = self.node(id).next;
        match prev {
            Some(p) => self.out.nodes[p.ix()].next = next,
            None => self.out.blocks[bb].head = next,
        }
        match next {
            Some(n) => self.out.nodes[n.ix()].prev = prev,
            None => self.out.blocks[bb].tail = prev,
        }
        let n = self.node_mut(id);
        n.prev = None;
        n.next = None;
        n.removed = true;
    }

    // ---- counters ------------------------------------------------------

    /// A new reference was made to point at `id`. Incrementing the counter
    /// resets the CanEmbed flag.
    fn bump(&mut self, id: IrId) {
        let n = self.node_mut(id);
        n.counter += 1;
        n.flags.embeddable = false;
    }

    fn is_pure_value(op: &IrOp) -> bool {
        matches!(
            op,
            IrOp::Const(_)
                | IrOp::Ldloc(_)
                | IrOp::Ldarg(_)
                | IrOp::Ldtmp(_)
                | IrOp::Bin(_)
                | IrOp::Un(_)
                | IrOp::Ldlen
                | IrOp::LdelemAddr
        )
    }

    /// One reference to `id` went away. At zero the node is dead code and is
    /// removed, cascading into its operands — unless it may throw, is a
    /// call, or is otherwise not a pure value producer.
    fn release(&mut self, id: IrId) {
        let n = self.node_mut(id);
        debug_assert!(n.counter > 0, "release of {:?} below zero", id);
        n.counter -= 1;
        if n.counter > 0 || !self.opts.dce {
            return;
        }
        let n = self.node(id);
        if n.flags.throws || !Self::is_pure_value(&n.op) {
            return;
        }
        // Scrub repository lines so later loads cannot resurrect it.
        if let Some((kind, index)) = match &n.op {
            IrOp::Ldloc(i) => Some((0usize, *i as usize)),
            IrOp::Ldarg(i) => Some((1usize, *i as usize)),
            _ => None,
        } {
            if self.repo[kind][index] == Some((RepoKind::Load, id)) {
                self.repo[kind][index] = None;
            }
        }
        self.unlink(id);
        let ins = std::mem::take(&mut self.node_mut(id).ins);
        self.node_mut(id).counter = 0;
        for op in ins {
            self.release(op);
        }
    }

    // ---- node emission -------------------------------------------------

    fn new_node(&mut self, op: IrOp, ty: IrType, throws: bool) -> IrId {
        let id = IrId(self.out.nodes.len() as u32);
        self.out.nodes.push(IrNode {
            op,
            ins: Vec::new(),
            ty,
            flags: IrFlags {
                throws,
                unreachable: self.trapped,
                ..IrFlags::default()
            },
            store_embed_target: None,
            bb: self.cur_bb,
            prev: None,
            next: None,
            counter: 1,
            removed: false,
        });
        self.node_epoch.push(self.heap_epoch);
        id
    }

    /// The five-step issue algorithm: create the node, usage counter 1,
    /// append to the block list, pop its operands from the stack into `ins`
    /// (reference transfer, no counter change), push the result link.
    fn emit(&mut self, op: IrOp, arity: usize, ty: IrType, throws: bool) -> IrId {
        let id = self.new_node(op, ty, throws);
        self.append(id);
        let at = self.stack.len() - arity;
        let ins: Vec<IrId> = self.stack.split_off(at);
        for &i in &ins {
            self.mark_embeddable_load(i);
        }
        self.out.nodes[id.ix()].ins = ins;
        if ty != IrType::None {
            self.stack.push(id);
        }
        id
    }

    /// Sets CanEmbed on a load operand being consumed right now: its usage
    /// counter must be 1 and its source must provably still hold the same
    /// value (repository line for locals/args, heap epoch for element
    /// loads). Any later counter increment resets the flag.
    fn mark_embeddable_load(&mut self, operand: IrId) {
        if !self.opts.embed {
            return;
        }
        let n = self.node(operand);
        if n.counter != 1 {
            return;
        }
        let ok = match &n.op {
            IrOp::Ldloc(i) => self.repo[0][*i as usize] == Some((RepoKind::Load, operand)),
            IrOp::Ldarg(i) => self.repo[1][*i as usize] == Some((RepoKind::Load, operand)),
            IrOp::LdelemAddr => self.node_epoch[operand.ix()] == self.heap_epoch,
            _ => false,
        };
        if ok {
            self.node_mut(operand).flags.embeddable = true;
        }
    }

    /// Store embedding: walk backward from the store looking for the node
    /// producing its value, across at most 8 intervening nodes, failing on
    /// any intervening load or store of the same variable. An intervening
    /// node consuming an embeddable load of that variable counts too: the
    /// deferred read executes right there, inside the window the early
    /// store would clobber. On success the producer is linked to the store
    /// and the store is marked embeddable.
    fn mark_store_embeddable(&mut self, store: IrId) {
        if !self.opts.embed {
            return;
        }
        let producer = self.node(store).ins[0];
        if self.node(producer).store_embed_target.is_some() {
            // A producer can feed at most one embedded store.
            return;
        }
        let store_key = self.node(store).op.var_key();
        let mut cur = self.node(store).prev;
        let mut intervening = 0;
        while let Some(c) = cur {
            if c == producer {
                self.node_mut(producer).store_embed_target = Some(store);
                self.node_mut(store).flags.embeddable = true;
                return;
            }
            if intervening == 8 {
                return;
            }
            if self.node(c).op.var_key() == store_key {
                return;
            }
            let conflict = self.node(c).ins.iter().any(|&i| {
                self.node(i).flags.embeddable && self.node(i).op.var_key() == store_key
            });
            if conflict {
                return;
            }
            intervening += 1;
            cur = self.node(c).prev;
        }
    }

    // ---- repositories --------------------------------------------------

    fn repo_load(&mut self, kind: usize, index: u16) {
        let line = self.repo[kind][index as usize];
        if self.opts.repo {
            match line {
                Some((RepoKind::Load, n)) => {
                    debug_assert!(!self.node(n).removed);
                    self.bump(n);
                    self.stack.push(n);
                    return;
                }
                Some((RepoKind::Store, s)) => {
                    // Forward the stored value's producer; no memory read.
                    let v = self.node(s).ins[0];
                    self.bump(v);
                    self.stack.push(v);
                    return;
                }
                None => {}
            }
        }
        let op = if kind == 0 {
            IrOp::Ldloc(index)
        } else {
            IrOp::Ldarg(index)
        };
        let id = self.emit(op, 0, IrType::Int32, false);
        self.repo[kind][index as usize] = Some((RepoKind::Load, id));
    }

    fn repo_store(&mut self, kind: usize, index: u16) {
        if self.opts.repo {
            if let Some((RepoKind::Store, old)) = self.repo[kind][index as usize] {
                // Superseded store: every load in between was forwarded, so
                // the first store never becomes observable.
                let producer = self.node(old).ins[0];
                if self.node(producer).store_embed_target == Some(old) {
                    self.node_mut(producer).store_embed_target = None;
                }
                self.unlink(old);
                self.node_mut(old).counter = 0;
                self.release(producer);
            }
        }
        let op = if kind == 0 {
            IrOp::Stloc(index)
        } else {
            IrOp::Starg(index)
        };
        let id = self.emit(op, 1, IrType::None, false);
        self.repo[kind][index as usize] = Some((RepoKind::Store, id));
        self.mark_store_embeddable(id);
    }

    // ---- constant folding ----------------------------------------------

    fn const_of(&self, id: IrId) -> Option<i32> {
        match self.node(id).op {
            IrOp::Const(v) => Some(v),
            _ => None,
        }
    }

    fn try_fold(&self, op: BinAlu) -> Fold {
        if !self.opts.fold || self.stack.len() < 2 {
            return Fold::None;
        }
        let b = self.stack[self.stack.len() - 1];
        let a = self.stack[self.stack.len() - 2];
        let (ca, cb) = (self.const_of(a), self.const_of(b));
        match (ca, cb) {
            (Some(x), Some(y)) => match sem::bin(op, x, y) {
                Ok(v) => Fold::Const(v),
                Err(t) => Fold::Trap(t),
            },
            _ if op.may_trap() && cb == Some(0) => Fold::Trap(TrapCode::DivZero),
            (None, Some(k)) => Self::fold_with_const(op, a, b, k, false),
            (Some(k), None) if op.is_commutative() => Self::fold_with_const(op, b, a, k, true),
            _ => Fold::None,
        }
    }

    /// Algebraic simplification with one constant operand: identity cases
    /// return the other operand's link unchanged; absorbing cases return the
    /// constant's link and drop the other operand.
    fn fold_with_const(op: BinAlu, x: IrId, c: IrId, k: i32, commuted: bool) -> Fold {
        let identity = match op {
            BinAlu::Add => k == 0,
            BinAlu::Sub => !commuted && k == 0,
            BinAlu::Mul | BinAlu::Div => k == 1 && (op == BinAlu::Mul || !commuted),
            BinAlu::And => k == -1,
            BinAlu::Or | BinAlu::Xor => k == 0,
            BinAlu::Shl | BinAlu::Shr | BinAlu::Shru => !commuted && (k & 31) == 0,
            BinAlu::Rem => false,
        };
        if identity {
            return Fold::Keep { kept: x, dropped: c };
        }
        let absorbing = match op {
            BinAlu::Mul | BinAlu::And => k == 0,
            BinAlu::Or => k == -1,
            _ => false,
        };
        if absorbing {
            return Fold::Keep { kept: c, dropped: x };
        }
        Fold::None
    }

    fn emit_throw(&mut self, code: TrapCode) {
        self.emit(IrOp::ThrowTrap(code), 0, IrType::None, true);
        self.trapped = true;
        self.out.blocks[self.cur_bb].trapped = true;
    }

    fn bin_op(&mut self, op: BinAlu) {
        match self.try_fold(op) {
            Fold::Const(v) => {
                let b = self.stack.pop().unwrap();
                let a = self.stack.pop().unwrap();
                self.release(a);
                self.release(b);
                self.emit(IrOp::Const(v), 0, IrType::Int32, false);
            }
            Fold::Trap(t) => {
                let b = self.stack.pop().unwrap();
                let a = self.stack.pop().unwrap();
                self.release(a);
                self.release(b);
                self.emit_throw(t);
                // Dummy result so the rest of the (unreachable) block keeps
                // a consistent stack shape.
                self.emit(IrOp::Const(0), 0, IrType::Int32, false);
            }
            Fold::Keep { kept, dropped } => {
                self.stack.pop();
                self.stack.pop();
                self.release(dropped);
                // One consumer replaced by another: counter unchanged.
                self.stack.push(kept);
            }
            Fold::None => {
                self.emit(IrOp::Bin(op), 2, IrType::Int32, op.may_trap());
            }
        }
    }

    // ---- array expansion -----------------------------------------------

    /// Splits an array access into its sub-operations: null check, bounds
    /// check, then the address-bearing access that the code generator maps
    /// to one scaled-index-base memory operand.
    fn expand_ldelem(&mut self) {
        let idx = self.stack.pop().unwrap();
        let aref = self.stack.pop().unwrap();
        self.chknull(aref);
        self.chkidx(aref, idx);
        let id = self.new_node(IrOp::LdelemAddr, IrType::Int32, false);
        self.append(id);
        self.bump(aref);
        self.bump(idx);
        self.node_mut(id).ins = vec![aref, idx];
        self.stack.push(id);
    }

    fn expand_stelem(&mut self) {
        let value = self.stack.pop().unwrap();
        let idx = self.stack.pop().unwrap();
        let aref = self.stack.pop().unwrap();
        self.chknull(aref);
        self.chkidx(aref, idx);
        let id = self.new_node(IrOp::StelemAddr, IrType::None, false);
        self.append(id);
        self.bump(aref);
        self.bump(idx);
        self.mark_embeddable_load(value);
        self.node_mut(id).ins = vec![aref, idx, value];
        self.heap_epoch += 1;
    }

    fn expand_ldlen(&mut self) {
        let aref = self.stack.pop().unwrap();
        self.chknull(aref);
        let id = self.new_node(IrOp::Ldlen, IrType::Int32, false);
        self.append(id);
        self.bump(aref);
        self.node_mut(id).ins = vec![aref];
        self.stack.push(id);
    }

    /// CHKNULL consumes the pending stack reference of `aref`; CHKIDX makes
    /// a fresh link. Both are side-effect nodes: counter 1, never operands,
    /// never dead-coded.
    fn chknull(&mut self, aref: IrId) {
        let id = self.new_node(IrOp::Chknull, IrType::None, true);
        self.append(id);
        self.node_mut(id).ins = vec![aref];
    }

    fn chkidx(&mut self, aref: IrId, idx: IrId) {
        let id = self.new_node(IrOp::Chkidx, IrType::None, true);
        self.append(id);
        self.bump(aref);
        self.mark_embeddable_load(idx);
        self.node_mut(id).ins = vec![aref, idx];
    }

    // ---- block boundary adaptation ---------------------------------------

    /// Seeds the virtual stack with LDTMP nodes for the entry residue.
    fn adapt_block_entry(&mut self, residue: u32) {
        for slot in 0..residue {
            self.emit(IrOp::Ldtmp(slot as u16), 0, IrType::Int32, false);
        }
    }

    /// Emits STTMP nodes for the exit residue, each inserted immediately
    /// after its producer (the earliest safe position, letting the producer
    /// write its result directly into the temporary). A value that is the
    /// entry LDTMP of the same slot needs no store: the slot already holds
    /// it, and the pair cancels.
    fn adapt_block_exit(&mut self) {
        let residue: Vec<IrId> = std::mem::take(&mut self.stack);
        self.out.blocks[self.cur_bb].exit_residue = residue.len() as u32;
        self.out.temp_zone_slots = self.out.temp_zone_slots.max(residue.len() as u16);
        let mut insert_point: std::collections::HashMap<IrId, IrId> =
            std::collections::HashMap::new();
        for (slot, producer) in residue.into_iter().enumerate() {
            let slot = slot as u16;
            if self.node(producer).op == IrOp::Ldtmp(slot) {
                self.release(producer);
                continue;
            }
            let id = self.new_node(IrOp::Sttmp(slot), IrType::None, false);
            let anchor = insert_point.get(&producer).copied().unwrap_or(producer);
            self.insert_after(anchor, id);
            self.node_mut(id).ins = vec![producer];
            insert_point.insert(producer, id);
            self.mark_store_embeddable(id);
        }
    }

    // ---- per-block driver ------------------------------------------------

    fn block_id_of(&self, offset: u32) -> usize {
        self.block_of_leader[offset as usize].expect("branch target must be a leader")
    }

    fn translate_block(&mut self, bb: usize) -> Result<(), InternalError> {
        let (leader, end) = {
            let b = &self.cfg.blocks[bb];
            (b.leader, b.end)
        };
        self.cur_bb = bb;
        self.trapped = false;
        self.repo = [
            vec![None; self.method.local_count as usize],
            vec![None; self.method.arg_count as usize],
        ];
        // A new block invalidates nothing heap-wise by itself, but element
        // loads never embed across blocks anyway (per-block DAGs); keep the
        // epoch monotone for clarity.
        self.heap_epoch += 1;

        let residue = self.depths.depth_at(leader).ok_or_else(|| {
            InternalError(format!("reachable block B{} has no validated depth", bb))
        })?;
        // Every already-translated predecessor must have left exactly this
        // many values.
        for (p, pb) in self.cfg.blocks.iter().enumerate() {
            if pb.successors.contains(&bb) && self.out.blocks[p].translated {
                let exit = self.out.blocks[p].exit_residue;
                if exit != residue {
                    return Err(InternalError(format!(
                        "residue mismatch entering B{}: predecessor B{} left {}, expected {}",
                        bb, p, exit, residue
                    )));
                }
            }
        }
        self.out.blocks[bb].entry_residue = residue;
        self.adapt_block_entry(residue);

        for offset in leader..end {
            let op = self.method.body[offset as usize].clone();
            self.step(&op);
        }

        // Exit residue must match what the validator predicts for the
        // successors.
        for &s in &self.cfg.blocks[bb].successors {
            if s == self.cfg.last_block {
                continue;
            }
            let expected = self.depths.depth_at(self.cfg.blocks[s].leader);
            if expected != Some(self.stack.len() as u32) {
                return Err(InternalError(format!(
                    "B{} leaves {} values but successor B{} expects {:?}",
                    bb,
                    self.stack.len(),
                    s,
                    expected
                )));
            }
        }
        self.adapt_block_exit();
        self.out.blocks[bb].translated = true;
        Ok(())
    }

    fn step(&mut self, op: &Op) {
        match op {
            Op::Ldc(v) => {
                self.emit(IrOp::Const(*v), 0, IrType::Int32, false);
            }
            Op::Ldloc(i) => self.repo_load(0, *i),
            Op::Ldarg(i) => self.repo_load(1, *i),
            Op::Stloc(i) => self.repo_store(0, *i),
            Op::Starg(i) => self.repo_store(1, *i),
            Op::Bin(b) => self.bin_op(*b),
            Op::Un(u) => {
                if self.opts.fold {
                    if let Some(&top) = self.stack.last() {
                        if let Some(v) = self.const_of(top) {
                            self.stack.pop();
                            self.release(top);
                            self.emit(IrOp::Const(sem::un(*u, v)), 0, IrType::Int32, false);
                            return;
                        }
                    }
                }
                self.emit(IrOp::Un(*u), 1, IrType::Int32, false);
            }
            Op::Dup => {
                let top = *self.stack.last().unwrap();
                self.bump(top);
                self.stack.push(top);
            }
            Op::Pop => {
                let top = self.stack.pop().unwrap();
                self.release(top);
            }
            Op::Br(t) | Op::Leave(t) => {
                let target = self.block_id_of(*t);
                self.emit(IrOp::Br { target }, 0, IrType::None, false);
            }
            Op::Bc(c, t) => {
                let target = self.block_id_of(*t);
                self.emit(IrOp::Bc { cond: *c, target }, 2, IrType::None, false);
            }
            Op::Brtrue(t) => {
                let target = self.block_id_of(*t);
                self.emit(IrOp::Brtrue { target }, 1, IrType::None, false);
            }
            Op::Brfalse(t) => {
                let target = self.block_id_of(*t);
                self.emit(IrOp::Brfalse { target }, 1, IrType::None, false);
            }
            Op::Switch(ts) => {
                let targets: Vec<usize> = ts.iter().map(|&t| self.block_id_of(t)).collect();
                self.emit(IrOp::Switch { targets }, 1, IrType::None, false);
            }
            Op::Ret => {
                let arity = if self.method.returns_value { 1 } else { 0 };
                self.emit(IrOp::Ret, arity, IrType::None, false);
            }
            Op::Call(name) => {
                let method = self.program.find(name).unwrap();
                let callee = &self.program.methods[method];
                let argc = callee.arg_count;
                let returns = callee.returns_value;
                let ty = if returns { IrType::Int32 } else { IrType::None };
                // Calls may throw inside and may write the heap.
                self.emit(
                    IrOp::Call {
                        method,
                        argc,
                        returns,
                    },
                    argc as usize,
                    ty,
                    true,
                );
                self.heap_epoch += 1;
            }
            Op::Newarr => {
                self.emit(IrOp::Newarr, 1, IrType::ArrayRef, true);
            }
            Op::Ldlen => self.expand_ldlen(),
            Op::Ldelem => self.expand_ldelem(),
            Op::Stelem => self.expand_stelem(),
            Op::Trap(c) => {
                self.emit_throw(*c);
            }
        }
    }
}

// ---- post-translation checks -------------------------------------------

/// Recounts every live node's consumer links and compares with its usage
/// counter. After translation no stack or repository references remain, so
/// the counter must equal the in-link count exactly.
pub fn audit_counters(ddg: &DdgMethod) -> Result<(), String> {
    let mut expected = vec![0u32; ddg.nodes.len()];
    for bb in 0..ddg.blocks.len() {
        for id in ddg.block_nodes(bb) {
            for &input in &ddg.node(id).ins {
                expected[input.ix()] += 1;
            }
        }
    }
    for bb in 0..ddg.blocks.len() {
        for id in ddg.block_nodes(bb) {
            let n = ddg.node(id);
            // Non-value nodes are never operands; they keep their initial
            // reference forever.
            let want = if n.ty == IrType::None {
                if expected[id.ix()] != 0 {
                    return Err(format!(
                        "non-value node n{} ({}) is an operand of another node",
                        id.0,
                        n.op.name()
                    ));
                }
                1
            } else {
                expected[id.ix()]
            };
            if n.counter != want {
                return Err(format!(
                    "node n{} ({}) counter={} but recount={}",
                    id.0,
                    n.op.name(),
                    n.counter,
                    want
                ));
            }
        }
    }
    Ok(())
}

/// Ids a post-hoc dead-node sweep would remove. Zero after a translation
/// with DCE enabled.
pub fn dead_sweep(ddg: &DdgMethod) -> Vec<IrId> {
    let mut out = Vec::new();
    for bb in 0..ddg.blocks.len() {
        for id in ddg.block_nodes(bb) {
            let n = ddg.node(id);
            if n.counter == 0 && !n.flags.throws && Translator::is_pure_value(&n.op) {
                out.push(id);
            }
        }
    }
    out
}


/// `n<k>: <opcode> [in: n<i>,n<j>] ctr=<c> flags=<...>` per block, in
/// prev/next order.
pub fn dump_ddg(ddg: &DdgMethod, cfg: &Cfg) -> String {
    let mut out = String::new();
    for bb in cfg.blocks_in_layout_order() {
        if !ddg.blocks[bb].translated {
            continue;
        }
        writeln!(
            out,
            "block B{} (entry residue {}, exit residue {}):",
            bb, ddg.blocks[bb].entry_residue, ddg.blocks[bb].exit_residue
        )
        .unwrap();
        for id in ddg.block_nodes(bb) {
            let n = ddg.node(id);
            let ins: Vec<String> = n.ins.iter().map(|i| format!("n{}", i.0)).collect();
            let mut flags = String::new();
            if n.flags.throws {
                flags.push('T');
            }
            if n.flags.embeddable {
                flags.push('E');
            }
            if n.flags.unreachable {
                flags.push('U');
            }
            if n.store_embed_target.is_some() {
                flags.push('S');
            }
            if flags.is_empty() {
                flags.push('-');
            }
            writeln!(
                out,
                "  n{}: {} [in: {}] ctr={} flags={}",
                id.0,
                n.op.name(),
                ins.join(","),
                n.counter,
                flags
            )
            .unwrap();
        }
    }
    out
}
