//! Control-flow graph construction in a single left-to-right pass.
//!
//! Leaders: the first instruction, every branch target, and the instruction
//! after every branch/RET/TRAP. The pass keeps a sorted leader list and the
//! offset of the next leader; reaching that offset closes the current block.
//! A backward branch into the middle of an existing block splits it: the old
//! block keeps its predecessors and hands its successor list to the new
//! block, which then has two predecessors (the old block and the brancher).

use crate::il::{Method, Op};
use std::collections::BTreeMap;
use std::fmt::Write;

const OPEN: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct BasicBlock {
    /// First instruction offset, inclusive.
    pub leader: u32,
    /// One past the last instruction offset.
    pub end: u32,
    /// Ordered successor edges: branch targets in operand order, then the
    /// fall-through edge appended when the block is closed.
    pub successors: Vec<usize>,
    /// Incoming edge count, maintained during construction.
    pub pred_count: u32,
}

#[derive(Debug, Clone)]
pub struct Cfg {
    pub blocks: Vec<BasicBlock>,
    pub first_block: usize,
    /// Virtual end-of-method block; carries no instructions. RET and TRAP
    /// blocks point to it so dominance has a single sink.
    pub last_block: usize,
    /// All leader offsets, sorted, including the virtual end offset.
    pub leaders: Vec<u32>,
}

impl Cfg {
    /// Block whose leader is exactly `offset`. Branch targets are always
    /// leaders, so this cannot fail for them.
    pub fn block_at_leader(&self, offset: u32) -> usize {
        self.blocks
            .iter()
            .position(|b| b.leader == offset)
            .unwrap_or_else(|| panic!("no block with leader {}", offset))
    }

    /// Block ids sorted by leader offset, excluding the virtual end block.
    pub fn blocks_in_layout_order(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.blocks.len())
            .filter(|&i| i != self.last_block)
            .collect();
        ids.sort_by_key(|&i| self.blocks[i].leader);
        ids
    }
}

struct Builder {
    blocks: Vec<BasicBlock>,
    by_leader: BTreeMap<u32, usize>,
    current: usize,
    /// Scan position, so splits can tell the open current block's extent.
    scan: u32,
    next_leader: u32,
}

impl Builder {
    fn add_edge(&mut self, from: usize, to: usize) {
        self.blocks[from].successors.push(to);
        self.blocks[to].pred_count += 1;
    }

    fn fresh_block(&mut self, leader: u32) -> usize {
        let id = self.blocks.len();
        self.blocks.push(BasicBlock {
            leader,
            end: OPEN,
            successors: Vec::new(),
            pred_count: 0,
        });
        self.by_leader.insert(leader, id);
        if leader > self.scan && leader < self.next_leader {
            self.next_leader = leader;
        }
        id
    }

    /// CreateBlock: returns the block starting at `offset`, splitting an
    /// existing block when the offset falls strictly inside one.
    fn create_block(&mut self, offset: u32) -> usize {
        if let Some(&id) = self.by_leader.get(&offset) {
            return id;
        }
        if let Some((_, &cand)) = self.by_leader.range(..offset).next_back() {
            let inside = if self.blocks[cand].end == OPEN {
                cand == self.current && offset <= self.scan
            } else {
                offset < self.blocks[cand].end
            };
            if inside {
                return self.split(cand, offset);
            }
        }
        self.fresh_block(offset)
    }

    fn split(&mut self, old: usize, offset: u32) -> usize {
        let new = self.blocks.len();
        let old_end = self.blocks[old].end;
        let moved = std::mem::take(&mut self.blocks[old].successors);
        self.blocks.push(BasicBlock {
            leader: offset,
            end: old_end,
            successors: moved,
            pred_count: 0,
        });
        self.blocks[old].end = offset;
        self.by_leader.insert(offset, new);
        self.add_edge(old, new);
        if old == self.current {
            self.current = new;
        }
        new
    }

    /// CreateLeader: ensures a leader (and its block) exists at `offset`.
    fn create_leader(&mut self, offset: u32, method_len: u32) {
        if offset < method_len {
            self.create_block(offset);
        }
    }

    fn recompute_next_leader(&mut self, after: u32, method_len: u32) {
        self.next_leader = self
            .by_leader
            .range(after + 1..)
            .next()
            .map(|(&o, _)| o)
            .unwrap_or(method_len);
    }
}

pub fn build_cfg(m: &Method) -> Cfg {
    let len = m.body.len() as u32;
    let mut b = Builder {
        blocks: Vec::new(),
        by_leader: BTreeMap::new(),
        current: 0,
        scan: 0,
        next_leader: len,
    };
    let first_block = b.fresh_block(0);
    let last_block = b.fresh_block(len); // virtual end block
    b.blocks[last_block].end = len;
    b.current = first_block;
    b.recompute_next_leader(0, len);

    // The close-time fall-through test covers every instruction that can
    // fall through (conditionals, switch, and plain instructions); only
    // BR/LEAVE/RET/TRAP suppress the edge. The split rule already adds a
    // plain fall-through edge from the shortened block to the new one, so
    // closes at forward-created leaders must do the same.
    let mut prev_falls_through = false;
    for (k, op) in m.body.iter().enumerate() {
        let offset = k as u32;
        b.scan = offset;

        if offset == b.next_leader {
            b.blocks[b.current].end = offset;
            let next = b.by_leader[&offset];
            if prev_falls_through {
                let cur = b.current;
                b.add_edge(cur, next);
            }
            b.current = next;
            b.recompute_next_leader(offset, len);
        }

        match op {
            Op::Br(t) | Op::Leave(t) => {
                let tb = b.create_block(*t);
                let cur = b.current;
                b.add_edge(cur, tb);
                b.create_leader(offset + 1, len);
            }
            Op::Bc(_, t) | Op::Brtrue(t) | Op::Brfalse(t) => {
                let tb = b.create_block(*t);
                let cur = b.current;
                b.add_edge(cur, tb);
                b.create_leader(offset + 1, len);
            }
            Op::Switch(ts) => {
                for t in ts {
                    let tb = b.create_block(*t);
                    let cur = b.current;
                    b.add_edge(cur, tb);
                }
                b.create_leader(offset + 1, len);
            }
            Op::Ret | Op::Trap(_) => {
                let cur = b.current;
                b.add_edge(cur, last_block);
                b.create_leader(offset + 1, len);
            }
            _ => {}
        }
        prev_falls_through = !op.is_terminator();
    }
    b.blocks[b.current].end = len;

    let leaders: Vec<u32> = b.by_leader.keys().copied().collect();
    Cfg {
        blocks: b.blocks,
        first_block,
        last_block,
        leaders,
    }
}

/// DOT dump: nodes labeled `B<id> [leader,end)`, one edge per successor, in
/// deterministic order.
pub fn dump_dot(cfg: &Cfg, name: &str) -> String {
    let mut out = String::new();
    writeln!(out, "digraph cfg_{} {{", name).unwrap();
    for (id, blk) in cfg.blocks.iter().enumerate() {
        writeln!(
            out,
            "  B{} [label=\"B{} [{},{})\"];",
            id, id, blk.leader, blk.end
        )
        .unwrap();
    }
    for (id, blk) in cfg.blocks.iter().enumerate() {
        for &s in &blk.successors {
            writeln!(out, "  B{} -> B{};", id, s).unwrap();
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::il::parse;
    use std::collections::BTreeSet;

    fn cfg_of(text: &str) -> Cfg {
        let p = parse(text).unwrap();
        crate::il::validate_program(&p).unwrap();
        build_cfg(&p.methods[0])
    }

    fn extents(cfg: &Cfg) -> Vec<(u32, u32)> {
        let mut v: Vec<(u32, u32)> = cfg
            .blocks
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != cfg.last_block)
            .map(|(_, b)| (b.leader, b.end))
            .collect();
        v.sort();
        v
    }

    /// Independent two-pass leader scanner used only to cross-check the
    /// single-pass construction.
    fn leader_oracle(m: &crate::il::Method) -> BTreeSet<u32> {
        let len = m.body.len() as u32;
        let mut leaders = BTreeSet::new();
        leaders.insert(0);
        for (k, op) in m.body.iter().enumerate() {
            for &t in op.branch_targets() {
                leaders.insert(t);
            }
            if op.ends_block() && (k as u32 + 1) < len {
                leaders.insert(k as u32 + 1);
            }
        }
        leaders
    }

    pub(crate) fn check_invariants(m: &crate::il::Method, cfg: &Cfg) {
        let len = m.body.len() as u32;
        // Leaders match the oracle.
        let got: BTreeSet<u32> = cfg.leaders.iter().copied().filter(|&l| l < len).collect();
        assert_eq!(got, leader_oracle(m));
        // Blocks partition [0, len).
        let ext = extents(cfg);
        let mut expect = 0;
        for (l, e) in &ext {
            assert_eq!(*l, expect);
            assert!(l < e);
            expect = *e;
        }
        assert_eq!(expect, len);
        // Every edge lands on a fall-through point or a branch target of the
        // source block's last instruction.
        for (id, blk) in cfg.blocks.iter().enumerate() {
            if id == cfg.last_block {
                assert!(blk.successors.is_empty());
                continue;
            }
            let last = &m.body[(blk.end - 1) as usize];
            for &s in &blk.successors {
                let tl = cfg.blocks[s].leader;
                let ok = tl == blk.end
                    || last.branch_targets().contains(&tl)
                    || (s == cfg.last_block && matches!(last, Op::Ret | Op::Trap(_)));
                assert!(ok, "edge B{} -> B{} has no source", id, s);
            }
        }
        // pred_count sums to edge count.
        let edges: usize = cfg.blocks.iter().map(|b| b.successors.len()).sum();
        let preds: u32 = cfg.blocks.iter().map(|b| b.pred_count).sum();
        assert_eq!(edges as u32, preds);
    }

    #[test]
    fn straight_line() {
        let cfg = cfg_of(".method m 0 args 0 locals ret\n ldc 1\n ret");
        assert_eq!(cfg.blocks.len(), 2);
        assert_eq!(extents(&cfg), vec![(0, 2)]);
        assert_eq!(cfg.blocks[cfg.first_block].successors, vec![cfg.last_block]);
    }

    #[test]
    fn diamond_blocks() {
        let cfg = cfg_of(
            ".method m 0 args 0 locals ret\n ldc 1\n brtrue L\n ldc 2\n ret\nL: ldc 3\n ret",
        );
        assert_eq!(extents(&cfg), vec![(0, 2), (2, 4), (4, 6)]);
        let b0 = cfg.block_at_leader(0);
        let succ: BTreeSet<u32> = cfg.blocks[b0]
            .successors
            .iter()
            .map(|&s| cfg.blocks[s].leader)
            .collect();
        assert_eq!(succ, BTreeSet::from([2, 4]));
        // Target edge is appended at the branch, fall-through at the close.
        assert_eq!(cfg.blocks[cfg.blocks[b0].successors[0]].leader, 4);
        assert_eq!(cfg.blocks[cfg.blocks[b0].successors[1]].leader, 2);
        for l in [2u32, 4] {
            let b = cfg.block_at_leader(l);
            assert_eq!(cfg.blocks[b].successors, vec![cfg.last_block]);
        }
    }

    #[test]
    fn backward_branch_to_existing_leader_is_noop() {
        let cfg = cfg_of(
            ".method m 0 args 1 locals void\nL: ldloc 0\n ldc 1\n sub\n stloc 0\n ldloc 0\n brtrue L\n ret",
        );
        assert_eq!(extents(&cfg), vec![(0, 6), (6, 7)]);
        let b0 = cfg.block_at_leader(0);
        assert_eq!(cfg.blocks[b0].pred_count, 1);
    }

    #[test]
    fn backward_branch_splits_block() {
        // Branch back to offset 2, inside the open block [0,..).
        let cfg = cfg_of(
            ".method m 0 args 1 locals void\n ldc 0\n stloc 0\nL: ldloc 0\n ldc 1\n sub\n stloc 0\n ldloc 0\n brtrue L\n ret",
        );
        assert_eq!(extents(&cfg), vec![(0, 2), (2, 8), (8, 9)]);
        let head = cfg.block_at_leader(0);
        let body = cfg.block_at_leader(2);
        // The old block's sole successor is the new block; the new block has
        // two predecessors (old block + the backward brancher).
        assert_eq!(cfg.blocks[head].successors, vec![body]);
        assert_eq!(cfg.blocks[body].pred_count, 2);
    }

    #[test]
    fn split_of_closed_block_transfers_successors() {
        // First a diamond closes block [4,6), then a later backward branch
        // into offset 5 splits it.
        let text = ".method m 0 args 1 locals void\n ldloc 0\n brtrue A\n ldc 9\n stloc 0\nA: ldc 1\n pop\n ldloc 0\n brtrue B\n ret\nB: ldloc 0\n brtrue C\n ret\nC: br D\nD: br E\nE: ldc 3\n pop\n br F\nF: ret";
        let p = parse(text).unwrap();
        crate::il::validate_program(&p).unwrap();
        let cfg = build_cfg(&p.methods[0]);
        check_invariants(&p.methods[0], &cfg);
    }

    #[test]
    fn switch_edges_in_case_order_then_fallthrough() {
        let cfg = cfg_of(
            ".method m 0 args 1 locals void\n ldloc 0\n switch (A,B)\n ret\nA: ret\nB: ret",
        );
        let b0 = cfg.block_at_leader(0);
        let leaders: Vec<u32> = cfg.blocks[b0]
            .successors
            .iter()
            .map(|&s| cfg.blocks[s].leader)
            .collect();
        assert_eq!(leaders, vec![3, 4, 2]);
    }

    #[test]
    fn unreachable_block_has_zero_preds() {
        let cfg = cfg_of(".method m 0 args 0 locals void\n br E\n ldc 1\n pop\nE: ret");
        let dead = cfg.block_at_leader(1);
        assert_eq!(cfg.blocks[dead].pred_count, 0);
        // It still exists and partitions the body.
        assert_eq!(extents(&cfg), vec![(0, 1), (1, 3), (3, 4)]);
    }

    #[test]
    fn branch_to_next_instruction_yields_two_parallel_edges() {
        let cfg = cfg_of(".method m 0 args 1 locals void\n ldloc 0\n brtrue L\nL: ret");
        let b0 = cfg.block_at_leader(0);
        assert_eq!(cfg.blocks[b0].successors.len(), 2);
        let t = cfg.block_at_leader(2);
        assert_eq!(cfg.blocks[t].pred_count, 2);
    }

    #[test]
    fn plain_fall_through_into_target_gets_edge() {
        // The else arm ends in a plain instruction and falls into the join
        // label; the edge must exist even though no branch sits at its end.
        let cfg = cfg_of(
            ".method m 1 args 1 locals ret\n ldarg 0\n brtrue T\n ldc 1\n stloc 0\n br J\nT: ldc 2\n stloc 0\nJ: ldloc 0\n ret",
        );
        let arm = cfg.block_at_leader(5);
        let join = cfg.block_at_leader(7);
        assert_eq!(cfg.blocks[arm].successors, vec![join]);
        assert_eq!(cfg.blocks[join].pred_count, 2);
    }

    #[test]
    fn deterministic_rebuild() {
        let text = ".method m 0 args 2 locals void\nA: ldloc 0\n brtrue B\n ldloc 1\n brtrue A\n ret\nB: ldc 1\n stloc 0\n br A";
        let p = parse(text).unwrap();
        let a = build_cfg(&p.methods[0]);
        let b = build_cfg(&p.methods[0]);
        assert_eq!(a.leaders, b.leaders);
        for (x, y) in a.blocks.iter().zip(b.blocks.iter()) {
            assert_eq!(x.leader, y.leader);
            assert_eq!(x.end, y.end);
            assert_eq!(x.successors, y.successors);
            assert_eq!(x.pred_count, y.pred_count);
        }
        check_invariants(&p.methods[0], &a);
    }
}
