//! Depth-first numbering, immediate dominators, and natural-loop detection.
//!
//! Blocks are numbered in postorder, so a dominator always has a higher
//! number than the blocks it dominates and the whole dominator set of a
//! block is the chain obtained by repeatedly indexing the IDOM vector.
//! A back edge is an edge whose target appears on that chain; each back
//! edge heads a natural loop, gathered by walking predecessors from the
//! tail until the header blocks the walk.

use crate::cfg::Cfg;
use std::collections::BTreeSet;
use std::fmt::Write;

const UNDEF: u32 = u32::MAX;

/// Postorder numbering of the reachable blocks. The root (first block) gets
/// the maximum number; unreachable blocks have no number.
#[derive(Debug, Clone)]
pub struct Numbering {
    /// block id -> postorder number (dfn); `None` for unreachable blocks.
    pub postorder: Vec<Option<u32>>,
    /// Reachable block ids in reverse postorder.
    pub rpo: Vec<usize>,
    /// dfn -> block id.
    pub by_dfn: Vec<usize>,
}

pub fn number_blocks(cfg: &Cfg) -> Numbering {
    let n = cfg.blocks.len();
    let mut postorder: Vec<Option<u32>> = vec![None; n];
    let mut by_dfn: Vec<usize> = Vec::new();
    let mut visited = vec![false; n];
    // Iterative DFS following successor order.
    let mut stack: Vec<(usize, usize)> = vec![(cfg.first_block, 0)];
    visited[cfg.first_block] = true;
    while let Some(&mut (block, ref mut next)) = stack.last_mut() {
        let succs = &cfg.blocks[block].successors;
        if *next < succs.len() {
            let s = succs[*next];
            *next += 1;
            if !visited[s] {
                visited[s] = true;
                stack.push((s, 0));
            }
        } else {
            stack.pop();
            postorder[block] = Some(by_dfn.len() as u32);
            by_dfn.push(block);
        }
    }
    let rpo: Vec<usize> = by_dfn.iter().rev().copied().collect();
    Numbering {
        postorder,
        rpo,
        by_dfn,
    }
}

/// Immediate dominators, indexed by dfn. The root maps to itself.
#[derive(Debug, Clone)]
pub struct IdomVector {
    pub idom: Vec<u32>,
}

impl IdomVector {
    /// True iff the block numbered `dom` dominates the block numbered `dfn`.
    pub fn dominates(&self, dom: u32, dfn: u32) -> bool {
        let mut cur = dfn;
        while cur < dom {
            cur = self.idom[cur as usize];
        }
        cur == dom
    }
}

/// Cooper-Harvey-Kennedy iteration: process blocks in reverse postorder,
/// intersect the already-processed predecessors with the two-finger walk,
/// repeat until the vector stops changing.
pub fn compute_idoms(cfg: &Cfg, numbering: &Numbering) -> IdomVector {
    let count = numbering.by_dfn.len();
    // Predecessors materialized in dfn space; only reachable sources count.
    let mut preds: Vec<Vec<u32>> = vec![Vec::new(); count];
    for &block in &numbering.rpo {
        let bdfn = numbering.postorder[block].unwrap();
        for &s in &cfg.blocks[block].successors {
            if let Some(sdfn) = numbering.postorder[s] {
                preds[sdfn as usize].push(bdfn);
            }
        }
    }

    let root = (count - 1) as u32;
    let mut idom = vec![UNDEF; count];
    idom[root as usize] = root;

    let intersect = |idom: &[u32], mut a: u32, mut b: u32| -> u32 {
        while a != b {
            while a < b {
                a = idom[a as usize];
            }
            while b < a {
                b = idom[b as usize];
            }
        }
        a
    };

    let mut changed = true;
    while changed {
        changed = false;
        for &block in &numbering.rpo {
            let b = numbering.postorder[block].unwrap();
            if b == root {
                continue;
            }
            let mut new_idom = UNDEF;
            for &p in &preds[b as usize] {
                if idom[p as usize] == UNDEF {
                    continue;
                }
                new_idom = if new_idom == UNDEF {
                    p
                } else {
                    intersect(&idom, p, new_idom)
                };
            }
            if new_idom != UNDEF && idom[b as usize] != new_idom {
                idom[b as usize] = new_idom;
                changed = true;
            }
        }
    }
    IdomVector { idom }
}

/// One natural loop. The root node is a virtual loop covering the whole
/// method and has no header.
#[derive(Debug, Clone)]
pub struct Loop {
    pub header: Option<usize>,
    pub body: BTreeSet<usize>,
    pub parent: Option<usize>,
    pub first_child: Option<usize>,
    pub next_sibling: Option<usize>,
    /// The loop's canonical entry block (its header).
    pub first_block: usize,
}

#[derive(Debug, Clone)]
pub struct LoopTree {
    /// nodes[0] is the virtual root.
    pub nodes: Vec<Loop>,
}

impl LoopTree {
    pub const ROOT: usize = 0;

    pub fn children(&self, ix: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.nodes[ix].first_child;
        while let Some(c) = cur {
            out.push(c);
            cur = self.nodes[c].next_sibling;
        }
        out
    }

    fn append_child(&mut self, parent: usize, child: usize) {
        self.nodes[child].parent = Some(parent);
        match self.nodes[parent].first_child {
            None => self.nodes[parent].first_child = Some(child),
            Some(first) => {
                let mut cur = first;
                while let Some(next) = self.nodes[cur].next_sibling {
                    cur = next;
                }
                self.nodes[cur].next_sibling = Some(child);
            }
        }
    }
}

/// Walks predecessors from `tail` until the `header` barrier, gathering the
/// loop body. A self back edge (tail == header) yields just the header.
pub fn collect_loop_body(preds: &[Vec<usize>], header: usize, tail: usize) -> BTreeSet<usize> {
    let mut body = BTreeSet::new();
    body.insert(header);
    let mut work = Vec::new();
    if body.insert(tail) {
        work.push(tail);
    }
    while let Some(b) = work.pop() {
        for &p in &preds[b] {
            if body.insert(p) {
                work.push(p);
            }
        }
    }
    body
}

pub fn detect_natural_loops(cfg: &Cfg, numbering: &Numbering, idoms: &IdomVector) -> LoopTree {
    // Predecessor lists in block-id space, reachable sources only,
    // deterministic order.
    let n = cfg.blocks.len();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &block in &numbering.rpo {
        for &s in &cfg.blocks[block].successors {
            preds[s].push(block);
        }
    }

    let mut tree = LoopTree {
        nodes: vec![Loop {
            header: None,
            body: numbering.rpo.iter().copied().collect(),
            parent: None,
            first_child: None,
            next_sibling: None,
            first_block: cfg.first_block,
        }],
    };

    for &bb1 in &numbering.rpo {
        if cfg.blocks[bb1].pred_count == 0 {
            continue;
        }
        let header_dfn = numbering.postorder[bb1].unwrap();
        for p in preds[bb1].clone() {
            let mut cur = numbering.postorder[p].unwrap();
            while cur < header_dfn {
                cur = idoms.idom[cur as usize];
            }
            if cur != header_dfn {
                continue;
            }
            // bb1 dominates p: p -> bb1 is a back edge heading a natural loop.
            let body = collect_loop_body(&preds, bb1, p);
            if let Some(existing) = tree.nodes.iter().position(|l| l.header == Some(bb1)) {
                // Two back edges sharing a header merge into one loop node.
                tree.nodes[existing].body.extend(body);
                continue;
            }
            let ix = tree.nodes.len();
            tree.nodes.push(Loop {
                header: Some(bb1),
                body,
                parent: None,
                first_child: None,
                next_sibling: None,
                first_block: bb1,
            });
            // Insert under the innermost existing loop containing the
            // header, else under the virtual root.
            let mut parent = LoopTree::ROOT;
            let mut parent_size = usize::MAX;
            for (i, l) in tree.nodes.iter().enumerate().skip(1) {
                if i != ix && l.body.contains(&bb1) && l.body.len() < parent_size {
                    parent = i;
                    parent_size = l.body.len();
                }
            }
            tree.append_child(parent, ix);
        }
    }
    tree
}

/// `B<id>: idom=B<id>` lines in reverse postorder.
pub fn dump_doms(numbering: &Numbering, idoms: &IdomVector) -> String {
    let mut out = String::new();
    for &block in &numbering.rpo {
        let dfn = numbering.postorder[block].unwrap();
        let idom_block = numbering.by_dfn[idoms.idom[dfn as usize] as usize];
        writeln!(out, "B{}: idom=B{}", block, idom_block).unwrap();
    }
    out
}

/// Loop tree indented two spaces per depth, with header id and sorted body.
pub fn dump_loops(tree: &LoopTree) -> String {
    fn rec(tree: &LoopTree, ix: usize, depth: usize, out: &mut String) {
        for _ in 0..depth {
            out.push_str("  ");
        }
        let l = &tree.nodes[ix];
        let body: Vec<String> = l.body.iter().map(|b| format!("B{}", b)).collect();
        match l.header {
            None => writeln!(out, "root body=[{}]", body.join(",")).unwrap(),
            Some(h) => writeln!(out, "loop header=B{} body=[{}]", h, body.join(",")).unwrap(),
        }
        for c in tree.children(ix) {
            rec(tree, c, depth + 1, out);
        }
    }
    let mut out = String::new();
    rec(tree, LoopTree::ROOT, 0, &mut out);
    out
}
