//! Property tests for the per-module invariants, driven by the seeded
//! random-program generator.

mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use silc::cfg::build_cfg;
use silc::ddg::{translate_method, IrOp, OptFlags};
use silc::il::{parse, print, validate, validate_program, Op, Program};
use silc::interp::{Interp, InterpError, Value};
use silc::loops::number_blocks;
use silc::target::{Inst, JumpTarget};
use std::collections::BTreeSet;

#[test]
fn parse_print_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x509);
    for _ in 0..200 {
        let p = gen_program(&mut rng, true);
        let q = parse(&print(&p)).expect("printed form parses");
        assert_eq!(p, q);
    }
}

#[test]
fn validator_matches_interpreter_underflow() {
    // Accepted programs never underflow dynamically; a dynamic underflow
    // implies rejection.
    let mut rng = ChaCha8Rng::seed_from_u64(0xF00D);
    let mut accepted = 0;
    let mut rejected = 0;
    for _ in 0..3000 {
        let p = gen_junk_method(&mut rng);
        let verdict = validate(&p, 0);
        let mut underflow = false;
        for args in [[0], [1], [-7]] {
            let vargs: Vec<Value> = args.iter().map(|&v| Value::Int(v)).collect();
            match Interp::new().run(&p, "j", &vargs, 10_000) {
                Ok(_) => {}
                Err(InterpError::Underflow) => underflow = true,
                Err(InterpError::FellOffEnd) => {
                    assert!(verdict.is_err(), "fall-through accepted:\n{}", print(&p))
                }
                Err(e) => panic!("unexpected interpreter error: {}", e),
            }
        }
        if underflow {
            rejected += 1;
            assert!(
                verdict.is_err(),
                "validator accepted a program that underflows:\n{}",
                print(&p)
            );
        }
        if verdict.is_ok() {
            accepted += 1;
        }
    }
    // The junk generator must exercise both sides.
    assert!(accepted > 50, "junk generator too hostile: {}", accepted);
    assert!(rejected > 50, "junk generator too tame: {}", rejected);
}

/// Independent two-pass leader scan, used only here.
fn leader_oracle(body: &[Op]) -> BTreeSet<u32> {
    let mut leaders = BTreeSet::new();
    leaders.insert(0);
    for (k, op) in body.iter().enumerate() {
        for &t in op.branch_targets() {
            leaders.insert(t);
        }
        if op.ends_block() && (k + 1) < body.len() {
            leaders.insert(k as u32 + 1);
        }
    }
    leaders
}

#[test]
fn cfg_invariants_on_random_programs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCF6);
    for _ in 0..300 {
        let p = gen_program(&mut rng, true);
        for m in &p.methods {
            let cfg = build_cfg(m);
            let len = m.body.len() as u32;
            // Leaders match the oracle exactly.
            let got: BTreeSet<u32> = cfg.leaders.iter().copied().filter(|&l| l < len).collect();
            assert_eq!(got, leader_oracle(&m.body));
            // Blocks partition the body.
            let mut extents: Vec<(u32, u32)> = cfg
                .blocks
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != cfg.last_block)
                .map(|(_, b)| (b.leader, b.end))
                .collect();
            extents.sort_unstable();
            let mut expect = 0;
            for (l, e) in extents {
                assert_eq!(l, expect);
                assert!(l < e);
                expect = e;
            }
            assert_eq!(expect, len);
            // Every edge is a fall-through or a branch target of the source
            // block's last instruction; pred counts sum to the edge count.
            for (id, blk) in cfg.blocks.iter().enumerate() {
                if id == cfg.last_block {
                    continue;
                }
                let last = &m.body[(blk.end - 1) as usize];
                for &s in &blk.successors {
                    let tl = cfg.blocks[s].leader;
                    assert!(
                        tl == blk.end
                            || last.branch_targets().contains(&tl)
                            || (s == cfg.last_block && matches!(last, Op::Ret | Op::Trap(_))),
                        "edge B{} -> B{} unjustified",
                        id,
                        s
                    );
                }
            }
            let edges: usize = cfg.blocks.iter().map(|b| b.successors.len()).sum();
            let preds: u32 = cfg.blocks.iter().map(|b| b.pred_count).sum();
            assert_eq!(edges as u32, preds);

            // Determinism.
            let again = build_cfg(m);
            assert_eq!(cfg.leaders, again.leaders);
            for (a, b) in cfg.blocks.iter().zip(again.blocks.iter()) {
                assert_eq!(a.successors, b.successors);
            }
        }
    }
}

fn translate_all(p: &Program, opts: OptFlags) -> Vec<(silc::cfg::Cfg, silc::ddg::DdgMethod)> {
    let depths = validate_program(p).unwrap();
    p.methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let cfg = build_cfg(m);
            let n = number_blocks(&cfg);
            let ddg = translate_method(p, m, &cfg, &n, &depths[i], opts).unwrap();
            (cfg, ddg)
        })
        .collect()
}

#[test]
fn throws_order_is_a_subsequence_of_program_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AD);
    for _ in 0..200 {
        let p = gen_program(&mut rng, true);
        for (cfg, ddg) in translate_all(&p, OptFlags::default()) {
            for bb in 0..cfg.blocks.len() {
                // Node ids grow in emission (program) order, so the list
                // restricted to throwing nodes must be id-ascending.
                let throwers: Vec<u32> = ddg
                    .block_nodes(bb)
                    .into_iter()
                    .filter(|&id| ddg.node(id).flags.throws)
                    .map(|id| id.0)
                    .collect();
                let mut sorted = throwers.clone();
                sorted.sort_unstable();
                assert_eq!(throwers, sorted, "throwing nodes reordered");
            }
        }
    }
}

#[test]
fn folding_totality_no_constant_alu_survives() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x707A1);
    for _ in 0..200 {
        let p = gen_program(&mut rng, true);
        for (cfg, ddg) in translate_all(&p, OptFlags::default()) {
            for bb in 0..cfg.blocks.len() {
                for id in ddg.block_nodes(bb) {
                    let n = ddg.node(id);
                    if matches!(n.op, IrOp::Bin(_) | IrOp::Un(_)) {
                        let all_const = n
                            .ins
                            .iter()
                            .all(|&i| matches!(ddg.node(i).op, IrOp::Const(_)));
                        assert!(!all_const, "constant-only {} survived", n.op.name());
                    }
                }
            }
        }
    }
}

#[test]
fn fixup_totality_no_symbolic_targets_remain() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1C5);
    for _ in 0..100 {
        let p = gen_program(&mut rng, true);
        let depths = validate_program(&p).unwrap();
        let (prog, _, _) =
            silc::pipeline::compile_opt(&p, &depths, OptFlags::default()).unwrap();
        let base = silc::pipeline::compile_baseline(&p);
        for code in [&prog.code, &base.code] {
            for inst in code {
                if let Inst::Jcc { target, .. } | Inst::Jmp { target } = inst {
                    assert!(matches!(target, JumpTarget::Index(_)));
                }
            }
        }
    }
}

#[test]
fn baseline_never_beats_optimized_on_corpus() {
    // Soft invariant, checked on the corpus where the margins are wide.
    let cases: [(&str, &str, Vec<i32>, Vec<i32>); 4] = [
        ("quicksort.sil", "sort", (0..128).rev().collect(), vec![]),
        ("rc4.sil", "rc4", vec![1, 2, 3], vec![128]),
        ("array_get.sil", "get", (0..8).collect(), vec![1, 2]),
        ("gcd.sil", "gcd", vec![], vec![1071, 462]),
    ];
    for (file, entry, array, args) in cases {
        let text = load_corpus(file);
        let arr = if array.is_empty() { None } else { Some(&array[..]) };
        let (bo, bsteps) = run_backend(&text, entry, arr, &args, false, OptFlags::default(), 100_000_000);
        let (oo, osteps) = run_backend(&text, entry, arr, &args, true, OptFlags::default(), 100_000_000);
        assert_eq!(bo, oo);
        assert!(
            osteps <= bsteps,
            "{}: optimized {} steps vs baseline {}",
            file,
            osteps,
            bsteps
        );
    }
}

#[test]
fn loop_bodies_nest_on_random_programs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x100F);
    for _ in 0..300 {
        let p = gen_program(&mut rng, false);
        for m in &p.methods {
            let cfg = build_cfg(m);
            let n = number_blocks(&cfg);
            let idoms = silc::loops::compute_idoms(&cfg, &n);
            let tree = silc::loops::detect_natural_loops(&cfg, &n, &idoms);
            for (i, a) in tree.nodes.iter().enumerate().skip(1) {
                // Child bodies nest inside their parents.
                if let Some(parent) = a.parent {
                    if parent != 0 {
                        assert!(a.body.is_subset(&tree.nodes[parent].body));
                    }
                }
                for b in tree.nodes.iter().skip(i + 1) {
                    let inter = a.body.intersection(&b.body).count();
                    assert!(
                        inter == 0 || inter == a.body.len() || inter == b.body.len(),
                        "loops partially overlap"
                    );
                }
            }
        }
    }
}

#[test]
fn differential_with_each_kill_switch() {
    // The master property holds under every single-switch configuration,
    // not just the default.
    let mut rng = ChaCha8Rng::seed_from_u64(0x51DE);
    let variants = [
        OptFlags { fold: false, ..OptFlags::default() },
        OptFlags { repo: false, ..OptFlags::default() },
        OptFlags { dce: false, ..OptFlags::default() },
        OptFlags { embed: false, ..OptFlags::default() },
        OptFlags { fold: false, repo: false, dce: false, embed: false },
    ];
    for round in 0..60 {
        let p = gen_program(&mut rng, true);
        let opts = variants[round % variants.len()];
        for m in &p.methods {
            let vectors = arg_vectors(&mut rng, m.arg_count, 4);
            for args in &vectors {
                assert_agree(&p, &m.name, args, opts);
            }
        }
    }
}

/// Long-haul differential fuzz; run explicitly with `-- --ignored`.
#[test]
#[ignore]
fn extended_differential_fuzz() {
    let mut methods = 0usize;
    for seed in 1000..1400u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..8 {
            let p = gen_program(&mut rng, true);
            for m in &p.methods {
                let vectors = arg_vectors(&mut rng, m.arg_count, 5);
                for args in &vectors {
                    assert_agree(&p, &m.name, args, OptFlags::default());
                }
                methods += 1;
            }
        }
    }
    println!("extended fuzz OK: {} methods", methods);
}

#[test]
fn interp_steps_count_il_instructions() {
    let p = parse(".method m 0 args 0 locals ret\n ldc 2\n ldc 3\n add\n ret").unwrap();
    let r = Interp::new().run(&p, "m", &[], 100).unwrap();
    assert_eq!(r.steps, 4);
    assert_eq!(r.op_counts["ldc"], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Steps are deterministic for fixed inputs.
    for _ in 0..20 {
        let p = gen_program(&mut rng, true);
        let m = &p.methods[0];
        let args: Vec<Value> = (0..m.arg_count).map(|_| Value::Int(5)).collect();
        let r1 = Interp::new().run(&p, &m.name, &args, FUZZ_MAX_STEPS).unwrap();
        let r2 = Interp::new().run(&p, &m.name, &args, FUZZ_MAX_STEPS).unwrap();
        assert_eq!(r1.steps, r2.steps);
        assert_eq!(r1.outcome, r2.outcome);
    }
}
