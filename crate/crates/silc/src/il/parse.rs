//! Parser for the `.sil` textual assembly format.
//!
//! ```text
//! file      := method*
//! method    := ".method" NAME INT "args" INT "locals" ("ret" | "void") NL line*
//! line      := [LABEL ":"] MNEMONIC [operand] NL
//! operand   := INT | LABEL | NAME | "(" LABEL ("," LABEL)* ")"
//! comment   := ";" to end of line
//! ```

use super::{Method, Op, Program};
use crate::sem::{BinAlu, Cond, TrapCode, UnAlu};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: duplicate method `{name}`")]
    DuplicateMethod { line: usize, name: String },
}

fn syntax(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        line,
        msg: msg.into(),
    }
}

/// A raw instruction line before label resolution.
struct RawInstr<'a> {
    line: usize,
    mnemonic: &'a str,
    operand: Option<&'a str>,
}

pub fn parse(text: &str) -> Result<Program, ParseError> {
    let mut program = Program::default();
    // Per-method accumulation.
    let mut header: Option<(usize, Method)> = None;
    let mut raw: Vec<RawInstr> = Vec::new();
    let mut labels: HashMap<String, u32> = HashMap::new();

    let finish = |header: &mut Option<(usize, Method)>,
                      raw: &mut Vec<RawInstr>,
                      labels: &mut HashMap<String, u32>,
                      program: &mut Program|
     -> Result<(), ParseError> {
        if let Some((_, mut m)) = header.take() {
            for r in raw.drain(..) {
                m.body.push(build_op(&r, labels)?);
            }
            labels.clear();
            program.methods.push(m);
        }
        Ok(())
    };

    for (idx, full_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match full_line.find(';') {
            Some(p) => &full_line[..p],
            None => full_line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }

        if let Some(rest) = line.strip_prefix(".method") {
            finish(&mut header, &mut raw, &mut labels, &mut program)?;
            let m = parse_header(lineno, rest)?;
            if program.find(&m.name).is_some() {
                return Err(ParseError::DuplicateMethod {
                    line: lineno,
                    name: m.name,
                });
            }
            header = Some((lineno, m));
            continue;
        }

        if header.is_none() {
            return Err(syntax(lineno, "instruction outside of a .method"));
        }

        let mut body = line;
        if let Some(colon) = line.find(':') {
            let label = line[..colon].trim();
            if !is_name(label) {
                return Err(syntax(lineno, format!("bad label `{}`", label)));
            }
            if labels.insert(label.to_string(), raw.len() as u32).is_some() {
                return Err(ParseError::DuplicateLabel {
                    line: lineno,
                    label: label.to_string(),
                });
            }
            body = line[colon + 1..].trim();
            if body.is_empty() {
                return Err(syntax(lineno, "label without an instruction"));
            }
        }

        let (mnemonic, operand) = match body.find(char::is_whitespace) {
            Some(p) => (&body[..p], Some(body[p..].trim())),
            None => (body, None),
        };
        raw.push(RawInstr {
            line: lineno,
            mnemonic,
            operand,
        });
    }
    finish(&mut header, &mut raw, &mut labels, &mut program)?;
    Ok(program)
}

fn parse_header(lineno: usize, rest: &str) -> Result<Method, ParseError> {
    let toks: Vec<&str> = rest.split_whitespace().collect();
    if toks.len() != 6 || toks[2] != "args" || toks[4] != "locals" {
        return Err(syntax(
            lineno,
            "expected `.method NAME <n> args <n> locals (ret|void)`",
        ));
    }
    if !is_name(toks[0]) {
        return Err(syntax(lineno, format!("bad method name `{}`", toks[0])));
    }
    let arg_count = parse_count(lineno, toks[1])?;
    let local_count = parse_count(lineno, toks[3])?;
    let returns_value = match toks[5] {
        "ret" => true,
        "void" => false,
        other => return Err(syntax(lineno, format!("expected ret or void, got `{}`", other))),
    };
    Ok(Method {
        name: toks[0].to_string(),
        arg_count,
        local_count,
        returns_value,
        body: Vec::new(),
    })
}

fn build_op(r: &RawInstr, labels: &HashMap<String, u32>) -> Result<Op, ParseError> {
    let line = r.line;
    let need_int = || -> Result<i64, ParseError> {
        let s = r
            .operand
            .ok_or_else(|| syntax(line, format!("`{}` needs an operand", r.mnemonic)))?;
        s.parse::<i64>()
            .map_err(|_| syntax(line, format!("bad integer `{}`", s)))
    };
    let need_index = || -> Result<u16, ParseError> {
        let v = need_int()?;
        u16::try_from(v).map_err(|_| syntax(line, format!("index {} out of range", v)))
    };
    let need_i32 = || -> Result<i32, ParseError> {
        let v = need_int()?;
        i32::try_from(v).map_err(|_| syntax(line, format!("constant {} out of range", v)))
    };
    let need_label = || -> Result<u32, ParseError> {
        let s = r
            .operand
            .ok_or_else(|| syntax(line, format!("`{}` needs a label", r.mnemonic)))?;
        resolve_label(line, s, labels)
    };
    let no_operand = |op: Op| -> Result<Op, ParseError> {
        if r.operand.is_some() {
            Err(syntax(line, format!("`{}` takes no operand", r.mnemonic)))
        } else {
            Ok(op)
        }
    };

    Ok(match r.mnemonic {
        "ldc" => Op::Ldc(need_i32()?),
        "ldloc" => Op::Ldloc(need_index()?),
        "stloc" => Op::Stloc(need_index()?),
        "ldarg" => Op::Ldarg(need_index()?),
        "starg" => Op::Starg(need_index()?),
        "add" => no_operand(Op::Bin(BinAlu::Add))?,
        "sub" => no_operand(Op::Bin(BinAlu::Sub))?,
        "mul" => no_operand(Op::Bin(BinAlu::Mul))?,
        "div" => no_operand(Op::Bin(BinAlu::Div))?,
        "rem" => no_operand(Op::Bin(BinAlu::Rem))?,
        "and" => no_operand(Op::Bin(BinAlu::And))?,
        "or" => no_operand(Op::Bin(BinAlu::Or))?,
        "xor" => no_operand(Op::Bin(BinAlu::Xor))?,
        "shl" => no_operand(Op::Bin(BinAlu::Shl))?,
        "shr" => no_operand(Op::Bin(BinAlu::Shr))?,
        "shru" => no_operand(Op::Bin(BinAlu::Shru))?,
        "neg" => no_operand(Op::Un(UnAlu::Neg))?,
        "not" => no_operand(Op::Un(UnAlu::Not))?,
        "dup" => no_operand(Op::Dup)?,
        "pop" => no_operand(Op::Pop)?,
        "br" => Op::Br(need_label()?),
        "leave" => Op::Leave(need_label()?),
        "beq" => Op::Bc(Cond::Eq, need_label()?),
        "bne" => Op::Bc(Cond::Ne, need_label()?),
        "blt" => Op::Bc(Cond::Lt, need_label()?),
        "ble" => Op::Bc(Cond::Le, need_label()?),
        "bgt" => Op::Bc(Cond::Gt, need_label()?),
        "bge" => Op::Bc(Cond::Ge, need_label()?),
        "brtrue" => Op::Brtrue(need_label()?),
        "brfalse" => Op::Brfalse(need_label()?),
        "switch" => {
            let s = r
                .operand
                .ok_or_else(|| syntax(line, "`switch` needs a label list"))?;
            let inner = s
                .strip_prefix('(')
                .and_then(|s| s.strip_suffix(')'))
                .ok_or_else(|| syntax(line, "switch list must be `(L1,L2,...)`"))?;
            let mut targets = Vec::new();
            for part in inner.split(',') {
                targets.push(resolve_label(line, part.trim(), labels)?);
            }
            Op::Switch(targets)
        }
        "ret" => no_operand(Op::Ret)?,
        "call" => {
            let s = r
                .operand
                .ok_or_else(|| syntax(line, "`call` needs a method name"))?;
            if !is_name(s) {
                return Err(syntax(line, format!("bad method name `{}`", s)));
            }
            Op::Call(s.to_string())
        }
        "newarr" => no_operand(Op::Newarr)?,
        "ldlen" => no_operand(Op::Ldlen)?,
        "ldelem" => no_operand(Op::Ldelem)?,
        "stelem" => no_operand(Op::Stelem)?,
        "trap" => {
            let v = need_int()?;
            Op::Trap(
                TrapCode::from_code(v)
                    .ok_or_else(|| syntax(line, format!("bad trap code {}", v)))?,
            )
        }
        other => {
            return Err(ParseError::UnknownMnemonic {
                line,
                mnemonic: other.to_string(),
            })
        }
    })
}

fn resolve_label(
    line: usize,
    label: &str,
    labels: &HashMap<String, u32>,
) -> Result<u32, ParseError> {
    if !is_name(label) {
        return Err(syntax(line, format!("bad label `{}`", label)));
    }
    labels
        .get(label)
        .copied()
        .ok_or_else(|| ParseError::UnknownLabel {
            line,
            label: label.to_string(),
        })
}

fn parse_count(line: usize, s: &str) -> Result<u16, ParseError> {
    s.parse::<u16>()
        .map_err(|_| syntax(line, format!("bad count `{}`", s)))
}

fn is_name(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
