//! Canonical pretty-printer: 2-space indent, one instruction per line.
//! `parse_module(print_module(m)) == m` for every structurally valid module.

use super::ast::*;
use std::fmt::Write;

pub fn print_module(module: &Module) -> String {
    let mut out = String::new();
    out.push_str("(module");
    for mem in &module.memories {
        let _ = write!(out, "\n  (memory shared {} {})", mem.min_pages, mem.max_pages);
    }
    for imp in &module.imports {
        let _ = write!(
            out,
            "\n  (import {} {} (func{}))",
            quote(&imp.namespace),
            quote(&imp.name),
            sig_text(&imp.sig)
        );
    }
    for global in &module.globals {
        let ty = match global.mutable {
            true => format!("(mut {})", global.ty.as_str()),
            false => global.ty.as_str().to_string(),
        };
        let init = match global.init {
            ConstValue::I32(v) => format!("(i32.const {v})"),
            ConstValue::I64(v) => format!("(i64.const {v})"),
        };
        let _ = write!(out, "\n  (global {ty} {init})");
    }
    for func in &module.functions {
        out.push_str("\n  (func");
        if let Some(name) = &func.name {
            let _ = write!(out, " ${name}");
        }
        if let Some(hint) = func.hint {
            let _ = write!(out, " (thread {hint})");
        }
        out.push_str(&sig_text(&func.sig));
        if !func.locals.is_empty() {
            out.push_str(" (local");
            for ty in &func.locals {
                let _ = write!(out, " {}", ty.as_str());
            }
            out.push(')');
        }
        for instr in &func.body {
            print_instr(&mut out, instr, 2);
        }
        out.push(')');
    }
    if !module.threads.is_empty() {
        out.push_str("\n  (threads");
        for &idx in &module.threads {
            let _ = write!(out, " {}", funcref_text(module, idx));
        }
        out.push(')');
    }
    for (name, idx) in &module.exports {
        let _ = write!(out, "\n  (export {} (func {}))", quote(name), funcref_text(module, *idx));
    }
    out.push_str(")\n");
    out
}

fn sig_text(sig: &Signature) -> String {
    let mut s = String::new();
    if !sig.params.is_empty() {
        s.push_str(" (param");
        for ty in &sig.params {
            let _ = write!(s, " {}", ty.as_str());
        }
        s.push(')');
    }
    if let Some(res) = sig.result {
        let _ = write!(s, " (result {})", res.as_str());
    }
    s
}

/// Named reference if the function is defined and named, numeric otherwise.
fn funcref_text(module: &Module, idx: u32) -> String {
    match module.defined(idx).and_then(|f| f.name.as_deref()) {
        Some(name) => format!("${name}"),
        None => idx.to_string(),
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

fn print_instr(out: &mut String, instr: &Instruction, indent: usize) {
    use Instruction as I;
    let pad = "  ".repeat(indent);
    match instr {
        I::Block(body) => {
            let _ = write!(out, "\n{pad}(block");
            for i in body {
                print_instr(out, i, indent + 1);
            }
            out.push(')');
        }
        I::Loop(body) => {
            let _ = write!(out, "\n{pad}(loop");
            for i in body {
                print_instr(out, i, indent + 1);
            }
            out.push(')');
        }
        I::If { then_body, else_body } => {
            let _ = write!(out, "\n{pad}(if\n{pad}  (then");
            for i in then_body {
                print_instr(out, i, indent + 2);
            }
            out.push(')');
            if !else_body.is_empty() {
                let _ = write!(out, "\n{pad}  (else");
                for i in else_body {
                    print_instr(out, i, indent + 2);
                }
                out.push(')');
            }
            out.push(')');
        }
        plain => {
            let _ = write!(out, "\n{pad}({})", plain_text(plain));
        }
    }
}

fn plain_text(instr: &Instruction) -> String {
    use Instruction as I;
    let mem = |name: &str, offset: u32| -> String {
        if offset == 0 {
            name.to_string()
        } else {
            format!("{name} offset={offset}")
        }
    };
    match instr {
        I::I32Const(v) => format!("i32.const {v}"),
        I::I64Const(v) => format!("i64.const {v}"),
        I::I32Bin(op) => format!("i32.{}", op.as_str()),
        I::I64Bin(op) => format!("i64.{}", op.as_str()),
        I::I32Eqz => "i32.eqz".into(),
        I::I32Cmp(op) => format!("i32.{}", op.as_str()),
        I::I64ExtendI32U => "i64.extend_i32_u".into(),
        I::I32WrapI64 => "i32.wrap_i64".into(),
        I::LocalGet(i) => format!("local.get {i}"),
        I::LocalSet(i) => format!("local.set {i}"),
        I::LocalTee(i) => format!("local.tee {i}"),
        I::GlobalGet(i) => format!("global.get {i}"),
        I::GlobalSet(i) => format!("global.set {i}"),
        I::I32Load { offset } => mem("i32.load", *offset),
        I::I64Load { offset } => mem("i64.load", *offset),
        I::I32Load8U { offset } => mem("i32.load8_u", *offset),
        I::I32Store { offset } => mem("i32.store", *offset),
        I::I64Store { offset } => mem("i64.store", *offset),
        I::I32Store8 { offset } => mem("i32.store8", *offset),
        I::I32AtomicLoad { offset } => mem("i32.atomic.load", *offset),
        I::I32AtomicStore { offset } => mem("i32.atomic.store", *offset),
        I::I32AtomicRmwAdd { offset } => mem("i32.atomic.rmw.add", *offset),
        I::I32AtomicRmwCmpxchg { offset } => mem("i32.atomic.rmw.cmpxchg", *offset),
        I::MemorySize => "memory.size".into(),
        I::MemoryGrow => "memory.grow".into(),
        I::Br(d) => format!("br {d}"),
        I::BrIf(d) => format!("br_if {d}"),
        I::Return => "return".into(),
        I::Call(f) => format!("call {f}"),
        I::Drop => "drop".into(),
        I::Select => "select".into(),
        I::Nop => "nop".into(),
        I::Unreachable => "unreachable".into(),
        I::Block(_) | I::Loop(_) | I::If { .. } => unreachable!("handled by print_instr"),
    }
}
