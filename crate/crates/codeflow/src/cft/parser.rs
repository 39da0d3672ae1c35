//! Recursive-descent parser from CFT source text to the resolved [`Module`] IR.
//!
//! Parsing is total: any input yields either a `Module` or a located error.
//! Identifier resolution (functions, globals, locals) happens here; stack and
//! branch-depth checking is `validate_module`'s job.

use super::ast::*;
use super::lexer::{lex, Token, TokenKind};
use crate::device::DeviceClass;
use crate::host_api;
use std::collections::HashMap;

/// Nesting cap for S-expressions, so hostile input cannot overflow the
/// parser's own stack.
const MAX_NESTING: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("{line}:{col}: syntax error: {message}")]
    Syntax { line: u32, col: u32, message: String },
    #[error("{line}:{col}: unknown opcode '{opcode}'")]
    UnknownOpcode { line: u32, col: u32, opcode: String },
    #[error("{line}:{col}: unknown import \"{namespace}\" \"{name}\": {reason}")]
    UnknownImport {
        line: u32,
        col: u32,
        namespace: String,
        name: String,
        reason: String,
    },
    #[error("{line}:{col}: duplicate export \"{name}\"")]
    DuplicateExport { line: u32, col: u32, name: String },
    #[error("module error: {message}")]
    Module { message: String },
}

impl ParseError {
    pub(super) fn syntax(line: u32, col: u32, message: impl Into<String>) -> Self {
        ParseError::Syntax { line, col, message: message.into() }
    }

    fn module(message: impl Into<String>) -> Self {
        ParseError::Module { message: message.into() }
    }
}

/// One node of the S-expression tree, with source position.
enum Sx {
    List(Vec<Sx>, u32, u32),
    Word(String, u32, u32),
    Id(String, u32, u32),
    Str(String, u32, u32),
}

impl Sx {
    fn pos(&self) -> (u32, u32) {
        match self {
            Sx::List(_, l, c) | Sx::Word(_, l, c) | Sx::Id(_, l, c) | Sx::Str(_, l, c) => (*l, *c),
        }
    }

    fn word(&self) -> Option<&str> {
        match self {
            Sx::Word(w, _, _) => Some(w),
            _ => None,
        }
    }
}

fn build_tree(tokens: Vec<Token>) -> Result<Vec<Sx>, ParseError> {
    let mut stack: Vec<(Vec<Sx>, u32, u32)> = Vec::new();
    let mut top: Vec<Sx> = Vec::new();
    for tok in tokens {
        match tok.kind {
            TokenKind::LParen => {
                if stack.len() >= MAX_NESTING {
                    return Err(ParseError::syntax(tok.line, tok.col, "nesting too deep"));
                }
                stack.push((Vec::new(), tok.line, tok.col));
            }
            TokenKind::RParen => {
                let (items, line, col) = stack
                    .pop()
                    .ok_or_else(|| ParseError::syntax(tok.line, tok.col, "unmatched ')'"))?;
                let sx = Sx::List(items, line, col);
                match stack.last_mut() {
                    Some((parent, _, _)) => parent.push(sx),
                    None => top.push(sx),
                }
            }
            kind => {
                let sx = match kind {
                    TokenKind::Word(w) => Sx::Word(w, tok.line, tok.col),
                    TokenKind::Id(i) => Sx::Id(i, tok.line, tok.col),
                    TokenKind::Str(s) => Sx::Str(s, tok.line, tok.col),
                    _ => unreachable!(),
                };
                match stack.last_mut() {
                    Some((parent, _, _)) => parent.push(sx),
                    None => top.push(sx),
                }
            }
        }
    }
    if let Some((_, line, col)) = stack.pop() {
        return Err(ParseError::syntax(line, col, "unclosed '('"));
    }
    Ok(top)
}

/// Parse CFT source text into a fully resolved [`Module`].
pub fn parse_module(text: &str) -> Result<Module, ParseError> {
    let tokens = lex(text)?;
    let top = build_tree(tokens)?;
    let module_sx = match top.as_slice() {
        [Sx::List(items, line, col)] => (items.as_slice(), *line, *col),
        [] => return Err(ParseError::syntax(1, 1, "expected (module ...)")),
        [first, ..] => {
            let (l, c) = if top.len() > 1 { top[1].pos() } else { first.pos() };
            if top.len() > 1 {
                return Err(ParseError::syntax(l, c, "unexpected content after (module ...)"));
            }
            let (l, c) = first.pos();
            return Err(ParseError::syntax(l, c, "expected (module ...)"));
        }
    };
    let (items, line, col) = module_sx;
    match items.first() {
        Some(head) if head.word() == Some("module") => {}
        _ => return Err(ParseError::syntax(line, col, "expected (module ...)")),
    }
    let fields = &items[1..];
    Parser::new().parse(fields)
}

#[derive(Default)]
struct Parser {
    func_names: HashMap<String, u32>,
    global_names: HashMap<String, u32>,
    num_imports: u32,
    num_defined: u32,
    num_globals: u32,
}

impl Parser {
    fn new() -> Self {
        Parser::default()
    }

    fn parse(mut self, fields: &[Sx]) -> Result<Module, ParseError> {
        self.collect_decls(fields)?;

        let mut module = Module {
            memories: Vec::new(),
            imports: Vec::new(),
            globals: Vec::new(),
            functions: Vec::new(),
            threads: Vec::new(),
            exports: Vec::new(),
        };
        let mut saw_threads = false;
        // Thread/export targets may be declared before the functions they
        // reference; resolve signatures after all fields are parsed.
        let mut pending_threads: Vec<(u32, u32, u32)> = Vec::new();
        let mut pending_exports: Vec<(String, u32, u32, u32)> = Vec::new();

        for field in fields {
            let Sx::List(items, line, col) = field else {
                let (l, c) = field.pos();
                return Err(ParseError::syntax(l, c, "expected a (...) module field"));
            };
            let head = items
                .first()
                .and_then(Sx::word)
                .ok_or_else(|| ParseError::syntax(*line, *col, "empty module field"))?;
            let rest = &items[1..];
            match head {
                "memory" => {
                    if !module.memories.is_empty() {
                        return Err(ParseError::syntax(*line, *col, "multiple memories"));
                    }
                    module.memories.push(self.parse_memory(rest, *line, *col)?);
                }
                "import" => module.imports.push(self.parse_import(rest, *line, *col)?),
                "global" => module.globals.push(self.parse_global(rest, *line, *col)?),
                "func" => module.functions.push(self.parse_func(rest, *line, *col)?),
                "threads" => {
                    if saw_threads {
                        return Err(ParseError::syntax(*line, *col, "multiple (threads ...) tables"));
                    }
                    saw_threads = true;
                    for entry in rest {
                        let idx = self.resolve_funcref(entry)?;
                        let (l, c) = entry.pos();
                        pending_threads.push((idx, l, c));
                    }
                }
                "export" => {
                    let (name, idx, l, c) = self.parse_export(rest, *line, *col)?;
                    if pending_exports.iter().any(|(n, _, _, _)| *n == name) {
                        return Err(ParseError::DuplicateExport { line: l, col: c, name });
                    }
                    pending_exports.push((name, idx, l, c));
                }
                other => {
                    return Err(ParseError::syntax(
                        *line,
                        *col,
                        format!("unknown module field '{other}'"),
                    ));
                }
            }
        }

        for (idx, l, c) in pending_threads {
            let Some(def) = funcref_defined(idx, self.num_imports) else {
                return Err(ParseError::syntax(
                    l,
                    c,
                    "thread table entry must reference a defined function",
                ));
            };
            if module.functions[def].sig != Signature::thread_entry() {
                return Err(ParseError::syntax(
                    l,
                    c,
                    "thread entry must have signature (param i32) (result i32)",
                ));
            }
            module.threads.push(idx);
        }
        for (name, idx, l, c) in pending_exports {
            if funcref_defined(idx, self.num_imports).is_none() {
                return Err(ParseError::syntax(l, c, "export must reference a defined function"));
            }
            module.exports.push((name, idx));
        }

        // Structural contract of parse_module: exactly one memory, and a
        // well-typed "main" export. Everything else is validate_module's job.
        if module.memories.is_empty() {
            return Err(ParseError::module("module requires exactly one (memory ...)"));
        }
        let Some(main) = module.main_func() else {
            return Err(ParseError::module("missing \"main\" export"));
        };
        let sig = module.func_sig(main).expect("export resolved");
        if *sig != Signature::thread_entry() {
            return Err(ParseError::module(
                "\"main\" must have signature (param i32) (result i32)",
            ));
        }
        Ok(module)
    }

    /// First pass: assign indices to imports, functions and globals so bodies
    /// can forward-reference by `$name`.
    fn collect_decls(&mut self, fields: &[Sx]) -> Result<(), ParseError> {
        // imports occupy the front of the unified function index space
        for field in fields {
            let Sx::List(items, _, _) = field else { continue };
            match items.first().and_then(Sx::word) {
                Some("import") => {
                    // shape checked in the second pass; pick up `$id` if present
                    if let Some(Sx::List(fitems, _, _)) = items.get(3) {
                        if fitems.first().and_then(Sx::word) == Some("func") {
                            if let Some(Sx::Id(id, l, c)) = fitems.get(1) {
                                self.declare_func(id, *l, *c, self.num_imports)?;
                            }
                        }
                    }
                    self.num_imports += 1;
                }
                _ => continue,
            }
        }
        for field in fields {
            let Sx::List(items, _, _) = field else { continue };
            match items.first().and_then(Sx::word) {
                Some("func") => {
                    let idx = self.num_imports + self.num_defined;
                    if let Some(Sx::Id(id, l, c)) = items.get(1) {
                        self.declare_func(id, *l, *c, idx)?;
                    }
                    self.num_defined += 1;
                }
                Some("global") => {
                    let idx = self.num_globals;
                    if let Some(Sx::Id(id, l, c)) = items.get(1) {
                        if self.global_names.insert(id.clone(), idx).is_some() {
                            return Err(ParseError::syntax(
                                *l,
                                *c,
                                format!("duplicate global identifier ${id}"),
                            ));
                        }
                    }
                    self.num_globals += 1;
                }
                _ => continue,
            }
        }
        Ok(())
    }

    fn declare_func(&mut self, id: &str, line: u32, col: u32, idx: u32) -> Result<(), ParseError> {
        if self.func_names.insert(id.to_string(), idx).is_some() {
            return Err(ParseError::syntax(
                line,
                col,
                format!("duplicate function identifier ${id}"),
            ));
        }
        Ok(())
    }

    fn parse_memory(&self, rest: &[Sx], line: u32, col: u32) -> Result<MemoryDecl, ParseError> {
        let mut it = rest.iter();
        match it.next() {
            Some(sx) if sx.word() == Some("shared") => {}
            _ => {
                return Err(ParseError::syntax(
                    line,
                    col,
                    "memory must be declared (memory shared <min> [<max>])",
                ))
            }
        }
        let min_sx = it
            .next()
            .ok_or_else(|| ParseError::syntax(line, col, "memory requires min pages"))?;
        let min_pages = parse_u32_atom(min_sx, "min pages")?;
        let max_pages = match it.next() {
            Some(sx) => parse_u32_atom(sx, "max pages")?,
            None => min_pages,
        };
        if let Some(extra) = it.next() {
            let (l, c) = extra.pos();
            return Err(ParseError::syntax(l, c, "unexpected token in (memory ...)"));
        }
        if min_pages < 1 {
            return Err(ParseError::syntax(line, col, "memory min pages must be >= 1"));
        }
        if max_pages < min_pages {
            return Err(ParseError::syntax(line, col, "memory max pages must be >= min pages"));
        }
        Ok(MemoryDecl { shared: true, min_pages, max_pages })
    }

    fn parse_import(&self, rest: &[Sx], line: u32, col: u32) -> Result<Import, ParseError> {
        let [ns_sx, name_sx, desc_sx] = rest else {
            return Err(ParseError::syntax(
                line,
                col,
                "import must be (import \"ns\" \"name\" (func ...))",
            ));
        };
        let (Sx::Str(namespace, _, _), Sx::Str(name, _, _)) = (ns_sx, name_sx) else {
            return Err(ParseError::syntax(line, col, "import namespace/name must be strings"));
        };
        let Sx::List(fitems, fline, fcol) = desc_sx else {
            let (l, c) = desc_sx.pos();
            return Err(ParseError::syntax(l, c, "import descriptor must be (func ...)"));
        };
        if fitems.first().and_then(Sx::word) != Some("func") {
            return Err(ParseError::syntax(*fline, *fcol, "only function imports are supported"));
        }
        let mut idx = 1;
        if matches!(fitems.get(1), Some(Sx::Id(..))) {
            idx = 2; // optional $id, registered in the first pass
        }
        let (sig, consumed) = self.parse_signature(&fitems[idx..], *fline, *fcol)?;
        if idx + consumed != fitems.len() {
            let (l, c) = fitems[idx + consumed].pos();
            return Err(ParseError::syntax(l, c, "unexpected token in import descriptor"));
        }
        let unknown = |reason: &str| ParseError::UnknownImport {
            line: *fline,
            col: *fcol,
            namespace: namespace.clone(),
            name: name.clone(),
            reason: reason.to_string(),
        };
        let Some(host) = host_api::lookup(namespace, name) else {
            return Err(unknown("not in the host-function registry"));
        };
        if host.signature() != sig {
            return Err(unknown("signature does not match the registry"));
        }
        Ok(Import { namespace: namespace.clone(), name: name.clone(), sig })
    }

    /// Parses `(param ...)* (result t)?`; returns the signature and how many
    /// items were consumed. Named params (`(param $x i32)`) resolve later via
    /// the local scope assembled by the caller.
    fn parse_signature(&self, items: &[Sx], _line: u32, _col: u32) -> Result<(Signature, usize), ParseError> {
        let mut params = Vec::new();
        let mut result = None;
        let mut consumed = 0;
        for sx in items {
            let Sx::List(sub, l, c) = sx else { break };
            match sub.first().and_then(Sx::word) {
                Some("param") => {
                    if result.is_some() {
                        return Err(ParseError::syntax(*l, *c, "(param ...) after (result ...)"));
                    }
                    for ty_sx in &sub[1..] {
                        if matches!(ty_sx, Sx::Id(..)) {
                            continue; // named param; type follows
                        }
                        params.push(parse_valtype(ty_sx)?);
                    }
                }
                Some("result") => {
                    if result.is_some() {
                        return Err(ParseError::syntax(*l, *c, "multiple (result ...)"));
                    }
                    let [ty_sx] = &sub[1..] else {
                        return Err(ParseError::syntax(*l, *c, "result must name exactly one type"));
                    };
                    result = Some(parse_valtype(ty_sx)?);
                }
                _ => break,
            }
            consumed += 1;
        }
        Ok((Signature { params, result }, consumed))
    }

    fn parse_global(&self, rest: &[Sx], line: u32, col: u32) -> Result<GlobalDecl, ParseError> {
        let mut idx = 0;
        if matches!(rest.first(), Some(Sx::Id(..))) {
            idx = 1;
        }
        let ty_sx = rest
            .get(idx)
            .ok_or_else(|| ParseError::syntax(line, col, "global requires a type"))?;
        let (mutable, ty) = match ty_sx {
            Sx::List(sub, l, c) => {
                if sub.first().and_then(Sx::word) != Some("mut") || sub.len() != 2 {
                    return Err(ParseError::syntax(*l, *c, "expected (mut <type>)"));
                }
                (true, parse_valtype(&sub[1])?)
            }
            other => (false, parse_valtype(other)?),
        };
        let init_sx = rest
            .get(idx + 1)
            .ok_or_else(|| ParseError::syntax(line, col, "global requires an init constant"))?;
        let Sx::List(sub, l, c) = init_sx else {
            let (l, c) = init_sx.pos();
            return Err(ParseError::syntax(l, c, "global init must be (i32.const n) or (i64.const n)"));
        };
        let init = match (sub.first().and_then(Sx::word), sub.get(1)) {
            (Some("i32.const"), Some(v)) if sub.len() == 2 => ConstValue::I32(parse_i32_atom(v)?),
            (Some("i64.const"), Some(v)) if sub.len() == 2 => ConstValue::I64(parse_i64_atom(v)?),
            _ => return Err(ParseError::syntax(*l, *c, "global init must be (i32.const n) or (i64.const n)")),
        };
        if init.ty() != ty {
            return Err(ParseError::syntax(*l, *c, "global init type does not match declared type"));
        }
        if rest.len() != idx + 2 {
            let (l, c) = rest[idx + 2].pos();
            return Err(ParseError::syntax(l, c, "unexpected token in (global ...)"));
        }
        Ok(GlobalDecl { mutable, ty, init })
    }

    fn parse_func(&self, rest: &[Sx], line: u32, col: u32) -> Result<FuncDef, ParseError> {
        let mut idx = 0;
        let mut name = None;
        if let Some(Sx::Id(id, _, _)) = rest.first() {
            name = Some(id.clone());
            idx = 1;
        }

        // optional (thread <class>) annotation
        let mut hint = None;
        if let Some(Sx::List(sub, l, c)) = rest.get(idx) {
            if sub.first().and_then(Sx::word) == Some("thread") {
                let [_, class_sx] = sub.as_slice() else {
                    return Err(ParseError::syntax(*l, *c, "annotation must be (thread <class>)"));
                };
                let word = class_sx
                    .word()
                    .ok_or_else(|| ParseError::syntax(*l, *c, "annotation must name a device class"))?;
                let class: DeviceClass = word.parse().map_err(|()| {
                    let (cl, cc) = class_sx.pos();
                    ParseError::syntax(cl, cc, format!("unknown device class '{word}'"))
                })?;
                hint = Some(class);
                idx += 1;
            }
        }

        // params / result, collecting param names for the local scope
        let mut local_names: HashMap<String, u32> = HashMap::new();
        let mut params = Vec::new();
        let mut result = None;
        let mut locals = Vec::new();
        let mut seen_result = false;
        let mut seen_local = false;
        while let Some(Sx::List(sub, l, c)) = rest.get(idx) {
            match sub.first().and_then(Sx::word) {
                Some("param") => {
                    if seen_result || seen_local {
                        return Err(ParseError::syntax(*l, *c, "(param ...) must precede (result ...) and (local ...)"));
                    }
                    self.parse_binding_group(sub, &mut params, &mut local_names, 0)?;
                }
                Some("result") => {
                    if seen_result {
                        return Err(ParseError::syntax(*l, *c, "multiple (result ...)"));
                    }
                    if seen_local {
                        return Err(ParseError::syntax(*l, *c, "(result ...) must precede (local ...)"));
                    }
                    seen_result = true;
                    let [ty_sx] = &sub[1..] else {
                        return Err(ParseError::syntax(*l, *c, "result must name exactly one type"));
                    };
                    result = Some(parse_valtype(ty_sx)?);
                }
                Some("local") => {
                    seen_local = true;
                    let base = params.len() as u32;
                    self.parse_binding_group(sub, &mut locals, &mut local_names, base)?;
                }
                _ => break,
            }
            idx += 1;
        }

        let sig = Signature { params, result };
        let scope = BodyScope {
            parser: self,
            local_names,
            num_locals: (sig.params.len() + locals.len()) as u32,
        };
        let body = scope.parse_body(&rest[idx..], line, col, 0)?;

        Ok(FuncDef { name, sig, locals, body, hint })
    }

    /// One `(param ...)` / `(local ...)` group: either anonymous types or a
    /// single `$name type` pair.
    fn parse_binding_group(
        &self,
        sub: &[Sx],
        out: &mut Vec<ValType>,
        names: &mut HashMap<String, u32>,
        base: u32,
    ) -> Result<(), ParseError> {
        let mut i = 1;
        while i < sub.len() {
            if let Sx::Id(id, l, c) = &sub[i] {
                let ty_sx = sub.get(i + 1).ok_or_else(|| {
                    ParseError::syntax(*l, *c, format!("named binding ${id} requires a type"))
                })?;
                let ty = parse_valtype(ty_sx)?;
                let idx = base + out.len() as u32;
                if names.insert(id.clone(), idx).is_some() {
                    return Err(ParseError::syntax(*l, *c, format!("duplicate local identifier ${id}")));
                }
                out.push(ty);
                i += 2;
            } else {
                out.push(parse_valtype(&sub[i])?);
                i += 1;
            }
        }
        Ok(())
    }

    fn parse_export(&self, rest: &[Sx], line: u32, col: u32) -> Result<(String, u32, u32, u32), ParseError> {
        let [name_sx, desc_sx] = rest else {
            return Err(ParseError::syntax(line, col, "export must be (export \"name\" (func ref))"));
        };
        let Sx::Str(name, nl, nc) = name_sx else {
            let (l, c) = name_sx.pos();
            return Err(ParseError::syntax(l, c, "export name must be a string"));
        };
        let Sx::List(sub, l, c) = desc_sx else {
            let (l, c) = desc_sx.pos();
            return Err(ParseError::syntax(l, c, "export descriptor must be (func ref)"));
        };
        if sub.first().and_then(Sx::word) != Some("func") || sub.len() != 2 {
            return Err(ParseError::syntax(*l, *c, "export descriptor must be (func ref)"));
        }
        let idx = self.resolve_funcref(&sub[1])?;
        Ok((name.clone(), idx, *nl, *nc))
    }

    fn resolve_funcref(&self, sx: &Sx) -> Result<u32, ParseError> {
        match sx {
            Sx::Id(id, l, c) => self.func_names.get(id).copied().ok_or_else(|| {
                ParseError::syntax(*l, *c, format!("unknown function ${id}"))
            }),
            other => {
                let idx = parse_u32_atom(other, "function index")?;
                if idx >= self.num_imports + self.num_defined {
                    let (l, c) = other.pos();
                    return Err(ParseError::syntax(l, c, format!("function index {idx} out of range")));
                }
                Ok(idx)
            }
        }
    }

    fn resolve_globalref(&self, sx: &Sx) -> Result<u32, ParseError> {
        match sx {
            Sx::Id(id, l, c) => self.global_names.get(id).copied().ok_or_else(|| {
                ParseError::syntax(*l, *c, format!("unknown global ${id}"))
            }),
            other => {
                let idx = parse_u32_atom(other, "global index")?;
                if idx >= self.num_globals {
                    let (l, c) = other.pos();
                    return Err(ParseError::syntax(l, c, format!("global index {idx} out of range")));
                }
                Ok(idx)
            }
        }
    }
}

struct BodyScope<'a> {
    parser: &'a Parser,
    local_names: HashMap<String, u32>,
    num_locals: u32,
}

impl BodyScope<'_> {
    fn parse_body(&self, items: &[Sx], _line: u32, _col: u32, depth: usize) -> Result<Vec<Instruction>, ParseError> {
        items.iter().map(|sx| self.parse_instr(sx, depth)).collect()
    }

    fn parse_instr(&self, sx: &Sx, depth: usize) -> Result<Instruction, ParseError> {
        let Sx::List(items, line, col) = sx else {
            let (l, c) = sx.pos();
            return Err(ParseError::syntax(l, c, "expected an (opcode ...) instruction"));
        };
        let head = items
            .first()
            .and_then(Sx::word)
            .ok_or_else(|| ParseError::syntax(*line, *col, "empty instruction"))?;
        let rest = &items[1..];
        let (line, col) = (*line, *col);

        match head {
            "block" => Ok(Instruction::Block(self.parse_body(rest, line, col, depth + 1)?)),
            "loop" => Ok(Instruction::Loop(self.parse_body(rest, line, col, depth + 1)?)),
            "if" => {
                let Some(Sx::List(then_items, tl, tc)) = rest.first() else {
                    return Err(ParseError::syntax(line, col, "if requires a (then ...) arm"));
                };
                if then_items.first().and_then(Sx::word) != Some("then") {
                    return Err(ParseError::syntax(*tl, *tc, "if requires a (then ...) arm"));
                }
                let then_body = self.parse_body(&then_items[1..], *tl, *tc, depth + 1)?;
                let else_body = match rest.get(1) {
                    None => Vec::new(),
                    Some(Sx::List(else_items, el, ec))
                        if else_items.first().and_then(Sx::word) == Some("else") =>
                    {
                        self.parse_body(&else_items[1..], *el, *ec, depth + 1)?
                    }
                    Some(other) => {
                        let (l, c) = other.pos();
                        return Err(ParseError::syntax(l, c, "expected (else ...) arm"));
                    }
                };
                if rest.len() > 2 {
                    let (l, c) = rest[2].pos();
                    return Err(ParseError::syntax(l, c, "unexpected token after (else ...)"));
                }
                Ok(Instruction::If { then_body, else_body })
            }
            _ => {
                let instr = self.parse_plain(head, rest, line, col)?;
                Ok(instr)
            }
        }
    }

    fn parse_plain(&self, head: &str, rest: &[Sx], line: u32, col: u32) -> Result<Instruction, ParseError> {
        use Instruction as I;

        let no_imm = |instr: I| -> Result<I, ParseError> {
            if let Some(extra) = rest.first() {
                let (l, c) = extra.pos();
                return Err(ParseError::syntax(l, c, format!("'{head}' takes no immediate")));
            }
            Ok(instr)
        };
        let one = || -> Result<&Sx, ParseError> {
            match rest {
                [imm] => Ok(imm),
                _ => Err(ParseError::syntax(line, col, format!("'{head}' takes exactly one immediate"))),
            }
        };

        // i32.<binop> / i64.<binop>
        if let Some(op) = head.strip_prefix("i32.").and_then(binop_of) {
            return no_imm(I::I32Bin(op));
        }
        if let Some(op) = head.strip_prefix("i64.").and_then(binop_of) {
            return no_imm(I::I64Bin(op));
        }
        if let Some(op) = head.strip_prefix("i32.").and_then(cmpop_of) {
            return no_imm(I::I32Cmp(op));
        }

        match head {
            "i32.const" => Ok(I::I32Const(parse_i32_atom(one()?)?)),
            "i64.const" => Ok(I::I64Const(parse_i64_atom(one()?)?)),
            "i32.eqz" => no_imm(I::I32Eqz),
            "i64.extend_i32_u" => no_imm(I::I64ExtendI32U),
            "i32.wrap_i64" => no_imm(I::I32WrapI64),
            "local.get" => Ok(I::LocalGet(self.resolve_localref(one()?)?)),
            "local.set" => Ok(I::LocalSet(self.resolve_localref(one()?)?)),
            "local.tee" => Ok(I::LocalTee(self.resolve_localref(one()?)?)),
            "global.get" => Ok(I::GlobalGet(self.parser.resolve_globalref(one()?)?)),
            "global.set" => Ok(I::GlobalSet(self.parser.resolve_globalref(one()?)?)),
            "i32.load" => Ok(I::I32Load { offset: self.parse_offset(rest, line, col)? }),
            "i64.load" => Ok(I::I64Load { offset: self.parse_offset(rest, line, col)? }),
            "i32.load8_u" => Ok(I::I32Load8U { offset: self.parse_offset(rest, line, col)? }),
            "i32.store" => Ok(I::I32Store { offset: self.parse_offset(rest, line, col)? }),
            "i64.store" => Ok(I::I64Store { offset: self.parse_offset(rest, line, col)? }),
            "i32.store8" => Ok(I::I32Store8 { offset: self.parse_offset(rest, line, col)? }),
            "i32.atomic.load" => Ok(I::I32AtomicLoad { offset: self.parse_offset(rest, line, col)? }),
            "i32.atomic.store" => Ok(I::I32AtomicStore { offset: self.parse_offset(rest, line, col)? }),
            "i32.atomic.rmw.add" => Ok(I::I32AtomicRmwAdd { offset: self.parse_offset(rest, line, col)? }),
            "i32.atomic.rmw.cmpxchg" => {
                Ok(I::I32AtomicRmwCmpxchg { offset: self.parse_offset(rest, line, col)? })
            }
            "memory.size" => no_imm(I::MemorySize),
            "memory.grow" => no_imm(I::MemoryGrow),
            "br" => Ok(I::Br(parse_u32_atom(one()?, "branch depth")?)),
            "br_if" => Ok(I::BrIf(parse_u32_atom(one()?, "branch depth")?)),
            "return" => no_imm(I::Return),
            "call" => Ok(I::Call(self.parser.resolve_funcref(one()?)?)),
            "drop" => no_imm(I::Drop),
            "select" => no_imm(I::Select),
            "nop" => no_imm(I::Nop),
            "unreachable" => no_imm(I::Unreachable),
            other => Err(ParseError::UnknownOpcode {
                line,
                col,
                opcode: other.to_string(),
            }),
        }
    }

    fn resolve_localref(&self, sx: &Sx) -> Result<u32, ParseError> {
        match sx {
            Sx::Id(id, l, c) => self.local_names.get(id).copied().ok_or_else(|| {
                ParseError::syntax(*l, *c, format!("unknown local ${id}"))
            }),
            other => {
                let idx = parse_u32_atom(other, "local index")?;
                if idx >= self.num_locals {
                    let (l, c) = other.pos();
                    return Err(ParseError::syntax(l, c, format!("local index {idx} out of range")));
                }
                Ok(idx)
            }
        }
    }

    /// Optional `offset=N` immediate on memory instructions; defaults to 0.
    fn parse_offset(&self, rest: &[Sx], _line: u32, _col: u32) -> Result<u32, ParseError> {
        match rest {
            [] => Ok(0),
            [sx] => {
                let (l, c) = sx.pos();
                let word = sx
                    .word()
                    .ok_or_else(|| ParseError::syntax(l, c, "expected offset=N"))?;
                let num = word
                    .strip_prefix("offset=")
                    .ok_or_else(|| ParseError::syntax(l, c, "expected offset=N"))?;
                parse_u32_str(num, l, c, "offset")
            }
            [_, extra, ..] => {
                let (l, c) = extra.pos();
                Err(ParseError::syntax(l, c, "unexpected extra immediate"))
            }
        }
    }
}

fn funcref_defined(idx: u32, num_imports: u32) -> Option<usize> {
    (idx >= num_imports).then(|| (idx - num_imports) as usize)
}

fn binop_of(name: &str) -> Option<IntBinOp> {
    IntBinOp::ALL.into_iter().find(|op| op.as_str() == name)
}

fn cmpop_of(name: &str) -> Option<IntCmpOp> {
    IntCmpOp::ALL.into_iter().find(|op| op.as_str() == name)
}

fn parse_valtype(sx: &Sx) -> Result<ValType, ParseError> {
    let (l, c) = sx.pos();
    match sx.word() {
        Some("i32") => Ok(ValType::I32),
        Some("i64") => Ok(ValType::I64),
        Some(other) => Err(ParseError::syntax(l, c, format!("unknown value type '{other}'"))),
        None => Err(ParseError::syntax(l, c, "expected a value type")),
    }
}

/// Integer literal: decimal or 0x-hex, optional sign, range-checked into
/// `lo..=hi` on the i128 number line.
fn parse_int(text: &str, lo: i128, hi: i128) -> Option<i128> {
    let (neg, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.strip_prefix('+').unwrap_or(text)),
    };
    let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i128::from_str_radix(hex, 16).ok()?
    } else {
        body.parse::<i128>().ok()?
    };
    if magnitude < 0 {
        return None; // sign handled above; "--1" and "-+1" do not parse
    }
    let value = if neg { -magnitude } else { magnitude };
    (value >= lo && value <= hi).then_some(value)
}

fn atom_word<'a>(sx: &'a Sx, what: &str) -> Result<(&'a str, u32, u32), ParseError> {
    let (l, c) = sx.pos();
    match sx.word() {
        Some(w) => Ok((w, l, c)),
        None => Err(ParseError::syntax(l, c, format!("expected {what}"))),
    }
}

fn parse_u32_atom(sx: &Sx, what: &str) -> Result<u32, ParseError> {
    let (w, l, c) = atom_word(sx, what)?;
    parse_u32_str(w, l, c, what)
}

fn parse_u32_str(text: &str, line: u32, col: u32, what: &str) -> Result<u32, ParseError> {
    parse_int(text, 0, u32::MAX as i128)
        .map(|v| v as u32)
        .ok_or_else(|| ParseError::syntax(line, col, format!("invalid {what} '{text}'")))
}

/// i32 literals accept both signed and unsigned ranges; out-of-range values
/// are errors, unsigned values wrap to the i32 bit pattern.
fn parse_i32_atom(sx: &Sx) -> Result<i32, ParseError> {
    let (w, l, c) = atom_word(sx, "i32 literal")?;
    parse_int(w, i32::MIN as i128, u32::MAX as i128)
        .map(|v| v as u32 as i32)
        .ok_or_else(|| ParseError::syntax(l, c, format!("invalid i32 literal '{w}'")))
}

fn parse_i64_atom(sx: &Sx) -> Result<i64, ParseError> {
    let (w, l, c) = atom_word(sx, "i64 literal")?;
    parse_int(w, i64::MIN as i128, u64::MAX as i128)
        .map(|v| v as u64 as i64)
        .ok_or_else(|| ParseError::syntax(l, c, format!("invalid i64 literal '{w}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cft::print_module;

    const MINIMAL: &str = r#"(module (memory shared 1 1) (func $main (param i32) (result i32) (i32.const 0)) (export "main" (func $main)))"#;

    #[test]
    fn parses_minimal_module() {
        let m = parse_module(MINIMAL).unwrap();
        assert_eq!(m.memories.len(), 1);
        assert_eq!(m.functions.len(), 1);
        assert!(m.threads.is_empty());
        assert_eq!(m.main_func(), Some(0));
        assert_eq!(m.functions[0].body, vec![Instruction::I32Const(0)]);
    }

    #[test]
    fn annotation_attaches_to_function() {
        let src = r#"(module (memory shared 1 1)
            (func $main (thread storage_processor) (param i32) (result i32) (i32.const 0))
            (export "main" (func $main)))"#;
        let m = parse_module(src).unwrap();
        assert_eq!(m.functions[0].hint, Some(DeviceClass::StorageProcessor));
    }

    #[test]
    fn missing_main_is_an_error() {
        let err = parse_module("(module (memory shared 1 1))").unwrap_err();
        assert!(matches!(err, ParseError::Module { .. }), "{err}");
        assert!(err.to_string().contains("main"));
    }

    #[test]
    fn duplicate_export_is_reported() {
        let src = r#"(module (memory shared 1 1)
            (func $main (param i32) (result i32) (i32.const 0))
            (export "main" (func $main))
            (export "main" (func $main)))"#;
        assert!(matches!(parse_module(src).unwrap_err(), ParseError::DuplicateExport { .. }));
    }

    #[test]
    fn unknown_opcode_is_reported_with_position() {
        let src = r#"(module (memory shared 1 1)
            (func $main (param i32) (result i32) (f32.add))
            (export "main" (func $main)))"#;
        match parse_module(src).unwrap_err() {
            ParseError::UnknownOpcode { opcode, line, .. } => {
                assert_eq!(opcode, "f32.add");
                assert_eq!(line, 2);
            }
            other => panic!("expected UnknownOpcode, got {other}"),
        }
    }

    #[test]
    fn unknown_import_and_signature_mismatch() {
        let src = r#"(module (memory shared 1 1)
            (import "wasi" "nope" (func (param i32) (result i32)))
            (func $main (param i32) (result i32) (i32.const 0))
            (export "main" (func $main)))"#;
        assert!(matches!(parse_module(src).unwrap_err(), ParseError::UnknownImport { .. }));

        let src = r#"(module (memory shared 1 1)
            (import "wasi" "fd_read" (func (param i32) (result i32)))
            (func $main (param i32) (result i32) (i32.const 0))
            (export "main" (func $main)))"#;
        match parse_module(src).unwrap_err() {
            ParseError::UnknownImport { reason, .. } => assert!(reason.contains("signature")),
            other => panic!("expected UnknownImport, got {other}"),
        }
    }

    #[test]
    fn memory_shape_is_enforced() {
        for bad in [
            "(module (func $main (param i32) (result i32) (i32.const 0)) (export \"main\" (func $main)))",
            "(module (memory 1 1))",
            "(module (memory shared 0 1))",
            "(module (memory shared 2 1))",
            "(module (memory shared 1 1) (memory shared 1 1))",
        ] {
            assert!(parse_module(bad).is_err(), "accepted: {bad}");
        }
        // max defaults to min
        let m = parse_module(
            r#"(module (memory shared 3)
                (func $main (param i32) (result i32) (i32.const 0))
                (export "main" (func $main)))"#,
        )
        .unwrap();
        assert_eq!((m.memories[0].min_pages, m.memories[0].max_pages), (3, 3));
    }

    #[test]
    fn threads_resolve_and_check_signatures() {
        let src = r#"(module (memory shared 1 1)
            (func $w (param i32) (result i32) (local.get 0))
            (func $main (param i32) (result i32) (i32.const 0))
            (threads $w $w)
            (export "main" (func $main)))"#;
        let m = parse_module(src).unwrap();
        assert_eq!(m.threads, vec![0, 0]);

        let bad_sig = r#"(module (memory shared 1 1)
            (func $w (param i32 i32) (result i32) (i32.const 0))
            (func $main (param i32) (result i32) (i32.const 0))
            (threads $w)
            (export "main" (func $main)))"#;
        assert!(parse_module(bad_sig).is_err());

        let import_entry = r#"(module (memory shared 1 1)
            (import "codeflow" "join" (func $join (param i32) (result i32)))
            (func $main (param i32) (result i32) (i32.const 0))
            (threads $join)
            (export "main" (func $main)))"#;
        assert!(parse_module(import_entry).is_err());
    }

    #[test]
    fn named_locals_and_offsets() {
        let src = r#"(module (memory shared 1 1)
            (func $main (param $arg i32) (result i32) (local $x i32)
              (local.get $arg)
              (local.set $x)
              (local.get $x)
              (i32.load offset=4))
            (export "main" (func $main)))"#;
        let m = parse_module(src).unwrap();
        let body = &m.functions[0].body;
        assert_eq!(body[0], Instruction::LocalGet(0));
        assert_eq!(body[1], Instruction::LocalSet(1));
        assert_eq!(body[3], Instruction::I32Load { offset: 4 });
    }

    #[test]
    fn numeric_literals() {
        let src = r#"(module (memory shared 1 1)
            (func $main (param i32) (result i32)
              (i32.const -1)
              (drop)
              (i32.const 0xffffffff)
              (drop)
              (i64.const -0x10)
              (drop)
              (i32.const 0))
            (export "main" (func $main)))"#;
        let m = parse_module(src).unwrap();
        assert_eq!(m.functions[0].body[0], Instruction::I32Const(-1));
        assert_eq!(m.functions[0].body[2], Instruction::I32Const(-1));
        assert_eq!(m.functions[0].body[4], Instruction::I64Const(-16));

        let overflow = r#"(module (memory shared 1 1)
            (func $main (param i32) (result i32) (i32.const 4294967296))
            (export "main" (func $main)))"#;
        assert!(parse_module(overflow).is_err());
    }

    #[test]
    fn out_of_range_indices_fail_to_parse() {
        for body in ["(local.get 1)", "(global.get 0)", "(call 9)"] {
            let src = format!(
                r#"(module (memory shared 1 1)
                    (func $main (param i32) (result i32) {body} (i32.const 0))
                    (export "main" (func $main)))"#
            );
            assert!(parse_module(&src).is_err(), "accepted: {body}");
        }
    }

    #[test]
    fn control_forms_parse() {
        let src = r#"(module (memory shared 1 1)
            (func $main (param i32) (result i32)
              (block
                (loop
                  (local.get 0)
                  (br_if 1)
                  (br 0)))
              (local.get 0)
              (if
                (then (nop))
                (else (nop)))
              (i32.const 0))
            (export "main" (func $main)))"#;
        let m = parse_module(src).unwrap();
        let body = &m.functions[0].body;
        assert!(matches!(&body[0], Instruction::Block(inner) if matches!(&inner[0], Instruction::Loop(_))));
        assert!(matches!(&body[2], Instruction::If { .. }));
    }

    #[test]
    fn deep_nesting_is_rejected_not_crashing() {
        let mut src = String::from("(module ");
        for _ in 0..10_000 {
            src.push_str("(block ");
        }
        let err = parse_module(&src).unwrap_err();
        assert!(matches!(err, ParseError::Syntax { .. }));
    }

    #[test]
    fn mutual_recursion_forward_references() {
        let src = r#"(module (memory shared 1 1)
            (func $a (param i32) (result i32) (local.get 0) (call $b))
            (func $b (param i32) (result i32) (local.get 0) (call $a))
            (func $main (param i32) (result i32) (i32.const 0) (call $a))
            (export "main" (func $main)))"#;
        let m = parse_module(src).unwrap();
        assert_eq!(m.functions[0].body[1], Instruction::Call(1));
        assert_eq!(m.functions[1].body[1], Instruction::Call(0));
    }

    #[test]
    fn globals_parse_and_resolve() {
        let src = r#"(module (memory shared 1 1)
            (global $g (mut i32) (i32.const 7))
            (global i64 (i64.const -1))
            (func $main (param i32) (result i32) (global.get $g) (global.set 0) (i32.const 0))
            (export "main" (func $main)))"#;
        let m = parse_module(src).unwrap();
        assert_eq!(m.globals.len(), 2);
        assert!(m.globals[0].mutable);
        assert_eq!(m.globals[0].init, ConstValue::I32(7));
        assert!(!m.globals[1].mutable);
        assert_eq!(m.functions[0].body[0], Instruction::GlobalGet(0));
    }

    #[test]
    fn pretty_print_round_trips() {
        let src = r#"(module (memory shared 2 4)
            (import "wasi" "fd_read" (func $fd_read (param i32 i32 i32 i32) (result i32)))
            (global $g (mut i32) (i32.const 3))
            (func $w (thread network_processor) (param i32) (result i32) (local i32 i64)
              (block (loop (local.get 0) (br_if 1) (br 0)))
              (local.get 0)
              (if (then (global.get 0) (drop)) (else (nop)))
              (i32.load offset=8))
            (func $main (param i32) (result i32)
              (i32.const 1) (i32.const 2) (call $fd_read) (drop) (drop) (i32.const 0))
            (threads $w)
            (export "main" (func $main))
            (export "aux" (func $w)))"#;
        let m = parse_module(src).unwrap();
        let printed = print_module(&m);
        let reparsed = parse_module(&printed).unwrap_or_else(|e| panic!("reparse failed: {e}\n{printed}"));
        assert_eq!(m, reparsed, "round-trip mismatch:\n{printed}");
    }
}
