//! Structural and stack-discipline validation over an arbitrary [`Module`]
//! value. Findings are data, not failures: modules with error-severity
//! findings are rejected by the runtime, not by this function.
//!
//! Blocks are void in this dialect (no block params/results), which keeps
//! the checker small; unreachable code is handled with the usual polymorphic
//! stack so code after `br`/`return`/`unreachable` does not cascade errors.

use super::ast::*;
use crate::host_api;
use serde::Serialize;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

/// Rule identifiers carried by findings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[allow(clippy::upper_case_acronyms)]
pub enum RuleId {
    #[serde(rename = "MEMORY_COUNT")]
    MemoryCount,
    #[serde(rename = "MEMORY_NOT_SHARED")]
    MemoryNotShared,
    #[serde(rename = "BAD_MEMORY_LIMITS")]
    BadMemoryLimits,
    #[serde(rename = "UNKNOWN_IMPORT")]
    UnknownImport,
    #[serde(rename = "BAD_GLOBAL_INIT")]
    BadGlobalInit,
    #[serde(rename = "MISSING_MAIN")]
    MissingMain,
    #[serde(rename = "BAD_MAIN_SIGNATURE")]
    BadMainSignature,
    #[serde(rename = "BAD_THREAD_REF")]
    BadThreadRef,
    #[serde(rename = "BAD_THREAD_SIGNATURE")]
    BadThreadSignature,
    #[serde(rename = "BAD_EXPORT_REF")]
    BadExportRef,
    #[serde(rename = "DUPLICATE_EXPORT")]
    DuplicateExport,
    #[serde(rename = "UNRESOLVED_CALL")]
    UnresolvedCall,
    #[serde(rename = "BAD_LOCAL_INDEX")]
    BadLocalIndex,
    #[serde(rename = "BAD_GLOBAL_INDEX")]
    BadGlobalIndex,
    #[serde(rename = "IMMUTABLE_GLOBAL")]
    ImmutableGlobal,
    #[serde(rename = "BAD_BRANCH_DEPTH")]
    BadBranchDepth,
    #[serde(rename = "STACK_UNDERFLOW")]
    StackUnderflow,
    #[serde(rename = "TYPE_MISMATCH")]
    TypeMismatch,
}

/// Where a finding points: a function (by unified index) and, for body
/// findings, the pre-order ordinal of the offending instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Location {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub func: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instr: Option<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Finding {
    pub rule: RuleId,
    pub severity: Severity,
    pub location: Location,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.rule)?;
        if let Some(func) = self.location.func {
            write!(f, " [func {func}")?;
            if let Some(instr) = self.location.instr {
                write!(f, ", instr {instr}")?;
            }
            write!(f, "]")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Error)
    }

    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has_rule(&self, rule: RuleId) -> bool {
        self.findings.iter().any(|f| f.rule == rule)
    }
}

pub fn validate_module(module: &Module) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut push = |rule, location, message: String| {
        report.findings.push(Finding { rule, severity: Severity::Error, location, message });
    };
    let here = Location::default();

    if module.memories.len() != 1 {
        push(
            RuleId::MemoryCount,
            here,
            format!("module requires exactly one memory, found {}", module.memories.len()),
        );
    }
    for mem in &module.memories {
        if !mem.shared {
            push(RuleId::MemoryNotShared, here, "memory must be shared".into());
        }
        if mem.min_pages < 1 || mem.max_pages < mem.min_pages {
            push(
                RuleId::BadMemoryLimits,
                here,
                format!("bad memory limits {}..{}", mem.min_pages, mem.max_pages),
            );
        }
    }

    for (i, imp) in module.imports.iter().enumerate() {
        let loc = Location { func: Some(i as u32), instr: None };
        match host_api::lookup(&imp.namespace, &imp.name) {
            None => push(
                RuleId::UnknownImport,
                loc,
                format!("{}.{} is not in the host-function registry", imp.namespace, imp.name),
            ),
            Some(host) if host.signature() != imp.sig => push(
                RuleId::UnknownImport,
                loc,
                format!("{}.{} signature mismatch", imp.namespace, imp.name),
            ),
            Some(_) => {}
        }
    }

    for (i, global) in module.globals.iter().enumerate() {
        if global.init.ty() != global.ty {
            push(
                RuleId::BadGlobalInit,
                here,
                format!("global {i} init type does not match declared type"),
            );
        }
    }

    match module.main_func() {
        None => push(RuleId::MissingMain, here, "missing \"main\" export".into()),
        Some(main) => match module.func_sig(main) {
            Some(sig) if *sig == Signature::thread_entry() && !module.is_import(main) => {}
            Some(_) => push(
                RuleId::BadMainSignature,
                Location { func: Some(main), instr: None },
                "\"main\" must be a defined function with signature (param i32) (result i32)".into(),
            ),
            None => {} // dangling export reported below
        },
    }

    for &entry in &module.threads {
        let loc = Location { func: Some(entry), instr: None };
        if module.defined(entry).is_none() {
            push(RuleId::BadThreadRef, loc, format!("thread entry {entry} is not a defined function"));
        } else if module.func_sig(entry) != Some(&Signature::thread_entry()) {
            push(
                RuleId::BadThreadSignature,
                loc,
                format!("thread entry {entry} must have signature (param i32) (result i32)"),
            );
        }
    }

    for (i, (name, idx)) in module.exports.iter().enumerate() {
        if module.defined(*idx).is_none() {
            push(
                RuleId::BadExportRef,
                Location { func: Some(*idx), instr: None },
                format!("export \"{name}\" does not reference a defined function"),
            );
        }
        if module.exports[..i].iter().any(|(n, _)| n == name) {
            push(RuleId::DuplicateExport, here, format!("duplicate export \"{name}\""));
        }
    }

    for (i, func) in module.functions.iter().enumerate() {
        let func_idx = module.imports.len() as u32 + i as u32;
        BodyChecker::new(module, func, func_idx, &mut report.findings).check();
    }

    report
}

/// `None` = unknown type from a polymorphic (unreachable) stack segment.
type StackTy = Option<ValType>;

struct CtrlFrame {
    entry_height: usize,
    unreachable: bool,
}

struct BodyChecker<'a> {
    module: &'a Module,
    func: &'a FuncDef,
    func_idx: u32,
    findings: &'a mut Vec<Finding>,
    locals: Vec<ValType>,
    vals: Vec<StackTy>,
    ctrls: Vec<CtrlFrame>,
    /// Pre-order ordinal of the instruction currently being checked.
    ordinal: u32,
}

impl<'a> BodyChecker<'a> {
    fn new(
        module: &'a Module,
        func: &'a FuncDef,
        func_idx: u32,
        findings: &'a mut Vec<Finding>,
    ) -> Self {
        let mut locals = func.sig.params.clone();
        locals.extend_from_slice(&func.locals);
        BodyChecker {
            module,
            func,
            func_idx,
            findings,
            locals,
            vals: Vec::new(),
            ctrls: Vec::new(),
            ordinal: 0,
        }
    }

    fn emit(&mut self, rule: RuleId, message: String) {
        self.findings.push(Finding {
            rule,
            severity: Severity::Error,
            location: Location { func: Some(self.func_idx), instr: Some(self.ordinal) },
            message,
        });
    }

    fn check(mut self) {
        self.ctrls.push(CtrlFrame { entry_height: 0, unreachable: false });
        let body: &[Instruction] = self.func.body.as_slice();
        self.check_block(body);
        // implicit end of the function body; the frame stays on the stack so
        // the result pop still sees it
        if !self.ctrls.last().expect("function frame").unreachable {
            if let Some(result) = self.func.sig.result {
                self.pop_expect(Some(result));
            }
            if !self.vals.is_empty() {
                self.emit(
                    RuleId::TypeMismatch,
                    format!("{} extra value(s) at end of function", self.vals.len()),
                );
            }
        }
        self.ctrls.pop();
    }

    fn check_block(&mut self, body: &[Instruction]) {
        for instr in body {
            self.check_instr(instr);
        }
    }

    fn check_instr(&mut self, instr: &Instruction) {
        use Instruction as I;
        use ValType::{I32, I64};
        self.ordinal += 1;

        match instr {
            I::Block(body) | I::Loop(body) => {
                self.push_ctrl();
                self.check_block(body);
                self.pop_ctrl("block");
            }
            I::If { then_body, else_body } => {
                self.pop_expect(Some(I32));
                self.push_ctrl();
                self.check_block(then_body);
                self.pop_ctrl("then arm");
                self.push_ctrl();
                self.check_block(else_body);
                self.pop_ctrl("else arm");
            }
            I::Br(depth) => {
                self.check_branch(*depth, true);
            }
            I::BrIf(depth) => {
                self.pop_expect(Some(I32));
                self.check_branch(*depth, false);
            }
            I::Return => {
                if let Some(result) = self.func.sig.result {
                    self.pop_expect(Some(result));
                }
                self.set_unreachable();
            }
            I::Unreachable => self.set_unreachable(),
            I::Nop => {}
            I::Drop => {
                self.pop_any();
            }
            I::Select => {
                self.pop_expect(Some(I32));
                let a = self.pop_any();
                let b = self.pop_any();
                match (a, b) {
                    (Some(ta), Some(tb)) if ta != tb => {
                        self.emit(RuleId::TypeMismatch, "select operands must match".into());
                        self.push(Some(ta));
                    }
                    (Some(t), _) | (_, Some(t)) => self.push(Some(t)),
                    (None, None) => self.push(None),
                }
            }
            I::Call(target) => {
                let Some(sig) = self.module.func_sig(*target).cloned() else {
                    self.emit(RuleId::UnresolvedCall, format!("call target {target} does not exist"));
                    return;
                };
                for &param in sig.params.iter().rev() {
                    self.pop_expect(Some(param));
                }
                if let Some(result) = sig.result {
                    self.push(Some(result));
                }
            }
            I::I32Const(_) => self.push(Some(I32)),
            I::I64Const(_) => self.push(Some(I64)),
            I::I32Bin(_) => self.bin(I32),
            I::I64Bin(_) => self.bin(I64),
            I::I32Eqz => {
                self.pop_expect(Some(I32));
                self.push(Some(I32));
            }
            I::I32Cmp(_) => self.bin(I32),
            I::I64ExtendI32U => {
                self.pop_expect(Some(I32));
                self.push(Some(I64));
            }
            I::I32WrapI64 => {
                self.pop_expect(Some(I64));
                self.push(Some(I32));
            }
            I::LocalGet(idx) => {
                let ty = self.local_ty(*idx);
                self.push(ty);
            }
            I::LocalSet(idx) => {
                let ty = self.local_ty(*idx);
                self.pop_expect(ty);
            }
            I::LocalTee(idx) => {
                let ty = self.local_ty(*idx);
                self.pop_expect(ty);
                self.push(ty);
            }
            I::GlobalGet(idx) => {
                let ty = self.global_ty(*idx, false);
                self.push(ty);
            }
            I::GlobalSet(idx) => {
                let ty = self.global_ty(*idx, true);
                self.pop_expect(ty);
            }
            I::I32Load { .. } | I::I32Load8U { .. } | I::I32AtomicLoad { .. } => {
                self.pop_expect(Some(I32));
                self.push(Some(I32));
            }
            I::I64Load { .. } => {
                self.pop_expect(Some(I32));
                self.push(Some(I64));
            }
            I::I32Store { .. } | I::I32Store8 { .. } | I::I32AtomicStore { .. } => {
                self.pop_expect(Some(I32));
                self.pop_expect(Some(I32));
            }
            I::I64Store { .. } => {
                self.pop_expect(Some(I64));
                self.pop_expect(Some(I32));
            }
            I::I32AtomicRmwAdd { .. } => {
                self.pop_expect(Some(I32));
                self.pop_expect(Some(I32));
                self.push(Some(I32));
            }
            I::I32AtomicRmwCmpxchg { .. } => {
                self.pop_expect(Some(I32));
                self.pop_expect(Some(I32));
                self.pop_expect(Some(I32));
                self.push(Some(I32));
            }
            I::MemorySize => self.push(Some(I32)),
            I::MemoryGrow => {
                self.pop_expect(Some(I32));
                self.push(Some(I32));
            }
        }
    }

    /// Branch to `depth` labels out. The outermost frame is the function
    /// itself; branching to it is a return.
    fn check_branch(&mut self, depth: u32, unconditional: bool) {
        if depth as usize >= self.ctrls.len() {
            self.emit(
                RuleId::BadBranchDepth,
                format!("branch depth {depth} exceeds nesting depth {}", self.ctrls.len()),
            );
            if unconditional {
                self.set_unreachable();
            }
            return;
        }
        let is_function_frame = depth as usize == self.ctrls.len() - 1;
        if is_function_frame {
            if let Some(result) = self.func.sig.result {
                self.pop_expect(Some(result));
                if !unconditional {
                    self.push(Some(result));
                }
            }
        }
        // inner labels are void: no values transferred
        if unconditional {
            self.set_unreachable();
        }
    }

    /// Two operands of `ty`, one result of `ty` (compares are i32-only, so
    /// their i32 result coincides).
    fn bin(&mut self, ty: ValType) {
        self.pop_expect(Some(ty));
        self.pop_expect(Some(ty));
        self.push(Some(ty));
    }

    fn push_ctrl(&mut self) {
        self.ctrls.push(CtrlFrame { entry_height: self.vals.len(), unreachable: false });
    }

    fn pop_ctrl(&mut self, what: &str) {
        let frame = self.ctrls.pop().expect("control frame");
        if !frame.unreachable && self.vals.len() != frame.entry_height {
            self.emit(
                RuleId::TypeMismatch,
                format!("{what} must not leave values on the stack"),
            );
        }
        self.vals.truncate(frame.entry_height);
    }

    fn set_unreachable(&mut self) {
        let frame = self.ctrls.last_mut().expect("control frame");
        self.vals.truncate(frame.entry_height);
        frame.unreachable = true;
    }

    fn push(&mut self, ty: StackTy) {
        self.vals.push(ty);
    }

    fn pop_any(&mut self) -> StackTy {
        let frame = self.ctrls.last().expect("control frame");
        if self.vals.len() == frame.entry_height {
            if !frame.unreachable {
                self.emit(RuleId::StackUnderflow, "operand stack underflow".into());
            }
            return None;
        }
        self.vals.pop().expect("height checked")
    }

    fn pop_expect(&mut self, expect: StackTy) -> StackTy {
        let got = self.pop_any();
        if let (Some(e), Some(g)) = (expect, got) {
            if e != g {
                self.emit(
                    RuleId::TypeMismatch,
                    format!("expected {} but found {}", e.as_str(), g.as_str()),
                );
            }
        }
        got
    }

    fn local_ty(&mut self, idx: u32) -> StackTy {
        match self.locals.get(idx as usize) {
            Some(&ty) => Some(ty),
            None => {
                self.emit(RuleId::BadLocalIndex, format!("local index {idx} out of range"));
                None
            }
        }
    }

    fn global_ty(&mut self, idx: u32, needs_mut: bool) -> StackTy {
        match self.module.globals.get(idx as usize) {
            Some(global) => {
                if needs_mut && !global.mutable {
                    self.emit(RuleId::ImmutableGlobal, format!("global {idx} is immutable"));
                }
                Some(global.ty)
            }
            None => {
                self.emit(RuleId::BadGlobalIndex, format!("global index {idx} out of range"));
                None
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cft::parse_module;

    fn minimal() -> Module {
        parse_module(
            r#"(module (memory shared 1 1)
                (func $main (param i32) (result i32) (i32.const 0))
                (export "main" (func $main)))"#,
        )
        .unwrap()
    }

    #[test]
    fn minimal_module_validates_clean() {
        let report = validate_module(&minimal());
        assert!(report.is_empty(), "{:?}", report.findings);
    }

    #[test]
    fn unresolved_call_is_flagged() {
        let mut m = minimal();
        m.functions[0].body = vec![Instruction::Call(42), Instruction::I32Const(0)];
        let report = validate_module(&m);
        assert!(report.has_rule(RuleId::UnresolvedCall));
        assert!(report.has_errors());
    }

    #[test]
    fn branch_depth_exceeding_nesting_is_flagged() {
        let mut m = minimal();
        // br 3 inside a single block: depth 3 > nesting
        m.functions[0].body = vec![
            Instruction::Block(vec![Instruction::Br(3)]),
            Instruction::I32Const(0),
        ];
        let report = validate_module(&m);
        assert!(report.has_rule(RuleId::BadBranchDepth), "{:?}", report.findings);
    }

    #[test]
    fn branch_to_function_label_is_a_return() {
        let mut m = minimal();
        // br 1 from inside one block targets the function frame: needs the
        // i32 result on the stack, which (i32.const 7) provides.
        m.functions[0].body = vec![
            Instruction::Block(vec![Instruction::I32Const(7), Instruction::Br(1)]),
            Instruction::I32Const(0),
        ];
        let report = validate_module(&m);
        assert!(report.is_empty(), "{:?}", report.findings);
    }

    #[test]
    fn stack_underflow_and_type_mismatch() {
        let mut m = minimal();
        m.functions[0].body = vec![Instruction::Drop, Instruction::I32Const(0)];
        assert!(validate_module(&m).has_rule(RuleId::StackUnderflow));

        let mut m = minimal();
        m.functions[0].body = vec![
            Instruction::I64Const(1),
            Instruction::I32Const(1),
            Instruction::I32Bin(IntBinOp::Add),
        ];
        assert!(validate_module(&m).has_rule(RuleId::TypeMismatch));

        let mut m = minimal();
        // function result must be i32, body leaves i64
        m.functions[0].body = vec![Instruction::I64Const(1)];
        assert!(validate_module(&m).has_rule(RuleId::TypeMismatch));

        let mut m = minimal();
        // extra value left on the stack
        m.functions[0].body = vec![Instruction::I32Const(1), Instruction::I32Const(2)];
        assert!(validate_module(&m).has_rule(RuleId::TypeMismatch));
    }

    #[test]
    fn unreachable_code_is_polymorphic() {
        let mut m = minimal();
        // after return, nothing more is required of the stack
        m.functions[0].body = vec![
            Instruction::I32Const(0),
            Instruction::Return,
            Instruction::Drop,
            Instruction::Drop,
        ];
        let report = validate_module(&m);
        assert!(report.is_empty(), "{:?}", report.findings);
    }

    #[test]
    fn local_and_global_index_checks() {
        let mut m = minimal();
        m.functions[0].body = vec![Instruction::LocalGet(5)];
        assert!(validate_module(&m).has_rule(RuleId::BadLocalIndex));

        let mut m = minimal();
        m.functions[0].body = vec![Instruction::GlobalGet(0)];
        assert!(validate_module(&m).has_rule(RuleId::BadGlobalIndex));

        let mut m = minimal();
        m.globals.push(GlobalDecl { mutable: false, ty: ValType::I32, init: ConstValue::I32(0) });
        m.functions[0].body = vec![
            Instruction::I32Const(1),
            Instruction::GlobalSet(0),
            Instruction::I32Const(0),
        ];
        assert!(validate_module(&m).has_rule(RuleId::ImmutableGlobal));
    }

    #[test]
    fn structural_rules_on_hand_built_modules() {
        let mut m = minimal();
        m.memories.clear();
        assert!(validate_module(&m).has_rule(RuleId::MemoryCount));

        let mut m = minimal();
        m.memories[0].shared = false;
        assert!(validate_module(&m).has_rule(RuleId::MemoryNotShared));

        let mut m = minimal();
        m.memories[0].max_pages = 0;
        assert!(validate_module(&m).has_rule(RuleId::BadMemoryLimits));

        let mut m = minimal();
        m.exports.clear();
        assert!(validate_module(&m).has_rule(RuleId::MissingMain));

        let mut m = minimal();
        m.threads.push(7);
        assert!(validate_module(&m).has_rule(RuleId::BadThreadRef));

        let mut m = minimal();
        m.functions[0].sig.params.clear();
        let report = validate_module(&m);
        assert!(report.has_rule(RuleId::BadMainSignature));
    }

    #[test]
    fn findings_carry_locations() {
        let mut m = minimal();
        m.functions[0].body = vec![
            Instruction::Block(vec![Instruction::Call(42)]),
            Instruction::I32Const(0),
        ];
        let report = validate_module(&m);
        let finding = report
            .findings
            .iter()
            .find(|f| f.rule == RuleId::UnresolvedCall)
            .expect("finding present");
        assert_eq!(finding.location.func, Some(0));
        assert_eq!(finding.location.instr, Some(2)); // pre-order: block=1, call=2
    }
}
