//! Compilation of the tree-shaped instruction IR into flat code with
//! resolved jump targets, so thread execution can be suspended and resumed
//! at any instruction boundary (quantum scheduling).
//!
//! `counted: false` ops are structural artifacts (the jump that skips an
//! else-arm, the implicit return at the end of a body); they execute for
//! free and do not appear in instruction counts. Statically dead code
//! (after `br`/`return`/`unreachable`, until the enclosing block closes)
//! is skipped entirely: it can never execute or be branched into.

use crate::cft::{FuncDef, Instruction, IntBinOp, IntCmpOp, Module, ValType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LoadKind {
    I32,
    I64,
    I32_8U,
}

impl LoadKind {
    pub fn width(self) -> u32 {
        match self {
            LoadKind::I32 => 4,
            LoadKind::I64 => 8,
            LoadKind::I32_8U => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StoreKind {
    I32,
    I64,
    I32_8,
}

impl StoreKind {
    pub fn width(self) -> u32 {
        match self {
            StoreKind::I32 => 4,
            StoreKind::I64 => 8,
            StoreKind::I32_8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum FlatOp {
    I32Const(i32),
    I64Const(i64),
    I32Bin(IntBinOp),
    I64Bin(IntBinOp),
    I32Eqz,
    I32Cmp(IntCmpOp),
    I64ExtendI32U,
    I32WrapI64,
    LocalGet(u32),
    LocalSet(u32),
    LocalTee(u32),
    GlobalGet(u32),
    GlobalSet(u32),
    Load { kind: LoadKind, offset: u32 },
    Store { kind: StoreKind, offset: u32 },
    AtomicLoad { offset: u32 },
    AtomicStore { offset: u32 },
    AtomicRmwAdd { offset: u32 },
    AtomicRmwCmpxchg { offset: u32 },
    MemorySize,
    MemoryGrow,
    /// Branch: jump to `target`, truncating the frame's value stack to
    /// `height` slots above its base.
    Br { target: u32, height: u32 },
    BrIf { target: u32, height: u32 },
    /// Jump when the popped condition is zero (compiled from `if`).
    BrIfZero { target: u32, height: u32 },
    /// Structural forward jump (end of a then-arm); never counted.
    Jump { target: u32 },
    Return { counted: bool },
    Call(u32),
    Drop,
    Select,
    Nop,
    Unreachable,
}

impl FlatOp {
    /// Does executing this op count toward instruction counts and compute
    /// cost?
    pub fn counted(self) -> bool {
        match self {
            FlatOp::Jump { .. } => false,
            FlatOp::Return { counted } => counted,
            _ => true,
        }
    }
}

#[derive(Debug)]
pub(crate) struct FlatFunc {
    pub code: Vec<FlatOp>,
    /// Parameter types followed by declared local types.
    pub local_types: Vec<ValType>,
    pub num_params: u32,
    pub result: Option<ValType>,
}

#[derive(Debug)]
pub(crate) struct FlatModule {
    /// Indexed by unified function index; `None` for imports.
    funcs: Vec<Option<FlatFunc>>,
}

impl FlatModule {
    pub fn compile(module: &Module) -> FlatModule {
        let mut funcs = Vec::with_capacity(module.num_funcs() as usize);
        for _ in &module.imports {
            funcs.push(None);
        }
        for func in &module.functions {
            funcs.push(Some(compile_func(module, func)));
        }
        FlatModule { funcs }
    }

    pub fn func(&self, idx: u32) -> &FlatFunc {
        self.funcs[idx as usize].as_ref().expect("defined function")
    }
}

enum LabelKind {
    /// Branches jump forward; target patched when the label closes.
    Forward { patches: Vec<usize> },
    /// A loop: branches jump back to its first instruction.
    Backward { start: usize },
}

struct Label {
    kind: LabelKind,
    entry_height: u32,
}

struct Compiler<'m> {
    module: &'m Module,
    code: Vec<FlatOp>,
    labels: Vec<Label>,
    height: u32,
}

fn compile_func(module: &Module, func: &FuncDef) -> FlatFunc {
    let mut local_types = func.sig.params.clone();
    local_types.extend_from_slice(&func.locals);
    let mut compiler = Compiler { module, code: Vec::new(), labels: Vec::new(), height: 0 };
    compiler.labels.push(Label { kind: LabelKind::Forward { patches: Vec::new() }, entry_height: 0 });
    compiler.emit_body(&func.body);
    // Function-level label: branches to it compile to Return, so any patches
    // would be a compiler bug; the implicit end always returns.
    compiler.code.push(FlatOp::Return { counted: false });
    FlatFunc {
        code: compiler.code,
        local_types,
        num_params: func.sig.params.len() as u32,
        result: func.sig.result,
    }
}

impl Compiler<'_> {
    /// Emits a body region. Returns whether the end of the region is
    /// statically reachable by falling through.
    fn emit_body(&mut self, body: &[Instruction]) -> bool {
        use Instruction as I;
        let mut alive = true;
        for instr in body {
            if !alive {
                break; // statically dead; cannot execute or be branched into
            }
            match instr {
                I::Block(inner) => {
                    self.labels.push(Label {
                        kind: LabelKind::Forward { patches: Vec::new() },
                        entry_height: self.height,
                    });
                    let inner_alive = self.emit_body(inner);
                    let label = self.labels.pop().expect("block label");
                    let LabelKind::Forward { patches } = label.kind else { unreachable!() };
                    let branched_to = !patches.is_empty();
                    self.patch(patches);
                    self.height = label.entry_height;
                    alive = inner_alive || branched_to;
                }
                I::Loop(inner) => {
                    let entry = self.height;
                    self.labels.push(Label {
                        kind: LabelKind::Backward { start: self.code.len() },
                        entry_height: entry,
                    });
                    let inner_alive = self.emit_body(inner);
                    self.labels.pop();
                    self.height = entry; // loops are void
                    alive = inner_alive; // a loop only exits by falling through
                }
                I::If { then_body, else_body } => {
                    self.height = self.height.saturating_sub(1); // condition
                    let entry = self.height;
                    self.labels.push(Label {
                        kind: LabelKind::Forward { patches: Vec::new() },
                        entry_height: entry,
                    });
                    let test_at = self.code.len();
                    self.code.push(FlatOp::BrIfZero { target: u32::MAX, height: entry });
                    let then_alive = self.emit_body(then_body);
                    let mut else_alive = true;
                    if else_body.is_empty() {
                        // no else: the false path falls to the end label
                        if let Some(Label { kind: LabelKind::Forward { patches }, .. }) =
                            self.labels.last_mut()
                        {
                            patches.push(test_at);
                        }
                    } else {
                        if then_alive {
                            let jump_at = self.code.len();
                            self.code.push(FlatOp::Jump { target: u32::MAX });
                            if let Some(Label { kind: LabelKind::Forward { patches }, .. }) =
                                self.labels.last_mut()
                            {
                                patches.push(jump_at);
                            }
                        }
                        let else_start = self.code.len() as u32;
                        set_target(&mut self.code[test_at], else_start);
                        self.height = entry;
                        else_alive = self.emit_body(else_body);
                    }
                    let label = self.labels.pop().expect("if label");
                    let LabelKind::Forward { patches } = label.kind else { unreachable!() };
                    let branched_to = !patches.is_empty();
                    self.patch(patches);
                    self.height = entry;
                    alive = then_alive || else_alive || branched_to;
                }
                I::Br(depth) => {
                    self.emit_branch(*depth, BranchFlavor::Unconditional);
                    alive = false;
                }
                I::BrIf(depth) => {
                    self.height = self.height.saturating_sub(1); // condition
                    self.emit_branch(*depth, BranchFlavor::Conditional);
                }
                I::Return => {
                    self.code.push(FlatOp::Return { counted: true });
                    alive = false;
                }
                I::Unreachable => {
                    self.code.push(FlatOp::Unreachable);
                    alive = false;
                }
                plain => self.emit_plain(plain),
            }
        }
        alive
    }

    fn emit_branch(&mut self, depth: u32, flavor: BranchFlavor) {
        let Some(slot) = self.labels.len().checked_sub(1 + depth as usize) else {
            // Unvalidated input: a branch deeper than the nesting. Compile to
            // a trap so execution stays total.
            self.code.push(FlatOp::Unreachable);
            return;
        };
        if slot == 0 {
            // the function-level label: branching to it returns
            match flavor {
                BranchFlavor::Unconditional => self.code.push(FlatOp::Return { counted: true }),
                BranchFlavor::Conditional => {
                    // br_if to the function label: skip the return when the
                    // condition is zero. The BrIfZero is the counted br_if.
                    let test_at = self.code.len();
                    self.code.push(FlatOp::BrIfZero { target: u32::MAX, height: self.height });
                    self.code.push(FlatOp::Return { counted: false });
                    let after = self.code.len() as u32;
                    set_target(&mut self.code[test_at], after);
                }
            }
            return;
        }
        let entry_height = self.labels[slot].entry_height;
        let op_at = self.code.len();
        match &mut self.labels[slot].kind {
            LabelKind::Backward { start } => {
                let target = *start as u32;
                self.code.push(match flavor {
                    BranchFlavor::Unconditional => FlatOp::Br { target, height: entry_height },
                    BranchFlavor::Conditional => FlatOp::BrIf { target, height: entry_height },
                });
            }
            LabelKind::Forward { patches } => {
                patches.push(op_at);
                self.code.push(match flavor {
                    BranchFlavor::Unconditional => {
                        FlatOp::Br { target: u32::MAX, height: entry_height }
                    }
                    BranchFlavor::Conditional => {
                        FlatOp::BrIf { target: u32::MAX, height: entry_height }
                    }
                });
            }
        }
    }

    fn emit_plain(&mut self, instr: &Instruction) {
        use Instruction as I;
        let (op, delta): (FlatOp, i32) = match instr {
            I::I32Const(v) => (FlatOp::I32Const(*v), 1),
            I::I64Const(v) => (FlatOp::I64Const(*v), 1),
            I::I32Bin(op) => (FlatOp::I32Bin(*op), -1),
            I::I64Bin(op) => (FlatOp::I64Bin(*op), -1),
            I::I32Eqz => (FlatOp::I32Eqz, 0),
            I::I32Cmp(op) => (FlatOp::I32Cmp(*op), -1),
            I::I64ExtendI32U => (FlatOp::I64ExtendI32U, 0),
            I::I32WrapI64 => (FlatOp::I32WrapI64, 0),
            I::LocalGet(i) => (FlatOp::LocalGet(*i), 1),
            I::LocalSet(i) => (FlatOp::LocalSet(*i), -1),
            I::LocalTee(i) => (FlatOp::LocalTee(*i), 0),
            I::GlobalGet(i) => (FlatOp::GlobalGet(*i), 1),
            I::GlobalSet(i) => (FlatOp::GlobalSet(*i), -1),
            I::I32Load { offset } => (FlatOp::Load { kind: LoadKind::I32, offset: *offset }, 0),
            I::I64Load { offset } => (FlatOp::Load { kind: LoadKind::I64, offset: *offset }, 0),
            I::I32Load8U { offset } => {
                (FlatOp::Load { kind: LoadKind::I32_8U, offset: *offset }, 0)
            }
            I::I32Store { offset } => (FlatOp::Store { kind: StoreKind::I32, offset: *offset }, -2),
            I::I64Store { offset } => (FlatOp::Store { kind: StoreKind::I64, offset: *offset }, -2),
            I::I32Store8 { offset } => {
                (FlatOp::Store { kind: StoreKind::I32_8, offset: *offset }, -2)
            }
            I::I32AtomicLoad { offset } => (FlatOp::AtomicLoad { offset: *offset }, 0),
            I::I32AtomicStore { offset } => (FlatOp::AtomicStore { offset: *offset }, -2),
            I::I32AtomicRmwAdd { offset } => (FlatOp::AtomicRmwAdd { offset: *offset }, -1),
            I::I32AtomicRmwCmpxchg { offset } => (FlatOp::AtomicRmwCmpxchg { offset: *offset }, -2),
            I::MemorySize => (FlatOp::MemorySize, 1),
            I::MemoryGrow => (FlatOp::MemoryGrow, 0),
            I::Call(f) => {
                let delta = match self.module.func_sig(*f) {
                    Some(sig) => sig.result.is_some() as i32 - sig.params.len() as i32,
                    None => 0, // unresolved: compiled, rejected by validation
                };
                (FlatOp::Call(*f), delta)
            }
            I::Drop => (FlatOp::Drop, -1),
            I::Select => (FlatOp::Select, -2),
            I::Nop => (FlatOp::Nop, 0),
            I::Unreachable | I::Return | I::Br(_) | I::BrIf(_) | I::Block(_) | I::Loop(_)
            | I::If { .. } => unreachable!("handled in emit_body"),
        };
        self.code.push(op);
        self.height = self.height.saturating_add_signed(delta);
    }

    fn patch(&mut self, patches: Vec<usize>) {
        let target = self.code.len() as u32;
        for at in patches {
            set_target(&mut self.code[at], target);
        }
    }
}

enum BranchFlavor {
    Unconditional,
    Conditional,
}

fn set_target(op: &mut FlatOp, new_target: u32) {
    match op {
        FlatOp::Br { target, .. }
        | FlatOp::BrIf { target, .. }
        | FlatOp::BrIfZero { target, .. }
        | FlatOp::Jump { target } => *target = new_target,
        _ => unreachable!("not a jump"),
    }
}
