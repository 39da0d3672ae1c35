//! In-memory IR of a parsed CFT module. All identifiers are resolved to
//! indices; function names are kept for printing and reports.

use crate::device::DeviceClass;
use serde::Serialize;

/// Size of one linear-memory page, in bytes.
pub const WASM_PAGE_SIZE: u32 = 65536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ValType {
    I32,
    I64,
}

impl ValType {
    pub fn as_str(self) -> &'static str {
        match self {
            ValType::I32 => "i32",
            ValType::I64 => "i64",
        }
    }
}

/// Function signature: up to one result, per the restricted dialect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub params: Vec<ValType>,
    pub result: Option<ValType>,
}

impl Signature {
    pub fn new(params: Vec<ValType>, result: Option<ValType>) -> Self {
        Signature { params, result }
    }

    /// The `(param i32) (result i32)` shape required of "main" and of every
    /// thread-table entry.
    pub fn thread_entry() -> Self {
        Signature::new(vec![ValType::I32], Some(ValType::I32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryDecl {
    pub shared: bool,
    pub min_pages: u32,
    pub max_pages: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Import {
    pub namespace: String,
    pub name: String,
    pub sig: Signature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstValue {
    I32(i32),
    I64(i64),
}

impl ConstValue {
    pub fn ty(self) -> ValType {
        match self {
            ConstValue::I32(_) => ValType::I32,
            ConstValue::I64(_) => ValType::I64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalDecl {
    pub mutable: bool,
    pub ty: ValType,
    pub init: ConstValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuncDef {
    pub name: Option<String>,
    pub sig: Signature,
    pub locals: Vec<ValType>,
    pub body: Vec<Instruction>,
    /// `(thread <class>)` annotation, if any.
    pub hint: Option<DeviceClass>,
}

/// Integer binary operators shared by the i32 and i64 shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntBinOp {
    Add,
    Sub,
    Mul,
    DivU,
    RemU,
    And,
    Or,
    Xor,
    Shl,
    ShrU,
}

impl IntBinOp {
    pub const ALL: [IntBinOp; 10] = [
        IntBinOp::Add,
        IntBinOp::Sub,
        IntBinOp::Mul,
        IntBinOp::DivU,
        IntBinOp::RemU,
        IntBinOp::And,
        IntBinOp::Or,
        IntBinOp::Xor,
        IntBinOp::Shl,
        IntBinOp::ShrU,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IntBinOp::Add => "add",
            IntBinOp::Sub => "sub",
            IntBinOp::Mul => "mul",
            IntBinOp::DivU => "div_u",
            IntBinOp::RemU => "rem_u",
            IntBinOp::And => "and",
            IntBinOp::Or => "or",
            IntBinOp::Xor => "xor",
            IntBinOp::Shl => "shl",
            IntBinOp::ShrU => "shr_u",
        }
    }
}

/// i32 comparison operators (`eqz` is separate: it is unary).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntCmpOp {
    Eq,
    Ne,
    LtU,
    LtS,
    GtU,
    GeU,
}

impl IntCmpOp {
    pub const ALL: [IntCmpOp; 6] = [
        IntCmpOp::Eq,
        IntCmpOp::Ne,
        IntCmpOp::LtU,
        IntCmpOp::LtS,
        IntCmpOp::GtU,
        IntCmpOp::GeU,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IntCmpOp::Eq => "eq",
            IntCmpOp::Ne => "ne",
            IntCmpOp::LtU => "lt_u",
            IntCmpOp::LtS => "lt_s",
            IntCmpOp::GtU => "gt_u",
            IntCmpOp::GeU => "ge_u",
        }
    }
}

/// The closed instruction set. Any opcode outside this set is a parse error.
///
/// Control is structured: `block`, `loop` and `if` carry their bodies, and
/// the terminating `end` of the text format is implicit in the tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instruction {
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
    I32Load { offset: u32 },
    I64Load { offset: u32 },
    I32Load8U { offset: u32 },
    I32Store { offset: u32 },
    I64Store { offset: u32 },
    I32Store8 { offset: u32 },
    I32AtomicLoad { offset: u32 },
    I32AtomicStore { offset: u32 },
    I32AtomicRmwAdd { offset: u32 },
    I32AtomicRmwCmpxchg { offset: u32 },
    MemorySize,
    MemoryGrow,
    Block(Vec<Instruction>),
    Loop(Vec<Instruction>),
    If {
        then_body: Vec<Instruction>,
        else_body: Vec<Instruction>,
    },
    Br(u32),
    BrIf(u32),
    Return,
    Call(u32),
    Drop,
    Select,
    Nop,
    Unreachable,
}

impl Instruction {
    /// True for the non-atomic loads/stores.
    pub fn is_plain_memory_op(&self) -> bool {
        matches!(
            self,
            Instruction::I32Load { .. }
                | Instruction::I64Load { .. }
                | Instruction::I32Load8U { .. }
                | Instruction::I32Store { .. }
                | Instruction::I64Store { .. }
                | Instruction::I32Store8 { .. }
        )
    }

    pub fn is_atomic_op(&self) -> bool {
        matches!(
            self,
            Instruction::I32AtomicLoad { .. }
                | Instruction::I32AtomicStore { .. }
                | Instruction::I32AtomicRmwAdd { .. }
                | Instruction::I32AtomicRmwCmpxchg { .. }
        )
    }

    /// Arithmetic/compare opcodes (conversions are not counted).
    pub fn is_arith_op(&self) -> bool {
        matches!(
            self,
            Instruction::I32Bin(_)
                | Instruction::I64Bin(_)
                | Instruction::I32Eqz
                | Instruction::I32Cmp(_)
        )
    }
}

/// Parsed, resolved module. Function index space is unified: imports come
/// first, defined functions follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    pub memories: Vec<MemoryDecl>,
    pub imports: Vec<Import>,
    pub globals: Vec<GlobalDecl>,
    pub functions: Vec<FuncDef>,
    /// Spawnable entry points, in declaration order; indices into the unified
    /// function space (always defined functions).
    pub threads: Vec<u32>,
    /// Export name -> function index, in declaration order; names unique.
    pub exports: Vec<(String, u32)>,
}

impl Module {
    pub fn num_funcs(&self) -> u32 {
        (self.imports.len() + self.functions.len()) as u32
    }

    pub fn is_import(&self, func: u32) -> bool {
        (func as usize) < self.imports.len()
    }

    pub fn import(&self, func: u32) -> Option<&Import> {
        self.imports.get(func as usize)
    }

    /// The defined function behind a unified index, if it is not an import.
    pub fn defined(&self, func: u32) -> Option<&FuncDef> {
        let idx = (func as usize).checked_sub(self.imports.len())?;
        self.functions.get(idx)
    }

    pub fn func_sig(&self, func: u32) -> Option<&Signature> {
        if self.is_import(func) {
            self.import(func).map(|i| &i.sig)
        } else {
            self.defined(func).map(|f| &f.sig)
        }
    }

    /// Unified index of the function exported as "main".
    pub fn main_func(&self) -> Option<u32> {
        self.exports
            .iter()
            .find(|(name, _)| name == "main")
            .map(|&(_, idx)| idx)
    }

    /// Display name for a function index: its `$name` without the sigil, the
    /// import's `ns.name`, or `func<idx>`.
    pub fn func_display_name(&self, func: u32) -> String {
        if let Some(imp) = self.import(func) {
            return format!("{}.{}", imp.namespace, imp.name);
        }
        match self.defined(func).and_then(|f| f.name.clone()) {
            Some(name) => name,
            None => format!("func{func}"),
        }
    }
}
