//! CFT frontend: parse the CodeFlow Text format into a validated module IR.
//!
//! CFT is a restricted S-expression dialect of the WebAssembly text format;
//! the grammar is documented in `docs/cft.md`. Parsing is pure and reentrant,
//! and a [`Module`] is immutable after construction.

mod ast;
mod lexer;
mod parser;
mod printer;
mod validate;

pub use ast::{
    ConstValue, FuncDef, GlobalDecl, Import, Instruction, IntBinOp, IntCmpOp, MemoryDecl, Module,
    Signature, ValType, WASM_PAGE_SIZE,
};
pub use parser::{parse_module, ParseError};
pub use printer::print_module;
pub use validate::{validate_module, Finding, Location, RuleId, Severity, ValidationReport};
