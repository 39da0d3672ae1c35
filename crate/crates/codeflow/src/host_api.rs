//! Host-function registry: the closed set of importable functions, with
//! exact signatures. The frontend rejects imports that are not listed here
//! or whose declared signature differs.

use crate::cft::{Signature, ValType};

/// What a host function does, for the analyzer and the engine dispatcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostFuncKind {
    FdRead,
    FdWrite,
    SockSend,
    SockRecv,
    ClockTimeGet,
    ProcExit,
    Spawn,
    Join,
}

pub struct HostFunc {
    pub namespace: &'static str,
    pub name: &'static str,
    pub params: &'static [ValType],
    pub result: Option<ValType>,
    pub kind: HostFuncKind,
}

use ValType::I32;

pub const HOST_FUNCS: &[HostFunc] = &[
    HostFunc {
        namespace: "wasi",
        name: "fd_read",
        params: &[I32, I32, I32, I32],
        result: Some(I32),
        kind: HostFuncKind::FdRead,
    },
    HostFunc {
        namespace: "wasi",
        name: "fd_write",
        params: &[I32, I32, I32, I32],
        result: Some(I32),
        kind: HostFuncKind::FdWrite,
    },
    HostFunc {
        namespace: "wasi",
        name: "sock_send",
        params: &[I32, I32],
        result: Some(I32),
        kind: HostFuncKind::SockSend,
    },
    HostFunc {
        namespace: "wasi",
        name: "sock_recv",
        params: &[I32, I32],
        result: Some(I32),
        kind: HostFuncKind::SockRecv,
    },
    HostFunc {
        namespace: "wasi",
        name: "clock_time_get",
        params: &[I32],
        result: Some(I32),
        kind: HostFuncKind::ClockTimeGet,
    },
    HostFunc {
        namespace: "wasi",
        name: "proc_exit",
        params: &[I32],
        result: None,
        kind: HostFuncKind::ProcExit,
    },
    HostFunc {
        namespace: "codeflow",
        name: "spawn",
        params: &[I32, I32],
        result: Some(I32),
        kind: HostFuncKind::Spawn,
    },
    HostFunc {
        namespace: "codeflow",
        name: "join",
        params: &[I32],
        result: Some(I32),
        kind: HostFuncKind::Join,
    },
];

pub fn lookup(namespace: &str, name: &str) -> Option<&'static HostFunc> {
    HOST_FUNCS
        .iter()
        .find(|f| f.namespace == namespace && f.name == name)
}

impl HostFunc {
    pub fn signature(&self) -> Signature {
        Signature::new(self.params.to_vec(), self.result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lookup() {
        assert!(lookup("wasi", "fd_read").is_some());
        assert!(lookup("codeflow", "spawn").is_some());
        assert!(lookup("wasi", "spawn").is_none());
        assert!(lookup("codeflow", "fd_read").is_none());
    }

    #[test]
    fn signatures_match_registry() {
        let spawn = lookup("codeflow", "spawn").unwrap();
        assert_eq!(spawn.signature(), Signature::new(vec![I32, I32], Some(I32)));
        let exit = lookup("wasi", "proc_exit").unwrap();
        assert_eq!(exit.signature().result, None);
    }
}
