//! Device classes shared by the frontend (annotations), the analyzer
//! (affinity decisions), and the topology model.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// The closed set of device classes a thread can be assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceClass {
    Cpu,
    ParallelAccelerator,
    StorageProcessor,
    NetworkProcessor,
}

impl DeviceClass {
    pub const ALL: [DeviceClass; 4] = [
        DeviceClass::Cpu,
        DeviceClass::ParallelAccelerator,
        DeviceClass::StorageProcessor,
        DeviceClass::NetworkProcessor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceClass::Cpu => "cpu",
            DeviceClass::ParallelAccelerator => "parallel_accelerator",
            DeviceClass::StorageProcessor => "storage_processor",
            DeviceClass::NetworkProcessor => "network_processor",
        }
    }
}

impl fmt::Display for DeviceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeviceClass {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cpu" => Ok(DeviceClass::Cpu),
            "parallel_accelerator" => Ok(DeviceClass::ParallelAccelerator),
            "storage_processor" => Ok(DeviceClass::StorageProcessor),
            "network_processor" => Ok(DeviceClass::NetworkProcessor),
            _ => Err(()),
        }
    }
}
