//! Dense integer ids for everything the simulator tracks.
//!
//! Keeping ids dense lets hot state live in `Vec`s and keeps iteration order
//! deterministic without ordered maps on the fast path.

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            pub fn idx(self) -> usize {
                self.0 as usize
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// A tenant of the pool.
    UserId
);
id_type!(
    /// A network-task type from the catalog.
    NtId
);
id_type!(
    /// A deployed DAG (unique per deployment).
    DagUid
);
id_type!(
    /// A distinct NT sequence that can occupy one region.
    ChainKindId
);
id_type!(
    /// A live chain instance occupying a region on some NIC.
    InstanceId
);
id_type!(
    /// A reconfigurable region slot on one NIC.
    RegionId
);
id_type!(
    /// One smart NIC in the rack.
    NicId
);

/// Per-run unique packet id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PktId(pub u64);

impl PktId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for PktId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
