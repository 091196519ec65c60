use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Purpose of a random stream. Every draw in a run comes from exactly one
/// `(role, index)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[repr(u64)]
pub enum Role {
    TruthRepresentation = 1,
    PretrainHeads = 2,
    TaskHeads = 3,
    PretrainData = 4,
    WeakInit = 5,
    StrongInit = 6,
    WeakPerturb = 7,
    StrongPerturb = 8,
    FinetuneData = 9,
    CeilingData = 10,
    WeakLabelData = 11,
    EvalData = 12,
    HeadInit = 13,
    ProbeData = 14,
    CalibrationLabels = 15,
}

impl Role {
    pub const ALL: [Role; 15] = [
        Role::TruthRepresentation,
        Role::PretrainHeads,
        Role::TaskHeads,
        Role::PretrainData,
        Role::WeakInit,
        Role::StrongInit,
        Role::WeakPerturb,
        Role::StrongPerturb,
        Role::FinetuneData,
        Role::CeilingData,
        Role::WeakLabelData,
        Role::EvalData,
        Role::HeadInit,
        Role::ProbeData,
        Role::CalibrationLabels,
    ];
}

/// Splits one master seed into independent ChaCha8 streams: the stream id is
/// `role << 40 | index`, the key is the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedScheme {
    pub master: u64,
}

impl SeedScheme {
    pub const INDEX_BITS: u32 = 40;

    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn stream_id(role: Role, index: u64) -> u64 {
        debug_assert!(index < 1 << Self::INDEX_BITS);
        (role as u64) << Self::INDEX_BITS | index
    }

    pub fn rng(&self, role: Role, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(Self::stream_id(role, index));
        rng
    }

    /// First word of the stream, for APIs that take a plain seed.
    pub fn sub_seed(&self, role: Role, index: u64) -> u64 {
        self.rng(role, index).next_u64()
    }
}
