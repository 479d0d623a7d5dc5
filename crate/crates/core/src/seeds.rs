//! Deterministic sub-seed derivation.
//!
//! Every random decision in the workbench draws from a seed derived as
//! `derive_seed(master, stage, index)`. The mixing function is two rounds of
//! the splitmix64 finalizer over `master`, a per-stage constant and a
//! per-item index, so per-item work can run in any order (or in parallel)
//! without changing any stream.

/// Pipeline stages that consume randomness, each with a fixed mixing tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    DatasetSample,
    DatasetSplit,
    ModelInit,
    TrainEpoch,
    SmoothGrad,
    Lime,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::DatasetSample => 0x5441_4c45_0000_0001,
            Stage::DatasetSplit => 0x5441_4c45_0000_0002,
            Stage::ModelInit => 0x5441_4c45_0000_0003,
            Stage::TrainEpoch => 0x5441_4c45_0000_0004,
            Stage::SmoothGrad => 0x5441_4c45_0000_0005,
            Stage::Lime => 0x5441_4c45_0000_0006,
        }
    }
}

/// splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed for `(stage, index)` work under `master`.
pub fn derive_seed(master: u64, stage: Stage, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ stage.tag()) ^ index)
}
