//! Parameter storage and the small set of layers the networks share.

mod layers;
mod params;
mod report;

pub use layers::{group_count, timestep_embedding, Conv, GroupNorm, Linear, Rank, ResBlock};
pub use params::{scalar, Builder, Init, ParamStore};
pub use report::StageReport;
