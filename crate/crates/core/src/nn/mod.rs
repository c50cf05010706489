//! Parameter storage, forward sessions and the layer set.

pub mod layers;
pub mod params;

pub use layers::{BatchNorm, Conv2d, Conv3d, ConvTranspose3d, DepthwiseConv2d, LayerNorm, Linear, Mlp};
pub use params::{
    seeded_rng, IndexCache, IndexKey, Init, Mode, Param, ParamBuilder, ParamId, ParamStore, RunningStat, Session,
    StatId, Tape,
};
