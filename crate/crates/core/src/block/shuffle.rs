//! Full-view slice spatial shuffle pipeline on one slice stack: a pure
//! window-attention unit followed by a transpose-shuffled one, each
//! `BN → W-MSA (+res) → DWConv5×5 (+res) → BN → MLP (+res)`.

use super::ases::{AsesMode, ChannelGate, SpatialGate};
use crate::attention::{restore_var, shuffle_var, WindowAttention, WindowGrid};
use crate::error::TensorError;
use crate::nn::{BatchNorm, DepthwiseConv2d, Mlp, ParamBuilder, Session};
use crate::tensor::{Real, Var};

pub const DW_KERNEL: usize = 5;

#[derive(Clone, Debug)]
pub struct SubUnit {
    pub shuffled: bool,
    pub attn_norm: BatchNorm,
    pub attn: WindowAttention,
    pub spatial_gate: Option<SpatialGate>,
    pub dwconv: DepthwiseConv2d,
    pub mlp_norm: BatchNorm,
    pub mlp: Mlp,
    pub channel_gate: Option<ChannelGate>,
}

impl SubUnit {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        ases: AsesMode,
        shuffled: bool,
    ) -> Result<Self, TensorError> {
        Ok(SubUnit {
            shuffled,
            attn_norm: BatchNorm::new(&mut pb.sub("attn_norm"), channels),
            attn: WindowAttention::new(&mut pb.sub("attn"), channels, heads, window)?,
            spatial_gate: ases.spatial().then(|| SpatialGate::new(&mut pb.sub("spatial_gate"))),
            dwconv: DepthwiseConv2d::new(&mut pb.sub("dwconv"), channels, DW_KERNEL),
            mlp_norm: BatchNorm::new(&mut pb.sub("mlp_norm"), channels),
            mlp: Mlp::new(&mut pb.sub("mlp"), channels, mlp_ratio),
            channel_gate: ases.channel().then(|| ChannelGate::new(&mut pb.sub("channel_gate"), channels)),
        })
    }

    /// `x`: `[B·S, h, w, C]`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        grid: &WindowGrid,
        batch: usize,
    ) -> Result<Var, TensorError> {
        let zn = self.attn_norm.forward(s, x)?;
        let mut a = if self.shuffled {
            let t = shuffle_var(s, zn, grid)?;
            let a = self.attn.forward(s, t, grid)?;
            restore_var(s, a, grid)?
        } else {
            self.attn.forward(s, zn, grid)?
        };
        if let Some(gate) = &self.spatial_gate {
            let e = gate.forward(s, zn)?;
            a = s.g.mul(a, e)?;
        }
        let x1 = s.g.add(a, x)?;
        let d = self.dwconv.forward(s, x1)?;
        let y = s.g.add(d, x1)?;
        let yn = self.mlp_norm.forward(s, y)?;
        let mut m = self.mlp.forward(s, yn)?;
        if let Some(gate) = &self.channel_gate {
            let e = gate.forward(s, yn, batch)?;
            m = ChannelGate::apply(s, m, e, batch)?;
        }
        s.g.add(m, y)
    }
}

/// Pure unit then shuffled unit. With `shuffle == false` (ablation) the
/// second unit runs without the permutation pair.
#[derive(Clone, Debug)]
pub struct ShuffleBlock {
    pub pure: SubUnit,
    pub shuffled: SubUnit,
}

impl ShuffleBlock {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        ases: AsesMode,
        shuffle: bool,
    ) -> Result<Self, TensorError> {
        Ok(ShuffleBlock {
            pure: SubUnit::new(&mut pb.sub("pure"), channels, heads, window, mlp_ratio, ases, false)?,
            shuffled: SubUnit::new(&mut pb.sub("shuffled"), channels, heads, window, mlp_ratio, ases, shuffle)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        grid: &WindowGrid,
        batch: usize,
    ) -> Result<Var, TensorError> {
        let z = self.pure.forward(s, x, grid, batch)?;
        self.shuffled.forward(s, z, grid, batch)
    }
}
