//! Slice-aware volume context mixing: a slice position embedding, an axial
//! MLP pair along the slice axis and the channel axis, and a channel
//! projector over `[slice branch; channel branch; input]`.

use crate::error::TensorError;
use crate::nn::layers::INIT_STD;
use crate::nn::{Init, Linear, ParamBuilder, ParamId, Session};
use crate::tensor::{Real, Var};

#[derive(Clone, Debug)]
pub enum MixKind {
    /// Separate `S → S` and `C → C` maps.
    Axial { slice: Linear, channel: Linear },
    /// One map over the flattened `S·C` column of every position.
    Dense { joint: Linear },
}

#[derive(Clone, Debug)]
pub struct SliceMixer {
    pub slices: usize,
    pub channels: usize,
    /// `[S, 1, C]`, added to every position of slice `s`.
    pub slice_embed: Option<ParamId>,
    pub kind: MixKind,
    pub project: Linear,
}

impl SliceMixer {
    pub fn axial<T: Real>(pb: &mut ParamBuilder<'_, T>, slices: usize, channels: usize, embed: bool) -> Self {
        SliceMixer {
            slices,
            channels,
            slice_embed: embed.then(|| pb.param("ape_s", &[slices, 1, channels], Init::TruncNormal(INIT_STD))),
            kind: MixKind::Axial {
                slice: Linear::new(&mut pb.sub("mlp_st"), slices, slices, true),
                channel: Linear::new(&mut pb.sub("mlp_sc"), channels, channels, true),
            },
            project: Linear::new(&mut pb.sub("mlp_cp"), 3 * channels, channels, true),
        }
    }

    pub fn dense<T: Real>(pb: &mut ParamBuilder<'_, T>, slices: usize, channels: usize, embed: bool) -> Self {
        let width = slices * channels;
        SliceMixer {
            slices,
            channels,
            slice_embed: embed.then(|| pb.param("ape_s", &[slices, 1, channels], Init::TruncNormal(INIT_STD))),
            kind: MixKind::Dense { joint: Linear::new(&mut pb.sub("mlp_dense"), width, width, true) },
            project: Linear::new(&mut pb.sub("mlp_cp"), 2 * channels, channels, true),
        }
    }

    /// `z`: stack `[B·S, h, w, C]`; output has the same shape.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, z: Var, batch: usize) -> Result<Var, TensorError> {
        let sh = s.g.shape(z).to_vec();
        let (sl, c) = (self.slices, self.channels);
        if sh.len() != 4 || sh[0] != batch * sl || sh[3] != c {
            return Err(TensorError::Shape {
                op: "slice_mixing",
                detail: format!("stack {sh:?} vs {batch}×{sl} slices of {c} channels"),
            });
        }
        let hw = sh[1] * sh[2];
        let zr = s.g.reshape(z, &[batch, sl, hw, c])?;
        let a = match self.slice_embed {
            Some(ape) => {
                let e = s.p(ape);
                s.g.add(zr, e)?
            }
            None => zr,
        };
        let mixed = match &self.kind {
            MixKind::Axial { slice, channel } => {
                let t = s.permute(a, &[0, 2, 3, 1])?;
                let t = slice.forward(s, t)?;
                let st = s.permute(t, &[0, 3, 1, 2])?;
                let sc = channel.forward(s, a)?;
                s.g.concat(&[st, sc, zr], 3)?
            }
            MixKind::Dense { joint } => {
                let t = s.permute(a, &[0, 2, 1, 3])?;
                let t = s.g.reshape(t, &[batch, hw, sl * c])?;
                let t = joint.forward(s, t)?;
                let t = s.g.reshape(t, &[batch, hw, sl, c])?;
                let dense = s.permute(t, &[0, 2, 1, 3])?;
                s.g.concat(&[dense, zr], 3)?
            }
        };
        let out = self.project.forward(s, mixed)?;
        s.g.reshape(out, &sh)
    }
}
