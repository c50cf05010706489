//! The three slice-stack rearrangements of a channel-last volume
//! `[B, H, W, D, C]`.

use crate::error::TensorError;
use crate::nn::Session;
use crate::tensor::{Real, Tensor, Var};

/// Slice orientation. `Axial` stacks the D slices of (H, W), `Coronal`
/// the W slices of (H, D), `Sagittal` the H slices of (W, D).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Axial,
    Coronal,
    Sagittal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Coronal, View::Sagittal];

    pub fn index(self) -> usize {
        match self {
            View::Axial => 0,
            View::Coronal => 1,
            View::Sagittal => 2,
        }
    }

    /// Axis order taking `[B, H, W, D, C]` to `[B, S, a, b, C]`.
    pub fn perm(self) -> [usize; 5] {
        match self {
            View::Axial => [0, 3, 1, 2, 4],
            View::Coronal => [0, 2, 1, 3, 4],
            View::Sagittal => [0, 1, 2, 3, 4],
        }
    }

    pub fn inverse_perm(self) -> [usize; 5] {
        let p = self.perm();
        let mut inv = [0; 5];
        for (i, &a) in p.iter().enumerate() {
            inv[a] = i;
        }
        inv
    }
}

fn volume_dims(op: &'static str, shape: &[usize]) -> Result<[usize; 5], TensorError> {
    <[usize; 5]>::try_from(shape)
        .map_err(|_| TensorError::Shape { op, detail: format!("expected [B, H, W, D, C], got {shape:?}") })
}

/// `[B, H, W, D, C] -> [B·S, a, b, C]` on the graph.
pub fn rearrange<T: Real>(s: &mut Session<'_, T>, vol: Var, view: View) -> Result<Var, TensorError> {
    let dims = volume_dims("rearrange_views", s.g.shape(vol))?;
    let p = view.perm();
    let y = if view == View::Sagittal { vol } else { s.permute(vol, &p)? };
    s.g.reshape(y, &[dims[0] * dims[p[1]], dims[p[2]], dims[p[3]], dims[4]])
}

/// Inverse of [`rearrange`] for a volume of shape `vol_shape`.
pub fn restore<T: Real>(
    s: &mut Session<'_, T>,
    stack: Var,
    view: View,
    vol_shape: &[usize],
) -> Result<Var, TensorError> {
    let dims = volume_dims("restore_views", vol_shape)?;
    let p = view.perm();
    let permuted: Vec<usize> = p.iter().map(|&a| dims[a]).collect();
    let y = s.g.reshape(stack, &permuted)?;
    if view == View::Sagittal {
        Ok(y)
    } else {
        s.permute(y, &view.inverse_perm())
    }
}

/// The three stacks of a plain volume, in [`View::ALL`] order.
pub fn rearrange_views<T: Real>(vol: &Tensor<T>) -> Result<[Tensor<T>; 3], TensorError> {
    let dims = volume_dims("rearrange_views", vol.shape())?;
    let one = |v: View| -> Result<Tensor<T>, TensorError> {
        let p = v.perm();
        vol.permuted(&p)?.reshaped(&[dims[0] * dims[p[1]], dims[p[2]], dims[p[3]], dims[4]])
    };
    Ok([one(View::Axial)?, one(View::Coronal)?, one(View::Sagittal)?])
}

/// Restores one stack produced by [`rearrange_views`].
pub fn restore_view<T: Real>(stack: &Tensor<T>, view: View, vol_shape: &[usize]) -> Result<Tensor<T>, TensorError> {
    let dims = volume_dims("restore_views", vol_shape)?;
    let p = view.perm();
    let permuted: Vec<usize> = p.iter().map(|&a| dims[a]).collect();
    stack.clone().reshaped(&permuted)?.permuted(&view.inverse_perm())
}
