//! View-aware aggregator: per-view embeddings, channel concat of the three
//! restored views, layer norm over `3C`, projection back to `C`.

use crate::error::TensorError;
use crate::nn::layers::INIT_STD;
use crate::nn::{Init, LayerNorm, Linear, ParamBuilder, ParamId, Session};
use crate::tensor::{Real, Var};

#[derive(Clone, Debug)]
pub struct ViewAggregator {
    pub channels: usize,
    pub view_embed: Option<[ParamId; 3]>,
    pub norm: LayerNorm,
    pub project: Linear,
}

impl ViewAggregator {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize, embed: bool) -> Self {
        let view_embed =
            embed.then(|| [1, 2, 3].map(|v| pb.param(&format!("ape_v{v}"), &[channels], Init::TruncNormal(INIT_STD))));
        ViewAggregator {
            channels,
            view_embed,
            norm: LayerNorm::new(&mut pb.sub("norm"), 3 * channels),
            project: Linear::new(&mut pb.sub("mlp_va"), 3 * channels, channels, true),
        }
    }

    /// `views`: three volumes `[B, H, W, D, C]` in view order.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, views: &[Var; 3]) -> Result<Var, TensorError> {
        let shape = s.g.shape(views[0]).to_vec();
        if views.iter().any(|&v| s.g.shape(v) != shape.as_slice()) {
            return Err(TensorError::Shape { op: "view_aggregate", detail: "views differ in shape".into() });
        }
        let mut parts = [views[0]; 3];
        for (i, &v) in views.iter().enumerate() {
            parts[i] = match self.view_embed {
                Some(ape) => {
                    let e = s.p(ape[i]);
                    s.g.add(v, e)?
                }
                None => v,
            };
        }
        let cat = s.g.concat(&parts, shape.len() - 1)?;
        let n = self.norm.forward(s, cat)?;
        self.project.forward(s, n)
    }
}
