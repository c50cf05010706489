//! Encoder-to-decoder skip connections, applied per view on slice stacks
//! `[B·S, h, w, C]` of equal shape.

use std::collections::HashMap;

use crate::attention::{AttentionCore, WindowAttention, WindowGrid};
use crate::block::View;
use crate::error::TensorError;
use crate::nn::{Linear, ParamBuilder, Session};
use crate::tensor::{Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SkipKind {
    #[default]
    CrossMerge,
    CatLinear,
    CatSkip,
    CrossSkip,
    CatCrossSkip,
}

impl SkipKind {
    pub const ALL: [SkipKind; 5] =
        [SkipKind::CrossMerge, SkipKind::CatLinear, SkipKind::CatSkip, SkipKind::CrossSkip, SkipKind::CatCrossSkip];

    pub fn name(self) -> &'static str {
        match self {
            SkipKind::CrossMerge => "crossmerge",
            SkipKind::CatLinear => "catlinear",
            SkipKind::CatSkip => "catskip",
            SkipKind::CrossSkip => "crossskip",
            SkipKind::CatCrossSkip => "catcrossskip",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug)]
pub enum Skip {
    /// Decoder queries against summed encoder and decoder keys/values.
    CrossMerge { enc: Linear, dec: Linear, core: AttentionCore },
    /// `[E; D]` projected back to `C`.
    CatLinear { proj: Linear },
    /// `[E; D]` projected, then windowed self-attention.
    CatSkip { proj: Linear, attn: WindowAttention },
    /// Queries from the decoder, keys/values from the encoder.
    CrossSkip { query: Linear, kv: Linear, core: AttentionCore },
    /// Queries from the projected `[E; D]`, keys/values from the encoder.
    CatCrossSkip { proj: Linear, query: Linear, kv: Linear, core: AttentionCore },
}

impl Skip {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        kind: SkipKind,
        channels: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self, TensorError> {
        let c = channels;
        Ok(match kind {
            SkipKind::CrossMerge => Skip::CrossMerge {
                enc: Linear::new(&mut pb.sub("enc_proj"), c, 2 * c, true),
                dec: Linear::new(&mut pb.sub("dec_proj"), c, 3 * c, true),
                core: AttentionCore::new(&mut pb.sub("attn"), c, heads, window)?,
            },
            SkipKind::CatLinear => Skip::CatLinear { proj: Linear::new(&mut pb.sub("cat_proj"), 2 * c, c, true) },
            SkipKind::CatSkip => Skip::CatSkip {
                proj: Linear::new(&mut pb.sub("cat_proj"), 2 * c, c, true),
                attn: WindowAttention::new(&mut pb.sub("attn"), c, heads, window)?,
            },
            SkipKind::CrossSkip => Skip::CrossSkip {
                query: Linear::new(&mut pb.sub("q_proj"), c, c, true),
                kv: Linear::new(&mut pb.sub("kv_proj"), c, 2 * c, true),
                core: AttentionCore::new(&mut pb.sub("attn"), c, heads, window)?,
            },
            SkipKind::CatCrossSkip => Skip::CatCrossSkip {
                proj: Linear::new(&mut pb.sub("cat_proj"), 2 * c, c, true),
                query: Linear::new(&mut pb.sub("q_proj"), c, c, true),
                kv: Linear::new(&mut pb.sub("kv_proj"), c, 2 * c, true),
                core: AttentionCore::new(&mut pb.sub("attn"), c, heads, window)?,
            },
        })
    }

    pub fn kind(&self) -> SkipKind {
        match self {
            Skip::CrossMerge { .. } => SkipKind::CrossMerge,
            Skip::CatLinear { .. } => SkipKind::CatLinear,
            Skip::CatSkip { .. } => SkipKind::CatSkip,
            Skip::CrossSkip { .. } => SkipKind::CrossSkip,
            Skip::CatCrossSkip { .. } => SkipKind::CatCrossSkip,
        }
    }

    /// Merges encoder stack `enc` into decoder stack `dec`; the result
    /// replaces `dec`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        enc: Var,
        dec: Var,
        grid: &WindowGrid,
    ) -> Result<Var, TensorError> {
        if s.g.shape(enc) != s.g.shape(dec) {
            return Err(TensorError::Shape {
                op: "skip",
                detail: format!("encoder {:?} vs decoder {:?}", s.g.shape(enc), s.g.shape(dec)),
            });
        }
        let c = *s.g.shape(dec).last().unwrap_or(&0);
        match self {
            Skip::CrossMerge { enc: pe, dec: pd, core } => {
                let e = pe.forward(s, enc)?;
                let e = s.g.split(e, 3, &[c, c])?;
                let d = pd.forward(s, dec)?;
                let d = s.g.split(d, 3, &[c, c, c])?;
                let k = s.g.add(e[0], d[1])?;
                let v = s.g.add(e[1], d[2])?;
                core.forward(s, d[0], k, v, grid)
            }
            Skip::CatLinear { proj } => {
                let cat = s.g.concat(&[enc, dec], 3)?;
                proj.forward(s, cat)
            }
            Skip::CatSkip { proj, attn } => {
                let cat = s.g.concat(&[enc, dec], 3)?;
                let x = proj.forward(s, cat)?;
                attn.forward(s, x, grid)
            }
            Skip::CrossSkip { query, kv, core } => {
                let q = query.forward(s, dec)?;
                let e = kv.forward(s, enc)?;
                let e = s.g.split(e, 3, &[c, c])?;
                core.forward(s, q, e[0], e[1], grid)
            }
            Skip::CatCrossSkip { proj, query, kv, core } => {
                let cat = s.g.concat(&[enc, dec], 3)?;
                let x = proj.forward(s, cat)?;
                let q = query.forward(s, x)?;
                let e = kv.forward(s, enc)?;
                let e = s.g.split(e, 3, &[c, c])?;
                core.forward(s, q, e[0], e[1], grid)
            }
        }
    }
}

/// Encoder taps keyed by (stage, view); each is written and consumed once.
#[derive(Debug, Default)]
pub struct SkipCache {
    entries: HashMap<(usize, View), Var>,
}

impl SkipCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, stage: usize, view: View, v: Var) -> Result<(), TensorError> {
        match self.entries.insert((stage, view), v) {
            None => Ok(()),
            Some(_) => {
                Err(TensorError::Shape { op: "skip_cache", detail: format!("stage {stage} {view:?} written twice") })
            }
        }
    }

    pub fn take(&mut self, stage: usize, view: View) -> Result<Var, TensorError> {
        self.entries.remove(&(stage, view)).ok_or_else(|| TensorError::Shape {
            op: "skip_cache",
            detail: format!("stage {stage} {view:?} read without a matching write"),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fails if any tap was never consumed.
    pub fn finish(self) -> Result<(), TensorError> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let mut left: Vec<_> = self.entries.keys().collect();
            left.sort_by_key(|(st, v)| (*st, v.index()));
            Err(TensorError::Shape { op: "skip_cache", detail: format!("unconsumed taps {left:?}") })
        }
    }
}
