//! Encoder-decoder pyramid: convolutional stem, Shuffle-Mixer stages with
//! strided-conv downsampling, mirrored decoder stages fed by per-view skip
//! connections, and a transposed-conv head back to full resolution.

pub mod config;
pub mod skip;

pub use config::{PyramidConfig, StageConfig, STEM_DIVISOR};
pub use skip::{Skip, SkipCache, SkipKind};

use crate::block::{ShuffleMixerBlock, View};
use crate::error::{Error, Result, TensorError};
use crate::nn::{seeded_rng, BatchNorm, Conv3d, ConvTranspose3d, Mode, ParamBuilder, ParamStore, Session};
use crate::tensor::{Real, Var};

/// Conv (or transposed conv) followed by batch norm and GELU. The conv has
/// no bias; the norm shift takes its place.
#[derive(Clone, Debug)]
pub struct ConvUnit<L> {
    pub conv: L,
    pub norm: BatchNorm,
}

pub trait VolumeLayer {
    fn apply<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError>;
}

impl VolumeLayer for Conv3d {
    fn apply<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        self.forward(s, x)
    }
}

impl VolumeLayer for ConvTranspose3d {
    fn apply<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        self.forward(s, x)
    }
}

impl<L: VolumeLayer> ConvUnit<L> {
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let y = self.conv.apply(s, x)?;
        let y = self.norm.forward(s, y)?;
        s.g.gelu(y)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: ConvTranspose3d,
    pub skip: Skip,
    pub blocks: Vec<ShuffleMixerBlock>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: PyramidConfig,
    pub stem: [ConvUnit<Conv3d>; 2],
    pub encoder: Vec<Vec<ShuffleMixerBlock>>,
    pub down: Vec<Conv3d>,
    /// Indexed by stage; the deepest stage has no decoder counterpart.
    pub decoder: Vec<DecoderStage>,
    pub head: [ConvUnit<ConvTranspose3d>; 2],
    pub out: Conv3d,
}

/// Layer structure plus its parameter store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Network,
    pub store: ParamStore<T>,
}

/// Builds and initializes the network deterministically from `seed`.
pub fn build_model<T: Real>(config: &PyramidConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let net = Network::new(&mut pb, config)?;
    Ok(Model { net, store })
}

impl Network {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, config: &PyramidConfig) -> Result<Self> {
        let n = config.stages.len();
        let c0 = config.stages[0].channels;
        let (sw, [h1, h2]) = (config.stem_width(), config.head_widths());
        let stage_err = |i: usize| move |e: TensorError| Error::Config(format!("stage {}: {e}", i + 1));

        let stem = [
            ConvUnit {
                conv: Conv3d::new(&mut pb.sub("stem.0.conv"), config.in_channels, sw, 3, 2, 1, false),
                norm: BatchNorm::new(&mut pb.sub("stem.0.norm"), sw),
            },
            ConvUnit {
                conv: Conv3d::new(&mut pb.sub("stem.1.conv"), sw, c0, 3, 2, 1, false),
                norm: BatchNorm::new(&mut pb.sub("stem.1.norm"), c0),
            },
        ];
        let mut encoder = Vec::with_capacity(n);
        let mut down = Vec::with_capacity(n - 1);
        for i in 0..n {
            let bc = config.block_config(i);
            let blocks = (0..config.stages[i].blocks)
                .map(|b| ShuffleMixerBlock::new(&mut pb.sub(format!("enc.{i}.{b}")), bc))
                .collect::<Result<Vec<_>, _>>()
                .map_err(stage_err(i))?;
            encoder.push(blocks);
            if i + 1 < n {
                let (ci, co) = (config.stages[i].channels, config.stages[i + 1].channels);
                down.push(Conv3d::new(&mut pb.sub(format!("down.{i}")), ci, co, 3, 2, 1, true));
            }
        }
        let mut decoder = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let bc = config.block_config(i);
            let st = &config.stages[i];
            let up =
                ConvTranspose3d::new(&mut pb.sub(format!("up.{i}")), config.stages[i + 1].channels, st.channels, true);
            let grid = bc.grid().map_err(stage_err(i))?;
            let skip = Skip::new(&mut pb.sub(format!("skip.{i}")), config.skip, st.channels, st.heads, grid.window)
                .map_err(stage_err(i))?;
            let blocks = (0..st.blocks)
                .map(|b| ShuffleMixerBlock::new(&mut pb.sub(format!("dec.{i}.{b}")), bc))
                .collect::<Result<Vec<_>, _>>()
                .map_err(stage_err(i))?;
            decoder.push(DecoderStage { up, skip, blocks });
        }
        let head = [
            ConvUnit {
                conv: ConvTranspose3d::new(&mut pb.sub("head.0.conv"), c0, h1, false),
                norm: BatchNorm::new(&mut pb.sub("head.0.norm"), h1),
            },
            ConvUnit {
                conv: ConvTranspose3d::new(&mut pb.sub("head.1.conv"), h1, h2, false),
                norm: BatchNorm::new(&mut pb.sub("head.1.norm"), h2),
            },
        ];
        let out = Conv3d::new(&mut pb.sub("head.out"), h2, config.out_channels, 1, 1, 0, true);
        Ok(Network { config: config.clone(), stem, encoder, down, decoder, head, out })
    }

    /// `x`: `[B, H, W, D, C_i]` → logits `[B, H, W, D, C_o]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let side = self.config.input_side;
        let sh = s.g.shape(x).to_vec();
        if sh.len() != 5 || sh[1..4] != [side; 3] || sh[4] != self.config.in_channels {
            return Err(TensorError::Shape {
                op: "network",
                detail: format!("input {sh:?}, expected [B, {side}, {side}, {side}, {}]", self.config.in_channels),
            });
        }
        let mut h = self.stem[0].forward(s, x)?;
        h = self.stem[1].forward(s, h)?;

        let mut cache = SkipCache::new();
        let n = self.encoder.len();
        for (i, blocks) in self.encoder.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                let out = block.forward(s, h, None)?;
                h = out.volume;
                if i + 1 < n && b + 1 == blocks.len() {
                    for (view, tap) in out.taps {
                        cache.put(i, view, tap)?;
                    }
                }
            }
            if let Some(d) = self.down.get(i) {
                h = d.forward(s, h)?;
            }
        }

        for (i, stage) in self.decoder.iter().enumerate().rev() {
            h = stage.up.forward(s, h)?;
            let grid = stage.blocks[0].grid;
            for (b, block) in stage.blocks.iter().enumerate() {
                h = if b == 0 {
                    let skip = &stage.skip;
                    let cache = &mut cache;
                    let mut entry = |s: &mut Session<'_, T>, view: View, dec: Var| {
                        let enc = cache.take(i, view)?;
                        skip.forward(s, enc, dec, &grid)
                    };
                    block.forward(s, h, Some(&mut entry))?.volume
                } else {
                    block.forward(s, h, None)?.volume
                };
            }
        }
        cache.finish()?;

        for unit in &self.head {
            h = unit.forward(s, h)?;
        }
        self.out.forward(s, h)
    }

    /// Eval-mode logits for a plain input tensor.
    pub fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: crate::tensor::Tensor<T>,
    ) -> Result<crate::tensor::Tensor<T>> {
        let mut s = Session::new(store, Mode::Eval, false);
        let xv = s.input(x);
        let y = self.forward(&mut s, xv)?;
        Ok(s.g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small() -> PyramidConfig {
        PyramidConfig::tiny()
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = small();
        let m = build_model::<f64>(&cfg, 5).unwrap();
        let m2 = build_model::<f64>(&cfg, 5).unwrap();
        assert_eq!(m.store.flat_values(), m2.store.flat_values());
        let x = Tensor::from_fn(&[1, 16, 16, 16, 1], |i| ((i * 13) % 7) as f64 / 7.0);
        let a = m.net.predict(&m.store, x.clone()).unwrap();
        let b = m.net.predict(&m.store, x).unwrap();
        assert_eq!(a.shape(), &[1, 16, 16, 16, 2]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn every_skip_kind_runs() {
        for kind in SkipKind::ALL {
            let cfg = PyramidConfig { skip: kind, ..small() };
            let m = build_model::<f32>(&cfg, 1).unwrap();
            let mut s = Session::new(&m.store, Mode::Train, false);
            let x = s.input(Tensor::from_fn(&[2, 16, 16, 16, 1], |i| (i % 5) as f32));
            let y = m.net.forward(&mut s, x).unwrap();
            assert_eq!(s.g.shape(y), &[2, 16, 16, 16, 2], "{}", kind.name());
        }
    }

    #[test]
    fn wrong_input_is_rejected() {
        let m = build_model::<f32>(&small(), 1).unwrap();
        assert!(m.net.predict(&m.store, Tensor::zeros(&[1, 8, 8, 8, 1])).is_err());
    }

    #[test]
    fn analytic_count_matches_instance() {
        use crate::block::{Ablation, AsesMode};
        use crate::complexity::audit;
        for ases in AsesMode::ALL {
            for ablation in std::iter::once(Ablation::None).chain(Ablation::VARIANTS) {
                for skip in SkipKind::ALL {
                    let cfg = PyramidConfig { ases, ablation, skip, ..small() };
                    let m = build_model::<f32>(&cfg, 1).unwrap();
                    let a = audit(&cfg, &m.store);
                    assert!(a.passed(), "{} {} {}: {:?}", ases.name(), ablation.name(), skip.name(), a.mismatches);
                }
            }
        }
    }

    #[test]
    fn config_errors_surface() {
        let mut cfg = small();
        cfg.stages[1].heads = 3;
        assert!(matches!(build_model::<f32>(&cfg, 1), Err(Error::Config(_))));
    }
}
