//! The 3D Shuffle-Mixer block: per-view slice stacks go through the
//! shuffle pipeline and slice mixing, then the views are restored and
//! aggregated. All weights are shared across the three views.

pub mod aggregator;
pub mod ases;
pub mod mixing;
pub mod shuffle;
pub mod views;

pub use aggregator::ViewAggregator;
pub use ases::{AsesMode, ChannelGate, SpatialGate};
pub use mixing::{MixKind, SliceMixer};
pub use shuffle::{ShuffleBlock, SubUnit};
pub use views::View;

use crate::attention::WindowGrid;
use crate::error::TensorError;
use crate::nn::{ParamBuilder, Session};
use crate::tensor::{Real, Var};

/// Block-level ablations. `None` is the full design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Ablation {
    #[default]
    None,
    NoShuffle,
    SingleView,
    NoMixing,
    DenseMlp,
    MixerFirst,
    NoApeS,
    NoApeV,
}

impl Ablation {
    /// The seven non-trivial variants.
    pub const VARIANTS: [Ablation; 7] = [
        Ablation::NoShuffle,
        Ablation::SingleView,
        Ablation::NoMixing,
        Ablation::DenseMlp,
        Ablation::MixerFirst,
        Ablation::NoApeS,
        Ablation::NoApeV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoShuffle => "no-shuffle",
            Ablation::SingleView => "single-view",
            Ablation::NoMixing => "no-mixing",
            Ablation::DenseMlp => "dense-mlp",
            Ablation::MixerFirst => "mixer-first",
            Ablation::NoApeS => "no-ape-s",
            Ablation::NoApeV => "no-ape-v",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        std::iter::once(Ablation::None).chain(Self::VARIANTS).find(|a| a.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    /// Side length of the (cubic) token volume the block runs on.
    pub side: usize,
    pub mlp_ratio: usize,
    pub ases: AsesMode,
    pub ablation: Ablation,
}

impl BlockConfig {
    pub fn views(&self) -> &'static [View] {
        if self.ablation == Ablation::SingleView {
            &View::ALL[..1]
        } else {
            &View::ALL
        }
    }

    pub fn grid(&self) -> Result<WindowGrid, TensorError> {
        WindowGrid::clamped(self.side, self.side, self.window)
    }
}

/// Hook applied to each view stack before the shuffle pipeline.
pub type ViewEntry<'a, T> = dyn FnMut(&mut Session<'_, T>, View, Var) -> Result<Var, TensorError> + 'a;

pub struct BlockOutput {
    pub volume: Var,
    /// Post-shuffle, pre-mixing stack of every processed view.
    pub taps: Vec<(View, Var)>,
}

#[derive(Clone, Debug)]
pub struct ShuffleMixerBlock {
    pub config: BlockConfig,
    pub grid: WindowGrid,
    pub shuffle: ShuffleBlock,
    pub mixer: Option<SliceMixer>,
    pub aggregator: Option<ViewAggregator>,
}

impl ShuffleMixerBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, config: BlockConfig) -> Result<Self, TensorError> {
        let c = config.channels;
        let ab = config.ablation;
        let grid = config.grid()?;
        let shuffle = ShuffleBlock::new(
            &mut pb.sub("shuffle"),
            c,
            config.heads,
            grid.window,
            config.mlp_ratio,
            config.ases,
            ab != Ablation::NoShuffle,
        )?;
        let embed_s = ab != Ablation::NoApeS;
        let mixer = match ab {
            Ablation::NoMixing => None,
            Ablation::DenseMlp => Some(SliceMixer::dense(&mut pb.sub("mix"), config.side, c, embed_s)),
            _ => Some(SliceMixer::axial(&mut pb.sub("mix"), config.side, c, embed_s)),
        };
        let aggregator = (ab != Ablation::SingleView)
            .then(|| ViewAggregator::new(&mut pb.sub("aggregate"), c, ab != Ablation::NoApeV));
        Ok(ShuffleMixerBlock { config, grid, shuffle, mixer, aggregator })
    }

    /// `vol`: `[B, H, W, D, C]` with `H = W = D = side`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        vol: Var,
        mut entry: Option<&mut ViewEntry<'_, T>>,
    ) -> Result<BlockOutput, TensorError> {
        let shape = s.g.shape(vol).to_vec();
        let side = self.config.side;
        if shape.len() != 5 || shape[1..4] != [side; 3] || shape[4] != self.config.channels {
            return Err(TensorError::Shape {
                op: "shuffle_mixer_block",
                detail: format!("volume {shape:?} vs side {side}, {} channels", self.config.channels),
            });
        }
        let batch = shape[0];
        let mut outs = Vec::with_capacity(3);
        let mut taps = Vec::with_capacity(3);
        for &view in self.config.views() {
            let mut x = views::rearrange(s, vol, view)?;
            if let Some(f) = entry.as_mut() {
                x = f(s, view, x)?;
            }
            let z = if self.config.ablation == Ablation::MixerFirst {
                let m = self.mix(s, x, batch)?;
                let z = self.shuffle.forward(s, m, &self.grid, batch)?;
                taps.push((view, z));
                z
            } else {
                let z = self.shuffle.forward(s, x, &self.grid, batch)?;
                taps.push((view, z));
                self.mix(s, z, batch)?
            };
            outs.push(views::restore(s, z, view, &shape)?);
        }
        let volume = match &self.aggregator {
            Some(agg) => agg.forward(s, &[outs[0], outs[1], outs[2]])?,
            None => outs[0],
        };
        Ok(BlockOutput { volume, taps })
    }

    fn mix<T: Real>(&self, s: &mut Session<'_, T>, z: Var, batch: usize) -> Result<Var, TensorError> {
        match &self.mixer {
            Some(m) => m.forward(s, z, batch),
            None => Ok(z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{audit_fn, Probe, NETWORK_TOLERANCE};
    use crate::nn::{seeded_rng, Mode, ParamStore};
    use crate::tensor::Tensor;

    fn config(ablation: Ablation, ases: AsesMode) -> BlockConfig {
        BlockConfig { channels: 8, heads: 2, window: 2, side: 4, mlp_ratio: 2, ases, ablation }
    }

    fn build(cfg: BlockConfig, seed: u64) -> (ParamStore<f64>, ShuffleMixerBlock) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let block = ShuffleMixerBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg).unwrap();
        (store, block)
    }

    fn volume(batch: usize, cfg: &BlockConfig) -> Tensor<f64> {
        let n = cfg.side;
        Tensor::from_fn(&[batch, n, n, n, cfg.channels], |i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * 0.8)
    }

    #[test]
    fn every_ablation_preserves_shape() {
        for ab in std::iter::once(Ablation::None).chain(Ablation::VARIANTS) {
            for ases in AsesMode::ALL {
                let cfg = config(ab, ases);
                let (store, block) = build(cfg, 3);
                let mut s = Session::new(&store, Mode::Train, false);
                let x = s.input(volume(2, &cfg));
                let out = block.forward(&mut s, x, None).unwrap();
                assert_eq!(s.g.shape(out.volume), &[2, 4, 4, 4, 8], "{}", ab.name());
                assert_eq!(out.taps.len(), cfg.views().len());
                assert!(s.g.data(out.volume).iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn ablation_names_round_trip() {
        for ab in std::iter::once(Ablation::None).chain(Ablation::VARIANTS) {
            assert_eq!(Ablation::parse(ab.name()), Some(ab));
        }
        assert_eq!(Ablation::parse("bogus"), None);
    }

    #[test]
    fn entry_hook_sees_each_view() {
        let cfg = config(Ablation::None, AsesMode::On);
        let (store, block) = build(cfg, 4);
        let mut s = Session::new(&store, Mode::Eval, false);
        let x = s.input(volume(1, &cfg));
        let mut seen = Vec::new();
        let mut hook = |_: &mut Session<'_, f64>, v: View, z: Var| {
            seen.push(v);
            Ok(z)
        };
        block.forward(&mut s, x, Some(&mut hook)).unwrap();
        assert_eq!(seen, View::ALL);
    }

    #[test]
    fn wrong_side_is_rejected() {
        let cfg = config(Ablation::None, AsesMode::Off);
        let (store, block) = build(cfg, 5);
        let mut s = Session::new(&store, Mode::Eval, false);
        let x = s.input(Tensor::zeros(&[1, 2, 2, 2, 8]));
        assert!(block.forward(&mut s, x, None).is_err());
    }

    #[test]
    fn block_gradients_match_differences() {
        let cfg = BlockConfig {
            channels: 4,
            heads: 1,
            window: 2,
            side: 4,
            mlp_ratio: 2,
            ases: AsesMode::On,
            ablation: Ablation::None,
        };
        let (mut store, block) = build(cfg, 6);
        crate::gradcheck::spread_params(&mut store, 7);
        let x = volume(2, &cfg);
        let probe = Probe { samples: Some(120), seed: 11, ..Probe::default() };
        let report = audit_fn(
            "block",
            &store,
            &[x],
            &probe,
            &crate::forward_pair!(|s, xs| block.forward(s, xs[0], None).map(|o| o.volume)),
        )
        .unwrap();
        assert!(report.checked() >= 120);
        assert!(report.worst() < NETWORK_TOLERANCE, "{}", report.render());
    }
}
