//! Adaptive scaled enhanced shortcut: sigmoid gates computed from the
//! normalized branch input that rescale a branch output before its residual
//! add. The spatial gate is per position, the channel gate per channel.

use crate::error::TensorError;
use crate::nn::{Conv2d, Linear, ParamBuilder, Session};
use crate::tensor::{Real, Var};

/// Which gates are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AsesMode {
    On,
    Off,
    SpatialOnly,
    ChannelOnly,
}

impl AsesMode {
    pub const ALL: [AsesMode; 4] = [AsesMode::On, AsesMode::Off, AsesMode::SpatialOnly, AsesMode::ChannelOnly];

    pub fn spatial(self) -> bool {
        matches!(self, AsesMode::On | AsesMode::SpatialOnly)
    }

    pub fn channel(self) -> bool {
        matches!(self, AsesMode::On | AsesMode::ChannelOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            AsesMode::On => "on",
            AsesMode::Off => "off",
            AsesMode::SpatialOnly => "spatial-only",
            AsesMode::ChannelOnly => "channel-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

pub const CHANNEL_REDUCTION: usize = 4;

pub fn bottleneck_width(channels: usize) -> usize {
    (channels / CHANNEL_REDUCTION).max(1)
}

/// `σ(conv3×3([mean_c(z); max_c(z)]))`, shape `[N, h, w, 1]`.
#[derive(Clone, Debug)]
pub struct SpatialGate {
    pub conv: Conv2d,
}

impl SpatialGate {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>) -> Self {
        SpatialGate { conv: Conv2d::new(&mut pb.sub("conv"), 2, 1, 3, 1, 1) }
    }

    pub fn param_count() -> usize {
        Conv2d::param_count(2, 1, 3)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, z: Var) -> Result<Var, TensorError> {
        let avg = s.g.mean_axis(z, 3)?;
        let max = s.g.max_axis(z, 3)?;
        let pooled = s.g.concat(&[avg, max], 3)?;
        let logits = self.conv.forward(s, pooled)?;
        s.g.sigmoid(logits)
    }
}

/// `σ(f(avg(y)) + f(max(y)))` with the shared bottleneck
/// `f = fc2 ∘ relu ∘ fc1`. Pools over every slice and position of one
/// volume's stack, giving one gate vector per batch element: `[B, 1, C]`.
#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelGate {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        let mid = bottleneck_width(channels);
        ChannelGate {
            fc1: Linear::new(&mut pb.sub("fc1"), channels, mid, true),
            fc2: Linear::new(&mut pb.sub("fc2"), mid, channels, true),
        }
    }

    pub fn param_count(channels: usize) -> usize {
        let mid = bottleneck_width(channels);
        Linear::param_count(channels, mid, true) + Linear::param_count(mid, channels, true)
    }

    fn bottleneck<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward(s, x)?;
        let h = s.g.relu(h)?;
        self.fc2.forward(s, h)
    }

    /// Pre-sigmoid sum `f(avg) + f(max)` for a stack `[B·S, h, w, C]`.
    pub fn logits<T: Real>(&self, s: &mut Session<'_, T>, y: Var, batch: usize) -> Result<Var, TensorError> {
        let sh = s.g.shape(y).to_vec();
        let c = sh[3];
        let flat = s.g.reshape(y, &[batch, sh[0] / batch * sh[1] * sh[2], c])?;
        let avg = s.g.mean_axis(flat, 1)?;
        let max = s.g.max_axis(flat, 1)?;
        let fa = self.bottleneck(s, avg)?;
        let fm = self.bottleneck(s, max)?;
        s.g.add(fa, fm)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, y: Var, batch: usize) -> Result<Var, TensorError> {
        let l = self.logits(s, y, batch)?;
        s.g.sigmoid(l)
    }

    /// Multiplies a branch output `[B·S, h, w, C]` by the gate `[B, 1, C]`.
    pub fn apply<T: Real>(s: &mut Session<'_, T>, branch: Var, gate: Var, batch: usize) -> Result<Var, TensorError> {
        let sh = s.g.shape(branch).to_vec();
        let flat = s.g.reshape(branch, &[batch, sh[0] / batch * sh[1] * sh[2], sh[3]])?;
        let y = s.g.mul(flat, gate)?;
        s.g.reshape(y, &sh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{seeded_rng, Mode, ParamStore};
    use crate::tensor::Tensor;

    fn zero_all(store: &mut ParamStore<f64>) {
        for p in store.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let (sg, cg) = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            (SpatialGate::new(&mut pb.sub("s")), ChannelGate::new(&mut pb.sub("c"), 8))
        };
        zero_all(&mut store);
        let mut s = Session::new(&store, Mode::Eval, false);
        let x = s.input(Tensor::from_fn(&[4, 3, 3, 8], |i| (i as f64 * 0.37).sin()));
        let a = sg.forward(&mut s, x).unwrap();
        let b = cg.forward(&mut s, x, 2).unwrap();
        assert_eq!(s.g.shape(a), &[4, 3, 3, 1]);
        assert_eq!(s.g.shape(b), &[2, 1, 8]);
        assert!(s.g.data(a).iter().chain(s.g.data(b)).all(|&v| v == 0.5));
    }

    #[test]
    fn gates_are_open_interval() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(2);
        let (sg, cg) = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            (SpatialGate::new(&mut pb.sub("s")), ChannelGate::new(&mut pb.sub("c"), 4))
        };
        let mut s = Session::new(&store, Mode::Eval, false);
        let x = s.input(Tensor::from_fn(&[2, 4, 4, 4], |i| ((i * 31 % 17) as f64 - 8.0) * 0.3));
        let a = sg.forward(&mut s, x).unwrap();
        let b = cg.forward(&mut s, x, 1).unwrap();
        assert!(s.g.data(a).iter().chain(s.g.data(b)).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn mode_flags() {
        assert!(AsesMode::On.spatial() && AsesMode::On.channel());
        assert!(!AsesMode::Off.spatial() && !AsesMode::Off.channel());
        assert!(AsesMode::SpatialOnly.spatial() && !AsesMode::SpatialOnly.channel());
        assert_eq!(AsesMode::parse("channel-only"), Some(AsesMode::ChannelOnly));
    }
}
