use crate::attention::effective_window;
use crate::block::{Ablation, AsesMode, BlockConfig};
use crate::error::{Error, Result};

use super::skip::SkipKind;

/// Token resolution divisor of the first stage (the stem's two stride-2 convs).
pub const STEM_DIVISOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub divisor: usize,
    pub window: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidConfig {
    pub stages: Vec<StageConfig>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Edge length of the cubic input volume.
    pub input_side: usize,
    pub ases: AsesMode,
    pub skip: SkipKind,
    pub ablation: Ablation,
}

fn stages(channels: &[usize], blocks: &[usize], heads: &[usize], window: usize, ratio: usize) -> Vec<StageConfig> {
    (0..channels.len())
        .map(|i| StageConfig {
            divisor: STEM_DIVISOR << i,
            window,
            channels: channels[i],
            blocks: blocks[i],
            heads: heads[i],
            mlp_ratio: ratio,
        })
        .collect()
}

impl PyramidConfig {
    /// The full-size build: 128³ input, four stages.
    pub fn paper() -> Self {
        PyramidConfig {
            stages: stages(&[96, 192, 384, 768], &[1, 2, 8, 1], &[3, 6, 12, 24], 4, 4),
            in_channels: 1,
            out_channels: 2,
            input_side: 128,
            ases: AsesMode::On,
            skip: SkipKind::CrossMerge,
            ablation: Ablation::None,
        }
    }

    /// Desk-scale build: 32³ input, windows clamp at the two deepest stages.
    pub fn desk() -> Self {
        PyramidConfig {
            stages: stages(&[16, 32, 64, 128], &[1, 1, 2, 1], &[2, 4, 8, 16], 4, 4),
            input_side: 32,
            ..Self::paper()
        }
    }

    /// Three small stages on a 16³ input, for whole-network differentiation.
    pub fn tiny() -> Self {
        PyramidConfig { stages: stages(&[4, 8, 8], &[1, 1, 1], &[1, 2, 2], 2, 2), input_side: 16, ..Self::paper() }
    }

    /// Token side length of stage `i`.
    pub fn stage_side(&self, i: usize) -> usize {
        self.input_side / self.stages[i].divisor
    }

    pub fn block_config(&self, i: usize) -> BlockConfig {
        let st = &self.stages[i];
        BlockConfig {
            channels: st.channels,
            heads: st.heads,
            window: st.window,
            side: self.stage_side(i),
            mlp_ratio: st.mlp_ratio,
            ases: self.ases,
            ablation: self.ablation,
        }
    }

    /// Channel width of the stem's first conv.
    pub fn stem_width(&self) -> usize {
        2 * self.stages[0].channels
    }

    /// Channel widths after the output head's two upsampling convs.
    pub fn head_widths(&self) -> [usize; 2] {
        [2 * self.stages[0].channels; 2]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("input and output channels must be positive".into());
        }
        if self.input_side == 0 || !self.input_side.is_multiple_of(STEM_DIVISOR) {
            return bad(format!("input side {} not divisible by {STEM_DIVISOR}", self.input_side));
        }
        for (i, st) in self.stages.iter().enumerate() {
            let stage = i + 1;
            let expect = STEM_DIVISOR << i;
            if st.divisor != expect {
                return bad(format!("stage {stage}: divisor {} but the pyramid gives {expect}", st.divisor));
            }
            if !self.input_side.is_multiple_of(st.divisor) {
                return bad(format!("stage {stage}: input side {} not divisible by {}", self.input_side, st.divisor));
            }
            if st.channels == 0 || st.heads == 0 || st.channels % st.heads != 0 {
                return bad(format!("stage {stage}: {} channels not divisible by {} heads", st.channels, st.heads));
            }
            if st.blocks == 0 || st.mlp_ratio == 0 || st.window == 0 {
                return bad(format!("stage {stage}: blocks, MLP ratio and window must be positive"));
            }
            let side = self.stage_side(i);
            let m = effective_window(side, side, st.window);
            if !side.is_multiple_of(m) {
                return bad(format!("stage {stage}: resolution {side} not divisible by window {m}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_resolutions() {
        let c = PyramidConfig::paper();
        c.validate().unwrap();
        let sides: Vec<_> = (0..4).map(|i| c.stage_side(i)).collect();
        assert_eq!(sides, [32, 16, 8, 4]);
    }

    #[test]
    fn desk_clamps_deep_windows() {
        let c = PyramidConfig::desk();
        c.validate().unwrap();
        let w: Vec<_> = (0..4).map(|i| c.block_config(i).grid().unwrap().window).collect();
        assert_eq!(w, [4, 4, 2, 1]);
    }

    #[test]
    fn divisibility_errors_name_the_stage() {
        let mut c = PyramidConfig::desk();
        c.stages[2].heads = 7;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("stage 3"), "{e}");
        let mut c = PyramidConfig::desk();
        c.stages[0].window = 3;
        assert!(c.validate().unwrap_err().to_string().contains("stage 1"));
        let mut c = PyramidConfig::desk();
        c.input_side = 30;
        assert!(c.validate().is_err());
    }
}
