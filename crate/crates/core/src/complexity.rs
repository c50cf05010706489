//! Analytic FLOP and parameter counts.
//!
//! FLOP formulas are evaluated term for term (a multiply-accumulate counts
//! as 2); bias, norm and activation costs are not added. Parameter counts
//! are derived from the configuration alone and cross-checked against a
//! built model, grouped by module path.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::attention::effective_window;
use crate::block::{ases, shuffle::DW_KERNEL, Ablation, AsesMode};
use crate::error::{Error, Result};
use crate::network::{PyramidConfig, SkipKind};
use crate::nn::ParamStore;
use crate::tensor::Real;

/// Extents, channels, window and MLP ratio of one block's token volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub h: u128,
    pub w: u128,
    pub d: u128,
    pub c: u128,
    pub m: u128,
    pub alpha: u128,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    PureMsa,
    WindowMsa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixingKind {
    AxialMlp,
    DenseMlp,
    DenseMsa,
}

impl CostModel {
    pub fn new(h: u128, w: u128, d: u128, c: u128, m: u128, alpha: u128) -> Result<Self> {
        if [h, w, d, c, m, alpha].contains(&0) {
            return Err(Error::Config("cost model extents must be positive".into()));
        }
        if m > h.min(w) {
            return Err(Error::Config(format!("window {m} exceeds slice {h}x{w}")));
        }
        Ok(CostModel { h, w, d, c, m, alpha })
    }

    pub fn cube(side: usize, c: usize, m: usize, alpha: usize) -> Result<Self> {
        let (s, c, m, a) = (side as u128, c as u128, m as u128, alpha as u128);
        Self::new(s, s, s, c, m, a)
    }
}

pub fn flops_attention(cm: &CostModel, kind: AttentionKind) -> u128 {
    let (hw, c) = (cm.h * cm.w, cm.c);
    match kind {
        AttentionKind::WindowMsa => 4 * hw * c * c + 2 * cm.m * cm.m * hw * c,
        AttentionKind::PureMsa => 4 * hw * c * c + 2 * hw * hw * c,
    }
}

/// The MLP variants share the `3C → C` projector term `3HWDC²`, counted
/// here at two FLOPs per multiply-accumulate like the rest of the sum.
pub fn flops_mixing(cm: &CostModel, kind: MixingKind) -> u128 {
    let (a, c, d) = (cm.alpha, cm.c, cm.d);
    let vol = cm.h * cm.w * d;
    let projector = 2 * 3 * vol * c * c;
    match kind {
        MixingKind::AxialMlp => 2 * a * vol * c * (d + c) + projector,
        MixingKind::DenseMlp => 2 * a * vol * c * (d * c) + projector,
        MixingKind::DenseMsa => 8 * vol * c * c + 2 * vol * vol * c + 2 * a * vol * c * c,
    }
}

/// Window attention plus axial mixing; the aggregator is left out.
pub fn flops_block(cm: &CostModel) -> u128 {
    flops_attention(cm, AttentionKind::WindowMsa) + flops_mixing(cm, MixingKind::AxialMlp)
}

fn linear(fan_in: u128, fan_out: u128, bias: bool) -> u128 {
    fan_in * fan_out + if bias { fan_out } else { 0 }
}

fn norm(c: u128) -> u128 {
    2 * c
}

fn attention_core(c: u128, heads: u128, m: u128) -> u128 {
    (2 * m - 1) * (2 * m - 1) * heads + linear(c, c, true)
}

fn sub_unit(c: u128, heads: u128, m: u128, alpha: u128, gates: AsesMode) -> u128 {
    let k = DW_KERNEL as u128;
    let mut n = norm(c) + linear(c, 3 * c, true) + attention_core(c, heads, m);
    n += k * k * c + c;
    n += norm(c) + linear(c, alpha * c, true) + linear(alpha * c, c, true);
    if gates.spatial() {
        n += linear(2 * 3 * 3, 1, true);
    }
    if gates.channel() {
        let mid = ases::bottleneck_width(c as usize) as u128;
        n += linear(c, mid, true) + linear(mid, c, true);
    }
    n
}

fn block(c: u128, heads: u128, m: u128, alpha: u128, side: u128, gates: AsesMode, ab: Ablation) -> u128 {
    let mut n = 2 * sub_unit(c, heads, m, alpha, gates);
    let ape_s = if ab == Ablation::NoApeS { 0 } else { side * c };
    n += match ab {
        Ablation::NoMixing => 0,
        Ablation::DenseMlp => ape_s + linear(side * c, side * c, true) + linear(2 * c, c, true),
        _ => ape_s + linear(side, side, true) + linear(c, c, true) + linear(3 * c, c, true),
    };
    if ab != Ablation::SingleView {
        let ape_v = if ab == Ablation::NoApeV { 0 } else { 3 * c };
        n += ape_v + norm(3 * c) + linear(3 * c, c, true);
    }
    n
}

fn skip(kind: SkipKind, c: u128, heads: u128, m: u128) -> u128 {
    let core = attention_core(c, heads, m);
    match kind {
        SkipKind::CrossMerge => linear(c, 2 * c, true) + linear(c, 3 * c, true) + core,
        SkipKind::CatLinear => linear(2 * c, c, true),
        SkipKind::CatSkip => linear(2 * c, c, true) + linear(c, 3 * c, true) + core,
        SkipKind::CrossSkip => linear(c, c, true) + linear(c, 2 * c, true) + core,
        SkipKind::CatCrossSkip => linear(2 * c, c, true) + linear(c, c, true) + linear(c, 2 * c, true) + core,
    }
}

/// Parameter count per module group (`stem`, `enc.<stage>.<block>`,
/// `down.<stage>`, `up.<stage>`, `skip.<stage>`, `dec.<stage>.<block>`,
/// `head`), from the configuration alone.
pub fn count_params(config: &PyramidConfig) -> BTreeMap<String, u128> {
    let mut out = BTreeMap::new();
    let u = |x: usize| x as u128;
    let c0 = u(config.stages[0].channels);
    let sw = u(config.stem_width());
    let [h1, h2] = config.head_widths().map(u);
    let ci = u(config.in_channels);
    out.insert("stem".into(), 27 * ci * sw + norm(sw) + 27 * sw * c0 + norm(c0));
    let n = config.stages.len();
    for (i, st) in config.stages.iter().enumerate() {
        let side = config.input_side / st.divisor;
        let m = u(effective_window(side, side, st.window));
        let (c, heads, alpha, side) = (u(st.channels), u(st.heads), u(st.mlp_ratio), u(side));
        let b = block(c, heads, m, alpha, side, config.ases, config.ablation);
        for k in 0..st.blocks {
            out.insert(format!("enc.{i}.{k}"), b);
        }
        if i + 1 < n {
            let next = u(config.stages[i + 1].channels);
            out.insert(format!("down.{i}"), 27 * c * next + next);
            out.insert(format!("up.{i}"), next * 8 * c + c);
            out.insert(format!("skip.{i}"), skip(config.skip, c, heads, m));
            for k in 0..st.blocks {
                out.insert(format!("dec.{i}.{k}"), b);
            }
        }
    }
    let co = u(config.out_channels);
    out.insert("head".into(), c0 * 8 * h1 + norm(h1) + h1 * 8 * h2 + norm(h2) + h2 * co + co);
    out
}

/// Module group of a dotted parameter path.
pub fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let depth = match parts[0] {
        "enc" | "dec" => 3,
        "down" | "up" | "skip" => 2,
        _ => 1,
    };
    parts[..depth.min(parts.len())].join(".")
}

/// Parameter count per module group of a built store.
pub fn instantiated_params<T: Real>(store: &ParamStore<T>) -> BTreeMap<String, u128> {
    let mut out = BTreeMap::new();
    for p in store.params() {
        *out.entry(group_of(&p.name)).or_insert(0) += p.value.len() as u128;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mismatch {
    pub group: String,
    pub analytic: u128,
    pub instantiated: u128,
}

#[derive(Clone, Debug)]
pub struct ParamAudit {
    pub analytic: u128,
    pub instantiated: u128,
    pub mismatches: Vec<Mismatch>,
}

impl ParamAudit {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.analytic == self.instantiated
    }
}

/// Compares [`count_params`] against the store of a model built from `config`.
pub fn audit<T: Real>(config: &PyramidConfig, store: &ParamStore<T>) -> ParamAudit {
    let analytic = count_params(config);
    let actual = instantiated_params(store);
    let mut mismatches = Vec::new();
    for g in analytic.keys().chain(actual.keys()).collect::<std::collections::BTreeSet<_>>() {
        let (a, b) = (analytic.get(g).copied().unwrap_or(0), actual.get(g).copied().unwrap_or(0));
        if a != b {
            mismatches.push(Mismatch { group: g.clone(), analytic: a, instantiated: b });
        }
    }
    ParamAudit { analytic: analytic.values().sum(), instantiated: actual.values().sum(), mismatches }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageCost {
    pub stage: usize,
    pub side: usize,
    pub channels: usize,
    pub window: usize,
    /// Encoder plus decoder blocks.
    pub blocks: usize,
    pub attention_flops: u128,
    pub mixing_flops: u128,
    pub params: u128,
}

impl StageCost {
    pub fn flops(&self) -> u128 {
        self.attention_flops + self.mixing_flops
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub stages: Vec<StageCost>,
    /// Parameters outside the stages' blocks (stem, resampling, skips, head).
    pub other_params: u128,
}

impl CostReport {
    pub fn total_flops(&self) -> u128 {
        self.stages.iter().map(StageCost::flops).sum()
    }

    pub fn total_params(&self) -> u128 {
        self.stages.iter().map(|s| s.params).sum::<u128>() + self.other_params
    }

    /// Human-readable table.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:>5} {:>8} {:>6} {:>6} {:>16} {:>16} {:>12}",
            "stage", "side", "channels", "window", "blocks", "attention FLOPs", "mixing FLOPs", "params"
        );
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{:>5} {:>5} {:>8} {:>6} {:>6} {:>16} {:>16} {:>12}",
                s.stage, s.side, s.channels, s.window, s.blocks, s.attention_flops, s.mixing_flops, s.params
            );
        }
        let _ = writeln!(out, "other params: {}", self.other_params);
        let _ = writeln!(out, "total FLOPs:  {}", self.total_flops());
        let _ = writeln!(out, "total params: {}", self.total_params());
        out
    }

    /// One `key=value` pair per line.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            let i = s.stage;
            let _ = writeln!(out, "stage{i}.side={}", s.side);
            let _ = writeln!(out, "stage{i}.channels={}", s.channels);
            let _ = writeln!(out, "stage{i}.window={}", s.window);
            let _ = writeln!(out, "stage{i}.blocks={}", s.blocks);
            let _ = writeln!(out, "stage{i}.flops.attention={}", s.attention_flops);
            let _ = writeln!(out, "stage{i}.flops.mixing={}", s.mixing_flops);
            let _ = writeln!(out, "stage{i}.params={}", s.params);
        }
        let _ = writeln!(out, "params.other={}", self.other_params);
        let _ = writeln!(out, "flops.total={}", self.total_flops());
        let _ = writeln!(out, "params.total={}", self.total_params());
        out
    }
}

/// Formula-level cost of every stage of `config`.
pub fn cost_report(config: &PyramidConfig) -> Result<CostReport> {
    config.validate()?;
    let params = count_params(config);
    let n = config.stages.len();
    let mut stages = Vec::with_capacity(n);
    let mut in_blocks = 0;
    for (i, st) in config.stages.iter().enumerate() {
        let side = config.stage_side(i);
        let m = effective_window(side, side, st.window);
        let cm = CostModel::cube(side, st.channels, m, st.mlp_ratio)?;
        let blocks = if i + 1 < n { 2 * st.blocks } else { st.blocks };
        let mixing = match config.ablation {
            Ablation::NoMixing => 0,
            Ablation::DenseMlp => flops_mixing(&cm, MixingKind::DenseMlp),
            _ => flops_mixing(&cm, MixingKind::AxialMlp),
        };
        let stage_params: u128 = params
            .iter()
            .filter(|(g, _)| g.starts_with(&format!("enc.{i}.")) || g.starts_with(&format!("dec.{i}.")))
            .map(|(_, v)| v)
            .sum();
        in_blocks += stage_params;
        stages.push(StageCost {
            stage: i + 1,
            side,
            channels: st.channels,
            window: m,
            blocks,
            attention_flops: blocks as u128 * flops_attention(&cm, AttentionKind::WindowMsa),
            mixing_flops: blocks as u128 * mixing,
            params: stage_params,
        });
    }
    Ok(CostReport { stages, other_params: params.values().sum::<u128>() - in_blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let cm = CostModel::new(8, 8, 1, 4, 4, 1).unwrap();
        assert_eq!(flops_attention(&cm, AttentionKind::WindowMsa), 12288);
        assert_eq!(flops_attention(&cm, AttentionKind::PureMsa), 36864);
        let cm = CostModel::new(4, 4, 4, 2, 4, 4).unwrap();
        assert_eq!(flops_mixing(&cm, MixingKind::AxialMlp), 7680);
        assert_eq!(flops_mixing(&cm, MixingKind::DenseMlp), 9728);
    }

    #[test]
    fn single_window_matches_pure() {
        let cm = CostModel::new(4, 4, 2, 8, 4, 4).unwrap();
        assert_eq!(flops_attention(&cm, AttentionKind::WindowMsa), flops_attention(&cm, AttentionKind::PureMsa));
    }

    #[test]
    fn window_larger_than_slice_is_invalid() {
        assert!(CostModel::new(2, 2, 2, 4, 4, 4).is_err());
        assert!(CostModel::new(0, 2, 2, 4, 1, 4).is_err());
    }

    #[test]
    fn linear_and_rpe_counts() {
        assert_eq!(linear(96, 384, true), 37248);
        assert_eq!(attention_core(8, 3, 4) - linear(8, 8, true), 49 * 3);
    }

    #[test]
    fn groups() {
        assert_eq!(group_of("enc.2.5.shuffle.pure.attn.rpe"), "enc.2.5");
        assert_eq!(group_of("skip.0.attn.proj.weight"), "skip.0");
        assert_eq!(group_of("head.out.bias"), "head");
        assert_eq!(group_of("stem.0.conv.weight"), "stem");
    }

    #[test]
    fn report_totals_add_up() {
        let cfg = PyramidConfig::desk();
        let r = cost_report(&cfg).unwrap();
        assert_eq!(r.total_params(), count_params(&cfg).values().sum::<u128>());
        assert_eq!(r.stages.len(), 4);
        assert_eq!(r.stages[3].window, 1);
        assert!(r.render_kv().lines().all(|l| l.contains('=')));
    }
}
