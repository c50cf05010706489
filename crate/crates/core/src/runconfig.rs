//! Plain-text `key=value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key may appear at most
//! once; unknown keys are rejected. `preset` is applied first, so the model
//! overrides (`side`, `channels`, `blocks`, `heads`, `window`, `mlp_ratio`)
//! refine it regardless of their position in the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::block::{Ablation, AsesMode};
use crate::error::{Error, Result};
use crate::network::{PyramidConfig, SkipKind};
use crate::synth::Task;
use crate::train::TrainOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Preset::Tiny, Preset::Desk, Preset::Paper].into_iter().find(|p| p.name() == s)
    }

    pub fn model(self) -> PyramidConfig {
        match self {
            Preset::Tiny => PyramidConfig::tiny(),
            Preset::Desk => PyramidConfig::desk(),
            Preset::Paper => PyramidConfig::paper(),
        }
    }
}

/// Recognised keys, in the order `render` writes them.
pub const KEYS: [&str; 20] = [
    "preset",
    "side",
    "channels",
    "blocks",
    "heads",
    "window",
    "mlp_ratio",
    "ases",
    "skip",
    "ablate",
    "task",
    "samples",
    "batch",
    "steps",
    "lr",
    "seed",
    "eval_every",
    "stop_dice",
    "precision",
    "out",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: PyramidConfig,
    pub task: Task,
    /// Number of synthetic training volumes.
    pub samples: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub stop_dice: Option<f64>,
    pub precision: Precision,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opts = TrainOptions::default();
        RunConfig {
            preset: Preset::Desk,
            model: PyramidConfig::desk(),
            task: Task::BinarySphere,
            samples: 4,
            batch: opts.batch,
            steps: opts.steps,
            lr: opts.lr,
            seed: opts.seed,
            eval_every: opts.eval_every,
            stop_dice: opts.stop_dice,
            precision: Precision::F32,
            out: PathBuf::from("run"),
        }
    }
}

fn value<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| value(key, x.trim())).collect()
}

fn named<V>(key: &str, v: &str, parse: impl Fn(&str) -> Option<V>) -> Result<V> {
    parse(v).ok_or_else(|| Error::Config(format!("{key}: unknown value `{v}`")))
}

fn join(xs: impl Iterator<Item = usize>) -> String {
    xs.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if pairs.insert(k, v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        let mut cfg = RunConfig::default();
        for key in KEYS {
            if let Some(v) = pairs.get(key) {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one setting. Setting `preset` resets the model to that preset.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let stages = self.model.stages.len();
        let per_stage = |xs: Vec<usize>| -> Result<Vec<usize>> {
            match xs.len() {
                1 => Ok(vec![xs[0]; stages]),
                n if n == stages => Ok(xs),
                n => Err(Error::Config(format!("{key}: {n} values for {stages} stages"))),
            }
        };
        match key {
            "preset" => {
                self.preset = named(key, v, Preset::parse)?;
                let keep = (self.model.ases, self.model.skip, self.model.ablation);
                self.model = self.preset.model();
                (self.model.ases, self.model.skip, self.model.ablation) = keep;
            }
            "side" => self.model.input_side = value(key, v)?,
            "channels" => {
                // the channel list fixes the stage count
                let xs = list(key, v)?;
                let template = *self.model.stages.last().unwrap();
                self.model.stages.resize(xs.len(), template);
                for (i, (st, c)) in self.model.stages.iter_mut().zip(xs).enumerate() {
                    st.channels = c;
                    st.divisor = crate::network::STEM_DIVISOR << i;
                }
            }
            "blocks" => {
                for (st, b) in self.model.stages.iter_mut().zip(per_stage(list(key, v)?)?) {
                    st.blocks = b;
                }
            }
            "heads" => {
                for (st, h) in self.model.stages.iter_mut().zip(per_stage(list(key, v)?)?) {
                    st.heads = h;
                }
            }
            "window" => {
                for (st, w) in self.model.stages.iter_mut().zip(per_stage(list(key, v)?)?) {
                    st.window = w;
                }
            }
            "mlp_ratio" => {
                for (st, r) in self.model.stages.iter_mut().zip(per_stage(list(key, v)?)?) {
                    st.mlp_ratio = r;
                }
            }
            "ases" => self.model.ases = named(key, v, AsesMode::parse)?,
            "skip" => self.model.skip = named(key, v, SkipKind::parse)?,
            "ablate" => self.model.ablation = named(key, v, Ablation::parse)?,
            "task" => self.task = named(key, v, Task::parse)?,
            "samples" => self.samples = value(key, v)?,
            "batch" => self.batch = value(key, v)?,
            "steps" => self.steps = value(key, v)?,
            "lr" => self.lr = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            "eval_every" => self.eval_every = value(key, v)?,
            "stop_dice" => self.stop_dice = if v == "none" { None } else { Some(value(key, v)?) },
            "precision" => self.precision = named(key, v, Precision::parse)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        self.model.out_channels = self.task.classes();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.input_side < 8 {
            return Err(Error::Config(format!("side {} too small for synthetic shapes", self.model.input_side)));
        }
        if self.samples == 0 || self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("samples, batch and steps must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if let Some(d) = self.stop_dice {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("stop_dice {d} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            eval_every: self.eval_every,
            stop_dice: self.stop_dice,
        }
    }

    /// Every key, in schema order; `parse(render())` reproduces `self`.
    pub fn render(&self) -> String {
        let st = &self.model.stages;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        kv("preset", self.preset.name().into());
        kv("side", self.model.input_side.to_string());
        kv("channels", join(st.iter().map(|s| s.channels)));
        kv("blocks", join(st.iter().map(|s| s.blocks)));
        kv("heads", join(st.iter().map(|s| s.heads)));
        kv("window", join(st.iter().map(|s| s.window)));
        kv("mlp_ratio", join(st.iter().map(|s| s.mlp_ratio)));
        kv("ases", self.model.ases.name().into());
        kv("skip", self.model.skip.name().into());
        kv("ablate", self.model.ablation.name().into());
        kv("task", self.task.name());
        kv("samples", self.samples.to_string());
        kv("batch", self.batch.to_string());
        kv("steps", self.steps.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("seed", self.seed.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("stop_dice", self.stop_dice.map_or("none".into(), |d| format!("{d:?}")));
        kv("precision", self.precision.name().into());
        kv("out", self.out.display().to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_run() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.model, PyramidConfig::desk());
        assert_eq!((c.batch, c.steps, c.lr), (4, 300, 5e-4));
    }

    #[test]
    fn render_round_trips() {
        let text = "# comment\nskip = catskip\npreset=tiny\nablate=dense-mlp\ntask=multi-blob-3\nstop_dice=0.9\nchannels=4,8\nheads=1,2\nblocks=1\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.model.stages.len(), 2);
        assert_eq!(c.model.skip, SkipKind::CatSkip);
        assert_eq!(c.model.out_channels, 4);
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "colour=red",
            "seed=1\nseed=2",
            "seed",
            "batch=x",
            "ases=maybe",
            "side=36",
            "heads=3",
            "lr=-1",
            "blocks=1,2",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
