//! Segmentation loss, the optimizer loop and train-set evaluation.

use std::io::Write;

use rand::seq::SliceRandom;

use crate::error::{Error, Result, TensorError};
use crate::metrics::{self, MaskVolume};
use crate::network::{build_model, Model, PyramidConfig};
use crate::nn::{seeded_rng, IndexCache, Mode, Session};
use crate::synth::{self, Sample};
use crate::tensor::{Adam, AdamConfig, Real, Tensor, Var};

pub const DICE_SMOOTH: f64 = 1.0;

/// One-hot `[P, K]` encoding of `labels`.
pub fn one_hot<T: Real>(labels: &[u8], classes: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l as usize] = T::one();
    }
    Tensor::new(&[labels.len(), classes], data).unwrap()
}

/// `0.5 · soft Dice loss + 0.5 · voxel cross-entropy`. The Dice term is
/// averaged over foreground classes, each summed over the whole batch.
pub fn segmentation_loss<T: Real>(
    s: &mut Session<'_, T>,
    logits: Var,
    labels: &[u8],
    classes: usize,
) -> Result<Var, TensorError> {
    let p = labels.len();
    if s.g.value(logits).len() != p * classes || classes < 2 {
        return Err(TensorError::Shape {
            op: "segmentation_loss",
            detail: format!("{:?} logits for {p} labels of {classes} classes", s.g.shape(logits)),
        });
    }
    let flat = s.g.reshape(logits, &[p, classes])?;
    let logp = s.g.log_softmax(flat)?;
    let target = s.input(one_hot(labels, classes));
    let picked = s.g.mul(logp, target)?;
    let nll = s.g.sum_all(picked)?;
    let ce = s.g.scale(nll, -T::one() / T::of(p as f64))?;

    let probs = s.g.unary(logp, crate::tensor::UnaryKind::Exp)?;
    let overlap = s.g.mul(probs, target)?;
    let inter = s.g.sum_axis(overlap, 0)?;
    let psum = s.g.sum_axis(probs, 0)?;
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l as usize] += 1);
    let eps = T::of(DICE_SMOOTH);
    let gsum = s.input(Tensor::from_fn(&[1, classes], |k| T::of(counts[k] as f64) + eps));
    let num = s.g.scale(inter, T::of(2.0))?;
    let num = s.g.add_scalar(num, eps)?;
    let den = s.g.add(psum, gsum)?;
    let inv = s.g.unary(den, crate::tensor::UnaryKind::Recip)?;
    let dice = s.g.mul(num, inv)?;
    let fg = s.g.narrow(dice, 1, 1, classes - 1)?;
    let mean_dice = s.g.mean_all(fg)?;
    let dice_loss = s.g.scale(mean_dice, -T::one())?;
    let dice_loss = s.g.add_scalar(dice_loss, T::one())?;

    let total = s.g.add(dice_loss, ce)?;
    s.g.scale(total, T::of(0.5))
}

/// Per-voxel argmax over the last axis of `[.., K]` logits.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let k = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// Mean over foreground classes of the per-class Dice between label maps.
pub fn label_dice(side: usize, pred: &[u8], gt: &[u8], classes: usize) -> Result<f64> {
    let dims = [side; 3];
    let mut total = 0.0;
    for c in 1..classes as u8 {
        let p = MaskVolume::new(dims, pred.iter().map(|&l| l == c).collect())?;
        let g = MaskVolume::new(dims, gt.iter().map(|&l| l == c).collect())?;
        total += metrics::dice(&p, &g)?;
    }
    Ok(total / (classes - 1) as f64)
}

/// A model with its optimizer state and a shared index cache.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub classes: usize,
    cache: IndexCache,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, classes: usize, lr: f64) -> Self {
        Trainer {
            model,
            adam: Adam::new(AdamConfig { lr, ..AdamConfig::default() }),
            classes,
            cache: IndexCache::new(),
        }
    }

    /// One forward/backward/update on a batch; returns the loss.
    pub fn step(&mut self, input: Tensor<T>, labels: &[u8]) -> Result<f64> {
        let Model { net, store } = &mut self.model;
        let mut s = Session::with_cache(store, Mode::Train, true, self.cache.clone());
        let x = s.input(input);
        let y = net.forward(&mut s, x)?;
        let loss = segmentation_loss(&mut s, y, labels, self.classes)?;
        let value = s.g.data(loss)[0].as_f64();
        let mut tape = s.into_tape();
        tape.backward_into(loss, store)?;
        tape.commit_stats(store);
        store.adam_step(&mut self.adam)?;
        if let Some(p) = store.params().iter().find(|p| !p.value.is_finite()) {
            return Err(Error::Numeric(format!("parameter `{}` became non-finite after the update", p.name)));
        }
        Ok(value)
    }

    /// Eval-mode logits.
    pub fn logits(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::with_cache(&self.model.store, Mode::Eval, false, self.cache.clone());
        let x = s.input(input);
        let y = self.model.net.forward(&mut s, x)?;
        Ok(s.g.value(y).clone())
    }

    pub fn predict(&self, input: Tensor<T>) -> Result<Vec<u8>> {
        Ok(argmax_labels(&self.logits(input)?))
    }

    /// Mean per-case Dice over `samples`, one case per forward.
    pub fn dice_on(&self, samples: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for smp in samples {
            let (x, labels) = synth::batch(&[smp]);
            let pred = self.predict(x.cast())?;
            total += label_dice(smp.side, &pred, &labels, self.classes)?;
        }
        Ok(total / samples.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Evaluate train-set Dice every this many steps (and after the last).
    pub eval_every: usize,
    /// Stop once train Dice reaches this value (if set).
    pub stop_dice: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { steps: 300, batch: 4, lr: 5e-4, seed: 0, eval_every: 10, stop_dice: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    /// `(step, train Dice)` after that many updates.
    pub dice: Vec<(usize, f64)>,
    pub best_dice: f64,
    pub best_step: usize,
    /// First evaluation step at which `stop_dice` was met.
    pub reached: Option<usize>,
}

/// Trains `trainer` on `data`, writing one log line per step and per evaluation.
/// `on_best` is called whenever train Dice improves.
#[allow(clippy::type_complexity)]
pub fn train_loop<T: Real>(
    trainer: &mut Trainer<T>,
    data: &[Sample],
    opts: &TrainOptions,
    log: &mut dyn Write,
    on_best: &mut dyn FnMut(&Trainer<T>, usize, f64) -> Result<()>,
) -> Result<TrainSummary> {
    if data.is_empty() || opts.batch == 0 {
        return Err(Error::Config("training needs data and a positive batch size".into()));
    }
    let mut rng = seeded_rng(opts.seed ^ 0xba7c4);
    let mut order: Vec<usize> = Vec::new();
    let mut summary = TrainSummary {
        losses: Vec::with_capacity(opts.steps),
        dice: Vec::new(),
        best_dice: f64::NEG_INFINITY,
        best_step: 0,
        reached: None,
    };
    let every = opts.eval_every.max(1);
    for step in 1..=opts.steps {
        let mut picks = Vec::with_capacity(opts.batch);
        while picks.len() < opts.batch.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            picks.push(&data[order.pop().unwrap()]);
        }
        let (x, labels) = synth::batch(&picks);
        let loss = trainer.step(x.cast(), &labels)?;
        writeln!(log, "step={step} loss={loss:?}")?;
        summary.losses.push(loss);
        if step % every == 0 || step == opts.steps {
            let d = trainer.dice_on(data)?;
            writeln!(log, "step={step} train_dice={d:?}")?;
            summary.dice.push((step, d));
            if d > summary.best_dice {
                summary.best_dice = d;
                summary.best_step = step;
                on_best(trainer, step, d)?;
            }
            if let Some(target) = opts.stop_dice {
                if d >= target {
                    summary.reached = Some(step);
                    break;
                }
            }
        }
    }
    Ok(summary)
}

/// Builds a model for `config` and trains it on `data`.
pub fn train_fresh<T: Real>(
    config: &PyramidConfig,
    classes: usize,
    data: &[Sample],
    opts: &TrainOptions,
    log: &mut dyn Write,
) -> Result<(Trainer<T>, TrainSummary)> {
    let model = build_model::<T>(config, opts.seed)?;
    let mut trainer = Trainer::new(model, classes, opts.lr);
    let summary = train_loop(&mut trainer, data, opts, log, &mut |_, _, _| Ok(()))?;
    Ok((trainer, summary))
}
