//! Central-difference gradient audits in double precision.
//!
//! The scalar under test is always `Σ w ⊙ f(x)` with fixed random weights
//! `w`, so every output element feeds the gradient with a nonzero weight.
//! Analytic gradients come from the `f64` tape. The central differences are
//! evaluated in double-double arithmetic at the same `f64` parameter values,
//! which keeps their rounding noise (otherwise ~1e-11 absolute) far below
//! the relative-error floor, including on parameters whose true gradient is
//! exactly zero (key biases under softmax, biases ahead of batch norm).

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{WindowAttention, WindowGrid};
use crate::error::{Error, TensorError};
use crate::network::{build_model, PyramidConfig};
use crate::nn::{
    seeded_rng, BatchNorm, Conv2d, Conv3d, ConvTranspose3d, DepthwiseConv2d, LayerNorm, Linear, Mode, ParamBuilder,
    ParamId, ParamStore, Session,
};
use crate::tensor::{DoubleDouble, NodeKind, Real, Tensor, UnaryKind, Var};

pub const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst relative error over the scalars checked at one site (an input or a
/// named parameter tensor).
#[derive(Clone, Debug, PartialEq)]
pub struct SiteReport {
    pub site: String,
    pub checked: usize,
    pub worst: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AuditReport {
    pub tolerance: f64,
    pub sites: Vec<SiteReport>,
    /// Parameters that received no gradient from the audited loss.
    pub disconnected: Vec<String>,
}

impl AuditReport {
    pub fn new(tolerance: f64) -> Self {
        AuditReport { tolerance, ..Default::default() }
    }

    pub fn failures(&self) -> impl Iterator<Item = &SiteReport> {
        // NaN must count as a failure
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        self.sites.iter().filter(move |s| !(s.worst < self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn worst(&self) -> f64 {
        self.sites.iter().map(|s| s.worst).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.sites.iter().map(|s| s.checked).sum()
    }

    pub fn extend(&mut self, other: AuditReport) {
        self.sites.extend(other.sites);
        self.disconnected.extend(other.disconnected);
    }

    /// One `key=value` line per site.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.sites {
            let status = if s.worst < self.tolerance { "pass" } else { "FAIL" };
            let _ =
                writeln!(out, "site={} checked={} worst_rel_err={:.3e} status={status}", s.site, s.checked, s.worst);
        }
        for d in &self.disconnected {
            let _ = writeln!(out, "site={d} disconnected=true");
        }
        out
    }
}

/// How many scalars to probe and how.
#[derive(Clone, Debug)]
pub struct Probe {
    pub step: f64,
    pub mode: Mode,
    /// `None`: every scalar of every input and parameter. `Some(n)`: at least
    /// one scalar per parameter tensor plus random extras up to `n` total;
    /// inputs are skipped.
    pub samples: Option<usize>,
    pub seed: u64,
    pub fault: Option<NodeKind>,
}

impl Default for Probe {
    fn default() -> Self {
        Probe { step: FD_STEP, mode: Mode::Train, samples: None, seed: 17, fault: None }
    }
}

pub type Forward<'f, T> = dyn Fn(&mut Session<'_, T>, &[Var]) -> Result<Var, TensorError> + 'f;

/// The same forward body instantiated for the tape (`f64`) and for the
/// oracle (`DoubleDouble`).
pub struct ForwardPair<'f> {
    pub tape: Box<Forward<'f, f64>>,
    pub oracle: Box<Forward<'f, DoubleDouble>>,
}

/// Builds a [`ForwardPair`] from one closure body.
#[macro_export]
macro_rules! forward_pair {
    (|$s:ident, $x:ident| $body:expr) => {
        $crate::gradcheck::ForwardPair {
            tape: Box::new(|$s: &mut $crate::nn::Session<'_, f64>, $x: &[$crate::tensor::Var]| $body),
            oracle: Box::new(
                |$s: &mut $crate::nn::Session<'_, $crate::tensor::DoubleDouble>, $x: &[$crate::tensor::Var]| $body,
            ),
        }
    };
}

fn weighted_loss(
    s: &mut Session<'_, f64>,
    y: Var,
    weights: &mut Option<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Var, TensorError> {
    let shape = s.g.shape(y).to_vec();
    let w = weights.get_or_insert_with(|| Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))).clone();
    let w = s.input(w);
    let p = s.g.mul(y, w)?;
    s.g.sum_all(p)
}

fn eval_loss<T: Real>(
    store: &ParamStore<T>,
    inputs: &[Tensor<T>],
    mode: Mode,
    weights: &Tensor<T>,
    forward: &Forward<'_, T>,
) -> Result<T, TensorError> {
    let mut s = Session::new(store, mode, false);
    let xs: Vec<Var> = inputs.iter().map(|t| s.input(t.clone())).collect();
    let y = forward(&mut s, &xs)?;
    let w = s.input(weights.clone());
    let p = s.g.mul(y, w)?;
    let l = s.g.sum_all(p)?;
    Ok(s.g.data(l)[0])
}

/// Compares analytic gradients of `forward` against central differences for
/// the inputs and the parameters in `store`. Sites are prefixed by `name`.
pub fn audit_fn(
    name: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    probe: &Probe,
    forward: &ForwardPair<'_>,
) -> Result<AuditReport, TensorError> {
    let (tape_fwd, oracle_fwd) = (&*forward.tape, &*forward.oracle);
    let mut rng = seeded_rng(probe.seed);
    let mut weights = None;
    let mut s = Session::new(store, probe.mode, true);
    let xs: Vec<Var> = inputs.iter().map(|t| s.g.leaf(t.clone(), true)).collect();
    let y = tape_fwd(&mut s, &xs)?;
    let loss = weighted_loss(&mut s, y, &mut weights, &mut rng)?;
    let weights = weights.unwrap();
    let mut tape = s.into_tape();
    if let Some(kind) = probe.fault {
        tape.g.inject_backward_fault(kind);
    }
    let grads = tape.g.backward(loss)?;

    let mut report = AuditReport::new(0.0);
    let h = DoubleDouble::from_f64(probe.step);
    let two_h = h + h;
    let weights = weights.cast::<DoubleDouble>();
    let inputs_dd: Vec<Tensor<DoubleDouble>> = inputs.iter().map(Tensor::cast).collect();
    let mut work = store.cast::<DoubleDouble>();
    let mut x_work = inputs_dd.clone();
    let central = |up: DoubleDouble, down: DoubleDouble| ((up - down) / two_h).as_f64();

    if probe.samples.is_none() {
        for (i, &xv) in xs.iter().enumerate() {
            let analytic = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
            let mut worst = 0.0f64;
            for (j, &want) in analytic.iter().enumerate() {
                let orig = x_work[i].data()[j];
                x_work[i].data_mut()[j] = orig + h;
                let up = eval_loss(&work, &x_work, probe.mode, &weights, oracle_fwd)?;
                x_work[i].data_mut()[j] = orig - h;
                let down = eval_loss(&work, &x_work, probe.mode, &weights, oracle_fwd)?;
                x_work[i].data_mut()[j] = orig;
                worst = worst.max(relative_error(want, central(up, down)));
            }
            report.sites.push(SiteReport { site: format!("{name}/input{i}"), checked: inputs[i].len(), worst });
        }
    }

    let ids: Vec<ParamId> = store.ids().collect();
    let picks = pick_scalars(store, &ids, probe.samples, &mut rng);
    for (id, scalars) in ids.iter().zip(picks) {
        if scalars.is_empty() {
            continue;
        }
        let param = store.get(*id);
        let Some(bound) = tape.bound(*id) else {
            // unused by this forward; only meaningful when auditing a whole model
            if probe.samples.is_some() {
                report.disconnected.push(param.name.clone());
            }
            continue;
        };
        let analytic = match grads.get(bound) {
            Some(g) => g.to_vec(),
            None => {
                report.disconnected.push(param.name.clone());
                vec![0.0; param.value.len()]
            }
        };
        let mut worst = 0.0f64;
        for &j in &scalars {
            let orig = work.get(*id).value.data()[j];
            work.get_mut(*id).value.data_mut()[j] = orig + h;
            let up = eval_loss(&work, &inputs_dd, probe.mode, &weights, oracle_fwd)?;
            work.get_mut(*id).value.data_mut()[j] = orig - h;
            let down = eval_loss(&work, &inputs_dd, probe.mode, &weights, oracle_fwd)?;
            work.get_mut(*id).value.data_mut()[j] = orig;
            worst = worst.max(relative_error(analytic[j], central(up, down)));
        }
        report.sites.push(SiteReport { site: format!("{name}/{}", param.name), checked: scalars.len(), worst });
    }
    Ok(report)
}

/// Whole-network audit: at least `samples` parameter scalars (one per tensor
/// plus random extras) of a freshly built `config` model, batch of two
/// random volumes, train mode.
pub fn network_audit(config: &PyramidConfig, seed: u64, samples: usize) -> Result<AuditReport, Error> {
    let mut model = build_model::<f64>(config, seed)?;
    spread_params(&mut model.store, seed ^ 0x5eed);
    let mut rng = seeded_rng(seed ^ 0xa0d1);
    let side = config.input_side;
    let x = rand_tensor(&mut rng, &[2, side, side, side, config.in_channels], -1.0, 1.0);
    let probe = Probe { samples: Some(samples), seed, ..Probe::default() };
    let net = &model.net;
    let mut report = audit_fn("network", &model.store, &[x], &probe, &forward_pair!(|s, xs| net.forward(s, xs[0])))?;
    report.tolerance = NETWORK_TOLERANCE;
    Ok(report)
}

fn pick_scalars(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    samples: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let lens: Vec<usize> = ids.iter().map(|&id| store.get(id).value.len()).collect();
    match samples {
        None => lens.iter().map(|&n| (0..n).collect()).collect(),
        Some(total) => {
            let mut picks: Vec<Vec<usize>> = lens.iter().map(|&n| vec![rng.random_range(0..n)]).collect();
            let all: usize = lens.iter().sum();
            let mut have = ids.len();
            let target = total.min(all);
            while have < target {
                let mut r = rng.random_range(0..all);
                let mut t = 0;
                while r >= lens[t] {
                    r -= lens[t];
                    t += 1;
                }
                if !picks[t].contains(&r) {
                    picks[t].push(r);
                    have += 1;
                }
            }
            picks.iter_mut().for_each(|p| p.sort_unstable());
            picks
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero (for kinks and poles).
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn rescale_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
}

fn lift_scales(store: &mut ParamStore<f64>) {
    for p in store.params_mut() {
        if p.name.ends_with("gamma") {
            p.value.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
    }
}

/// Replaces every parameter with `U(-0.6, 0.6)` (norm scales shifted by 1)
/// so that no gradient path is numerically negligible.
pub fn spread_params(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = seeded_rng(seed);
    rescale_params(store, &mut rng);
    lift_scales(store);
}

/// Every graph primitive and layer, each on a small random instance.
pub fn primitive_audit(seed: u64, fault: Option<NodeKind>) -> Result<AuditReport, TensorError> {
    let mut rng = seeded_rng(seed);
    let probe = Probe { seed, fault, ..Probe::default() };
    let empty = ParamStore::<f64>::new();
    let mut report = AuditReport::new(PRIMITIVE_TOLERANCE);
    let mut run = |name: &str, store: &ParamStore<f64>, inputs: Vec<Tensor<f64>>, f: &ForwardPair<'_>| {
        audit_fn(name, store, &inputs, &probe, f).map(|r| report.extend(r))
    };

    let r = &mut rng;
    run(
        "matmul",
        &empty,
        vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 5], -1.0, 1.0)],
        &forward_pair!(|s, x| { s.g.matmul(x[0], x[1]) }),
    )?;
    run(
        "matmul_batched_nt",
        &empty,
        vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[2, 5, 4], -1.0, 1.0)],
        &forward_pair!(|s, x| s.g.matmul_nt(x[0], x[1])),
    )?;
    run(
        "matmul_shared",
        &empty,
        vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)],
        &forward_pair!(|s, x| s.g.matmul(x[0], x[1])),
    )?;
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let f = forward_pair!(|s, x| match op {
            0 => s.g.add(x[0], x[1]),
            1 => s.g.sub(x[0], x[1]),
            _ => s.g.mul(x[0], x[1]),
        });
        run(name, &empty, vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0)], &f)?;
        run(
            &format!("{name}_broadcast"),
            &empty,
            vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[3, 1], -1.0, 1.0)],
            &f,
        )?;
    }
    run(
        "scale",
        &empty,
        vec![rand_tensor(r, &[5], -1.0, 1.0)],
        &forward_pair!(|s, x| s.g.scale(x[0], Real::of(-1.7))),
    )?;
    run(
        "add_scalar",
        &empty,
        vec![rand_tensor(r, &[5], -1.0, 1.0)],
        &forward_pair!(|s, x| s.g.add_scalar(x[0], Real::of(0.3))),
    )?;
    for kind in [UnaryKind::Sigmoid, UnaryKind::Gelu, UnaryKind::Relu, UnaryKind::Exp, UnaryKind::Square] {
        let x = rand_away_from_zero(r, &[3, 4]);
        run(&format!("{kind:?}").to_lowercase(), &empty, vec![x], &forward_pair!(|s, x| s.g.unary(x[0], kind)))?;
    }
    for kind in [UnaryKind::Ln, UnaryKind::Recip, UnaryKind::Sqrt] {
        let x = rand_tensor(r, &[3, 4], 0.3, 2.0);
        run(&format!("{kind:?}").to_lowercase(), &empty, vec![x], &forward_pair!(|s, x| s.g.unary(x[0], kind)))?;
    }
    run("softmax", &empty, vec![rand_tensor(r, &[3, 5], -2.0, 2.0)], &forward_pair!(|s, x| s.g.softmax(x[0])))?;
    run("log_softmax", &empty, vec![rand_tensor(r, &[3, 5], -2.0, 2.0)], &forward_pair!(|s, x| s.g.log_softmax(x[0])))?;
    run("sum_axis", &empty, vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], &forward_pair!(|s, x| s.g.sum_axis(x[0], 1)))?;
    run(
        "mean_axis",
        &empty,
        vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)],
        &forward_pair!(|s, x| s.g.mean_axis(x[0], 2)),
    )?;
    // distinct values spaced well beyond the step: no ties across the kink
    let spaced = {
        let mut v: Vec<f64> = (0..24).map(|i| i as f64 * 0.1 - 1.2).collect();
        for i in (1..v.len()).rev() {
            v.swap(i, r.random_range(0..=i));
        }
        Tensor::new(&[2, 3, 4], v).unwrap()
    };
    run("max_axis", &empty, vec![spaced.clone()], &forward_pair!(|s, x| s.g.max_axis(x[0], 1)))?;
    run("channel_max", &empty, vec![spaced], &forward_pair!(|s, x| s.g.max_axis(x[0], 2)))?;
    run(
        "reshape_permute",
        &empty,
        vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)],
        &forward_pair!(|s, x| {
            let y = s.g.reshape(x[0], &[6, 4])?;
            let y = s.g.reshape(y, &[2, 3, 4])?;
            s.permute(y, &[2, 0, 1])
        }),
    )?;
    run(
        "concat_split",
        &empty,
        vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 2], -1.0, 1.0)],
        &forward_pair!(|s, x| {
            let c = s.g.concat(&[x[0], x[1]], 1)?;
            let parts = s.g.split(c, 1, &[1, 4])?;
            let sq = s.g.mul(parts[1], parts[1])?;
            let sum = s.g.sum_axis(sq, 1)?;
            s.g.add(parts[0], sum)
        }),
    )?;

    let mut norm_store = ParamStore::new();
    let (bn, ln) = {
        let mut init = seeded_rng(seed ^ 1);
        let mut pb = ParamBuilder::new(&mut norm_store, &mut init);
        (BatchNorm::new(&mut pb.sub("bn"), 3), LayerNorm::new(&mut pb.sub("ln"), 3))
    };
    rescale_params(&mut norm_store, r);
    lift_scales(&mut norm_store);
    run(
        "batch_norm_train",
        &norm_store,
        vec![rand_tensor(r, &[4, 2, 3], -1.0, 1.0)],
        &forward_pair!(|s, x| { bn.forward(s, x[0]) }),
    )?;
    let (mean, var) = ([0.2, -0.1, 0.05], [0.7, 1.3, 0.4]);
    run(
        "batch_norm_eval",
        &norm_store,
        vec![rand_tensor(r, &[4, 3], -1.0, 1.0)],
        &forward_pair!(|s, x| {
            let (g, b) = (s.p(bn.gamma), s.p(bn.beta));
            s.g.batch_norm_eval(
                x[0],
                g,
                b,
                &mean.map(Real::of),
                &var.map(Real::of),
                Real::of(crate::nn::params::NORM_EPS),
            )
        }),
    )?;
    run(
        "layer_norm",
        &norm_store,
        vec![rand_tensor(r, &[4, 3], -1.0, 1.0)],
        &forward_pair!(|s, x| ln.forward(s, x[0])),
    )?;

    let mut conv_store = ParamStore::new();
    let (lin, conv, pw, dw, c3, tc) = {
        let mut init = seeded_rng(seed ^ 2);
        let mut pb = ParamBuilder::new(&mut conv_store, &mut init);
        (
            Linear::new(&mut pb.sub("linear"), 3, 4, true),
            Conv2d::new(&mut pb.sub("conv2d"), 2, 3, 3, 2, 1),
            Conv2d::new(&mut pb.sub("pwconv"), 3, 2, 1, 1, 0),
            DepthwiseConv2d::new(&mut pb.sub("dwconv"), 2, 5),
            Conv3d::new(&mut pb.sub("conv3d"), 2, 2, 3, 2, 1, true),
            ConvTranspose3d::new(&mut pb.sub("tconv3d"), 2, 2, true),
        )
    };
    rescale_params(&mut conv_store, r);
    run("linear", &conv_store, vec![rand_tensor(r, &[2, 3], -1.0, 1.0)], &forward_pair!(|s, x| lin.forward(s, x[0])))?;
    run(
        "conv2d",
        &conv_store,
        vec![rand_tensor(r, &[1, 5, 5, 2], -1.0, 1.0)],
        &forward_pair!(|s, x| conv.forward(s, x[0])),
    )?;
    run(
        "pwconv2d",
        &conv_store,
        vec![rand_tensor(r, &[1, 3, 3, 3], -1.0, 1.0)],
        &forward_pair!(|s, x| pw.forward(s, x[0])),
    )?;
    run(
        "dwconv2d",
        &conv_store,
        vec![rand_tensor(r, &[1, 4, 4, 2], -1.0, 1.0)],
        &forward_pair!(|s, x| dw.forward(s, x[0])),
    )?;
    run(
        "conv3d",
        &conv_store,
        vec![rand_tensor(r, &[1, 4, 4, 4, 2], -1.0, 1.0)],
        &forward_pair!(|s, x| { c3.forward(s, x[0]) }),
    )?;
    run(
        "tconv3d",
        &conv_store,
        vec![rand_tensor(r, &[1, 2, 2, 2, 2], -1.0, 1.0)],
        &forward_pair!(|s, x| { tc.forward(s, x[0]) }),
    )?;

    let mut attn_store = ParamStore::new();
    let attn = {
        let mut init = seeded_rng(seed ^ 3);
        let mut pb = ParamBuilder::new(&mut attn_store, &mut init);
        WindowAttention::new(&mut pb.sub("wmsa"), 4, 2, 2)?
    };
    rescale_params(&mut attn_store, r);
    let grid = WindowGrid::new(2, 2, 2)?;
    run(
        "w_msa",
        &attn_store,
        vec![rand_tensor(r, &[1, 2, 2, 4], -1.0, 1.0)],
        &forward_pair!(|s, x| { attn.forward(s, x[0], &grid) }),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let report = primitive_audit(5, None).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert!(report.disconnected.is_empty());
        assert!(report.sites.len() > 30);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        for kind in [NodeKind::Softmax, NodeKind::MatMul, NodeKind::Gather] {
            let report = primitive_audit(5, Some(kind)).unwrap();
            assert!(!report.passed(), "fault in {kind:?} went unnoticed");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
    }
}
