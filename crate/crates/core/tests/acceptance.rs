//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p shufflemixer --test acceptance`; pass criterion
//! numbers (e.g. `-- 2 6`) to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use shufflemixer::attention::{
    rotation_restore, transpose_shuffle, window_partition, window_reverse, WindowAttention, WindowGrid,
};
use shufflemixer::block::views::{rearrange_views, restore_view};
use shufflemixer::block::{Ablation, AsesMode, View};
use shufflemixer::complexity::{self, flops_attention, flops_mixing, AttentionKind, CostModel, MixingKind};
use shufflemixer::gradcheck::{network_audit, primitive_audit, NETWORK_TOLERANCE, PRIMITIVE_TOLERANCE};
use shufflemixer::io::{load_checkpoint, save_checkpoint};
use shufflemixer::metrics::{confusion, dice, doc, hd95, jaccard, MaskVolume};
use shufflemixer::network::{build_model, PyramidConfig, SkipKind};
use shufflemixer::nn::{seeded_rng, Mode, ParamBuilder, ParamStore, Session};
use shufflemixer::synth::{self, synth_dataset, Task};
use shufflemixer::train::{train_fresh, TrainOptions, Trainer};
use shufflemixer::{Real, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}

fn round_trips() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(1);
    let mut cases = 0;
    for config in [PyramidConfig::paper(), PyramidConfig::desk()] {
        for i in 0..config.stages.len() {
            let side = config.stage_side(i);
            let vol = random::<f32>(&mut rng, &[1, side, side, side, 2]);
            let stacks = rearrange_views(&vol).map_err(|e| e.to_string())?;
            for (view, stack) in View::ALL.iter().zip(&stacks) {
                let back = restore_view(stack, *view, vol.shape()).map_err(|e| e.to_string())?;
                if back.data() != vol.data() {
                    return Err(format!("restore of {view:?} differs at side {side}"));
                }
                let grid = WindowGrid::clamped(side, side, config.stages[i].window).map_err(|e| e.to_string())?;
                let w = window_partition(stack, &grid).map_err(|e| e.to_string())?;
                if window_reverse(&w, &grid).map_err(|e| e.to_string())?.data() != stack.data() {
                    return Err(format!("window reverse differs at side {side}"));
                }
                let t = transpose_shuffle(stack, &grid).map_err(|e| e.to_string())?;
                if rotation_restore(&t, &grid).map_err(|e| e.to_string())?.data() != stack.data() {
                    return Err(format!("rotation restore differs at side {side}"));
                }
                cases += 1;
            }
        }
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(1), format!("{cases} view stacks bit-exact in {took:.2?} (limit 1s)"))
}

/// Dense single-window attention over `[16, C]` tokens, written out longhand.
fn dense_attention(x: &[f64], c: usize, heads: usize, w: &dyn Fn(&str) -> Vec<f64>) -> Vec<f64> {
    let (t, m, dk) = (16, 4usize, c / heads);
    let (wqkv, bqkv, table, wo, bo) = (w("qkv.weight"), w("qkv.bias"), w("rpe"), w("proj.weight"), w("proj.bias"));
    let mut qkv = vec![0.0; t * 3 * c];
    for i in 0..t {
        for o in 0..3 * c {
            qkv[i * 3 * c + o] = bqkv[o] + (0..c).map(|k| x[i * c + k] * wqkv[k * 3 * c + o]).sum::<f64>();
        }
    }
    let mut merged = vec![0.0; t * c];
    for h in 0..heads {
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for (j, l) in logits.iter_mut().enumerate() {
                let dot: f64 = (0..dk).map(|d| qkv[i * 3 * c + h * dk + d] * qkv[j * 3 * c + c + h * dk + d]).sum();
                let dr = (i / m) as isize - (j / m) as isize + m as isize - 1;
                let dc = (i % m) as isize - (j % m) as isize + m as isize - 1;
                let row = (dr * (2 * m as isize - 1) + dc) as usize;
                *l = dot / (dk as f64).sqrt() + table[row * heads + h];
            }
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dk {
                merged[i * c + h * dk + d] =
                    (0..t).map(|j| e[j] / z * qkv[j * 3 * c + 2 * c + h * dk + d]).sum::<f64>();
            }
        }
    }
    let mut out = vec![0.0; t * c];
    for i in 0..t {
        for o in 0..c {
            out[i * c + o] = bo[o] + (0..c).map(|k| merged[i * c + k] * wo[k * c + o]).sum::<f64>();
        }
    }
    out
}

fn attention_error<T: Real>() -> Result<f64, String> {
    let (c, heads) = (8, 2);
    let mut store = ParamStore::<T>::new();
    let mut rng = seeded_rng(5);
    let attn =
        WindowAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), c, heads, 4).map_err(|e| e.to_string())?;
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v = T::of(rng.random_range(-0.5..0.5));
        }
    }
    let x = random::<T>(&mut rng, &[1, 4, 4, c]);
    let grid = WindowGrid::new(4, 4, 4).map_err(|e| e.to_string())?;
    let mut s = Session::new(&store, Mode::Eval, false);
    let xv = s.input(x.clone());
    let y = attn.forward(&mut s, xv, &grid).map_err(|e| e.to_string())?;
    let got: Vec<f64> = s.g.value(y).data().iter().map(|v| v.as_f64()).collect();
    let lookup = |suffix: &str| -> Vec<f64> {
        let p = store.params().iter().find(|p| p.name.ends_with(suffix)).expect(suffix);
        p.value.data().iter().map(|v| v.as_f64()).collect()
    };
    let xs: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let want = dense_attention(&xs, c, heads, &lookup);
    Ok(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

fn attention_oracle() -> Outcome {
    let e32 = attention_error::<f32>()?;
    let e64 = attention_error::<f64>()?;
    check(e32 < 1e-5 && e64 < 1e-10, format!("max |diff| f32 {e32:.2e} (limit 1e-5), f64 {e64:.2e} (limit 1e-10)"))
}

fn gradient_audit() -> Outcome {
    let start = Instant::now();
    let prim = primitive_audit(3, None).map_err(|e| e.to_string())?;
    if !prim.passed() {
        return Err(format!("primitive audit failed:\n{}", prim.render()));
    }
    let net = network_audit(&PyramidConfig::tiny(), 7, 200).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let ok = net.passed() && net.checked() >= 200 && took <= Duration::from_secs(600);
    let detail = format!(
        "primitives worst {:.2e} (limit {PRIMITIVE_TOLERANCE:.0e}); network worst {:.2e} over {} parameters (limit {NETWORK_TOLERANCE:.0e}); {took:.1?}",
        prim.worst(),
        net.worst(),
        net.checked()
    );
    if ok {
        Ok(detail)
    } else {
        Err(format!("{detail}\n{}", net.render()))
    }
}

fn complexity_formulas() -> Outcome {
    let a = CostModel::new(8, 8, 1, 4, 4, 1).map_err(|e| e.to_string())?;
    let b = CostModel::new(4, 4, 4, 2, 4, 4).map_err(|e| e.to_string())?;
    let hand = [
        flops_attention(&a, AttentionKind::WindowMsa),
        flops_attention(&a, AttentionKind::PureMsa),
        flops_mixing(&b, MixingKind::AxialMlp),
        flops_mixing(&b, MixingKind::DenseMlp),
    ];
    if hand != [12288, 36864, 7680, 9728] {
        return Err(format!("hand values {hand:?}"));
    }
    let mut rng = seeded_rng(4);
    let mut compared = (0, 0);
    for _ in 0..100 {
        let m = rng.random_range(1..=8u128);
        let h = m * rng.random_range(1..=8u128);
        let w = m * rng.random_range(1..=8u128);
        let cm = CostModel::new(h, w, rng.random_range(1..=64), rng.random_range(1..=256), m, rng.random_range(1..=4))
            .map_err(|e| e.to_string())?;
        if m * m < h * w {
            compared.0 += 1;
            if flops_attention(&cm, AttentionKind::WindowMsa) >= flops_attention(&cm, AttentionKind::PureMsa) {
                return Err(format!("W-MSA not below pure MSA at {cm:?}"));
            }
        }
        if cm.d + cm.c < cm.d * cm.c {
            compared.1 += 1;
            if flops_mixing(&cm, MixingKind::AxialMlp) >= flops_mixing(&cm, MixingKind::DenseMlp) {
                return Err(format!("A-MLP not below D-MLP at {cm:?}"));
            }
        }
    }
    Ok(format!(
        "hand values exact; orderings hold on 100 random models ({} attention, {} mixing comparisons)",
        compared.0, compared.1
    ))
}

fn parameter_audit() -> Outcome {
    let mut lines = Vec::new();
    for (name, base) in [("paper", PyramidConfig::paper()), ("desk", PyramidConfig::desk())] {
        for ases in [AsesMode::On, AsesMode::Off] {
            let config = PyramidConfig { ases, ..base.clone() };
            let model = build_model::<f32>(&config, 0).map_err(|e| e.to_string())?;
            let audit = complexity::audit(&config, &model.store);
            let total = audit.analytic;
            if !audit.passed() {
                return Err(format!("{name} ases={}: {:?}", ases.name(), audit.mismatches));
            }
            lines.push(format!("{name}/{} {total}", ases.name()));
        }
    }
    Ok(format!("analytic = instantiated: {}", lines.join(", ")))
}

fn metric_oracles() -> Outcome {
    let plane = |cells: &[(usize, usize)]| MaskVolume::from_fn([2, 2, 1], |i, j, _| cells.contains(&(i, j)));
    let c =
        confusion(&plane(&[(0, 0), (0, 1), (1, 0)]), &plane(&[(0, 1), (1, 0), (1, 1)])).map_err(|e| e.to_string())?;
    if (c.tp, c.fp, c.fn_) != (2, 1, 1) || (c.dice() - 2.0 / 3.0).abs() > 1e-15 || c.jaccard() != 0.5 {
        return Err(format!("2x2 case: {c:?}"));
    }
    let line = |xs: &[usize]| MaskVolume::from_fn([4, 1, 1], |i, _, _| xs.contains(&i));
    let (m1, m2) = (line(&[0]), line(&[0, 1, 2]));
    let unchanged = doc(&m1, &m1, &m2).map_err(|e| e.to_string())?;
    let toy = doc(&line(&[0, 1]), &m1, &m2).map_err(|e| e.to_string())?;
    if unchanged != 0.0 || toy != 0.5 {
        return Err(format!("doc: unchanged {unchanged}, toy {toy}"));
    }

    let cube = |o: usize| {
        MaskVolume::from_fn([5, 5, 5], move |i, j, k| {
            (o..o + 3).contains(&i) && (1..4).contains(&j) && (1..4).contains(&k)
        })
    };
    let (a, b) = (cube(1), cube(2));
    let got = hd95(&a, &b).map_err(|e| e.to_string())?;
    let want = brute_hd95(&a, &b);
    if (got - want).abs() > 1e-9 {
        return Err(format!("hd95 {got} vs brute force {want}"));
    }

    let mut rng = seeded_rng(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dims = [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6)];
        let (pa, pb) = (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95));
        let x = MaskVolume::from_fn(dims, |_, _, _| rng.random_bool(pa));
        let y = MaskVolume::from_fn(dims, |_, _, _| rng.random_bool(pb));
        let d = dice(&x, &y).map_err(|e| e.to_string())?;
        let j = jaccard(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    check(
        worst <= 1e-12,
        format!("2x2, Doc and HD95 ({got:.6}) oracles match; Dice/Jaccard identity worst {worst:.1e} over 1000 pairs"),
    )
}

/// All-pairs HD95: surface voxels by direct neighbour test (outside counts as
/// background), nearest distances by exhaustive search, linear percentile.
fn brute_hd95(a: &MaskVolume, b: &MaskVolume) -> f64 {
    let surface = |m: &MaskVolume| -> Vec<[isize; 3]> {
        let [x, y, z] = m.dims().map(|d| d as isize);
        let inside = |p: [isize; 3]| {
            (0..3).all(|i| p[i] >= 0 && p[i] < [x, y, z][i]) && m.get(p[0] as usize, p[1] as usize, p[2] as usize)
        };
        let mut out = Vec::new();
        for i in 0..x {
            for j in 0..y {
                for k in 0..z {
                    let p = [i, j, k];
                    if !inside(p) {
                        continue;
                    }
                    let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                    if steps.iter().any(|s| !inside([i + s[0], j + s[1], k + s[2]])) {
                        out.push(p);
                    }
                }
            }
        }
        out
    };
    let (sa, sb) = (surface(a), surface(b));
    let nearest = |p: &[isize; 3], set: &[[isize; 3]]| {
        set.iter()
            .map(|q| ((0..3).map(|i| ((p[i] - q[i]) * (p[i] - q[i])) as f64).sum::<f64>()).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).chain(sb.iter().map(|p| nearest(p, &sa))).collect();
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos.fract());
    let hi = (lo + 1).min(d.len() - 1);
    d[lo] * (1.0 - frac) + d[hi] * frac
}

fn desk_run(data: &[synth::Sample], opts: &TrainOptions) -> Result<(Vec<f64>, Option<usize>, f64, Duration), String> {
    let start = Instant::now();
    let (_, summary) =
        train_fresh::<f32>(&PyramidConfig::desk(), 2, data, opts, &mut std::io::sink()).map_err(|e| e.to_string())?;
    Ok((summary.losses, summary.reached, summary.best_dice, start.elapsed()))
}

fn desk_training() -> Outcome {
    let data = synth_dataset(Task::BinarySphere, 32, 4, 1).map_err(|e| e.to_string())?;
    let opts = TrainOptions { steps: 300, batch: 4, lr: 5e-4, seed: 0, eval_every: 10, stop_dice: Some(0.95) };
    let (losses, reached, best, took) = desk_run(&data, &opts)?;
    let (again, _, _, took2) = desk_run(&data, &opts)?;
    let identical = losses.len() == again.len() && losses.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits());
    let limit = Duration::from_secs(15 * 60);
    check(
        reached.is_some() && identical && took <= limit && took2 <= limit,
        format!(
            "train Dice {best:.4} (target 0.95) {} of 300; {:.1?} and {:.1?} per run; {} losses {}",
            reached.map_or("not reached".to_string(), |s| format!("reached at step {s}")),
            took,
            took2,
            losses.len(),
            if identical { "bit-identical across reruns" } else { "DIFFER across reruns" }
        ),
    )
}

fn ablation_matrix() -> Outcome {
    let data = synth_dataset(Task::BinarySphere, 16, 2, 3).map_err(|e| e.to_string())?;
    let refs: Vec<&synth::Sample> = data.iter().collect();
    let (x, labels) = synth::batch(&refs);
    let start = Instant::now();
    let mut runs = 0;
    for ases in AsesMode::ALL {
        for skip in SkipKind::ALL {
            for ablation in Ablation::VARIANTS {
                let config = PyramidConfig { ases, skip, ablation, ..PyramidConfig::tiny() };
                let tag = format!("{}/{}/{}", ases.name(), skip.name(), ablation.name());
                let model = build_model::<f32>(&config, 0).map_err(|e| format!("{tag}: {e}"))?;
                let mut trainer = Trainer::new(model, 2, 5e-4);
                for step in 0..10 {
                    let loss = trainer.step(x.clone(), &labels).map_err(|e| format!("{tag} step {step}: {e}"))?;
                    if !loss.is_finite() {
                        return Err(format!("{tag} step {step}: loss {loss}"));
                    }
                }
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} configurations x 10 steps finite in {:.1?}", start.elapsed()))
}

fn checkpoint_fidelity() -> Outcome {
    let config = PyramidConfig::desk();
    let data = synth_dataset(Task::BinarySphere, 32, 2, 8).map_err(|e| e.to_string())?;
    let refs: Vec<&synth::Sample> = data.iter().collect();
    let (x, labels) = synth::batch(&refs);
    let mut trainer = Trainer::new(build_model::<f32>(&config, 2).map_err(|e| e.to_string())?, 2, 5e-4);
    for _ in 0..2 {
        trainer.step(x.clone(), &labels).map_err(|e| e.to_string())?;
    }
    let before = trainer.logits(x.clone()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &trainer.model.store).map_err(|e| e.to_string())?;
    let mut fresh = build_model::<f32>(&config, 99).map_err(|e| e.to_string())?;
    load_checkpoint(&path, &mut fresh.store).map_err(|e| e.to_string())?;
    let after = fresh.net.predict(&fresh.store, x).map_err(|e| e.to_string())?;
    let same = before.shape() == after.shape()
        && before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    check(same, format!("{} eval logits bitwise equal after save/load", before.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("permutation round trips", round_trips),
        ("attention oracle", attention_oracle),
        ("gradient audit", gradient_audit),
        ("complexity formulas", complexity_formulas),
        ("parameter audit", parameter_audit),
        ("metric oracles", metric_oracles),
        ("desk training", desk_training),
        ("ablation matrix", ablation_matrix),
        ("checkpoint fidelity", checkpoint_fidelity),
    ];
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate().map(|(i, c)| (i + 1, c)) {
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
