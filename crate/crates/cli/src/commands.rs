use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use shufflemixer::complexity::{audit, cost_report};
use shufflemixer::gradcheck::{network_audit, primitive_audit, AuditReport};
use shufflemixer::io::{load_checkpoint, read_volume, save_checkpoint, write_volume, Volume};
use shufflemixer::metrics::{doc, evaluate, MaskVolume};
use shufflemixer::network::build_model;
use shufflemixer::runconfig::{Precision, RunConfig};
use shufflemixer::synth::{synth_dataset, Sample};
use shufflemixer::tensor::NodeKind;
use shufflemixer::train::{train_loop, Trainer};
use shufflemixer::{Error, Real, Result, Tensor};

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out)?;
    Ok(&cfg.out)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg),
        Precision::F64 => train_as::<f64>(cfg),
    }
}

fn train_as<T: Real>(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    fs::write(dir.join("config.txt"), cfg.render())?;
    let data = synth_dataset(cfg.task, cfg.model.input_side, cfg.samples, cfg.seed)?;
    let mut trainer = Trainer::new(build_model::<T>(&cfg.model, cfg.seed)?, cfg.task.classes(), cfg.lr);
    let mut log = BufWriter::new(File::create(dir.join("train.log"))?);
    let best = dir.join("best.ckpt");
    let result = train_loop(&mut trainer, &data, &cfg.train_options(), &mut log, &mut |t, _, _| {
        save_checkpoint(&best, &t.model.store)
    });
    log.flush()?;
    let summary = result?;
    save_checkpoint(&dir.join("final.ckpt"), &trainer.model.store)?;
    println!("steps={}", summary.losses.len());
    println!("final_loss={:?}", summary.losses.last().copied().unwrap_or(f64::NAN));
    println!("best_train_dice={:?}", summary.best_dice);
    println!("best_step={}", summary.best_step);
    if let Some(step) = summary.reached {
        println!("stop_dice_reached_at={step}");
    }
    Ok(())
}

/// One evaluation case: intensities, labels and an optional initial mask.
struct Case {
    image: Tensor<f32>,
    labels: Vec<u8>,
    initial: Option<Vec<u8>>,
}

fn labels_of(v: Volume, side: usize, what: &str) -> Result<Vec<u8>> {
    match v {
        Volume::U8 { shape, data } if shape == [side; 3] => Ok(data),
        other => {
            Err(Error::Config(format!("{what}: expected u8 volume {:?}, got shape {:?}", [side; 3], other.shape())))
        }
    }
}

fn read_cases(dir: &Path, side: usize) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for i in 0.. {
        let image_path = dir.join(format!("case_{i:03}_image.smvx"));
        if !image_path.exists() {
            break;
        }
        let image = match read_volume(&image_path)? {
            Volume::F32(t) if t.shape() == [side, side, side, 1] => t,
            other => {
                return Err(Error::Config(format!(
                    "{}: expected f32 volume {:?}, got shape {:?}",
                    image_path.display(),
                    [side, side, side, 1],
                    other.shape()
                )))
            }
        };
        let labels = labels_of(read_volume(&dir.join(format!("case_{i:03}_label.smvx")))?, side, "label")?;
        let initial_path = dir.join(format!("case_{i:03}_initial.smvx"));
        let initial = if initial_path.exists() {
            Some(labels_of(read_volume(&initial_path)?, side, "initial mask")?)
        } else {
            None
        };
        cases.push(Case { image, labels, initial });
    }
    if cases.is_empty() {
        return Err(Error::Config(format!("{}: no case_000_image.smvx", dir.display())));
    }
    Ok(cases)
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => eval_as::<f32>(cfg, checkpoint, data),
        Precision::F64 => eval_as::<f64>(cfg, checkpoint, data),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("nan".into(), |x| format!("{x:.6}"))
}

fn eval_as<T: Real>(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let side = cfg.model.input_side;
    let cases = match data {
        Some(dir) => read_cases(dir, side)?,
        None => synth_dataset(cfg.task, side, cfg.samples, cfg.seed)?
            .into_iter()
            .map(|s: Sample| Case { image: s.volume, labels: s.labels, initial: None })
            .collect(),
    };
    let mut model = build_model::<T>(&cfg.model, cfg.seed)?;
    load_checkpoint(checkpoint, &mut model.store)?;
    let trainer = Trainer::new(model, cfg.task.classes(), cfg.lr);

    let dims = [side; 3];
    let mask = |labels: &[u8], c: u8| MaskVolume::from_fn(dims, |i, j, k| labels[(i * side + j) * side + k] == c);
    let classes = cfg.task.classes() as u8;
    let (mut kv, mut table) = (String::new(), String::new());
    writeln!(
        table,
        "{:>5} {:>5} {:>8} {:>8} {:>9} {:>8} {:>8} {:>8}",
        "case", "class", "dice", "jaccard", "precision", "recall", "hd95", "doc"
    )
    .unwrap();
    let mut sums = vec![[0.0f64; 4]; classes as usize];
    let mut hd = vec![Vec::new(); classes as usize];
    for (n, case) in cases.iter().enumerate() {
        let x = case.image.clone().reshaped(&[1, side, side, side, 1])?;
        let pred = trainer.predict(x.cast())?;
        for c in 1..classes {
            let (p, g) = (mask(&pred, c), mask(&case.labels, c));
            let m = evaluate(&p, &g)?;
            let d = match &case.initial {
                Some(init) => Some(doc(&p, &mask(init, c), &g)?),
                None => None,
            };
            writeln!(
                kv,
                "case={n} class={c} dice={:.6} jaccard={:.6} precision={:.6} recall={:.6} hd95={} doc={}",
                m.dice,
                m.jaccard,
                m.precision,
                m.recall,
                fmt_opt(m.hd95),
                fmt_opt(d)
            )
            .unwrap();
            writeln!(
                table,
                "{n:>5} {c:>5} {:>8.4} {:>8.4} {:>9.4} {:>8.4} {:>8} {:>8}",
                m.dice,
                m.jaccard,
                m.precision,
                m.recall,
                fmt_opt(m.hd95),
                fmt_opt(d)
            )
            .unwrap();
            let s = &mut sums[c as usize];
            for (acc, v) in s.iter_mut().zip([m.dice, m.jaccard, m.precision, m.recall]) {
                *acc += v;
            }
            hd[c as usize].extend(m.hd95);
        }
    }
    let n = cases.len() as f64;
    for c in 1..classes as usize {
        let [d, j, p, r] = sums[c].map(|v| v / n);
        let h = (!hd[c].is_empty()).then(|| hd[c].iter().sum::<f64>() / hd[c].len() as f64);
        writeln!(
            kv,
            "aggregate class={c} cases={} dice={d:.6} jaccard={j:.6} precision={p:.6} recall={r:.6} hd95={}",
            cases.len(),
            fmt_opt(h)
        )
        .unwrap();
        writeln!(table, "{:>5} {c:>5} {d:>8.4} {j:>8.4} {p:>9.4} {r:>8.4} {:>8} {:>8}", "mean", fmt_opt(h), "")
            .unwrap();
    }
    let dir = out_dir(cfg)?;
    fs::write(dir.join("eval.kv"), &kv)?;
    fs::write(dir.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, tolerance: f64, samples: usize, corrupt: bool) -> Result<()> {
    let fault = corrupt.then_some(NodeKind::Softmax);
    let prim = primitive_audit(cfg.seed, fault)?;
    let mut text = format!("# primitives (tolerance {:e})\n{}", prim.tolerance, prim.render());
    let mut failed: Vec<String> = prim.failures().map(|s| s.site.clone()).collect();
    if failed.is_empty() {
        let mut net: AuditReport = network_audit(&cfg.model, cfg.seed, samples)?;
        net.tolerance = tolerance;
        write!(text, "# network (tolerance {tolerance:e}, {} parameters)\n{}", net.checked(), net.render()).unwrap();
        failed.extend(net.failures().map(|s| s.site.clone()));
    }
    let dir = out_dir(cfg)?;
    fs::write(dir.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if failed.is_empty() {
        println!("status=pass");
        Ok(())
    } else {
        println!("status=fail");
        Err(Error::Audit(format!("sites over tolerance: {}", failed.join(", "))))
    }
}

pub fn analyze(cfg: &RunConfig) -> Result<()> {
    let report = cost_report(&cfg.model)?;
    let model = build_model::<f32>(&cfg.model, cfg.seed)?;
    let params = audit(&cfg.model, &model.store);
    let mut kv = report.render_kv();
    writeln!(kv, "audit_analytic={}", params.analytic).unwrap();
    writeln!(kv, "audit_instantiated={}", params.instantiated).unwrap();
    writeln!(kv, "audit_mismatches={}", params.mismatches.len()).unwrap();
    for m in &params.mismatches {
        writeln!(kv, "audit_mismatch={} analytic={} instantiated={}", m.group, m.analytic, m.instantiated).unwrap();
    }
    let dir = out_dir(cfg)?;
    fs::write(dir.join("cost.kv"), &kv)?;
    fs::write(dir.join("cost.txt"), report.render_text())?;
    print!("{}", report.render_text());
    println!(
        "parameter audit: analytic {} instantiated {} ({} mismatches)",
        params.analytic,
        params.instantiated,
        params.mismatches.len()
    );
    if params.passed() {
        Ok(())
    } else {
        Err(Error::Audit(format!("{} parameter groups disagree", params.mismatches.len())))
    }
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let side = cfg.model.input_side;
    let data = synth_dataset(cfg.task, side, cfg.samples, cfg.seed)?;
    let dir = out_dir(cfg)?;
    for (i, s) in data.into_iter().enumerate() {
        write_volume(&dir.join(format!("case_{i:03}_image.smvx")), &Volume::F32(s.volume))?;
        let label = Volume::U8 { shape: vec![side; 3], data: s.labels };
        write_volume(&dir.join(format!("case_{i:03}_label.smvx")), &label)?;
    }
    println!("wrote {} cases to {}", cfg.samples, dir.display());
    Ok(())
}
