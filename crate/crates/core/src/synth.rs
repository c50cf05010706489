//! Deterministic synthetic segmentation tasks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// One soft-edged sphere per volume; labels {0, 1}.
    BinarySphere,
    /// `k` Gaussian blobs, each carrying a class in `1..=k`; label 0 is background.
    MultiBlob(usize),
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::BinarySphere => 2,
            Task::MultiBlob(k) => k + 1,
        }
    }

    pub fn name(self) -> String {
        match self {
            Task::BinarySphere => "binary-sphere".into(),
            Task::MultiBlob(k) => format!("multi-blob-{k}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "binary-sphere" {
            return Some(Task::BinarySphere);
        }
        let k: usize = s.strip_prefix("multi-blob-")?.parse().ok()?;
        (k > 0).then_some(Task::MultiBlob(k))
    }
}

/// One intensity volume `[side, side, side, 1]` in `[0, 1]` and its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub side: usize,
    pub volume: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

const NOISE_STD: f64 = 0.05;
const EDGE_WIDTH: f64 = 0.75;
const MAX_RETRIES: usize = 16;

fn normalize(raw: &[f64]) -> Vec<f32> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    raw.iter().map(|&v| ((v - lo) / span) as f32).collect()
}

fn dist2(i: usize, j: usize, k: usize, c: [f64; 3]) -> f64 {
    let d = [i as f64 - c[0], j as f64 - c[1], k as f64 - c[2]];
    d.iter().map(|v| v * v).sum()
}

fn sphere(side: usize, rng: &mut impl Rng) -> Sample {
    let s = side as f64;
    let r = rng.random_range(s * 0.22..s * 0.32);
    let c = [0, 1, 2].map(|_| rng.random_range(r + 1.0..s - r - 1.0));
    sphere_at(side, c, r, rng)
}

/// Soft-edged sphere of radius `r` (voxels) centred at `c`, with noise drawn from `rng`.
pub fn sphere_at(side: usize, c: [f64; 3], r: f64, rng: &mut impl Rng) -> Sample {
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let n = side * side * side;
    let (mut raw, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..side {
        for j in 0..side {
            for k in 0..side {
                let d = dist2(i, j, k, c).sqrt();
                let soft = 1.0 / (1.0 + ((d - r) / EDGE_WIDTH).exp());
                raw.push(soft + noise.sample(rng));
                labels.push(u8::from(d <= r));
            }
        }
    }
    Sample { side, volume: Tensor::new(&[side, side, side, 1], normalize(&raw)).unwrap(), labels }
}

fn blobs(side: usize, k: usize, rng: &mut impl Rng) -> Sample {
    let s = side as f64;
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let centers: Vec<([f64; 3], f64)> = (0..k)
        .map(|_| {
            let sigma = rng.random_range(s * 0.06..s * 0.12);
            ([0, 1, 2].map(|_| rng.random_range(2.0 * sigma..s - 2.0 * sigma)), sigma)
        })
        .collect();
    let n = side * side * side;
    let (mut raw, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..side {
        for j in 0..side {
            for kk in 0..side {
                let mut best = (0.0, 0u8);
                let mut total = 0.0;
                for (b, (c, sigma)) in centers.iter().enumerate() {
                    let g = (-dist2(i, j, kk, *c) / (2.0 * sigma * sigma)).exp();
                    // class-specific brightness
                    total += g * (b + 1) as f64 / k as f64;
                    if g > best.0 {
                        best = (g, b as u8 + 1);
                    }
                }
                raw.push(total + noise.sample(rng));
                labels.push(if best.0 > 0.5 { best.1 } else { 0 });
            }
        }
    }
    Sample { side, volume: Tensor::new(&[side, side, side, 1], normalize(&raw)).unwrap(), labels }
}

/// `count` samples of `task` at `side³`, deterministic in `seed`.
pub fn synth_dataset(task: Task, side: usize, count: usize, seed: u64) -> Result<Vec<Sample>> {
    if side < 8 {
        return Err(Error::Config(format!("side {side} too small for synthetic shapes")));
    }
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut tries = 0;
        let sample = loop {
            let s = match task {
                Task::BinarySphere => sphere(side, &mut rng),
                Task::MultiBlob(k) => blobs(side, k, &mut rng),
            };
            if s.foreground() > 0 {
                break s;
            }
            tries += 1;
            if tries == MAX_RETRIES {
                return Err(Error::Config(format!("sample {i}: empty mask after {MAX_RETRIES} attempts")));
            }
        };
        out.push(sample);
    }
    Ok(out)
}

/// Stacks samples into a `[B, s, s, s, 1]` input and the concatenated labels.
pub fn batch(samples: &[&Sample]) -> (Tensor<f32>, Vec<u8>) {
    let side = samples[0].side;
    let mut data = Vec::with_capacity(samples.len() * side.pow(3));
    let mut labels = Vec::with_capacity(samples.len() * side.pow(3));
    for s in samples {
        data.extend_from_slice(s.volume.data());
        labels.extend_from_slice(&s.labels);
    }
    (Tensor::new(&[samples.len(), side, side, side, 1], data).unwrap(), labels)
}
