//! Overlap, change-region and surface-distance metrics on binary volumes.

use crate::error::{Error, Result};

/// Binary voxel grid with isotropic spacing (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    dims: [usize; 3],
    voxels: Vec<bool>,
    pub spacing: f64,
}

impl MaskVolume {
    pub fn new(dims: [usize; 3], voxels: Vec<bool>) -> Result<Self> {
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::Metric(format!("{} voxels for dims {dims:?}", voxels.len())));
        }
        Ok(MaskVolume { dims, voxels, spacing: 1.0 })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        MaskVolume { dims, voxels: vec![false; dims.iter().product()], spacing: 1.0 }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut voxels = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    voxels.push(f(i, j, k));
                }
            }
        }
        MaskVolume { dims, voxels, spacing: 1.0 }
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.voxels[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.iter().any(|&v| v)
    }

    /// `self ∖ other`.
    pub fn minus(&self, other: &MaskVolume) -> Result<MaskVolume> {
        same_shape(self, other)?;
        Ok(MaskVolume {
            dims: self.dims,
            voxels: self.voxels.iter().zip(&other.voxels).map(|(&a, &b)| a && !b).collect(),
            spacing: self.spacing,
        })
    }

    /// Mask voxels with at least one 6-connected background (or outside) neighbour.
    pub fn surface(&self) -> Vec<[usize; 3]> {
        let [x, y, z] = self.dims;
        let mut out = Vec::new();
        for i in 0..x {
            for j in 0..y {
                for k in 0..z {
                    if !self.get(i, j, k) {
                        continue;
                    }
                    let edge = i == 0 || j == 0 || k == 0 || i + 1 == x || j + 1 == y || k + 1 == z;
                    if edge
                        || !self.get(i - 1, j, k)
                        || !self.get(i + 1, j, k)
                        || !self.get(i, j - 1, k)
                        || !self.get(i, j + 1, k)
                        || !self.get(i, j, k - 1)
                        || !self.get(i, j, k + 1)
                    {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }
}

fn same_shape(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Metric(format!("mask shapes differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &MaskVolume, gt: &MaskVolume) -> Result<Confusion> {
    same_shape(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.voxels.iter().zip(&gt.voxels) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `num / den`, with `0/0` read as agreement on an empty set.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn jaccard(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            // nothing predicted: perfect only when nothing was there
            ratio(0, self.fn_)
        } else {
            ratio(self.tp, self.tp + self.fp)
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            ratio(0, self.fp)
        } else {
            ratio(self.tp, self.tp + self.fn_)
        }
    }
}

pub fn dice(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    Ok(confusion(pred, gt)?.dice())
}

pub fn jaccard(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    Ok(confusion(pred, gt)?.jaccard())
}

pub fn precision(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    Ok(confusion(pred, gt)?.precision())
}

pub fn recall(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    Ok(confusion(pred, gt)?.recall())
}

/// Dice of change: Jaccard of the predicted change `P ∖ M1` against the
/// true change `M2 ∖ M1`.
pub fn doc(pred: &MaskVolume, initial: &MaskVolume, target: &MaskVolume) -> Result<f64> {
    same_shape(pred, target)?;
    let predicted = pred.minus(initial)?;
    let actual = target.minus(initial)?;
    jaccard(&predicted, &actual)
}

/// Squared 1D distance transform (lower envelope of parabolas) of `f`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            if f[p].is_infinite() {
                // an infinite parabola is dominated everywhere
                v[k] = q;
                z[k + 1] = f64::INFINITY;
                break;
            }
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                v[k] = q;
                z[k + 1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = if f[p].is_infinite() { f64::INFINITY } else { d * d + f[p] };
    }
}

/// Exact squared Euclidean distance (in voxels) from every voxel to the
/// nearest seed.
pub fn squared_distance_map(dims: [usize; 3], seeds: &[[usize; 3]]) -> Vec<f64> {
    let [x, y, z] = dims;
    let mut d = vec![f64::INFINITY; x * y * z];
    for s in seeds {
        d[(s[0] * y + s[1]) * z + s[2]] = 0.0;
    }
    let longest = x.max(y).max(z);
    let (mut f, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut zz) = (vec![0usize; longest], vec![0.0; longest + 1]);
    let strides = [y * z, z, 1];
    for (axis, &len) in dims.iter().enumerate() {
        let stride = strides[axis];
        for base in 0..x * y * z {
            // visit each line once, from its first element
            if (base / stride) % len != 0 {
                continue;
            }
            for t in 0..len {
                f[t] = d[base + t * stride];
            }
            edt_1d(&f[..len], &mut out[..len], &mut v[..len], &mut zz[..len + 1]);
            for t in 0..len {
                d[base + t * stride] = out[t];
            }
        }
    }
    d
}

/// `q`-quantile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(values[lo] + (values[hi] - values[lo]) * (pos - lo as f64))
}

/// Distances from each surface voxel of `a` to the surface of `b`, and back.
pub fn surface_distances(a: &MaskVolume, b: &MaskVolume) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metric("surface distance undefined for an empty mask".into()));
    }
    let (sa, sb) = (a.surface(), b.surface());
    let [_, y, z] = a.dims;
    let at = |map: &[f64], p: &[usize; 3]| map[(p[0] * y + p[1]) * z + p[2]].sqrt() * a.spacing;
    let to_b = squared_distance_map(a.dims, &sb);
    let to_a = squared_distance_map(a.dims, &sa);
    Ok(sa.iter().map(|p| at(&to_b, p)).chain(sb.iter().map(|p| at(&to_a, p))).collect())
}

pub fn hd95(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    let mut d = surface_distances(pred, gt)?;
    percentile(&mut d, 0.95).ok_or_else(|| Error::Metric("no surface voxels".into()))
}

/// All metrics for one case; `hd95` is `None` when a mask is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd95: Option<f64>,
}

pub fn evaluate(pred: &MaskVolume, gt: &MaskVolume) -> Result<CaseMetrics> {
    let c = confusion(pred, gt)?;
    Ok(CaseMetrics {
        dice: c.dice(),
        jaccard: c.jaccard(),
        precision: c.precision(),
        recall: c.recall(),
        hd95: hd95(pred, gt).ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(cells: &[(usize, usize)]) -> MaskVolume {
        MaskVolume::from_fn([2, 2, 1], |i, j, _| cells.contains(&(i, j)))
    }

    #[test]
    fn two_by_two_counts() {
        let p = plane(&[(0, 0), (0, 1), (1, 0)]);
        let g = plane(&[(0, 1), (1, 0), (1, 1)]);
        let c = confusion(&p, &g).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 0));
        assert!((c.dice() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(c.jaccard(), 0.5);
    }

    #[test]
    fn empty_conventions() {
        let e = MaskVolume::empty([3, 3, 3]);
        let c = confusion(&e, &e).unwrap();
        assert_eq!([c.dice(), c.jaccard(), c.precision(), c.recall()], [1.0; 4]);
        let full = MaskVolume::from_fn([3, 3, 3], |_, _, _| true);
        let c = confusion(&e, &full).unwrap();
        assert_eq!([c.dice(), c.precision(), c.recall()], [0.0; 3]);
        assert!(hd95(&e, &full).is_err());
    }

    #[test]
    fn doc_cases() {
        let line = |xs: &[usize]| MaskVolume::from_fn([4, 1, 1], |i, _, _| xs.contains(&i));
        let (m1, m2) = (line(&[0]), line(&[0, 1, 2]));
        assert_eq!(doc(&line(&[0, 1]), &m1, &m2).unwrap(), 0.5);
        assert_eq!(doc(&m1, &m1, &m2).unwrap(), 0.0);
        assert_eq!(doc(&m2, &m1, &m2).unwrap(), 1.0);
    }

    #[test]
    fn edt_matches_brute_force() {
        let dims = [5, 4, 6];
        let seeds = [[0, 0, 0], [4, 3, 5], [2, 1, 3]];
        let d = squared_distance_map(dims, &seeds);
        for i in 0..5 {
            for j in 0..4 {
                for k in 0..6 {
                    let best = seeds
                        .iter()
                        .map(|s| {
                            let dx = [i as f64 - s[0] as f64, j as f64 - s[1] as f64, k as f64 - s[2] as f64];
                            dx.iter().map(|v| v * v).sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert_eq!(d[(i * 4 + j) * 6 + k], best);
                }
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0];
        assert_eq!(percentile(&mut v, 0.5), Some(2.5));
        assert_eq!(percentile(&mut v, 1.0), Some(4.0));
        assert_eq!(percentile(&mut [], 0.5), None);
    }

    #[test]
    fn identical_masks_have_zero_hd95() {
        let m = MaskVolume::from_fn([6, 6, 6], |i, j, k| (1..4).contains(&i) && (2..5).contains(&j) && k < 3);
        assert_eq!(hd95(&m, &m).unwrap(), 0.0);
        assert_eq!(hd95(&m, &m.clone().with_spacing(2.0)).unwrap(), 0.0);
    }
}
