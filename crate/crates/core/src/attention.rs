//! Window partitioning, window multi-head self-attention with a relative
//! position bias table, and the transpose shuffle / rotation restore pair.
//!
//! Slice stacks are `[S, H, W, C]`. Windows are `M×M` tiles in raster order.

use crate::error::TensorError;
use crate::nn::layers::INIT_STD;
use crate::nn::{IndexKey, Init, Linear, ParamBuilder, ParamId, Session};
use crate::tensor::{Real, Tensor, Var};

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// Window tiling of one slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowGrid {
    pub height: usize,
    pub width: usize,
    pub window: usize,
}

impl WindowGrid {
    /// Strict grid: `window` must divide both extents.
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self, TensorError> {
        if window == 0 || height == 0 || width == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
            return Err(shape_err("window_grid", format!("window {window} does not tile {height}x{width}")));
        }
        Ok(WindowGrid { height, width, window })
    }

    /// Grid with the window clamped to the slice when the slice is smaller.
    pub fn clamped(height: usize, width: usize, window: usize) -> Result<Self, TensorError> {
        Self::new(height, width, effective_window(height, width, window))
    }

    pub fn rows(&self) -> usize {
        self.height / self.window
    }

    pub fn cols(&self) -> usize {
        self.width / self.window
    }

    /// Windows per slice.
    pub fn count(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Tokens per window.
    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    fn key(&self) -> [usize; 3] {
        [self.height, self.width, self.window]
    }
}

/// Window side actually used on an `h×w` slice.
pub fn effective_window(h: usize, w: usize, window: usize) -> usize {
    window.min(h).min(w)
}

fn check_stack(op: &'static str, shape: &[usize], grid: &WindowGrid) -> Result<(usize, usize), TensorError> {
    match *shape {
        [s, h, w, c] if h == grid.height && w == grid.width => Ok((s, c)),
        _ => Err(shape_err(op, format!("{shape:?} does not match grid {grid:?}"))),
    }
}

/// Source index of every element of the partitioned layout
/// `[S·N, M², C]` within the slice stack `[S, H, W, C]`.
pub fn partition_index(slices: usize, grid: &WindowGrid, channels: usize) -> Vec<u32> {
    let (m, w, c) = (grid.window, grid.width, channels);
    let mut idx = Vec::with_capacity(slices * grid.height * w * c);
    for s in 0..slices {
        for wr in 0..grid.rows() {
            for wc in 0..grid.cols() {
                for a in 0..m {
                    for b in 0..m {
                        let base = ((s * grid.height + wr * m + a) * w + wc * m + b) * c;
                        idx.extend((base..base + c).map(|i| i as u32));
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`partition_index`] as a gather from the window layout.
pub fn reverse_index(slices: usize, grid: &WindowGrid, channels: usize) -> Vec<u32> {
    invert(&partition_index(slices, grid, channels))
}

fn invert(perm: &[u32]) -> Vec<u32> {
    let mut out = vec![0u32; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        out[src as usize] = dst as u32;
    }
    out
}

/// Position along one axis after the shuffle: with `g` windows of side `m`,
/// row `p·g + q` moves to `q·m + p`. When `g == m` this swaps the window
/// coordinate with the intra-window offset.
fn shuffled_row(r: usize, g: usize, m: usize) -> usize {
    (r % g) * m + r / g
}

/// Gather index realizing the transpose shuffle on `[S, H, W, C]`.
pub fn shuffle_index(slices: usize, grid: &WindowGrid, channels: usize) -> Result<Vec<u32>, TensorError> {
    if !grid.is_square() {
        return Err(shape_err("transpose_shuffle", format!("non-square window grid {}x{}", grid.rows(), grid.cols())));
    }
    let (h, w, c, m, g) = (grid.height, grid.width, channels, grid.window, grid.rows());
    // dst position -> source position
    let mut src_row = vec![0usize; h];
    for r in 0..h {
        src_row[shuffled_row(r, g, m)] = r;
    }
    let mut src_col = vec![0usize; w];
    for r in 0..w {
        src_col[shuffled_row(r, g, m)] = r;
    }
    let mut idx = Vec::with_capacity(slices * h * w * c);
    for s in 0..slices {
        for &r in &src_row {
            for &q in &src_col {
                let base = ((s * h + r) * w + q) * c;
                idx.extend((base..base + c).map(|i| i as u32));
            }
        }
    }
    Ok(idx)
}

/// Gather index of the rotation restore (inverse of the shuffle).
pub fn restore_index(slices: usize, grid: &WindowGrid, channels: usize) -> Result<Vec<u32>, TensorError> {
    Ok(invert(&shuffle_index(slices, grid, channels)?))
}

fn apply_index<T: Real>(x: &Tensor<T>, idx: &[u32], shape: &[usize]) -> Result<Tensor<T>, TensorError> {
    let d = x.data();
    Tensor::new(shape, idx.iter().map(|&i| d[i as usize]).collect())
}

/// `[S, H, W, C] -> [S·N, M², C]` on a plain tensor.
pub fn window_partition<T: Real>(x: &Tensor<T>, grid: &WindowGrid) -> Result<Tensor<T>, TensorError> {
    let (s, c) = check_stack("window_partition", x.shape(), grid)?;
    apply_index(x, &partition_index(s, grid, c), &[s * grid.count(), grid.tokens(), c])
}

/// `[S·N, M², C] -> [S, H, W, C]` on a plain tensor.
pub fn window_reverse<T: Real>(w: &Tensor<T>, grid: &WindowGrid) -> Result<Tensor<T>, TensorError> {
    let (n, c) = match *w.shape() {
        [n, t, c] if t == grid.tokens() && n % grid.count() == 0 => (n, c),
        ref s => return Err(shape_err("window_reverse", format!("{s:?} does not match grid {grid:?}"))),
    };
    let s = n / grid.count();
    apply_index(w, &reverse_index(s, grid, c), &[s, grid.height, grid.width, c])
}

pub fn transpose_shuffle<T: Real>(x: &Tensor<T>, grid: &WindowGrid) -> Result<Tensor<T>, TensorError> {
    let (s, c) = check_stack("transpose_shuffle", x.shape(), grid)?;
    apply_index(x, &shuffle_index(s, grid, c)?, x.shape())
}

pub fn rotation_restore<T: Real>(x: &Tensor<T>, grid: &WindowGrid) -> Result<Tensor<T>, TensorError> {
    let (s, c) = check_stack("rotation_restore", x.shape(), grid)?;
    apply_index(x, &restore_index(s, grid, c)?, x.shape())
}

/// Graph version of the transpose shuffle.
pub fn shuffle_var<T: Real>(s: &mut Session<'_, T>, x: Var, grid: &WindowGrid) -> Result<Var, TensorError> {
    let shape = s.g.shape(x).to_vec();
    let (n, c) = check_stack("transpose_shuffle", &shape, grid)?;
    if !grid.is_square() {
        return Err(shape_err("transpose_shuffle", format!("non-square window grid {grid:?}")));
    }
    let key = IndexKey::Custom("shuffle", [&[n, c][..], &grid.key()].concat());
    let idx = s.index(key, || shuffle_index(n, grid, c).unwrap());
    s.g.gather(x, idx, &shape)
}

/// Graph version of the rotation restore.
pub fn restore_var<T: Real>(s: &mut Session<'_, T>, x: Var, grid: &WindowGrid) -> Result<Var, TensorError> {
    let shape = s.g.shape(x).to_vec();
    let (n, c) = check_stack("rotation_restore", &shape, grid)?;
    if !grid.is_square() {
        return Err(shape_err("rotation_restore", format!("non-square window grid {grid:?}")));
    }
    let key = IndexKey::Custom("restore", [&[n, c][..], &grid.key()].concat());
    let idx = s.index(key, || restore_index(n, grid, c).unwrap());
    s.g.gather(x, idx, &shape)
}

/// Row of the bias table for every (query, key) token pair of a window:
/// `(Δr + M − 1)·(2M − 1) + (Δc + M − 1)`.
pub fn relative_index(window: usize) -> Vec<usize> {
    let m = window as isize;
    let t = window * window;
    let mut out = Vec::with_capacity(t * t);
    for i in 0..t as isize {
        for j in 0..t as isize {
            let dr = i / m - j / m;
            let dc = i % m - j % m;
            out.push(((dr + m - 1) * (2 * m - 1) + (dc + m - 1)) as usize);
        }
    }
    out
}

/// Number of rows of the bias table.
pub fn bias_rows(window: usize) -> usize {
    (2 * window - 1) * (2 * window - 1)
}

/// Gather index from `[S, H, W, width]` (reading channels
/// `offset + h·dk + d`) into `[S·N, heads, M², dk]`.
fn heads_index(slices: usize, grid: &WindowGrid, width: usize, offset: usize, heads: usize, dk: usize) -> Vec<u32> {
    let (m, n) = (grid.window, grid.count());
    let mut idx = Vec::with_capacity(slices * n * heads * m * m * dk);
    for s in 0..slices {
        for wr in 0..grid.rows() {
            for wc in 0..grid.cols() {
                for h in 0..heads {
                    for a in 0..m {
                        for b in 0..m {
                            let pos = (s * grid.height + wr * m + a) * grid.width + wc * m + b;
                            let base = pos * width + offset + h * dk;
                            idx.extend((base..base + dk).map(|i| i as u32));
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Output projection, bias table and scaled dot-product core shared by
/// self-attention and the cross-attention skips.
#[derive(Clone, Debug)]
pub struct AttentionCore {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub bias_table: ParamId,
    pub out_proj: Linear,
}

impl AttentionCore {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self, TensorError> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(shape_err("attention", format!("{channels} channels not divisible by {heads} heads")));
        }
        Ok(AttentionCore {
            channels,
            heads,
            window,
            bias_table: pb.param("rpe", &[bias_rows(window), heads], Init::TruncNormal(INIT_STD)),
            out_proj: Linear::new(&mut pb.sub("proj"), channels, channels, true),
        })
    }

    pub fn param_count(channels: usize, heads: usize, window: usize) -> usize {
        bias_rows(window) * heads + Linear::param_count(channels, channels, true)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Splits `[S, H, W, width]` (channels from `offset`) into per-window heads.
    fn to_heads<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        offset: usize,
        grid: &WindowGrid,
    ) -> Result<Var, TensorError> {
        let shape = s.g.shape(x).to_vec();
        let (n, width) = check_stack("attention", &shape, grid)?;
        if offset + self.channels > width {
            return Err(shape_err("attention", format!("{width} channels, need {}", offset + self.channels)));
        }
        let (heads, dk) = (self.heads, self.head_dim());
        let key = IndexKey::Custom("heads", [&[n, width, offset, heads][..], &grid.key()].concat());
        let idx = s.index(key, || heads_index(n, grid, width, offset, heads, dk));
        s.g.gather(x, idx, &[n * grid.count(), heads, grid.tokens(), dk])
    }

    /// Attention from separate query/key/value stacks, each `[S, H, W, C]`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        grid: &WindowGrid,
    ) -> Result<Var, TensorError> {
        let q = self.to_heads(s, q, 0, grid)?;
        let k = self.to_heads(s, k, 0, grid)?;
        let v = self.to_heads(s, v, 0, grid)?;
        let n = s.g.shape(q)[0] / grid.count();
        self.attend(s, q, k, v, n, grid)
    }

    /// Attention from a fused `[S, H, W, 3C]` projection laid out `[q | k | v]`.
    pub fn forward_fused<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        qkv: Var,
        grid: &WindowGrid,
    ) -> Result<Var, TensorError> {
        let c = self.channels;
        let q = self.to_heads(s, qkv, 0, grid)?;
        let k = self.to_heads(s, qkv, c, grid)?;
        let v = self.to_heads(s, qkv, 2 * c, grid)?;
        let n = s.g.shape(q)[0] / grid.count();
        self.attend(s, q, k, v, n, grid)
    }

    fn attend<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        slices: usize,
        grid: &WindowGrid,
    ) -> Result<Var, TensorError> {
        if grid.window != self.window {
            return Err(shape_err(
                "attention",
                format!("grid window {} but bias table built for {}", grid.window, self.window),
            ));
        }
        let (heads, dk, t) = (self.heads, self.head_dim(), grid.tokens());
        let scores = s.g.matmul_nt(q, k)?;
        let scores = s.g.scale(scores, T::one() / T::of(dk as f64).sqrt())?;
        let table = s.p(self.bias_table);
        let key = IndexKey::Custom("rpe", vec![self.window, heads]);
        let idx = s.index(key, || {
            let rel = relative_index(self.window);
            let mut idx = Vec::with_capacity(heads * t * t);
            for h in 0..heads {
                idx.extend(rel.iter().map(|&r| (r * heads + h) as u32));
            }
            idx
        });
        let bias = s.g.gather(table, idx, &[heads, t, t])?;
        let scores = s.g.add(scores, bias)?;
        let attn = s.g.softmax(scores)?;
        let out = s.g.matmul(attn, v)?;
        // [S·N, heads, M², dk] -> [S, H, W, C]
        let c = self.channels;
        let key = IndexKey::Custom("merge_heads", [&[slices, heads][..], &grid.key()].concat());
        let idx = s.index(key, || invert(&heads_index(slices, grid, c, 0, heads, dk)));
        let merged = s.g.gather(out, idx, &[slices, grid.height, grid.width, c])?;
        self.out_proj.forward(s, merged)
    }
}

/// Window multi-head self-attention with a fused `C → 3C` projection.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub core: AttentionCore,
}

impl WindowAttention {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self, TensorError> {
        Ok(WindowAttention {
            qkv: Linear::new(&mut pb.sub("qkv"), channels, 3 * channels, true),
            core: AttentionCore::new(pb, channels, heads, window)?,
        })
    }

    pub fn param_count(channels: usize, heads: usize, window: usize) -> usize {
        Linear::param_count(channels, 3 * channels, true) + AttentionCore::param_count(channels, heads, window)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, grid: &WindowGrid) -> Result<Var, TensorError> {
        let qkv = self.qkv.forward(s, x)?;
        self.core.forward_fused(s, qkv, grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn eight_by_eight_has_four_windows() {
        let g = WindowGrid::new(8, 8, 4).unwrap();
        assert_eq!(g.count(), 4);
        assert!(WindowGrid::new(8, 6, 4).is_err());
        assert_eq!(WindowGrid::clamped(2, 2, 4).unwrap().window, 2);
    }

    #[test]
    fn single_window_is_flattened_slice() {
        let g = WindowGrid::new(4, 4, 4).unwrap();
        let x = ramp(&[2, 4, 4, 3]);
        let w = window_partition(&x, &g).unwrap();
        assert_eq!(w.shape(), &[2, 16, 3]);
        assert_eq!(w.data(), x.data());
        assert_eq!(transpose_shuffle(&x, &g).unwrap(), x);
    }

    #[test]
    fn shuffle_collects_equal_offsets() {
        let g = WindowGrid::new(8, 8, 4).unwrap();
        let x = ramp(&[1, 8, 8, 1]);
        let t = transpose_shuffle(&x, &g).unwrap();
        let w = window_partition(&t, &g).unwrap();
        let first: Vec<usize> = w.data()[..16].iter().map(|&v| v as usize).collect();
        // offset (0,0) of each original window: (0,0), (0,4), (4,0), (4,4)
        for tok in [0, 4, 32, 36] {
            assert!(first.contains(&tok), "{tok} missing from {first:?}");
        }
        // every post-shuffle window sees every original window exactly
        // window-count/… times
        for win in w.data().chunks(16) {
            let mut seen = [0usize; 4];
            for &v in win {
                let (r, c) = (v as usize / 8, v as usize % 8);
                seen[(r / 4) * 2 + c / 4] += 1;
            }
            assert_eq!(seen, [4, 4, 4, 4]);
        }
    }

    #[test]
    fn shuffle_swaps_window_and_offset_when_grid_equals_window() {
        let m = 3;
        let g = WindowGrid::new(9, 9, m).unwrap();
        let x = ramp(&[1, 9, 9, 1]);
        let t = transpose_shuffle(&x, &g).unwrap();
        for (i, j, a, b) in [(0, 1, 2, 0), (2, 2, 1, 1), (1, 0, 0, 2)] {
            let src = (i * m + a) * 9 + j * m + b;
            let dst = (a * m + i) * 9 + b * m + j;
            assert_eq!(t.data()[dst] as usize, src);
        }
    }

    #[test]
    fn relative_index_is_within_table() {
        for m in 1..6 {
            let rel = relative_index(m);
            assert_eq!(rel.len(), m.pow(4));
            assert!(rel.iter().all(|&r| r < bias_rows(m)));
            // diagonal maps to the centre row
            assert_eq!(rel[0], (m - 1) * (2 * m - 1) + m - 1);
        }
    }

    #[test]
    fn rectangular_grid_is_rejected() {
        let g = WindowGrid::new(8, 4, 4).unwrap();
        assert!(transpose_shuffle(&ramp(&[1, 8, 4, 1]), &g).is_err());
    }
}
