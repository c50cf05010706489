use super::graph::{for_each_broadcast, BinaryKind, Graph, Op, UnaryKind, Var, GATHER_ZERO};
use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::Real;
use crate::error::TensorError;

/// Gradients of a scalar loss with respect to the leaves of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf. `None` when the leaf was not reached by backward.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], g: &Graph<T>, v: Var) -> Option<&'a mut Vec<T>> {
    if !g.nodes[v.0].requires_grad {
        return None;
    }
    let n = g.nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

impl<T: Real> Graph<T> {
    /// Reverse pass from a single-element `loss`. Each node is visited once,
    /// in reverse tape order; contributions from multiple uses are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut gy) = grads[i].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                gy.iter_mut().for_each(|g| *g *= T::of(1.001));
            }
            self.backward_node(i, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n, b_shared, trans_b } => {
                let ad = self.data(a);
                let bd = self.data(b);
                if let Some(ga) = slot(grads, self, a) {
                    for bi in 0..batch {
                        let g_blk = &gy[bi * m * n..(bi + 1) * m * n];
                        let b_blk = if b_shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                        let ga_blk = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            // b is [n, k]
                            gemm_nn(m, n, k, g_blk, b_blk, ga_blk);
                        } else {
                            gemm_nt(m, n, k, g_blk, b_blk, ga_blk);
                        }
                    }
                }
                if let Some(gb) = slot(grads, self, b) {
                    for bi in 0..batch {
                        let g_blk = &gy[bi * m * n..(bi + 1) * m * n];
                        let a_blk = &ad[bi * m * k..(bi + 1) * m * k];
                        let gb_blk = if b_shared { &mut gb[..] } else { &mut gb[bi * k * n..(bi + 1) * k * n] };
                        if trans_b {
                            gemm_tn(m, n, k, g_blk, a_blk, gb_blk);
                        } else {
                            gemm_tn(m, k, n, a_blk, g_blk, gb_blk);
                        }
                    }
                }
            }
            Op::Binary { a, b, kind, bcast } => {
                let (a, b, kind) = (*a, *b, *kind);
                match bcast {
                    None => {
                        if let Some(ga) = slot(grads, self, a) {
                            match kind {
                                BinaryKind::Add | BinaryKind::Sub => ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d),
                                BinaryKind::Mul => {
                                    ga.iter_mut().zip(gy).zip(self.data(b)).for_each(|((g, &d), &bv)| *g += d * bv)
                                }
                            }
                        }
                        if let Some(gb) = slot(grads, self, b) {
                            match kind {
                                BinaryKind::Add => gb.iter_mut().zip(gy).for_each(|(g, &d)| *g += d),
                                BinaryKind::Sub => gb.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d),
                                BinaryKind::Mul => {
                                    gb.iter_mut().zip(gy).zip(self.data(a)).for_each(|((g, &d), &av)| *g += d * av)
                                }
                            }
                        }
                    }
                    Some(bc) => {
                        let ad = self.data(a);
                        let bd = self.data(b);
                        if let Some(ga) = slot(grads, self, a) {
                            for_each_broadcast(bc, |o, ia, ib| match kind {
                                BinaryKind::Add | BinaryKind::Sub => ga[ia] += gy[o],
                                BinaryKind::Mul => ga[ia] += gy[o] * bd[ib],
                            });
                        }
                        if let Some(gb) = slot(grads, self, b) {
                            for_each_broadcast(bc, |o, ia, ib| match kind {
                                BinaryKind::Add => gb[ib] += gy[o],
                                BinaryKind::Sub => gb[ib] -= gy[o],
                                BinaryKind::Mul => gb[ib] += gy[o] * ad[ia],
                            });
                        }
                    }
                }
            }
            &Op::Scale { a, s } => {
                if let Some(ga) = slot(grads, self, a) {
                    ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * s);
                }
            }
            &Op::AddScalar { a } => {
                if let Some(ga) = slot(grads, self, a) {
                    ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
            }
            &Op::Unary { a, kind } => {
                let x = self.data(a);
                if let Some(ga) = slot(grads, self, a) {
                    for j in 0..ga.len() {
                        ga[j] += gy[j] * unary_grad(kind, x[j], y[j]);
                    }
                }
            }
            &Op::Softmax { a } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(ga) = slot(grads, self, a) {
                    for ((g, yr), dr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let s: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for j in 0..n {
                            g[j] += yr[j] * (dr[j] - s);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(ga) = slot(grads, self, a) {
                    for ((g, yr), dr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let s: T = dr.iter().copied().sum();
                        for j in 0..n {
                            g[j] += dr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = invstd.len();
                let rows = xhat.len() / c;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (dr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_dy[j] += dr[j];
                        sum_dy_xhat[j] += dr[j] * hr[j];
                    }
                }
                if let Some(gg) = slot(grads, self, gamma) {
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(g, &s)| *g += s);
                }
                if let Some(gb) = slot(grads, self, beta) {
                    gb.iter_mut().zip(&sum_dy).for_each(|(g, &s)| *g += s);
                }
                let gam = self.data(gamma);
                if let Some(gx) = slot(grads, self, x) {
                    if *train {
                        let inv_n = T::one() / T::of(rows as f64);
                        for ((g, dr), hr) in gx.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let k = gam[j] * invstd[j];
                                g[j] += k * (dr[j] - inv_n * sum_dy[j] - hr[j] * inv_n * sum_dy_xhat[j]);
                            }
                        }
                    } else {
                        for (g, dr) in gx.chunks_mut(c).zip(gy.chunks(c)) {
                            for j in 0..c {
                                g[j] += dr[j] * gam[j] * invstd[j];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, invstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = self.data(gamma).len();
                if let Some(gg) = slot(grads, self, gamma) {
                    for (dr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot(grads, self, beta) {
                    for dr in gy.chunks(c) {
                        for j in 0..c {
                            gb[j] += dr[j];
                        }
                    }
                }
                let gam = self.data(gamma);
                if let Some(gx) = slot(grads, self, x) {
                    let inv_c = T::one() / T::of(c as f64);
                    for (((g, dr), hr), &is) in
                        gx.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)).zip(invstd.iter())
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let dh = dr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = dr[j] * gam[j];
                            g[j] += is * (dh - inv_c * s1 - hr[j] * inv_c * s2);
                        }
                    }
                }
            }
            &Op::Sum { a, outer, axis, inner } => {
                if let Some(ga) = slot(grads, self, a) {
                    for o in 0..outer {
                        let src = &gy[o * inner..(o + 1) * inner];
                        for l in 0..axis {
                            let dst = &mut ga[(o * axis + l) * inner..(o * axis + l + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                }
            }
            Op::Max { a, outer, axis, inner, argmax } => {
                let (a, outer, axis, inner) = (*a, *outer, *axis, *inner);
                if let Some(ga) = slot(grads, self, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let d = o * inner + i;
                            ga[(o * axis + argmax[d] as usize) * inner + i] += gy[d];
                        }
                    }
                }
            }
            Op::Gather { a, index } => {
                if let Some(ga) = slot(grads, self, *a) {
                    for (&ix, &d) in index.iter().zip(gy) {
                        if ix != GATHER_ZERO {
                            ga[ix as usize] += d;
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = slot(grads, self, a) {
                    ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Concat { parts, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = slot(grads, self, p) {
                        for o in 0..*outer {
                            let src = &gy[o * total + off..o * total + off + w];
                            gp[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                    off += w;
                }
            }
            &Op::Narrow { a, outer, width, start, len } => {
                if let Some(ga) = slot(grads, self, a) {
                    for o in 0..outer {
                        let dst = &mut ga[o * width + start..o * width + start + len];
                        dst.iter_mut().zip(&gy[o * len..(o + 1) * len]).for_each(|(g, &d)| *g += d);
                    }
                }
            }
        }
    }
}

fn unary_grad<T: Real>(kind: UnaryKind, x: T, y: T) -> T {
    match kind {
        UnaryKind::Sigmoid => y * (T::one() - y),
        UnaryKind::Gelu => {
            let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
            cdf + x * pdf
        }
        UnaryKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Exp => y,
        UnaryKind::Ln => T::one() / x,
        UnaryKind::Recip => -(y * y),
        UnaryKind::Square => x + x,
        UnaryKind::Sqrt => T::of(0.5) / y,
    }
}
