use super::Real;
use crate::error::TensorError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily per slot
/// and must keep the length of the parameter they track.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(param, grad)` pair, in order. Slot `i`
    /// of the optimizer state belongs to the `i`-th pair on every call.
    pub fn step<'a, I>(&mut self, pairs: I) -> Result<(), TensorError>
    where
        I: IntoIterator<Item = (&'a mut [T], &'a [T])>,
    {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (slot, (param, grad)) in pairs.into_iter().enumerate() {
            if slot == self.first.len() {
                self.first.push(vec![T::zero(); param.len()]);
                self.second.push(vec![T::zero(); param.len()]);
            }
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            if m.len() != param.len() || grad.len() != param.len() {
                return Err(TensorError::Shape {
                    op: "adam",
                    detail: format!("slot {slot}: param {} grad {} state {}", param.len(), grad.len(), m.len()),
                });
            }
            for j in 0..param.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                param[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut p = [1.0];
        adam.step([(&mut p[..], &[1.0][..])]).unwrap();
        // mhat = vhat = 1 at t = 1
        let want = 1.0 - 5e-4 / (1.0 + 1e-8);
        assert_eq!(p[0], want);
        assert!((p[0] - 0.9995).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut adam = Adam::<f32>::new(AdamConfig::default());
        let mut p = [0.25f32, -3.0];
        adam.step([(&mut p[..], &[0.0f32, 0.0][..])]).unwrap();
        assert_eq!(p, [0.25, -3.0]);
    }

    #[test]
    fn identical_slots_stay_identical() {
        let mut adam = Adam::<f32>::new(AdamConfig::default());
        let mut a = [0.3f32, 0.7];
        let mut b = [0.3f32, 0.7];
        for k in 0..5 {
            let g = [0.1 * k as f32, -0.2];
            adam.step([(&mut a[..], &g[..]), (&mut b[..], &g[..])]).unwrap();
        }
        assert_eq!(a, b);
    }
}
