use alloc::vec;
use alloc::vec::Vec;

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. One moment pair per parameter slot.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    cfg: AdamConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, slot_sizes: &[usize]) -> Self {
        Adam {
            cfg,
            m: slot_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// Applies one update. `params[i]` and `grads[i]` belong to slot `i`.
    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[&[F]], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - num_traits::Float::powi(b1, self.t as i32);
        let bc2 = 1.0 - num_traits::Float::powi(b2, self.t as i32);
        let step = F::from_f64(lr / bc1);
        let (fb1, fb2) = (F::from_f64(b1), F::from_f64(b2));
        let (ob1, ob2) = (F::from_f64(1.0 - b1), F::from_f64(1.0 - b2));
        let inv_bc2 = F::from_f64(1.0 / bc2);
        let eps = F::from_f64(self.cfg.eps);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = fb1 * m[i] + ob1 * gi;
                v[i] = fb2 * v[i] + ob2 * gi * gi;
                p[i] = p[i] - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Scales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [&mut [F]], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.iter() {
            sq += x.to_f64() * x.to_f64();
        }
    }
    let norm = num_traits::Float::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), &[2]);
        let mut p = [1.0, -1.0];
        adam.step(&mut [&mut p[..]], &[&[0.5, -2.0][..]], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), &[1]);
        let mut x = [5.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 2.0)];
            adam.step(&mut [&mut x[..]], &[&g[..]], 0.05);
        }
        assert!((x[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut a = [3.0f64, 4.0];
        let n = clip_global_norm(&mut [&mut a[..]], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-12 && (a[1] - 0.8).abs() < 1e-12);
    }
}
