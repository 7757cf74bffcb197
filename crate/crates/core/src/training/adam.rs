use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Adam with bias correction; one moment buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates every `params[i]` in place from `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(self.beta1.powi(self.t));
        let c2 = T::one() - T::of(self.beta2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::Dimension {
                    op: "adam",
                    lhs: vec![p.len()],
                    rhs: vec![g.len()],
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loss-speed learning-rate rule: with speed `|l(t−1) − l(t−2)|`, a faster
/// loss change shrinks the rate by 0.99, a slower one grows it by 1/0.99.
/// The result stays within `[lr0/100, 100·lr0]`.
pub fn adaptive_lr(prev_lr: f64, lr0: f64, losses: &[f64]) -> f64 {
    let n = losses.len();
    if n < 2 {
        return lr0;
    }
    if n < 3 {
        return prev_lr;
    }
    let speed = (losses[n - 1] - losses[n - 2]).abs();
    let before = (losses[n - 2] - losses[n - 3]).abs();
    let lr = if speed > before {
        prev_lr * 0.99
    } else if speed < before {
        prev_lr / 0.99
    } else {
        prev_lr
    };
    lr.clamp(lr0 / 100.0, lr0 * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr · g/(|g| + ε)
        let mut opt = Adam::<f64>::new(&[2]);
        let mut w = vec![1.0, -2.0];
        opt.step(&mut [&mut w], &[vec![0.5, -3.0]], 0.1).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 1.9).abs() < 1e-7);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn matches_reference_recursion() {
        let grads = [0.3, -0.1, 0.25, 0.0, -0.4];
        let mut opt = Adam::<f64>::new(&[1]);
        let mut w = vec![0.7];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.7f64);
        for (t, &g) in grads.iter().enumerate() {
            opt.step(&mut [&mut w], &[vec![g]], 0.01).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            x -= 0.01 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        assert!((w[0] - x).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::<f64>::new(&[1]);
        let mut w = vec![3.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (w[0] - 1.0)];
            opt.step(&mut [&mut w], &[g], 0.05).unwrap();
        }
        assert!((w[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt = Adam::<f64>::new(&[2]);
        let mut w = vec![0.0; 3];
        assert!(opt.step(&mut [&mut w], &[vec![0.0; 3]], 0.1).is_err());
    }

    #[test]
    fn lr_rule() {
        let lr0 = 0.01;
        assert_eq!(adaptive_lr(0.5, lr0, &[]), lr0);
        assert_eq!(adaptive_lr(0.5, lr0, &[1.0]), lr0);
        assert_eq!(adaptive_lr(0.02, lr0, &[1.0, 0.9]), 0.02);
        // speed 0.3 after 0.1: faster
        assert_eq!(adaptive_lr(0.02, lr0, &[1.0, 0.9, 0.6]), 0.02 * 0.99);
        // speed 0.05 after 0.1: slower
        assert_eq!(adaptive_lr(0.02, lr0, &[1.0, 0.9, 0.85]), 0.02 / 0.99);
        assert_eq!(adaptive_lr(0.02, lr0, &[1.0, 0.5, 0.0]), 0.02);
        assert_eq!(adaptive_lr(lr0 * 100.0, lr0, &[1.0, 0.9, 0.85]), lr0 * 100.0);
        assert_eq!(adaptive_lr(lr0 / 100.0, lr0, &[1.0, 0.9, 0.6]), lr0 / 100.0);
    }
}
