//! Adam over a model's parameter list.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i] == None` means parameter `i` got no gradient,
    /// which is treated as a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// `lr0 * decay^floor(iter / interval)`.
pub fn step_decay(lr0: f64, decay: f64, interval: usize, iter: usize) -> f64 {
    lr0 * decay.powi((iter / interval.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let mut p = vec![Tensor::vector(vec![1.0, -1.0])];
        let g = Tensor::vector(vec![0.5, -2.0]);
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &[Some(&g)], 0.1);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_schedule_pointwise() {
        assert_eq!(step_decay(1e-4, 0.3, 10, 0), 1e-4);
        assert_eq!(step_decay(1e-4, 0.3, 10, 9), 1e-4);
        assert!((step_decay(1e-4, 0.3, 10, 10) - 3e-5).abs() < 1e-18);
        assert!((step_decay(1e-4, 0.3, 10, 25) - 9e-6).abs() < 1e-18);
    }
}
