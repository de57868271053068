use claimrisk_tensor::{Scalar, Tensor};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p` for every
    /// parameter; decay applies only where `decay[i]` is set.
    pub fn step<F: Scalar>(
        &mut self,
        params: &mut [&mut Tensor<F>],
        grads: &[Option<&[F]>],
        decay: &[bool],
        lr: f64,
    ) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(TrainError::InvalidConfig(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].ok_or(TrainError::GradMissing(i))?;
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((x, &gj), (mj, vj)) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut())) {
                let gj = gj.to_f64().unwrap_or(0.0);
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                let xv = x.to_f64().unwrap_or(0.0);
                let update = lr * (*mj / bc1) / ((*vj / bc2).sqrt() + c.eps) + lr * wd * xv;
                *x = F::of(xv - update);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak` over `warmup_fraction * total_steps`, then a
/// single half-cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_peak: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps);
    let warmup = (warmup_fraction * total_steps as f64).round() as usize;
    if step < warmup {
        return lr_peak * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return lr_peak;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.to_f64().unwrap_or(0.0);
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.5);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &[1]);
        opt.step(&mut [&mut p], &[Some(&[1.0])], &[true], 0.01).unwrap();
        assert!((p.data()[0] - (0.5 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_decays_multiplicatively() {
        let mut p = scalar(2.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() }, &[1]);
        opt.step(&mut [&mut p], &[Some(&[0.0])], &[true], 0.01).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn matches_hand_trace() {
        // two parameters, gradients from the table below, lr 0.1, wd 0.1 on the first only
        let grads = [[0.5, -1.0], [-0.2, 0.4], [0.3, 0.0]];
        let (b1, b2, eps, lr, wd) = (0.9f64, 0.999f64, 1e-8, 0.1, 0.1);
        let mut expect = [1.0f64, -1.0];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            for j in 0..2 {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / (1.0 - b1.powi(t));
                let vh = v[j] / (1.0 - b2.powi(t));
                let decay = if j == 0 { wd } else { 0.0 };
                expect[j] = expect[j] - lr * mh / (vh.sqrt() + eps) - lr * decay * expect[j];
            }
        }
        // spot value of the first coordinate after step one: 1 - 0.1 - 0.01 = 0.89
        let mut a = scalar(1.0);
        let mut b = scalar(-1.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: wd, ..Default::default() }, &[1, 1]);
        for (t, g) in grads.iter().enumerate() {
            opt.step(&mut [&mut a, &mut b], &[Some(&g[..1]), Some(&g[1..])], &[true, false], lr).unwrap();
            if t == 0 {
                assert!((a.data()[0] - 0.89).abs() < 1e-8);
            }
        }
        assert!((a.data()[0] - expect[0]).abs() < 1e-12);
        assert!((b.data()[0] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        assert!(matches!(opt.step(&mut [&mut p], &[None], &[true], 0.1), Err(TrainError::GradMissing(0))));
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 0.1), 0.0);
        assert_eq!(cosine_lr(10, 100, 1e-3, 0.1), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3, 0.1).abs() < 1e-9);
        assert!((cosine_lr(55, 100, 1e-3, 0.1) - 5e-4).abs() < 1e-12);
        assert!((cosine_lr(5, 100, 1e-3, 0.1) - 5e-4).abs() < 1e-15);
        let lrs: Vec<f64> = (10..=100).map(|s| cosine_lr(s, 100, 1.0, 0.1)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
        let mut small = vec![vec![0.1f64]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
