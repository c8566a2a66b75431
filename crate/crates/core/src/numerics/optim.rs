use super::matrix::Real;
use super::params::ParameterStore;

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the applied factor (1.0 when no clipping happened).
pub fn clip_grad_norm<T: Real>(store: &mut ParameterStore<T>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = store.grad_norm();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = T::from_f64_lossy(scale);
    for (_, p) in store.iter_mut() {
        p.grad.iter_mut().for_each(|g| *g *= s);
    }
    scale
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr` and clears the gradients.
    pub fn step<T: Real>(&mut self, store: &mut ParameterStore<T>, lr: f64) {
        if self.first.len() != store.len() {
            self.first = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let shrink = 1.0 - lr * self.weight_decay;
        for (k, (_, p)) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i].to_f64_lossy();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let theta = p.value[i].to_f64_lossy() * shrink - lr * m_hat / (v_hat.sqrt() + self.eps);
                p.value[i] = T::from_f64_lossy(theta);
                p.grad[i] = T::zero();
            }
        }
        store.step_count += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f64, grad: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("x", vec![1], vec![value]).unwrap();
        s.get_mut("x").unwrap().grad[0] = grad;
        s
    }

    #[test]
    fn clip_examples() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("g", vec![2], vec![0.0, 0.0]).unwrap();
        s.get_mut("g").unwrap().grad.copy_from_slice(&[0.6, 0.8]);
        assert_eq!(clip_grad_norm(&mut s, 3.0), 1.0);

        s.get_mut("g").unwrap().grad.copy_from_slice(&[3.6, 4.8]);
        assert!((clip_grad_norm(&mut s, 3.0) - 0.5).abs() < 1e-12);
        assert!((s.grad_norm() - 3.0).abs() < 1e-12);
        assert_eq!(s.get("g").unwrap().grad, vec![1.8, 2.4]);

        s.zero_grad();
        assert_eq!(clip_grad_norm(&mut s, 3.0), 1.0);
    }

    #[test]
    fn clip_is_idempotent() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("g", vec![3], vec![0.0; 3]).unwrap();
        s.get_mut("g").unwrap().grad.copy_from_slice(&[10.0, -7.0, 2.5]);
        clip_grad_norm(&mut s, 1.5);
        let once = s.get("g").unwrap().grad.clone();
        let second = clip_grad_norm(&mut s, 1.5);
        assert!((second - 1.0).abs() < 1e-6);
        for (a, b) in once.iter().zip(&s.get("g").unwrap().grad) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_noop() {
        let mut s = scalar(0.7, 0.0);
        AdamW::new(0.0).step(&mut s, 0.1);
        assert_eq!(s.get("x").unwrap().value[0], 0.7);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut s = scalar(0.0, 1.0);
        AdamW::new(0.0).step(&mut s, 0.1);
        let x = s.get("x").unwrap().value[0];
        assert!((x + 0.1).abs() < 1e-7, "{x}");
        assert_eq!(s.get("x").unwrap().grad[0], 0.0);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn adamw_decay_is_multiplicative() {
        let mut s = scalar(2.0, 0.0);
        AdamW::new(1e-4).step(&mut s, 0.1);
        assert!((s.get("x").unwrap().value[0] - 2.0 * (1.0 - 0.1 * 1e-4)).abs() < 1e-15);
    }
}
