use super::tensor::{ParamSet, Scalar};

/// Adam with bias correction. Frozen parameters are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<S: Scalar>(&mut self, params: &mut ParamSet<S>) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = S::of(w.f64() - update);
            }
        }
    }
}

/// Rescales trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut ParamSet<S>, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = S::of(max_norm / norm);
        for p in params.iter_mut().filter(|p| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= c);
        }
    }
    norm
}
