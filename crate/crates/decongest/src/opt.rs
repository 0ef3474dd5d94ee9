//! Flat-parameter Adam.

/// Adam with the usual defaults (β₁=0.9, β₂=0.999, ε=1e-8). Works on a flat
/// parameter slice; direction (ascent/descent) is the caller's choice.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], sign: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t);
        let b2t = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] += sign * self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Minimize: move against the gradient.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.update(params, grad, -1.0);
    }

    /// Maximize: move along the gradient.
    pub fn step_ascent(&mut self, params: &mut [f64], grad: &[f64]) {
        self.update(params, grad, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut adam = Adam::new(0.05, 2);
        for _ in 0..2000 {
            let grad: Vec<f64> = p.iter().map(|&x| 2.0 * x).collect();
            adam.step(&mut p, &grad);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn ascent_mirrors_descent() {
        let mut down = vec![1.0];
        let mut up = vec![1.0];
        let mut a = Adam::new(0.1, 1);
        let mut b = Adam::new(0.1, 1);
        for _ in 0..50 {
            let gd = vec![2.0 * down[0]];
            a.step(&mut down, &gd);
            let gu = vec![-2.0 * up[0]];
            b.step_ascent(&mut up, &gu);
        }
        assert!((down[0] - up[0]).abs() < 1e-12);
    }
}
