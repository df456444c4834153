//! Adam optimizer over named parameter sets.

use crate::params::Params;
use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// First/second moment accumulators, keyed like the parameters.
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(template: &Params, lr: f64) -> Self {
        let mut m = Params::new();
        let mut v = Params::new();
        for (n, t) in template.iter() {
            m.push(n, Tensor::zeros(t.shape()));
            v.push(n, Tensor::zeros(t.shape()));
        }
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    /// One update; `grads` must align with `params` by name and order.
    pub fn step(&mut self, params: &mut Params, grads: &[(String, Tensor)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.require(name).expect("grad for unknown parameter");
            let m = self.m.require(name).unwrap();
            let v = self.v.require(name).unwrap();
            let n = p.numel();
            let mut new_p = Vec::with_capacity(n);
            let mut new_m = Vec::with_capacity(n);
            let mut new_v = Vec::with_capacity(n);
            for i in 0..n {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                new_p.push(p.data()[i] - self.lr * mhat / (vhat.sqrt() + self.eps));
                new_m.push(mi);
                new_v.push(vi);
            }
            let shape = p.shape().to_vec();
            params.set(name, Tensor::new(shape.clone(), new_p).unwrap());
            self.m.set(name, Tensor::new(shape.clone(), new_m).unwrap());
            self.v.set(name, Tensor::new(shape, new_v).unwrap());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize f(x) = x^2 from x = 3
        let mut params = Params::new();
        params.push("x", Tensor::scalar(3.0));
        let mut opt = Adam::new(&params, 0.1);
        for _ in 0..200 {
            let x = params.get("x").unwrap().item().unwrap();
            let grads = vec![("x".to_string(), Tensor::scalar(2.0 * x))];
            opt.step(&mut params, &grads);
        }
        assert!(params.get("x").unwrap().item().unwrap().abs() < 0.05);
    }
}
