use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params` given index-aligned `grads`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::Shape("optimizer parameter set changed".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::from_vec(&[3], vec![0.5, -2.0, 0.0]).unwrap();
        let mut opt = Adam::new(0.1, 0.5, 0.9);
        opt.step(&mut [&mut p], &[g]).unwrap();
        let d = p.data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 2.1).abs() < 1e-6);
        assert_eq!(d[2], 3.0);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut p = Tensor::from_vec(&[2], vec![0.123, -4.5]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(0.0, 0.5, 0.9);
        for _ in 0..3 {
            let g = Tensor::from_vec(&[2], vec![1.0, -3.0]).unwrap();
            opt.step(&mut [&mut p], &[g]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::from_vec(&[1], vec![5.0]).unwrap();
        let mut opt = Adam::new(0.05, 0.5, 0.9);
        for _ in 0..2000 {
            let g = Tensor::from_vec(&[1], vec![2.0 * (p.data()[0] - 1.5)]).unwrap();
            opt.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!((p.data()[0] - 1.5).abs() < 1e-2);
    }
}
