use crate::error::{Error, Result};
use crate::tensor::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    /// Bias-corrected Adam update of `params` in place.
    ///
    /// Refuses to touch the parameters if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidShape(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient at parameter index {i} (step {})",
                self.step + 1
            )));
        }
        self.step += 1;
        let b1 = T::from_f64_lossy(BETA1);
        let b2 = T::from_f64_lossy(BETA2);
        let one = T::one();
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        // lr * mhat / (sqrt(vhat) + eps), with the corrections folded in
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(EPSILON);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::<f64>::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        st.step(&mut p, &[0.0; 3], 1e-2).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut st = AdamState::<f64>::new(2);
        let mut p = vec![1.0, 2.0];
        for _ in 0..5 {
            st.step(&mut p, &[0.3, -4.0], 0.0).unwrap();
        }
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        // with g = 1 every step, mhat = vhat = 1 exactly so each step is lr / (1 + eps)
        let mut st = AdamState::<f64>::new(1);
        let mut p = vec![0.0];
        let lr = 1e-3;
        let mut prev = 0.0;
        for _ in 0..200 {
            st.step(&mut p, &[1.0], lr).unwrap();
            let delta = prev - p[0];
            assert!(
                (delta - lr / (1.0 + EPSILON)).abs() < 1e-12,
                "delta = {delta}"
            );
            prev = p[0];
        }
    }

    #[test]
    fn first_step_hand_computed() {
        // m = 0.1 g, v = 0.001 g^2; mhat = g, vhat = g^2 -> step = lr * g / (|g| + eps)
        let mut st = AdamState::<f64>::new(1);
        let mut p = vec![0.5];
        st.step(&mut p, &[-0.2], 0.01).unwrap();
        let want = 0.5 + 0.01 * 0.2 / (0.2 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut st = AdamState::<f32>::new(2);
        let mut p = vec![1.0, 1.0];
        assert!(matches!(
            st.step(&mut p, &[0.0, f32::NAN], 1e-3),
            Err(Error::Numerical(_))
        ));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(st.step, 0);
    }
}
