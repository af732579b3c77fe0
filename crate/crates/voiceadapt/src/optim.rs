//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

#[derive(Clone, Copy, Debug)]
pub struct AdamParams<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamParams<T> {
    pub fn with_lr(lr: T) -> Self {
        Self {
            lr,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub m: TensorBase<T>,
    pub v: TensorBase<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: TensorBase::zeros(shape),
            v: TensorBase::zeros(shape),
            step: 0,
        }
    }

    /// One in-place Adam update.
    pub fn apply(
        &mut self,
        params: &mut TensorBase<T>,
        grads: &TensorBase<T>,
        hp: &AdamParams<T>,
    ) -> Result<()> {
        if params.shape() != grads.shape() || params.shape() != self.m.shape() {
            return Err(Error::Dim(format!(
                "adam: params {:?}, grads {:?}, state {:?}",
                params.shape(),
                grads.shape(),
                self.m.shape()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - hp.beta1.powi(t);
        let bc2 = T::one() - hp.beta2.powi(t);
        let one = T::one();
        for i in 0..params.numel() {
            let g = grads.data()[i];
            let m = hp.beta1 * self.m.data()[i] + (one - hp.beta1) * g;
            let v = hp.beta2 * self.v.data()[i] + (one - hp.beta2) * g * g;
            self.m.data_mut()[i] = m;
            self.v.data_mut()[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params.data_mut()[i] = params.data()[i] - hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = TensorBase<f64>;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = T64::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = T64::zeros(&[3]);
        let mut st = AdamState::new(&[3]);
        let before = p.clone();
        st.apply(&mut p, &g, &AdamParams::with_lr(0.1)).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let hp = AdamParams::with_lr(1e-3);
        let mut p = T64::new(&[2], vec![0.0, 0.0]).unwrap();
        let g = T64::new(&[2], vec![4.0, -0.25]).unwrap();
        let mut st = AdamState::new(&[2]);
        st.apply(&mut p, &g, &hp).unwrap();
        // bias-corrected first step: m_hat = g, v_hat = g^2
        for (got, sign) in p.data().iter().zip([1.0, -1.0]) {
            assert!((got + sign * hp.lr).abs() < 1e-9, "{}", got);
        }
    }

    #[test]
    fn matches_scalar_reference_over_100_steps() {
        let hp = AdamParams::with_lr(0.01);
        let mut p = T64::new(&[1], vec![2.0]).unwrap();
        let mut st = AdamState::new(&[1]);

        // independent scalar reference
        let (mut rp, mut rm, mut rv) = (2.0f64, 0.0f64, 0.0f64);
        let mut stream = crate::rng::RngStream::new(55, 0);
        for step in 1..=100u64 {
            let g = stream.next_normal();
            let gt = T64::new(&[1], vec![g]).unwrap();
            st.apply(&mut p, &gt, &hp).unwrap();

            rm = 0.9 * rm + 0.1 * g;
            rv = 0.999 * rv + 0.001 * g * g;
            let mh = rm / (1.0 - 0.9f64.powi(step as i32));
            let vh = rv / (1.0 - 0.999f64.powi(step as i32));
            rp -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p.data()[0] - rp).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = T64::zeros(&[2]);
        let g = T64::zeros(&[3]);
        let mut st = AdamState::new(&[2]);
        assert!(st.apply(&mut p, &g, &AdamParams::with_lr(0.1)).is_err());
    }
}
