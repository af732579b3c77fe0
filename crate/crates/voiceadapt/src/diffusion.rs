//! Forward corruption, score-matching loss and the reverse-time sampler.

use crate::error::{Error, Result};
use crate::rng::{randn, RngStream};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Linear noise schedule `beta_t = beta0 + (beta1 - beta0) * t` on [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule<T: Scalar> {
    pub beta0: T,
    pub beta1: T,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn new(beta0: T, beta1: T) -> Result<Self> {
        if !(beta0 > T::zero() && beta0 <= beta1) {
            return Err(Error::Config(format!(
                "noise schedule requires 0 < beta0 <= beta1, got ({}, {})",
                beta0, beta1
            )));
        }
        Ok(Self { beta0, beta1 })
    }

    pub fn beta_at(&self, t: T) -> T {
        self.beta0 + (self.beta1 - self.beta0) * t
    }
}

fn check_t<T: Scalar>(t: T) -> Result<()> {
    if t < T::zero() || t > T::one() {
        return Err(Error::Domain(format!("t = {} outside [0, 1]", t)));
    }
    Ok(())
}

/// `lambda_t = exp(-(beta0 t + (beta1 - beta0) t^2 / 2))`, the closed form
/// of `exp(-int_0^t beta_s ds)` for the linear schedule.
pub fn lambda_of<T: Scalar>(schedule: &NoiseSchedule<T>, t: T) -> Result<T> {
    check_t(t)?;
    let half = T::from_f64_lossy(0.5);
    let integral = schedule.beta0 * t + (schedule.beta1 - schedule.beta0) * t * t * half;
    Ok((-integral).exp())
}

/// One corrupted sample together with the noise that produced it.
#[derive(Clone, Debug)]
pub struct CorruptionSample<T: Scalar> {
    pub x_t: TensorBase<T>,
    pub eps: TensorBase<T>,
    pub t: T,
}

/// `x_t = sqrt(lambda_t) x0 + sqrt(1 - lambda_t) eps`.
pub fn corrupt<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    x0: &TensorBase<T>,
    t: T,
    eps: &TensorBase<T>,
) -> Result<CorruptionSample<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Dim(format!(
            "corrupt: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let lambda = lambda_of(schedule, t)?;
    let a = lambda.sqrt();
    let b = (T::one() - lambda).sqrt();
    let mut x_t = x0.scale(a);
    x_t.axpy(b, eps)?;
    Ok(CorruptionSample { x_t, eps: eps.clone(), t })
}

fn mask_factor<T: Scalar>(
    mask: &TensorBase<T>,
    shape: &[usize],
    flat_index: usize,
) -> T {
    if mask.numel() == shape.iter().product::<usize>() {
        mask.data()[flat_index]
    } else {
        // frame mask over the trailing axis
        let l = *shape.last().unwrap();
        mask.data()[flat_index % l]
    }
}

/// Mean over unmasked elements of `(sqrt(1 - lambda_t) s_out + eps)^2`.
///
/// `mask` is either the same shape as `s_out` or a frame mask over the
/// trailing axis.
pub fn score_loss<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    s_out: &TensorBase<T>,
    eps: &TensorBase<T>,
    t: T,
    mask: &TensorBase<T>,
) -> Result<T> {
    if s_out.shape() != eps.shape() {
        return Err(Error::Dim(format!(
            "score_loss: s_out {:?} vs eps {:?}",
            s_out.shape(),
            eps.shape()
        )));
    }
    let total = s_out.numel();
    let l = *s_out.shape().last().unwrap_or(&1);
    if mask.numel() != total && mask.numel() != l {
        return Err(Error::Dim(format!(
            "score_loss: mask numel {} fits neither {} nor trailing {}",
            mask.numel(),
            total,
            l
        )));
    }
    let lambda = lambda_of(schedule, t)?;
    let b = (T::one() - lambda).sqrt();
    let mut acc = T::zero();
    let mut count = T::zero();
    for i in 0..total {
        let w = mask_factor(mask, s_out.shape(), i);
        let r = b * s_out.data()[i] + eps.data()[i];
        acc += w * r * r;
        count += w;
    }
    if count <= T::zero() {
        return Err(Error::Degenerate("score_loss: all-zero mask".into()));
    }
    Ok(acc / count)
}

/// Gradient of `score_loss` with respect to `s_out` (same masking rules).
pub fn score_loss_grad<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    s_out: &TensorBase<T>,
    eps: &TensorBase<T>,
    t: T,
    mask: &TensorBase<T>,
) -> Result<TensorBase<T>> {
    let lambda = lambda_of(schedule, t)?;
    let b = (T::one() - lambda).sqrt();
    let total = s_out.numel();
    let mut count = T::zero();
    for i in 0..total {
        count += mask_factor(mask, s_out.shape(), i);
    }
    if count <= T::zero() {
        return Err(Error::Degenerate("score_loss_grad: all-zero mask".into()));
    }
    let two = T::from_f64_lossy(2.0);
    let mut grad = TensorBase::zeros(s_out.shape());
    for i in 0..total {
        let w = mask_factor(mask, s_out.shape(), i);
        let r = b * s_out.data()[i] + eps.data()[i];
        grad.data_mut()[i] = w * two * b * r / count;
    }
    Ok(grad)
}

/// One reverse-time Euler-Maruyama step:
/// `x + beta_t (x/2 + s) dt + sqrt(beta_t dt) z`.
pub fn reverse_step<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    x_t: &TensorBase<T>,
    s: &TensorBase<T>,
    t: T,
    dt: T,
    z: &TensorBase<T>,
) -> Result<TensorBase<T>> {
    if dt <= T::zero() || dt > t {
        return Err(Error::Domain(format!("reverse_step: dt {} with t {}", dt, t)));
    }
    if x_t.shape() != s.shape() || x_t.shape() != z.shape() {
        return Err(Error::Dim(format!(
            "reverse_step: x {:?}, s {:?}, z {:?}",
            x_t.shape(),
            s.shape(),
            z.shape()
        )));
    }
    let beta = schedule.beta_at(t);
    let half = T::from_f64_lossy(0.5);
    let mut out = x_t.clone();
    for i in 0..out.numel() {
        let drift = beta * (half * x_t.data()[i] + s.data()[i]) * dt;
        out.data_mut()[i] = x_t.data()[i] + drift + (beta * dt).sqrt() * z.data()[i];
    }
    out.check_finite("reverse_step result")?;
    Ok(out)
}

/// Iterate `reverse_step` from `X_1 ~ N(0, I)` on the uniform grid
/// `t = 1, 1 - dt, ..., dt`; the final step uses `z = 0`.
pub fn sample<T, F>(
    schedule: &NoiseSchedule<T>,
    shape: &[usize],
    mut score_fn: F,
    steps: usize,
    stream: &mut RngStream,
) -> Result<TensorBase<T>>
where
    T: Scalar,
    F: FnMut(&TensorBase<T>, T) -> Result<TensorBase<T>>,
{
    if steps < 1 {
        return Err(Error::Domain("sample: steps must be >= 1".into()));
    }
    let dt = T::one() / T::from_f64_lossy(steps as f64);
    let mut x = randn(stream, shape);
    for i in 0..steps {
        // t = dt * (steps - i) so the last step lands exactly on t = dt
        let t = dt * T::from_f64_lossy((steps - i) as f64);
        let s = score_fn(&x, t)?;
        let z = if i + 1 == steps {
            TensorBase::zeros(shape)
        } else {
            randn(stream, shape)
        };
        x = reverse_step(schedule, &x, &s, t, dt, &z)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = TensorBase<f64>;

    fn sched() -> NoiseSchedule<f64> {
        NoiseSchedule::new(0.05, 20.0).unwrap()
    }

    // numerical quadrature oracle for int_0^t beta_s ds
    fn lambda_quadrature(s: &NoiseSchedule<f64>, t: f64) -> f64 {
        let n = 200_000;
        let h = t / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let mid = (i as f64 + 0.5) * h;
            acc += s.beta_at(mid) * h;
        }
        (-acc).exp()
    }

    #[test]
    fn lambda_at_zero_is_one() {
        assert_eq!(lambda_of(&sched(), 0.0).unwrap(), 1.0);
    }

    #[test]
    fn lambda_matches_quadrature() {
        let s = sched();
        for &t in &[0.5, 1.0] {
            let closed = lambda_of(&s, t).unwrap();
            let quad = lambda_quadrature(&s, t);
            assert!((closed - quad).abs() / quad < 1e-6, "t={}: {} vs {}", t, closed, quad);
        }
        assert!((lambda_of(&s, 0.5).unwrap() - (-2.51875f64).exp()).abs() < 1e-9);
        assert!((lambda_of(&s, 1.0).unwrap() - (-10.025f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn lambda_strictly_decreasing() {
        let s = sched();
        let mut prev = lambda_of(&s, 0.0).unwrap();
        for i in 1..=100 {
            let cur = lambda_of(&s, i as f64 / 100.0).unwrap();
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn lambda_domain_error() {
        assert!(matches!(lambda_of(&sched(), 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn corrupt_at_zero_is_identity() {
        let x0 = T64::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let eps = T64::filled(&[2, 3], 5.0);
        let c = corrupt(&sched(), &x0, 0.0, &eps).unwrap();
        assert_eq!(c.x_t, x0);
    }

    #[test]
    fn corrupt_forced_lambda() {
        // pick t so that lambda = 0.64 by constructing a schedule analytically:
        // with beta0 = beta1 = b, lambda(t) = exp(-b t); choose b, t so b t = -ln 0.64
        let b = -(0.64f64).ln();
        let s = NoiseSchedule::new(b, b).unwrap();
        let x0 = T64::zeros(&[3, 3]);
        let eps = T64::filled(&[3, 3], 1.0);
        let c = corrupt(&s, &x0, 1.0, &eps).unwrap();
        for &v in c.x_t.data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn corrupt_monte_carlo_moments() {
        let s = sched();
        let t = 0.4;
        let lambda = lambda_of(&s, t).unwrap();
        let x0 = T64::new(&[2, 2], vec![1.0, -1.0, 2.0, 0.5]).unwrap();
        let n = 20_000;
        let mut stream = RngStream::new(77, 0);
        let mut mean = vec![0.0; 4];
        let mut m2 = vec![0.0; 4];
        for _ in 0..n {
            let eps: T64 = randn(&mut stream, &[2, 2]);
            let c = corrupt(&s, &x0, t, &eps).unwrap();
            for i in 0..4 {
                mean[i] += c.x_t.data()[i];
                m2[i] += c.x_t.data()[i] * c.x_t.data()[i];
            }
        }
        let var_expect = 1.0 - lambda;
        let se_mean = (var_expect / n as f64).sqrt();
        for i in 0..4 {
            let m = mean[i] / n as f64;
            let v = m2[i] / n as f64 - m * m;
            assert!((m - lambda.sqrt() * x0.data()[i]).abs() < 3.0 * se_mean);
            // 3 sigma on sample variance of a normal: sd ~ var * sqrt(2/n)
            assert!((v - var_expect).abs() < 3.0 * var_expect * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn score_loss_zero_at_exact_residual() {
        let s = sched();
        let t = 0.3;
        let lambda = lambda_of(&s, t).unwrap();
        let mut stream = RngStream::new(3, 0);
        let eps: T64 = randn(&mut stream, &[4, 6]);
        let s_out = eps.scale(-1.0 / (1.0 - lambda).sqrt());
        let mask = T64::filled(&[1, 6], 1.0);
        let loss = score_loss(&s, &s_out, &eps, t, &mask).unwrap();
        assert!(loss.abs() < 1e-24);
    }

    #[test]
    fn score_loss_reduces_to_mean_eps_sq() {
        let s = sched();
        let mut stream = RngStream::new(4, 0);
        let eps: T64 = randn(&mut stream, &[4, 6]);
        let zero = T64::zeros(&[4, 6]);
        let mask = T64::filled(&[1, 6], 1.0);
        let loss = score_loss(&s, &zero, &eps, 0.3, &mask).unwrap();
        let expect = eps.data().iter().map(|v| v * v).sum::<f64>() / 24.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn score_loss_matches_loop_oracle() {
        let s = sched();
        let t = 0.7;
        let lambda = lambda_of(&s, t).unwrap();
        let mut stream = RngStream::new(5, 0);
        let so: T64 = randn(&mut stream, &[4, 6]);
        let eps: T64 = randn(&mut stream, &[4, 6]);
        let mut mask = T64::filled(&[1, 6], 1.0);
        mask.data_mut()[4] = 0.0;
        mask.data_mut()[5] = 0.0;
        let loss = score_loss(&s, &so, &eps, t, &mask).unwrap();
        let b = (1.0 - lambda).sqrt();
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for f in 0..4 {
            for l in 0..4 {
                let r = b * so.data()[f * 6 + l] + eps.data()[f * 6 + l];
                acc += r * r;
                cnt += 1.0;
            }
        }
        assert!((loss - acc / cnt).abs() <= 1e-12);
    }

    #[test]
    fn score_loss_all_zero_mask_errors() {
        let s = sched();
        let x = T64::zeros(&[2, 2]);
        let mask = T64::zeros(&[1, 2]);
        assert!(matches!(
            score_loss(&s, &x, &x, 0.5, &mask),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn score_loss_grad_matches_finite_differences() {
        let s = sched();
        let t = 0.6;
        let mut stream = RngStream::new(6, 0);
        let mut so: T64 = randn(&mut stream, &[3, 5]);
        let eps: T64 = randn(&mut stream, &[3, 5]);
        let mut mask = T64::filled(&[1, 5], 1.0);
        mask.data_mut()[4] = 0.0;
        let grad = score_loss_grad(&s, &so, &eps, t, &mask).unwrap();
        let h = 1e-6;
        for i in 0..so.numel() {
            let orig = so.data()[i];
            so.data_mut()[i] = orig + h;
            let lp = score_loss(&s, &so, &eps, t, &mask).unwrap();
            so.data_mut()[i] = orig - h;
            let lm = score_loss(&s, &so, &eps, t, &mask).unwrap();
            so.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((grad.data()[i] - fd).abs() < 1e-6, "i={}: {} vs {}", i, grad.data()[i], fd);
        }
    }

    #[test]
    fn reverse_step_frozen_dynamics() {
        // beta == 0 cannot be built through the validated constructor
        let s = NoiseSchedule { beta0: 0.0, beta1: 0.0 };
        let x = T64::new(&[2], vec![1.5, -0.5]).unwrap();
        let sc = T64::filled(&[2], 3.0);
        let z = T64::filled(&[2], 2.0);
        let out = reverse_step(&s, &x, &sc, 0.5, 0.1, &z).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn reverse_step_direct_substitution() {
        let s = NoiseSchedule { beta0: 2.0, beta1: 2.0 };
        let x = T64::filled(&[1], 1.0);
        let zero = T64::zeros(&[1]);
        let out = reverse_step(&s, &x, &zero, 0.5, 0.1, &zero).unwrap();
        assert!((out.data()[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn reverse_step_domain_errors() {
        let s = sched();
        let x = T64::zeros(&[1]);
        assert!(matches!(
            reverse_step(&s, &x, &x, 0.5, 0.0, &x),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            reverse_step(&s, &x, &x, 0.1, 0.2, &x),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sampler_with_analytic_gaussian_score_recovers_mean() {
        // 1-D data N(mu, sigma^2); marginal at t is
        // N(sqrt(lambda) mu, lambda sigma^2 + 1 - lambda) with analytic score.
        let s = sched();
        let mu = 1.7;
        let sigma2 = 0.25;
        let chains = 2000;
        let steps = 50;
        let mut stream = RngStream::new(2024, 0);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..chains {
            let x = sample(
                &s,
                &[1],
                |x, t| {
                    let lambda = lambda_of(&s, t)?;
                    let var = lambda * sigma2 + 1.0 - lambda;
                    Ok(x.map(|v| -(v - lambda.sqrt() * mu) / var))
                },
                steps,
                &mut stream,
            )
            .unwrap();
            sum += x.data()[0];
            sumsq += x.data()[0] * x.data()[0];
        }
        let mean = sum / chains as f64;
        let var = sumsq / chains as f64 - mean * mean;
        let se = (var / chains as f64).sqrt();
        assert!(
            (mean - mu).abs() < 3.0 * se.max(0.02),
            "mean {} vs mu {} (se {})",
            mean,
            mu,
            se
        );
    }

    #[test]
    fn sampler_determinism() {
        let s = sched();
        let score = |x: &T64, _t: f64| Ok(x.scale(-1.0));
        let mut s1 = RngStream::new(8, 1);
        let mut s2 = RngStream::new(8, 1);
        let a = sample(&s, &[2, 3], score, 10, &mut s1).unwrap();
        let b = sample(&s, &[2, 3], score, 10, &mut s2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_single_step_no_dynamics() {
        let s = NoiseSchedule { beta0: 1e-12, beta1: 1e-12 };
        let mut s1 = RngStream::new(8, 2);
        let mut s2 = RngStream::new(8, 2);
        let out = sample(&s, &[4], |x, _| Ok(x.scale(0.0)), 1, &mut s1).unwrap();
        let noise: T64 = randn(&mut s2, &[4]);
        assert!(out.sub(&noise).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn corrupt_linear_in_inputs() {
        let s = sched();
        let t = 0.35;
        let mut stream = RngStream::new(9, 0);
        let x0: T64 = randn(&mut stream, &[3, 4]);
        let y0: T64 = randn(&mut stream, &[3, 4]);
        let eps: T64 = randn(&mut stream, &[3, 4]);
        let a = corrupt(&s, &x0, t, &eps).unwrap().x_t;
        let b = corrupt(&s, &y0, t, &eps).unwrap().x_t;
        let both = corrupt(&s, &x0.add(&y0).unwrap(), t, &eps).unwrap().x_t;
        let zero_eps = T64::zeros(&[3, 4]);
        let eps_part = corrupt(&s, &T64::zeros(&[3, 4]), t, &eps).unwrap().x_t;
        let sum_parts = a
            .add(&b)
            .unwrap()
            .sub(&eps_part)
            .unwrap();
        assert!(both.sub(&sum_parts).unwrap().max_abs() < 1e-12);
        let _ = zero_eps;
    }
}
