//! DDPM forward/reverse processes over roll tensors.
//!
//! The schedule keeps its tables in f64 regardless of the tensor element
//! type; coefficients are cast at use. Every operation takes its randomness
//! (noise tensors) as an argument and never draws internally, so callers own
//! determinism. Timesteps are 1-based: `t` ranges over `1..=T`.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Element type of diffusion tensors.
pub trait Scalar: ndarray::NdFloat + num_traits::FromPrimitive {
    /// Cast a schedule coefficient into the tensor element type.
    fn cast(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite f64 fits any float")
    }
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Channels-first data tensor: `(channel, pitch, time)`.
pub type Tensor<F> = Array3<F>;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("schedule needs at least one step")]
    NoSteps,
    #[error("betas must satisfy 0 < start <= end < 1, got {start}..{end}")]
    BadBetaRange { start: f64, end: f64 },
    #[error("beta {0} outside [0, 1)")]
    BadBeta(f64),
    #[error("timestep {t} outside 1..={steps}")]
    BadTimestep { t: usize, steps: usize },
    #[error("tensor shapes differ: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        lhs: (usize, usize, usize),
        rhs: (usize, usize, usize),
    },
    #[error("the final reverse step (t=1) must receive zero noise")]
    NoiseAtFinalStep,
}

/// Per-step noise tables: beta, alpha = 1 - beta, and the running product
/// alpha_bar.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Build from explicit betas. Accepts the degenerate beta = 0 (useful
    /// for limit checks); [`make_schedule`] is the strict constructor.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::NoSteps);
        }
        for &b in &betas {
            if !(0.0..1.0).contains(&b) || !b.is_finite() {
                return Err(DiffusionError::BadBeta(b));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut product = 1.0;
        for &a in &alphas {
            product *= a;
            alpha_bars.push(product);
        }
        Ok(DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.steps() {
            Err(DiffusionError::BadTimestep {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `beta_t`, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t`, 1-based.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t = prod_{i<=t} alpha_i`, 1-based.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

/// Linear beta schedule from `beta_start` at t=1 to `beta_end` at t=T.
pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::NoSteps);
    }
    let valid = beta_start > 0.0
        && beta_start <= beta_end
        && beta_end < 1.0
        && beta_start.is_finite()
        && beta_end.is_finite();
    if !valid {
        return Err(DiffusionError::BadBetaRange {
            start: beta_start,
            end: beta_end,
        });
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_betas(betas)
}

fn check_shapes<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<(), DiffusionError> {
    if a.dim() != b.dim() {
        Err(DiffusionError::ShapeMismatch {
            lhs: a.dim(),
            rhs: b.dim(),
        })
    } else {
        Ok(())
    }
}

/// Closed-form forward jump: `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample<F: Scalar>(
    x0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<F>, DiffusionError> {
    schedule.check_t(t)?;
    check_shapes(x0, eps)?;
    let ab = schedule.alpha_bar(t);
    let signal = F::cast(ab.sqrt());
    let noise = F::cast((1.0 - ab).sqrt());
    Ok(x0.mapv(|x| x * signal) + eps.mapv(|e| e * noise))
}

/// Single forward step: `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn q_step<F: Scalar>(
    x_prev: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<F>, DiffusionError> {
    schedule.check_t(t)?;
    check_shapes(x_prev, eps)?;
    let beta = schedule.beta(t);
    let keep = F::cast((1.0 - beta).sqrt());
    let add = F::cast(beta.sqrt());
    Ok(x_prev.mapv(|x| x * keep) + eps.mapv(|e| e * add))
}

/// Reverse-step mean with the noise prediction plugged in:
/// `(1/sqrt(alpha_t)) (x_t - (1 - alpha_t)/sqrt(1 - alpha_bar_t) * eps_hat)`.
pub fn posterior_mean<F: Scalar>(
    x_t: &Tensor<F>,
    t: usize,
    eps_hat: &Tensor<F>,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<F>, DiffusionError> {
    schedule.check_t(t)?;
    check_shapes(x_t, eps_hat)?;
    let alpha = schedule.alpha(t);
    let one_minus_ab = 1.0 - schedule.alpha_bar(t);
    // beta_t = 0 forces the numerator to zero before the 0/0 limit can bite
    let eps_coef = if 1.0 - alpha == 0.0 {
        0.0
    } else {
        (1.0 - alpha) / one_minus_ab.sqrt()
    };
    let inv_sqrt_alpha = F::cast(1.0 / alpha.sqrt());
    let eps_coef = F::cast(eps_coef);
    Ok((x_t - &eps_hat.mapv(|e| e * eps_coef)).mapv(|x| x * inv_sqrt_alpha))
}

/// One reverse sampling step: the posterior mean plus `sqrt(beta_t)` noise,
/// except at t=1 where the step is deterministic and `noise` must be all
/// zeros.
pub fn p_sample_step<F: Scalar>(
    x_t: &Tensor<F>,
    t: usize,
    eps_hat: &Tensor<F>,
    noise: &Tensor<F>,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<F>, DiffusionError> {
    schedule.check_t(t)?;
    check_shapes(x_t, noise)?;
    let mean = posterior_mean(x_t, t, eps_hat, schedule)?;
    if t == 1 {
        if noise.iter().any(|&n| n != F::zero()) {
            return Err(DiffusionError::NoiseAtFinalStep);
        }
        return Ok(mean);
    }
    let sigma = F::cast(schedule.beta(t).sqrt());
    Ok(mean + noise.mapv(|n| n * sigma))
}

/// Epsilon-prediction objective: mean squared error between the injected
/// noise and the model's prediction on `x_t = q_sample(x0, t, eps)`.
pub fn training_loss<F: Scalar>(
    denoiser: impl FnOnce(&Tensor<F>, usize) -> Tensor<F>,
    x0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    schedule: &DiffusionSchedule,
) -> Result<F, DiffusionError> {
    let x_t = q_sample(x0, t, eps, schedule)?;
    let eps_hat = denoiser(&x_t, t);
    check_shapes(eps, &eps_hat)?;
    let n = F::cast(eps.len() as f64);
    let sum = eps
        .iter()
        .zip(eps_hat.iter())
        .map(|(&e, &p)| (e - p) * (e - p))
        .fold(F::zero(), |acc, d| acc + d);
    Ok(sum / n)
}

/// Fill a tensor with standard-normal draws from the given RNG.
pub fn standard_normal<F: Scalar, R: Rng + ?Sized>(
    shape: (usize, usize, usize),
    rng: &mut R,
) -> Tensor<F> {
    Array3::from_shape_simple_fn(shape, || F::cast(rng.sample(StandardNormal)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SHAPE: (usize, usize, usize) = (3, 4, 4);

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.steps(), 1);
        assert_eq!(s.beta(1), 0.1);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn standard_schedule_alpha_bar_matches_direct_product() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        // independent recount of the product
        let mut product = 1.0f64;
        for t in 1..=1000 {
            product *= 1.0 - s.beta(t);
            let rel = ((s.alpha_bar(t) - product) / product).abs();
            assert!(rel < 1e-12, "alpha_bar diverged from product at t={t}");
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "not strictly decreasing");
            }
        }
        // the standard linear schedule ends near 4e-5
        assert!((3.9e-5..4.1e-5).contains(&s.alpha_bar(1000)), "{}", s.alpha_bar(1000));
        assert_eq!(s.alpha_bar(1), s.alpha(1));
    }

    #[test]
    fn schedule_validation() {
        assert!(matches!(make_schedule(0, 0.1, 0.2), Err(DiffusionError::NoSteps)));
        assert!(matches!(
            make_schedule(10, 1e-4, 1.0),
            Err(DiffusionError::BadBetaRange { .. })
        ));
        assert!(matches!(
            make_schedule(10, 0.0, 0.5),
            Err(DiffusionError::BadBetaRange { .. })
        ));
        assert!(matches!(
            make_schedule(10, 0.5, 0.1),
            Err(DiffusionError::BadBetaRange { .. })
        ));
    }

    #[test]
    fn q_sample_noiseless_limit_is_identity() {
        let s = DiffusionSchedule::from_betas(vec![0.0, 0.0]).unwrap();
        let x0 = standard_normal::<f64, _>(SHAPE, &mut rng(1));
        let eps = standard_normal::<f64, _>(SHAPE, &mut rng(2));
        let xt = q_sample(&x0, 2, &eps, &s).unwrap();
        assert_eq!(xt, x0);
    }

    #[test]
    fn q_sample_zero_signal_case() {
        let s = make_schedule(10, 0.1, 0.1).unwrap();
        let x0 = Array3::<f64>::zeros(SHAPE);
        let eps = standard_normal::<f64, _>(SHAPE, &mut rng(3));
        let xt = q_sample(&x0, 5, &eps, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(5)).sqrt();
        for (a, b) in xt.iter().zip(eps.iter()) {
            assert!((a - b * scale).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_mean_matches_moments() {
        // Monte-Carlo oracle: sample mean ~= sqrt(alpha_bar) * x0 within 4 SE
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = standard_normal::<f64, _>(SHAPE, &mut rng(4));
        let t = 50;
        let n = 10_000;
        let mut mean = Array3::<f64>::zeros(SHAPE);
        let mut r = rng(5);
        for _ in 0..n {
            let eps = standard_normal::<f64, _>(SHAPE, &mut r);
            mean = mean + q_sample(&x0, t, &eps, &s).unwrap();
        }
        mean.mapv_inplace(|m| m / n as f64);
        let expected = x0.mapv(|x| x * s.alpha_bar(t).sqrt());
        let se = ((1.0 - s.alpha_bar(t)) / n as f64).sqrt();
        for (m, e) in mean.iter().zip(expected.iter()) {
            assert!((m - e).abs() < 4.0 * se, "mean {m} vs {e}, se {se}");
        }
    }

    #[test]
    fn q_step_limits() {
        let s = DiffusionSchedule::from_betas(vec![0.0]).unwrap();
        let x = standard_normal::<f64, _>(SHAPE, &mut rng(6));
        let eps = standard_normal::<f64, _>(SHAPE, &mut rng(7));
        assert_eq!(q_step(&x, 1, &eps, &s).unwrap(), x);

        let s = make_schedule(3, 0.25, 0.25).unwrap();
        let zero = Array3::<f64>::zeros(SHAPE);
        let ones = Array3::<f64>::ones(SHAPE);
        let out = q_step(&zero, 2, &ones, &s).unwrap();
        for &v in out.iter() {
            assert!((v - 0.5).abs() < 1e-15); // sqrt(0.25)
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        let x0 = Array3::<f64>::zeros((3, 4, 4));
        let eps = Array3::<f64>::zeros((3, 4, 8));
        assert!(matches!(
            q_sample(&x0, 1, &eps, &s),
            Err(DiffusionError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn posterior_mean_inverts_single_step_exactly() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        let x0 = standard_normal::<f64, _>(SHAPE, &mut rng(8));
        let eps = standard_normal::<f64, _>(SHAPE, &mut rng(9));
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let recovered = posterior_mean(&x1, 1, &eps, &s).unwrap();
        for (r, x) in recovered.iter().zip(x0.iter()) {
            assert!((r - x).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_mean_identity_limit() {
        let s = DiffusionSchedule::from_betas(vec![0.0]).unwrap();
        let x = standard_normal::<f64, _>(SHAPE, &mut rng(10));
        let zeros = Array3::<f64>::zeros(SHAPE);
        assert_eq!(posterior_mean(&x, 1, &zeros, &s).unwrap(), x);
    }

    #[test]
    fn posterior_mean_total_on_random_input() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let x = standard_normal::<f64, _>(SHAPE, &mut rng(11));
        let e = standard_normal::<f64, _>(SHAPE, &mut rng(12));
        let out = posterior_mean(&x, 25, &e, &s).unwrap();
        assert_eq!(out.dim(), SHAPE);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn p_sample_final_step_is_deterministic() {
        let s = make_schedule(5, 0.01, 0.05).unwrap();
        let x = standard_normal::<f64, _>(SHAPE, &mut rng(13));
        let e = standard_normal::<f64, _>(SHAPE, &mut rng(14));
        let zeros = Array3::<f64>::zeros(SHAPE);
        let mean = posterior_mean(&x, 1, &e, &s).unwrap();
        assert_eq!(p_sample_step(&x, 1, &e, &zeros, &s).unwrap(), mean);

        let noise = standard_normal::<f64, _>(SHAPE, &mut rng(15));
        assert!(matches!(
            p_sample_step(&x, 1, &e, &noise, &s),
            Err(DiffusionError::NoiseAtFinalStep)
        ));
    }

    #[test]
    fn reverse_walk_with_zero_denoiser_stays_within_variance_bound() {
        // variance recursion oracle: V_{t-1} = V_t / alpha_t + beta_t
        let steps = 20;
        let s = make_schedule(steps, 1e-3, 0.05).unwrap();
        let mut bound = 1.0f64; // x_T ~ N(0, 1)
        for t in (2..=steps).rev() {
            bound = bound / s.alpha(t) + s.beta(t);
        }
        bound /= s.alpha(1); // final deterministic step still rescales

        let trials = 4000;
        let shape = (1, 4, 4);
        let zeros = Array3::<f64>::zeros(shape);
        let mut r = rng(16);
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for _ in 0..trials {
            let mut x = standard_normal::<f64, _>(shape, &mut r);
            for t in (1..=steps).rev() {
                let noise = if t > 1 {
                    standard_normal::<f64, _>(shape, &mut r)
                } else {
                    zeros.clone()
                };
                x = p_sample_step(&x, t, &zeros, &noise, &s).unwrap();
            }
            sum_sq += x.iter().map(|v| v * v).sum::<f64>();
            count += x.len();
        }
        let empirical = sum_sq / count as f64;
        assert!(
            empirical <= bound * 1.05,
            "empirical variance {empirical} above analytic bound {bound}"
        );
        assert!(empirical >= bound * 0.9, "walk variance suspiciously low");
    }

    #[test]
    fn training_loss_perfect_denoiser_is_zero() {
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        let x0 = standard_normal::<f64, _>(SHAPE, &mut rng(17));
        let eps = standard_normal::<f64, _>(SHAPE, &mut rng(18));
        let loss = training_loss(|_, _| eps.clone(), &x0, 5, &eps, &s).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn training_loss_zero_denoiser_matches_chi_square_moment() {
        // E[eps^2] = 1, SE = sqrt(2/n) for n independent draws
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        let shape = (4, 50, 50); // 10^4 elements
        let x0 = Array3::<f64>::zeros(shape);
        let eps = standard_normal::<f64, _>(shape, &mut rng(19));
        let loss = training_loss(|x, _| Array3::zeros(x.dim()), &x0, 5, &eps, &s).unwrap();
        let se = (2.0 / eps.len() as f64).sqrt();
        assert!((loss - 1.0).abs() < 3.0 * se, "loss {loss} se {se}");
    }

    #[test]
    fn training_loss_non_negative() {
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        let x0 = standard_normal::<f64, _>(SHAPE, &mut rng(20));
        let eps = standard_normal::<f64, _>(SHAPE, &mut rng(21));
        let junk = standard_normal::<f64, _>(SHAPE, &mut rng(22));
        let loss = training_loss(|_, _| junk.clone(), &x0, 3, &eps, &s).unwrap();
        assert!(loss >= 0.0);
    }
}
