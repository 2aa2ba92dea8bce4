//! Discrete-time Gaussian diffusion: schedule construction, forward noising,
//! reverse posterior step, training losses, classifier-free guidance and the
//! full ancestral sampler.

use ndarray::{Array4, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Schedule family for the per-step noise rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Per-step diffusion tables, indexed by `t = 1..=n_steps`.
///
/// `alpha_bar` is the running product of `alpha`, and `posterior_variance[t]`
/// is `beta[t] * (1 - alpha_bar[t-1]) / (1 - alpha_bar[t])` with
/// `alpha_bar[0] := 1`, which makes the final reverse step deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
}

impl NoiseSchedule {
    pub fn n_steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.n_steps() {
            return Err(CoreError::config(format!(
                "step {t} outside 1..={}",
                self.n_steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }
}

/// Build a noise schedule.
///
/// For the linear family, `beta` is interpolated from `beta_start` to
/// `beta_end`. The cosine family follows the squared-cosine cumulative
/// schedule (offset 0.008, per-step beta capped at 0.999); the beta bounds
/// are ignored there.
pub fn make_schedule(
    kind: ScheduleKind,
    n_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if n_steps == 0 {
        return Err(CoreError::config("n_steps must be >= 1"));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                return Err(CoreError::config(format!(
                    "linear schedule needs 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
                )));
            }
            if n_steps == 1 {
                vec![beta_start]
            } else {
                (0..n_steps)
                    .map(|i| {
                        beta_start + (beta_end - beta_start) * i as f64 / (n_steps - 1) as f64
                    })
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / n_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            let f0 = f(0.0);
            (1..=n_steps)
                .map(|t| {
                    let ab_t = f(t as f64) / f0;
                    let ab_prev = f((t - 1) as f64) / f0;
                    (1.0 - ab_t / ab_prev).clamp(1e-8, 0.999)
                })
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(n_steps);
    let mut running = 1.0;
    for a in &alpha {
        running *= a;
        alpha_bar.push(running);
    }
    let mut posterior_variance = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        let ab_prev = if t == 0 { 1.0 } else { alpha_bar[t - 1] };
        posterior_variance.push((1.0 - ab_prev) / (1.0 - alpha_bar[t]) * beta[t]);
    }
    Ok(NoiseSchedule { kind, beta_start, beta_end, beta, alpha, alpha_bar, posterior_variance })
}

fn same_shape<F: NdFloat>(a: &Array4<F>, b: &Array4<F>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CoreError::shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Forward noising: `x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps`.
pub fn forward_sample<F: NdFloat>(
    x0: &Array4<F>,
    t: usize,
    epsilon: &Array4<F>,
    schedule: &NoiseSchedule,
) -> Result<Array4<F>> {
    schedule.check_t(t)?;
    same_shape(x0, epsilon, "forward_sample x0/epsilon")?;
    let ab = schedule.alpha_bar(t);
    let c0 = F::from(ab.sqrt()).unwrap();
    let ce = F::from((1.0 - ab).sqrt()).unwrap();
    Ok(x0.mapv(|v| v * c0) + epsilon.mapv(|v| v * ce))
}

/// One reverse step from `x_t` to `x_{t-1}` given the predicted noise.
///
/// The mean is `(x_t - (1 - alpha[t]) / sqrt(1 - alpha_bar[t]) eps) / sqrt(alpha[t])`;
/// posterior noise is added for `t > 1` and the final step is deterministic.
pub fn posterior_step<F: NdFloat>(
    x_t: &Array4<F>,
    eps_pred: &Array4<F>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Array4<F>,
) -> Result<Array4<F>> {
    schedule.check_t(t)?;
    same_shape(x_t, eps_pred, "posterior_step x_t/eps_pred")?;
    same_shape(x_t, noise, "posterior_step x_t/noise")?;
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let inv_sqrt_a = F::from(1.0 / a.sqrt()).unwrap();
    let eps_coeff = F::from((1.0 - a) / (1.0 - ab).sqrt()).unwrap();
    let mut out = x_t - &eps_pred.mapv(|v| v * eps_coeff);
    out.mapv_inplace(|v| v * inv_sqrt_a);
    if t > 1 {
        let sigma = F::from(schedule.posterior_variance(t).sqrt()).unwrap();
        out = out + noise.mapv(|v| v * sigma);
    }
    Ok(out)
}

/// Loss applied to the extracted target-frame noise residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Smooth L1 with transition point 1 (the training default).
    SmoothL1,
    /// Plain mean squared error.
    SquaredError,
}

/// Mean loss between predicted and true noise over the target region.
pub fn training_loss<F: NdFloat>(eps_pred: &Array4<F>, eps_true: &Array4<F>, kind: LossKind) -> Result<F> {
    same_shape(eps_pred, eps_true, "training_loss")?;
    let n = F::from(eps_pred.len()).unwrap();
    let half = F::from(0.5).unwrap();
    let one = F::one();
    let mut acc = F::zero();
    for (&p, &y) in eps_pred.iter().zip(eps_true.iter()) {
        let r = p - y;
        acc = acc
            + match kind {
                LossKind::SmoothL1 => {
                    if r.abs() < one {
                        half * r * r
                    } else {
                        r.abs() - half
                    }
                }
                LossKind::SquaredError => r * r,
            };
    }
    Ok(acc / n)
}

/// Gradient of [`training_loss`] with respect to `eps_pred`.
pub fn training_loss_grad<F: NdFloat>(
    eps_pred: &Array4<F>,
    eps_true: &Array4<F>,
    kind: LossKind,
) -> Result<Array4<F>> {
    same_shape(eps_pred, eps_true, "training_loss_grad")?;
    let inv_n = F::one() / F::from(eps_pred.len()).unwrap();
    let one = F::one();
    let two = F::from(2.0).unwrap();
    let mut grad = eps_pred - eps_true;
    grad.mapv_inplace(|r| {
        (match kind {
            LossKind::SmoothL1 => {
                if r.abs() < one {
                    r
                } else {
                    r.signum()
                }
            }
            LossKind::SquaredError => two * r,
        }) * inv_n
    });
    Ok(grad)
}

/// Classifier-free guidance combination:
/// `eps_uncond + guidance_scale * (eps_cond - eps_uncond)`.
pub fn cfg_combine<F: NdFloat>(
    eps_uncond: &Array4<F>,
    eps_cond: &Array4<F>,
    guidance_scale: f64,
) -> Result<Array4<F>> {
    same_shape(eps_uncond, eps_cond, "cfg_combine")?;
    // Scales 0 and 1 reduce to the branches exactly, with no float residue.
    if guidance_scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if guidance_scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    let g = F::from(guidance_scale).unwrap();
    Ok(eps_uncond + &(eps_cond - eps_uncond).mapv(|v| v * g))
}

/// Standard normal noise plus a per-(batch, channel) constant component of
/// magnitude `offset_scale`, broadcast over the spatial axes.
pub fn offset_noise<F: NdFloat>(
    shape: (usize, usize, usize, usize),
    offset_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Array4<F> {
    let (b, c, h, w) = shape;
    let mut out = Array4::<F>::zeros(shape);
    for bi in 0..b {
        for ci in 0..c {
            let offset: f64 = offset_scale * rng.sample::<f64, _>(StandardNormal);
            for hi in 0..h {
                for wi in 0..w {
                    let z: f64 = rng.sample(StandardNormal);
                    out[[bi, ci, hi, wi]] = F::from(z + offset).unwrap();
                }
            }
        }
    }
    out
}

/// Standard normal array (no channel offset).
pub fn standard_noise<F: NdFloat>(
    shape: (usize, usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Array4<F> {
    let mut out = Array4::<F>::zeros(shape);
    for v in out.iter_mut() {
        *v = F::from(rng.sample::<f64, _>(StandardNormal)).unwrap();
    }
    out
}

/// Forward-noise a batch with one step index per element.
pub fn forward_sample_batch<F: NdFloat>(
    x0: &Array4<F>,
    ts: &[usize],
    epsilon: &Array4<F>,
    schedule: &NoiseSchedule,
) -> Result<Array4<F>> {
    same_shape(x0, epsilon, "forward_sample_batch x0/epsilon")?;
    if ts.len() != x0.dim().0 {
        return Err(CoreError::shape(format!("{} steps for batch {}", ts.len(), x0.dim().0)));
    }
    let mut out = Array4::zeros(x0.dim());
    for (bi, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let ab = schedule.alpha_bar(t);
        let c0 = F::from(ab.sqrt()).unwrap();
        let ce = F::from((1.0 - ab).sqrt()).unwrap();
        let xi = x0.index_axis(ndarray::Axis(0), bi);
        let ei = epsilon.index_axis(ndarray::Axis(0), bi);
        let mut oi = out.index_axis_mut(ndarray::Axis(0), bi);
        ndarray::Zip::from(&mut oi).and(&xi).and(&ei).for_each(|o, &x, &e| {
            *o = x * c0 + e * ce;
        });
    }
    Ok(out)
}

/// Noise predictor driven by the sampler.
///
/// `x_t` holds the noised target frames; the implementation supplies the
/// conditioning context (or the null condition when `null_condition` is
/// true) and returns the predicted noise with the same shape as `x_t`.
pub trait GuidedDenoiser {
    fn predict(&self, x_t: &Array4<f32>, t: usize, null_condition: bool) -> Result<Array4<f32>>;
}

/// Sampler controls. `guidance_scale` 1 disables the unconditional branch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleOptions {
    pub guidance_scale: f64,
    pub offset_scale: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { guidance_scale: 1.5, offset_scale: 0.05 }
    }
}

/// Run the full reverse chain and return the x0 estimate clamped to [-1, 1].
///
/// Starts from offset noise at `t = n_steps` and applies [`posterior_step`]
/// down to `t = 1`, combining conditional and unconditional predictions with
/// classifier-free guidance at each step.
pub fn sample(
    denoiser: &dyn GuidedDenoiser,
    target_shape: (usize, usize, usize, usize),
    schedule: &NoiseSchedule,
    opts: SampleOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f32>> {
    let mut x = offset_noise::<f32>(target_shape, opts.offset_scale, rng);
    for t in (1..=schedule.n_steps()).rev() {
        let eps_cond = denoiser.predict(&x, t, false)?;
        if eps_cond.dim() != x.dim() {
            return Err(CoreError::shape(format!(
                "denoiser returned {:?}, expected {:?}",
                eps_cond.dim(),
                x.dim()
            )));
        }
        let eps = if opts.guidance_scale == 1.0 {
            eps_cond
        } else {
            let eps_uncond = denoiser.predict(&x, t, true)?;
            cfg_combine(&eps_uncond, &eps_cond, opts.guidance_scale)?
        };
        let noise = if t > 1 {
            standard_noise::<f32>(target_shape, rng)
        } else {
            Array4::zeros(target_shape)
        };
        x = posterior_step(&x, &eps, t, schedule, &noise)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Divergence(format!("non-finite sample state at step {t}")));
        }
    }
    x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;
    use rand::Rng;

    fn arr(vals: &[f64]) -> Array4<f64> {
        Array4::from_shape_vec((1, 1, 1, vals.len()), vals.to_vec()).unwrap()
    }

    #[test]
    fn single_step_linear_schedule() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn alpha_bar_matches_cumulative_product_oracle() {
        for (kind, n) in [(ScheduleKind::Linear, 37), (ScheduleKind::Cosine, 200)] {
            let s = make_schedule(kind, n, 1e-4, 0.02).unwrap();
            let mut prod = 1.0;
            for t in 1..=n {
                prod *= s.alpha(t);
                assert_abs_diff_eq!(s.alpha_bar(t), prod, epsilon = 1e-12);
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                assert!(s.posterior_variance(t) >= 0.0);
                if t > 1 {
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                }
            }
        }
    }

    #[test]
    fn tiny_beta_keeps_x0() {
        let s = make_schedule(ScheduleKind::Linear, 4, 1e-12, 1e-12).unwrap();
        let x0 = arr(&[0.3, -0.7, 1.0]);
        let eps = arr(&[1.0, 1.0, 1.0]);
        let xt = forward_sample(&x0, 4, &eps, &s).unwrap();
        for (a, b) in xt.iter().zip(x0.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn forward_sample_zero_x0() {
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-3, 0.1).unwrap();
        let x0 = arr(&[0.0, 0.0]);
        let eps = arr(&[1.0, -2.0]);
        let t = 7;
        let xt = forward_sample(&x0, t, &eps, &s).unwrap();
        let c = (1.0 - s.alpha_bar(t)).sqrt();
        assert_abs_diff_eq!(xt[[0, 0, 0, 0]], c, epsilon = 1e-12);
        assert_abs_diff_eq!(xt[[0, 0, 0, 1]], -2.0 * c, epsilon = 1e-12);
    }

    #[test]
    fn forward_chain_monte_carlo_moments() {
        // Iterate the single-step forward kernel and compare the terminal
        // moments with the closed form of the marginal.
        let n = 8;
        let s = make_schedule(ScheduleKind::Linear, n, 0.01, 0.2).unwrap();
        let x0 = 0.8_f64;
        let trials = 10_000;
        let mut rng = crate::rng::stream(42, "fwd-chain-mc");
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..trials {
            let mut x = x0;
            for t in 1..=n {
                let eps: f64 = rng.sample(StandardNormal);
                x = s.alpha(t).sqrt() * x + s.beta(t).sqrt() * eps;
            }
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / trials as f64;
        let var = sumsq / trials as f64 - mean * mean;
        let expect_mean = s.alpha_bar(n).sqrt() * x0;
        let expect_var = 1.0 - s.alpha_bar(n);
        let se_mean = expect_var.sqrt() / (trials as f64).sqrt();
        let se_var = expect_var * (2.0 / (trials as f64 - 1.0)).sqrt();
        assert!(
            (mean - expect_mean).abs() < 4.0 * se_mean,
            "mean {mean} vs {expect_mean} (se {se_mean})"
        );
        assert!(
            (var - expect_var).abs() < 4.0 * se_var,
            "var {var} vs {expect_var} (se {se_var})"
        );
    }

    #[test]
    fn one_step_exact_inversion() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.3, 0.3).unwrap();
        let x0 = arr(&[0.25, -0.5, 0.9]);
        let eps = arr(&[1.3, -0.2, 0.7]);
        let x1 = forward_sample(&x0, 1, &eps, &s).unwrap();
        let zero = Array4::zeros(x0.dim());
        let rec = posterior_step(&x1, &eps, 1, &s, &zero).unwrap();
        for (a, b) in rec.iter().zip(x0.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn posterior_mean_matches_symbolic_oracle() {
        // mu = (x_t - (1-a)/sqrt(1-ab) eps) / sqrt(a), re-evaluated directly.
        let n = 4;
        let s = make_schedule(ScheduleKind::Linear, n, 0.05, 0.3).unwrap();
        let mut rng = crate::rng::stream(9, "posterior-oracle");
        for t in 1..=n {
            let x0 = arr(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let eps = arr(&[rng.sample(StandardNormal), rng.sample(StandardNormal)]);
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            let zero = Array4::zeros(x0.dim());
            let mean = posterior_step(&xt, &eps, t, &s, &zero).unwrap();
            for i in 0..2 {
                let mu = (xt[[0, 0, 0, i]]
                    - (1.0 - s.alpha(t)) / (1.0 - s.alpha_bar(t)).sqrt() * eps[[0, 0, 0, i]])
                    / s.alpha(t).sqrt();
                assert_abs_diff_eq!(mean[[0, 0, 0, i]], mu, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn smooth_l1_closed_forms() {
        let z = arr(&[0.0]);
        assert_eq!(training_loss(&z, &z, LossKind::SmoothL1).unwrap(), 0.0);
        let p = arr(&[0.5]);
        assert_abs_diff_eq!(
            training_loss(&p, &z, LossKind::SmoothL1).unwrap(),
            0.125,
            epsilon = 1e-12
        );
        let q = arr(&[2.0]);
        assert_abs_diff_eq!(
            training_loss(&q, &z, LossKind::SmoothL1).unwrap(),
            1.5,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            training_loss(&q, &z, LossKind::SquaredError).unwrap(),
            4.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn loss_nonnegative_zero_iff_equal() {
        let mut rng = crate::rng::stream(5, "loss-prop");
        for _ in 0..50 {
            let a = arr(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let b = arr(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let l = training_loss(&a, &b, LossKind::SmoothL1).unwrap();
            assert!(l >= 0.0);
            if a != b {
                assert!(l > 0.0);
            }
        }
    }

    #[test]
    fn cfg_reductions_and_linearity() {
        let u = arr(&[0.1, -0.4]);
        let c = arr(&[0.7, 0.2]);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        let z = Array4::zeros(u.dim());
        let doubled = cfg_combine(&z, &c, 2.0).unwrap();
        for (d, cv) in doubled.iter().zip(c.iter()) {
            assert_abs_diff_eq!(*d, 2.0 * cv, epsilon = 1e-12);
        }
    }

    #[test]
    fn offset_noise_channel_mean_variance() {
        // Spatial mean of each channel has variance 1/(H W) + offset^2.
        let (h, w) = (8, 8);
        let draws = 1000;
        for offset in [0.0, 0.1] {
            let mut rng = crate::rng::stream(77, "offset-noise-mc");
            let mut means = Vec::with_capacity(draws);
            for _ in 0..draws {
                let z = offset_noise::<f64>((1, 1, h, w), offset, &mut rng);
                means.push(z.sum() / (h * w) as f64);
            }
            let m = means.iter().sum::<f64>() / draws as f64;
            let var = means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / draws as f64;
            let expect = 1.0 / (h * w) as f64 + offset * offset;
            let se = expect * (2.0 / (draws as f64 - 1.0)).sqrt();
            assert!(
                (var - expect).abs() < 4.0 * se,
                "offset {offset}: var {var} vs {expect} (se {se})"
            );
        }
    }

    /// Denoiser that replays a fixed epsilon regardless of input.
    struct FixedEps(Array4<f32>);

    impl GuidedDenoiser for FixedEps {
        fn predict(&self, _x: &Array4<f32>, _t: usize, _null: bool) -> Result<Array4<f32>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn sampler_inverts_one_step_oracle_denoiser() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.2, 0.2).unwrap();
        let shape = (1, 1, 2, 2);
        // The initial draw is x_1 = offset_noise; with eps_pred equal to that
        // draw the recovered x0 is exactly (x_1 - sqrt(1-ab) x_1)/sqrt(ab)...
        // easier to drive the oracle: reconstruct x0 from the returned value.
        let mut rng = crate::rng::stream(3, "sampler-onestep");
        let mut peek = rng.clone();
        let x1 = offset_noise::<f32>(shape, 0.0, &mut peek);
        let denoiser = FixedEps(x1.clone());
        let out = sample(&denoiser, shape, &s, SampleOptions { guidance_scale: 1.0, offset_scale: 0.0 }, &mut rng)
            .unwrap();
        let ab = s.alpha_bar(1);
        for (o, x) in out.iter().zip(x1.iter()) {
            let x0 = ((x - ((1.0 - ab) as f32).sqrt() * x) / (ab as f32).sqrt()).clamp(-1.0, 1.0);
            assert_abs_diff_eq!(*o, x0, epsilon = 1e-5);
        }
    }

    #[test]
    fn sampler_guidance_one_matches_pure_conditional_and_replays() {
        let s = make_schedule(ScheduleKind::Cosine, 12, 0.0, 0.0).unwrap();
        let shape = (2, 3, 4, 4);
        let denoiser = FixedEps(Array4::from_elem(shape, 0.3));
        let opts = SampleOptions { guidance_scale: 1.0, offset_scale: 0.05 };
        let a = sample(&denoiser, shape, &s, opts, &mut crate::rng::stream(1, "s")).unwrap();
        let b = sample(&denoiser, shape, &s, opts, &mut crate::rng::stream(1, "s")).unwrap();
        assert_eq!(a, b, "fixed seed must replay bit-identically");

        // guidance 1 with a cond==uncond denoiser consumes the same rng
        // stream as the two-branch path, so results agree exactly.
        let opts2 = SampleOptions { guidance_scale: 1.0 + 1e-9, offset_scale: 0.05 };
        let c = sample(&denoiser, shape, &s, opts2, &mut crate::rng::stream(1, "s")).unwrap();
        for (x, y) in a.iter().zip(c.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-5);
        }
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.1).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.2, 0.1).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 0, 0.1, 0.1).is_err());
    }
}
