//! DDPM schedules and the closed-form forward / reverse-step algebra.
//!
//! Timesteps are 0-based: schedule entry `t` covers the transition between
//! latent levels `t-1` and `t`, the deepest latent carries `alpha_bar[T-1]`
//! of signal. The reverse step that consumes a level-`t` latent uses entry
//! `t` of the schedule.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end` over `t_total`
    /// steps; alpha and the cumulative product are derived.
    pub fn linear(t_total: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_total < 1 {
            return Err(Error::InvalidArgument("schedule: T must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule: need 0 < beta_start <= beta_end < 1, got {} and {}",
                beta_start, beta_end
            )));
        }
        let mut beta = Vec::with_capacity(t_total);
        for t in 0..t_total {
            let frac = if t_total == 1 { 0.0 } else { t as f64 / (t_total - 1) as f64 };
            beta.push(beta_start + (beta_end - beta_start) * frac);
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_total);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    /// Default schedule for a given step count: the usual 1000-step linear
    /// range scaled by 1000/T (clamped below 0.999) so the cumulative noise
    /// level is preserved when T is small.
    pub fn default_for(t_total: usize) -> Result<Self> {
        let scale = 1000.0 / t_total as f64;
        let start = (1e-4 * scale).min(0.999);
        let end = (0.02 * scale).min(0.999);
        Self::linear(t_total, start, end)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            Err(Error::TimestepOutOfRange { t, t_total: self.len() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Reverse-step noise scale; the fixed-small posterior choice sqrt(beta).
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta[t].sqrt()
    }
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    } else {
        Ok(())
    }
}

/// Closed-form forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    check_same_shape("q_sample", x0, eps)?;
    let ab = sched.alpha_bar(t);
    let c_signal = ab.sqrt();
    let c_noise = (1.0 - ab).sqrt();
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| c_signal * x + c_noise * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Reverse-step mean: (x_t - ((1-a_t)/sqrt(1-ab_t)) eps_hat) / sqrt(a_t).
/// Steps below t = 1 do not exist.
pub fn predict_mu(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if t == 0 {
        return Err(Error::InvalidArgument("predict_mu: t = 0 has no previous step".into()));
    }
    check_same_shape("predict_mu", x_t, eps_hat)?;
    let inv_sqrt_a = 1.0 / sched.alpha(t).sqrt();
    let coef = (1.0 - sched.alpha(t)) / (1.0 - sched.alpha_bar(t)).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| inv_sqrt_a * (x - coef * e))
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// One stochastic reverse step: predict_mu + sigma_t * z.
pub fn p_step(x_t: &Tensor, t: usize, eps_hat: &Tensor, z: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape("p_step", x_t, z)?;
    let mu = predict_mu(x_t, t, eps_hat, sched)?;
    let sigma = sched.sigma(t);
    let data = mu.data().iter().zip(z.data()).map(|(&m, &n)| m + sigma * n).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// One-shot clean estimate from a latent and its noise estimate:
/// x_t / sqrt(ab_t) - (sqrt(1-ab_t)/sqrt(ab_t)) eps_hat.
pub fn tweedie_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    check_same_shape("tweedie_x0", x_t, eps_hat)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    let coef = (1.0 - ab).sqrt() / ab.sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| inv * x - coef * e)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Tracked version of [`tweedie_x0`] for guidance gradients.
pub fn tweedie_x0_on_tape(tape: &mut Tape, x_t: Var, t: usize, eps_hat: Var, sched: &NoiseSchedule) -> Result<Var> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let scaled_x = tape.scale(x_t, 1.0 / ab.sqrt())?;
    let scaled_e = tape.scale(eps_hat, (1.0 - ab).sqrt() / ab.sqrt())?;
    tape.sub(scaled_x, scaled_e)
}

/// Shifts a reverse mean by sigma_t * grad_log_p (classifier-style guidance).
pub fn guided_mu(mu: &Tensor, sigma_t: f64, grad_log_p: &Tensor) -> Result<Tensor> {
    check_same_shape("guided_mu", mu, grad_log_p)?;
    if sigma_t < 0.0 {
        return Err(Error::InvalidArgument("guided_mu: sigma_t must be >= 0".into()));
    }
    let data = mu
        .data()
        .iter()
        .zip(grad_log_p.data())
        .map(|(&m, &g)| m + sigma_t * g)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}

/// A label-conditional noise estimator. The denoiser network implements it;
/// tests use fixed-output stand-ins.
pub trait NoisePredictor {
    fn num_labels(&self) -> usize;
    /// Expected latent shape [C, H, W].
    fn image_shape(&self) -> [usize; 3];
    /// Untracked prediction.
    fn predict(&self, x_t: &Tensor, t: usize, label: usize) -> Result<Tensor>;
    /// Tracked prediction; the result must be differentiable w.r.t. `x_t`
    /// when the implementer's output depends on it.
    fn predict_on_tape(&self, tape: &mut Tape, x_t: Var, t: usize, label: usize) -> Result<Var>;
}

/// Predictor returning one fixed tensor per label, independent of the latent.
/// Used in tests and mask-logic diagnostics.
pub struct TablePredictor {
    per_label: Vec<Tensor>,
}

impl TablePredictor {
    pub fn new(per_label: Vec<Tensor>) -> Result<Self> {
        if per_label.is_empty() {
            return Err(Error::InvalidArgument("TablePredictor: no labels".into()));
        }
        let shape = per_label[0].shape().to_vec();
        if shape.len() != 3 || per_label.iter().any(|t| t.shape() != shape) {
            return Err(Error::shape("TablePredictor", "all label maps must share one [C,H,W] shape".to_string()));
        }
        Ok(TablePredictor { per_label })
    }
}

impl NoisePredictor for TablePredictor {
    fn num_labels(&self) -> usize {
        self.per_label.len()
    }

    fn image_shape(&self) -> [usize; 3] {
        let s = self.per_label[0].shape();
        [s[0], s[1], s[2]]
    }

    fn predict(&self, x_t: &Tensor, _t: usize, label: usize) -> Result<Tensor> {
        if label >= self.per_label.len() {
            return Err(Error::LabelOutOfRange { label, num_labels: self.per_label.len() });
        }
        if x_t.shape() != self.per_label[0].shape() {
            return Err(Error::shape(
                "TablePredictor::predict",
                format!("{:?} vs {:?}", x_t.shape(), self.per_label[0].shape()),
            ));
        }
        Ok(self.per_label[label].clone())
    }

    fn predict_on_tape(&self, tape: &mut Tape, x_t: Var, t: usize, label: usize) -> Result<Var> {
        let value = self.predict(tape.value(x_t), t, label)?;
        Ok(tape.constant(value))
    }
}

/// The denoiser training objective: mean squared error between the injected
/// noise and the model prediction at the noised latent.
///
/// `eps_fn` runs the model on the tape; gradients flow to whatever leaves it
/// binds (weights during training).
pub fn ddpm_loss<F>(
    tape: &mut Tape,
    eps_fn: F,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let x_t = q_sample(x0, t, eps, sched)?;
    let x_t_var = tape.constant(x_t);
    let pred = eps_fn(tape, x_t_var)?;
    let target = tape.constant(eps.clone());
    let se = tape.squared_error(target, pred)?;
    tape.scale(se, 1.0 / eps.numel() as f64)
}
