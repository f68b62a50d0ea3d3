//! The end-to-end mask-guided appearance-transfer sampler.
//!
//! The appearance image is encoded to the deepest latent and reverse-diffused
//! under the mask's positive label. Each step applies the guidance-shifted
//! reverse mean, stochastic noise, and (during the mixing window) a per-pixel
//! blend against the forward-noised structure trajectory, repeated
//! `n_resample` times with a one-step re-noise between repetitions.
//!
//! All randomness comes from independent seeded streams, so disabling
//! features never perturbs the draws of the remaining ones.

use rand_chacha::ChaCha8Rng;

use crate::config::GuidanceConfig;
use crate::diffusion::{guided_mu, predict_mu, q_sample, tweedie_x0, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::features::FeatureNet;
use crate::guidance::{gradient_with_ctx, GuidanceContext, GuidanceLossReport};
use crate::maskgen::Mask;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct StepRecord {
    /// Schedule index consumed by this iteration.
    pub t: usize,
    /// Latent after the guided step, before mask mixing.
    pub pre_mix: Tensor,
    /// Latent after mask mixing (equal to `pre_mix` when mixing was off).
    pub post_mix: Tensor,
    pub report: GuidanceLossReport,
    pub mixed: bool,
}

#[derive(Clone, Debug)]
pub struct TransferTrace {
    pub records: Vec<StepRecord>,
    pub final_image: Tensor,
    pub config: GuidanceConfig,
    pub seed: u64,
    /// Whether the run-level draw disabled mask mixing for this run.
    pub mask_skipped: bool,
}

impl TransferTrace {
    /// Dumps the trace as TNSR latents plus a text index.
    pub fn dump(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut index = String::new();
        for rec in &self.records {
            let pre = format!("pre_{:04}.tnsr", rec.t);
            let post = format!("post_{:04}.tnsr", rec.t);
            rec.pre_mix.save_tnsr(&dir.join(&pre))?;
            rec.post_mix.save_tnsr(&dir.join(&post))?;
            index.push_str(&format!(
                "{} mixed={} l_total={} {} {}\n",
                rec.t, rec.mixed as u8, rec.report.l_total, pre, post
            ));
        }
        std::fs::write(dir.join("index.txt"), index)?;
        Ok(())
    }
}

/// Encodes the appearance image to the deepest latent with seeded noise.
pub fn encode_appearance(x_a0: &Tensor, sched: &NoiseSchedule, seed: u64) -> Result<Tensor> {
    let mut r = rng::stream_rng(seed, rng::STREAM_ENCODE);
    let eps = rng::randn(x_a0.shape(), &mut r);
    encode_appearance_with(x_a0, sched, &eps)
}

/// Encoding with caller-provided noise (test hook).
pub fn encode_appearance_with(x_a0: &Tensor, sched: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    q_sample(x_a0, sched.len() - 1, eps, sched)
}

/// Forward-noised structure latents for every level, all sharing one noise
/// draw from the seed.
pub fn structure_trajectory(x_s0: &Tensor, sched: &NoiseSchedule, seed: u64) -> Result<Vec<Tensor>> {
    let mut r = rng::stream_rng(seed, rng::STREAM_TRAJECTORY);
    let eps = rng::randn(x_s0.shape(), &mut r);
    (0..sched.len()).map(|t| q_sample(x_s0, t, &eps, sched)).collect()
}

/// Deterministic reverse mean under the positive label (no noise term).
pub fn denoise_step(
    x_t: &Tensor,
    t: usize,
    pred: &dyn NoisePredictor,
    y_p: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let eps_hat = pred.predict(x_t, t, y_p)?;
    predict_mu(x_t, t, &eps_hat, sched)
}

/// Per-pixel blend: foreground keeps the appearance latent, background mixes
/// toward the structure latent with weight `omega_mix`.
pub fn mask_mix(x_a_t: &Tensor, x_s_qt: &Tensor, mask: &Mask, omega_mix: f64) -> Result<Tensor> {
    if x_a_t.shape() != x_s_qt.shape() {
        return Err(Error::shape("mask_mix", format!("{:?} vs {:?}", x_a_t.shape(), x_s_qt.shape())));
    }
    let (c, h, w) = match x_a_t.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(Error::shape("mask_mix", format!("{:?} (need [C,H,W])", other))),
    };
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape(
            "mask_mix",
            format!("mask {}x{} vs image {}x{}", mask.width(), mask.height(), w, h),
        ));
    }
    let bits = mask.binary();
    let hw = h * w;
    let mut data = Vec::with_capacity(c * hw);
    for ch in 0..c {
        let xa = &x_a_t.data()[ch * hw..(ch + 1) * hw];
        let xs = &x_s_qt.data()[ch * hw..(ch + 1) * hw];
        for i in 0..hw {
            let m = bits[i] as f64;
            data.push(m * xa[i] + (1.0 - m) * (omega_mix * xs[i] + (1.0 - omega_mix) * xa[i]));
        }
    }
    Tensor::new(x_a_t.shape().to_vec(), data)
}

fn check_finite_latent(x: &Tensor, t: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { context: format!("transfer latent at step t = {t}") })
    }
}

fn draw_noise(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    rng::randn(shape, r)
}

/// Rescales a gradient so its per-pixel RMS is at most 1 (never amplifies).
fn clip_to_unit_rms(g: Tensor) -> Tensor {
    let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let limit = (g.numel() as f64).sqrt();
    if norm > limit {
        g.scale(limit / norm)
    } else {
        g
    }
}

struct StepOutcome {
    next: Tensor,
    report: GuidanceLossReport,
}

#[allow(clippy::too_many_arguments)]
fn guided_step(
    x: &Tensor,
    t: usize,
    pred: &dyn NoisePredictor,
    fext: &FeatureNet,
    ctx: &GuidanceContext,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    step_rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let eps_hat = pred.predict(x, t, ctx.y_p)?;
    let guidance_on = cfg.lambda_struct > 0.0 || cfg.lambda_app > 0.0;
    let (grad, report) = if guidance_on {
        let (g, rep) = gradient_with_ctx(ctx, x, t, pred, fext, cfg, sched)?;
        // The clean-image estimate carries a 1/sqrt(alpha_bar_t) factor, so
        // raw gradients at deep timesteps are orders of magnitude larger
        // than at late ones. Clip to unit per-pixel RMS so guidance_scale
        // means the same thing at every step.
        (Some(clip_to_unit_rms(g)), rep)
    } else {
        (None, GuidanceLossReport::default())
    };
    // terminal step: the reverse mean at t = 0 is exactly the clean estimate
    let mut mu = if t >= 1 {
        predict_mu(x, t, &eps_hat, sched)?
    } else {
        tweedie_x0(x, 0, &eps_hat, sched)?
    };
    if let Some(g) = grad {
        mu = guided_mu(&mu, sched.sigma(t), &g.scale(-cfg.guidance_scale))?;
    }
    let next = if t >= 1 {
        let z = draw_noise(x.shape(), step_rng);
        let sigma = sched.sigma(t);
        let data = mu.data().iter().zip(z.data()).map(|(&m, &n)| m + sigma * n).collect();
        Tensor::new(mu.shape().to_vec(), data)?
    } else {
        mu
    };
    Ok(StepOutcome { next, report })
}

/// Runs the full mask-guided transfer. Deterministic given `cfg.seed`.
pub fn transfer(
    x_s0: &Tensor,
    x_a0: &Tensor,
    mask: &Mask,
    pred: &dyn NoisePredictor,
    fext: &FeatureNet,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<(Tensor, TransferTrace)> {
    cfg.validate()?;
    if x_s0.shape() != x_a0.shape() {
        return Err(Error::shape("transfer", format!("{:?} vs {:?}", x_s0.shape(), x_a0.shape())));
    }
    if sched.len() != cfg.t_total {
        return Err(Error::InvalidArgument(format!(
            "transfer: schedule has {} steps but config says T = {}",
            sched.len(),
            cfg.t_total
        )));
    }
    let t_total = cfg.t_total;
    let seed = cfg.seed;
    let y_p = mask.positive_label();

    let mut x = encode_appearance(x_a0, sched, seed)?;
    let trajectory = structure_trajectory(x_s0, sched, seed)?;
    let mut skip_rng = rng::stream_rng(seed, rng::STREAM_SKIP);
    let mask_skipped = rng::bernoulli(cfg.mask_skip_prob, &mut skip_rng);
    let window = (cfg.mask_guidance_fraction * t_total as f64).ceil() as usize;
    let ctx = GuidanceContext::new(x_s0, x_a0, mask, fext)?;
    debug_assert_eq!(ctx.y_p, y_p);

    let mut step_rng = rng::stream_rng(seed, rng::STREAM_STEP);
    let mut resample_rng = rng::stream_rng(seed, rng::STREAM_RESAMPLE);
    let mut records = Vec::with_capacity(t_total);

    for t in (0..t_total).rev() {
        // the mixing window covers the first `window` reverse iterations
        let in_window = t_total - 1 - t < window;
        let mixing = in_window && !mask_skipped;
        let reps = if mixing { cfg.n_resample } else { 1 };
        let mut record = None;
        for rep in 0..reps {
            let out = guided_step(&x, t, pred, fext, &ctx, cfg, sched, &mut step_rng)?;
            let pre_mix = out.next;
            let post_mix = if mixing {
                mask_mix(&pre_mix, &trajectory[t], mask, cfg.omega_mix)?
            } else {
                pre_mix.clone()
            };
            check_finite_latent(&post_mix, t)?;
            if rep + 1 < reps {
                // RePaint-style repetition: one forward q-step back to level t
                let z = draw_noise(post_mix.shape(), &mut resample_rng);
                let ca = sched.alpha(t).sqrt();
                let cb = sched.beta(t).sqrt();
                let data = post_mix.data().iter().zip(z.data()).map(|(&v, &n)| ca * v + cb * n).collect();
                x = Tensor::new(post_mix.shape().to_vec(), data)?;
            } else {
                x = post_mix.clone();
            }
            record = Some(StepRecord { t, pre_mix, post_mix, report: out.report, mixed: mixing });
        }
        records.push(record.expect("reps >= 1"));
    }

    let final_image = x.clamp(-1.0, 1.0);
    let trace = TransferTrace { records, final_image: final_image.clone(), config: cfg.clone(), seed, mask_skipped };
    Ok((final_image, trace))
}

/// Plain conditional sampling from the encoded appearance latent: no
/// guidance, no mixing, no resampling. Shares the encode and step-noise
/// streams with [`transfer`].
pub fn conditional_sample(
    x_a0: &Tensor,
    pred: &dyn NoisePredictor,
    y_p: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let mut x = encode_appearance(x_a0, sched, seed)?;
    let mut step_rng = rng::stream_rng(seed, rng::STREAM_STEP);
    for t in (0..sched.len()).rev() {
        let eps_hat = pred.predict(&x, t, y_p)?;
        x = if t >= 1 {
            let mu = predict_mu(&x, t, &eps_hat, sched)?;
            let z = draw_noise(x.shape(), &mut step_rng);
            let sigma = sched.sigma(t);
            let data = mu.data().iter().zip(z.data()).map(|(&m, &n)| m + sigma * n).collect();
            Tensor::new(mu.shape().to_vec(), data)?
        } else {
            tweedie_x0(&x, 0, &eps_hat, sched)?
        };
        check_finite_latent(&x, t)?;
    }
    Ok(x.clamp(-1.0, 1.0))
}
