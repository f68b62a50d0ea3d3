//! Foreground mask generation from label-conditioned noise-estimate
//! differences.
//!
//! The structure image is encoded to the deepest latent, reverse-denoised
//! under the positive label to the halfway point, mapped to a clean estimate,
//! and the per-pixel difference between the positive-label and averaged
//! negative-label noise predictions at that estimate is standardized and
//! thresholded.

use crate::diffusion::{p_step, q_sample, tweedie_x0, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::netpbm;
use crate::rng;
use crate::tensor::Tensor;

/// Foreground fraction the automatic mask selection aims for.
pub const TARGET_FRACTION: f64 = 0.35;

/// Binary foreground map plus the standardized difference map it was
/// thresholded from.
#[derive(Clone, Debug)]
pub struct Mask {
    width: usize,
    height: usize,
    binary: Vec<u8>,
    diff: Vec<f64>,
    threshold: f64,
    labels: (usize, Vec<usize>),
}

impl Mask {
    /// Builds a mask from a difference map; `binary[p] = diff[p] >= theta`.
    pub fn from_diff_map(diff: &Tensor, theta: f64) -> Result<Mask> {
        let (h, w) = match diff.shape() {
            [h, w] => (*h, *w),
            other => return Err(Error::shape("Mask::from_diff_map", format!("{:?} (need [H,W])", other))),
        };
        let binary = diff.data().iter().map(|&v| (v >= theta) as u8).collect();
        Ok(Mask {
            width: w,
            height: h,
            binary,
            diff: diff.data().to_vec(),
            threshold: theta,
            labels: (0, Vec::new()),
        })
    }

    /// Wraps an existing binary map (ground truth, hand-drawn, loaded).
    /// The diff map is the binary itself with a 0.5 threshold.
    pub fn from_binary(width: usize, height: usize, binary: Vec<u8>) -> Result<Mask> {
        if binary.len() != width * height {
            return Err(Error::shape("Mask::from_binary", format!("{}x{} vs {} bits", width, height, binary.len())));
        }
        if binary.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("Mask::from_binary: entries must be 0 or 1".into()));
        }
        let diff = binary.iter().map(|&b| b as f64).collect();
        Ok(Mask { width, height, binary, diff, threshold: 0.5, labels: (0, Vec::new()) })
    }

    pub fn all_ones(width: usize, height: usize) -> Mask {
        Mask::from_binary(width, height, vec![1; width * height]).expect("sized")
    }

    pub fn with_labels(mut self, positive: usize, negatives: Vec<usize>) -> Mask {
        self.labels = (positive, negatives);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn binary(&self) -> &[u8] {
        &self.binary
    }

    pub fn diff_map(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.diff.clone()).expect("sized")
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// (positive label, negative labels) that produced this mask.
    pub fn labels(&self) -> (usize, &[usize]) {
        (self.labels.0, &self.labels.1)
    }

    pub fn positive_label(&self) -> usize {
        self.labels.0
    }

    pub fn fraction(&self) -> f64 {
        self.binary.iter().map(|&b| b as usize).sum::<usize>() as f64 / self.binary.len() as f64
    }

    /// Mask as a [H,W] tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.binary.iter().map(|&b| b as f64).collect()).expect("sized")
    }

    /// Mask broadcast over `channels` planes -> [C,H,W].
    pub fn to_tensor_chw(&self, channels: usize) -> Tensor {
        let plane: Vec<f64> = self.binary.iter().map(|&b| b as f64).collect();
        let mut data = Vec::with_capacity(channels * plane.len());
        for _ in 0..channels {
            data.extend_from_slice(&plane);
        }
        Tensor::new(vec![channels, self.height, self.width], data).expect("sized")
    }

    /// Binary PGM bytes: 0 background, 255 foreground.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.binary.iter().map(|&b| if b == 1 { 255u8 } else { 0 }));
        out
    }

    pub fn save_pgm(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_pgm_bytes())?;
        Ok(())
    }

    /// Loads a PGM as a mask; values >= 128 count as foreground.
    pub fn load_pgm(path: &std::path::Path) -> Result<Mask> {
        let img = netpbm::read_image(path)?;
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if img.shape()[0] != 1 {
            return Err(Error::format(path.display().to_string(), "mask must be a single-channel PGM"));
        }
        let binary = img.data().iter().map(|&v| (v >= 0.0) as u8).collect();
        Mask::from_binary(w, h, binary)
    }
}

/// Encodes the structure image to the deepest latent and reverse-denoises
/// under the positive label down to the halfway step.
pub fn half_denoise(
    x_s0: &Tensor,
    pred: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    y_p: usize,
    seed: u64,
) -> Result<Tensor> {
    let t_total = sched.len();
    let t_half = t_total / 2;
    let mut r = rng::stream_rng(seed, rng::STREAM_MASK);
    let eps = rng::randn(x_s0.shape(), &mut r);
    let mut x = q_sample(x_s0, t_total - 1, &eps, sched)?;
    for t in (t_half..t_total).rev() {
        let eps_hat = pred.predict(&x, t, y_p)?;
        let z = rng::randn(x.shape(), &mut r);
        x = p_step(&x, t, &eps_hat, &z, sched)?;
    }
    Ok(x)
}

/// Noise map under the positive label at the halfway step.
pub fn positive_noise_map(
    x_hat: &Tensor,
    pred: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    y_p: usize,
) -> Result<Tensor> {
    pred.predict(x_hat, sched.len() / 2, y_p)
}

/// Mean noise map over the negative labels at the halfway step.
pub fn negative_noise_map(
    x_hat: &Tensor,
    pred: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    negatives: &[usize],
) -> Result<Tensor> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("negative_noise_map: empty label list".into()));
    }
    let t_half = sched.len() / 2;
    let mut acc: Option<Tensor> = None;
    for &label in negatives {
        let m = pred.predict(x_hat, t_half, label)?;
        acc = Some(match acc {
            None => m,
            Some(a) => a.add(&m)?,
        });
    }
    Ok(acc.expect("nonempty").scale(1.0 / negatives.len() as f64))
}

/// Channel-averages the signed difference, standardizes it over the image,
/// and thresholds at `theta`. A (numerically) constant difference map is an
/// error.
pub fn binarize(m_p: &Tensor, m_n: &Tensor, theta: f64) -> Result<Mask> {
    if m_p.shape() != m_n.shape() {
        return Err(Error::shape("binarize", format!("{:?} vs {:?}", m_p.shape(), m_n.shape())));
    }
    let diff = m_p.sub(m_n)?.channel_mean()?.standardize()?;
    Mask::from_diff_map(&diff, theta)
}

/// Runs the full chain once per negative set and picks the mask whose
/// foreground fraction is nearest [`TARGET_FRACTION`] (ties -> lowest index).
/// Each set runs on its own noise stream derived from (seed, set index).
pub fn generate_masks(
    x_s0: &Tensor,
    pred: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    y_p: usize,
    negative_sets: &[Vec<usize>],
    theta: f64,
    seed: u64,
) -> Result<(Vec<Mask>, usize)> {
    if negative_sets.is_empty() {
        return Err(Error::InvalidArgument("generate_masks: need at least one negative set".into()));
    }
    let t_half = sched.len() / 2;
    let mut masks = Vec::with_capacity(negative_sets.len());
    for (i, negatives) in negative_sets.iter().enumerate() {
        let sub_seed = rng::mix(seed, i as u64);
        let x_half = half_denoise(x_s0, pred, sched, y_p, sub_seed)?;
        let eps_half = pred.predict(&x_half, t_half, y_p)?;
        let x_hat = tweedie_x0(&x_half, t_half, &eps_half, sched)?;
        let m_p = positive_noise_map(&x_hat, pred, sched, y_p)?;
        let m_n = negative_noise_map(&x_hat, pred, sched, negatives)?;
        let mask = binarize(&m_p, &m_n, theta)?.with_labels(y_p, negatives.clone());
        masks.push(mask);
    }
    let best = select_mask(&masks);
    Ok((masks, best))
}

/// Index of the mask whose foreground fraction is nearest the target;
/// ties resolve to the lowest index.
pub fn select_mask(masks: &[Mask]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, m) in masks.iter().enumerate() {
        let d = (m.fraction() - TARGET_FRACTION).abs();
        if d < best_dist {
            best_dist = d;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::TablePredictor;

    fn const_map(shape: &[usize], v: f64) -> Tensor {
        Tensor::filled(shape, v)
    }

    fn varied_map(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream_rng(seed, rng::STREAM_SYNTH);
        rng::randn(shape, &mut r)
    }

    #[test]
    fn binarize_rejects_equal_maps() {
        let m = varied_map(&[3, 4, 4], 1);
        assert!(matches!(binarize(&m, &m, 0.0), Err(Error::DegenerateDifference)));
    }

    #[test]
    fn binarize_hand_oracle() {
        // channel-mean differences [1,1,-1,-1] -> standardized identical,
        // theta 0 -> [1,1,0,0]
        let m_p = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let m_n = Tensor::zeros(&[1, 2, 2]);
        let mask = binarize(&m_p, &m_n, 0.0).unwrap();
        assert_eq!(mask.binary(), &[1, 1, 0, 0]);
        assert_eq!(mask.diff_map().data(), &[1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn binarize_threshold_monotone() {
        let m_p = varied_map(&[3, 8, 8], 2);
        let m_n = varied_map(&[3, 8, 8], 3);
        let lo = binarize(&m_p, &m_n, -0.5).unwrap();
        let hi = binarize(&m_p, &m_n, 0.4).unwrap();
        for (l, h) in lo.binary().iter().zip(hi.binary()) {
            assert!(h <= l, "raising the threshold added a pixel");
        }
    }

    #[test]
    fn noise_map_stub_oracles() {
        let shape = [3usize, 4, 4];
        let varied = varied_map(&shape, 9);
        let pred = TablePredictor::new(vec![
            const_map(&shape, 0.0),
            const_map(&shape, 2.0),
            varied.clone(),
        ])
        .unwrap();
        let sched = NoiseSchedule::linear(4, 0.02, 0.2).unwrap();
        let x_hat = Tensor::zeros(&shape);

        // positive map equals the label's constant
        let m_p = positive_noise_map(&x_hat, &pred, &sched, 2).unwrap();
        assert!(m_p.bits_eq(&varied));
        assert_eq!(m_p.shape(), x_hat.shape());

        // negatives (0, 2.0) average to 1 everywhere
        let m_n = negative_noise_map(&x_hat, &pred, &sched, &[0, 1]).unwrap();
        assert!(m_n.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        // single negative equals that label's map; duplicates change nothing
        let single = negative_noise_map(&x_hat, &pred, &sched, &[1]).unwrap();
        assert!(single.data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
        let dup = negative_noise_map(&x_hat, &pred, &sched, &[1, 1]).unwrap();
        assert!(dup.bits_eq(&single));

        assert!(negative_noise_map(&x_hat, &pred, &sched, &[]).is_err());
    }

    #[test]
    fn half_denoise_step_count_equals_contract() {
        // T = 2 -> exactly one reverse step (one predict per step plus none
        // for the encode)
        use std::sync::atomic::{AtomicUsize, Ordering};
        struct Counting {
            inner: TablePredictor,
            calls: AtomicUsize,
        }
        impl NoisePredictor for Counting {
            fn num_labels(&self) -> usize {
                self.inner.num_labels()
            }
            fn image_shape(&self) -> [usize; 3] {
                self.inner.image_shape()
            }
            fn predict(&self, x: &Tensor, t: usize, label: usize) -> Result<Tensor> {
                self.calls.fetch_add(1, Ordering::SeqCst);
                self.inner.predict(x, t, label)
            }
            fn predict_on_tape(
                &self,
                tape: &mut crate::autodiff::Tape,
                x: crate::autodiff::Var,
                t: usize,
                label: usize,
            ) -> Result<crate::autodiff::Var> {
                self.inner.predict_on_tape(tape, x, t, label)
            }
        }
        let shape = [3usize, 4, 4];
        let pred = Counting {
            inner: TablePredictor::new(vec![varied_map(&shape, 4)]).unwrap(),
            calls: AtomicUsize::new(0),
        };
        let sched = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        let x = Tensor::zeros(&shape);
        half_denoise(&x, &pred, &sched, 0, 5).unwrap();
        assert_eq!(pred.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn half_denoise_deterministic() {
        let shape = [3usize, 4, 4];
        let pred = TablePredictor::new(vec![varied_map(&shape, 4)]).unwrap();
        let sched = NoiseSchedule::linear(8, 0.02, 0.3).unwrap();
        let x = varied_map(&shape, 6).clamp(-1.0, 1.0);
        let a = half_denoise(&x, &pred, &sched, 0, 42).unwrap();
        let b = half_denoise(&x, &pred, &sched, 0, 42).unwrap();
        assert!(a.bits_eq(&b));
        let c = half_denoise(&x, &pred, &sched, 0, 43).unwrap();
        assert!(!a.bits_eq(&c));
    }

    #[test]
    fn half_denoise_true_eps_stub_reconstructs_better_than_zero_stub() {
        // replay the encode noise so a stub can predict exactly the injected
        // eps; it should land closer to the scaled structure image than a
        // zero predictor
        let shape = [3usize, 8, 8];
        let sched = NoiseSchedule::linear(8, 0.05, 0.4).unwrap();
        let x0 = varied_map(&shape, 12).clamp(-1.0, 1.0);
        let seed = 99;
        let mut replay = rng::stream_rng(seed, rng::STREAM_MASK);
        let true_eps = rng::randn(&shape, &mut replay);

        let t_half = sched.len() / 2;
        let target = x0.scale(sched.alpha_bar(t_half).sqrt());

        let oracle = TablePredictor::new(vec![true_eps]).unwrap();
        let zero = TablePredictor::new(vec![Tensor::zeros(&shape)]).unwrap();
        let with_oracle = half_denoise(&x0, &oracle, &sched, 0, seed).unwrap();
        let with_zero = half_denoise(&x0, &zero, &sched, 0, seed).unwrap();
        let d_oracle = with_oracle.l2_distance(&target).unwrap();
        let d_zero = with_zero.l2_distance(&target).unwrap();
        assert!(
            d_oracle < d_zero,
            "oracle stub {d_oracle} should beat zero stub {d_zero}"
        );
    }

    #[test]
    fn generate_masks_single_set_and_determinism() {
        let shape = [3usize, 4, 4];
        let pred = TablePredictor::new(vec![
            varied_map(&shape, 1),
            varied_map(&shape, 2),
            varied_map(&shape, 3),
        ])
        .unwrap();
        let sched = NoiseSchedule::linear(6, 0.02, 0.3).unwrap();
        let x = varied_map(&shape, 8).clamp(-1.0, 1.0);
        let (masks, sel) = generate_masks(&x, &pred, &sched, 0, &[vec![1, 2]], -0.2, 7).unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(sel, 0);
        assert_eq!(masks[0].labels(), (0, &[1usize, 2][..]));

        let (masks2, _) = generate_masks(&x, &pred, &sched, 0, &[vec![1, 2]], -0.2, 7).unwrap();
        assert_eq!(masks[0].binary(), masks2[0].binary());

        assert!(generate_masks(&x, &pred, &sched, 0, &[], -0.2, 7).is_err());
    }

    #[test]
    fn selection_picks_fraction_nearest_target() {
        // craft diff maps with foreground fractions 0.05, 0.30, 0.90 and
        // theta 0; |0.30 - 0.35| is minimal -> index 1
        let mk = |frac: f64| {
            let n = 100;
            let k = (frac * n as f64).round() as usize;
            let mut diff = vec![-1.0; n];
            for v in diff.iter_mut().take(k) {
                *v = 1.0;
            }
            Mask::from_diff_map(&Tensor::new(vec![10, 10], diff).unwrap(), 0.0).unwrap()
        };
        let masks = [mk(0.05), mk(0.30), mk(0.90)];
        assert_eq!(select_mask(&masks), 1);
        assert!((masks[0].fraction() - 0.05).abs() < 1e-12);
        assert!((masks[2].fraction() - 0.90).abs() < 1e-12);
        // exact tie between two fractions resolves to the lower index
        let tie = [mk(0.30), mk(0.40)];
        assert_eq!(select_mask(&tie), 0);
    }

    #[test]
    fn mask_pgm_round_trip() {
        let mask = Mask::from_binary(3, 2, vec![1, 0, 1, 0, 0, 1]).unwrap();
        let bytes = mask.to_pgm_bytes();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let dir = std::env::temp_dir().join(format!("drape-mask-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.pgm");
        mask.save_pgm(&path).unwrap();
        let back = Mask::load_pgm(&path).unwrap();
        assert_eq!(back.binary(), mask.binary());
        std::fs::remove_dir_all(&dir).ok();
    }
}
