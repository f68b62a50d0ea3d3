//! Quantitative evaluation: color-histogram distance, mask IoU, and the
//! classifier loss of the feature net's head.

use crate::error::{Error, Result};
use crate::features::FeatureNet;
use crate::maskgen::Mask;
use crate::tensor::Tensor;

fn color_cell(r: f64, g: f64, b: f64, bins: usize) -> usize {
    let q = |v: f64| {
        let t = ((v + 1.0) / 2.0 * bins as f64).floor();
        (t.clamp(0.0, bins as f64 - 1.0)) as usize
    };
    (q(r) * bins + q(g)) * bins + q(b)
}

fn histogram(img: &Tensor, mask: Option<&Mask>, bins: usize) -> Result<Vec<f64>> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let hw = h * w;
    let data = img.data();
    let mut hist = vec![0.0; bins * bins * bins];
    let mut count = 0usize;
    for i in 0..hw {
        if let Some(m) = mask {
            if m.binary()[i] == 0 {
                continue;
            }
        }
        hist[color_cell(data[i], data[hw + i], data[2 * hw + i], bins)] += 1.0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("histogram: empty mask".into()));
    }
    let inv = 1.0 / count as f64;
    for v in hist.iter_mut() {
        *v *= inv;
    }
    Ok(hist)
}

fn check_cdh_inputs(img1: &Tensor, img2: &Tensor, bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("cdh_distance: bins = {bins} must be >= 2")));
    }
    if img1.shape() != img2.shape() || img1.shape().len() != 3 || img1.shape()[0] != 3 {
        return Err(Error::shape("cdh_distance", format!("{:?} vs {:?}", img1.shape(), img2.shape())));
    }
    Ok(())
}

/// Color-difference histogram distance: both images quantized to
/// `bins^3` color cells, normalized histograms compared by total-variation
/// distance. Lies in [0, 1]; 0 iff the quantized histograms agree.
pub fn cdh_distance(img1: &Tensor, img2: &Tensor, bins: usize) -> Result<f64> {
    check_cdh_inputs(img1, img2, bins)?;
    let h1 = histogram(img1, None, bins)?;
    let h2 = histogram(img2, None, bins)?;
    Ok(0.5 * h1.iter().zip(&h2).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// CDH distance restricted to the mask's foreground pixels.
pub fn cdh_distance_masked(img1: &Tensor, img2: &Tensor, mask: &Mask, bins: usize) -> Result<f64> {
    check_cdh_inputs(img1, img2, bins)?;
    let h1 = histogram(img1, Some(mask), bins)?;
    let h2 = histogram(img2, Some(mask), bins)?;
    Ok(0.5 * h1.iter().zip(&h2).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Intersection over union of two binary masks; two empty masks count as 1.
pub fn mask_iou(m1: &Mask, m2: &Mask) -> Result<f64> {
    if m1.width() != m2.width() || m1.height() != m2.height() {
        return Err(Error::shape(
            "mask_iou",
            format!("{}x{} vs {}x{}", m1.width(), m1.height(), m2.width(), m2.height()),
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in m1.binary().iter().zip(m2.binary()) {
        inter += (a == 1 && b == 1) as usize;
        union += (a == 1 || b == 1) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Cross-entropy of a logit vector against a label index.
pub fn cross_entropy_from_logits(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, num_labels: logits.len() });
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|&v| (v - mx).exp()).sum();
    Ok(denom.ln() - (logits[label] - mx))
}

/// Cross-entropy of the feature net's classifier head on an image.
pub fn classifier_loss(fext: &FeatureNet, image: &Tensor, label: usize) -> Result<f64> {
    if label >= fext.arch.num_labels {
        return Err(Error::LabelOutOfRange { label, num_labels: fext.arch.num_labels });
    }
    let logits = fext.logits(image)?;
    cross_entropy_from_logits(logits.data(), label)
}

/// Mean absolute per-pixel difference, restricted to foreground (when
/// `inside` is true) or background pixels.
pub fn mean_abs_diff_region(img1: &Tensor, img2: &Tensor, mask: &Mask, inside: bool) -> Result<f64> {
    if img1.shape() != img2.shape() {
        return Err(Error::shape("mean_abs_diff_region", format!("{:?} vs {:?}", img1.shape(), img2.shape())));
    }
    let (c, h, w) = (img1.shape()[0], img1.shape()[1], img1.shape()[2]);
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..hw {
        let fg = mask.binary()[i] == 1;
        if fg != inside {
            continue;
        }
        for ch in 0..c {
            total += (img1.data()[ch * hw + i] - img2.data()[ch * hw + i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("mean_abs_diff_region: empty region".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ExtractorArch;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn cdh_basics() {
        let black = Tensor::filled(&[3, 4, 4], -1.0);
        let white = Tensor::filled(&[3, 4, 4], 1.0);
        assert_eq!(cdh_distance(&black, &black, 4).unwrap(), 0.0);
        assert_eq!(cdh_distance(&black, &white, 2).unwrap(), 1.0);
        let a = cdh_distance(&black, &white, 3).unwrap();
        let b = cdh_distance(&white, &black, 3).unwrap();
        assert_eq!(a, b);
        assert!(cdh_distance(&black, &white, 1).is_err());
    }

    #[test]
    fn cdh_masked_ignores_background() {
        let mut r = rng::stream_rng(3, rng::STREAM_SYNTH);
        let img1 = rng::randn(&[3, 4, 4], &mut r).clamp(-1.0, 1.0);
        // img2 equals img1 inside the mask, differs outside
        let mask = Mask::from_binary(4, 4, (0..16).map(|i| (i < 8) as u8).collect()).unwrap();
        let mut data = img1.data().to_vec();
        for i in 8..16 {
            for c in 0..3 {
                data[c * 16 + i] = -data[c * 16 + i] * 0.5 + 0.3;
            }
        }
        let img2 = Tensor::new(vec![3, 4, 4], data).unwrap();
        assert_eq!(cdh_distance_masked(&img1, &img2, &mask, 4).unwrap(), 0.0);
        assert!(cdh_distance(&img1, &img2, 4).unwrap() > 0.0);
    }

    #[test]
    fn iou_cases() {
        let a = Mask::from_binary(4, 1, vec![1, 1, 0, 0]).unwrap();
        let b = Mask::from_binary(4, 1, vec![0, 0, 1, 1]).unwrap();
        let c = Mask::from_binary(4, 1, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
        // equal areas overlapping by half -> 1/3
        assert!((mask_iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = Mask::from_binary(4, 1, vec![0; 4]).unwrap();
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        assert!(mask_iou(&a, &Mask::all_ones(3, 1)).is_err());
    }

    #[test]
    fn cross_entropy_oracles() {
        // uniform logits -> ln(num_classes)
        assert!((cross_entropy_from_logits(&[0.0; 4], 2).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        // near-one-hot correct logit -> near zero
        assert!(cross_entropy_from_logits(&[30.0, 0.0, 0.0], 0).unwrap() < 1e-9);
        // logits [2,0,0,0], true class 0 -> -ln(e^2 / (e^2 + 3))
        let expect = -((2.0f64.exp()) / (2.0f64.exp() + 3.0)).ln();
        let got = cross_entropy_from_logits(&[2.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!(cross_entropy_from_logits(&[0.0; 3], 3).is_err());
    }

    #[test]
    fn classifier_loss_uniform_head() {
        // zeroed head weights give uniform logits -> ln(num_labels)
        let arch = ExtractorArch { image: 8, patch: 4, embed: 8, blocks: 1, mlp_hidden: 16, num_labels: 4, key_block: 0 };
        let mut net = FeatureNet::init(arch, 2).unwrap();
        let zeroed: Vec<Tensor> = net
            .params
            .iter()
            .map(|(n, t)| if n.starts_with("head.") { Tensor::zeros(t.shape()) } else { t.clone() })
            .collect();
        net.params.replace_all(zeroed);
        let mut r = rng::stream_rng(4, rng::STREAM_SYNTH);
        let img = rng::randn(&[3, 8, 8], &mut r).clamp(-1.0, 1.0);
        let loss = classifier_loss(&net, &img, 1).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!(classifier_loss(&net, &img, 4).is_err());
    }

    proptest! {
        #[test]
        fn cdh_is_a_pseudometric(vals1 in proptest::collection::vec(-1.0f64..=1.0, 48),
                                 vals2 in proptest::collection::vec(-1.0f64..=1.0, 48)) {
            let a = Tensor::new(vec![3, 4, 4], vals1).unwrap();
            let b = Tensor::new(vec![3, 4, 4], vals2).unwrap();
            let d_ab = cdh_distance(&a, &b, 4).unwrap();
            let d_ba = cdh_distance(&b, &a, 4).unwrap();
            prop_assert!(d_ab >= 0.0 && d_ab <= 1.0);
            prop_assert!((d_ab - d_ba).abs() < 1e-15);
            prop_assert_eq!(cdh_distance(&a, &a, 4).unwrap(), 0.0);
        }

        #[test]
        fn iou_stays_in_unit_interval(bits1 in proptest::collection::vec(0u8..=1, 16),
                                      bits2 in proptest::collection::vec(0u8..=1, 16)) {
            let a = Mask::from_binary(4, 4, bits1).unwrap();
            let b = Mask::from_binary(4, 4, bits2).unwrap();
            let v = mask_iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        }
    }
}
