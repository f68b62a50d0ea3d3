// Scratch calibration run: times training and checks mask IoU + transfer
// behavior on the trained system. Not part of the deliverable test suite.

use std::time::Instant;

use drape::config::GuidanceConfig;
use drape::denoiser::{eval_loss, train_denoiser, DenoiserNet};
use drape::diffusion::{tweedie_x0, NoisePredictor, NoiseSchedule};
use drape::features::{accuracy, train_extractor};
use drape::maskgen::{binarize, generate_masks, half_denoise, negative_noise_map, positive_noise_map};
use drape::metrics::{cdh_distance_masked, mask_iou, mean_abs_diff_region};
use drape::pipeline::transfer;
use drape::synth::{self, SynthClass};
use drape::Tensor;

fn diff_stats(mask_diff: &Tensor, gt: &[u8]) -> (f64, f64) {
    let mut fg = (0.0, 0usize);
    let mut bg = (0.0, 0usize);
    for (i, &v) in mask_diff.data().iter().enumerate() {
        if gt[i] == 1 {
            fg = (fg.0 + v, fg.1 + 1);
        } else {
            bg = (bg.0 + v, bg.1 + 1);
        }
    }
    (fg.0 / fg.1 as f64, bg.0 / bg.1 as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let ext_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(600);

    let size = 32;
    let cfg = GuidanceConfig::default();
    let sched = NoiseSchedule::default_for(cfg.t_total).unwrap();

    let t0 = Instant::now();
    let dataset = synth::gen_dataset(24, 1, size).unwrap();
    let pairs = synth::as_pairs(&dataset);
    println!("dataset: {} samples in {:?}", dataset.len(), t0.elapsed());

    let t0 = Instant::now();
    let (den, meta) = train_denoiser(&pairs, synth::NUM_CLASSES, &sched, steps, lr, 7).unwrap();
    println!("denoiser: {} steps in {:?}, final loss {:.4}", steps, t0.elapsed(), meta.final_loss);

    let held: Vec<_> = (0..32)
        .map(|i| {
            let s = synth::gen_sample(900_000 + i, SynthClass::ALL[(i % 8) as usize], size).unwrap();
            (s.image, s.label)
        })
        .collect();
    let init = DenoiserNet::init(den.arch, 7).unwrap();
    let l0 = eval_loss(&init, &held, &sched, 3).unwrap();
    let l1 = eval_loss(&den, &held, &sched, 3).unwrap();
    println!("held-out loss: init {:.4} -> trained {:.4} (ratio {:.3})", l0, l1, l1 / l0);

    let t0 = Instant::now();
    let (fext, fmeta) = train_extractor(&pairs, synth::NUM_CLASSES, ext_steps, 8).unwrap();
    println!("extractor: {} steps in {:?}, final loss {:.4}", ext_steps, t0.elapsed(), fmeta.final_loss);
    let acc = accuracy(&fext, &held).unwrap();
    println!("held-out accuracy: {:.3} (chance 0.125)", acc);

    // --- mask diagnostics on one bag image ---
    let probe = synth::gen_structure(555, SynthClass::Bag, size).unwrap();
    let gt_bits = probe.gt_mask.as_ref().unwrap().binary().to_vec();
    let y_p = SynthClass::Bag.id();
    let t_half = sched.len() / 2;
    for (i, negs) in synth::default_negative_sets().iter().enumerate() {
        let x_half = half_denoise(&probe.image, &den, &sched, y_p, 123 + i as u64).unwrap();
        let eps_half = den.predict(&x_half, t_half, y_p).unwrap();
        let x_hat = tweedie_x0(&x_half, t_half, &eps_half, &sched).unwrap();
        let m_p = positive_noise_map(&x_hat, &den, &sched, y_p).unwrap();
        let m_n = negative_noise_map(&x_hat, &den, &sched, negs).unwrap();
        let mask = binarize(&m_p, &m_n, cfg.theta_mask).unwrap();
        let (fg, bg) = diff_stats(&mask.diff_map(), &gt_bits);
        // the same difference computed at the true clean image
        let m_p2 = positive_noise_map(&probe.image, &den, &sched, y_p).unwrap();
        let m_n2 = negative_noise_map(&probe.image, &den, &sched, negs).unwrap();
        let ideal = binarize(&m_p2, &m_n2, cfg.theta_mask).unwrap();
        let (fg2, bg2) = diff_stats(&ideal.diff_map(), &gt_bits);
        println!(
            "  set {i}: via x_hat fg {fg:.2} bg {bg:.2} frac {:.2} | via clean fg {fg2:.2} bg {bg2:.2} frac {:.2}",
            mask.fraction(),
            ideal.fraction()
        );
        let recon = x_hat.l2_distance(&probe.image).unwrap();
        println!("         |x_hat - x_s0| = {recon:.2}");
    }

    // --- mask IoU over 20 held-out structure images (positive-free sets) ---
    let t0 = Instant::now();
    let mut ious = Vec::new();
    for i in 0..20u64 {
        let class = SynthClass::ALL[(i % 4) as usize];
        let s = synth::gen_structure(500_000 + i, class, size).unwrap();
        let sets = synth::default_negative_sets_for(class.id());
        let (masks, sel) = generate_masks(&s.image, &den, &sched, class.id(), &sets, cfg.theta_mask, 40 + i).unwrap();
        let iou = mask_iou(&masks[sel], s.gt_mask.as_ref().unwrap()).unwrap();
        let fracs: Vec<f64> = masks.iter().map(|m| (m.fraction() * 100.0).round() / 100.0).collect();
        println!("  {} sel {} iou {:.3} fracs {:?} gt {:.2}", class.name(), sel, iou, fracs, s.gt_mask.as_ref().unwrap().fraction());
        ious.push(iou);
    }
    println!("mean IoU {:.3} in {:?}", ious.iter().sum::<f64>() / 20.0, t0.elapsed());

    // --- transfer scale sweep on the standard pair with the gt mask ---
    let structure = synth::gen_structure(7, SynthClass::Bag, size).unwrap();
    let appearance = synth::gen_appearance(7, SynthClass::Stripes, size).unwrap();
    let gt = structure.gt_mask.clone().unwrap().with_labels(SynthClass::Bag.id(), vec![]);
    for (scale, l_s, l_a) in [(1.0, 0.0, 0.0), (0.5, 1.0, 0.1), (1.0, 1.0, 0.1), (2.0, 1.0, 0.1), (4.0, 1.0, 0.1), (2.0, 1.0, 0.0), (2.0, 0.0, 0.1)] {
        let t0 = Instant::now();
        let mut wins = 0;
        let mut stats = (0.0, 0.0, 0.0);
        for seed in 0..4u64 {
            let mut c = cfg.clone();
            c.seed = seed;
            c.guidance_scale = scale;
            c.lambda_struct = l_s;
            c.lambda_app = l_a;
            c.mask_skip_prob = 0.0;
            let (out, _) = transfer(&structure.image, &appearance.image, &gt, &den, &fext, &c, &sched).unwrap();
            let cdh_out = cdh_distance_masked(&out, &appearance.image, &gt, 4).unwrap();
            let cdh_src = cdh_distance_masked(&structure.image, &appearance.image, &gt, 4).unwrap();
            let inside = mean_abs_diff_region(&out, &structure.image, &gt, true).unwrap();
            let outside = mean_abs_diff_region(&out, &structure.image, &gt, false).unwrap();
            wins += (cdh_out < cdh_src && outside < inside) as usize;
            stats = (stats.0 + cdh_out, stats.1 + inside, stats.2 + outside);
        }
        println!(
            "scale {scale} l_s {l_s} l_a {l_a}: wins {wins}/4, cdh_out {:.3} (src 1.0), inside {:.3}, outside {:.3}, {:?}",
            stats.0 / 4.0,
            stats.1 / 4.0,
            stats.2 / 4.0,
            t0.elapsed()
        );
    }
}
