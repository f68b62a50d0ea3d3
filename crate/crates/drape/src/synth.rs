//! Procedural synthetic dataset: structure images (labeled dark shapes on a
//! bright background, with exact foreground masks) and appearance images
//! (full-frame mid-brightness textures).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maskgen::Mask;
use crate::netpbm;
use crate::rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 8;
/// Horizontal period of the stripe texture, in pixels.
pub const STRIPE_PERIOD: usize = 8;

/// The fixed negative-label triples used for mask generation.
pub fn default_negative_sets() -> Vec<Vec<usize>> {
    vec![
        vec![SynthClass::Stripes.id(), SynthClass::Dots.id(), SynthClass::Waves.id()],
        vec![SynthClass::Dots.id(), SynthClass::Waves.id(), SynthClass::Checker.id()],
        vec![SynthClass::Phone.id(), SynthClass::Pillow.id(), SynthClass::Cup.id()],
    ]
}

/// The fixed triples with the positive label swapped out: a negative set
/// containing the foreground label cancels its own signal.
pub fn default_negative_sets_for(y_p: usize) -> Vec<Vec<usize>> {
    default_negative_sets()
        .into_iter()
        .map(|set| {
            let mut set = set;
            if let Some(slot) = set.iter().position(|&l| l == y_p) {
                let replacement = (0..NUM_CLASSES)
                    .find(|id| *id != y_p && !set.contains(id))
                    .expect("more classes than one set");
                set[slot] = replacement;
            }
            set
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthClass {
    Bag,
    Phone,
    Pillow,
    Cup,
    Stripes,
    Dots,
    Waves,
    Checker,
}

impl SynthClass {
    pub const ALL: [SynthClass; 8] = [
        SynthClass::Bag,
        SynthClass::Phone,
        SynthClass::Pillow,
        SynthClass::Cup,
        SynthClass::Stripes,
        SynthClass::Dots,
        SynthClass::Waves,
        SynthClass::Checker,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_id(id: usize) -> Result<SynthClass> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or(Error::LabelOutOfRange { label: id, num_labels: NUM_CLASSES })
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::Bag => "bag",
            SynthClass::Phone => "phone",
            SynthClass::Pillow => "pillow",
            SynthClass::Cup => "cup",
            SynthClass::Stripes => "stripes",
            SynthClass::Dots => "dots",
            SynthClass::Waves => "waves",
            SynthClass::Checker => "checker",
        }
    }

    pub fn from_name(name: &str) -> Result<SynthClass> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class {name:?}")))
    }

    /// Shape classes come with a ground-truth mask; textures fill the frame.
    pub fn is_structure(self) -> bool {
        self.id() < 4
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    /// [3, H, W] image in [-1, 1].
    pub image: Tensor,
    pub label: usize,
    /// Exact foreground mask; present for structure classes only.
    pub gt_mask: Option<Mask>,
    pub seed: u64,
}

fn jitter(r: &mut ChaCha8Rng, amount: f64) -> f64 {
    r.random_range(-amount..amount)
}

fn jitter3(r: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    [
        base[0] + jitter(r, amount),
        base[1] + jitter(r, amount),
        base[2] + jitter(r, amount),
    ]
}

struct ShapeGeom {
    dx: f64,
    dy: f64,
    scale: f64,
}

fn in_rect(u: f64, v: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> bool {
    u >= x0 && u <= x1 && v >= y0 && v <= y1
}

fn shape_predicate(class: SynthClass, g: &ShapeGeom, u0: f64, v0: f64) -> bool {
    // shapes are defined around (0.5, 0.5); the jitter moves the whole
    // silhouette rigidly, the scale stretches it about the center
    let u = 0.5 + (u0 - 0.5 - g.dx) / g.scale;
    let v = 0.5 + (v0 - 0.5 - g.dy) / g.scale;
    match class {
        SynthClass::Bag => {
            let body = in_rect(u, v, 0.20, 0.80, 0.42, 0.86);
            // handle: two legs reaching into the body plus a top bar
            let legs = in_rect(u, v, 0.28, 0.38, 0.18, 0.54) || in_rect(u, v, 0.62, 0.72, 0.18, 0.54);
            let bar = in_rect(u, v, 0.28, 0.72, 0.14, 0.26);
            body || legs || bar
        }
        SynthClass::Phone => in_rect(u, v, 0.34, 0.66, 0.14, 0.86),
        SynthClass::Pillow => {
            let a = (u - 0.5) / 0.36;
            let b = (v - 0.54) / 0.26;
            a.powi(4) + b.powi(4) <= 1.0
        }
        SynthClass::Cup => {
            let body = in_rect(u, v, 0.26, 0.62, 0.28, 0.82);
            let top_leg = in_rect(u, v, 0.56, 0.80, 0.36, 0.46);
            let bot_leg = in_rect(u, v, 0.56, 0.80, 0.62, 0.72);
            let bar = in_rect(u, v, 0.72, 0.82, 0.36, 0.72);
            body || top_leg || bot_leg || bar
        }
        _ => false,
    }
}

const FG_BASE: [[f64; 3]; 4] = [
    [-0.55, -0.38, -0.62], // bag
    [-0.62, -0.60, -0.55], // phone
    [-0.35, -0.62, -0.45], // pillow
    [-0.58, -0.40, -0.30], // cup
];

/// A labeled shape on a bright background plus its exact mask.
/// Deterministic per (seed, class); `size` is the square image side.
pub fn gen_structure(seed: u64, class: SynthClass, size: usize) -> Result<SynthSample> {
    if !class.is_structure() {
        return Err(Error::InvalidArgument(format!("{} is not a structure class", class.name())));
    }
    if size < 8 {
        return Err(Error::InvalidArgument("gen_structure: size must be >= 8".into()));
    }
    let mut r = rng::stream_rng(rng::mix(seed, class.id() as u64), rng::STREAM_SYNTH);
    let bg = jitter3(&mut r, [0.64, 0.62, 0.58], 0.06);
    let fg = jitter3(&mut r, FG_BASE[class.id()], 0.07);
    let shade = r.random_range(0.0..1.0);
    let geom = ShapeGeom {
        dx: jitter(&mut r, 0.03),
        dy: jitter(&mut r, 0.03),
        scale: 1.0 + jitter(&mut r, 0.08),
    };

    let mut data = vec![0.0; 3 * size * size];
    let mut binary = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let inside = shape_predicate(class, &geom, u, v);
            let idx = y * size + x;
            if inside {
                binary[idx] = 1;
            }
            for c in 0..3 {
                let val = if inside {
                    // light vertical shading inside the shape
                    fg[c] + shade * (v - 0.5) * 0.12
                } else {
                    bg[c]
                };
                data[c * size * size + idx] = val.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(SynthSample {
        image: Tensor::new(vec![3, size, size], data)?,
        label: class.id(),
        gt_mask: Some(Mask::from_binary(size, size, binary)?),
        seed,
    })
}

/// A full-frame texture image. Deterministic per (seed, texture).
pub fn gen_appearance(seed: u64, class: SynthClass, size: usize) -> Result<SynthSample> {
    if class.is_structure() {
        return Err(Error::InvalidArgument(format!("{} is not a texture class", class.name())));
    }
    if size < 8 {
        return Err(Error::InvalidArgument("gen_appearance: size must be >= 8".into()));
    }
    let mut r = rng::stream_rng(rng::mix(seed, class.id() as u64), rng::STREAM_SYNTH);
    let mut data = vec![0.0; 3 * size * size];
    let lerp3 = |a: [f64; 3], b: [f64; 3], t: f64| [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t];

    match class {
        SynthClass::Stripes => {
            let c1 = jitter3(&mut r, [0.48, 0.12, -0.28], 0.10);
            let c2 = jitter3(&mut r, [-0.38, -0.02, 0.42], 0.10);
            let phase = r.random_range(0.0..STRIPE_PERIOD as f64);
            for y in 0..size {
                for x in 0..size {
                    let t = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * (x as f64 + phase) / STRIPE_PERIOD as f64).sin();
                    let col = lerp3(c1, c2, t);
                    for c in 0..3 {
                        data[c * size * size + y * size + x] = col[c].clamp(-1.0, 1.0);
                    }
                }
            }
        }
        SynthClass::Dots => {
            let bgc = jitter3(&mut r, [-0.18, 0.02, 0.22], 0.08);
            let dot = jitter3(&mut r, [0.55, 0.35, -0.08], 0.08);
            let period = 8.0;
            let radius = r.random_range(2.0..2.8);
            let ox = r.random_range(0.0..period);
            let oy = r.random_range(0.0..period);
            for y in 0..size {
                for x in 0..size {
                    let fx = (x as f64 + ox).rem_euclid(period) - period / 2.0;
                    let fy = (y as f64 + oy).rem_euclid(period) - period / 2.0;
                    let inside = fx * fx + fy * fy <= radius * radius;
                    let col = if inside { dot } else { bgc };
                    for c in 0..3 {
                        data[c * size * size + y * size + x] = col[c].clamp(-1.0, 1.0);
                    }
                }
            }
        }
        SynthClass::Waves => {
            let c1 = jitter3(&mut r, [0.10, 0.45, 0.32], 0.10);
            let c2 = jitter3(&mut r, [-0.30, -0.25, 0.15], 0.10);
            let phase = r.random_range(0.0..12.0);
            for y in 0..size {
                for x in 0..size {
                    let t = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * ((x + y) as f64 + phase) / 12.0).sin();
                    let col = lerp3(c1, c2, t);
                    for c in 0..3 {
                        data[c * size * size + y * size + x] = col[c].clamp(-1.0, 1.0);
                    }
                }
            }
        }
        SynthClass::Checker => {
            let c1 = jitter3(&mut r, [0.40, 0.30, 0.05], 0.10);
            let c2 = jitter3(&mut r, [-0.35, -0.20, -0.05], 0.10);
            let cell = 4usize;
            for y in 0..size {
                for x in 0..size {
                    let col = if (x / cell + y / cell) % 2 == 0 { c1 } else { c2 };
                    for c in 0..3 {
                        data[c * size * size + y * size + x] = col[c].clamp(-1.0, 1.0);
                    }
                }
            }
        }
        _ => unreachable!("texture classes only"),
    }
    Ok(SynthSample {
        image: Tensor::new(vec![3, size, size], data)?,
        label: class.id(),
        gt_mask: None,
        seed,
    })
}

pub fn gen_sample(seed: u64, class: SynthClass, size: usize) -> Result<SynthSample> {
    if class.is_structure() {
        gen_structure(seed, class, size)
    } else {
        gen_appearance(seed, class, size)
    }
}

/// Balanced dataset over all 8 classes, deterministically shuffled.
pub fn gen_dataset(n_per_class: usize, seed: u64, size: usize) -> Result<Vec<SynthSample>> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("gen_dataset: n_per_class must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(NUM_CLASSES * n_per_class);
    for class in SynthClass::ALL {
        for i in 0..n_per_class {
            let sample_seed = rng::mix(seed, 1 + i as u64);
            samples.push(gen_sample(sample_seed, class, size)?);
        }
    }
    // Fisher-Yates with a seeded stream
    let mut r = rng::stream_rng(seed, rng::STREAM_SYNTH);
    for i in (1..samples.len()).rev() {
        let j = r.random_range(0..=i);
        samples.swap(i, j);
    }
    Ok(samples)
}

/// (image, label) view for the training loops.
pub fn as_pairs(samples: &[SynthSample]) -> Vec<(Tensor, usize)> {
    samples.iter().map(|s| (s.image.clone(), s.label)).collect()
}

/// Writes `images/<class>/<seed>.ppm`, `masks/<class>/<seed>.pgm` and a
/// `manifest.txt` with one `path label` line per sample.
pub fn write_dataset(dir: &std::path::Path, samples: &[SynthSample]) -> Result<()> {
    let mut manifest = String::new();
    for s in samples {
        let class = SynthClass::from_id(s.label)?;
        let img_rel = format!("images/{}/{}.ppm", class.name(), s.seed);
        let img_path = dir.join(&img_rel);
        std::fs::create_dir_all(img_path.parent().unwrap())?;
        netpbm::write_image(&img_path, &s.image)?;
        if let Some(mask) = &s.gt_mask {
            let mask_path = dir.join(format!("masks/{}/{}.pgm", class.name(), s.seed));
            std::fs::create_dir_all(mask_path.parent().unwrap())?;
            mask.save_pgm(&mask_path)?;
        }
        manifest.push_str(&format!("{} {}\n", img_rel, s.label));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &std::path::Path) -> Result<Vec<SynthSample>> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|_| Error::format(manifest_path.display().to_string(), "missing manifest"))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (rel, label) = line
            .rsplit_once(' ')
            .ok_or_else(|| Error::format(manifest_path.display().to_string(), format!("line {}: expected 'path label'", lineno + 1)))?;
        let label: usize = label
            .parse()
            .map_err(|_| Error::format(manifest_path.display().to_string(), format!("line {}: bad label", lineno + 1)))?;
        let image = netpbm::read_image(&dir.join(rel))?;
        let seed: u64 = std::path::Path::new(rel)
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        let mask_rel = rel.replacen("images/", "masks/", 1).replacen(".ppm", ".pgm", 1);
        let mask_path = dir.join(&mask_rel);
        let gt_mask = if mask_path.exists() { Some(Mask::load_pgm(&mask_path)?) } else { None };
        samples.push(SynthSample { image, label, gt_mask, seed });
    }
    if samples.is_empty() {
        return Err(Error::format(manifest_path.display().to_string(), "empty manifest"));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinism_per_seed_and_class() {
        let a = gen_structure(5, SynthClass::Bag, 32).unwrap();
        let b = gen_structure(5, SynthClass::Bag, 32).unwrap();
        assert!(a.image.bits_eq(&b.image));
        let c = gen_structure(6, SynthClass::Bag, 32).unwrap();
        assert!(!a.image.bits_eq(&c.image));
        let d = gen_appearance(5, SynthClass::Stripes, 32).unwrap();
        let e = gen_appearance(5, SynthClass::Stripes, 32).unwrap();
        assert!(d.image.bits_eq(&e.image));
    }

    #[test]
    fn class_validation() {
        assert!(gen_structure(1, SynthClass::Stripes, 32).is_err());
        assert!(gen_appearance(1, SynthClass::Bag, 32).is_err());
        assert!(SynthClass::from_name("bag").is_ok());
        assert!(SynthClass::from_name("sofa").is_err());
        assert_eq!(SynthClass::from_id(7).unwrap(), SynthClass::Checker);
        assert!(SynthClass::from_id(8).is_err());
    }

    #[test]
    fn mask_fraction_stays_in_bounds_over_many_seeds() {
        for seed in 0..1000u64 {
            let class = SynthClass::ALL[(seed % 4) as usize];
            let s = gen_structure(seed, class, 32).unwrap();
            let f = s.gt_mask.as_ref().unwrap().fraction();
            assert!((0.1..=0.7).contains(&f), "{} seed {}: fraction {}", class.name(), seed, f);
        }
    }

    #[test]
    fn bag_mask_is_one_connected_component() {
        for seed in 0..50u64 {
            let s = gen_structure(seed, SynthClass::Bag, 32).unwrap();
            let mask = s.gt_mask.unwrap();
            let bits = mask.binary();
            let (w, h) = (mask.width(), mask.height());
            // BFS from the first foreground pixel, 4-connected
            let start = bits.iter().position(|&b| b == 1).expect("nonempty");
            let mut seen = vec![false; bits.len()];
            let mut queue = std::collections::VecDeque::from([start]);
            seen[start] = true;
            let mut count = 0;
            while let Some(p) = queue.pop_front() {
                count += 1;
                let (y, x) = (p / w, p % w);
                let mut push = |yy: isize, xx: isize| {
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        let q = yy as usize * w + xx as usize;
                        if bits[q] == 1 && !seen[q] {
                            seen[q] = true;
                            queue.push_back(q);
                        }
                    }
                };
                push(y as isize - 1, x as isize);
                push(y as isize + 1, x as isize);
                push(y as isize, x as isize - 1);
                push(y as isize, x as isize + 1);
            }
            let total = bits.iter().filter(|&&b| b == 1).count();
            assert_eq!(count, total, "seed {}: bag mask has disconnected pieces", seed);
        }
    }

    #[test]
    fn foreground_contrasts_with_background() {
        // every foreground pixel differs from the background fill by > 0.2
        // in at least one channel
        for seed in 0..100u64 {
            let class = SynthClass::ALL[(seed % 4) as usize];
            let s = gen_structure(seed, class, 32).unwrap();
            let mask = s.gt_mask.as_ref().unwrap();
            let n = 32 * 32;
            // background fill: sample a known background pixel per channel
            let bg_idx = mask.binary().iter().position(|&b| b == 0).unwrap();
            for (p, &b) in mask.binary().iter().enumerate() {
                if b == 0 {
                    continue;
                }
                let linf = (0..3)
                    .map(|c| (s.image.data()[c * n + p] - s.image.data()[c * n + bg_idx]).abs())
                    .fold(0.0f64, f64::max);
                assert!(linf > 0.2, "{} seed {} pixel {}: contrast {}", class.name(), seed, p, linf);
            }
        }
    }

    #[test]
    fn stripes_autocorrelate_at_period() {
        for seed in 0..20u64 {
            let s = gen_appearance(seed, SynthClass::Stripes, 32).unwrap();
            // row autocorrelation of channel 0 at lag STRIPE_PERIOD
            let row = &s.image.data()[0..32];
            let lag = STRIPE_PERIOD;
            let a = &row[..32 - lag];
            let b = &row[lag..];
            let mean_a: f64 = a.iter().sum::<f64>() / a.len() as f64;
            let mean_b: f64 = b.iter().sum::<f64>() / b.len() as f64;
            let cov: f64 = a.iter().zip(b).map(|(&x, &y)| (x - mean_a) * (y - mean_b)).sum();
            let va: f64 = a.iter().map(|&x| (x - mean_a) * (x - mean_a)).sum();
            let vb: f64 = b.iter().map(|&y| (y - mean_b) * (y - mean_b)).sum();
            let corr = cov / (va.sqrt() * vb.sqrt());
            assert!(corr > 0.8, "seed {}: autocorrelation {}", seed, corr);
        }
    }

    #[test]
    fn values_stay_in_range() {
        for class in SynthClass::ALL {
            let s = gen_sample(3, class, 32).unwrap();
            assert!(s.image.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn dataset_balance_and_shuffle_determinism() {
        let d = gen_dataset(2, 9, 16).unwrap();
        assert_eq!(d.len(), 16);
        let mut hist = [0usize; NUM_CLASSES];
        for s in &d {
            hist[s.label] += 1;
        }
        assert!(hist.iter().all(|&c| c == 2));
        let d2 = gen_dataset(2, 9, 16).unwrap();
        for (a, b) in d.iter().zip(&d2) {
            assert_eq!(a.label, b.label);
            assert!(a.image.bits_eq(&b.image));
        }
        assert!(gen_dataset(0, 9, 16).is_err());
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_dataset(1, 4, 16).unwrap();
        write_dataset(dir.path(), &d).unwrap();
        assert!(dir.path().join("manifest.txt").exists());
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), d.len());
        for (a, b) in d.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.gt_mask.is_some(), b.gt_mask.is_some());
            // images survive 8-bit quantization within 1/255
            for (&x, &y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 1.0 / 255.0 + 1e-12);
            }
        }
    }
}
