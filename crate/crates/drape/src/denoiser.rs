//! Label-conditional noise-prediction network and its training loop.
//!
//! A small convolutional encoder-decoder: three down stages, a bottleneck
//! with sinusoidal time embedding and a learned label embedding, three up
//! stages with skip connections. A second label embedding enters the first
//! decoder stage so the conditioning has some spatial resolution.

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, ParamSet, TrainMeta};
use crate::diffusion::{ddpm_loss, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const PAD: usize = 1;
const BATCH: usize = 8;
const MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserArch {
    /// Image side length; must be divisible by 8.
    pub image: usize,
    pub channels: [usize; 3],
    /// Sinusoidal time-embedding width (even).
    pub time_dim: usize,
    pub num_labels: usize,
}

impl DenoiserArch {
    pub fn small(image: usize, num_labels: usize) -> Self {
        DenoiserArch { image, channels: [8, 16, 32], time_dim: 16, num_labels }
    }

    fn validate(&self) -> Result<()> {
        if self.image == 0 || self.image % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "denoiser: image size {} must be a positive multiple of 8",
                self.image
            )));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::InvalidArgument("denoiser: time_dim must be even".into()));
        }
        if self.num_labels == 0 {
            return Err(Error::InvalidArgument("denoiser: need at least one label".into()));
        }
        Ok(())
    }
}

pub struct DenoiserNet {
    pub arch: DenoiserArch,
    pub params: ParamSet,
}

fn conv_init(rng_: &mut rand_chacha::ChaCha8Rng, co: usize, ci: usize) -> Tensor {
    let scale = (1.0 / (ci * KERNEL * KERNEL) as f64).sqrt();
    rng::randn(&[co, ci, KERNEL, KERNEL], rng_).scale(scale)
}

impl DenoiserNet {
    pub fn init(arch: DenoiserArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let [c1, c2, c3] = arch.channels;
        let mut r = rng::stream_rng(seed, rng::STREAM_INIT);
        let mut p = ParamSet::new();
        p.push("enc1.w", conv_init(&mut r, c1, 3));
        p.push("enc1.b", Tensor::zeros(&[c1]));
        p.push("enc2.w", conv_init(&mut r, c2, c1));
        p.push("enc2.b", Tensor::zeros(&[c2]));
        p.push("enc3.w", conv_init(&mut r, c3, c2));
        p.push("enc3.b", Tensor::zeros(&[c3]));
        p.push("bot.w", conv_init(&mut r, c3, c3));
        p.push("bot.b", Tensor::zeros(&[c3]));
        p.push("time.w", rng::randn(&[arch.time_dim, c3], &mut r).scale((1.0 / arch.time_dim as f64).sqrt()));
        p.push("time.b", Tensor::zeros(&[c3]));
        p.push("label_bot", rng::randn(&[arch.num_labels, c3], &mut r));
        p.push("label_mid", rng::randn(&[arch.num_labels, c2], &mut r));
        p.push("label_high", rng::randn(&[arch.num_labels, c1], &mut r));
        p.push("dec1.w", conv_init(&mut r, c2, 2 * c3));
        p.push("dec1.b", Tensor::zeros(&[c2]));
        p.push("dec2.w", conv_init(&mut r, c1, 2 * c2));
        p.push("dec2.b", Tensor::zeros(&[c1]));
        p.push("dec3.w", conv_init(&mut r, c1, 2 * c1));
        p.push("dec3.b", Tensor::zeros(&[c1]));
        p.push("out.w", conv_init(&mut r, 3, c1));
        p.push("out.b", Tensor::zeros(&[3]));
        Ok(DenoiserNet { arch, params: p })
    }

    /// Leaves for every parameter, in manifest order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.tensors().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
    }

    fn w(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    fn time_embedding(&self, t: usize) -> Tensor {
        let d = self.time_dim_half();
        let mut emb = vec![0.0; 2 * d];
        for i in 0..d {
            let freq = 10000f64.powf(-(i as f64) / d as f64);
            emb[2 * i] = (t as f64 * freq).sin();
            emb[2 * i + 1] = (t as f64 * freq).cos();
        }
        Tensor::from_vec(emb)
    }

    fn time_dim_half(&self) -> usize {
        self.arch.time_dim / 2
    }

    /// Forward pass on a tape. `w` are parameter vars from [`Self::bind`].
    pub fn forward(&self, tape: &mut Tape, x: Var, t: usize, label: usize, w: &[Var]) -> Result<Var> {
        if label >= self.arch.num_labels {
            return Err(Error::LabelOutOfRange { label, num_labels: self.arch.num_labels });
        }
        let expect = [3, self.arch.image, self.arch.image];
        if tape.value(x).shape() != expect {
            return Err(Error::shape(
                "denoiser",
                format!("{:?} vs configured {:?}", tape.value(x).shape(), expect),
            ));
        }
        let [c1, c2, c3] = self.arch.channels;

        let conv = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
            let wi = w[self.w(&format!("{name}.w"))];
            let bi = w[self.w(&format!("{name}.b"))];
            tape.conv2d(x, wi, bi, PAD)
        };

        let e1 = conv(tape, x, "enc1")?;
        let e1 = tape.gelu(e1)?;
        let p1 = tape.avg_pool2(e1)?;
        let e2 = conv(tape, p1, "enc2")?;
        let e2 = tape.gelu(e2)?;
        let p2 = tape.avg_pool2(e2)?;
        let e3 = conv(tape, p2, "enc3")?;
        let e3 = tape.gelu(e3)?;
        let p3 = tape.avg_pool2(e3)?;

        // bottleneck with time + label conditioning
        let bt = conv(tape, p3, "bot")?;
        let temb = tape.constant(self.time_embedding(t).reshaped(vec![1, self.arch.time_dim])?);
        let tproj = tape.matmul(temb, w[self.w("time.w")], false)?;
        let tproj = tape.add_row(tproj, w[self.w("time.b")])?;
        let tproj = tape.reshape(tproj, vec![c3])?;
        let bt = tape.add_chan(bt, tproj)?;
        let lbot = tape.slice(w[self.w("label_bot")], 0, label, 1)?;
        let lbot = tape.reshape(lbot, vec![c3])?;
        let bt = tape.add_chan(bt, lbot)?;
        let bt = tape.gelu(bt)?;

        let u1 = tape.upsample2(bt)?;
        let cat1 = tape.concat(&[u1, e3], 0)?;
        let d1 = conv(tape, cat1, "dec1")?;
        let lmid = tape.slice(w[self.w("label_mid")], 0, label, 1)?;
        let lmid = tape.reshape(lmid, vec![c2])?;
        let d1 = tape.add_chan(d1, lmid)?;
        let d1 = tape.gelu(d1)?;

        let u2 = tape.upsample2(d1)?;
        let cat2 = tape.concat(&[u2, e2], 0)?;
        let d2 = conv(tape, cat2, "dec2")?;
        let lhigh = tape.slice(w[self.w("label_high")], 0, label, 1)?;
        let lhigh = tape.reshape(lhigh, vec![c1])?;
        let d2 = tape.add_chan(d2, lhigh)?;
        let d2 = tape.gelu(d2)?;

        let u3 = tape.upsample2(d2)?;
        let cat3 = tape.concat(&[u3, e1], 0)?;
        let d3 = conv(tape, cat3, "dec3")?;
        let d3 = tape.gelu(d3)?;

        conv(tape, d3, "out")
    }

    pub fn to_checkpoint(&self, meta: TrainMeta) -> Checkpoint {
        Checkpoint {
            kind: "denoiser".into(),
            fields: vec![
                ("image".into(), self.arch.image.to_string()),
                ("c1".into(), self.arch.channels[0].to_string()),
                ("c2".into(), self.arch.channels[1].to_string()),
                ("c3".into(), self.arch.channels[2].to_string()),
                ("time_dim".into(), self.arch.time_dim.to_string()),
                ("num_labels".into(), self.arch.num_labels.to_string()),
            ],
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "denoiser" {
            return Err(Error::InvalidArgument(format!("expected a denoiser checkpoint, got kind {:?}", ckpt.kind)));
        }
        let arch = DenoiserArch {
            image: ckpt.field_usize("image")?,
            channels: [
                ckpt.field_usize("c1")?,
                ckpt.field_usize("c2")?,
                ckpt.field_usize("c3")?,
            ],
            time_dim: ckpt.field_usize("time_dim")?,
            num_labels: ckpt.field_usize("num_labels")?,
        };
        arch.validate()?;
        Ok(DenoiserNet { arch, params: ckpt.params.clone() })
    }
}

impl NoisePredictor for DenoiserNet {
    fn num_labels(&self) -> usize {
        self.arch.num_labels
    }

    fn image_shape(&self) -> [usize; 3] {
        [3, self.arch.image, self.arch.image]
    }

    fn predict(&self, x_t: &Tensor, t: usize, label: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let w = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, x, t, label, &w)?;
        Ok(tape.value(out).clone())
    }

    fn predict_on_tape(&self, tape: &mut Tape, x_t: Var, t: usize, label: usize) -> Result<Var> {
        let w = self.bind(tape, false);
        self.forward(tape, x_t, t, label, &w)
    }
}

/// Trains the denoiser with SGD + momentum on (image, label) pairs.
/// Reproducible: identical seeds give byte-identical weights.
pub fn train_denoiser(
    samples: &[(Tensor, usize)],
    num_labels: usize,
    sched: &NoiseSchedule,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(DenoiserNet, TrainMeta)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("train_denoiser: empty dataset".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("train_denoiser: steps must be >= 1".into()));
    }
    let shape = samples[0].0.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::shape("train_denoiser", format!("sample shape {:?}", shape)));
    }
    let arch = DenoiserArch::small(shape[1], num_labels);
    let mut net = DenoiserNet::init(arch, seed)?;
    let mut r = rng::stream_rng(seed, rng::STREAM_TRAIN);
    let mut velocity: Vec<Vec<f64>> = net.params.tensors().map(|t| vec![0.0; t.numel()]).collect();
    let batch = BATCH.min(samples.len());
    let mut last_loss = f64::NAN;

    for _ in 0..steps {
        let mut tape = Tape::new();
        let w = net.bind(&mut tape, true);
        let mut total: Option<Var> = None;
        for _ in 0..batch {
            let idx = rand::Rng::random_range(&mut r, 0..samples.len());
            let t = rand::Rng::random_range(&mut r, 0..sched.len());
            let (image, label) = &samples[idx];
            let eps = rng::randn(shape, &mut r);
            let loss = ddpm_loss(&mut tape, |tape, x_t| net.forward(tape, x_t, t, *label, &w), image, t, &eps, sched)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let total = tape.scale(total.expect("batch >= 1"), 1.0 / batch as f64)?;
        last_loss = tape.value(total).item()?;
        tape.backward(total)?;

        let mut updated = Vec::with_capacity(w.len());
        for ((var, tensor), vel) in w.iter().zip(net.params.tensors()).zip(velocity.iter_mut()) {
            match tape.grad(*var) {
                Some(g) => {
                    let new: Vec<f64> = tensor
                        .data()
                        .iter()
                        .zip(g.data())
                        .zip(vel.iter_mut())
                        .map(|((&wv, &gv), v)| {
                            *v = MOMENTUM * *v + gv;
                            wv - lr * *v
                        })
                        .collect();
                    updated.push(Tensor::new(tensor.shape().to_vec(), new)?);
                }
                None => updated.push(tensor.clone()),
            }
        }
        net.params.replace_all(updated);
    }

    let meta = TrainMeta { steps, final_loss: last_loss, seed };
    Ok((net, meta))
}

/// Mean DDPM loss of a predictor over a fixed evaluation set, with noise
/// drawn from the given seed. Used for held-out comparisons.
pub fn eval_loss(
    net: &DenoiserNet,
    samples: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::stream_rng(seed, rng::STREAM_TRAIN);
    let mut total = 0.0;
    for (image, label) in samples {
        let t = rand::Rng::random_range(&mut r, 0..sched.len());
        let eps = rng::randn(image.shape(), &mut r);
        let mut tape = Tape::new();
        let loss = ddpm_loss(
            &mut tape,
            |tape, x_t| net.predict_on_tape(tape, x_t, t, *label),
            image,
            t,
            &eps,
            sched,
        )?;
        total += tape.value(loss).item()?;
    }
    Ok(total / samples.len() as f64)
}
