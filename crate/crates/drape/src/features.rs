//! Micro patch-transformer feature extractor.
//!
//! Plays the role of a pretrained ViT: per-patch key vectors from a chosen
//! attention block act as local structure descriptors, the final-layer class
//! token as a global appearance descriptor. Trained with a supervised
//! classification head on the synthetic classes.

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, ParamSet, TrainMeta};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const BATCH: usize = 8;
const MOMENTUM: f64 = 0.9;
const LR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractorArch {
    pub image: usize,
    pub patch: usize,
    pub embed: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub num_labels: usize,
    /// Block whose key projection is exposed as the structure descriptor.
    pub key_block: usize,
}

impl ExtractorArch {
    pub fn small(image: usize, num_labels: usize) -> Self {
        ExtractorArch { image, patch: 4, embed: 32, blocks: 2, mlp_hidden: 64, num_labels, key_block: 1 }
    }

    pub fn num_patches(&self) -> usize {
        (self.image / self.patch) * (self.image / self.patch)
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "extractor: image {} not divisible by patch {}",
                self.image, self.patch
            )));
        }
        if self.blocks == 0 || self.key_block >= self.blocks {
            return Err(Error::InvalidArgument(format!(
                "extractor: key_block {} out of range for {} blocks",
                self.key_block, self.blocks
            )));
        }
        if self.embed == 0 || self.num_labels == 0 {
            return Err(Error::InvalidArgument("extractor: embed and num_labels must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic per-image features: patch keys and the class token.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    /// [num_patches, embed] key vectors of the configured block.
    pub keys: Tensor,
    /// [embed] class-token embedding after the final layer norm.
    pub cls: Tensor,
}

pub struct FeatureNet {
    pub arch: ExtractorArch,
    pub params: ParamSet,
}

pub struct FeatureVars {
    pub keys: Var,
    pub cls: Var,
    pub logits: Var,
}

impl FeatureNet {
    pub fn init(arch: ExtractorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream_rng(seed, rng::STREAM_INIT);
        let d = arch.embed;
        let mut p = ParamSet::new();
        let lin = |r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize| {
            rng::randn(&[rows, cols], r).scale((1.0 / rows as f64).sqrt())
        };
        p.push("patch.w", lin(&mut r, 3 * arch.patch * arch.patch, d));
        p.push("patch.b", Tensor::zeros(&[d]));
        p.push("cls", rng::randn(&[1, d], &mut r).scale(0.02));
        p.push("pos", rng::randn(&[arch.num_patches() + 1, d], &mut r).scale(0.02));
        for b in 0..arch.blocks {
            p.push(&format!("b{b}.ln1.g"), Tensor::filled(&[d], 1.0));
            p.push(&format!("b{b}.ln1.b"), Tensor::zeros(&[d]));
            p.push(&format!("b{b}.wq"), lin(&mut r, d, d));
            p.push(&format!("b{b}.bq"), Tensor::zeros(&[d]));
            p.push(&format!("b{b}.wk"), lin(&mut r, d, d));
            p.push(&format!("b{b}.bk"), Tensor::zeros(&[d]));
            p.push(&format!("b{b}.wv"), lin(&mut r, d, d));
            p.push(&format!("b{b}.bv"), Tensor::zeros(&[d]));
            p.push(&format!("b{b}.wo"), lin(&mut r, d, d));
            p.push(&format!("b{b}.bo"), Tensor::zeros(&[d]));
            p.push(&format!("b{b}.ln2.g"), Tensor::filled(&[d], 1.0));
            p.push(&format!("b{b}.ln2.b"), Tensor::zeros(&[d]));
            p.push(&format!("b{b}.mlp1.w"), lin(&mut r, d, arch.mlp_hidden));
            p.push(&format!("b{b}.mlp1.b"), Tensor::zeros(&[arch.mlp_hidden]));
            p.push(&format!("b{b}.mlp2.w"), lin(&mut r, arch.mlp_hidden, d));
            p.push(&format!("b{b}.mlp2.b"), Tensor::zeros(&[d]));
        }
        p.push("final.ln.g", Tensor::filled(&[d], 1.0));
        p.push("final.ln.b", Tensor::zeros(&[d]));
        p.push("head.w", lin(&mut r, d, arch.num_labels));
        p.push("head.b", Tensor::zeros(&[arch.num_labels]));
        Ok(FeatureNet { arch, params: p })
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.tensors().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
    }

    fn w(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    /// Transformer forward on a tape. Exposes the key projection of the
    /// configured block, the final class token, and classifier logits.
    pub fn forward(&self, tape: &mut Tape, image: Var, w: &[Var]) -> Result<FeatureVars> {
        let expect = [3, self.arch.image, self.arch.image];
        if tape.value(image).shape() != expect {
            return Err(Error::shape(
                "extractor",
                format!("{:?} vs configured {:?}", tape.value(image).shape(), expect),
            ));
        }
        let d = self.arch.embed;
        let n_tokens = self.arch.num_patches() + 1;
        let scale = 1.0 / (d as f64).sqrt();

        let linear = |tape: &mut Tape, x: Var, wn: &str, bn: &str| -> Result<Var> {
            let m = tape.matmul(x, w[self.w(wn)], false)?;
            tape.add_row(m, w[self.w(bn)])
        };

        let patches = tape.patchify(image, self.arch.patch)?;
        let tokens = linear(tape, patches, "patch.w", "patch.b")?;
        let tokens = tape.concat(&[w[self.w("cls")], tokens], 0)?;
        let mut x = tape.add(tokens, w[self.w("pos")])?;

        let mut keys = None;
        for b in 0..self.arch.blocks {
            let h = tape.layer_norm(x, w[self.w(&format!("b{b}.ln1.g"))], w[self.w(&format!("b{b}.ln1.b"))], LN_EPS)?;
            let q = linear(tape, h, &format!("b{b}.wq"), &format!("b{b}.bq"))?;
            let k = linear(tape, h, &format!("b{b}.wk"), &format!("b{b}.bk"))?;
            let v = linear(tape, h, &format!("b{b}.wv"), &format!("b{b}.bv"))?;
            if b == self.arch.key_block {
                keys = Some(tape.slice(k, 0, 1, n_tokens - 1)?);
            }
            let scores = tape.matmul(q, k, true)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores)?;
            let ctx = tape.matmul(attn, v, false)?;
            let o = linear(tape, ctx, &format!("b{b}.wo"), &format!("b{b}.bo"))?;
            x = tape.add(x, o)?;

            let h2 = tape.layer_norm(x, w[self.w(&format!("b{b}.ln2.g"))], w[self.w(&format!("b{b}.ln2.b"))], LN_EPS)?;
            let m1 = linear(tape, h2, &format!("b{b}.mlp1.w"), &format!("b{b}.mlp1.b"))?;
            let m1 = tape.gelu(m1)?;
            let m2 = linear(tape, m1, &format!("b{b}.mlp2.w"), &format!("b{b}.mlp2.b"))?;
            x = tape.add(x, m2)?;
        }

        let normed = tape.layer_norm(x, w[self.w("final.ln.g")], w[self.w("final.ln.b")], LN_EPS)?;
        let cls_row = tape.slice(normed, 0, 0, 1)?;
        let logits = linear(tape, cls_row, "head.w", "head.b")?;
        let logits = tape.reshape(logits, vec![self.arch.num_labels])?;
        let cls = tape.reshape(cls_row, vec![d])?;
        Ok(FeatureVars { keys: keys.expect("key_block validated"), cls, logits })
    }

    /// Untracked feature extraction.
    pub fn extract(&self, image: &Tensor) -> Result<FeatureSet> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let w = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, x, &w)?;
        Ok(FeatureSet { keys: tape.value(out.keys).clone(), cls: tape.value(out.cls).clone() })
    }

    /// Classifier-head logits for an image.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let w = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, x, &w)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn to_checkpoint(&self, meta: TrainMeta) -> Checkpoint {
        Checkpoint {
            kind: "extractor".into(),
            fields: vec![
                ("image".into(), self.arch.image.to_string()),
                ("patch".into(), self.arch.patch.to_string()),
                ("embed".into(), self.arch.embed.to_string()),
                ("blocks".into(), self.arch.blocks.to_string()),
                ("mlp_hidden".into(), self.arch.mlp_hidden.to_string()),
                ("num_labels".into(), self.arch.num_labels.to_string()),
                ("key_block".into(), self.arch.key_block.to_string()),
            ],
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "extractor" {
            return Err(Error::InvalidArgument(format!("expected an extractor checkpoint, got kind {:?}", ckpt.kind)));
        }
        let arch = ExtractorArch {
            image: ckpt.field_usize("image")?,
            patch: ckpt.field_usize("patch")?,
            embed: ckpt.field_usize("embed")?,
            blocks: ckpt.field_usize("blocks")?,
            mlp_hidden: ckpt.field_usize("mlp_hidden")?,
            num_labels: ckpt.field_usize("num_labels")?,
            key_block: ckpt.field_usize("key_block")?,
        };
        arch.validate()?;
        Ok(FeatureNet { arch, params: ckpt.params.clone() })
    }
}

/// Cross-entropy of the classifier head, on a tape.
pub fn class_loss_on_tape(net: &FeatureNet, tape: &mut Tape, image: Var, label: usize, w: &[Var]) -> Result<Var> {
    if label >= net.arch.num_labels {
        return Err(Error::LabelOutOfRange { label, num_labels: net.arch.num_labels });
    }
    let out = net.forward(tape, image, w)?;
    let row = tape.reshape(out.logits, vec![1, net.arch.num_labels])?;
    let probs = tape.softmax(row)?;
    let logp = tape.log(probs)?;
    let picked = tape.slice(logp, 1, label, 1)?;
    let picked = tape.reshape(picked, vec![1])?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0)
}

/// Supervised training of the extractor + head; reproducible given the seed.
pub fn train_extractor(
    samples: &[(Tensor, usize)],
    num_labels: usize,
    steps: usize,
    seed: u64,
) -> Result<(FeatureNet, TrainMeta)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("train_extractor: empty dataset".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("train_extractor: steps must be >= 1".into()));
    }
    let shape = samples[0].0.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::shape("train_extractor", format!("sample shape {:?}", shape)));
    }
    let arch = ExtractorArch::small(shape[1], num_labels);
    let mut net = FeatureNet::init(arch, seed)?;
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
            let (image, label) = &samples[idx];
            let x = tape.constant(image.clone());
            let loss = class_loss_on_tape(&net, &mut tape, x, *label, &w)?;
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
                            wv - LR * *v
                        })
                        .collect();
                    updated.push(Tensor::new(tensor.shape().to_vec(), new)?);
                }
                None => updated.push(tensor.clone()),
            }
        }
        net.params.replace_all(updated);
    }

    Ok((net, TrainMeta { steps, final_loss: last_loss, seed }))
}

/// Fraction of samples whose argmax logit matches the label.
pub fn accuracy(net: &FeatureNet, samples: &[(Tensor, usize)]) -> Result<f64> {
    let mut hits = 0usize;
    for (image, label) in samples {
        let logits = net.logits(image)?;
        let argmax = logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if argmax == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
