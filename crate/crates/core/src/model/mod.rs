//! The segmentation-supervised recognition network: a shared convolutional
//! encoder feeding a mask decoder, an embedding head, and an LSTM sequence
//! classifier.

mod config;
mod layers;

pub use config::{ModelConfig, ShapePlan};
pub use layers::{
    BatchNormLayer, Conv2dLayer, Deconv2dLayer, LinearLayer, ParamBlock,
};

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::nn::{self, BnMode, BnStatsUpdate, LstmWeights};
use crate::tensor::{ops, Scalar, Tensor};
use layers::{dispatch, join};

/// Pending running-statistic updates from train-mode forward passes, keyed
/// by batch-norm layer path. Forward passes never mutate the model; commit
/// with [`SsarModel::apply_stats`].
pub struct StatsUpdates<T: Scalar> {
    entries: Vec<(String, BnStatsUpdate<T>)>,
}

impl<T: Scalar> StatsUpdates<T> {
    pub fn none() -> Self {
        StatsUpdates { entries: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn merge(&mut self, other: StatsUpdates<T>) {
        self.entries.extend(other.entries);
    }

    fn push(&mut self, path: String, update: Option<BnStatsUpdate<T>>) {
        if let Some(u) = update {
            self.entries.push((path, u));
        }
    }
}

/// Result of running the recognition path over one frame sequence.
#[derive(Clone, Debug)]
pub struct Recognition {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Blocks

/// Two stacked 3x3 convolutions with a skip connection; the optional
/// downsample path carries stride-2 blocks.
struct BasicBlock<T: Scalar> {
    conv1: Conv2dLayer<T>,
    bn1: BatchNormLayer<T>,
    conv2: Conv2dLayer<T>,
    bn2: BatchNormLayer<T>,
    down: Option<(Conv2dLayer<T>, BatchNormLayer<T>)>,
}

impl<T: Scalar> BasicBlock<T> {
    fn forward(
        &self,
        x: &Tensor<T>,
        mode: BnMode,
        prefix: &str,
        stats: &mut StatsUpdates<T>,
    ) -> Result<Tensor<T>> {
        let (y, u) = self.bn1.forward2d(&self.conv1.forward(x)?, mode)?;
        stats.push(join(prefix, "bn1"), u);
        let y = ops::relu(&y);
        let (y, u) = self.bn2.forward2d(&self.conv2.forward(&y)?, mode)?;
        stats.push(join(prefix, "bn2"), u);
        let skip = match &self.down {
            Some((conv, bn)) => {
                let (s, u) = bn.forward2d(&conv.forward(x)?, mode)?;
                stats.push(join(prefix, "down.bn"), u);
                s
            }
            None => x.clone(),
        };
        Ok(ops::relu(&ops::add(&y, &skip)?))
    }
}

impl<T: Scalar> ParamBlock<T> for BasicBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.bn1.collect_params(&join(prefix, "bn1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        self.bn2.collect_params(&join(prefix, "bn2"), out);
        if let Some((conv, bn)) = &self.down {
            conv.collect_params(&join(prefix, "down.conv"), out);
            bn.collect_params(&join(prefix, "down.bn"), out);
        }
    }
    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.bn1.collect_buffers(&join(prefix, "bn1"), out);
        self.bn2.collect_buffers(&join(prefix, "bn2"), out);
        if let Some((_, bn)) = &self.down {
            bn.collect_buffers(&join(prefix, "down.bn"), out);
        }
    }
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        if let Some(rest) = path.strip_prefix("down.conv.") {
            return match &mut self.down {
                Some((conv, _)) => conv.set_tensor(rest, value),
                None => Err(Error::Checkpoint(format!(
                    "unknown tensor path '{path}' in identity-skip block"
                ))),
            };
        }
        if let Some(rest) = path.strip_prefix("down.bn.") {
            return match &mut self.down {
                Some((_, bn)) => bn.set_tensor(rest, value),
                None => Err(Error::Checkpoint(format!(
                    "unknown tensor path '{path}' in identity-skip block"
                ))),
            };
        }
        dispatch(
            path,
            &mut [
                ("conv1", &mut self.conv1),
                ("bn1", &mut self.bn1),
                ("conv2", &mut self.conv2),
                ("bn2", &mut self.bn2),
            ],
            value,
            "BasicBlock",
        )
    }
}

struct Encoder<T: Scalar> {
    stem_conv: Conv2dLayer<T>,
    stem_bn: BatchNormLayer<T>,
    stage1: Vec<BasicBlock<T>>,
    stage2: Vec<BasicBlock<T>>,
    conv3: Conv2dLayer<T>,
    bn3: BatchNormLayer<T>,
    conv4: Conv2dLayer<T>,
    bn4: BatchNormLayer<T>,
}

impl<T: Scalar> Encoder<T> {
    fn forward(&self, x: &Tensor<T>, mode: BnMode, stats: &mut StatsUpdates<T>) -> Result<Tensor<T>> {
        let (y, u) = self.stem_bn.forward2d(&self.stem_conv.forward(x)?, mode)?;
        stats.push("encoder.stem.bn".into(), u);
        let mut y = nn::maxpool2d(&ops::relu(&y), 3, 2, 1)?;
        for (i, block) in self.stage1.iter().enumerate() {
            y = block.forward(&y, mode, &format!("encoder.stage1.block{i}"), stats)?;
        }
        for (i, block) in self.stage2.iter().enumerate() {
            y = block.forward(&y, mode, &format!("encoder.stage2.block{i}"), stats)?;
        }
        let (y, u) = self.bn3.forward2d(&self.conv3.forward(&y)?, mode)?;
        stats.push("encoder.bn3".into(), u);
        let y = ops::relu(&y);
        let (y, u) = self.bn4.forward2d(&self.conv4.forward(&y)?, mode)?;
        stats.push("encoder.bn4".into(), u);
        Ok(ops::relu(&y))
    }
}

impl<T: Scalar> ParamBlock<T> for Encoder<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.stem_conv.collect_params(&join(prefix, "stem.conv"), out);
        self.stem_bn.collect_params(&join(prefix, "stem.bn"), out);
        for (i, b) in self.stage1.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("stage1.block{i}")), out);
        }
        for (i, b) in self.stage2.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("stage2.block{i}")), out);
        }
        self.conv3.collect_params(&join(prefix, "conv3"), out);
        self.bn3.collect_params(&join(prefix, "bn3"), out);
        self.conv4.collect_params(&join(prefix, "conv4"), out);
        self.bn4.collect_params(&join(prefix, "bn4"), out);
    }
    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.stem_bn.collect_buffers(&join(prefix, "stem.bn"), out);
        for (i, b) in self.stage1.iter().enumerate() {
            b.collect_buffers(&join(prefix, &format!("stage1.block{i}")), out);
        }
        for (i, b) in self.stage2.iter().enumerate() {
            b.collect_buffers(&join(prefix, &format!("stage2.block{i}")), out);
        }
        self.bn3.collect_buffers(&join(prefix, "bn3"), out);
        self.bn4.collect_buffers(&join(prefix, "bn4"), out);
    }
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        if let Some(rest) = path.strip_prefix("stem.conv.") {
            return self.stem_conv.set_tensor(rest, value);
        }
        if let Some(rest) = path.strip_prefix("stem.bn.") {
            return self.stem_bn.set_tensor(rest, value);
        }
        for (name, blocks) in [("stage1.", &mut self.stage1), ("stage2.", &mut self.stage2)] {
            if let Some(rest) = path.strip_prefix(name) {
                if let Some((head, tail)) = rest.split_once('.') {
                    for (i, block) in blocks.iter_mut().enumerate() {
                        if head == format!("block{i}") {
                            return block.set_tensor(tail, value);
                        }
                    }
                }
                return Err(Error::Checkpoint(format!(
                    "unknown tensor path '{path}' in Encoder"
                )));
            }
        }
        dispatch(
            path,
            &mut [
                ("conv3", &mut self.conv3),
                ("bn3", &mut self.bn3),
                ("conv4", &mut self.conv4),
                ("bn4", &mut self.bn4),
            ],
            value,
            "Encoder",
        )
    }
}

struct Decoder<T: Scalar> {
    deconvs: Vec<Deconv2dLayer<T>>,
}

impl<T: Scalar> Decoder<T> {
    fn forward(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = hidden.clone();
        let last = self.deconvs.len() - 1;
        for (i, layer) in self.deconvs.iter().enumerate() {
            y = layer.forward(&y)?;
            if i != last {
                y = ops::relu(&y);
            }
        }
        Ok(y)
    }
}

impl<T: Scalar> ParamBlock<T> for Decoder<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, d) in self.deconvs.iter().enumerate() {
            d.collect_params(&join(prefix, &format!("deconv{i}")), out);
        }
    }
    fn collect_buffers(&self, _prefix: &str, _out: &mut Vec<(String, Tensor<T>)>) {}
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        if let Some((head, tail)) = path.split_once('.') {
            for (i, d) in self.deconvs.iter_mut().enumerate() {
                if head == format!("deconv{i}") {
                    return d.set_tensor(tail, value);
                }
            }
        }
        Err(Error::Checkpoint(format!(
            "unknown tensor path '{path}' in Decoder"
        )))
    }
}

struct EmbedHead<T: Scalar> {
    fc1: LinearLayer<T>,
    bn: BatchNormLayer<T>,
    fc2: LinearLayer<T>,
    flatten: usize,
}

impl<T: Scalar> EmbedHead<T> {
    fn forward(&self, hidden: &Tensor<T>, mode: BnMode, stats: &mut StatsUpdates<T>) -> Result<Tensor<T>> {
        let batch = hidden.shape()[0];
        // Flatten order is row-major over (c, h, w).
        let flat = hidden.reshape(&[batch, self.flatten])?;
        let (y, u) = self.bn.forward1d(&self.fc1.forward(&flat)?, mode)?;
        stats.push("embed.bn".into(), u);
        self.fc2.forward(&ops::relu(&y))
    }
}

impl<T: Scalar> ParamBlock<T> for EmbedHead<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.bn.collect_params(&join(prefix, "bn"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }
    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.bn.collect_buffers(&join(prefix, "bn"), out);
    }
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        dispatch(
            path,
            &mut [
                ("fc1", &mut self.fc1),
                ("bn", &mut self.bn),
                ("fc2", &mut self.fc2),
            ],
            value,
            "EmbedHead",
        )
    }
}

/// Stacked LSTM plus the output projection; trainable on its own during the
/// embedding-sequence stage.
pub struct LstmClassifier<T: Scalar> {
    pub layers: Vec<LstmWeights<T>>,
    pub fc: LinearLayer<T>,
}

impl<T: Scalar> LstmClassifier<T> {
    /// Classifies `seq: [t, b, e]` using each item's true length.
    pub fn forward(&self, seq: &Tensor<T>, lengths: &[usize]) -> Result<Tensor<T>> {
        let out = nn::lstm_forward(seq, lengths, &self.layers)?;
        self.fc.forward(&out.final_hidden)
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }
}

impl<T: Scalar> ParamBlock<T> for LstmClassifier<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&join(prefix, &format!("layer{i}")), out);
        }
        self.fc.collect_params(&join(prefix, "fc"), out);
    }
    fn collect_buffers(&self, _prefix: &str, _out: &mut Vec<(String, Tensor<T>)>) {}
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        if let Some(rest) = path.strip_prefix("fc.") {
            return self.fc.set_tensor(rest, value);
        }
        if let Some((head, tail)) = path.split_once('.') {
            for (i, l) in self.layers.iter_mut().enumerate() {
                if head == format!("layer{i}") {
                    return l.set_tensor(tail, value);
                }
            }
        }
        Err(Error::Checkpoint(format!(
            "unknown tensor path '{path}' in LstmClassifier"
        )))
    }
}

// ---------------------------------------------------------------------------
// Full model

pub struct SsarModel<T: Scalar> {
    pub config: ModelConfig,
    pub plan: ShapePlan,
    encoder: Encoder<T>,
    decoder: Decoder<T>,
    embed_head: EmbedHead<T>,
    pub classifier: LstmClassifier<T>,
}

/// Builds a model with every trainable tensor initialized:
/// convolutions (and transposed convolutions) with scaled normal draws,
/// linear layers and LSTM input weights with variance-preserving normals,
/// LSTM recurrent weights orthogonal per gate block, all biases zero,
/// batch-norm gamma one / beta zero.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<SsarModel<T>> {
    let plan = config.shape_plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [w_stem, w_s1, w_s2, w_c3, w_c4] = config.encoder_widths;
    let mom = config.bn_momentum;
    let eps = config.bn_eps;

    let conv = |o: usize, c: usize, k: usize, s: usize, p: (usize, usize), rng: &mut ChaCha8Rng| -> Result<Conv2dLayer<T>> {
        Ok(Conv2dLayer {
            weight: nn::init_kaiming::<T, _>(&[o, c, k, k], rng)?.requires_grad(),
            bias: None,
            stride: s,
            padding: p,
        })
    };
    let block = |c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng| -> Result<BasicBlock<T>> {
        Ok(BasicBlock {
            conv1: conv(c_out, c_in, 3, stride, (1, 1), rng)?,
            bn1: BatchNormLayer::new(c_out, mom, eps),
            conv2: conv(c_out, c_out, 3, 1, (1, 1), rng)?,
            bn2: BatchNormLayer::new(c_out, mom, eps),
            down: if stride != 1 || c_in != c_out {
                Some((
                    conv(c_out, c_in, 1, stride, (0, 0), rng)?,
                    BatchNormLayer::new(c_out, mom, eps),
                ))
            } else {
                None
            },
        })
    };

    let encoder = Encoder {
        stem_conv: conv(w_stem, 3, 7, 2, (3, 3), &mut rng)?,
        stem_bn: BatchNormLayer::new(w_stem, mom, eps),
        stage1: vec![
            block(w_stem, w_s1, 1, &mut rng)?,
            block(w_s1, w_s1, 1, &mut rng)?,
        ],
        stage2: vec![
            block(w_s1, w_s2, 2, &mut rng)?,
            block(w_s2, w_s2, 1, &mut rng)?,
        ],
        conv3: conv(w_c3, w_s2, 3, 2, (1, 1), &mut rng)?,
        bn3: BatchNormLayer::new(w_c3, mom, eps),
        conv4: conv(w_c4, w_c3, 3, 2, (1, 1), &mut rng)?,
        bn4: BatchNormLayer::new(w_c4, mom, eps),
    };

    let mut deconvs = Vec::with_capacity(5);
    let mut prev_c = w_c4;
    for (i, &out_c) in config.decoder_widths.iter().enumerate() {
        let padding = if i == 4 { plan.final_deconv_pad } else { (1, 1) };
        deconvs.push(Deconv2dLayer {
            weight: nn::init_kaiming::<T, _>(&[prev_c, out_c, 4, 4], &mut rng)?.requires_grad(),
            bias: Some(nn::init_zeros::<T>(&[out_c])?.requires_grad()),
            stride: 2,
            padding,
        });
        prev_c = out_c;
    }
    let decoder = Decoder { deconvs };

    let linear_layer = |o: usize, i: usize, rng: &mut ChaCha8Rng| -> Result<LinearLayer<T>> {
        Ok(LinearLayer {
            weight: nn::init_xavier_normal::<T, _>(&[o, i], rng)?.requires_grad(),
            bias: Some(nn::init_zeros::<T>(&[o])?.requires_grad()),
        })
    };
    let embed_head = EmbedHead {
        fc1: linear_layer(config.embed_hidden, plan.flatten, &mut rng)?,
        bn: BatchNormLayer::new(config.embed_hidden, mom, eps),
        fc2: linear_layer(config.embedding_dim, config.embed_hidden, &mut rng)?,
        flatten: plan.flatten,
    };

    let classifier = build_classifier(config, &mut rng)?;

    Ok(SsarModel {
        config: config.clone(),
        plan,
        encoder,
        decoder,
        embed_head,
        classifier,
    })
}

/// Builds just the LSTM classifier (used when training it in isolation).
/// Recurrent weights are orthogonal per gate block, input weights are
/// variance-preserving normal, biases zero.
pub fn build_classifier<T: Scalar>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<LstmClassifier<T>> {
    let hidden = config.lstm_hidden;
    let mut layers = Vec::with_capacity(config.lstm_layers);
    for li in 0..config.lstm_layers {
        let input = if li == 0 { config.embedding_dim } else { hidden };
        let w_ih = nn::init_xavier_normal::<T, _>(&[4 * hidden, input], rng)?.requires_grad();
        // Stack one orthogonal block per gate.
        let mut w_hh_data = Vec::with_capacity(4 * hidden * hidden);
        for _gate in 0..4 {
            let blockw = nn::init_orthogonal::<T, _>(&[hidden, hidden], rng)?;
            w_hh_data.extend_from_slice(blockw.data());
        }
        let w_hh = Tensor::leaf(vec![4 * hidden, hidden], w_hh_data, true);
        layers.push(LstmWeights {
            w_ih,
            w_hh,
            b_ih: nn::init_zeros::<T>(&[4 * hidden])?.requires_grad(),
            b_hh: nn::init_zeros::<T>(&[4 * hidden])?.requires_grad(),
        });
    }
    let fc = LinearLayer {
        weight: nn::init_xavier_normal::<T, _>(&[config.num_classes, hidden], rng)?.requires_grad(),
        bias: Some(nn::init_zeros::<T>(&[config.num_classes])?.requires_grad()),
    };
    Ok(LstmClassifier { layers, fc })
}

impl<T: Scalar> SsarModel<T> {
    /// Scales raw `[0,1]` frames into normalized network input using the
    /// configured per-channel constants.
    pub fn normalize_frames(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = match frames.shape() {
            [a, b, c, d] => [*a, *b, *c, *d],
            other => {
                return Err(Error::Shape(format!(
                    "frames must be [n, 3, h, w], got {other:?}"
                )))
            }
        };
        if c != 3 || h != self.config.input_h || w != self.config.input_w {
            return Err(Error::Shape(format!(
                "frames {:?} do not match configured input 3x{}x{}",
                frames.shape(),
                self.config.input_h,
                self.config.input_w
            )));
        }
        let plane = h * w;
        let src = frames.data();
        let mut out = vec![T::zero(); src.len()];
        for ni in 0..n {
            for ci in 0..3 {
                let mean = T::of_f64(self.config.norm_mean[ci]);
                let inv_std = T::of_f64(1.0 / self.config.norm_std[ci]);
                let base = (ni * 3 + ci) * plane;
                for i in 0..plane {
                    out[base + i] = (src[base + i] - mean) * inv_std;
                }
            }
        }
        Ok(Tensor::leaf(frames.shape().to_vec(), out, false))
    }

    /// Encoder pass over normalized frames: `[b, 3, h, w]` to the hidden
    /// state `[b, c', h', w']`.
    pub fn encoder_forward(&self, images: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, StatsUpdates<T>)> {
        let mut stats = StatsUpdates::none();
        let hidden = self.encoder.forward(images, mode, &mut stats)?;
        Ok((hidden, stats))
    }

    /// Decoder pass producing per-pixel 2-channel mask logits at input size.
    pub fn decoder_forward(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        self.decoder.forward(hidden)
    }

    /// Embedding head: hidden state to a `[b, embedding_dim]` vector, which
    /// doubles as per-frame class logits during frame-supervised training.
    pub fn embed(&self, hidden: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, StatsUpdates<T>)> {
        let mut stats = StatsUpdates::none();
        let emb = self.embed_head.forward(hidden, mode, &mut stats)?;
        Ok((emb, stats))
    }

    /// Sequence classification from per-frame embeddings `[t, b, e]`.
    pub fn classify_sequence(&self, embeddings: &Tensor<T>, lengths: &[usize]) -> Result<Tensor<T>> {
        self.classifier.forward(embeddings, lengths)
    }

    /// Full recognition path over one raw frame sequence `[t, 3, h, w]`.
    /// The decoder never runs here.
    pub fn recognize(&self, frames: &Tensor<T>) -> Result<Recognition> {
        let logits = self.sequence_logits(frames)?;
        let k = logits.numel();
        let data = logits.data();
        let mut best = 0usize;
        for j in 1..k {
            if data[j] > data[best] {
                best = j;
            }
        }
        let probs = nn::softmax_rows(data, k);
        Ok(Recognition {
            label: best,
            probabilities: probs.iter().map(|p| p.as_f64()).collect(),
        })
    }

    /// Class logits `[1, k]` for one raw frame sequence.
    pub fn sequence_logits(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let t = frames.shape()[0];
        let normalized = self.normalize_frames(frames)?;
        let (hidden, _) = self.encoder_forward(&normalized, BnMode::Eval)?;
        let (emb, _) = self.embed(&hidden, BnMode::Eval)?;
        let seq = emb.reshape(&[t, 1, self.config.embedding_dim])?;
        self.classify_sequence(&seq, &[t])
    }

    /// Commits pending batch-norm running-statistic updates.
    pub fn apply_stats(&mut self, updates: &StatsUpdates<T>) -> Result<()> {
        for (path, update) in &updates.entries {
            let c = update.running_mean.len();
            self.set_tensor(
                &format!("{path}.running_mean"),
                Tensor::leaf(vec![c], update.running_mean.clone(), false),
            )?;
            self.set_tensor(
                &format!("{path}.running_var"),
                Tensor::leaf(vec![c], update.running_var.clone(), false),
            )?;
        }
        Ok(())
    }

    /// All trainable tensors in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    /// All non-trainable tensors (running statistics) in a fixed order.
    pub fn named_buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.collect_buffers("", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    /// L2 norm of accumulated gradients per top-level parameter group.
    pub fn grad_norms_by_group(&self) -> BTreeMap<String, f64> {
        let mut norms: BTreeMap<String, f64> = BTreeMap::new();
        for (path, t) in self.named_params() {
            let group = path.split('.').next().unwrap_or("").to_string();
            let entry = norms.entry(group).or_insert(0.0);
            if let Some(g) = t.grad() {
                for v in g {
                    let v = v.as_f64();
                    *entry += v * v;
                }
            }
        }
        for v in norms.values_mut() {
            *v = v.sqrt();
        }
        norms
    }
}

impl<T: Scalar> ParamBlock<T> for SsarModel<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.encoder.collect_params(&join(prefix, "encoder"), out);
        self.decoder.collect_params(&join(prefix, "decoder"), out);
        self.embed_head.collect_params(&join(prefix, "embed"), out);
        self.classifier.collect_params(&join(prefix, "lstm"), out);
    }
    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.encoder.collect_buffers(&join(prefix, "encoder"), out);
        self.decoder.collect_buffers(&join(prefix, "decoder"), out);
        self.embed_head.collect_buffers(&join(prefix, "embed"), out);
        self.classifier.collect_buffers(&join(prefix, "lstm"), out);
    }
    fn set_tensor(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        dispatch(
            path,
            &mut [
                ("encoder", &mut self.encoder),
                ("decoder", &mut self.decoder),
                ("embed", &mut self.embed_head),
                ("lstm", &mut self.classifier),
            ],
            value,
            "SsarModel",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_builds_with_table_dims() {
        let model: SsarModel<f32> = build_model(&ModelConfig::paper(), 7).unwrap();
        assert_eq!(model.plan.flatten, 7168);
        assert!(model.param_count() > 1_000_000);
        // Unique, stable paths.
        let params = model.named_params();
        let mut names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(before, names.len());
    }

    #[test]
    fn invalid_input_size_fails_with_layer_path() {
        let mut cfg = ModelConfig::tiny();
        cfg.input_h = 10;
        cfg.input_w = 10;
        let err = match build_model::<f32>(&cfg, 1) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected shape failure"),
        };
        assert!(err.contains("decoder.deconv4"), "{err}");
    }

    #[test]
    fn tiny_forward_shapes() {
        let cfg = ModelConfig::tiny();
        let model: SsarModel<f32> = build_model(&cfg, 3).unwrap();
        let frames = Tensor::<f32>::full(&[2, 3, 64, 96], 0.25);
        let x = model.normalize_frames(&frames).unwrap();
        let (hidden, _) = model.encoder_forward(&x, BnMode::Eval).unwrap();
        assert_eq!(hidden.shape(), &[2, 64, 2, 3]);
        let mask = model.decoder_forward(&hidden).unwrap();
        assert_eq!(mask.shape(), &[2, 2, 64, 96]);
        let (emb, _) = model.embed(&hidden, BnMode::Eval).unwrap();
        assert_eq!(emb.shape(), &[2, 5]);
    }

    #[test]
    fn set_tensor_rejects_unknown_and_misshapen() {
        let mut model: SsarModel<f32> = build_model(&ModelConfig::tiny(), 3).unwrap();
        let err = model
            .set_tensor("encoder.nope.weight", Tensor::zeros(&[1]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("unknown tensor path"));
        let err = model
            .set_tensor("embed.fc2.bias", Tensor::zeros(&[99]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("shape"));
    }

    #[test]
    fn recurrent_blocks_are_orthogonal() {
        let model: SsarModel<f64> = build_model(&ModelConfig::tiny(), 11).unwrap();
        let h = model.config.lstm_hidden;
        for layer in &model.classifier.layers {
            let w = layer.w_hh.data();
            for gate in 0..4 {
                for i in 0..h {
                    for j in 0..h {
                        let mut dot = 0.0;
                        for k in 0..h {
                            dot += w[(gate * h + i) * h + k] * w[(gate * h + j) * h + k];
                        }
                        let expected = if i == j { 1.0 } else { 0.0 };
                        assert!((dot - expected).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let model: SsarModel<f32> = build_model(&cfg, 5).unwrap();
        let data: Vec<f32> = (0..3 * 64 * 96).map(|i| ((i % 251) as f32) / 251.0).collect();
        let frames = Tensor::from_vec(&[1, 3, 64, 96], data).unwrap();
        let a = model.sequence_logits(&frames).unwrap();
        let b = model.sequence_logits(&frames).unwrap();
        let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}
