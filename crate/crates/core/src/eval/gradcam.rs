//! Gradient-weighted class activation maps over the encoder output.

use crate::error::{Error, Result};
use crate::model::SsarModel;
use crate::nn::BnMode;
use crate::tensor::{backward_retain, ops, Scalar, Tensor};

/// Which logit the attribution explains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamTarget {
    /// The sequence-level class logit from the LSTM classifier, with every
    /// other frame held fixed.
    Sequence,
    /// The target frame's own embedding logit.
    Frame,
}

/// Attribution heatmap for one frame.
#[derive(Clone, Debug)]
pub struct CamMap {
    pub layer_h: usize,
    pub layer_w: usize,
    /// Layer-resolution map, min-max normalized into [0, 1].
    pub raw: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Bilinear upsample of `raw` to the input resolution.
    pub upsampled: Vec<f64>,
    pub target_class: usize,
    pub predicted_class: usize,
}

/// Channel-weighted, rectified, normalized attribution from a scalar score
/// and the activation tensor it depends on.
pub fn cam_from_score<T: Scalar>(
    activation: &Tensor<T>,
    score: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let [b, c, h, w] = match activation.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        other => {
            return Err(Error::Shape(format!(
                "activation must be [1, c, h, w], got {other:?}"
            )))
        }
    };
    if b != 1 {
        return Err(Error::Shape("attribution expects a single-frame activation".into()));
    }
    let grads = backward_retain(score, &[activation])?;
    let grad = grads
        .get(activation)
        .ok_or_else(|| Error::Numeric("score does not depend on the activation".into()))?;

    let plane = h * w;
    // Channel weights: spatial mean of the gradient.
    let mut weights = vec![0.0f64; c];
    for ci in 0..c {
        let mut acc = 0.0;
        for p in 0..plane {
            acc += grad[ci * plane + p].as_f64();
        }
        weights[ci] = acc / plane as f64;
    }
    let act = activation.data();
    let mut map = vec![0.0f64; plane];
    for p in 0..plane {
        let mut acc = 0.0;
        for ci in 0..c {
            acc += weights[ci] * act[ci * plane + p].as_f64();
        }
        map[p] = acc.max(0.0);
    }
    // Min-max normalization with a flat-map guard (all-zero activations
    // must yield an all-zero, NaN-free map).
    let mx = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mn = map.iter().cloned().fold(f64::INFINITY, f64::min);
    if mx > mn && mx > 0.0 {
        for v in map.iter_mut() {
            *v = (*v - mn) / (mx - mn);
        }
    } else {
        for v in map.iter_mut() {
            *v = 0.0;
        }
    }
    let up = bilinear_upsample(&map, h, w, out_h, out_w);
    Ok((map, up))
}

/// Standard bilinear resampling with half-pixel centers.
pub fn bilinear_upsample(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; dh * dw];
    let sy_scale = sh as f64 / dh as f64;
    let sx_scale = sw as f64 / dw as f64;
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out[y * dw + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Computes the attribution map of one frame of a sequence.
///
/// `frames` is the raw `[t, 3, h, w]` sequence in `[0, 1]`. The target
/// layer is the encoder output. For [`CamTarget::Sequence`], the gradient
/// of the chosen sequence logit flows through the selected frame only;
/// other frames contribute fixed embeddings.
pub fn grad_cam<T: Scalar>(
    model: &SsarModel<T>,
    frames: &Tensor<T>,
    frame_index: usize,
    target_class: Option<usize>,
    target: CamTarget,
) -> Result<CamMap> {
    let t_len = frames.shape()[0];
    if frame_index >= t_len {
        return Err(Error::InvalidArgument(format!(
            "frame index {frame_index} out of range for {t_len} frames"
        )));
    }
    let (h, w) = (model.config.input_h, model.config.input_w);
    let x = model.normalize_frames(frames)?;

    // Per-frame embeddings; only the target frame keeps its graph. To give
    // the target frame's activation a gradient path we re-root it as a
    // tracked leaf and rebuild the head on top of it.
    let mut emb_rows: Vec<Tensor<T>> = Vec::with_capacity(t_len);
    let mut activation: Option<Tensor<T>> = None;
    for t in 0..t_len {
        let frame = ops::narrow0(&x, t, 1)?;
        let (hidden, _) = model.encoder_forward(&frame, BnMode::Eval)?;
        if t == frame_index {
            let tracked =
                Tensor::leaf(hidden.shape().to_vec(), hidden.data().to_vec(), true);
            let (emb, _) = model.embed(&tracked, BnMode::Eval)?;
            activation = Some(tracked);
            emb_rows.push(emb);
        } else {
            let (emb, _) = model.embed(&hidden, BnMode::Eval)?;
            emb_rows.push(emb.detach());
        }
    }
    let activation = activation.expect("target frame processed");

    let (score, predicted, class) = match target {
        CamTarget::Sequence => {
            let emb = ops::concat0(&emb_rows)?;
            let seq = emb.reshape(&[t_len, 1, model.config.embedding_dim])?;
            let logits = model.classify_sequence(&seq, &[t_len])?;
            let predicted = argmax(logits.data());
            let class = target_class.unwrap_or(predicted);
            if class >= model.config.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "target class {class} out of range for {} classes",
                    model.config.num_classes
                )));
            }
            (ops::gather_scalar(&logits, class)?, predicted, class)
        }
        CamTarget::Frame => {
            let emb = &emb_rows[frame_index];
            let predicted = argmax(emb.data());
            let class = target_class.unwrap_or(predicted);
            if class >= model.config.embedding_dim {
                return Err(Error::InvalidArgument(format!(
                    "target class {class} out of range for embedding width {}",
                    model.config.embedding_dim
                )));
            }
            (ops::gather_scalar(emb, class)?, predicted, class)
        }
    };

    let (raw, upsampled) = cam_from_score(&activation, &score, h, w)?;
    // The retained backward also deposited gradients on model parameters;
    // evaluation must not leave state behind.
    model.zero_grads();
    let (layer_h, layer_w) = (activation.shape()[2], activation.shape()[3]);
    Ok(CamMap {
        layer_h,
        layer_w,
        raw,
        height: h,
        width: w,
        upsampled,
        target_class: class,
        predicted_class: predicted,
    })
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0usize;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Fraction of attribution mass inside an axis-aligned box (inclusive
/// bounds), over the upsampled map.
pub fn cam_mass_fraction(cam: &CamMap, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
    let mut inside = 0.0;
    let mut total = 0.0;
    for y in 0..cam.height {
        for x in 0..cam.width {
            let v = cam.upsampled[y * cam.width + x];
            total += v;
            if y >= y0 && y <= y1 && x >= x0 && x <= x1 {
                inside += v;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn channel_sum_head_recovers_channel_zero() {
        // Score = sum of channel 0: gradient is 1 on channel 0, 0 elsewhere,
        // so the map is channel 0's activation, rectified and normalized.
        let data: Vec<f64> = vec![
            0.5, -1.0, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0, // channel 0
            9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, // channel 1 (ignored)
        ];
        let act = Tensor::from_vec(&[1, 2, 2, 4], data).unwrap().requires_grad();
        let ch0 = act.reshape(&[2, 8]).unwrap();
        let score = ops::sum_all(&ops::narrow0(&ch0, 0, 1).unwrap());
        let (raw, _) = cam_from_score(&act, &score, 4, 8).unwrap();
        // relu([.5,-1,2,0,1,1,1,1]) normalized by min-max
        assert!((raw[2] - 1.0).abs() < 1e-12);
        assert_eq!(raw[1], 0.0);
        assert!((raw[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn all_zero_activation_yields_zero_map() {
        let act = Tensor::<f64>::zeros(&[1, 3, 2, 2]).requires_grad();
        let score = ops::sum_all(&act);
        let (raw, up) = cam_from_score(&act, &score, 4, 4).unwrap();
        assert!(raw.iter().all(|&v| v == 0.0));
        assert!(up.iter().all(|v| v.is_finite() && *v == 0.0));
    }

    #[test]
    fn upsample_preserves_constant_fields() {
        let src = vec![0.7; 6];
        let up = bilinear_upsample(&src, 2, 3, 8, 12);
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn scaling_classifier_weights_leaves_map_unchanged() {
        // Positive scaling of the score scales gradients uniformly; the
        // normalized map is identical.
        let data: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64) - 1.0).collect();
        let act = Tensor::from_vec(&[1, 2, 2, 4], data).unwrap().requires_grad();
        let flat = act.reshape(&[2, 8]).unwrap();
        let score = ops::sum_all(&ops::tanh(&ops::narrow0(&flat, 1, 1).unwrap()));
        let (a, _) = cam_from_score(&act, &score, 2, 4).unwrap();
        let scaled = ops::scale(&score, 7.5);
        let (b, _) = cam_from_score(&act, &scaled, 2, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
