//! Architecture configuration and shape planning.

use crate::error::{Error, Result};

/// Static architecture description. Two presets exist: `paper` is the
/// full-scale network (224x126 input, 83 classes), `tiny` is a desk-scale
/// variant with identical shape rules (96x64 input, widths / 4, 5 classes).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Encoder channel widths: stem, stage 1, stage 2, conv3, conv4.
    pub encoder_widths: [usize; 5],
    /// Decoder channel widths per transposed convolution; the last is the
    /// 2-channel mask output.
    pub decoder_widths: [usize; 5],
    /// Width of the first fully connected embedding layer.
    pub embed_hidden: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            input_h: 126,
            input_w: 224,
            num_classes: 83,
            embedding_dim: 83,
            lstm_hidden: 83,
            lstm_layers: 4,
            encoder_widths: [64, 64, 128, 128, 256],
            decoder_widths: [64, 32, 16, 8, 2],
            embed_hidden: 2048,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            norm_mean: [0.5, 0.5, 0.5],
            norm_std: [0.5, 0.5, 0.5],
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            input_h: 64,
            input_w: 96,
            num_classes: 5,
            embedding_dim: 5,
            lstm_hidden: 16,
            lstm_layers: 4,
            encoder_widths: [16, 16, 32, 32, 64],
            decoder_widths: [16, 8, 4, 2, 2],
            embed_hidden: 512,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            norm_mean: [0.5, 0.5, 0.5],
            norm_std: [0.5, 0.5, 0.5],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected 'paper' or 'tiny')"
            ))),
        }
    }

    /// Canonical textual form used as the checkpoint fingerprint.
    pub fn fingerprint(&self) -> String {
        fn join(vals: &[usize]) -> String {
            vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        }
        fn joinf(vals: &[f64]) -> String {
            vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
        }
        format!(
            "input_h={};input_w={};num_classes={};embedding_dim={};lstm_hidden={};lstm_layers={};encoder_widths={};decoder_widths={};embed_hidden={};bn_momentum={};bn_eps={};norm_mean={};norm_std={}",
            self.input_h,
            self.input_w,
            self.num_classes,
            self.embedding_dim,
            self.lstm_hidden,
            self.lstm_layers,
            join(&self.encoder_widths),
            join(&self.decoder_widths),
            self.embed_hidden,
            self.bn_momentum,
            self.bn_eps,
            joinf(&self.norm_mean),
            joinf(&self.norm_std),
        )
    }

    /// Parses a fingerprint back into a config.
    pub fn from_fingerprint(s: &str) -> Result<Self> {
        let mut cfg = Self::paper();
        for pair in s.split(';') {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad fingerprint entry '{pair}'")))?;
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad integer '{v}' for '{key}'")))
            };
            let parse_f64 = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad float '{v}' for '{key}'")))
            };
            let parse_usize5 = |v: &str| -> Result<[usize; 5]> {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| p.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("bad width list '{v}'")))?;
                parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("width list '{v}' must have 5 entries")))
            };
            let parse_f64x3 = |v: &str| -> Result<[f64; 3]> {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("bad float list '{v}'")))?;
                parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("float list '{v}' must have 3 entries")))
            };
            match key {
                "input_h" => cfg.input_h = parse_usize(value)?,
                "input_w" => cfg.input_w = parse_usize(value)?,
                "num_classes" => cfg.num_classes = parse_usize(value)?,
                "embedding_dim" => cfg.embedding_dim = parse_usize(value)?,
                "lstm_hidden" => cfg.lstm_hidden = parse_usize(value)?,
                "lstm_layers" => cfg.lstm_layers = parse_usize(value)?,
                "encoder_widths" => cfg.encoder_widths = parse_usize5(value)?,
                "decoder_widths" => cfg.decoder_widths = parse_usize5(value)?,
                "embed_hidden" => cfg.embed_hidden = parse_usize(value)?,
                "bn_momentum" => cfg.bn_momentum = parse_f64(value)?,
                "bn_eps" => cfg.bn_eps = parse_f64(value)?,
                "norm_mean" => cfg.norm_mean = parse_f64x3(value)?,
                "norm_std" => cfg.norm_std = parse_f64x3(value)?,
                other => return Err(Error::Config(format!("unknown fingerprint key '{other}'"))),
            }
        }
        Ok(cfg)
    }

    pub fn shape_plan(&self) -> Result<ShapePlan> {
        ShapePlan::derive(self)
    }
}

/// All derived spatial dimensions of the architecture. Building a plan
/// validates that every layer produces non-empty output and that the
/// decoder lands exactly back on the input size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    pub stem_hw: (usize, usize),
    pub pool_hw: (usize, usize),
    pub stage1_hw: (usize, usize),
    pub stage2_hw: (usize, usize),
    pub conv3_hw: (usize, usize),
    /// Encoder output (the hidden state) spatial dims.
    pub hidden_hw: (usize, usize),
    pub hidden_c: usize,
    /// Hidden state flattened size, the embedding head input width.
    pub flatten: usize,
    /// Output dims after each of the five transposed convolutions.
    pub decoder_hw: [(usize, usize); 5],
    /// Per-axis padding of the final transposed convolution, derived so the
    /// decoder output equals the input size exactly.
    pub final_deconv_pad: (usize, usize),
}

fn conv_out(input: usize, kernel: usize, stride: usize, pad: usize, path: &str) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Config(format!(
            "layer '{path}': input extent {input} too small for kernel {kernel}"
        )));
    }
    let out = (padded - kernel) / stride + 1;
    if out == 0 {
        return Err(Error::Config(format!("layer '{path}': output extent collapsed to 0")));
    }
    Ok(out)
}

impl ShapePlan {
    fn derive(cfg: &ModelConfig) -> Result<ShapePlan> {
        let conv_hw = |hw: (usize, usize), k, s, p, path: &str| -> Result<(usize, usize)> {
            Ok((conv_out(hw.0, k, s, p, path)?, conv_out(hw.1, k, s, p, path)?))
        };
        let input = (cfg.input_h, cfg.input_w);
        let stem = conv_hw(input, 7, 2, 3, "encoder.stem.conv")?;
        let pool = conv_hw(stem, 3, 2, 1, "encoder.stem.pool")?;
        let stage1 = conv_hw(pool, 3, 1, 1, "encoder.stage1")?;
        let stage2 = conv_hw(stage1, 3, 2, 1, "encoder.stage2.block0.conv1")?;
        let conv3 = conv_hw(stage2, 3, 2, 1, "encoder.conv3")?;
        let hidden = conv_hw(conv3, 3, 2, 1, "encoder.conv4")?;
        let flatten = cfg.encoder_widths[4] * hidden.0 * hidden.1;

        // Four doubling transposed convolutions (k=4, s=2, p=1), then a
        // final one whose padding is solved per axis to hit the input size.
        let mut decoder_hw = [(0usize, 0usize); 5];
        let mut cur = hidden;
        for (i, slot) in decoder_hw.iter_mut().enumerate().take(4) {
            cur = (cur.0 * 2, cur.1 * 2);
            *slot = cur;
            if cur.0 == 0 || cur.1 == 0 {
                return Err(Error::Config(format!(
                    "layer 'decoder.deconv{i}': output extent collapsed to 0"
                )));
            }
        }
        let solve_pad = |inp: usize, target: usize, axis: &str| -> Result<usize> {
            let reach = (inp - 1) * 2 + 4;
            // Padding above half the kernel would crop past the produced
            // content; such configs are geometrically meaningless.
            if reach < target || (reach - target) % 2 != 0 || (reach - target) / 2 > 2 {
                return Err(Error::Config(format!(
                    "layer 'decoder.deconv4': no valid {axis} padding maps {inp} to {target}"
                )));
            }
            Ok((reach - target) / 2)
        };
        let pad_h = solve_pad(cur.0, cfg.input_h, "height")?;
        let pad_w = solve_pad(cur.1, cfg.input_w, "width")?;
        decoder_hw[4] = (cfg.input_h, cfg.input_w);

        if cfg.decoder_widths[4] != 2 {
            return Err(Error::Config(format!(
                "decoder must end with 2 mask channels, got {}",
                cfg.decoder_widths[4]
            )));
        }
        if cfg.lstm_layers == 0 {
            return Err(Error::Config("lstm_layers must be >= 1".into()));
        }

        Ok(ShapePlan {
            stem_hw: stem,
            pool_hw: pool,
            stage1_hw: stage1,
            stage2_hw: stage2,
            conv3_hw: conv3,
            hidden_hw: hidden,
            hidden_c: cfg.encoder_widths[4],
            flatten,
            decoder_hw,
            final_deconv_pad: (pad_h, pad_w),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_shape_chain() {
        let plan = ModelConfig::paper().shape_plan().unwrap();
        assert_eq!(plan.stem_hw, (63, 112));
        assert_eq!(plan.pool_hw, (32, 56));
        assert_eq!(plan.stage1_hw, (32, 56));
        assert_eq!(plan.stage2_hw, (16, 28));
        assert_eq!(plan.conv3_hw, (8, 14));
        assert_eq!(plan.hidden_hw, (4, 7));
        assert_eq!(plan.flatten, 7168);
        assert_eq!(
            plan.decoder_hw,
            [(8, 14), (16, 28), (32, 56), (64, 112), (126, 224)]
        );
        assert_eq!(plan.final_deconv_pad, (2, 1));
    }

    #[test]
    fn tiny_preset_shape_chain() {
        let plan = ModelConfig::tiny().shape_plan().unwrap();
        assert_eq!(plan.hidden_hw, (2, 3));
        assert_eq!(plan.flatten, 64 * 2 * 3);
        assert_eq!(plan.decoder_hw[4], (64, 96));
        assert_eq!(plan.final_deconv_pad, (1, 1));
    }

    #[test]
    fn degenerate_input_rejected() {
        let mut cfg = ModelConfig::paper();
        cfg.input_h = 10;
        cfg.input_w = 10;
        let err = cfg.shape_plan().unwrap_err().to_string();
        assert!(err.contains("decoder.deconv4"), "{err}");
    }

    #[test]
    fn fingerprint_round_trip() {
        for cfg in [ModelConfig::paper(), ModelConfig::tiny()] {
            let fp = cfg.fingerprint();
            let back = ModelConfig::from_fingerprint(&fp).unwrap();
            assert_eq!(cfg, back);
            assert_eq!(fp, back.fingerprint());
        }
    }

    #[test]
    fn presets_differ() {
        assert_ne!(
            ModelConfig::paper().fingerprint(),
            ModelConfig::tiny().fingerprint()
        );
    }
}
