//! Synthetic gesture-sequence generator.
//!
//! Each class is a distinct trajectory of a bright elliptical "hand" blob
//! over a textured background: left-right sweep, up-down sweep, circle,
//! diagonal, zig-zag. Walking-scenario sequences add global background
//! drift; the distractor variant adds class-uncorrelated moving background
//! objects. Ground-truth masks equal the blob support, and emitted depth
//! maps place the blob in a near window with sub-threshold noise specks so
//! the depth-to-mask path reproduces the masks exactly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{Manifest, Scenario, SequenceRecord, Split};
use super::png;
use super::split::split_sequences;
use crate::error::{Error, Result};

pub const BLOB_DEPTH_MM: u16 = 400;
pub const SPECK_DEPTH_MM: u16 = 350;
pub const DISTRACTOR_DEPTH_MM: u16 = 1200;
pub const BACKGROUND_DEPTH_MM: u16 = 1500;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub seqs_per_class: usize,
    pub len_range: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub distractors: bool,
    /// Fraction of sequences generated with background drift and tagged
    /// as the walking scenario.
    pub walking_fraction: f64,
    /// Split ratios written into the manifest (sequence granularity).
    pub ratios: [f64; 3],
    pub emit_depth: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 5,
            seqs_per_class: 20,
            len_range: (8, 20),
            height: 64,
            width: 96,
            seed: 7,
            distractors: false,
            walking_fraction: 0.5,
            ratios: [0.6, 0.2, 0.2],
            emit_depth: true,
        }
    }
}

struct Distractor {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w: usize,
    h: usize,
    color: [u8; 3],
}

fn triangle_wave(x: f64) -> f64 {
    1.0 - 4.0 * ((x - x.floor()) - 0.5).abs()
}

fn lerp(a: f64, b: f64, u: f64) -> f64 {
    a + (b - a) * u
}

/// Generates the dataset under `out_dir` and returns the saved manifest.
pub fn synth_generate(out_dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    if cfg.num_classes == 0 || cfg.num_classes > 5 {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in 1..=5 (one trajectory kind per class), got {}",
            cfg.num_classes
        )));
    }
    if cfg.len_range.0 < 2 || cfg.len_range.0 > cfg.len_range.1 {
        return Err(Error::InvalidArgument(format!(
            "bad length range {:?}",
            cfg.len_range
        )));
    }
    if cfg.seqs_per_class == 0 {
        return Err(Error::InvalidArgument("seqs_per_class must be >= 1".into()));
    }
    let (h, w) = (cfg.height, cfg.width);
    if h < 32 || w < 32 {
        return Err(Error::InvalidArgument(format!(
            "image size {h}x{w} too small for blob rendering"
        )));
    }

    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut global = 0usize;
    for class in 0..cfg.num_classes {
        for _ in 0..cfg.seqs_per_class {
            let row = generate_sequence(out_dir, cfg, class, global)?;
            rows.push(row);
            global += 1;
        }
    }

    let mut manifest = Manifest::new(rows, out_dir.to_path_buf());
    split_sequences(&mut manifest, cfg.ratios, cfg.seed)?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

fn generate_sequence(
    out_dir: &Path,
    cfg: &SynthConfig,
    class: usize,
    global: usize,
) -> Result<SequenceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ (global as u64)
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(0xd1b5_4a32_d192_ed03),
    );
    let (h, w) = (cfg.height, cfg.width);
    let t_len = rng.gen_range(cfg.len_range.0..=cfg.len_range.1);
    let walking = rng.gen::<f64>() < cfg.walking_fraction;

    // Blob geometry, scaled with image size.
    let scale = (h.min(w) as f64) / 64.0;
    let rx = rng.gen_range(7.0 * scale..10.0 * scale);
    let ry = rng.gen_range(5.0 * scale..8.0 * scale);
    let margin = rx.max(ry).ceil() + 3.0;

    // Background texture with a border wide enough for drift cropping.
    let dpad = 24usize;
    let (tex_h, tex_w) = (h + 2 * dpad, w + 2 * dpad);
    let base = [
        rng.gen_range(40u8..90),
        rng.gen_range(40u8..90),
        rng.gen_range(40u8..90),
    ];
    let mut tex = vec![0u8; tex_h * tex_w * 3];
    for p in 0..tex_h * tex_w {
        for c in 0..3 {
            let noise: i16 = rng.gen_range(-20i16..=20);
            tex[p * 3 + c] = (base[c] as i16 + noise).clamp(0, 255) as u8;
        }
    }
    let (drift_x, drift_y) = if walking {
        let mut v = || {
            let speed: f64 = rng.gen_range(0.4..1.1);
            if rng.gen::<bool>() {
                speed
            } else {
                -speed
            }
        };
        (v(), v())
    } else {
        (0.0, 0.0)
    };

    let blob_color = [
        (215i16 + rng.gen_range(-20i16..=20)).clamp(0, 255) as u8,
        (190i16 + rng.gen_range(-20i16..=20)).clamp(0, 255) as u8,
        (170i16 + rng.gen_range(-20i16..=20)).clamp(0, 255) as u8,
    ];

    // Trajectory bounds and per-sequence jitter.
    let (x0, x1) = (margin, w as f64 - margin);
    let (y0, y1) = (margin, h as f64 - margin);
    let cx_base = rng.gen_range(x0 + (x1 - x0) * 0.25..x0 + (x1 - x0) * 0.75);
    let cy_base = rng.gen_range(y0 + (y1 - y0) * 0.25..y0 + (y1 - y0) * 0.75);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let radius = 0.8 * ((h.min(w) as f64) / 2.0 - margin);
    let zig_amp = (y1 - y0) * 0.35;
    let zig_cycles = 3.0;

    let center_at = |t: usize| -> (f64, f64) {
        let u = t as f64 / (t_len - 1) as f64;
        match class {
            0 => (lerp(x0, x1, u), cy_base),
            1 => (cx_base, lerp(y0, y1, u)),
            2 => {
                let a = phase + std::f64::consts::TAU * u;
                (
                    w as f64 / 2.0 + radius * a.cos(),
                    h as f64 / 2.0 + radius * a.sin(),
                )
            }
            3 => (lerp(x0, x1, u), lerp(y0, y1, u)),
            _ => (
                lerp(x0, x1, u),
                (y0 + y1) / 2.0 + zig_amp * triangle_wave(phase / 10.0 + u * zig_cycles),
            ),
        }
    };

    let mut distractors: Vec<Distractor> = Vec::new();
    if cfg.distractors {
        for _ in 0..2 {
            distractors.push(Distractor {
                x: rng.gen_range(0.0..w as f64 - 14.0),
                y: rng.gen_range(0.0..h as f64 - 14.0),
                vx: rng.gen_range(-2.5..2.5),
                vy: rng.gen_range(-2.5..2.5),
                w: rng.gen_range(6..14),
                h: rng.gen_range(6..14),
                color: [
                    rng.gen_range(70u8..150),
                    rng.gen_range(70u8..150),
                    rng.gen_range(70u8..150),
                ],
            });
        }
    }

    // Noise specks for the depth channel: small near-depth clusters far
    // from any blob position, below the area filter.
    let mut specks: Vec<(usize, usize, usize)> = Vec::new(); // (x, y, size)
    if cfg.emit_depth {
        let n_specks = rng.gen_range(1..=3);
        let mut attempts = 0;
        while specks.len() < n_specks && attempts < 200 {
            attempts += 1;
            let sx = rng.gen_range(2..w.saturating_sub(4));
            let sy = rng.gen_range(2..h.saturating_sub(4));
            let far_enough = (0..t_len).all(|t| {
                let (cx, cy) = center_at(t);
                let d2 = (sx as f64 - cx).powi(2) + (sy as f64 - cy).powi(2);
                d2.sqrt() > rx.max(ry) + 8.0
            });
            if far_enough {
                specks.push((sx, sy, rng.gen_range(1..=2)));
            }
        }
    }

    let seq_id = format!("c{class}_s{global:03}");
    let frames_rel = Path::new("frames").join(&seq_id);
    let masks_rel = Path::new("masks").join(&seq_id);
    let depth_rel = Path::new("depth").join(&seq_id);
    std::fs::create_dir_all(out_dir.join(&frames_rel))?;
    std::fs::create_dir_all(out_dir.join(&masks_rel))?;
    if cfg.emit_depth {
        std::fs::create_dir_all(out_dir.join(&depth_rel))?;
    }

    let mut dist_states: Vec<(f64, f64)> = distractors.iter().map(|d| (d.x, d.y)).collect();
    for t in 0..t_len {
        // Background crop with accumulated drift.
        let ox = (dpad as f64 + drift_x * t as f64).round().clamp(0.0, 2.0 * dpad as f64) as usize;
        let oy = (dpad as f64 + drift_y * t as f64).round().clamp(0.0, 2.0 * dpad as f64) as usize;
        let mut rgb = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let src = ((y + oy) * tex_w + (x + ox)) * 3;
                let dst = (y * w + x) * 3;
                rgb[dst..dst + 3].copy_from_slice(&tex[src..src + 3]);
            }
        }
        let mut depth = vec![BACKGROUND_DEPTH_MM; h * w];

        // Distractors move by a per-frame random walk around their velocity.
        for (d, state) in distractors.iter().zip(dist_states.iter_mut()) {
            state.0 = (state.0 + d.vx).rem_euclid((w - d.w) as f64);
            state.1 = (state.1 + d.vy).rem_euclid((h - d.h) as f64);
            let (dx, dy) = (state.0 as usize, state.1 as usize);
            for y in dy..(dy + d.h).min(h) {
                for x in dx..(dx + d.w).min(w) {
                    let p = y * w + x;
                    rgb[p * 3..p * 3 + 3].copy_from_slice(&d.color);
                    depth[p] = DISTRACTOR_DEPTH_MM;
                }
            }
        }

        // The hand blob, drawn last so nothing occludes it.
        let (cx, cy) = center_at(t);
        let mut mask = vec![0u8; h * w];
        let y_lo = (cy - ry).floor().max(0.0) as usize;
        let y_hi = ((cy + ry).ceil() as usize).min(h - 1);
        let x_lo = (cx - rx).floor().max(0.0) as usize;
        let x_hi = ((cx + rx).ceil() as usize).min(w - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let nx = (x as f64 - cx) / rx;
                let ny = (y as f64 - cy) / ry;
                if nx * nx + ny * ny <= 1.0 {
                    let p = y * w + x;
                    mask[p] = 1;
                    depth[p] = BLOB_DEPTH_MM;
                    let shade = ((x * 3 + y * 5) % 7) as i16 - 3;
                    for c in 0..3 {
                        rgb[p * 3 + c] = (blob_color[c] as i16 + shade).clamp(0, 255) as u8;
                    }
                }
            }
        }

        for &(sx, sy, size) in &specks {
            for dy in 0..size {
                for dx in 0..size {
                    let p = (sy + dy).min(h - 1) * w + (sx + dx).min(w - 1);
                    depth[p] = SPECK_DEPTH_MM;
                }
            }
        }

        png::save_rgb(&out_dir.join(&frames_rel).join(format!("frame_{t:04}.png")), w, h, &rgb)?;
        png::save_mask(&out_dir.join(&masks_rel).join(format!("mask_{t:04}.png")), w, h, &mask)?;
        if cfg.emit_depth {
            png::save_depth(&out_dir.join(&depth_rel).join(format!("depth_{t:04}.png")), w, h, &depth)?;
        }
    }

    Ok(SequenceRecord {
        sequence_id: seq_id,
        subject: format!("subj{}", global % 7),
        scenario: if walking { Scenario::Walking } else { Scenario::Stationary },
        label: class,
        split: Split::Unassigned,
        frames_dir: frames_rel,
        depth_dir: if cfg.emit_depth { Some(depth_rel) } else { None },
        mask_dir: Some(masks_rel),
        num_frames: t_len,
    })
}
