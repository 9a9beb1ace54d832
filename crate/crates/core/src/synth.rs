//! Synthetic tracking sequences: a textured rectangle moving over a static
//! noise background, with optional appearance drift, look-alike distractors,
//! and occlusion windows. Everything is keyed off one seed, so a sequence is
//! a pure function of (config, seed).

use std::path::Path;

use crate::error::{Error, Result};
use crate::head::BBox;
use crate::img::Image;
use crate::rng::Rng;

const DOM_BG: u64 = 1;
const DOM_BASE: u64 = 2;
const DOM_TEX: u64 = 3;
const DOM_JIT: u64 = 4;
const DOM_DIST: u64 = 5;
const DOM_START: u64 = 6;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub target_w: f64,
    pub target_h: f64,
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Std of the per-frame positional jitter in pixels.
    pub jitter: f64,
    /// Per-frame color drift rate toward the complementary palette.
    pub hue_drift: f64,
    /// Per-frame relative size change, capped so the target stays in frame.
    pub scale_drift: f64,
    pub distractors: usize,
    /// (start_frame, duration) windows during which the target's upper half
    /// is covered by a gray occluder.
    pub occlusions: Vec<(usize, usize)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 60,
            height: 128,
            width: 128,
            target_w: 28.0,
            target_h: 20.0,
            velocity: (1.5, 1.0),
            jitter: 0.5,
            hue_drift: 0.0,
            scale_drift: 0.0,
            distractors: 0,
            occlusions: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height < 16 || self.width < 16 {
            return Err(Error::Config("sequence too small".into()));
        }
        for v in [
            self.target_w,
            self.target_h,
            self.velocity.0,
            self.velocity.1,
            self.jitter,
            self.hue_drift,
            self.scale_drift,
        ] {
            if !v.is_finite() {
                return Err(Error::Config("non-finite sequence parameter".into()));
            }
        }
        if self.target_w < 4.0 || self.target_h < 4.0 {
            return Err(Error::Config("target smaller than 4 px".into()));
        }
        Ok(())
    }
}

fn quant(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Base palette in [0.1, 0.4] so the complementary drift palette is always
/// visibly different.
fn base_color(rng: &Rng, tag: u64) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (i, slot) in c.iter_mut().enumerate() {
        *slot = 0.1 + 0.3 * rng.uniform_at(&[DOM_BASE, tag, i as u64]);
    }
    c
}

/// Texture value for canonical target cell (i, j) at drift mix `d` in [0,1].
fn texture(rng: &Rng, tag: u64, base: [f64; 3], i: usize, j: usize, d: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let grain =
            0.6 + 0.4 * rng.uniform_at(&[DOM_TEX, tag, (i / 3) as u64, (j / 3) as u64, c as u64]);
        let from = base[c];
        let to = 1.0 - base[c];
        *slot = quant((from * (1.0 - d) + to * d) * grain);
    }
    out
}

struct Sprite {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

fn paint_sprite(frame: &mut Image, rng: &Rng, tag: u64, base: [f64; 3], s: &Sprite, d: f64) {
    let x0 = s.x.round() as isize;
    let y0 = s.y.round() as isize;
    let w = s.w.round() as isize;
    let h = s.h.round() as isize;
    for dy in 0..h {
        for dx in 0..w {
            let (y, x) = (y0 + dy, x0 + dx);
            if y < 0 || x < 0 || y >= frame.height() as isize || x >= frame.width() as isize {
                continue;
            }
            let px = texture(rng, tag, base, dy as usize, dx as usize, d);
            for c in 0..3 {
                frame.set(c, y as usize, x as usize, px[c]);
            }
        }
    }
}

/// Generate one deterministic sequence. Ground truth is the painted integer
/// rectangle, in pixel units with the top-left corner convention folded into
/// a center-size box.
pub fn gen_sequence(cfg: &SynthConfig, seed: u64) -> Result<(Vec<Image>, Vec<BBox>)> {
    cfg.validate()?;
    let rng = Rng::new(seed);
    let (fh, fw) = (cfg.height as f64, cfg.width as f64);

    // static background, quantized at creation
    let mut bg = Image::blank(cfg.height, cfg.width, [0.0; 3]);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            for c in 0..3 {
                let v = 0.45 + 0.25 * rng.uniform_at(&[DOM_BG, c as u64, y as u64, x as u64]);
                bg.set(c, y, x, quant(v));
            }
        }
    }

    let target_base = base_color(&rng, 0);
    let mut cx = fw / 2.0 + (rng.uniform_at(&[DOM_START, 0]) - 0.5) * fw * 0.2;
    let mut cy = fh / 2.0 + (rng.uniform_at(&[DOM_START, 1]) - 0.5) * fh * 0.2;
    let (mut vx, mut vy) = cfg.velocity;

    let mut dist: Vec<(Sprite, [f64; 3])> = Vec::new();
    for k in 0..cfg.distractors {
        let kk = k as u64;
        let w = cfg.target_w * (0.8 + 0.4 * rng.uniform_at(&[DOM_DIST, kk, 0]));
        let h = cfg.target_h * (0.8 + 0.4 * rng.uniform_at(&[DOM_DIST, kk, 1]));
        let x = rng.uniform_at(&[DOM_DIST, kk, 2]) * (fw - w);
        let y = rng.uniform_at(&[DOM_DIST, kk, 3]) * (fh - h);
        let mut color = target_base;
        for (c, slot) in color.iter_mut().enumerate() {
            *slot = (*slot + 0.08 * (rng.uniform_at(&[DOM_DIST, kk, 4 + c as u64]) - 0.5))
                .clamp(0.0, 1.0);
        }
        dist.push((Sprite { x, y, w, h }, color));
    }

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let drift = (cfg.hue_drift * t as f64).min(1.0);
        let scale = (1.0 + cfg.scale_drift * t as f64).clamp(0.5, 2.0);
        let w = cfg.target_w * scale;
        let h = cfg.target_h * scale;
        if w >= fw || h >= fh {
            return Err(Error::Config(format!(
                "target {w:.0}x{h:.0} cannot fit the {fw:.0}x{fh:.0} frame at t={t}"
            )));
        }
        if t > 0 {
            let tt = t as u64;
            cx += vx + cfg.jitter * rng.normal_at(&[DOM_JIT, tt, 0]);
            cy += vy + cfg.jitter * rng.normal_at(&[DOM_JIT, tt, 1]);
            // reflect off the walls
            if cx - w / 2.0 < 0.0 {
                cx = w - cx;
                vx = vx.abs();
            }
            if cx + w / 2.0 > fw {
                cx = 2.0 * fw - w - cx;
                vx = -vx.abs();
            }
            if cy - h / 2.0 < 0.0 {
                cy = h - cy;
                vy = vy.abs();
            }
            if cy + h / 2.0 > fh {
                cy = 2.0 * fh - h - cy;
                vy = -vy.abs();
            }
        }
        let x0 = (cx - w / 2.0).round();
        let y0 = (cy - h / 2.0).round();
        let wi = w.round();
        let hi = h.round();
        if x0 < 0.0 || y0 < 0.0 || x0 + wi > fw || y0 + hi > fh {
            return Err(Error::Config(format!(
                "motion forces the target off-frame at t={t}"
            )));
        }

        let mut frame = bg.clone();
        for (k, (s, color)) in dist.iter().enumerate() {
            paint_sprite(&mut frame, &rng, 100 + k as u64, *color, s, 0.0);
        }
        paint_sprite(
            &mut frame,
            &rng,
            0,
            target_base,
            &Sprite {
                x: x0,
                y: y0,
                w: wi,
                h: hi,
            },
            drift,
        );
        for &(start, dur) in &cfg.occlusions {
            if t >= start && t < start + dur {
                let occ = Sprite {
                    x: x0,
                    y: y0,
                    w: wi,
                    h: (hi / 2.0).max(1.0),
                };
                for dy in 0..occ.h as isize {
                    for dx in 0..occ.w as isize {
                        let (y, x) = (occ.y as isize + dy, occ.x as isize + dx);
                        if y >= 0 && x >= 0 && (y as usize) < cfg.height && (x as usize) < cfg.width
                        {
                            for c in 0..3 {
                                frame.set(c, y as usize, x as usize, quant(0.5));
                            }
                        }
                    }
                }
            }
        }
        frames.push(frame);
        boxes.push(BBox::from_xywh(x0, y0, wi, hi));
    }
    Ok((frames, boxes))
}

// ── persistence ─────────────────────────────────────────────────────────

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:06}.ppm")
}

pub fn save_sequence(dir: &Path, frames: &[Image], boxes: &[BBox]) -> Result<()> {
    if frames.len() != boxes.len() {
        return Err(Error::Data(format!(
            "{} frames vs {} boxes",
            frames.len(),
            boxes.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut gt = String::new();
    for (t, (f, b)) in frames.iter().zip(boxes).enumerate() {
        f.save_ppm(&dir.join(frame_name(t)))?;
        let (x, y, w, h) = b.to_xywh();
        gt.push_str(&format!("{x},{y},{w},{h}\n"));
    }
    std::fs::write(dir.join("groundtruth.txt"), gt)?;
    Ok(())
}

pub fn load_groundtruth(dir: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(dir.join("groundtruth.txt"))?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Data(format!(
                "groundtruth line {} has {} fields",
                i + 1,
                parts.len()
            )));
        }
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.trim().parse::<f64>().map_err(|_| {
                Error::Data(format!("bad number '{p}' in groundtruth line {}", i + 1))
            })?;
        }
        boxes.push(BBox::from_xywh(v[0], v[1], v[2], v[3]));
    }
    if boxes.is_empty() {
        return Err(Error::Data("empty groundtruth".into()));
    }
    Ok(boxes)
}

pub fn load_sequence(dir: &Path) -> Result<(Vec<Image>, Vec<BBox>)> {
    let boxes = load_groundtruth(dir)?;
    let mut frames = Vec::with_capacity(boxes.len());
    for t in 0..boxes.len() {
        let path = dir.join(frame_name(t));
        if !path.exists() {
            return Err(Error::Data(format!("missing {}", path.display())));
        }
        frames.push(Image::load_ppm(&path)?);
    }
    Ok((frames, boxes))
}

/// Sequence directories under a dataset root, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("groundtruth.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!(
            "no sequences under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_cfg() -> SynthConfig {
        SynthConfig {
            frames: 5,
            velocity: (0.0, 0.0),
            jitter: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn static_config_freezes_frames_and_gt() {
        let (frames, boxes) = gen_sequence(&static_cfg(), 9).unwrap();
        for f in &frames[1..] {
            assert_eq!(f.pixels.data(), frames[0].pixels.data());
        }
        for b in &boxes[1..] {
            assert_eq!(b, &boxes[0]);
        }
    }

    #[test]
    fn same_seed_bit_identical_different_seed_not() {
        let cfg = SynthConfig {
            frames: 3,
            ..SynthConfig::default()
        };
        let (a, _) = gen_sequence(&cfg, 5).unwrap();
        let (b, _) = gen_sequence(&cfg, 5).unwrap();
        let (c, _) = gen_sequence(&cfg, 6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels.data(), y.pixels.data());
        }
        assert_ne!(a[0].pixels.data(), c[0].pixels.data());
    }

    #[test]
    fn hue_drift_changes_target_mean_color() {
        let cfg = SynthConfig {
            frames: 101,
            hue_drift: 0.008,
            velocity: (0.3, 0.2),
            jitter: 0.0,
            ..SynthConfig::default()
        };
        let (frames, boxes) = gen_sequence(&cfg, 21).unwrap();
        let patch_mean = |img: &Image, b: &BBox| -> [f64; 3] {
            let (x, y, w, h) = b.to_xywh();
            let mut m = [0.0; 3];
            let mut n = 0.0;
            for yy in y as usize..(y + h) as usize {
                for xx in x as usize..(x + w) as usize {
                    for c in 0..3 {
                        m[c] += img.get(c, yy, xx);
                    }
                    n += 1.0;
                }
            }
            for c in &mut m {
                *c /= n;
            }
            m
        };
        let first = patch_mean(&frames[0], &boxes[0]);
        let last = patch_mean(&frames[100], &boxes[100]);
        let diff: f64 = (0..3).map(|c| (first[c] - last[c]).abs()).sum();
        assert!(diff > 0.05, "mean color drift {diff} too small");
    }

    #[test]
    fn oversized_target_rejected() {
        let cfg = SynthConfig {
            target_w: 300.0,
            ..SynthConfig::default()
        };
        assert!(gen_sequence(&cfg, 1).is_err());
    }

    #[test]
    fn gt_stays_inside_frame() {
        let cfg = SynthConfig {
            frames: 200,
            velocity: (3.0, 2.5),
            jitter: 1.0,
            scale_drift: 0.002,
            ..SynthConfig::default()
        };
        let (_, boxes) = gen_sequence(&cfg, 33).unwrap();
        for b in &boxes {
            let (x, y, w, h) = b.to_xywh();
            assert!(x >= 0.0 && y >= 0.0 && x + w <= 128.0 && y + h <= 128.0);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = SynthConfig {
            frames: 3,
            ..SynthConfig::default()
        };
        let (frames, boxes) = gen_sequence(&cfg, 77).unwrap();
        let dir = std::env::temp_dir().join("grtrack_synth_test/seq_000");
        let _ = std::fs::remove_dir_all(&dir);
        save_sequence(&dir, &frames, &boxes).unwrap();
        let (f2, b2) = load_sequence(&dir).unwrap();
        assert_eq!(frames.len(), f2.len());
        for (a, b) in frames.iter().zip(&f2) {
            assert_eq!(a.pixels.data(), b.pixels.data());
        }
        assert_eq!(boxes, b2);
    }

    #[test]
    fn occlusion_paints_gray_window() {
        let mut cfg = static_cfg();
        cfg.occlusions = vec![(2, 2)];
        let (frames, boxes) = gen_sequence(&cfg, 3).unwrap();
        let (x, y, ..) = boxes[0].to_xywh();
        let (xi, yi) = (x as usize + 1, y as usize + 1);
        assert_eq!(frames[2].get(0, yi, xi), quant(0.5));
        assert_ne!(frames[0].get(0, yi, xi), quant(0.5));
        assert_eq!(frames[4].get(0, yi, xi), frames[0].get(0, yi, xi));
    }
}
