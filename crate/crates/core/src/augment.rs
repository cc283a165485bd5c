//! Stochastic view generation: image pipeline, EDA text edits and MLM masking.

use crate::data::{FIRST_WORD, MASK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdaStrategy {
    Synonym,
    Swap,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Area fraction range of the random crop.
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    /// Brightness, contrast, saturation, hue.
    pub jitter: [f64; 4],
    pub jitter_prob: f64,
    pub gray_prob: f64,
    pub blur_sigma: [f64; 2],
    pub blur_prob: f64,
    pub hflip_prob: f64,
    pub eda_strategies: Vec<EdaStrategy>,
    pub eda_fraction: f64,
    pub mlm_select: f64,
    pub mlm_mask: f64,
    pub mlm_random: f64,
    pub mlm_keep: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            jitter: [0.4, 0.4, 0.4, 0.1],
            jitter_prob: 0.8,
            gray_prob: 0.2,
            blur_sigma: [0.1, 2.0],
            blur_prob: 1.0,
            hflip_prob: 0.5,
            eda_strategies: vec![EdaStrategy::Synonym, EdaStrategy::Swap, EdaStrategy::Delete],
            eda_fraction: 0.1,
            mlm_select: 0.15,
            mlm_mask: 0.8,
            mlm_random: 0.1,
            mlm_keep: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("jitter_prob", self.jitter_prob),
            ("gray_prob", self.gray_prob),
            ("blur_prob", self.blur_prob),
            ("hflip_prob", self.hflip_prob),
            ("eda_fraction", self.eda_fraction),
            ("mlm_select", self.mlm_select),
            ("mlm_mask", self.mlm_mask),
            ("mlm_random", self.mlm_random),
            ("mlm_keep", self.mlm_keep),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if (self.mlm_mask + self.mlm_random + self.mlm_keep - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mlm_mask + mlm_random + mlm_keep must equal 1".into()));
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale [{lo}, {hi}] invalid")));
        }
        let [rlo, rhi] = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!("crop_ratio [{rlo}, {rhi}] invalid")));
        }
        let [slo, shi] = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Config(format!("blur_sigma [{slo}, {shi}] invalid")));
        }
        if self.jitter.iter().any(|&s| s < 0.0) || self.jitter[3] > 0.5 {
            return Err(Error::Config(format!("jitter strengths {:?} invalid", self.jitter)));
        }
        if self.eda_strategies.is_empty() {
            return Err(Error::Config("eda_strategies is empty".into()));
        }
        Ok(())
    }
}

/// Independent stream for one sample of one epoch.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

/// `[C × H × W]` image with values in `[0, 1]`.
fn dims(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        s => Err(Error::Shape(format!("expected [C, H, W] image, got {s:?}"))),
    }
}

/// Crop window `(top, left, height, width)`; the whole image after ten rejected draws.
fn crop_window(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(cfg.crop_scale[0]..=cfg.crop_scale[1]);
        let ratio = rng.gen_range(cfg.crop_ratio[0]..=cfg.crop_ratio[1]);
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Bilinear resize of the window back to `h × w` (half-pixel centers).
fn resized_crop(src: &[f32], c: usize, h: usize, w: usize, win: (usize, usize, usize, usize)) -> Vec<f32> {
    let (top, left, ch, cw) = win;
    let axis = |out: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let pos = ((out as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let rows: Vec<_> = (0..h).map(|y| axis(y, h, ch)).collect();
    let cols: Vec<_> = (0..w).map(|x| axis(x, w, cw)).collect();
    let mut out = vec![0.0; c * h * w];
    for k in 0..c {
        let plane = &src[k * h * w..(k + 1) * h * w];
        let at = |y: usize, x: usize| plane[(top + y) * w + left + x];
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let a = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let b = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[k * h * w + y * w + x] = a * (1.0 - fy) + b * fy;
            }
        }
    }
    out
}

/// Central window covering `side` of each dimension, resized back to the
/// input size. The usual evaluation transform (resize then center crop).
pub fn center_crop(image: &Tensor<f32>, side: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(image)?;
    if !(side > 0.0 && side <= 1.0) {
        return Err(Error::Config(format!("center crop fraction {side} outside (0, 1]")));
    }
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let win = ((h - ch) / 2, (w - cw) / 2, ch, cw);
    Tensor::new(vec![c, h, w], resized_crop(image.data(), c, h, w, win))
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma(px: &[f32], hw: usize, i: usize) -> f32 {
    LUMA[0] * px[i] + LUMA[1] * px[hw + i] + LUMA[2] * px[2 * hw + i]
}

fn clamp01(px: &mut [f32]) {
    for v in px {
        *v = v.clamp(0.0, 1.0);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn color_jitter(px: &mut [f32], hw: usize, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let factor = |s: f64, rng: &mut ChaCha8Rng| -> f32 {
        if s > 0.0 {
            rng.gen_range((1.0 - s).max(0.0)..=1.0 + s) as f32
        } else {
            1.0
        }
    };
    let [sb, sc, ss, sh] = cfg.jitter;
    let brightness = factor(sb, rng);
    let contrast = factor(sc, rng);
    let saturation = factor(ss, rng);
    let hue = if sh > 0.0 { rng.gen_range(-sh..=sh) as f32 } else { 0.0 };
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 => px.iter_mut().for_each(|v| *v *= brightness),
            1 => {
                let mean = (0..hw).map(|i| luma(px, hw, i)).sum::<f32>() / hw as f32;
                px.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
            }
            2 => {
                for i in 0..hw {
                    let y = luma(px, hw, i);
                    for k in 0..3 {
                        px[k * hw + i] = y + (px[k * hw + i] - y) * saturation;
                    }
                }
            }
            _ => {
                for i in 0..hw {
                    let (h, s, v) = rgb_to_hsv(px[i], px[hw + i], px[2 * hw + i]);
                    let (r, g, b) = hsv_to_rgb(h + hue, s, v);
                    px[i] = r;
                    px[hw + i] = g;
                    px[2 * hw + i] = b;
                }
            }
        }
        clamp01(px);
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable normalized Gaussian blur with reflect padding.
pub fn gaussian_blur(px: &mut [f32], c: usize, h: usize, w: usize, sigma: f64) {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let kernel: Vec<f32> = kernel.into_iter().map(|k| k as f32).collect();
    let mut tmp = vec![0.0f32; h * w];
    for k in 0..c {
        let plane = &mut px[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    acc += kv * plane[y * w + reflect(x as isize + t as isize - radius, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[reflect(y as isize + t as isize - radius, h) * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}

/// Crop, jitter, grayscale, blur and flip, in that order. Color operations
/// apply to three-channel images only.
pub fn augment_image(image: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(image)?;
    let hw = h * w;
    let win = crop_window(h, w, cfg, rng);
    let mut px = resized_crop(image.data(), c, h, w, win);

    if rng.gen_bool(cfg.jitter_prob) && c == 3 {
        color_jitter(&mut px, hw, cfg, rng);
    }
    if rng.gen_bool(cfg.gray_prob) && c == 3 {
        for i in 0..hw {
            let y = luma(&px, hw, i);
            for k in 0..3 {
                px[k * hw + i] = y;
            }
        }
    }
    if rng.gen_bool(cfg.blur_prob) {
        let sigma = rng.gen_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        gaussian_blur(&mut px, c, h, w, sigma);
    }
    if rng.gen_bool(cfg.hflip_prob) {
        for row in px.chunks_mut(w) {
            row.reverse();
        }
    }
    clamp01(&mut px);
    Tensor::new(vec![c, h, w], px)
}

/// Word id → synonym ids.
pub type Lexicon = HashMap<usize, Vec<usize>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdaOutcome {
    pub tokens: Vec<usize>,
    pub strategy: EdaStrategy,
}

/// Applies one uniformly drawn EDA strategy to the word ids of a caption
/// (no EOS or padding).
pub fn eda_augment(tokens: &[usize], cfg: &AugmentConfig, lexicon: &Lexicon, rng: &mut ChaCha8Rng) -> EdaOutcome {
    let mut choices = cfg.eda_strategies.clone();
    let mut strategy = *choices.choose(rng).expect("validated non-empty");
    if strategy == EdaStrategy::Synonym && lexicon.is_empty() {
        choices.retain(|&s| s != EdaStrategy::Synonym);
        match choices.choose(rng) {
            Some(&s) => {
                log::debug!("empty lexicon, synonym replacement redrawn as {s:?}");
                strategy = s;
            }
            None => {
                return EdaOutcome {
                    tokens: tokens.to_vec(),
                    strategy,
                }
            }
        }
    }
    let n = tokens.len();
    let mut out = tokens.to_vec();
    if n == 0 {
        return EdaOutcome { tokens: out, strategy };
    }
    let changes = (cfg.eda_fraction * n as f64).ceil() as usize;
    match strategy {
        EdaStrategy::Synonym => {
            let mut covered: Vec<usize> = (0..n).filter(|&i| lexicon.get(&out[i]).is_some_and(|s| !s.is_empty())).collect();
            covered.shuffle(rng);
            for &i in covered.iter().take(changes) {
                out[i] = *lexicon[&tokens[i]].choose(rng).expect("non-empty synonym list");
            }
        }
        EdaStrategy::Swap => {
            for _ in 0..changes {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                out.swap(a, b);
            }
        }
        EdaStrategy::Delete => {
            let keep: Vec<bool> = (0..n).map(|_| !rng.gen_bool(cfg.eda_fraction)).collect();
            out = tokens.iter().zip(&keep).filter(|(_, &k)| k).map(|(&t, _)| t).collect();
            if out.is_empty() {
                out.push(tokens[rng.gen_range(0..n)]);
            }
        }
    }
    EdaOutcome { tokens: out, strategy }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masked {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
}

/// Selects each word token independently and corrupts it to the mask id,
/// a random word id, or leaves it. Special ids are never selected.
pub fn mlm_mask(tokens: &[usize], cfg: &AugmentConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Masked {
    let mut out = Masked {
        tokens: tokens.to_vec(),
        positions: Vec::new(),
        originals: Vec::new(),
    };
    for (i, &t) in tokens.iter().enumerate() {
        if t < FIRST_WORD || !rng.gen_bool(cfg.mlm_select) {
            continue;
        }
        out.positions.push(i);
        out.originals.push(t);
        let u: f64 = rng.gen();
        if u < cfg.mlm_mask {
            out.tokens[i] = MASK;
        } else if u < cfg.mlm_mask + cfg.mlm_random && vocab_size > FIRST_WORD {
            out.tokens[i] = rng.gen_range(FIRST_WORD..vocab_size);
        }
    }
    out
}
