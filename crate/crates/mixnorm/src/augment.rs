//! Spatial augmentations producing the extra views behind local statistics.
//!
//! All randomness is counter-based: each (seed, sample index, view index)
//! triple keys its own generator, so a sample's views never depend on how
//! the surrounding stream is ordered or batched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub n_views: usize,
    pub crop_scale: (f64, f64),
    pub crop_aspect: (f64, f64),
    pub flip_prob: f64,
    pub seed: u64,
}

impl AugmentationConfig {
    pub fn new(seed: u64) -> Self {
        AugmentationConfig {
            n_views: 1,
            crop_scale: (0.5, 1.0),
            crop_aspect: (0.75, 4.0 / 3.0),
            flip_prob: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.crop_scale;
        let (a0, a1) = self.crop_aspect;
        if self.n_views < 1 {
            return Err(Error::usage("n_views must be >= 1"));
        }
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) {
            return Err(Error::usage("crop_scale must be a nonempty interval in (0,1]"));
        }
        if !(0.0 < a0 && a0 <= a1) {
            return Err(Error::usage("crop_aspect must be a nonempty positive interval"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::usage("flip_prob must be in [0,1]"));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator keyed by (seed, sample index, view index).
pub fn view_rng(seed: u64, sample_index: u64, view_index: u64) -> ChaCha8Rng {
    let k = splitmix64(seed ^ splitmix64(sample_index ^ splitmix64(view_index ^ 0xa076_1d64_78bd_642f)));
    ChaCha8Rng::seed_from_u64(k)
}

fn sample_interval(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Bilinear resample of a C.H.W crop window back to the full H.W grid.
fn resize_bilinear(
    img: &Tensor,
    y0: usize,
    x0: usize,
    crop_h: usize,
    crop_w: usize,
) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let vals = img.values();
    let mut out = vec![0.0; c * h * w];
    let sy = crop_h as f64 / h as f64;
    let sx = crop_w as f64 / w as f64;
    for oy in 0..h {
        // half-pixel-center mapping; scale 1 maps each pixel onto itself
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (crop_h - 1) as f64);
        let iy = (fy.floor() as usize).min(crop_h - 1);
        let iy1 = (iy + 1).min(crop_h - 1);
        let wy = fy - iy as f64;
        for ox in 0..w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (crop_w - 1) as f64);
            let ix = (fx.floor() as usize).min(crop_w - 1);
            let ix1 = (ix + 1).min(crop_w - 1);
            let wx = fx - ix as f64;
            for ch in 0..c {
                let base = ch * h * w;
                let p = |yy: usize, xx: usize| vals[base + (y0 + yy) * w + (x0 + xx)];
                let top = p(iy, ix) * (1.0 - wx) + p(iy, ix1) * wx;
                let bot = p(iy1, ix) * (1.0 - wx) + p(iy1, ix1) * wx;
                out[base + oy * w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(img.shape(), out).expect("resize preserves shape")
}

/// Crop a random area/aspect window and resize it back to the input size.
pub fn random_resized_crop(
    img: &Tensor,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if img.rank() != 3 || img.shape()[1] < 2 || img.shape()[2] < 2 {
        return Err(Error::usage("random_resized_crop expects C.H.W with H,W >= 2"));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    for _ in 0..10 {
        let area = sample_interval(rng, cfg.crop_scale) * (h * w) as f64;
        let aspect = sample_interval(rng, cfg.crop_aspect);
        let crop_w = (area * aspect).sqrt().round() as i64;
        let crop_h = (area / aspect).sqrt().round() as i64;
        if crop_w < 1 || crop_h < 1 || crop_w > w as i64 || crop_h > h as i64 {
            continue;
        }
        let (crop_h, crop_w) = (crop_h as usize, crop_w as usize);
        let y0 = if crop_h == h { 0 } else { rng.gen_range(0..=h - crop_h) };
        let x0 = if crop_w == w { 0 } else { rng.gen_range(0..=w - crop_w) };
        return Ok(resize_bilinear(img, y0, x0, crop_h, crop_w));
    }
    // degenerate config: fall back to the identity crop
    Ok(resize_bilinear(img, 0, 0, h, w))
}

/// Reverse the W axis with probability `flip_prob`.
pub fn random_flip(img: &Tensor, flip_prob: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(Error::usage("random_flip expects C.H.W"));
    }
    let do_flip = flip_prob > 0.0 && (flip_prob >= 1.0 || rng.gen::<f64>() < flip_prob);
    if !do_flip {
        return Ok(img.clone());
    }
    Ok(flip_w(img))
}

pub fn flip_w(img: &Tensor) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let vals = img.values();
    let mut out = vec![0.0; vals.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = vals[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(img.shape(), out).expect("flip preserves shape")
}

/// N independent crop+flip views of one image. The original is not included.
pub fn make_views(img: &Tensor, cfg: &AugmentationConfig, sample_index: u64) -> Result<Tensor> {
    cfg.validate()?;
    let mut views = Vec::with_capacity(cfg.n_views);
    for v in 0..cfg.n_views {
        let mut rng = view_rng(cfg.seed, sample_index, v as u64);
        let cropped = random_resized_crop(img, cfg, &mut rng)?;
        views.push(random_flip(&cropped, cfg.flip_prob, &mut rng)?);
    }
    let refs: Vec<&Tensor> = views.iter().collect();
    Tensor::stack(&refs)
}
