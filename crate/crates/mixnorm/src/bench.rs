//! Deterministic synthetic corruption benchmark: procedurally rendered
//! 10-class 3x16x16 images, six corruption operators with five severity
//! levels each, and stream builders for the single-corruption and
//! mixed-corruption evaluation protocols.

use rand::Rng;

use crate::augment::view_rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMG_C: usize = 3;
pub const IMG_H: usize = 16;
pub const IMG_W: usize = 16;
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    /// 3x16x16 pixels in [0,1].
    pub pixels: Tensor,
    pub label: usize,
}

impl ToyImage {
    pub fn new(pixels: Tensor, label: usize) -> Result<ToyImage> {
        if pixels.shape() != [IMG_C, IMG_H, IMG_W] {
            return Err(Error::usage("toy image must be 3x16x16"));
        }
        if label >= NUM_CLASSES {
            return Err(Error::usage("label out of range"));
        }
        Ok(ToyImage { pixels, label })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CorruptionKind {
    Blur,
    Brightness,
    Contrast,
    GaussianNoise,
    ImpulseNoise,
    Pixelate,
}

/// All kinds in their canonical (alphabetical-by-name) report order.
pub const ALL_KINDS: [CorruptionKind; 6] = [
    CorruptionKind::Blur,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
    CorruptionKind::GaussianNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::Pixelate,
];

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::Blur => "blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn parse(s: &str) -> Result<CorruptionKind> {
        ALL_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<CorruptionSpec> {
        if !(1..=5).contains(&severity) {
            return Err(Error::usage("severity must be in 1..=5"));
        }
        Ok(CorruptionSpec { kind, severity })
    }
}

// ---------------------------------------------------------------------------
// procedural source dataset
// ---------------------------------------------------------------------------

/// Approximate hue -> rgb (full saturation ramp), h in [0,1).
fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let x = 1.0 - (h6.rem_euclid(2.0) - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Foreground mask in [0,1] for one class: oriented bars (0..4), blob
/// clusters (4..7), checkerboards (7..10); position/scale jittered per
/// sample.
fn class_mask(class: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let scale = rng.gen_range(0.85..1.2);
    let dx = rng.gen_range(-2.0..2.0);
    let dy = rng.gen_range(-2.0..2.0);
    let mut mask = vec![0.0; IMG_H * IMG_W];
    match class {
        0..=3 => {
            let theta = class as f64 * std::f64::consts::FRAC_PI_4;
            let (c, s) = (theta.cos(), theta.sin());
            let period = 4.0 * scale;
            let phase = rng.gen_range(0.0..period);
            for y in 0..IMG_H {
                for x in 0..IMG_W {
                    let t = (x as f64 + dx) * c + (y as f64 + dy) * s + phase;
                    if t.rem_euclid(period) < period / 2.0 {
                        mask[y * IMG_W + x] = 1.0;
                    }
                }
            }
        }
        4..=6 => {
            let n_blobs = class - 3;
            let r = 3.2 * scale;
            let centers: Vec<(f64, f64)> = (0..n_blobs)
                .map(|_| {
                    (
                        rng.gen_range(3.0..(IMG_W as f64 - 3.0)),
                        rng.gen_range(3.0..(IMG_H as f64 - 3.0)),
                    )
                })
                .collect();
            for y in 0..IMG_H {
                for x in 0..IMG_W {
                    let mut v: f64 = 0.0;
                    for &(cx, cy) in &centers {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        v += (-d2 / (2.0 * r * r)).exp();
                    }
                    if v > 0.45 {
                        mask[y * IMG_W + x] = 1.0;
                    }
                }
            }
        }
        _ => {
            let period = [2.0, 3.0, 5.0][class - 7] * scale;
            for y in 0..IMG_H {
                for x in 0..IMG_W {
                    let cx = ((x as f64 + dx) / period).floor() as i64;
                    let cy = ((y as f64 + dy) / period).floor() as i64;
                    if (cx + cy).rem_euclid(2) == 0 {
                        mask[y * IMG_W + x] = 1.0;
                    }
                }
            }
        }
    }
    mask
}

fn render_sample(class: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let hue = class as f64 / NUM_CLASSES as f64 + rng.gen_range(-0.03..0.03);
    let fg = hue_to_rgb(hue);
    let fg_v = rng.gen_range(0.75..0.95);
    let bg_v = rng.gen_range(0.1..0.2);
    let mask = class_mask(class, rng);
    let mut vals = vec![0.0; IMG_C * IMG_H * IMG_W];
    for (i, &m) in mask.iter().enumerate() {
        for c in 0..IMG_C {
            let fgc = fg[c] * fg_v;
            vals[c * IMG_H * IMG_W + i] = (m * fgc + (1.0 - m) * bg_v).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[IMG_C, IMG_H, IMG_W], vals).unwrap()
}

/// Balanced procedural dataset: n_per_class samples of each of the K=10
/// classes, ordered class-major, deterministic per seed.
pub fn generate_source_dataset(seed: u64, n_per_class: usize) -> Result<Vec<ToyImage>> {
    if n_per_class == 0 {
        return Err(Error::usage("n_per_class must be >= 1"));
    }
    let mut out = Vec::with_capacity(NUM_CLASSES * n_per_class);
    for class in 0..NUM_CLASSES {
        for i in 0..n_per_class {
            let mut rng = view_rng(seed ^ 0x6461_7461_7365_7421, (class * 1_000_003 + i) as u64, 0);
            out.push(ToyImage::new(render_sample(class, &mut rng), class)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// corruption operators
// ---------------------------------------------------------------------------

const GAUSS_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const IMPULSE_P: [f64; 5] = [0.02, 0.05, 0.09, 0.14, 0.20];
const BLUR_PASSES: [usize; 5] = [1, 2, 3, 5, 8];
const CONTRAST_F: [f64; 5] = [0.75, 0.60, 0.45, 0.30, 0.18];
const BRIGHTNESS_B: [f64; 5] = [0.08, 0.14, 0.20, 0.28, 0.38];
const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 6, 8];

fn clamp01(vals: &mut [f64]) {
    for v in vals.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn blur_pass(vals: &mut Vec<f64>) {
    // separable 1-2-1 binomial smoothing with edge clamping, per channel
    let hw = IMG_H * IMG_W;
    let mut tmp = vals.clone();
    for c in 0..IMG_C {
        let base = c * hw;
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(IMG_W - 1);
                tmp[base + y * IMG_W + x] = 0.25 * vals[base + y * IMG_W + xm]
                    + 0.5 * vals[base + y * IMG_W + x]
                    + 0.25 * vals[base + y * IMG_W + xp];
            }
        }
        for y in 0..IMG_H {
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(IMG_H - 1);
            for x in 0..IMG_W {
                vals[base + y * IMG_W + x] = 0.25 * tmp[base + ym * IMG_W + x]
                    + 0.5 * tmp[base + y * IMG_W + x]
                    + 0.25 * tmp[base + yp * IMG_W + x];
            }
        }
    }
}

/// Additive brightness shift; b = 0 is the identity point.
pub fn apply_brightness(img: &ToyImage, b: f64) -> ToyImage {
    let mut vals = img.pixels.values().to_vec();
    for v in vals.iter_mut() {
        *v += b;
    }
    clamp01(&mut vals);
    ToyImage {
        pixels: Tensor::new(&[IMG_C, IMG_H, IMG_W], vals).unwrap(),
        label: img.label,
    }
}

/// Apply one corruption; deterministic per (seed, sample_index).
pub fn apply_corruption(
    img: &ToyImage,
    spec: CorruptionSpec,
    seed: u64,
    sample_index: u64,
) -> ToyImage {
    let si = (spec.severity - 1) as usize;
    let mut rng = view_rng(seed ^ 0x636f_7272_7570_7421, sample_index, spec.kind as u64);
    let mut vals = img.pixels.values().to_vec();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSS_SIGMA[si];
            for v in vals.iter_mut() {
                // Box-Muller from two uniforms
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                *v += sigma * z;
            }
        }
        CorruptionKind::ImpulseNoise => {
            let p = IMPULSE_P[si];
            let hw = IMG_H * IMG_W;
            for i in 0..hw {
                if rng.gen_range(0.0..1.0) < p {
                    let salt = rng.gen_range(0.0..1.0) < 0.5;
                    for c in 0..IMG_C {
                        vals[c * hw + i] = if salt { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        CorruptionKind::Blur => {
            for _ in 0..BLUR_PASSES[si] {
                blur_pass(&mut vals);
            }
        }
        CorruptionKind::Contrast => {
            let f = CONTRAST_F[si];
            for v in vals.iter_mut() {
                *v = (*v - 0.5) * f + 0.5;
            }
        }
        CorruptionKind::Brightness => {
            let b = BRIGHTNESS_B[si];
            for v in vals.iter_mut() {
                *v += b;
            }
        }
        CorruptionKind::Pixelate => {
            let blk = PIXELATE_BLOCK[si];
            let hw = IMG_H * IMG_W;
            for c in 0..IMG_C {
                let base = c * hw;
                let mut y0 = 0;
                while y0 < IMG_H {
                    let mut x0 = 0;
                    let yh = (y0 + blk).min(IMG_H);
                    while x0 < IMG_W {
                        let xw = (x0 + blk).min(IMG_W);
                        let mut acc = 0.0;
                        for y in y0..yh {
                            for x in x0..xw {
                                acc += vals[base + y * IMG_W + x];
                            }
                        }
                        let avg = acc / ((yh - y0) * (xw - x0)) as f64;
                        for y in y0..yh {
                            for x in x0..xw {
                                vals[base + y * IMG_W + x] = avg;
                            }
                        }
                        x0 = xw;
                    }
                    y0 = yh;
                }
            }
        }
    }
    clamp01(&mut vals);
    ToyImage {
        pixels: Tensor::new(&[IMG_C, IMG_H, IMG_W], vals).unwrap(),
        label: img.label,
    }
}

// ---------------------------------------------------------------------------
// streams
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamMode {
    /// Every sample corrupted with one fixed (kind, severity); dataset order.
    Single { kind: CorruptionKind, severity: u8 },
    /// One corrupted copy per (sample, kind), kinds and order shuffled.
    Mixed { severity: u8 },
    /// Uncorrupted pass-through, dataset order.
    Clean,
}

impl StreamMode {
    pub fn parse(s: &str) -> Result<StreamMode> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["clean"] => Ok(StreamMode::Clean),
            ["single", kind, sev] => {
                let kind = CorruptionKind::parse(kind)?;
                let severity: u8 = sev
                    .parse()
                    .map_err(|_| Error::usage(format!("bad severity `{sev}`")))?;
                CorruptionSpec::new(kind, severity)?;
                Ok(StreamMode::Single { kind, severity })
            }
            ["mixed", sev] => {
                let severity: u8 = sev
                    .parse()
                    .map_err(|_| Error::usage(format!("bad severity `{sev}`")))?;
                CorruptionSpec::new(CorruptionKind::Blur, severity)?;
                Ok(StreamMode::Mixed { severity })
            }
            _ => Err(Error::usage(format!(
                "bad stream `{s}`; expected single:<kind>:<sev>, mixed:<sev>, or clean"
            ))),
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            StreamMode::Single { kind, severity } => format!("single:{}:{severity}", kind.name()),
            StreamMode::Mixed { severity } => format!("mixed:{severity}"),
            StreamMode::Clean => "clean".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamEntry {
    pub image: Tensor,
    pub provenance: Option<CorruptionSpec>,
    label: usize,
}

impl StreamEntry {
    pub(crate) fn label_for_scoring(&self) -> usize {
        self.label
    }
}

/// An ordered evaluation stream. Labels ride along hidden; only the scorer
/// reads them (strictly after each prediction is committed).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStream {
    pub entries: Vec<StreamEntry>,
    pub seed: u64,
    pub mode: StreamMode,
}

impl SampleStream {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn from_parts(
        entries: Vec<(Tensor, Option<CorruptionSpec>, usize)>,
        seed: u64,
        mode: StreamMode,
    ) -> SampleStream {
        SampleStream {
            entries: entries
                .into_iter()
                .map(|(image, provenance, label)| StreamEntry { image, provenance, label })
                .collect(),
            seed,
            mode,
        }
    }

    pub(crate) fn parts(&self) -> Vec<(Tensor, Option<CorruptionSpec>, usize)> {
        self.entries
            .iter()
            .map(|e| (e.image.clone(), e.provenance, e.label))
            .collect()
    }
}

/// Build an evaluation stream from a labeled dataset; pure in
/// (dataset, mode, seed).
pub fn build_stream(dataset: &[ToyImage], mode: StreamMode, seed: u64) -> Result<SampleStream> {
    if dataset.is_empty() {
        return Err(Error::usage("dataset is empty"));
    }
    let mut entries: Vec<StreamEntry> = Vec::new();
    match mode {
        StreamMode::Clean => {
            for img in dataset {
                entries.push(StreamEntry {
                    image: img.pixels.clone(),
                    provenance: None,
                    label: img.label,
                });
            }
        }
        StreamMode::Single { kind, severity } => {
            let spec = CorruptionSpec::new(kind, severity)?;
            for (i, img) in dataset.iter().enumerate() {
                let corrupted = apply_corruption(img, spec, seed, i as u64);
                entries.push(StreamEntry {
                    image: corrupted.pixels,
                    provenance: Some(spec),
                    label: img.label,
                });
            }
        }
        StreamMode::Mixed { severity } => {
            for (i, img) in dataset.iter().enumerate() {
                for kind in ALL_KINDS {
                    let spec = CorruptionSpec::new(kind, severity)?;
                    let corrupted = apply_corruption(img, spec, seed, i as u64);
                    entries.push(StreamEntry {
                        image: corrupted.pixels,
                        provenance: Some(spec),
                        label: img.label,
                    });
                }
            }
            // Fisher-Yates under the stream seed
            let mut rng = view_rng(seed ^ 0x7374_7265_616d_2121, 0, 0);
            for i in (1..entries.len()).rev() {
                let j = rng.gen_range(0..=i);
                entries.swap(i, j);
            }
        }
    }
    Ok(SampleStream { entries, seed, mode })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mse(a: &Tensor, b: &Tensor) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let a = generate_source_dataset(7, 4).unwrap();
        let b = generate_source_dataset(7, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        for class in 0..NUM_CLASSES {
            assert_eq!(a.iter().filter(|img| img.label == class).count(), 4);
        }
        let c = generate_source_dataset(8, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dataset_values_in_unit_interval() {
        for img in generate_source_dataset(3, 2).unwrap() {
            assert!(img.pixels.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn corruption_preserves_label_shape_and_range() {
        let imgs = generate_source_dataset(1, 2).unwrap();
        for kind in ALL_KINDS {
            for sev in 1..=5u8 {
                let spec = CorruptionSpec::new(kind, sev).unwrap();
                for (i, img) in imgs.iter().enumerate() {
                    let out = apply_corruption(img, spec, 42, i as u64);
                    assert_eq!(out.label, img.label);
                    assert_eq!(out.pixels.shape(), img.pixels.shape());
                    assert!(out.pixels.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }
    }

    #[test]
    fn corruption_is_deterministic_per_key() {
        let img = &generate_source_dataset(5, 1).unwrap()[3];
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3).unwrap();
        let a = apply_corruption(img, spec, 9, 17);
        let b = apply_corruption(img, spec, 9, 17);
        assert_eq!(a, b);
        let c = apply_corruption(img, spec, 9, 18);
        assert_ne!(a, c);
        let d = apply_corruption(img, spec, 10, 17);
        assert_ne!(a, d);
    }

    #[test]
    fn brightness_identity_point_is_identity() {
        let img = &generate_source_dataset(2, 1).unwrap()[4];
        let out = apply_brightness(img, 0.0);
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn severity_schedules_strictly_increase_distortion() {
        // Monte-Carlo oracle: mean-squared distortion over 1000 images must
        // strictly increase with severity for every kind
        let imgs = generate_source_dataset(123, 100).unwrap();
        assert_eq!(imgs.len(), 1000);
        for kind in ALL_KINDS {
            let mut prev = -1.0;
            for sev in 1..=5u8 {
                let spec = CorruptionSpec::new(kind, sev).unwrap();
                let total: f64 = imgs
                    .iter()
                    .enumerate()
                    .map(|(i, img)| {
                        mse(&apply_corruption(img, spec, 777, i as u64).pixels, &img.pixels)
                    })
                    .sum();
                let mean = total / imgs.len() as f64;
                assert!(
                    mean > prev,
                    "{} severity {sev}: msd {mean} not > {prev}",
                    kind.name()
                );
                prev = mean;
            }
        }
    }

    #[test]
    fn corruption_golden_checksum() {
        let img = &generate_source_dataset(11, 1).unwrap()[6];
        let mut acc = 0.0;
        for (ki, kind) in ALL_KINDS.iter().enumerate() {
            let spec = CorruptionSpec::new(*kind, 4).unwrap();
            let out = apply_corruption(img, spec, 2024, ki as u64);
            acc += out
                .pixels
                .values()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (i % 17 + 1) as f64)
                .sum::<f64>();
        }
        assert!(
            (acc - GOLDEN_CORRUPTION_CHECKSUM).abs() < 1e-9,
            "checksum {acc:.12}"
        );
    }

    const GOLDEN_CORRUPTION_CHECKSUM: f64 = 14220.179817397682;

    #[test]
    fn single_stream_preserves_order_and_provenance() {
        let ds = generate_source_dataset(4, 3).unwrap();
        let mode = StreamMode::Single { kind: CorruptionKind::Contrast, severity: 2 };
        let s = build_stream(&ds, mode, 5).unwrap();
        assert_eq!(s.len(), ds.len());
        for (e, img) in s.entries.iter().zip(&ds) {
            assert_eq!(e.label_for_scoring(), img.label);
            assert_eq!(
                e.provenance,
                Some(CorruptionSpec::new(CorruptionKind::Contrast, 2).unwrap())
            );
        }
    }

    #[test]
    fn mixed_stream_is_exact_multiset_and_replays() {
        let ds = generate_source_dataset(6, 2).unwrap();
        let s = build_stream(&ds, StreamMode::Mixed { severity: 3 }, 9).unwrap();
        assert_eq!(s.len(), ds.len() * ALL_KINDS.len());
        for kind in ALL_KINDS {
            let n = s
                .entries
                .iter()
                .filter(|e| e.provenance.map(|p| p.kind) == Some(kind))
                .count();
            assert_eq!(n, ds.len(), "{}", kind.name());
        }
        let s2 = build_stream(&ds, StreamMode::Mixed { severity: 3 }, 9).unwrap();
        assert_eq!(s, s2);
        let s3 = build_stream(&ds, StreamMode::Mixed { severity: 3 }, 10).unwrap();
        assert_ne!(s, s3);
    }

    #[test]
    fn clean_stream_passes_through() {
        let ds = generate_source_dataset(2, 2).unwrap();
        let s = build_stream(&ds, StreamMode::Clean, 1).unwrap();
        for (e, img) in s.entries.iter().zip(&ds) {
            assert_eq!(e.image, img.pixels);
            assert_eq!(e.provenance, None);
        }
    }

    #[test]
    fn stream_mode_parse_roundtrip() {
        for s in ["single:gaussian_noise:5", "mixed:3", "clean"] {
            assert_eq!(StreamMode::parse(s).unwrap().descriptor(), s);
        }
        assert!(StreamMode::parse("single:fog:3").is_err());
        assert!(StreamMode::parse("mixed:6").is_err());
        assert!(StreamMode::parse("mixed").is_err());
    }

    #[test]
    fn empty_dataset_is_usage_error() {
        assert!(build_stream(&[], StreamMode::Clean, 0).is_err());
    }
}
