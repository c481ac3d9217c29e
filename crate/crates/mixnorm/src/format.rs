//! Plain-text, versioned file formats: model checkpoints, dataset/stream
//! exports, and the key-value config file. Floats are written with Rust's
//! shortest-roundtrip formatting, so save -> load is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::bench::{
    CorruptionKind, CorruptionSpec, SampleStream, StreamMode, ToyImage, IMG_C, IMG_H, IMG_W,
};
use crate::error::{Error, Result};
use crate::model::{LayerSpec, LayerWeights, Network};
use crate::norm::{AffineParams, ChannelStats};
use crate::tensor::Tensor;

const MODEL_MAGIC: &str = "mixnorm-model";
const DATASET_MAGIC: &str = "mixnorm-dataset";
const STREAM_MAGIC: &str = "mixnorm-stream";
const CONFIG_MAGIC: &str = "mixnorm-config";
const FORMAT_VERSION: u32 = 1;

fn ferr(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), msg: msg.into() }
}

fn fmt_floats(out: &mut String, name: &str, vals: &[f64]) {
    out.push_str(name);
    for v in vals {
        let _ = write!(out, " {v}");
    }
    out.push('\n');
}

struct LineReader<'a> {
    path: &'a Path,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        LineReader { path, lines: text.lines().enumerate() }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        for (n, line) in self.lines.by_ref() {
            let trimmed = line.trim();
            if !trimmed.is_empty() && !trimmed.starts_with('#') {
                return Ok((n + 1, trimmed));
            }
        }
        Err(ferr(self.path, "unexpected end of file"))
    }

    fn expect_done(&mut self) -> Result<()> {
        if let Ok((n, _)) = self.next_line() {
            return Err(ferr(self.path, format!("line {n}: trailing content")));
        }
        Ok(())
    }

    /// Line of the form `<name> v1 v2 ...`.
    fn floats(&mut self, name: &str, expected: usize) -> Result<Vec<f64>> {
        let (n, line) = self.next_line()?;
        let mut it = line.split_ascii_whitespace();
        let head = it.next().unwrap_or("");
        if head != name {
            return Err(ferr(self.path, format!("line {n}: expected `{name}`, got `{head}`")));
        }
        let vals: std::result::Result<Vec<f64>, _> = it.map(str::parse).collect();
        let vals =
            vals.map_err(|e| ferr(self.path, format!("line {n}: bad float in `{name}`: {e}")))?;
        if vals.len() != expected {
            return Err(ferr(
                self.path,
                format!("line {n}: `{name}` expects {expected} values, got {}", vals.len()),
            ));
        }
        Ok(vals)
    }

    fn header(&mut self, magic: &str) -> Result<()> {
        let (n, line) = self.next_line()?;
        let want = format!("{magic} v{FORMAT_VERSION}");
        if line != want {
            return Err(ferr(self.path, format!("line {n}: expected header `{want}`, got `{line}`")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// model checkpoints
// ---------------------------------------------------------------------------

pub fn model_to_string(net: &Network) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_MAGIC} v{FORMAT_VERSION}");
    let _ = writeln!(
        out,
        "input_dims {} {} {}",
        net.input_dims[0], net.input_dims[1], net.input_dims[2]
    );
    let _ = writeln!(out, "num_classes {}", net.num_classes);
    let _ = writeln!(out, "trained {}", if net.trained { 1 } else { 0 });
    match net.clean_val_error {
        Some(e) => {
            let _ = writeln!(out, "clean_val_error {e}");
        }
        None => {
            let _ = writeln!(out, "clean_val_error none");
        }
    }
    let _ = writeln!(out, "layers {}", net.layers.len());
    let mut slot = 0usize;
    for (li, layer) in net.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv3x3 { in_ch, out_ch } => {
                let _ = writeln!(out, "layer conv3x3 {in_ch} {out_ch}");
                if let LayerWeights::Conv { w, b } = &net.weights[li] {
                    fmt_floats(&mut out, "w", w);
                    fmt_floats(&mut out, "b", b);
                }
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                let _ = writeln!(out, "layer dense {in_dim} {out_dim}");
                if let LayerWeights::Dense { w, b } = &net.weights[li] {
                    fmt_floats(&mut out, "w", w);
                    fmt_floats(&mut out, "b", b);
                }
            }
            LayerSpec::NormSlot { channels } => {
                let _ = writeln!(out, "layer norm {channels}");
                let aff = &net.norm_affine[slot];
                let stats = &net.bn_training_stats[slot];
                fmt_floats(&mut out, "alpha", &aff.alpha);
                fmt_floats(&mut out, "beta", &aff.beta);
                fmt_floats(&mut out, "eps", &[aff.eps]);
                fmt_floats(&mut out, "run_mean", &stats.mean);
                fmt_floats(&mut out, "run_var", &stats.var);
                slot += 1;
            }
            LayerSpec::Relu => {
                let _ = writeln!(out, "layer relu");
            }
            LayerSpec::GlobalAvgPool => {
                let _ = writeln!(out, "layer gap");
            }
        }
    }
    out
}

pub fn model_from_str(path: &Path, text: &str) -> Result<Network> {
    let mut r = LineReader::new(path, text);
    r.header(MODEL_MAGIC)?;
    let dims = r.floats("input_dims", 3)?;
    let input_dims = [dims[0] as usize, dims[1] as usize, dims[2] as usize];
    let num_classes = r.floats("num_classes", 1)?[0] as usize;
    let trained = r.floats("trained", 1)?[0] != 0.0;
    let clean_val_error = {
        let (n, line) = r.next_line()?;
        let rest = line
            .strip_prefix("clean_val_error")
            .ok_or_else(|| ferr(path, format!("line {n}: expected `clean_val_error`")))?
            .trim();
        if rest == "none" {
            None
        } else {
            Some(
                rest.parse::<f64>()
                    .map_err(|e| ferr(path, format!("line {n}: bad float: {e}")))?,
            )
        }
    };
    let n_layers = r.floats("layers", 1)?[0] as usize;
    let mut layers = Vec::with_capacity(n_layers);
    let mut weights = Vec::with_capacity(n_layers);
    let mut norm_affine = Vec::new();
    let mut bn_training_stats = Vec::new();
    for _ in 0..n_layers {
        let (n, line) = r.next_line()?;
        let toks: Vec<&str> = line.split_ascii_whitespace().collect();
        let usize_tok = |i: usize| -> Result<usize> {
            toks.get(i)
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| ferr(path, format!("line {n}: bad layer arguments")))
        };
        match toks.first().copied() {
            Some("layer") => {}
            _ => return Err(ferr(path, format!("line {n}: expected `layer ...`"))),
        }
        match toks.get(1).copied() {
            Some("conv3x3") => {
                let (in_ch, out_ch) = (usize_tok(2)?, usize_tok(3)?);
                layers.push(LayerSpec::Conv3x3 { in_ch, out_ch });
                let w = r.floats("w", out_ch * in_ch * 9)?;
                let b = r.floats("b", out_ch)?;
                weights.push(LayerWeights::Conv { w, b });
            }
            Some("dense") => {
                let (in_dim, out_dim) = (usize_tok(2)?, usize_tok(3)?);
                layers.push(LayerSpec::Dense { in_dim, out_dim });
                let w = r.floats("w", out_dim * in_dim)?;
                let b = r.floats("b", out_dim)?;
                weights.push(LayerWeights::Dense { w, b });
            }
            Some("norm") => {
                let channels = usize_tok(2)?;
                layers.push(LayerSpec::NormSlot { channels });
                weights.push(LayerWeights::None);
                let alpha = r.floats("alpha", channels)?;
                let beta = r.floats("beta", channels)?;
                let eps = r.floats("eps", 1)?[0];
                let mean = r.floats("run_mean", channels)?;
                let var = r.floats("run_var", channels)?;
                norm_affine.push(AffineParams { alpha, beta, eps });
                bn_training_stats.push(
                    ChannelStats::new(mean, var)
                        .map_err(|e| ferr(path, format!("line {n}: {e}")))?,
                );
            }
            Some("relu") => {
                layers.push(LayerSpec::Relu);
                weights.push(LayerWeights::None);
            }
            Some("gap") => {
                layers.push(LayerSpec::GlobalAvgPool);
                weights.push(LayerWeights::None);
            }
            other => {
                return Err(ferr(path, format!("line {n}: unknown layer kind {other:?}")));
            }
        }
    }
    r.expect_done()?;
    Ok(Network {
        layers,
        weights,
        norm_affine,
        bn_training_stats,
        input_dims,
        num_classes,
        trained,
        clean_val_error,
    })
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_string(net))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path)?;
    model_from_str(path, &text)
}

// ---------------------------------------------------------------------------
// dataset / stream exports
// ---------------------------------------------------------------------------

pub fn dataset_to_string(dataset: &[ToyImage]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{DATASET_MAGIC} v{FORMAT_VERSION}");
    let _ = writeln!(out, "dims {IMG_C} {IMG_H} {IMG_W}");
    let _ = writeln!(out, "count {}", dataset.len());
    for img in dataset {
        fmt_floats(&mut out, &format!("sample {}", img.label), img.pixels.values());
    }
    out
}

pub fn dataset_from_str(path: &Path, text: &str) -> Result<Vec<ToyImage>> {
    let mut r = LineReader::new(path, text);
    r.header(DATASET_MAGIC)?;
    let dims = r.floats("dims", 3)?;
    if dims != [IMG_C as f64, IMG_H as f64, IMG_W as f64] {
        return Err(ferr(path, "unsupported image dims"));
    }
    let count = r.floats("count", 1)?[0] as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = r.next_line()?;
        let mut it = line.split_ascii_whitespace();
        if it.next() != Some("sample") {
            return Err(ferr(path, format!("line {n}: expected `sample`")));
        }
        let label: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| ferr(path, format!("line {n}: bad label")))?;
        let vals: std::result::Result<Vec<f64>, _> = it.map(str::parse).collect();
        let vals = vals.map_err(|e| ferr(path, format!("line {n}: bad float: {e}")))?;
        if vals.len() != IMG_C * IMG_H * IMG_W {
            return Err(ferr(path, format!("line {n}: wrong pixel count")));
        }
        let pixels = Tensor::new(&[IMG_C, IMG_H, IMG_W], vals)
            .map_err(|e| ferr(path, format!("line {n}: {e}")))?;
        out.push(ToyImage::new(pixels, label).map_err(|e| ferr(path, format!("line {n}: {e}")))?);
    }
    r.expect_done()?;
    Ok(out)
}

pub fn stream_to_string(stream: &SampleStream) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{STREAM_MAGIC} v{FORMAT_VERSION}");
    let _ = writeln!(out, "dims {IMG_C} {IMG_H} {IMG_W}");
    let _ = writeln!(out, "mode {}", stream.mode.descriptor());
    let _ = writeln!(out, "seed {}", stream.seed);
    let parts = stream.parts();
    let _ = writeln!(out, "count {}", parts.len());
    for (image, provenance, label) in &parts {
        let prov = match provenance {
            Some(spec) => format!("{}:{}", spec.kind.name(), spec.severity),
            None => "clean".to_string(),
        };
        fmt_floats(&mut out, &format!("sample {label} {prov}"), image.values());
    }
    out
}

pub fn stream_from_str(path: &Path, text: &str) -> Result<SampleStream> {
    let mut r = LineReader::new(path, text);
    r.header(STREAM_MAGIC)?;
    let dims = r.floats("dims", 3)?;
    if dims != [IMG_C as f64, IMG_H as f64, IMG_W as f64] {
        return Err(ferr(path, "unsupported image dims"));
    }
    let (n, line) = r.next_line()?;
    let mode_str = line
        .strip_prefix("mode ")
        .ok_or_else(|| ferr(path, format!("line {n}: expected `mode`")))?;
    let mode = StreamMode::parse(mode_str.trim())
        .map_err(|e| ferr(path, format!("line {n}: {e}")))?;
    let seed = r.floats("seed", 1)?[0] as u64;
    let count = r.floats("count", 1)?[0] as usize;
    let mut parts = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = r.next_line()?;
        let mut it = line.split_ascii_whitespace();
        if it.next() != Some("sample") {
            return Err(ferr(path, format!("line {n}: expected `sample`")));
        }
        let label: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| ferr(path, format!("line {n}: bad label")))?;
        let prov_tok = it.next().ok_or_else(|| ferr(path, format!("line {n}: missing provenance")))?;
        let provenance = if prov_tok == "clean" {
            None
        } else {
            let (kind, sev) = prov_tok
                .split_once(':')
                .ok_or_else(|| ferr(path, format!("line {n}: bad provenance `{prov_tok}`")))?;
            let kind = CorruptionKind::parse(kind)
                .map_err(|e| ferr(path, format!("line {n}: {e}")))?;
            let severity: u8 = sev
                .parse()
                .map_err(|_| ferr(path, format!("line {n}: bad severity `{sev}`")))?;
            Some(
                CorruptionSpec::new(kind, severity)
                    .map_err(|e| ferr(path, format!("line {n}: {e}")))?,
            )
        };
        let vals: std::result::Result<Vec<f64>, _> = it.map(str::parse).collect();
        let vals = vals.map_err(|e| ferr(path, format!("line {n}: bad float: {e}")))?;
        let image = Tensor::new(&[IMG_C, IMG_H, IMG_W], vals)
            .map_err(|e| ferr(path, format!("line {n}: {e}")))?;
        parts.push((image, provenance, label));
    }
    r.expect_done()?;
    Ok(SampleStream::from_parts(parts, seed, mode))
}

pub fn save_stream(stream: &SampleStream, path: &Path) -> Result<()> {
    std::fs::write(path, stream_to_string(stream))?;
    Ok(())
}

pub fn load_stream(path: &Path) -> Result<SampleStream> {
    let text = std::fs::read_to_string(path)?;
    stream_from_str(path, &text)
}

// ---------------------------------------------------------------------------
// training config
// ---------------------------------------------------------------------------

/// Key-value config for the `train` subcommand. Unknown keys are errors.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainFileConfig {
    pub n_per_class: usize,
    pub val_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: String,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        TrainFileConfig {
            n_per_class: 40,
            val_per_class: 10,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: "adam".to_string(),
        }
    }
}

pub fn config_from_str(path: &Path, text: &str) -> Result<TrainFileConfig> {
    let mut r = LineReader::new(path, text);
    r.header(CONFIG_MAGIC)?;
    let mut cfg = TrainFileConfig::default();
    loop {
        let (n, line) = match r.next_line() {
            Ok(v) => v,
            Err(_) => break,
        };
        let (key, val) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| ferr(path, format!("line {n}: expected `<key> <value>`")))?;
        let val = val.trim();
        let bad = |what: &str| ferr(path, format!("line {n}: bad {what} `{val}`"));
        match key {
            "n_per_class" => cfg.n_per_class = val.parse().map_err(|_| bad("integer"))?,
            "val_per_class" => cfg.val_per_class = val.parse().map_err(|_| bad("integer"))?,
            "epochs" => cfg.epochs = val.parse().map_err(|_| bad("integer"))?,
            "batch_size" => cfg.batch_size = val.parse().map_err(|_| bad("integer"))?,
            "learning_rate" => cfg.learning_rate = val.parse().map_err(|_| bad("float"))?,
            "optimizer" => {
                if val != "adam" && val != "sgd" {
                    return Err(ferr(path, format!("line {n}: optimizer must be adam or sgd")));
                }
                cfg.optimizer = val.to_string();
            }
            other => return Err(ferr(path, format!("line {n}: unknown key `{other}`"))),
        }
    }
    if cfg.batch_size == 0 || cfg.n_per_class == 0 {
        return Err(ferr(path, "batch_size and n_per_class must be >= 1"));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainFileConfig> {
    let text = std::fs::read_to_string(path)?;
    config_from_str(path, &text)
}
