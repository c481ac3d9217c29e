//! Experiment orchestration: the online adaptation loop (single pass,
//! source-free, unsupervised), protocol sweeps over batch sizes and stream
//! modes, scoring, and CSV / table / SVG reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::augment::{make_views, AugmentationConfig};
use crate::bench::{SampleStream, StreamMode};
use crate::error::{Error, Result};
use crate::model::{
    argmax_row, entropy_loss, forward_adapt, grad_affine, AdaptState, Network, NormOp,
    OptimizerConfig, OptimizerState,
};
use crate::norm::{MixNormBnConfig, MixNormConfig, VariantKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodKind {
    SourceOnly,
    OnlineBn,
    Tent,
    MixNorm,
    MixNormFixedAffine,
    MixNormBn,
    Variant(VariantKind),
}

impl MethodKind {
    pub fn parse(s: &str) -> Result<MethodKind> {
        match s {
            "source_only" => Ok(MethodKind::SourceOnly),
            "online_bn" => Ok(MethodKind::OnlineBn),
            "tent" => Ok(MethodKind::Tent),
            "mixnorm" => Ok(MethodKind::MixNorm),
            "mixnorm_fixed_affine" => Ok(MethodKind::MixNormFixedAffine),
            "mixnormbn" => Ok(MethodKind::MixNormBn),
            other => {
                let name = other.strip_prefix("variant:").unwrap_or(other);
                VariantKind::parse(name)
                    .map(MethodKind::Variant)
                    .map_err(|_| Error::usage(format!("unknown method `{other}`")))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            MethodKind::SourceOnly => "source_only".into(),
            MethodKind::OnlineBn => "online_bn".into(),
            MethodKind::Tent => "tent".into(),
            MethodKind::MixNorm => "mixnorm".into(),
            MethodKind::MixNormFixedAffine => "mixnorm_fixed_affine".into(),
            MethodKind::MixNormBn => "mixnormbn".into(),
            MethodKind::Variant(k) => format!("variant:{}", k.name()),
        }
    }

    /// Per-sample methods are processed one sample at a time regardless of
    /// batch size; grouping is I/O only.
    pub fn is_per_sample(&self) -> bool {
        matches!(
            self,
            MethodKind::MixNorm
                | MethodKind::MixNormFixedAffine
                | MethodKind::Variant(
                    VariantKind::Instance
                        | VariantKind::AugmentationLocal
                        | VariantKind::FixedGlobal
                        | VariantKind::MovingGlobal
                )
        )
    }

    pub fn needs_views(&self) -> bool {
        matches!(
            self,
            MethodKind::MixNorm
                | MethodKind::MixNormFixedAffine
                | MethodKind::MixNormBn
                | MethodKind::Variant(VariantKind::AugmentationLocal)
        )
    }

    pub fn updates_affine(&self) -> bool {
        matches!(self, MethodKind::Tent | MethodKind::MixNorm | MethodKind::MixNormBn)
    }
}

/// A method plus its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Method {
    pub kind: MethodKind,
    /// EMA rate for per-sample mix-norm.
    pub tau: f64,
    /// Batch mix-norm EMA ceiling.
    pub tau_max: f64,
    /// Global/local mixing weight.
    pub m: f64,
    pub n_views: usize,
    pub learning_rate: f64,
}

impl Method {
    /// Shipping defaults; mixed streams raise m to 0.2 for the per-sample
    /// mix-norm family.
    pub fn defaults(kind: MethodKind, mode: StreamMode) -> Method {
        let mixed = matches!(mode, StreamMode::Mixed { .. });
        let m = match kind {
            MethodKind::MixNorm | MethodKind::MixNormFixedAffine if mixed => 0.2,
            _ => 0.05,
        };
        // per-sample updates take one gradient step per stream element, so
        // the per-sample method uses a smaller step than the batch methods
        let learning_rate = match kind {
            MethodKind::MixNorm => 1e-4,
            _ => 1e-3,
        };
        Method { kind, tau: 1e-3, tau_max: 0.9, m, n_views: 1, learning_rate }
    }

    fn norm_op(&self) -> NormOp {
        match self.kind {
            MethodKind::SourceOnly => NormOp::EvalBn,
            MethodKind::OnlineBn | MethodKind::Tent => {
                NormOp::Variant(VariantKind::OnlineBatch)
            }
            MethodKind::MixNorm | MethodKind::MixNormFixedAffine => {
                NormOp::MixNorm(MixNormConfig { tau: self.tau, m: self.m })
            }
            MethodKind::MixNormBn => NormOp::MixNormBn(MixNormBnConfig {
                tau_max: self.tau_max,
                m: self.m,
                tau_override: None,
            }),
            MethodKind::Variant(k) => NormOp::Variant(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub method: String,
    pub stream: String,
    pub batch_size: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub error_rate: f64,
    /// kind name (or "clean") -> (wrong, total)
    pub per_corruption: BTreeMap<String, (usize, usize)>,
    pub predictions: Vec<usize>,
}

/// Run one method over one stream, online. Each element is consumed exactly
/// once, in order; predictions are committed before labels are read; any
/// gradient step happens after the prediction it follows.
pub fn run_adaptation(
    net: &Network,
    method: &Method,
    stream: &SampleStream,
    batch_size: usize,
    seed: u64,
) -> Result<RunResult> {
    let (result, accesses) = run_adaptation_counted(net, method, stream, batch_size, seed)?;
    debug_assert!(accesses.iter().all(|&c| c == 1));
    Ok(result)
}

/// Same as [`run_adaptation`], additionally returning how many times each
/// stream element was read (single-pass contract: all ones).
pub fn run_adaptation_counted(
    net: &Network,
    method: &Method,
    stream: &SampleStream,
    batch_size: usize,
    seed: u64,
) -> Result<(RunResult, Vec<u32>)> {
    if !net.trained {
        return Err(Error::usage("network has not been source-trained"));
    }
    if stream.is_empty() {
        return Err(Error::usage("stream is empty"));
    }
    if batch_size == 0 {
        return Err(Error::usage("batch size must be >= 1"));
    }
    let n = stream.len();
    let mut accesses = vec![0u32; n];
    let frozen = !method.kind.updates_affine();
    let mut adapt = AdaptState::new(net, method.norm_op(), frozen)?;
    let mut optimizer = if method.kind.updates_affine() {
        let mut sizes = Vec::new();
        for st in &adapt.states {
            sizes.push(st.affine.alpha.len());
            sizes.push(st.affine.beta.len());
        }
        Some(OptimizerState::new(OptimizerConfig::adam(method.learning_rate), &sizes))
    } else {
        None
    };
    let mut aug_cfg = AugmentationConfig::new(seed);
    aug_cfg.n_views = method.n_views;
    let [c, h, w] = net.input_dims;

    let mut predictions = vec![usize::MAX; n];
    // process a contiguous index window as one forward + optional update
    let mut process_group = |adapt: &mut AdaptState,
                             optimizer: &mut Option<OptimizerState>,
                             lo: usize,
                             hi: usize|
     -> Result<()> {
        let b = hi - lo;
        let mut vals = Vec::with_capacity(b * c * h * w);
        for i in lo..hi {
            accesses[i] += 1;
            vals.extend_from_slice(stream.entries[i].image.values());
        }
        let originals = Tensor::new(&[b, c, h, w], vals)?;
        let views = if method.kind.needs_views() {
            let mut vvals = Vec::with_capacity(b * method.n_views * c * h * w);
            for i in lo..hi {
                let v = make_views(&stream.entries[i].image, &aug_cfg, i as u64)?;
                vvals.extend_from_slice(v.values());
            }
            Some(Tensor::new(&[b, method.n_views, c, h, w], vvals)?)
        } else {
            None
        };
        let (logits, trace) = forward_adapt(net, adapt, &originals, views.as_ref())?;
        for r in 0..b {
            predictions[lo + r] = argmax_row(&logits, r);
        }
        if let Some(opt) = optimizer {
            let loss = entropy_loss(&logits)?;
            if !loss.is_finite() {
                return Err(Error::numeric("adaptation entropy loss diverged"));
            }
            let grads = grad_affine(net, adapt, &trace, &logits)?;
            let mut grad_groups: Vec<&[f64]> = Vec::new();
            for (ga, gb) in &grads {
                grad_groups.push(ga);
                grad_groups.push(gb);
            }
            let mut param_groups: Vec<&mut [f64]> = Vec::new();
            for st in adapt.states.iter_mut() {
                param_groups.push(st.affine.alpha.as_mut_slice());
                param_groups.push(st.affine.beta.as_mut_slice());
            }
            opt.step(&mut param_groups, &grad_groups)?;
        }
        Ok(())
    };

    if method.kind.is_per_sample() {
        for i in 0..n {
            process_group(&mut adapt, &mut optimizer, i, i + 1)?;
        }
    } else {
        let mut lo = 0;
        while lo < n {
            let hi = (lo + batch_size).min(n);
            process_group(&mut adapt, &mut optimizer, lo, hi)?;
            lo = hi;
        }
    }

    // scoring: labels are read only here, strictly after every prediction
    // above was committed
    let mut wrong = 0usize;
    let mut per_corruption: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (i, entry) in stream.entries.iter().enumerate() {
        let key = match entry.provenance {
            Some(spec) => spec.kind.name().to_string(),
            None => "clean".to_string(),
        };
        let cell = per_corruption.entry(key).or_insert((0, 0));
        cell.1 += 1;
        if predictions[i] != entry.label_for_scoring() {
            wrong += 1;
            cell.0 += 1;
        }
    }
    Ok((
        RunResult {
            method: method.kind.name(),
            stream: stream.mode.descriptor(),
            batch_size,
            seed,
            n_samples: n,
            error_rate: wrong as f64 / n as f64,
            per_corruption,
            predictions,
        },
        accesses,
    ))
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub batch_sizes: Vec<usize>,
    pub stream_modes: Vec<StreamMode>,
    pub seeds: Vec<u64>,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.iter().any(|&b| b == 0) {
            return Err(Error::usage("batch sizes must be >= 1"));
        }
        if self.seeds.is_empty() || self.batch_sizes.is_empty() || self.stream_modes.is_empty() {
            return Err(Error::usage("seeds, batch sizes, and streams must be nonempty"));
        }
        Ok(())
    }
}

pub const DEFAULT_BATCH_SIZES: [usize; 8] = [1, 5, 8, 16, 32, 64, 100, 200];

/// Class-balanced evaluation dataset size used by the CLI and acceptance
/// protocols (10 classes x this many samples).
pub const DEFAULT_EVAL_PER_CLASS: usize = 10;

/// Full cross product method x stream mode x batch size x seed; each cell is
/// an independent run from pristine source state, streams rebuilt per seed.
pub fn sweep(
    net: &Network,
    methods: &[MethodKind],
    dataset: &[crate::bench::ToyImage],
    protocol: &ProtocolConfig,
) -> Result<Vec<RunResult>> {
    protocol.validate()?;
    let mut out = Vec::new();
    for &kind in methods {
        for &mode in &protocol.stream_modes {
            let method = Method::defaults(kind, mode);
            for &seed in &protocol.seeds {
                let stream = crate::bench::build_stream(dataset, mode, seed)?;
                for &bs in &protocol.batch_sizes {
                    out.push(run_adaptation(net, &method, &stream, bs, seed)?);
                }
            }
        }
    }
    out.sort_by(|a, b| {
        (&a.method, &a.stream, a.batch_size, a.seed)
            .cmp(&(&b.method, &b.stream, b.batch_size, b.seed))
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// reporting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
    Svg,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<ReportFormat> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::usage(format!("unknown report format `{other}`"))),
        }
    }
}

/// One renderable result row: the CSV schema, independent of whether it came
/// from in-memory [`RunResult`]s or a results file.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub stream: String,
    pub batch_size: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub error_rate: f64,
    /// (kind name, error rate), in column order.
    pub per_corruption: Vec<(String, f64)>,
}

/// Column set for a row batch: the union of kinds, sorted by name. Rows of
/// the same stream descriptor must agree on their kind set; two results
/// claiming the same stream but breaking it down differently cannot share a
/// schema and are rejected.
fn corruption_columns(rows: &[ReportRow]) -> Result<Vec<String>> {
    let mut per_stream: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
    let mut cols: Vec<String> = Vec::new();
    for r in rows {
        let rc: Vec<&String> = r.per_corruption.iter().map(|(k, _)| k).collect();
        match per_stream.get(r.stream.as_str()) {
            Some(seen) if *seen != rc => {
                return Err(Error::usage(
                    "results carry incompatible per-corruption schemas; report them separately",
                ));
            }
            Some(_) => {}
            None => {
                per_stream.insert(&r.stream, rc.clone());
                for k in rc {
                    if !cols.contains(k) {
                        cols.push(k.clone());
                    }
                }
            }
        }
    }
    cols.sort();
    Ok(cols)
}

fn rows_from_results(results: &[RunResult]) -> Result<Vec<ReportRow>> {
    let mut rows: Vec<ReportRow> = results
        .iter()
        .map(|r| ReportRow {
            method: r.method.clone(),
            stream: r.stream.clone(),
            batch_size: r.batch_size,
            seed: r.seed,
            n_samples: r.n_samples,
            error_rate: r.error_rate,
            per_corruption: r
                .per_corruption
                .iter()
                .map(|(k, &(wrong, total))| (k.clone(), wrong as f64 / total as f64))
                .collect(),
        })
        .collect();
    sort_rows(&mut rows);
    Ok(rows)
}

fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        (&a.method, &a.stream, a.batch_size, a.seed)
            .cmp(&(&b.method, &b.stream, b.batch_size, b.seed))
    });
}

/// Parse rows back from the CSV emitted by [`report`].
pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::usage("empty results csv"))?;
    let fields: Vec<&str> = header.split(',').collect();
    const FIXED: [&str; 6] = ["method", "stream", "batch_size", "seed", "n_samples", "error_rate"];
    if fields.len() < FIXED.len() || fields[..FIXED.len()] != FIXED {
        return Err(Error::usage(format!("unrecognized results csv header `{header}`")));
    }
    let kinds: Vec<String> = fields[FIXED.len()..].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != fields.len() {
            return Err(Error::usage(format!("csv row {}: wrong cell count", ln + 2)));
        }
        let bad = |what: &str| Error::usage(format!("csv row {}: bad {what}", ln + 2));
        rows.push(ReportRow {
            method: cells[0].to_string(),
            stream: cells[1].to_string(),
            batch_size: cells[2].parse().map_err(|_| bad("batch_size"))?,
            seed: cells[3].parse().map_err(|_| bad("seed"))?,
            n_samples: cells[4].parse().map_err(|_| bad("n_samples"))?,
            error_rate: cells[5].parse().map_err(|_| bad("error_rate"))?,
            // empty cells mark kinds absent from this row's stream
            per_corruption: kinds
                .iter()
                .zip(&cells[FIXED.len()..])
                .filter(|(_, v)| !v.is_empty())
                .map(|(k, v)| v.parse().map(|e| (k.clone(), e)).map_err(|_| bad(k)))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

pub fn report(results: &[RunResult], format: ReportFormat) -> Result<String> {
    if results.is_empty() {
        return Err(Error::usage("no results to report"));
    }
    render_rows(&rows_from_results(results)?, format)
}

/// Render already-materialized rows (e.g. parsed from sweep output files).
pub fn render_rows(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::usage("no results to report"));
    }
    let cols = corruption_columns(rows)?;
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    match format {
        ReportFormat::Csv => Ok(report_csv(&sorted, &cols)),
        ReportFormat::Table => Ok(report_table(&sorted, &cols)),
        ReportFormat::Svg => Ok(report_svg(&sorted)),
    }
}

fn report_csv(rows: &[ReportRow], cols: &[String]) -> String {
    let mut out = String::new();
    out.push_str("method,stream,batch_size,seed,n_samples,error_rate");
    for c in cols {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{:.6}",
            r.method, r.stream, r.batch_size, r.seed, r.n_samples, r.error_rate
        );
        for c in cols {
            match r.per_corruption.iter().find(|(k, _)| k == c) {
                Some((_, e)) => {
                    let _ = write!(out, ",{e:.6}");
                }
                // kind absent from this row's stream: empty cell
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn report_table(rows_in: &[ReportRow], cols: &[String]) -> String {
    let mut header = vec![
        "method".to_string(),
        "stream".to_string(),
        "batch".to_string(),
        "seed".to_string(),
        "n".to_string(),
        "error".to_string(),
    ];
    header.extend(cols.iter().cloned());
    let mut rows: Vec<Vec<String>> = vec![header];
    for r in rows_in {
        let mut row = vec![
            r.method.clone(),
            r.stream.clone(),
            r.batch_size.to_string(),
            r.seed.to_string(),
            r.n_samples.to_string(),
            format!("{:.4}", r.error_rate),
        ];
        for c in cols {
            row.push(match r.per_corruption.iter().find(|(k, _)| k == c) {
                Some((_, e)) => format!("{e:.4}"),
                None => "-".to_string(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for (ri, row) in rows.iter().enumerate() {
        for (i, cell) in row.iter().enumerate() {
            let _ = write!(out, "{:<width$}", cell, width = widths[i] + 2);
        }
        out.push('\n');
        if ri == 0 {
            let total: usize = widths.iter().map(|w| w + 2).sum();
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// Error-rate vs batch-size curves, one panel per stream mode, one polyline
/// per method. Error bars are omitted; multiple seeds are averaged.
fn report_svg(results: &[ReportRow]) -> String {
    let mut streams: Vec<String> = results.iter().map(|r| r.stream.clone()).collect();
    streams.sort();
    streams.dedup();
    let mut methods: Vec<String> = results.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    const PALETTE: [&str; 8] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];
    let (pw, ph, margin) = (360.0, 260.0, 48.0);
    let width = pw * streams.len() as f64;
    let height = ph + 70.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"11\">"
    );
    for (si, stream) in streams.iter().enumerate() {
        let x0 = si as f64 * pw + margin;
        let y0 = 20.0;
        let iw = pw - margin - 16.0;
        let ih = ph - y0 - 30.0;
        let mut batch_sizes: Vec<usize> = results
            .iter()
            .filter(|r| &r.stream == stream)
            .map(|r| r.batch_size)
            .collect();
        batch_sizes.sort();
        batch_sizes.dedup();
        let bx = |bs: usize| -> f64 {
            let idx = batch_sizes.iter().position(|&b| b == bs).unwrap();
            if batch_sizes.len() == 1 {
                x0 + iw / 2.0
            } else {
                x0 + iw * idx as f64 / (batch_sizes.len() - 1) as f64
            }
        };
        let ey = |e: f64| y0 + ih * (1.0 - e);
        let _ = writeln!(
            out,
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{iw}\" height=\"{ih}\" fill=\"none\" stroke=\"#333\"/>"
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"14\" text-anchor=\"middle\">{stream}</text>",
            x0 + iw / 2.0
        );
        for tick in [0.0f64, 0.25, 0.5, 0.75, 1.0] {
            let y = ey(tick);
            let _ = writeln!(
                out,
                "<line x1=\"{}\" y1=\"{y}\" x2=\"{x0}\" y2=\"{y}\" stroke=\"#333\"/><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{tick:.2}</text>",
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0
            );
        }
        for &bs in &batch_sizes {
            let x = bx(bs);
            let _ = writeln!(
                out,
                "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"#333\"/><text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{bs}</text>",
                y0 + ih,
                y0 + ih + 4.0,
                y0 + ih + 16.0
            );
        }
        for (mi, method) in methods.iter().enumerate() {
            let mut pts: Vec<(usize, f64, usize)> = Vec::new(); // (bs, sum, count)
            for r in results.iter().filter(|r| &r.stream == stream && &r.method == method) {
                match pts.iter_mut().find(|p| p.0 == r.batch_size) {
                    Some(p) => {
                        p.1 += r.error_rate;
                        p.2 += 1;
                    }
                    None => pts.push((r.batch_size, r.error_rate, 1)),
                }
            }
            pts.sort_by_key(|p| p.0);
            if pts.is_empty() {
                continue;
            }
            let color = PALETTE[mi % PALETTE.len()];
            let path: Vec<String> = pts
                .iter()
                .map(|&(bs, sum, cnt)| format!("{:.2},{:.2}", bx(bs), ey(sum / cnt as f64)))
                .collect();
            let _ = writeln!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                path.join(" ")
            );
            for &(bs, sum, cnt) in &pts {
                let _ = writeln!(
                    out,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>",
                    bx(bs),
                    ey(sum / cnt as f64)
                );
            }
        }
    }
    for (mi, method) in methods.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let x = margin + mi as f64 * 150.0;
        let y = ph + 30.0;
        let _ = writeln!(
            out,
            "<rect x=\"{x}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\">{method}</text>",
            y - 10.0,
            x + 16.0,
            y
        );
    }
    out.push_str("</svg>\n");
    out
}

// ---------------------------------------------------------------------------
// hyperparameter tuning
// ---------------------------------------------------------------------------

pub const TUNE_M_GRID: [f64; 4] = [0.01, 0.05, 0.1, 0.2];
pub const TUNE_TAU_GRID: [f64; 2] = [1e-6, 1e-3];

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub method: String,
    pub grid: Vec<(f64, f64, f64)>, // (m, tau, error)
    pub best_m: f64,
    pub best_tau: f64,
    pub best_error: f64,
}

/// Grid-search m and tau on the reserved gaussian_noise severity-5 split.
pub fn tune(
    net: &Network,
    kind: MethodKind,
    dataset: &[crate::bench::ToyImage],
    seed: u64,
) -> Result<TuneResult> {
    if !matches!(kind, MethodKind::MixNorm | MethodKind::MixNormFixedAffine) {
        return Err(Error::usage(
            "tuning grid applies to mixnorm and mixnorm_fixed_affine only",
        ));
    }
    let mode = StreamMode::Single { kind: crate::bench::CorruptionKind::GaussianNoise, severity: 5 };
    let stream = crate::bench::build_stream(dataset, mode, seed)?;
    let mut grid = Vec::new();
    let (mut best_m, mut best_tau, mut best_error) = (TUNE_M_GRID[0], TUNE_TAU_GRID[0], f64::MAX);
    for &m in &TUNE_M_GRID {
        for &tau in &TUNE_TAU_GRID {
            let mut method = Method::defaults(kind, mode);
            method.m = m;
            method.tau = tau;
            let res = run_adaptation(net, &method, &stream, 1, seed)?;
            grid.push((m, tau, res.error_rate));
            if res.error_rate < best_error {
                best_error = res.error_rate;
                best_m = m;
                best_tau = tau;
            }
        }
    }
    Ok(TuneResult { method: kind.name(), grid, best_m, best_tau, best_error })
}

pub fn tune_report(res: &TuneResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method {}", res.method);
    let _ = writeln!(out, "split single:gaussian_noise:5");
    let _ = writeln!(out, "m tau error");
    for (m, tau, e) in &res.grid {
        let _ = writeln!(out, "{m} {tau} {e:.6}");
    }
    let _ = writeln!(out, "best m={} tau={} error={:.6}", res.best_m, res.best_tau, res.best_error);
    out
}
