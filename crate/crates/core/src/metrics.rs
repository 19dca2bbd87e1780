//! Per-sample evaluation metrics, target captions, and grouped aggregation
//! with percentage deltas against a baseline model.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::mock::{caption_for_states, SyntheticFace};
use crate::backends::{
    BackendError, BackendResult, Capability, CompletionParams, EmbedInput, Embedder, QualityScorer, TextCompleter,
};
use crate::imaging::{self, FaceImage, ImagingError, MaskedDiff, RegionMask};
use crate::instructions::{AttributeEdit, AttributeKind};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no samples to aggregate")]
    EmptyInput,
    #[error("baseline model {0:?} has no results")]
    UnknownBaseline(String),
    #[error("sample {sample_id}: {message}")]
    InvalidSample { sample_id: String, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSim {
    pub value: f64,
    /// One of the embeddings was the zero vector; `value` is then 0.
    pub no_signal: bool,
}

/// Cosine similarity between the embeddings of `result` and `target_caption`.
pub fn clip_sim(result: &FaceImage, target_caption: &str, embedder: &dyn Embedder) -> BackendResult<ClipSim> {
    let image = embedder.embed(EmbedInput::Image(result))?;
    let text = embedder.embed(EmbedInput::Text(target_caption))?;
    if image.dim() != text.dim() {
        return Err(BackendError::Protocol {
            capability: Capability::Embed,
            message: format!("image dim {} but text dim {}", image.dim(), text.dim()),
        });
    }
    Ok(match image.cosine(&text) {
        Some(value) => ClipSim {
            value,
            no_signal: false,
        },
        None => ClipSim {
            value: 0.0,
            no_signal: true,
        },
    })
}

/// Mean absolute difference outside the union of `target_masks`, with
/// `output` first resized to the input's dimensions.
pub fn preserve_l1(
    input: &FaceImage,
    output: &FaceImage,
    target_masks: &[RegionMask],
) -> Result<MaskedDiff, ImagingError> {
    let aligned = imaging::resize(output, input.width(), input.height())?;
    if target_masks.is_empty() {
        return imaging::masked_mean_abs_diff(input, &aligned, None);
    }
    let union = imaging::union_masks(target_masks)?;
    imaging::masked_mean_abs_diff(input, &aligned, Some(&union))
}

/// Scorer passthrough, rejecting scores outside `[0, 1]`.
pub fn quality(img: &FaceImage, scorer: &dyn QualityScorer) -> BackendResult<f64> {
    let score = scorer.score(img)?;
    if !(0.0..=1.0).contains(&score) {
        return Err(BackendError::Protocol {
            capability: Capability::Quality,
            message: format!("quality score {score} outside [0, 1]"),
        });
    }
    Ok(score)
}

pub fn caption_rewrite_prompt(caption: &str, instruction: &str) -> String {
    format!(
        "Rewrite the face caption so that it describes the face after the editing instruction has been applied. \
         Keep every detail the instruction does not change.\nCaption: {caption}\nInstruction: {instruction}\nNew caption:"
    )
}

/// Target captions keyed by (caption, instruction).
#[derive(Debug, Default)]
pub struct CaptionCache {
    entries: RwLock<HashMap<(String, String), String>>,
}

impl CaptionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rewrites `original_caption` according to `instruction` with the
/// completer. Cached; a hit never calls the backend.
pub fn target_caption(
    original_caption: &str,
    instruction: &str,
    completer: &dyn TextCompleter,
    cache: &CaptionCache,
) -> BackendResult<String> {
    let key = (original_caption.to_string(), instruction.to_string());
    if let Some(hit) = cache.entries.read().expect("poisoned").get(&key) {
        return Ok(hit.clone());
    }
    let reply = completer.complete(
        &caption_rewrite_prompt(original_caption, instruction),
        &CompletionParams::default(),
    )?;
    let caption = reply.trim().to_string();
    cache
        .entries
        .write()
        .expect("poisoned")
        .entry(key)
        .or_insert(caption.clone());
    Ok(caption)
}

/// Caption of the synthetic face `input` after `edits`, computed directly
/// from its band states.
pub fn mock_target_caption(input: &FaceImage, edits: &[AttributeEdit]) -> BackendResult<String> {
    let mut face = SyntheticFace::decode(input)?;
    for edit in edits {
        face.set_state(edit.kind, &edit.change)?;
    }
    Ok(caption_for_states(
        face.states().into_iter().map(|(k, s)| (k, s.unwrap_or("corrupted"))),
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgement {
    pub edit: AttributeEdit,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEvaluation {
    pub sample_id: String,
    pub model_tag: String,
    pub attribute_count: usize,
    pub clip_sim: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clip_no_signal: bool,
    /// One entry per requested edit; unexecuted edits are judged incorrect.
    pub judgements: Vec<Judgement>,
    pub preserve_l1: f64,
    pub quality: f64,
    pub target_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SampleEvaluation {
    pub fn correct_count(&self) -> usize {
        self.judgements.iter().filter(|j| j.correct).count()
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let invalid = |message: String| MetricsError::InvalidSample {
            sample_id: self.sample_id.clone(),
            message,
        };
        if self.judgements.len() != self.attribute_count {
            return Err(invalid(format!(
                "{} judgements for {} attributes",
                self.judgements.len(),
                self.attribute_count
            )));
        }
        for (name, v) in [
            ("clip_sim", self.clip_sim),
            ("preserve_l1", self.preserve_l1),
            ("quality", self.quality),
        ] {
            if !v.is_finite() {
                return Err(invalid(format!("{name} is not finite")));
            }
        }
        Ok(())
    }
}

/// Correct judgements over all judgements, pooled across samples.
pub fn coverage(samples: &[SampleEvaluation]) -> Result<f64, MetricsError> {
    let total: usize = samples.iter().map(|s| s.judgements.len()).sum();
    if total == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let correct: usize = samples.iter().map(SampleEvaluation::correct_count).sum();
    Ok(correct as f64 / total as f64)
}

pub fn write_jsonl(path: &Path, evals: &[SampleEvaluation]) -> Result<(), MetricsError> {
    let io = |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for e in evals {
        let line = serde_json::to_string(e).expect("evaluation serializes");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SampleEvaluation>, MetricsError> {
    let io = |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricsError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    ModelAndCount,
    ModelOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub clip_sim_mean: f64,
    pub coverage: f64,
    pub preserve_l1_mean: f64,
    pub quality_mean: f64,
    pub n_samples: usize,
}

/// Signed percentage change of each metric against the baseline group,
/// rounded half-up to two decimals. `None` where the baseline value is 0.
/// Baseline groups carry no deltas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDeltas {
    pub clip_sim: Option<f64>,
    pub coverage: Option<f64>,
    pub preserve_l1: Option<f64>,
    pub quality: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub model_tag: String,
    /// `None` when grouped by model only.
    pub attribute_count: Option<usize>,
    pub stats: GroupStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<GroupDeltas>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Sorted by (model_tag, attribute_count).
    pub groups: Vec<GroupReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

impl MetricsReport {
    pub fn group(&self, model_tag: &str, attribute_count: Option<usize>) -> Option<&GroupReport> {
        self.groups
            .iter()
            .find(|g| g.model_tag == model_tag && g.attribute_count == attribute_count)
    }
}

fn round2_half_up(v: f64) -> f64 {
    let scaled = v * 100.0;
    // Nudge values that sit a hair below .5 because of binary representation.
    (scaled + scaled.signum() * 1e-9).round() / 100.0
}

/// `(value - baseline) / baseline` as a percentage with two decimals.
pub fn delta_percent(value: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 || !baseline.is_finite() || !value.is_finite() {
        return None;
    }
    Some(round2_half_up((value - baseline) / baseline * 100.0))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn group_stats(samples: &[SampleEvaluation]) -> Result<GroupStats, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(GroupStats {
        clip_sim_mean: mean(samples.iter().map(|s| s.clip_sim)),
        coverage: coverage(samples)?,
        preserve_l1_mean: mean(samples.iter().map(|s| s.preserve_l1)),
        quality_mean: mean(samples.iter().map(|s| s.quality)),
        n_samples: samples.len(),
    })
}

pub fn deltas(stats: &GroupStats, base: &GroupStats) -> GroupDeltas {
    GroupDeltas {
        clip_sim: delta_percent(stats.clip_sim_mean, base.clip_sim_mean),
        coverage: delta_percent(stats.coverage, base.coverage),
        preserve_l1: delta_percent(stats.preserve_l1_mean, base.preserve_l1_mean),
        quality: delta_percent(stats.quality_mean, base.quality_mean),
    }
}

/// Groups are compared with the baseline group of the same attribute count.
pub fn report_from_stats(
    stats: BTreeMap<(String, Option<usize>), GroupStats>,
    baseline_tag: Option<&str>,
) -> Result<MetricsReport, MetricsError> {
    if let Some(tag) = baseline_tag {
        if !stats.keys().any(|(t, _)| t == tag) {
            return Err(MetricsError::UnknownBaseline(tag.to_string()));
        }
    }
    let groups = stats
        .iter()
        .map(|((tag, count), s)| GroupReport {
            model_tag: tag.clone(),
            attribute_count: *count,
            stats: *s,
            delta: baseline_tag
                .filter(|b| b != tag)
                .and_then(|b| stats.get(&(b.to_string(), *count)))
                .map(|base| deltas(s, base)),
        })
        .collect();
    Ok(MetricsReport {
        groups,
        baseline: baseline_tag.map(str::to_string),
    })
}

pub fn aggregate(
    evals: &[SampleEvaluation],
    grouping: Grouping,
    baseline_tag: Option<&str>,
) -> Result<MetricsReport, MetricsError> {
    if evals.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut buckets: BTreeMap<(String, Option<usize>), Vec<SampleEvaluation>> = BTreeMap::new();
    for e in evals {
        let count = match grouping {
            Grouping::ModelAndCount => Some(e.attribute_count),
            Grouping::ModelOnly => None,
        };
        buckets.entry((e.model_tag.clone(), count)).or_default().push(e.clone());
    }
    let stats = buckets
        .into_iter()
        .map(|(k, v)| group_stats(&v).map(|s| (k, s)))
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    report_from_stats(stats, baseline_tag)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    ClipSim,
    Coverage,
    PreserveL1,
    Quality,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::ClipSim, Metric::Coverage, Metric::PreserveL1, Metric::Quality];

    pub fn name(self) -> &'static str {
        match self {
            Metric::ClipSim => "CLIPSim",
            Metric::Coverage => "Coverage",
            Metric::PreserveL1 => "Preserve L1",
            Metric::Quality => "Quality",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Metric::ClipSim => "clip_sim",
            Metric::Coverage => "coverage",
            Metric::PreserveL1 => "preserve_l1",
            Metric::Quality => "quality",
        }
    }

    pub fn precision(self) -> usize {
        match self {
            Metric::ClipSim => 4,
            _ => 3,
        }
    }

    pub fn value(self, s: &GroupStats) -> f64 {
        match self {
            Metric::ClipSim => s.clip_sim_mean,
            Metric::Coverage => s.coverage,
            Metric::PreserveL1 => s.preserve_l1_mean,
            Metric::Quality => s.quality_mean,
        }
    }

    pub fn delta(self, d: &GroupDeltas) -> Option<f64> {
        match self {
            Metric::ClipSim => d.clip_sim,
            Metric::Coverage => d.coverage,
            Metric::PreserveL1 => d.preserve_l1,
            Metric::Quality => d.quality,
        }
    }
}

/// "+43.93%" / "-5.00%".
pub fn format_delta(delta: f64) -> String {
    format!("{}{:.2}%", if delta >= 0.0 { "+" } else { "-" }, delta.abs())
}

/// Value at the metric's precision, followed by the delta in parentheses
/// when there is one.
pub fn format_cell(metric: Metric, group: &GroupReport) -> String {
    let value = format!("{:.*}", metric.precision(), metric.value(&group.stats));
    match group.delta.as_ref().and_then(|d| metric.delta(d)) {
        Some(d) => format!("{value} ({})", format_delta(d)),
        None => value,
    }
}

fn column_label(count: Option<usize>) -> String {
    count.map_or_else(|| "all".to_string(), |n| format!("N={n}"))
}

/// One Markdown table per metric: models as rows, attribute counts as
/// columns.
pub fn render_markdown(report: &MetricsReport) -> String {
    let counts: BTreeSet<Option<usize>> = report.groups.iter().map(|g| g.attribute_count).collect();
    let models: BTreeSet<&str> = report.groups.iter().map(|g| g.model_tag.as_str()).collect();
    let mut out = String::new();
    for metric in Metric::ALL {
        let _ = writeln!(out, "### {}\n", metric.name());
        let header: Vec<String> = counts.iter().map(|c| column_label(*c)).collect();
        let _ = writeln!(out, "| model | {} |", header.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(counts.len()));
        for model in &models {
            let cells: Vec<String> = counts
                .iter()
                .map(|c| {
                    report
                        .group(model, *c)
                        .map_or_else(|| "-".to_string(), |g| format_cell(metric, g))
                })
                .collect();
            let _ = writeln!(out, "| {model} | {} |", cells.join(" | "));
        }
        out.push('\n');
    }
    out
}

/// Long-format CSV: metric, model, attribute count, value, delta.
pub fn render_csv(report: &MetricsReport) -> String {
    let mut out = String::from("metric,model_tag,attribute_count,value,delta_percent,n_samples\n");
    for metric in Metric::ALL {
        for g in &report.groups {
            let delta = g
                .delta
                .as_ref()
                .and_then(|d| metric.delta(d))
                .map_or_else(String::new, |d| format!("{d:.2}"));
            let _ = writeln!(
                out,
                "{},{},{},{:.*},{},{}",
                metric.key(),
                csv_field(&g.model_tag),
                g.attribute_count.map_or_else(|| "all".to_string(), |n| n.to_string()),
                metric.precision(),
                metric.value(&g.stats),
                delta,
                g.stats.n_samples
            );
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Attribute kinds of a sample's judgements, in order.
pub fn judged_kinds(e: &SampleEvaluation) -> Vec<AttributeKind> {
    e.judgements.iter().map(|j| j.edit.kind).collect()
}
