//! Test-set construction, experiment runs over a test set, and report
//! rendering across result directories.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::seq::index::sample as sample_indices;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::mock::SyntheticFace;
use crate::backends::wire::{decode_image, encode_image};
use crate::backends::{BackendError, BackendSet, BackendsConfig};
use crate::chain::{ChainExecutor, EditTrace, StepStatus};
use crate::dataset::{ingest_face_masks, CorpusEntry, DatasetError, Thresholds};
use crate::decomposer::{decompose_llm, decompose_rule_based, DecompositionError, PromptTemplate};
use crate::imaging::{self, FaceImage, ImagingError, RegionMask};
use crate::instructions::{
    compose_multi, AttributeEdit, AttributeKind, InstructionError, Lexicon, MultiAttributeInstruction,
};
use crate::metrics::{self, CaptionCache, Grouping, Judgement, MetricsError, MetricsReport, SampleEvaluation};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("only {available} faces pass the quality floor, {required} requested ({} short)", required - available)]
    InsufficientFaces { required: usize, available: usize },
    #[error("invalid test-set spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("results in {first} and {other} come from different test sets")]
    MixedTestsets { first: PathBuf, other: PathBuf },
    #[error("test set {path} is corrupt: {message}")]
    CorruptTestset { path: PathBuf, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_n_faces() -> usize {
    200
}

fn default_quality_floor() -> f64 {
    0.7
}

fn default_counts() -> Vec<usize> {
    vec![2, 3, 4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSetSpec {
    #[serde(default = "default_n_faces")]
    pub n_faces: usize,
    #[serde(default = "default_quality_floor")]
    pub quality_floor: f64,
    #[serde(default = "default_counts")]
    pub attribute_counts: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TestSetSpec {
    fn default() -> Self {
        Self {
            n_faces: default_n_faces(),
            quality_floor: default_quality_floor(),
            attribute_counts: default_counts(),
            seed: 0,
        }
    }
}

impl TestSetSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_faces == 0 {
            return Err(HarnessError::InvalidSpec("n_faces must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.quality_floor) {
            return Err(HarnessError::InvalidSpec(format!(
                "quality floor {} is outside [0, 1]",
                self.quality_floor
            )));
        }
        if self.attribute_counts.is_empty() {
            return Err(HarnessError::InvalidSpec("no attribute counts".into()));
        }
        if let Some(bad) = self
            .attribute_counts
            .iter()
            .find(|&&n| n == 0 || n > AttributeKind::ALL.len())
        {
            return Err(HarnessError::InvalidSpec(format!(
                "attribute count {bad} is outside 1..=9"
            )));
        }
        Ok(())
    }
}

/// One face with one compound instruction, plus everything needed to
/// score the result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSample {
    pub sample_id: String,
    pub face_id: String,
    pub attribute_count: usize,
    pub instruction: MultiAttributeInstruction,
    pub target_caption: String,
    /// Base64 PNG of the input face.
    pub image_png: String,
    /// Base64 PNG of the union of the edited attributes' masks.
    pub mask_png: String,
}

impl TestSample {
    pub fn image(&self) -> Result<FaceImage, ImagingError> {
        decode_image(&self.image_png)
    }

    pub fn mask(&self) -> Result<RegionMask, ImagingError> {
        let bytes = BASE64
            .decode(self.mask_png.as_bytes())
            .map_err(|e| ImagingError::Decode(e.to_string()))?;
        RegionMask::from_png_bytes(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    /// Hex SHA-256 over the spec and samples.
    pub testset_id: String,
    pub spec: TestSetSpec,
    pub samples: Vec<TestSample>,
}

impl TestSet {
    fn new(spec: TestSetSpec, samples: Vec<TestSample>) -> Self {
        let mut set = Self {
            testset_id: String::new(),
            spec,
            samples,
        };
        set.testset_id = set.compute_id();
        set
    }

    fn compute_id(&self) -> String {
        let body = serde_json::to_vec(&(&self.spec, &self.samples)).expect("test set serializes");
        hex::encode(Sha256::digest(body))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("test set serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let set: TestSet = serde_json::from_str(&text).map_err(|e| HarnessError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if set.compute_id() != set.testset_id {
            return Err(HarnessError::CorruptTestset {
                path: path.to_path_buf(),
                message: "content does not match testset_id".into(),
            });
        }
        Ok(set)
    }
}

struct Candidate<'a> {
    entry: &'a CorpusEntry,
    image: FaceImage,
}

/// Draws `n` distinct kinds from `available` and, for each, a change token
/// that differs from the face's current state when that state is readable.
fn sample_edits(
    rng: &mut ChaCha8Rng,
    available: &[AttributeKind],
    n: usize,
    current: Option<&SyntheticFace>,
) -> Vec<AttributeEdit> {
    let lex = Lexicon::default_ref();
    let mut kinds = available.to_vec();
    kinds.shuffle(rng);
    kinds.truncate(n);
    kinds
        .into_iter()
        .map(|kind| {
            let state = current.and_then(|f| f.state(kind));
            let options: Vec<&String> = lex.changes(kind).iter().filter(|c| Some(c.as_str()) != state).collect();
            let change = options.choose(rng).expect("every kind has at least two changes");
            AttributeEdit {
                kind,
                change: (*change).clone(),
            }
        })
        .collect()
}

/// Filters the corpus by quality, samples `spec.n_faces` faces and attaches
/// one compound instruction per requested attribute count, with target
/// captions and mask unions precomputed. Output depends only on the
/// corpus contents, the spec and the backends, not on corpus order.
pub fn build_testset(
    spec: &TestSetSpec,
    corpus: &[CorpusEntry],
    backends: &BackendSet,
) -> Result<TestSet, HarnessError> {
    spec.validate()?;
    let mut sorted: Vec<&CorpusEntry> = corpus.iter().collect();
    sorted.sort_by(|a, b| a.face_id.cmp(&b.face_id));
    sorted.dedup_by(|a, b| a.face_id == b.face_id);

    let scored: Vec<Result<Option<Candidate<'_>>, HarnessError>> = sorted
        .par_iter()
        .map(|entry| {
            let image = imaging::load_png(&entry.image_path)?;
            let q = metrics::quality(&image, backends.quality.as_ref())?;
            Ok((q >= spec.quality_floor).then_some(Candidate { entry, image }))
        })
        .collect();
    let passing: Vec<Candidate<'_>> = scored
        .into_iter()
        .filter_map(Result::transpose)
        .collect::<Result<_, _>>()?;
    if passing.len() < spec.n_faces {
        return Err(HarnessError::InsufficientFaces {
            required: spec.n_faces,
            available: passing.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen: Vec<usize> = sample_indices(&mut rng, passing.len(), spec.n_faces).into_vec();
    chosen.sort_unstable();
    let cache = CaptionCache::new();
    let mut samples = Vec::with_capacity(spec.n_faces * spec.attribute_counts.len());
    for idx in chosen {
        let Candidate { entry, image } = &passing[idx];
        let masks = ingest_face_masks(&entry.annotation_dir, &entry.face_id)?;
        let available: Vec<AttributeKind> = masks.keys().copied().collect();
        let current = SyntheticFace::decode(image).ok();
        let caption = backends.captioner.caption(image)?;
        for &n in &spec.attribute_counts {
            if available.len() < n {
                return Err(HarnessError::InvalidSpec(format!(
                    "face {} has masks for {} attributes, {n} requested",
                    entry.face_id,
                    available.len()
                )));
            }
            let edits = sample_edits(&mut rng, &available, n, current.as_ref());
            let instruction = compose_multi(&edits, rng.random())?;
            let target_caption =
                metrics::target_caption(&caption, &instruction.text, backends.completer.as_ref(), &cache)?;
            let parts: Vec<RegionMask> = edits.iter().map(|e| masks[&e.kind].clone()).collect();
            let mask = imaging::union_masks(&parts)?;
            samples.push(TestSample {
                sample_id: format!("{}/n{n}", entry.face_id),
                face_id: entry.face_id.clone(),
                attribute_count: n,
                instruction,
                target_caption,
                image_png: encode_image(image)?,
                mask_png: BASE64.encode(mask.to_png_bytes()?),
            });
        }
    }
    Ok(TestSet::new(spec.clone(), samples))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decomposition {
    /// Single-shot: the compound instruction is one edit.
    None,
    Llm,
    #[default]
    RuleBased,
}

fn default_model_tag() -> String {
    "coie".into()
}

fn default_workers() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_decompose_retries() -> u32 {
    2
}

/// Settings for one experiment run, and the shared configuration file
/// read by the other commands.
///
/// ```toml
/// model_tag = "coie-sr"
/// decomposition = "rule_based"   # none | llm | rule_based
/// sr_enabled = true
/// workers = 4
/// seed = 0
/// [backends]
/// mock = true
/// [thresholds]
/// clip = 0.25
/// quality = 0.5
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_model_tag")]
    pub model_tag: String,
    #[serde(default)]
    pub decomposition: Decomposition,
    #[serde(default = "default_true")]
    pub sr_enabled: bool,
    /// Absent means the in-process mock backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backends: Option<BackendsConfig>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<PathBuf>,
    #[serde(default = "default_decompose_retries")]
    pub decompose_retries: u32,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.model_tag.trim().is_empty() {
            return Err(HarnessError::Config("model_tag is empty".into()));
        }
        if self.workers == 0 {
            return Err(HarnessError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn backend_set(&self) -> Result<BackendSet, HarnessError> {
        Ok(BackendSet::from_config(self.backends.as_ref())?)
    }

    pub fn prompt(&self) -> Result<PromptTemplate, HarnessError> {
        Ok(match &self.prompt_template {
            Some(path) => PromptTemplate::load(path)?,
            None => PromptTemplate::default_ref().clone(),
        })
    }
}

/// What a results directory was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub testset_id: String,
    pub config: ExperimentConfig,
    pub backends: String,
    pub n_samples: usize,
    pub n_errors: usize,
}

/// Result of one sample before judging.
struct Executed {
    output: FaceImage,
    /// Kinds named by steps that were applied; `None` when every step ran.
    applied_kinds: Option<BTreeSet<AttributeKind>>,
    error: Option<String>,
}

fn applied_kinds(trace: &EditTrace) -> BTreeSet<AttributeKind> {
    trace
        .steps
        .iter()
        .filter(|s| s.status == StepStatus::Applied)
        .flat_map(|s| s.instruction.kinds())
        .collect()
}

fn execute(
    config: &ExperimentConfig,
    backends: &BackendSet,
    template: &PromptTemplate,
    input: &FaceImage,
    instr: &MultiAttributeInstruction,
) -> Executed {
    let executor = ChainExecutor::from_backends(backends, config.sr_enabled);
    let chain = match config.decomposition {
        Decomposition::None => None,
        Decomposition::RuleBased => Some(decompose_rule_based(instr)),
        Decomposition::Llm => {
            Some(decompose_llm(instr, backends.completer.as_ref(), template, config.decompose_retries).map(|r| r.chain))
        }
    };
    let traced = match chain {
        None => executor.run_single_shot(input, instr),
        Some(Ok(chain)) => executor.run_chain(input, &chain),
        Some(Err(e)) => {
            return Executed {
                output: input.clone(),
                applied_kinds: Some(BTreeSet::new()),
                error: Some(format!("decomposition failed: {e}")),
            }
        }
    };
    match traced {
        Ok(trace) => Executed {
            output: trace.final_image().clone(),
            applied_kinds: None,
            error: None,
        },
        Err(aborted) => Executed {
            output: aborted.trace.final_image().clone(),
            applied_kinds: Some(applied_kinds(&aborted.trace)),
            error: Some(format!("step {} failed: {}", aborted.step, aborted.source)),
        },
    }
}

fn evaluate_sample(
    config: &ExperimentConfig,
    backends: &BackendSet,
    template: &PromptTemplate,
    sample: &TestSample,
) -> Result<SampleEvaluation, HarnessError> {
    let input = sample.image()?;
    let mask = sample.mask()?;
    let instr = &sample.instruction;
    let run = execute(config, backends, template, &input, instr);
    let mut errors: Vec<String> = run.error.into_iter().collect();

    let mut judgements = Vec::with_capacity(instr.edits.len());
    for edit in &instr.edits {
        let executed = run.applied_kinds.as_ref().is_none_or(|k| k.contains(&edit.kind));
        let co_edited: Vec<AttributeKind> = instr.kinds().into_iter().filter(|&k| k != edit.kind).collect();
        let correct = executed
            && backends
                .judge
                .judge(&input, &run.output, edit, &co_edited)
                .unwrap_or_else(|e| {
                    errors.push(format!("judge {}: {e}", edit.kind));
                    false
                });
        judgements.push(Judgement {
            edit: edit.clone(),
            correct,
        });
    }
    let clip = metrics::clip_sim(&run.output, &sample.target_caption, backends.embedder.as_ref()).unwrap_or_else(|e| {
        errors.push(format!("clip: {e}"));
        metrics::ClipSim {
            value: 0.0,
            no_signal: true,
        }
    });
    let preserve = metrics::preserve_l1(&input, &run.output, std::slice::from_ref(&mask))?;
    let quality = metrics::quality(&run.output, backends.quality.as_ref()).unwrap_or_else(|e| {
        errors.push(format!("quality: {e}"));
        0.0
    });
    Ok(SampleEvaluation {
        sample_id: sample.sample_id.clone(),
        model_tag: config.model_tag.clone(),
        attribute_count: sample.attribute_count,
        clip_sim: clip.value,
        clip_no_signal: clip.no_signal,
        judgements,
        preserve_l1: preserve.value,
        quality,
        target_caption: sample.target_caption.clone(),
        error: (!errors.is_empty()).then(|| errors.join("; ")),
    })
}

/// Runs every sample of the test set and returns evaluations sorted by
/// sample id. Backend failures are recorded on the sample; the run goes on.
pub fn run_experiment(
    config: &ExperimentConfig,
    testset: &TestSet,
    backends: &BackendSet,
) -> Result<Vec<SampleEvaluation>, HarnessError> {
    config.validate()?;
    let template = config.prompt()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut evals = pool.install(|| {
        testset
            .samples
            .par_iter()
            .map(|s| evaluate_sample(config, backends, &template, s))
            .collect::<Result<Vec<_>, _>>()
    })?;
    evals.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(evals)
}

/// Runs the experiment and writes `results.jsonl` and `run.json` to `out`.
pub fn run_experiment_to_dir(
    config: &ExperimentConfig,
    testset: &TestSet,
    backends: &BackendSet,
    out: &Path,
) -> Result<RunRecord, HarnessError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let evals = run_experiment(config, testset, backends)?;
    metrics::write_jsonl(&out.join(RESULTS_FILE), &evals)?;
    let record = RunRecord {
        testset_id: testset.testset_id.clone(),
        config: config.clone(),
        backends: backends.description.clone(),
        n_samples: evals.len(),
        n_errors: evals.iter().filter(|e| e.error.is_some()).count(),
    };
    let path = out.join(RUN_FILE);
    let json = serde_json::to_string_pretty(&record).expect("run record serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(record)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Md,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Md => "md",
            ReportFormat::Csv => "csv",
        }
    }

    pub fn render(self, report: &MetricsReport) -> String {
        match self {
            ReportFormat::Md => metrics::render_markdown(report),
            ReportFormat::Csv => metrics::render_csv(report),
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Md),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(HarnessError::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Merges result directories computed on one test set and aggregates them
/// by (model, attribute count).
pub fn collect_report(results_dirs: &[PathBuf], baseline: Option<&str>) -> Result<MetricsReport, HarnessError> {
    let mut first: Option<(PathBuf, String)> = None;
    let mut evals = Vec::new();
    for dir in results_dirs {
        let run_path = dir.join(RUN_FILE);
        let text = fs::read_to_string(&run_path).map_err(io_err(&run_path))?;
        let record: RunRecord = serde_json::from_str(&text).map_err(|e| HarnessError::Format {
            path: run_path.clone(),
            message: e.to_string(),
        })?;
        match &first {
            None => first = Some((dir.clone(), record.testset_id)),
            Some((first_dir, id)) if *id != record.testset_id => {
                return Err(HarnessError::MixedTestsets {
                    first: first_dir.clone(),
                    other: dir.clone(),
                })
            }
            Some(_) => {}
        }
        evals.extend(metrics::read_jsonl(&dir.join(RESULTS_FILE))?);
    }
    Ok(metrics::aggregate(&evals, Grouping::ModelAndCount, baseline)?)
}

/// Writes `report.<ext>` into `out` and returns its path.
pub fn render_report(
    results_dirs: &[PathBuf],
    baseline: Option<&str>,
    format: ReportFormat,
    out: &Path,
) -> Result<PathBuf, HarnessError> {
    let report = collect_report(results_dirs, baseline)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join(format!("report.{}", format.extension()));
    fs::write(&path, format.render(&report)).map_err(io_err(&path))?;
    Ok(path)
}
