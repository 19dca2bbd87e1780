//! Triplet dataset construction: mask ingestion, paired editing with mask
//! compositing, threshold filtering, and a resumable, deterministic build
//! that writes a JSONL manifest.
//!
//! Output layout:
//!
//! ```text
//! root/images/<content_id>.png
//! root/masks/<mask_id>.png
//! root/manifest.jsonl   header line, then accepted triplets in plan order
//! root/journal.log      one JSON record per finished triplet
//! root/summary.md
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, BackendSet};
use crate::imaging::{self, FaceImage, ImagingError, RegionMask};
use crate::instructions::{
    render_instruction, AttributeEdit, AttributeKind, InstructionError, Lexicon, SingleAttributeInstruction,
    TemplateRegistry,
};
use crate::metrics::{self, CaptionCache};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const JOURNAL_FILE: &str = "journal.log";
pub const SUMMARY_FILE: &str = "summary.md";
pub const PIPELINE_VERSION: &str = concat!("coie-dataset/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("annotation layout: {0}")]
    Layout(String),
    #[error("face {face_id}: part {part} is given by several files: {files:?}")]
    AmbiguousPart {
        face_id: String,
        part: String,
        files: Vec<PathBuf>,
    },
    #[error("face {face_id} has no mask for {kind}")]
    MissingMask { face_id: String, kind: AttributeKind },
    #[error("invalid edit plan: {0}")]
    Plan(String),
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
    #[error(transparent)]
    Instruction(#[from] InstructionError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Annotation part names and the attribute each one feeds. Parts mapped to
/// `None` are recognized and ignored.
pub const PART_REGISTRY: &[(&str, Option<AttributeKind>)] = &[
    ("hair", Some(AttributeKind::Hair)),
    ("skin", Some(AttributeKind::Skin)),
    ("l_eye", Some(AttributeKind::Eyes)),
    ("r_eye", Some(AttributeKind::Eyes)),
    ("eye_g", Some(AttributeKind::Glasses)),
    ("beard", Some(AttributeKind::Beard)),
    ("l_brow", None),
    ("r_brow", None),
    ("nose", None),
    ("mouth", None),
    ("u_lip", None),
    ("l_lip", None),
    ("l_ear", None),
    ("r_ear", None),
    ("ear_r", None),
    ("neck", None),
    ("neck_l", None),
    ("cloth", None),
    ("hat", None),
];

/// Attributes edited over the whole face rather than a part.
pub const GLOBAL_KINDS: [AttributeKind; 4] = [
    AttributeKind::Age,
    AttributeKind::Gender,
    AttributeKind::Anime,
    AttributeKind::Expression,
];

pub type FaceMasks = BTreeMap<AttributeKind, RegionMask>;

/// Splits "<face_id>_<part>" using the longest registered part suffix.
fn split_part_stem(stem: &str) -> Option<(&str, &'static str)> {
    PART_REGISTRY
        .iter()
        .map(|(p, _)| *p)
        .filter(|p| stem.len() > p.len() + 1 && stem.ends_with(p) && stem.as_bytes()[stem.len() - p.len() - 1] == b'_')
        .max_by_key(|p| p.len())
        .map(|p| (&stem[..stem.len() - p.len() - 1], p))
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DatasetError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_pngs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    Ok(())
}

type PartIndex = BTreeMap<String, BTreeMap<&'static str, PathBuf>>;

fn index_parts(root: &Path) -> Result<PartIndex, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::Layout(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    collect_pngs(root, &mut files)?;
    let mut index: PartIndex = BTreeMap::new();
    for file in files {
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((face_id, part)) = split_part_stem(stem) else {
            log::warn!("skipping {}: no known part suffix", file.display());
            continue;
        };
        let parts = index.entry(face_id.to_string()).or_default();
        if let Some(previous) = parts.get(part) {
            return Err(DatasetError::AmbiguousPart {
                face_id: face_id.to_string(),
                part: part.to_string(),
                files: vec![previous.clone(), file],
            });
        }
        parts.insert(part, file);
    }
    Ok(index)
}

fn load_face_masks(face_id: &str, parts: &BTreeMap<&'static str, PathBuf>) -> Result<FaceMasks, DatasetError> {
    let mut by_kind: BTreeMap<AttributeKind, Vec<RegionMask>> = BTreeMap::new();
    let mut dims = None;
    for (part, path) in parts {
        let kind = PART_REGISTRY.iter().find(|(p, _)| p == part).and_then(|(_, k)| *k);
        let mask = imaging::load_mask(path)?;
        if *dims.get_or_insert(mask.dims()) != mask.dims() {
            return Err(DatasetError::Layout(format!(
                "face {face_id}: part {part} is {:?}, other parts are {:?}",
                mask.dims(),
                dims
            )));
        }
        if let Some(kind) = kind {
            by_kind.entry(kind).or_default().push(mask);
        }
    }
    let mut masks = FaceMasks::new();
    for (kind, list) in by_kind {
        masks.insert(kind, imaging::union_masks(&list)?.with_attribute(kind));
    }
    if let Some((w, h)) = dims {
        for kind in GLOBAL_KINDS {
            masks.insert(kind, RegionMask::filled(w, h, true)?.with_attribute(kind));
        }
    }
    for kind in AttributeKind::ALL {
        if !masks.contains_key(&kind) {
            log::debug!("face {face_id}: no {kind} mask");
        }
    }
    Ok(masks)
}

/// Masks of every face under `root`. Files are named `<face_id>_<part>.png`
/// and may sit in nested directories. Eyes are the union of both eye parts;
/// global attributes get a full-frame mask.
pub fn ingest_masks(root: &Path) -> Result<BTreeMap<String, FaceMasks>, DatasetError> {
    index_parts(root)?
        .into_iter()
        .map(|(face_id, parts)| load_face_masks(&face_id, &parts).map(|m| (face_id, m)))
        .collect()
}

/// Masks of one face, empty when `root` has no parts for it.
pub fn ingest_face_masks(root: &Path, face_id: &str) -> Result<FaceMasks, DatasetError> {
    match index_parts(root)?.get(face_id) {
        Some(parts) => load_face_masks(face_id, parts),
        None => Ok(FaceMasks::new()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub face_id: String,
    pub image_path: PathBuf,
    pub annotation_dir: PathBuf,
}

/// Reads a corpus JSONL; relative paths are resolved against its directory.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusEntry>, DatasetError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: CorpusEntry = serde_json::from_str(&line).map_err(|e| DatasetError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        entry.image_path = base.join(&entry.image_path);
        entry.annotation_dir = base.join(&entry.annotation_dir);
        out.push(entry);
    }
    Ok(out)
}

/// Writes a corpus JSONL with paths relative to its directory where possible.
pub fn write_corpus(path: &Path, entries: &[CorpusEntry]) -> Result<(), DatasetError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| p.to_path_buf())
    };
    let mut text = String::new();
    for e in entries {
        let e = CorpusEntry {
            face_id: e.face_id.clone(),
            image_path: rel(&e.image_path),
            annotation_dir: rel(&e.annotation_dir),
        };
        text.push_str(&serde_json::to_string(&e).expect("corpus entry serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    #[serde(default = "Thresholds::default_clip")]
    pub clip: f64,
    #[serde(default = "Thresholds::default_quality")]
    pub quality: f64,
}

impl Thresholds {
    fn default_clip() -> f64 {
        0.25
    }

    fn default_quality() -> f64 {
        0.5
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            clip: Self::default_clip(),
            quality: Self::default_quality(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Clip,
    Quality,
    ClipAndQuality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditTriplet {
    pub triplet_id: String,
    pub face_id: String,
    pub instruction: SingleAttributeInstruction,
    /// Paths relative to the dataset root.
    pub input_ref: String,
    pub output_ref: String,
    pub mask_ref: String,
    pub source_caption: String,
    pub target_caption: String,
    pub clip_score: f64,
    pub quality_score: f64,
    pub accepted: bool,
}

impl EditTriplet {
    pub fn edit(&self) -> Option<&AttributeEdit> {
        self.instruction.edit.as_ref()
    }
}

/// A triplet with its images, before anything is written.
#[derive(Clone, Debug)]
pub struct GeneratedTriplet {
    pub triplet: EditTriplet,
    pub input: FaceImage,
    pub output: FaceImage,
    pub mask: RegionMask,
}

/// Content id of a mask: the first 16 bytes of a SHA-256 over its size and bits.
pub fn mask_id(mask: &RegionMask) -> String {
    let mut h = Sha256::new();
    h.update(b"mask");
    h.update(mask.width().to_le_bytes());
    h.update(mask.height().to_le_bytes());
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| b as u8).collect();
    h.update(&bytes);
    hex::encode(&h.finalize()[..16])
}

pub fn image_ref(img: &FaceImage) -> String {
    format!("images/{}.png", img.content_id())
}

pub fn mask_ref(mask: &RegionMask) -> String {
    format!("masks/{}.png", mask_id(mask))
}

/// Builds single-attribute triplets against a backend set.
pub struct TripletGenerator<'a> {
    pub backends: &'a BackendSet,
    pub templates: TemplateRegistry,
    pub language: String,
    pub captions: CaptionCache,
}

impl<'a> TripletGenerator<'a> {
    pub fn new(backends: &'a BackendSet) -> Self {
        Self {
            backends,
            templates: TemplateRegistry::default(),
            language: "en".into(),
            captions: CaptionCache::new(),
        }
    }

    /// Captions the face, phrases the edit, rewrites the caption, runs the
    /// paired editor and keeps its output only inside the attribute's mask.
    /// The result is scored but not yet filtered.
    pub fn generate(
        &self,
        face_id: &str,
        face: &FaceImage,
        edit: &AttributeEdit,
        masks: &FaceMasks,
        phrasing_seed: u64,
    ) -> Result<GeneratedTriplet, DatasetError> {
        let mask = masks.get(&edit.kind).ok_or_else(|| DatasetError::MissingMask {
            face_id: face_id.to_string(),
            kind: edit.kind,
        })?;
        let b = self.backends;
        let source_caption = b.captioner.caption(face)?;
        let instruction = render_instruction(edit, &self.templates, &self.language, phrasing_seed)?;
        let target_caption =
            metrics::target_caption(&source_caption, &instruction.text, b.completer.as_ref(), &self.captions)?;
        let regenerated = b.pair_editor.pair_edit(face, &source_caption, &target_caption)?;
        let regenerated = imaging::resize(&regenerated, face.width(), face.height())?;
        let output = imaging::composite(face, &regenerated, mask)?;
        let clip_score = metrics::clip_sim(&output, &target_caption, b.embedder.as_ref())?.value;
        let quality_score = metrics::quality(&output, b.quality.as_ref())?;
        Ok(GeneratedTriplet {
            triplet: EditTriplet {
                triplet_id: triplet_id(face_id, edit),
                face_id: face_id.to_string(),
                instruction,
                input_ref: image_ref(face),
                output_ref: image_ref(&output),
                mask_ref: mask_ref(mask),
                source_caption,
                target_caption,
                clip_score,
                quality_score,
                accepted: false,
            },
            input: face.clone(),
            output,
            mask: mask.clone(),
        })
    }
}

pub fn triplet_id(face_id: &str, edit: &AttributeEdit) -> String {
    format!("{face_id}/{}/{}", edit.kind, edit.change)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub accepted: bool,
    pub reason: Option<RejectReason>,
}

/// Accepts when both scores reach their thresholds (inclusive).
pub fn filter_triplet(t: &EditTriplet, thresholds: &Thresholds) -> FilterDecision {
    let clip_ok = t.clip_score >= thresholds.clip;
    let quality_ok = t.quality_score >= thresholds.quality;
    let reason = match (clip_ok, quality_ok) {
        (true, true) => None,
        (false, true) => Some(RejectReason::Clip),
        (true, false) => Some(RejectReason::Quality),
        (false, false) => Some(RejectReason::ClipAndQuality),
    };
    FilterDecision {
        accepted: reason.is_none(),
        reason,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanItem {
    pub kind: AttributeKind,
    /// Change tokens to apply; all registered changes when empty.
    #[serde(default)]
    pub changes: Vec<String>,
    /// How many faces receive this attribute's edits.
    pub faces: usize,
}

/// Which attributes to edit, with which changes, on how many faces.
///
/// ```toml
/// seed = 7
/// [[attributes]]
/// kind = "hair"
/// changes = ["red", "blonde"]
/// faces = 20
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPlan {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub attributes: Vec<PlanItem>,
}

impl EditPlan {
    pub fn from_toml(text: &str) -> Result<Self, DatasetError> {
        let plan: EditPlan = toml::from_str(text).map_err(|e| DatasetError::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let lex = Lexicon::default_ref();
        let mut seen = BTreeSet::new();
        for item in &self.attributes {
            if !seen.insert(item.kind) {
                return Err(DatasetError::Plan(format!("{} is listed twice", item.kind)));
            }
            if let Some(bad) = item.changes.iter().find(|c| !lex.is_change(item.kind, c)) {
                return Err(DatasetError::Plan(format!("{bad:?} is not a change of {}", item.kind)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub triplet_id: String,
    pub face_id: String,
    pub edit: AttributeEdit,
    pub phrasing_seed: u64,
}

/// Deterministic task list: per attribute, a seeded permutation of the
/// sorted face ids, truncated to the quota, times the change tokens.
pub fn plan_tasks(plan: &EditPlan, face_ids: &[String]) -> Result<Vec<Task>, DatasetError> {
    let lex = Lexicon::default_ref();
    let mut sorted = face_ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut tasks = Vec::new();
    for item in &plan.attributes {
        let salt = (item.kind.index() as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ salt);
        let mut faces = sorted.clone();
        faces.shuffle(&mut rng);
        faces.truncate(item.faces);
        let changes = if item.changes.is_empty() {
            lex.changes(item.kind).to_vec()
        } else {
            item.changes.clone()
        };
        for face_id in faces {
            for change in &changes {
                let edit = AttributeEdit::new(item.kind, change.clone())?;
                tasks.push(Task {
                    triplet_id: triplet_id(&face_id, &edit),
                    face_id: face_id.clone(),
                    edit,
                    phrasing_seed: rng.random(),
                });
            }
        }
    }
    Ok(tasks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JournalStatus {
    Accepted,
    Rejected,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub triplet_id: String,
    pub status: JournalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<EditTriplet>,
}

/// Finished records by triplet id. A torn last line (crash mid-write) is
/// ignored.
pub fn read_journal(path: &Path) -> Result<BTreeMap<String, JournalRecord>, DatasetError> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JournalRecord>(line) {
            Ok(r) => {
                out.insert(r.triplet_id.clone(), r);
            }
            Err(e) if i + 1 == lines.len() => log::warn!("ignoring torn journal line {}: {e}", i + 1),
            Err(e) => {
                return Err(DatasetError::Format {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub pipeline_version: String,
    pub thresholds: Thresholds,
    pub seed: u64,
    pub counts: Vec<SummaryRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub entries: Vec<EditTriplet>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ManifestLine {
    Header(ManifestHeader),
    Triplet(EditTriplet),
}

impl DatasetManifest {
    pub fn new(thresholds: Thresholds, seed: u64, entries: Vec<EditTriplet>) -> Self {
        let mut manifest = Self {
            header: ManifestHeader {
                pipeline_version: PIPELINE_VERSION.to_string(),
                thresholds,
                seed,
                counts: Vec::new(),
            },
            entries,
        };
        manifest.header.counts = summarize(&manifest).rows;
        manifest
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ManifestLine::Header(self.header.clone())).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&ManifestLine::Triplet(e.clone())).expect("triplet serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let format = |line: usize, message: String| DatasetError::Format {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut header = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str(line).map_err(|e| format(i + 1, e.to_string()))? {
                ManifestLine::Header(h) if header.is_none() && i == 0 => header = Some(h),
                ManifestLine::Header(_) => return Err(format(i + 1, "unexpected header".into())),
                ManifestLine::Triplet(t) => entries.push(t),
            }
        }
        let header = header.ok_or_else(|| format(1, "missing header".into()))?;
        Ok(Self { header, entries })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub attribute: String,
    pub ids: usize,
    pub samples: usize,
    pub changes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    /// One row per attribute, in canonical order.
    pub rows: Vec<SummaryRow>,
    /// Sums of the rows' ids and samples.
    pub total: SummaryRow,
}

/// Distinct faces, samples and observed change tokens per attribute.
pub fn summarize(manifest: &DatasetManifest) -> DatasetSummary {
    let lex = Lexicon::default_ref();
    let mut faces: HashMap<AttributeKind, BTreeSet<&str>> = HashMap::new();
    let mut samples: HashMap<AttributeKind, usize> = HashMap::new();
    let mut changes: HashMap<AttributeKind, BTreeSet<&str>> = HashMap::new();
    for e in &manifest.entries {
        let Some(edit) = e.edit() else { continue };
        faces.entry(edit.kind).or_default().insert(&e.face_id);
        *samples.entry(edit.kind).or_default() += 1;
        changes.entry(edit.kind).or_default().insert(&edit.change);
    }
    let rows: Vec<SummaryRow> = AttributeKind::ALL
        .iter()
        .map(|&k| SummaryRow {
            attribute: k.to_string(),
            ids: faces.get(&k).map_or(0, BTreeSet::len),
            samples: samples.get(&k).copied().unwrap_or(0),
            changes: lex
                .changes(k)
                .iter()
                .filter(|c| changes.get(&k).is_some_and(|s| s.contains(c.as_str())))
                .cloned()
                .collect(),
        })
        .collect();
    let total = SummaryRow {
        attribute: "total".into(),
        ids: rows.iter().map(|r| r.ids).sum(),
        samples: rows.iter().map(|r| r.samples).sum(),
        changes: Vec::new(),
    };
    DatasetSummary { rows, total }
}

pub fn render_summary(summary: &DatasetSummary) -> String {
    let mut out = String::from("| Attribute | IDs | Samples | Changes |\n|---|---:|---:|---|\n");
    for r in &summary.rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            r.attribute,
            r.ids,
            r.samples,
            r.changes.join(", ")
        );
    }
    let _ = writeln!(out, "| Total | {} | {} | |", summary.total.ids, summary.total.samples);
    out
}

fn default_workers() -> usize {
    4
}

fn default_language() -> String {
    "en".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_language")]
    pub language: String,
    /// Process at most this many pending triplets, then stop without
    /// writing the manifest. Used to exercise resumption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_after: Option<usize>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            workers: default_workers(),
            language: default_language(),
            stop_after: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildReport {
    pub planned: usize,
    pub resumed: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub skipped: usize,
    /// (triplet_id, message) for triplets that failed and will be retried
    /// on the next run.
    pub errors: Vec<(String, String)>,
    pub interrupted: bool,
    pub manifest: Option<DatasetManifest>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if path.exists() {
        return Ok(());
    }
    let tmp = path.with_extension(format!("{}.tmp", uuid::Uuid::new_v4().simple()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

enum Outcome {
    Record(Box<JournalRecord>),
    Failed(String, String),
}

struct Journal {
    path: PathBuf,
    file: Mutex<fs::File>,
}

impl Journal {
    fn open(path: PathBuf) -> Result<Self, DatasetError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    fn append(&self, record: &JournalRecord) -> Result<(), DatasetError> {
        let mut line = serde_json::to_string(record).expect("journal record serializes");
        line.push('\n');
        let mut f = self.file.lock().expect("poisoned");
        f.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        f.flush().map_err(io_err(&self.path))
    }
}

fn run_face(
    root: &Path,
    entry: &CorpusEntry,
    tasks: &[&Task],
    generator: &TripletGenerator<'_>,
    thresholds: &Thresholds,
    journal: &Journal,
) -> Result<Vec<Outcome>, DatasetError> {
    let loaded = imaging::load_png(&entry.image_path)
        .map_err(DatasetError::from)
        .and_then(|img| ingest_face_masks(&entry.annotation_dir, &entry.face_id).map(|m| (img, m)));
    let (face, masks) = match loaded {
        Ok(v) => v,
        Err(e) => {
            log::warn!("face {}: {e}", entry.face_id);
            return Ok(tasks
                .iter()
                .map(|t| Outcome::Failed(t.triplet_id.clone(), e.to_string()))
                .collect());
        }
    };
    let mut outcomes = Vec::with_capacity(tasks.len());
    for task in tasks {
        let record = match generator.generate(&entry.face_id, &face, &task.edit, &masks, task.phrasing_seed) {
            Err(DatasetError::MissingMask { .. }) => {
                log::info!("skipping {}: no {} mask", task.triplet_id, task.edit.kind);
                JournalRecord {
                    triplet_id: task.triplet_id.clone(),
                    status: JournalStatus::Skipped,
                    reason: Some("missing_mask".into()),
                    entry: None,
                }
            }
            Err(e) => {
                log::warn!("{}: {e}", task.triplet_id);
                outcomes.push(Outcome::Failed(task.triplet_id.clone(), e.to_string()));
                continue;
            }
            Ok(mut generated) => {
                let decision = filter_triplet(&generated.triplet, thresholds);
                generated.triplet.accepted = decision.accepted;
                if decision.accepted {
                    for (rel, img) in [
                        (&generated.triplet.input_ref, &generated.input),
                        (&generated.triplet.output_ref, &generated.output),
                    ] {
                        write_atomic(&root.join(rel), &img.to_png_bytes()?)?;
                    }
                    write_atomic(&root.join(&generated.triplet.mask_ref), &generated.mask.to_png_bytes()?)?;
                }
                JournalRecord {
                    triplet_id: task.triplet_id.clone(),
                    status: if decision.accepted {
                        JournalStatus::Accepted
                    } else {
                        JournalStatus::Rejected
                    },
                    reason: decision.reason.map(|r| {
                        serde_json::to_value(r)
                            .expect("reason serializes")
                            .as_str()
                            .unwrap_or_default()
                            .to_string()
                    }),
                    entry: Some(generated.triplet),
                }
            }
        };
        journal.append(&record)?;
        outcomes.push(Outcome::Record(Box::new(record)));
    }
    Ok(outcomes)
}

/// Runs the plan over the corpus, resuming from `root/journal.log`.
/// Accepted triplets are written as they finish; the manifest and summary
/// are written once every planned triplet has a journal record. Only I/O
/// failures under `root` abort the build.
pub fn build_dataset(
    corpus: &[CorpusEntry],
    plan: &EditPlan,
    config: &BuildConfig,
    backends: &BackendSet,
    root: &Path,
) -> Result<BuildReport, DatasetError> {
    plan.validate()?;
    for dir in [root.join("images"), root.join("masks")] {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let faces: BTreeMap<&str, &CorpusEntry> = corpus.iter().map(|e| (e.face_id.as_str(), e)).collect();
    let face_ids: Vec<String> = faces.keys().map(|s| s.to_string()).collect();
    let tasks = plan_tasks(plan, &face_ids)?;
    let journal_path = root.join(JOURNAL_FILE);
    let mut done = read_journal(&journal_path)?;
    let mut report = BuildReport {
        planned: tasks.len(),
        resumed: tasks.iter().filter(|t| done.contains_key(&t.triplet_id)).count(),
        ..Default::default()
    };

    let mut pending: Vec<&Task> = tasks.iter().filter(|t| !done.contains_key(&t.triplet_id)).collect();
    if let Some(limit) = config.stop_after {
        report.interrupted = pending.len() > limit;
        pending.truncate(limit);
    }
    let mut by_face: BTreeMap<&str, Vec<&Task>> = BTreeMap::new();
    for t in pending {
        by_face.entry(t.face_id.as_str()).or_default().push(t);
    }

    let journal = Journal::open(journal_path)?;
    let mut generator = TripletGenerator::new(backends);
    generator.language = config.language.clone();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| DatasetError::Plan(e.to_string()))?;
    let results: Vec<Result<Vec<Outcome>, DatasetError>> = pool.install(|| {
        by_face
            .par_iter()
            .map(|(face_id, tasks)| run_face(root, faces[face_id], tasks, &generator, &config.thresholds, &journal))
            .collect()
    });
    for result in results {
        for outcome in result? {
            match outcome {
                Outcome::Record(r) => {
                    done.insert(r.triplet_id.clone(), *r);
                }
                Outcome::Failed(id, message) => report.errors.push((id, message)),
            }
        }
    }

    for t in &tasks {
        match done.get(&t.triplet_id).map(|r| r.status) {
            Some(JournalStatus::Accepted) => report.accepted += 1,
            Some(JournalStatus::Rejected) => report.rejected += 1,
            Some(JournalStatus::Skipped) => report.skipped += 1,
            None => {}
        }
    }
    if report.interrupted {
        return Ok(report);
    }
    let entries = tasks
        .iter()
        .filter_map(|t| done.get(&t.triplet_id))
        .filter(|r| r.status == JournalStatus::Accepted)
        .filter_map(|r| r.entry.clone())
        .collect();
    let manifest = DatasetManifest::new(config.thresholds, plan.seed, entries);
    manifest.write(&root.join(MANIFEST_FILE))?;
    let summary_path = root.join(SUMMARY_FILE);
    fs::write(&summary_path, render_summary(&summarize(&manifest))).map_err(io_err(&summary_path))?;
    report.manifest = Some(manifest);
    Ok(report)
}

/// Checks a built dataset: files exist and match their content ids, every
/// output equals its input outside the mask, accepted flags agree with the
/// stored scores, and header counts match a recount. Returns the problems
/// found.
pub fn validate_dataset(root: &Path) -> Result<Vec<String>, DatasetError> {
    let manifest = DatasetManifest::read(&root.join(MANIFEST_FILE))?;
    let mut problems = Vec::new();
    let recount = summarize(&manifest).rows;
    if recount != manifest.header.counts {
        problems.push("header counts differ from a recount of the entries".to_string());
    }
    let th = manifest.header.thresholds;
    for e in &manifest.entries {
        let load = |rel: &str| -> Result<FaceImage, String> {
            let img = imaging::load_png(root.join(rel)).map_err(|err| format!("{}: {rel}: {err}", e.triplet_id))?;
            if image_ref(&img) != rel {
                return Err(format!("{}: {rel} has content id {}", e.triplet_id, img.content_id()));
            }
            Ok(img)
        };
        let (input, output) = match (load(&e.input_ref), load(&e.output_ref)) {
            (Ok(i), Ok(o)) => (i, o),
            (i, o) => {
                problems.extend(i.err());
                problems.extend(o.err());
                continue;
            }
        };
        let mask = match imaging::load_mask(root.join(&e.mask_ref)) {
            Ok(m) if mask_ref(&m) == e.mask_ref => m,
            Ok(_) => {
                problems.push(format!("{}: {} does not match its id", e.triplet_id, e.mask_ref));
                continue;
            }
            Err(err) => {
                problems.push(format!("{}: {}: {err}", e.triplet_id, e.mask_ref));
                continue;
            }
        };
        match imaging::masked_mean_abs_diff(&input, &output, Some(&mask)) {
            Ok(d) if d.value == 0.0 => {}
            Ok(d) => problems.push(format!(
                "{}: output differs outside the mask by {}",
                e.triplet_id, d.value
            )),
            Err(err) => problems.push(format!("{}: {err}", e.triplet_id)),
        }
        let decision = filter_triplet(e, &th);
        if decision.accepted != e.accepted || !e.accepted {
            problems.push(format!("{}: accepted flag disagrees with its scores", e.triplet_id));
        }
    }
    Ok(problems)
}
