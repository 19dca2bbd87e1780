//! Deterministic mock world.
//!
//! A synthetic face is an image split into nine horizontal bands, one per
//! [`AttributeKind`] in canonical order. Each band is painted with the color
//! registered for one change token of its attribute ("hair red", "glasses
//! add", ...). Any other uniform color marks the band as corrupted.
//!
//! The mock editor repaints only the first attribute named in an
//! instruction and shrinks the result by 2/3; below [`MIN_EDIT_WIDTH`] it
//! stops editing altogether. The mock super-resolver doubles the size up to
//! [`SR_MAX_SIDE`]. Together they make editability degradation over long
//! chains, and its repair by super-resolution, exactly reproducible.

use std::collections::BTreeMap;
use std::sync::Mutex;

use std::sync::LazyLock;

use super::{
    AttributeJudge, BackendError, BackendResult, Captioner, CompletionParams, EmbedInput, Embedder, Embedding,
    ImageEditor, PairedEditor, QualityScorer, SuperResolver, TextCompleter,
};
use crate::decomposer::decompose_rule_based;
use crate::imaging::{self, FaceImage};
use crate::instructions::{tokens, AttributeEdit, AttributeKind, Lexicon, MultiAttributeInstruction};

/// Edits on images narrower than this are skipped.
pub const MIN_EDIT_WIDTH: u32 = 192;
/// Super-resolution never grows a side beyond this.
pub const SR_MAX_SIDE: u32 = 512;
/// Native output side of the mock paired editor.
pub const PAIR_EDIT_SIDE: u32 = 256;
/// Color of a band in an unknown state.
pub const CORRUPTED_COLOR: [u8; 3] = [128, 128, 128];
/// Smallest height whose band centers can be located unambiguously.
pub const MIN_FACE_HEIGHT: u32 = 18;

const BANDS: usize = 9;

struct StateTable {
    /// (kind, token) in lexicon order; position is the embedding dimension.
    states: Vec<(AttributeKind, String)>,
    colors: Vec<[u8; 3]>,
}

static STATES: LazyLock<StateTable> = LazyLock::new(|| {
    let lex = Lexicon::default_ref();
    let mut states = Vec::new();
    for kind in AttributeKind::ALL {
        for token in lex.changes(kind) {
            states.push((kind, token.clone()));
        }
    }
    // Red channel alone is unique per state and never equals the corrupted gray.
    let colors = (0..states.len())
        .map(|i| {
            let i = i as u32;
            [(40 + i * 7) as u8, (250 - i * 9) as u8, ((i * 53) % 256) as u8]
        })
        .collect();
    StateTable { states, colors }
});

/// Embedding dimension: number of registered (kind, change) pairs.
pub fn embedding_dim() -> usize {
    STATES.states.len()
}

fn state_index(kind: AttributeKind, token: &str) -> Option<usize> {
    STATES.states.iter().position(|(k, t)| *k == kind && t == token)
}

/// Registered color of a (kind, change) state.
pub fn state_color(kind: AttributeKind, token: &str) -> Option<[u8; 3]> {
    state_index(kind, token).map(|i| STATES.colors[i])
}

fn color_state(kind: AttributeKind, color: [u8; 3]) -> Option<&'static str> {
    STATES
        .states
        .iter()
        .zip(&STATES.colors)
        .find(|((k, _), c)| *k == kind && **c == color)
        .map(|((_, t), _)| t.as_str())
}

/// Band (attribute index) that row `y` belongs to.
pub fn band_of_row(y: u32, height: u32) -> usize {
    (y as u64 * BANDS as u64 / height as u64) as usize
}

fn band_center_row(band: usize, height: u32) -> u32 {
    ((2 * band as u64 + 1) * height as u64 / (2 * BANDS as u64)) as u32
}

/// Band colors of a synthetic face; decodable back to a state map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticFace {
    pub width: u32,
    pub height: u32,
    bands: [[u8; 3]; BANDS],
}

impl SyntheticFace {
    /// Face with the given states; kinds not listed take their first
    /// registered change.
    pub fn new(width: u32, height: u32, states: &[(AttributeKind, &str)]) -> BackendResult<Self> {
        let lex = Lexicon::default_ref();
        let mut face = Self {
            width,
            height,
            bands: [CORRUPTED_COLOR; BANDS],
        };
        for kind in AttributeKind::ALL {
            face.set_state(kind, &lex.changes(kind)[0])?;
        }
        for (kind, token) in states {
            face.set_state(*kind, token)?;
        }
        Ok(face)
    }

    /// Strict decoding: every band's center row must be a single color.
    pub fn decode(image: &FaceImage) -> BackendResult<Self> {
        let colors = band_colors(image)?;
        let mut bands = [CORRUPTED_COLOR; BANDS];
        for (band, color) in colors.into_iter().enumerate() {
            bands[band] = color.ok_or_else(|| {
                BackendError::NotSyntheticFace(format!("band {} ({}) is not uniform", band, AttributeKind::ALL[band]))
            })?;
        }
        Ok(Self {
            width: image.width(),
            height: image.height(),
            bands,
        })
    }

    pub fn render(&self) -> FaceImage {
        let height = self.height;
        FaceImage::from_fn(self.width, self.height, |_, y| self.bands[band_of_row(y, height)])
            .expect("synthetic faces have nonzero dimensions")
    }

    /// Same bands at another size.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bands: self.bands,
        }
    }

    /// Registered state of `kind`, or `None` when the band is corrupted.
    pub fn state(&self, kind: AttributeKind) -> Option<&'static str> {
        color_state(kind, self.bands[kind.index()])
    }

    pub fn color(&self, kind: AttributeKind) -> [u8; 3] {
        self.bands[kind.index()]
    }

    pub fn set_state(&mut self, kind: AttributeKind, token: &str) -> BackendResult<()> {
        let color = state_color(kind, token)
            .ok_or_else(|| BackendError::Config(format!("{token:?} is not a registered {kind} state")))?;
        self.bands[kind.index()] = color;
        Ok(())
    }

    pub fn corrupt(&mut self, kind: AttributeKind) {
        self.bands[kind.index()] = CORRUPTED_COLOR;
    }

    /// (kind, state) for every band; corrupted bands map to `None`.
    pub fn states(&self) -> Vec<(AttributeKind, Option<&'static str>)> {
        AttributeKind::ALL.iter().map(|&k| (k, self.state(k))).collect()
    }

    pub fn corrupted_count(&self) -> usize {
        AttributeKind::ALL.iter().filter(|&&k| self.state(k).is_none()).count()
    }
}

/// Center-row color of each band, `None` where that row is not uniform.
fn band_colors(image: &FaceImage) -> BackendResult<[Option<[u8; 3]>; BANDS]> {
    if image.height() < MIN_FACE_HEIGHT {
        return Err(BackendError::NotSyntheticFace(format!(
            "height {} is below {MIN_FACE_HEIGHT}",
            image.height()
        )));
    }
    let mut out = [None; BANDS];
    for (band, slot) in out.iter_mut().enumerate() {
        let y = band_center_row(band, image.height());
        let first = image.pixel(0, y);
        if (1..image.width()).all(|x| image.pixel(x, y) == first) {
            *slot = Some(first);
        }
    }
    Ok(out)
}

/// Applies the first attribute named in `instruction` and shrinks the image
/// by 2/3. Returns the input unchanged when no attribute is named, no change
/// token is found, or the image is narrower than [`MIN_EDIT_WIDTH`].
pub fn mock_edit(image: &FaceImage, instruction: &str) -> BackendResult<FaceImage> {
    let mut face = SyntheticFace::decode(image)?;
    let lex = Lexicon::default_ref();
    let Some(&kind) = lex.detect_attributes(instruction).first() else {
        return Ok(image.clone());
    };
    if image.width() < MIN_EDIT_WIDTH {
        return Ok(image.clone());
    }
    let change = lex
        .attribute_clauses(instruction)
        .into_iter()
        .map(|span| &instruction[span])
        .find(|clause| lex.detect_attributes(clause).contains(&kind))
        .and_then(|clause| lex.detect_change(kind, clause));
    let Some(change) = change else {
        return Ok(image.clone());
    };
    face.set_state(kind, change)?;
    let (w, h) = (image.width() * 2 / 3, image.height() * 2 / 3);
    Ok(face.resized(w.max(1), h.max(1)).render())
}

/// Doubles both sides, capped at [`SR_MAX_SIDE`]; never shrinks. Band colors are kept
/// exactly; images that are not band-structured are resized bilinearly.
pub fn mock_sr(image: &FaceImage) -> FaceImage {
    let grow = |side: u32| {
        if side >= SR_MAX_SIDE {
            side
        } else {
            (side * 2).min(SR_MAX_SIDE)
        }
    };
    let (w, h) = (grow(image.width()), grow(image.height()));
    match SyntheticFace::decode(image) {
        Ok(face) => face.resized(w, h).render(),
        Err(_) => imaging::resize(image, w, h).expect("nonzero dimensions"),
    }
}

fn normalized(indicator: Vec<f64>) -> Embedding {
    let norm = indicator.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Embedding { vector: indicator };
    }
    Embedding {
        vector: indicator.into_iter().map(|v| v / norm).collect(),
    }
}

/// (kind, token) pairs written as consecutive words "<kind> <token>".
pub fn caption_pairs(text: &str) -> Vec<(AttributeKind, String)> {
    let words: Vec<String> = tokens(text).map(|(w, _)| w).collect();
    let mut pairs = Vec::new();
    for pair in words.windows(2) {
        if let Ok(kind) = pair[0].parse::<AttributeKind>() {
            if state_index(kind, &pair[1]).is_some() && !pairs.iter().any(|(k, t)| *k == kind && *t == pair[1]) {
                pairs.push((kind, pair[1].clone()));
            }
        }
    }
    pairs
}

/// Indicator embedding over registered states, L2-normalized. Images set
/// one entry per clean band; text sets one entry per "<kind> <token>" pair.
pub fn mock_embed(input: EmbedInput<'_>) -> BackendResult<Embedding> {
    let mut indicator = vec![0.0; embedding_dim()];
    match input {
        EmbedInput::Image(image) => {
            let face = SyntheticFace::decode(image)?;
            for (kind, state) in face.states() {
                if let Some(token) = state {
                    indicator[state_index(kind, token).expect("decoded state is registered")] = 1.0;
                }
            }
        }
        EmbedInput::Text(text) => {
            for (kind, token) in caption_pairs(text) {
                indicator[state_index(kind, &token).expect("pair is registered")] = 1.0;
            }
        }
    }
    Ok(normalized(indicator))
}

/// Wire-level entry point: exactly one of `text` and `image` must be set.
pub fn mock_embed_request(text: Option<&str>, image: Option<&FaceImage>) -> BackendResult<Embedding> {
    match (text, image) {
        (Some(t), None) => mock_embed(EmbedInput::Text(t)),
        (None, Some(i)) => mock_embed(EmbedInput::Image(i)),
        _ => Err(BackendError::BothOrNeitherInput),
    }
}

/// True when the band of `edit.kind` shows `edit.change` and every band
/// outside `edit.kind` and `co_edited` is unchanged. `output` is resized to
/// the input's dimensions first.
pub fn mock_judge(
    input: &FaceImage,
    output: &FaceImage,
    edit: &AttributeEdit,
    co_edited: &[AttributeKind],
) -> BackendResult<bool> {
    let before = SyntheticFace::decode(input)?;
    let aligned = imaging::resize(output, input.width(), input.height())?;
    let after = SyntheticFace::decode(&aligned)?;
    if after.state(edit.kind) != Some(edit.change.as_str()) {
        return Ok(false);
    }
    Ok(AttributeKind::ALL
        .iter()
        .filter(|&&k| k != edit.kind && !co_edited.contains(&k))
        .all(|&k| before.color(k) == after.color(k)))
}

/// `min(1, width / 512)` minus 0.1 per corrupted or non-uniform band,
/// floored at 0.
pub fn mock_quality(image: &FaceImage) -> f64 {
    let ratio = (image.width() as f64 / SR_MAX_SIDE as f64).min(1.0);
    let corrupted = match band_colors(image) {
        Ok(colors) => colors
            .iter()
            .zip(AttributeKind::ALL)
            .filter(|(c, kind)| c.and_then(|c| color_state(*kind, c)).is_none())
            .count(),
        Err(_) => BANDS,
    };
    (ratio - corrupted as f64 / 10.0).max(0.0)
}

/// Canonical caption listing all nine states in canonical order.
pub fn mock_caption(image: &FaceImage) -> BackendResult<String> {
    let face = SyntheticFace::decode(image)?;
    Ok(caption_for_states(
        face.states().into_iter().map(|(k, s)| (k, s.unwrap_or("corrupted"))),
    ))
}

pub fn caption_for_states<'a>(states: impl IntoIterator<Item = (AttributeKind, &'a str)>) -> String {
    let parts: Vec<String> = states
        .into_iter()
        .map(|(kind, state)| format!("{kind} {state}"))
        .collect();
    format!("a face with {}", parts.join(", "))
}

/// Regenerates the face under `target_caption` at the editor-native
/// [`PAIR_EDIT_SIDE`] resolution. Bands the caption does not mention keep
/// their current color.
pub fn mock_pair_edit(image: &FaceImage, _source_caption: &str, target_caption: &str) -> BackendResult<FaceImage> {
    let mut face = SyntheticFace::decode(image)?;
    for (kind, token) in caption_pairs(target_caption) {
        face.set_state(kind, &token)?;
    }
    Ok(face.resized(PAIR_EDIT_SIDE, PAIR_EDIT_SIDE).render())
}

/// Mock text completer. Answers decomposition prompts (last line starting
/// with "Input:") with a rule-based chain in canonical form, and caption
/// rewrite prompts ("Caption:" / "Instruction:" lines) with the caption
/// updated by the instruction's edits. Anything else yields an empty reply.
pub fn mock_complete(prompt: &str) -> String {
    let last_field = |name: &str| {
        prompt
            .lines()
            .rev()
            .find_map(|l| l.trim_start().strip_prefix(name).map(str::trim))
    };
    if let (Some(caption), Some(instruction)) = (last_field("Caption:"), last_field("Instruction:")) {
        return rewrite_caption(caption, instruction);
    }
    if let Some(instruction) = last_field("Input:") {
        let instr = MultiAttributeInstruction::from_text(instruction);
        return match decompose_rule_based(&instr) {
            Ok(chain) => {
                let kinds: Vec<&str> = chain
                    .steps
                    .iter()
                    .filter_map(|s| s.kinds().first().map(|k| k.as_str()))
                    .collect();
                format!(
                    "The instruction involves {} attribute changes: {}\n{}",
                    kinds.len(),
                    kinds.join(", "),
                    chain.to_canonical()
                )
            }
            Err(_) => "I could not find any attribute change in this instruction.".into(),
        };
    }
    String::new()
}

fn rewrite_caption(caption: &str, instruction: &str) -> String {
    let mut states: BTreeMap<AttributeKind, String> = caption_pairs(caption).into_iter().collect();
    for edit in MultiAttributeInstruction::from_text(instruction).edits {
        states.insert(edit.kind, edit.change);
    }
    caption_for_states(states.iter().map(|(k, s)| (*k, s.as_str())))
}

/// All mock capabilities behind the backend traits.
#[derive(Debug, Default)]
pub struct MockBackends;

impl ImageEditor for MockBackends {
    fn edit(&self, image: &FaceImage, instruction: &str) -> BackendResult<FaceImage> {
        mock_edit(image, instruction)
    }
}

impl SuperResolver for MockBackends {
    fn upscale(&self, image: &FaceImage) -> BackendResult<FaceImage> {
        Ok(mock_sr(image))
    }
}

impl Captioner for MockBackends {
    fn caption(&self, image: &FaceImage) -> BackendResult<String> {
        mock_caption(image)
    }
}

impl Embedder for MockBackends {
    fn embed(&self, input: EmbedInput<'_>) -> BackendResult<Embedding> {
        mock_embed(input)
    }
}

impl QualityScorer for MockBackends {
    fn score(&self, image: &FaceImage) -> BackendResult<f64> {
        Ok(mock_quality(image))
    }
}

impl AttributeJudge for MockBackends {
    fn judge(
        &self,
        input: &FaceImage,
        output: &FaceImage,
        edit: &AttributeEdit,
        co_edited: &[AttributeKind],
    ) -> BackendResult<bool> {
        mock_judge(input, output, edit, co_edited)
    }
}

impl TextCompleter for MockBackends {
    fn complete(&self, prompt: &str, _params: &CompletionParams) -> BackendResult<String> {
        Ok(mock_complete(prompt))
    }
}

impl PairedEditor for MockBackends {
    fn pair_edit(&self, image: &FaceImage, source: &str, target: &str) -> BackendResult<FaceImage> {
        mock_pair_edit(image, source, target)
    }
}

/// Completer that replays a fixed list of replies and counts calls. Once
/// the list is exhausted the last reply repeats.
#[derive(Debug, Default)]
pub struct ScriptedCompleter {
    /// `None` replies simulate an outage.
    replies: Vec<Option<String>>,
    calls: Mutex<usize>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedCompleter {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self {
            replies: replies.into_iter().map(|r| Some(r.into())).collect(),
            ..Default::default()
        }
    }

    /// Every call fails as if the backend were down.
    pub fn unavailable() -> Self {
        Self {
            replies: vec![None],
            ..Default::default()
        }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("poisoned")
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("poisoned").clone()
    }
}

impl TextCompleter for ScriptedCompleter {
    fn complete(&self, prompt: &str, _params: &CompletionParams) -> BackendResult<String> {
        let mut calls = self.calls.lock().expect("poisoned");
        self.prompts.lock().expect("poisoned").push(prompt.to_string());
        let i = (*calls).min(self.replies.len().saturating_sub(1));
        *calls += 1;
        match self.replies.get(i) {
            Some(Some(text)) => Ok(text.clone()),
            Some(None) => Err(UnavailableBackend::error(super::Capability::Complete)),
            None => Ok(String::new()),
        }
    }
}

/// Editor that always fails as if its service were down.
#[derive(Debug, Default)]
pub struct UnavailableBackend;

impl UnavailableBackend {
    fn error(capability: super::Capability) -> BackendError {
        BackendError::Unavailable {
            capability,
            attempts: 1,
            message: "backend is down".into(),
        }
    }
}

impl ImageEditor for UnavailableBackend {
    fn edit(&self, _: &FaceImage, _: &str) -> BackendResult<FaceImage> {
        Err(Self::error(super::Capability::Edit))
    }
}

impl SuperResolver for UnavailableBackend {
    fn upscale(&self, _: &FaceImage) -> BackendResult<FaceImage> {
        Err(Self::error(super::Capability::Sr))
    }
}

impl PairedEditor for UnavailableBackend {
    fn pair_edit(&self, _: &FaceImage, _: &str, _: &str) -> BackendResult<FaceImage> {
        Err(Self::error(super::Capability::PairEdit))
    }
}

impl TextCompleter for UnavailableBackend {
    fn complete(&self, _: &str, _: &CompletionParams) -> BackendResult<String> {
        Err(Self::error(super::Capability::Complete))
    }
}
