//! Fixtures and independent oracles shared by the integration suites and
//! the acceptance runner.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::Router;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coie::backends::mock::{caption_for_states, mock_edit, MockBackends, SyntheticFace};
use coie::backends::server::{spawn_router, MockServerHandle};
use coie::backends::{
    AttributeJudge, BackendEndpoint, BackendError, Capability, Captioner, CompletionParams, EmbedInput, Embedder,
    HttpBackend, ImageEditor, PairedEditor, QualityScorer, SuperResolver, TextCompleter,
};
use coie::decomposer::{build_prompt, PromptTemplate};
use coie::imaging::{FaceImage, RegionMask};
use coie::instructions::{compose_multi, AttributeEdit, AttributeKind, Lexicon};
use coie::metrics::{caption_rewrite_prompt, SampleEvaluation};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_edit(rng: &mut ChaCha8Rng, kind: AttributeKind) -> AttributeEdit {
    let change = Lexicon::default_ref().changes(kind).choose(rng).unwrap().clone();
    AttributeEdit::new(kind, change).unwrap()
}

pub fn random_edits(rng: &mut ChaCha8Rng, n: usize) -> Vec<AttributeEdit> {
    let mut kinds = AttributeKind::ALL.to_vec();
    kinds.shuffle(rng);
    kinds[..n].iter().map(|&k| random_edit(rng, k)).collect()
}

pub fn random_face(rng: &mut ChaCha8Rng, min_side: u32, max_side: u32) -> SyntheticFace {
    let w = rng.random_range(min_side..=max_side);
    let h = rng.random_range(min_side..=max_side);
    let edits: Vec<AttributeEdit> = AttributeKind::ALL.iter().map(|&k| random_edit(rng, k)).collect();
    let states: Vec<(AttributeKind, &str)> = edits.iter().map(|e| (e.kind, e.change.as_str())).collect();
    let mut face = SyntheticFace::new(w, h, &states).unwrap();
    if rng.random_bool(0.1) {
        face.corrupt(*AttributeKind::ALL.choose(rng).unwrap());
    }
    face
}

pub fn noise_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> FaceImage {
    FaceImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32, density: f64) -> RegionMask {
    RegionMask::from_fn(w, h, |_, _| rng.random_bool(density)).unwrap()
}

/// Mean absolute channel difference over unmasked pixels, computed pixel
/// by pixel with `get`/`pixel` accessors and f64 accumulation.
pub fn brute_force_l1(a: &FaceImage, b: &FaceImage, exclude: Option<&RegionMask>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if exclude.is_some_and(|m| m.get(x, y)) {
                continue;
            }
            let (pa, pb) = (a.pixel(x, y), b.pixel(x, y));
            for c in 0..3 {
                sum += (pa[c] as f64 - pb[c] as f64).abs();
            }
            n += 3;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Coverage by flattening every judgement into one list.
pub fn flat_coverage(evals: &[SampleEvaluation]) -> f64 {
    let flat: Vec<bool> = evals
        .iter()
        .flat_map(|e| e.judgements.iter().map(|j| j.correct))
        .collect();
    flat.iter().filter(|&&c| c).count() as f64 / flat.len() as f64
}

fn error_code(e: &BackendError) -> String {
    match e {
        BackendError::Rejected { code, .. } => code.clone(),
        other => other.code().to_string(),
    }
}

fn same<T: PartialEq + std::fmt::Debug>(
    local: Result<T, BackendError>,
    remote: Result<T, BackendError>,
) -> Result<(), String> {
    match (local, remote) {
        (Ok(a), Ok(b)) if a == b => Ok(()),
        (Err(a), Err(b)) if error_code(&a) == error_code(&b) => Ok(()),
        (a, b) => Err(format!("in-process {a:?} vs wire {b:?}")),
    }
}

/// An input image for a capability: usually a synthetic face, sometimes
/// noise that the mock world rejects.
fn any_image(rng: &mut ChaCha8Rng) -> FaceImage {
    if rng.random_bool(0.1) {
        let (w, h) = (rng.random_range(18..=64), rng.random_range(18..=64));
        noise_image(rng, w, h)
    } else {
        random_face(rng, 40, 360).render()
    }
}

fn instruction_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=3);
    compose_multi(&random_edits(rng, n), rng.random()).unwrap().text
}

/// Calls every capability `cases` times with random inputs, in process
/// and through `client`, and returns one message per disagreement.
pub fn wire_conformance(client: &HttpBackend, cases: usize, seed: u64) -> Vec<(Capability, String)> {
    let local = MockBackends;
    let mut rng = rng(seed);
    let mut mismatches = Vec::new();
    for cap in Capability::ALL {
        for case in 0..cases {
            let outcome = match cap {
                Capability::Edit => {
                    let img = any_image(&mut rng);
                    let text = instruction_text(&mut rng);
                    same(local.edit(&img, &text), client.edit(&img, &text))
                }
                Capability::Sr => {
                    let img = any_image(&mut rng);
                    same(local.upscale(&img), client.upscale(&img))
                }
                Capability::Caption => {
                    let img = any_image(&mut rng);
                    same(local.caption(&img), client.caption(&img))
                }
                Capability::Embed => {
                    if rng.random_bool(0.5) {
                        let img = any_image(&mut rng);
                        same(
                            local.embed(EmbedInput::Image(&img)),
                            client.embed(EmbedInput::Image(&img)),
                        )
                    } else {
                        let face = random_face(&mut rng, 18, 18);
                        let mut text = coie::metrics::mock_target_caption(&face.render(), &[]).unwrap();
                        if rng.random_bool(0.3) {
                            text = instruction_text(&mut rng);
                        }
                        same(
                            local.embed(EmbedInput::Text(&text)),
                            client.embed(EmbedInput::Text(&text)),
                        )
                    }
                }
                Capability::Quality => {
                    let img = any_image(&mut rng);
                    same(local.score(&img), client.score(&img))
                }
                Capability::Judge => {
                    let face = random_face(&mut rng, 60, 300);
                    let input = face.render();
                    let n = rng.random_range(1..=3);
                    let edits = random_edits(&mut rng, n);
                    let output = mock_edit(&input, &compose_multi(&edits, 0).unwrap().text).unwrap();
                    let co: Vec<AttributeKind> = edits[1..].iter().map(|e| e.kind).collect();
                    same(
                        local.judge(&input, &output, &edits[0], &co),
                        client.judge(&input, &output, &edits[0], &co),
                    )
                }
                Capability::Complete => {
                    let n = rng.random_range(1..=4);
                    let instr = compose_multi(&random_edits(&mut rng, n), rng.random()).unwrap();
                    let prompt = if rng.random_bool(0.5) {
                        build_prompt(&instr, PromptTemplate::default_ref())
                    } else {
                        let face = random_face(&mut rng, 18, 18);
                        let states = face.states();
                        let caption = caption_for_states(states.iter().map(|(k, s)| (*k, s.unwrap_or("corrupted"))));
                        caption_rewrite_prompt(&caption, &instr.text)
                    };
                    let params = CompletionParams::default();
                    same(local.complete(&prompt, &params), client.complete(&prompt, &params))
                }
                Capability::PairEdit => {
                    let img = any_image(&mut rng);
                    let source = local.caption(&img).unwrap_or_default();
                    let target = coie::metrics::mock_target_caption(&img, &random_edits(&mut rng, 2))
                        .unwrap_or_else(|_| "a face with hair red".into());
                    same(
                        local.pair_edit(&img, &source, &target),
                        client.pair_edit(&img, &source, &target),
                    )
                }
            };
            if let Err(message) = outcome {
                mismatches.push((cap, format!("case {case}: {message}")));
            }
        }
    }
    mismatches
}

/// A server that answers every request with the next status in its script
/// (200 once the script runs out) and counts requests.
pub struct ScriptedServer {
    pub handle: MockServerHandle,
    pub hits: Arc<AtomicUsize>,
}

pub fn scripted_server(statuses: &[u16]) -> ScriptedServer {
    let script = Arc::new(Mutex::new(statuses.iter().copied().collect::<VecDeque<u16>>()));
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let router = Router::new().fallback(move || {
        let script = script.clone();
        let counter = counter.clone();
        async move {
            counter.fetch_add(1, Ordering::SeqCst);
            let status = script.lock().unwrap().pop_front().unwrap_or(200);
            let status = StatusCode::from_u16(status).unwrap();
            let body = if status.is_success() {
                r#"{"score": 0.5}"#.to_string()
            } else {
                format!(
                    r#"{{"error": {{"code": "scripted", "message": "status {}"}}}}"#,
                    status.as_u16()
                )
            };
            (status, [("content-type", "application/json")], body).into_response()
        }
    });
    ScriptedServer {
        handle: spawn_router(router).unwrap(),
        hits,
    }
}

pub fn fast_endpoint(base_url: String, max_retries: u32) -> BackendEndpoint {
    BackendEndpoint {
        max_retries,
        backoff_ms: 1,
        timeout_ms: 5_000,
        ..BackendEndpoint::new(base_url)
    }
}

/// Exercises the retry policy against scripted servers. Returns one
/// message per violated expectation.
pub fn retry_policy_violations() -> Vec<String> {
    let probe = FaceImage::filled(4, 4, [1, 2, 3]).unwrap();
    let mut problems = Vec::new();
    for status in [400u16, 401, 404, 422, 429] {
        let server = scripted_server(&[status, status, status]);
        let client = HttpBackend::new(fast_endpoint(server.handle.base_url(), 3)).unwrap();
        let result = client.score(&probe);
        let hits = server.hits.load(Ordering::SeqCst);
        if hits != 1 {
            problems.push(format!("HTTP {status}: {hits} requests, expected 1"));
        }
        if !matches!(&result, Err(BackendError::Rejected { status: s, code, .. }) if *s == status && code == "scripted")
        {
            problems.push(format!("HTTP {status}: got {result:?}"));
        }
    }
    for (script, retries, expect_hits, expect_ok) in [
        (&[500u16, 503][..], 2, 3, true),
        (&[502, 500, 503][..], 2, 3, false),
        (&[503][..], 0, 1, false),
        (&[500, 500, 500, 500][..], 4, 5, true),
    ] {
        let server = scripted_server(script);
        let client = HttpBackend::new(fast_endpoint(server.handle.base_url(), retries)).unwrap();
        let result = client.score(&probe);
        let hits = server.hits.load(Ordering::SeqCst);
        if hits != expect_hits {
            problems.push(format!(
                "{script:?} with {retries} retries: {hits} requests, expected {expect_hits}"
            ));
        }
        let ok = match &result {
            Ok(v) => *v == 0.5,
            Err(BackendError::Unavailable { attempts, .. }) => {
                if *attempts as usize != expect_hits {
                    problems.push(format!("{script:?}: reported {attempts} attempts"));
                }
                false
            }
            Err(e) => {
                problems.push(format!("{script:?}: unexpected error {e}"));
                false
            }
        };
        if ok != expect_ok {
            problems.push(format!("{script:?} with {retries} retries: got {result:?}"));
        }
    }
    problems
}
