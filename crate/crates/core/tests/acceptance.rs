//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if
//! any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::Rng;

use coie::backends::server::spawn_mock_server;
use coie::backends::{BackendSet, HttpBackend};
use coie::dataset::{
    self, filter_triplet, BuildConfig, DatasetManifest, EditPlan, EditTriplet, Thresholds, MANIFEST_FILE,
};
use coie::decomposer::{decompose_rule_based, parse_response};
use coie::harness::{self, Decomposition, ExperimentConfig, TestSet, TestSetSpec};
use coie::imaging::{self, composite, masked_mean_abs_diff, FaceImage};
use coie::instructions::{compose_multi, AttributeEdit, AttributeKind, Lexicon, SingleAttributeInstruction};
use coie::metrics::{self, GroupStats, Judgement, SampleEvaluation};
use coie::synthetic::{generate_corpus, CorpusSpec};

use common::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn compositing_laws() -> Outcome {
    let mut rng = rng(1);
    let cases = 1000;
    for case in 0..cases {
        let base = noise_image(&mut rng, 16, 16);
        let edited = noise_image(&mut rng, 16, 16);
        let density = rng.random_range(0.0..=1.0);
        let mask = random_mask(&mut rng, 16, 16, density);
        let out = composite(&base, &edited, &mask).map_err(|e| e.to_string())?;
        for y in 0..16 {
            for x in 0..16 {
                let want = if mask.get(x, y) {
                    edited.pixel(x, y)
                } else {
                    base.pixel(x, y)
                };
                ensure(out.pixel(x, y) == want, || {
                    format!("case {case}: pixel ({x},{y}) not selected correctly")
                })?;
            }
        }
        let d = masked_mean_abs_diff(&base, &out, Some(&mask)).map_err(|e| e.to_string())?;
        ensure(d.value == 0.0, || format!("case {case}: outside-mask diff {}", d.value))?;
    }
    Ok(format!("{cases} cases bit-exact"))
}

fn preserve_l1_oracle() -> Outcome {
    let mut rng = rng(2);
    let cases = 500;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (w, h) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let a = noise_image(&mut rng, w, h);
        let b = noise_image(&mut rng, w, h);
        let mask = rng.random_bool(0.8).then(|| {
            let density = rng.random_range(0.0..=1.0);
            random_mask(&mut rng, w, h, density)
        });
        let got = masked_mean_abs_diff(&a, &b, mask.as_ref())
            .map_err(|e| e.to_string())?
            .value;
        let want = brute_force_l1(&a, &b, mask.as_ref());
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-9, || {
            format!("case {case}: {got} vs oracle {want}")
        })?;
    }
    let base = FaceImage::from_fn(32, 32, |x, y| {
        [(x * 7 % 240) as u8, (y * 5 % 240) as u8, ((x + y) % 240) as u8]
    })
    .map_err(|e| e.to_string())?;
    let shifted = FaceImage::from_fn(32, 32, |x, y| base.pixel(x, y).map(|c| c + 10)).map_err(|e| e.to_string())?;
    let shift = masked_mean_abs_diff(&base, &shifted, None)
        .map_err(|e| e.to_string())?
        .value;
    ensure(shift == 10.0, || format!("constant shift 10 measured as {shift}"))?;
    Ok(format!(
        "{cases} cases, max deviation {worst:.1e}; shift 10 -> {shift:.1}"
    ))
}

fn evaluation(id: usize, judgements: Vec<bool>) -> SampleEvaluation {
    let kinds = AttributeKind::ALL;
    SampleEvaluation {
        sample_id: format!("s{id}"),
        model_tag: "m".into(),
        attribute_count: judgements.len(),
        clip_sim: 0.0,
        clip_no_signal: false,
        judgements: judgements
            .into_iter()
            .enumerate()
            .map(|(i, correct)| Judgement {
                edit: AttributeEdit::new(kinds[i], Lexicon::default_ref().changes(kinds[i])[0].clone()).unwrap(),
                correct,
            })
            .collect(),
        preserve_l1: 0.0,
        quality: 0.0,
        target_caption: String::new(),
        error: None,
    }
}

fn coverage_oracle() -> Outcome {
    let mut rng = rng(3);
    let cases = 1000;
    for case in 0..cases {
        let n = rng.random_range(1..=20);
        let evals: Vec<SampleEvaluation> = (0..n)
            .map(|i| {
                let k = rng.random_range(1..=9);
                let p = rng.random_range(0.0..=1.0);
                evaluation(i, (0..k).map(|_| rng.random_bool(p)).collect())
            })
            .collect();
        let got = metrics::coverage(&evals).map_err(|e| e.to_string())?;
        let want = flat_coverage(&evals);
        ensure(got == want, || {
            format!("case {case}: pooled {got} vs flat count {want}")
        })?;
    }
    let pair = [
        evaluation(0, vec![true, true]),
        evaluation(1, vec![false, false, false]),
    ];
    let pooled = metrics::coverage(&pair).map_err(|e| e.to_string())?;
    ensure(pooled == 0.4, || format!("(2/2, 0/3) gave {pooled}"))?;
    Ok(format!("{cases} cases exact; (2/2, 0/3) -> {pooled}"))
}

/// 512-wide synthetic faces, 20 samples per attribute count.
fn desk_testset(dir: &Path, counts: Vec<usize>) -> Result<TestSet, String> {
    let mut spec = CorpusSpec::new(20, 404);
    spec.widths = vec![512];
    let corpus = generate_corpus(&spec, dir).map_err(|e| e.to_string())?;
    let ts = TestSetSpec {
        n_faces: 20,
        quality_floor: 0.7,
        attribute_counts: counts,
        seed: 404,
    };
    harness::build_testset(&ts, &corpus, &BackendSet::mock()).map_err(|e| e.to_string())
}

fn coverage_by_count(
    set: &TestSet,
    decomposition: Decomposition,
    sr_enabled: bool,
) -> Result<BTreeMap<usize, f64>, String> {
    let config = ExperimentConfig {
        model_tag: "run".into(),
        decomposition,
        sr_enabled,
        ..Default::default()
    };
    let evals = harness::run_experiment(&config, set, &BackendSet::mock()).map_err(|e| e.to_string())?;
    if let Some(e) = evals.iter().find(|e| e.error.is_some()) {
        return Err(format!("{}: {}", e.sample_id, e.error.as_deref().unwrap_or_default()));
    }
    let mut by_n: BTreeMap<usize, Vec<SampleEvaluation>> = BTreeMap::new();
    for e in evals {
        by_n.entry(e.attribute_count).or_default().push(e);
    }
    by_n.into_iter()
        .map(|(n, group)| {
            ensure(group.len() == 20, || format!("N={n} has {} samples", group.len()))?;
            metrics::coverage(&group).map(|c| (n, c)).map_err(|e| e.to_string())
        })
        .collect()
}

fn coie_effect() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let set = desk_testset(dir.path(), vec![2, 3, 4])?;
    let single = coverage_by_count(&set, Decomposition::None, false)?;
    let coie = coverage_by_count(&set, Decomposition::RuleBased, true)?;
    let mut parts = Vec::new();
    for n in [2usize, 3, 4] {
        let (s, c) = (single[&n], coie[&n]);
        ensure(s == 1.0 / n as f64, || format!("single-shot N={n}: {s}"))?;
        ensure(c == 1.0, || format!("chained N={n}: {c}"))?;
        parts.push(format!("N={n} {s:.3} -> {c:.3}"));
    }
    Ok(parts.join(", "))
}

fn sr_ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let set = desk_testset(dir.path(), vec![4])?;
    let off = coverage_by_count(&set, Decomposition::RuleBased, false)?[&4];
    let on = coverage_by_count(&set, Decomposition::RuleBased, true)?[&4];
    ensure(off == 0.75, || format!("SR off: {off}"))?;
    ensure(on == 1.0, || format!("SR on: {on}"))?;
    Ok(format!("N=4 SR off {off:.3}, SR on {on:.3}"))
}

fn stats(clip: f64, coverage: f64) -> GroupStats {
    GroupStats {
        clip_sim_mean: clip,
        coverage,
        preserve_l1_mean: 1.0,
        quality_mean: 0.5,
        n_samples: 200,
    }
}

fn delta_arithmetic() -> Outcome {
    let mut groups = BTreeMap::new();
    groups.insert(("baseline".to_string(), Some(2)), stats(0.2291, 0.535));
    groups.insert(("chained".to_string(), Some(2)), stats(0.2535, 0.770));
    let report = metrics::report_from_stats(groups, Some("baseline")).map_err(|e| e.to_string())?;
    let md = metrics::render_markdown(&report);
    let d = report
        .group("chained", Some(2))
        .and_then(|g| g.delta)
        .ok_or("missing delta")?;
    let (cov, clip) = (
        d.coverage.ok_or("no coverage delta")?,
        d.clip_sim.ok_or("no clip delta")?,
    );
    ensure(md.contains("0.770 (+43.93%)"), || {
        "coverage cell not rendered as 0.770 (+43.93%)".into()
    })?;
    ensure(md.contains("0.2535 (+10.65%)"), || {
        "clip cell not rendered as 0.2535 (+10.65%)".into()
    })?;
    ensure((cov - 43.92).abs() <= 0.05, || {
        format!("coverage delta {cov} vs reference 43.92")
    })?;
    ensure((clip - 10.65).abs() <= 0.05, || {
        format!("clip delta {clip} vs reference 10.65")
    })?;
    Ok(format!(
        "+{cov:.2}% (reference +43.92%), +{clip:.2}% (reference +10.65%)"
    ))
}

fn summary_arithmetic() -> Outcome {
    let reference: [(AttributeKind, usize, usize); 9] = [
        (AttributeKind::Hair, 10_345, 40_139),
        (AttributeKind::Skin, 2_535, 15_204),
        (AttributeKind::Eyes, 3_838, 7_676),
        (AttributeKind::Age, 18_947, 37_894),
        (AttributeKind::Gender, 10_266, 20_532),
        (AttributeKind::Anime, 9_899, 19_798),
        (AttributeKind::Beard, 2_002, 4_004),
        (AttributeKind::Glasses, 4_294, 8_588),
        (AttributeKind::Expression, 7_624, 27_947),
    ];
    let lex = Lexicon::default_ref();
    let mut entries = Vec::with_capacity(181_782);
    for &(kind, ids, samples) in &reference {
        let changes = lex.changes(kind);
        for i in 0..samples {
            let edit = AttributeEdit::new(kind, changes[i % changes.len()].clone()).unwrap();
            entries.push(EditTriplet {
                triplet_id: format!("{kind}/{i}"),
                face_id: format!("face{}", i % ids),
                instruction: SingleAttributeInstruction {
                    text: String::new(),
                    edit: Some(edit),
                },
                input_ref: String::new(),
                output_ref: String::new(),
                mask_ref: String::new(),
                source_caption: String::new(),
                target_caption: String::new(),
                clip_score: 1.0,
                quality_score: 1.0,
                accepted: true,
            });
        }
    }
    let summary = dataset::summarize(&DatasetManifest::new(Thresholds::default(), 0, entries));
    for (row, &(kind, ids, samples)) in summary.rows.iter().zip(&reference) {
        ensure(
            row.attribute == kind.as_str() && row.ids == ids && row.samples == samples,
            || format!("{kind}: {} ids, {} samples", row.ids, row.samples),
        )?;
    }
    let total = summary.total.samples;
    ensure(total == 181_782, || format!("total {total}"))?;
    ensure(summary.rows.iter().map(|r| r.samples).sum::<usize>() == total, || {
        "rows do not sum to total".into()
    })?;
    Ok(format!("total samples {total}"))
}

fn kind_subsets(k: usize) -> Vec<Vec<AttributeKind>> {
    fn go(start: usize, k: usize, cur: &mut Vec<AttributeKind>, out: &mut Vec<Vec<AttributeKind>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..AttributeKind::ALL.len() {
            cur.push(AttributeKind::ALL[i]);
            go(i + 1, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, k, &mut Vec::new(), &mut out);
    out
}

fn render_list(rng: &mut rand_chacha::ChaCha8Rng, items: &[String]) -> String {
    let style = rng.random_range(0..7);
    let mut out = String::new();
    if rng.random_bool(0.5) {
        out.push_str("Sure, here is the breakdown.\n");
    }
    out.push_str(["Output:", "output :", "OUTPUT:"].choose(rng).unwrap());
    out.push('\n');
    for (i, item) in items.iter().enumerate() {
        let n = i + 1;
        let marker = match style {
            0 => format!("{n}."),
            1 => format!("{n})"),
            2 => format!("{n}:"),
            3 => format!("Step {n}:"),
            4 => "-".to_string(),
            5 => "*".to_string(),
            _ => "•".to_string(),
        };
        let lead = [" ", "  ", "\t", ""].choose(rng).unwrap();
        let gap = [" ", "  ", "\t"].choose(rng).unwrap();
        let trail = ["", " ", "  "].choose(rng).unwrap();
        let quoted = if rng.random_bool(0.2) {
            format!("\"{item}\"")
        } else {
            item.clone()
        };
        out.push_str(&format!("{lead}{marker}{gap}{quoted}{trail}\n"));
        if rng.random_bool(0.2) {
            out.push('\n');
        }
    }
    out
}

fn decomposer_round_trip() -> Outcome {
    let lex = Lexicon::default_ref();
    let mut combos = 0;
    for k in [2, 3, 4] {
        for (i, kinds) in kind_subsets(k).into_iter().enumerate() {
            let edits: Vec<AttributeEdit> = kinds
                .iter()
                .map(|&kind| AttributeEdit::new(kind, lex.changes(kind)[0].clone()).unwrap())
                .collect();
            let instr = compose_multi(&edits, 17 + i as u64).map_err(|e| e.to_string())?;
            let chain = decompose_rule_based(&instr).map_err(|e| format!("{:?}: {e}", instr.text))?;
            let parsed =
                parse_response(&chain.to_canonical(), Some(k)).map_err(|e| format!("{:?}: {e}", instr.text))?;
            let got: BTreeSet<AttributeKind> = parsed.steps.iter().flat_map(|s| s.kinds()).collect();
            let want: BTreeSet<AttributeKind> = kinds.iter().copied().collect();
            ensure(
                parsed.steps.len() == k && got == want && parsed.steps.iter().all(|s| s.kinds().len() == 1),
                || format!("{:?} -> {:?}", instr.text, chain.to_canonical()),
            )?;
            combos += 1;
        }
    }
    let mut rng = rng(8);
    let fuzz = 600;
    for case in 0..fuzz {
        let n = rng.random_range(1..=6);
        let edits = random_edits(&mut rng, n);
        let items: Vec<String> = edits
            .iter()
            .enumerate()
            .map(|(i, e)| {
                compose_multi(std::slice::from_ref(e), case as u64 + i as u64)
                    .unwrap()
                    .text
            })
            .collect();
        let raw = render_list(&mut rng, &items);
        let parsed = parse_response(&raw, None).map_err(|e| format!("fuzz {case}: {e}\n{raw}"))?;
        ensure(parsed.steps.len() == n, || {
            format!("fuzz {case}: {} items for {n}\n{raw}", parsed.steps.len())
        })?;
        let texts: Vec<&str> = parsed.steps.iter().map(|s| s.text.as_str()).collect();
        ensure(texts == items.iter().map(String::as_str).collect::<Vec<_>>(), || {
            format!("fuzz {case}: {texts:?}")
        })?;
        let wrong = parse_response(&raw, Some(n + 1));
        ensure(wrong.is_err(), || {
            format!("fuzz {case}: accepted a wrong expected count")
        })?;
    }
    Ok(format!(
        "{combos} subsets round-trip, {fuzz} fuzzed replies counted exactly"
    ))
}

fn wire_conformance_check() -> Outcome {
    let server = spawn_mock_server().map_err(|e| e.to_string())?;
    let client = HttpBackend::new(fast_endpoint(server.base_url(), 0)).map_err(|e| e.to_string())?;
    let cases = 50;
    let mismatches = wire_conformance(&client, cases, 9);
    if let Some((cap, msg)) = mismatches.first() {
        return Err(format!("{} mismatches, first {cap}: {msg}", mismatches.len()));
    }
    let violations = retry_policy_violations();
    ensure(violations.is_empty(), || violations.join("; "))?;
    Ok(format!(
        "8 capabilities x {cases} inputs identical; 4xx not retried, 5xx retried"
    ))
}

fn dataset_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut spec = CorpusSpec::new(50, 10);
    spec.widths = vec![192, 512];
    let corpus = generate_corpus(&spec, &dir.path().join("corpus")).map_err(|e| e.to_string())?;
    let plan = EditPlan::from_toml(
        "seed = 10\n[[attributes]]\nkind = \"hair\"\nchanges = [\"red\", \"gray\"]\nfaces = 50\n\
         [[attributes]]\nkind = \"glasses\"\nfaces = 30",
    )
    .map_err(|e| e.to_string())?;
    let backends = BackendSet::mock();
    let mut manifests = Vec::new();
    for (run, stops) in [[17usize, 60], [45, 5]].iter().enumerate() {
        let out = dir.path().join(format!("build{run}"));
        for &stop in stops {
            let cfg = BuildConfig {
                stop_after: Some(stop),
                ..Default::default()
            };
            let r = dataset::build_dataset(&corpus, &plan, &cfg, &backends, &out).map_err(|e| e.to_string())?;
            ensure(r.interrupted, || format!("run {run} was not interrupted at {stop}"))?;
        }
        let r = dataset::build_dataset(&corpus, &plan, &BuildConfig::default(), &backends, &out)
            .map_err(|e| e.to_string())?;
        ensure(r.errors.is_empty(), || format!("errors: {:?}", r.errors))?;
        let problems = dataset::validate_dataset(&out).map_err(|e| e.to_string())?;
        ensure(problems.is_empty(), || problems.join("; "))?;
        manifests.push((
            out.clone(),
            std::fs::read(out.join(MANIFEST_FILE)).map_err(|e| e.to_string())?,
        ));
    }
    ensure(manifests[0].1 == manifests[1].1, || "manifests differ".into())?;

    let root = &manifests[0].0;
    let manifest = DatasetManifest::read(&root.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let th = manifest.header.thresholds;
    for e in &manifest.entries {
        let load = |rel: &str| imaging::load_png(root.join(rel)).map_err(|err| err.to_string());
        let (input, output) = (load(&e.input_ref)?, load(&e.output_ref)?);
        let mask = imaging::load_mask(root.join(&e.mask_ref)).map_err(|err| err.to_string())?;
        let outside = brute_force_l1(&input, &output, Some(&mask));
        ensure(outside == 0.0, || {
            format!("{}: outside-mask diff {outside}", e.triplet_id)
        })?;
        let expected = e.clip_score >= th.clip && e.quality_score >= th.quality;
        ensure(
            e.accepted == expected && filter_triplet(e, &th).accepted == expected,
            || format!("{}: accepted flag inconsistent", e.triplet_id),
        )?;
    }
    let journal = dataset::read_journal(&root.join(dataset::JOURNAL_FILE)).map_err(|e| e.to_string())?;
    let rejected = journal
        .values()
        .filter(|r| r.status == dataset::JournalStatus::Rejected)
        .count();
    Ok(format!(
        "{} accepted, {rejected} rejected; manifests byte-identical; all triplets preserve outside mask",
        manifest.entries.len()
    ))
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    check: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            name: "compositing laws",
            budget: Some(Duration::from_secs(5)),
            check: compositing_laws,
        },
        Criterion {
            name: "preserve-L1 oracle",
            budget: None,
            check: preserve_l1_oracle,
        },
        Criterion {
            name: "coverage oracle",
            budget: None,
            check: coverage_oracle,
        },
        Criterion {
            name: "chained editing effect",
            budget: Some(Duration::from_secs(60)),
            check: coie_effect,
        },
        Criterion {
            name: "super-resolution ablation",
            budget: Some(Duration::from_secs(30)),
            check: sr_ablation,
        },
        Criterion {
            name: "delta arithmetic",
            budget: None,
            check: delta_arithmetic,
        },
        Criterion {
            name: "dataset summary arithmetic",
            budget: None,
            check: summary_arithmetic,
        },
        Criterion {
            name: "decomposer round-trip",
            budget: None,
            check: decomposer_round_trip,
        },
        Criterion {
            name: "wire conformance",
            budget: None,
            check: wire_conformance_check,
        },
        Criterion {
            name: "dataset determinism",
            budget: Some(Duration::from_secs(60)),
            check: dataset_determinism,
        },
    ];
    let started = Instant::now();
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let t = Instant::now();
        let mut outcome = (c.check)();
        let elapsed = t.elapsed();
        if let (Ok(_), Some(budget)) = (&outcome, c.budget) {
            if elapsed > budget {
                outcome = Err(format!("took {elapsed:.2?}, budget {budget:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS {:>2} {}: {detail} ({elapsed:.2?})", i + 1, c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {}: {detail} ({elapsed:.2?})", i + 1, c.name);
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.2?}",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
