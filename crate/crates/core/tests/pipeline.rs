mod common;

use std::fs;
use std::path::Path;

use coie::backends::server::spawn_mock_server;
use coie::backends::{BackendSet, BackendsConfig};
use coie::dataset::{self, BuildConfig, DatasetManifest, EditPlan, MANIFEST_FILE};
use coie::harness::{self, Decomposition, ExperimentConfig, ReportFormat, TestSet, TestSetSpec, RESULTS_FILE};
use coie::metrics;
use coie::synthetic::{generate_corpus, CorpusSpec};

use common::fast_endpoint;

fn corpus(dir: &Path, n: usize) -> Vec<dataset::CorpusEntry> {
    let mut spec = CorpusSpec::new(n, 21);
    spec.widths = vec![512];
    generate_corpus(&spec, dir).unwrap()
}

fn testset(dir: &Path, n: usize) -> TestSet {
    let c = corpus(dir, n);
    let spec = TestSetSpec {
        n_faces: n,
        seed: 5,
        ..Default::default()
    };
    harness::build_testset(&spec, &c, &BackendSet::mock()).unwrap()
}

fn config(tag: &str, decomposition: Decomposition, sr_enabled: bool) -> ExperimentConfig {
    ExperimentConfig {
        model_tag: tag.into(),
        decomposition,
        sr_enabled,
        workers: 3,
        ..Default::default()
    }
}

#[test]
fn coverage_ordering_at_four_attributes() {
    let dir = tempfile::tempdir().unwrap();
    let set = testset(dir.path(), 6);
    let b = BackendSet::mock();
    let at4 = |cfg: &ExperimentConfig| {
        let evals = harness::run_experiment(cfg, &set, &b).unwrap();
        let four: Vec<_> = evals.into_iter().filter(|e| e.attribute_count == 4).collect();
        metrics::coverage(&four).unwrap()
    };
    let sr_on = at4(&config("sr", Decomposition::RuleBased, true));
    let sr_off = at4(&config("nosr", Decomposition::RuleBased, false));
    let single = at4(&config("single", Decomposition::None, true));
    assert_eq!((sr_on, sr_off, single), (1.0, 0.75, 0.25));
}

#[test]
fn experiment_over_http_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let set = testset(dir.path(), 3);
    let server = spawn_mock_server().unwrap();
    let mut remote = config("llm", Decomposition::Llm, true);
    remote.backends = Some(BackendsConfig::single(fast_endpoint(server.base_url(), 0)));
    let local = config("llm", Decomposition::Llm, true);
    let remote_dir = dir.path().join("remote");
    let local_dir = dir.path().join("local");
    harness::run_experiment_to_dir(&remote, &set, &remote.backend_set().unwrap(), &remote_dir).unwrap();
    harness::run_experiment_to_dir(&local, &set, &local.backend_set().unwrap(), &local_dir).unwrap();
    assert_eq!(
        fs::read(remote_dir.join(RESULTS_FILE)).unwrap(),
        fs::read(local_dir.join(RESULTS_FILE)).unwrap()
    );
}

#[test]
fn results_and_reports_are_stable_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let set = testset(dir.path(), 4);
    let b = BackendSet::mock();
    let mut outputs = Vec::new();
    for (i, workers) in [1, 4].into_iter().enumerate() {
        let run = dir.path().join(format!("run{i}"));
        let base = dir.path().join(format!("base{i}"));
        let mut cfg = config("coie", Decomposition::RuleBased, true);
        cfg.workers = workers;
        harness::run_experiment_to_dir(&cfg, &set, &b, &run).unwrap();
        harness::run_experiment_to_dir(&config("single", Decomposition::None, false), &set, &b, &base).unwrap();
        let csv = harness::render_report(&[base, run.clone()], Some("single"), ReportFormat::Csv, &run).unwrap();
        outputs.push((fs::read(run.join(RESULTS_FILE)).unwrap(), fs::read(csv).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn dataset_over_http_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("corpus"), 8);
    let plan = EditPlan::from_toml(
        "seed = 2\n[[attributes]]\nkind = \"gender\"\nfaces = 3\n[[attributes]]\nkind = \"beard\"\nchanges = [\"add\"]\nfaces = 5",
    )
    .unwrap();
    let server = spawn_mock_server().unwrap();
    let remote = BackendSet::from_config(Some(&BackendsConfig::single(fast_endpoint(server.base_url(), 0)))).unwrap();
    let cfg = BuildConfig::default();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    dataset::build_dataset(&c, &plan, &cfg, &BackendSet::mock(), &a).unwrap();
    dataset::build_dataset(&c, &plan, &cfg, &remote, &b).unwrap();
    assert_eq!(
        fs::read(a.join(MANIFEST_FILE)).unwrap(),
        fs::read(b.join(MANIFEST_FILE)).unwrap()
    );
    assert!(dataset::validate_dataset(&b).unwrap().is_empty());
}

#[test]
fn empty_plan_gives_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("corpus"), 2);
    let out = dir.path().join("out");
    let report = dataset::build_dataset(
        &c,
        &EditPlan::default(),
        &BuildConfig::default(),
        &BackendSet::mock(),
        &out,
    )
    .unwrap();
    assert_eq!(report.planned, 0);
    let manifest = DatasetManifest::read(&out.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.entries.is_empty());
    assert_eq!(dataset::summarize(&manifest).total.samples, 0);
}

#[test]
fn validation_catches_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("corpus"), 3);
    let plan = EditPlan::from_toml("[[attributes]]\nkind = \"hair\"\nchanges = [\"gray\"]\nfaces = 3").unwrap();
    let out = dir.path().join("out");
    dataset::build_dataset(&c, &plan, &BuildConfig::default(), &BackendSet::mock(), &out).unwrap();
    assert!(dataset::validate_dataset(&out).unwrap().is_empty());

    let manifest_path = out.join(MANIFEST_FILE);
    let original = fs::read_to_string(&manifest_path).unwrap();
    let mut manifest = DatasetManifest::read(&manifest_path).unwrap();
    manifest.entries[0].clip_score = 0.1;
    manifest.write(&manifest_path).unwrap();
    let problems = dataset::validate_dataset(&out).unwrap();
    assert_eq!(problems.len(), 1, "{problems:?}");

    fs::write(&manifest_path, &original).unwrap();
    let manifest = DatasetManifest::read(&manifest_path).unwrap();
    fs::remove_file(out.join(&manifest.entries[1].output_ref)).unwrap();
    assert_eq!(dataset::validate_dataset(&out).unwrap().len(), 1);
}
