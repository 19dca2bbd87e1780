use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use coie::backends::{BackendEndpoint, HttpBackend};
use coie::chain::ChainExecutor;
use coie::dataset::{self, BuildConfig, EditPlan};
use coie::decomposer::{decompose_llm, decompose_rule_based, PromptTemplate};
use coie::harness::{self, Decomposition, ExperimentConfig, ReportFormat, TestSet, TestSetSpec};
use coie::imaging;
use coie::instructions::MultiAttributeInstruction;
use coie::synthetic::{self, CorpusSpec};

#[derive(Parser)]
#[command(name = "coie", version, about = "Chain-of-instruct face editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BackendArgs {
    /// Use the in-process mock backends.
    #[arg(long, conflicts_with = "config")]
    mock: bool,
    /// Configuration file (TOML) with backend endpoints and defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl BackendArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display())),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split a compound instruction into single-attribute steps.
    Decompose {
        #[arg(long)]
        instruction: String,
        /// Use the rule-based splitter instead of a text completer.
        #[arg(long, conflicts_with = "endpoint")]
        rule_based: bool,
        /// Base URL of a text-completion backend; the mock completer otherwise.
        #[arg(long)]
        endpoint: Option<String>,
        /// Prompt template (TOML).
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        retries: u32,
    },
    /// Edit one face and save the full trace.
    Edit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        out: PathBuf,
        /// Skip super-resolution between steps.
        #[arg(long)]
        no_sr: bool,
        /// Apply the whole instruction as one edit.
        #[arg(long)]
        single_shot: bool,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Write a synthetic face corpus with part annotations.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "512")]
        widths: Vec<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        corrupted_fraction: f64,
    },
    /// Sample evaluation faces and compound instructions from a corpus.
    BuildTestset {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0.7)]
        quality_floor: f64,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Build a triplet dataset; resumes from an existing journal in OUT.
    BuildDataset {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many triplets without writing the manifest.
        #[arg(long)]
        stop_after: Option<usize>,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Check a built dataset's files, masks, flags and counts.
    ValidateDataset {
        #[arg(long)]
        root: PathBuf,
    },
    /// Run one configuration over a test set.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate result directories into metric tables.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, default_value = "md")]
        format: ReportFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the mock backends over HTTP.
    MockServe {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

fn decompose(
    instruction: &str,
    rule_based: bool,
    endpoint: Option<String>,
    template: Option<PathBuf>,
    retries: u32,
) -> Result<()> {
    let instr = MultiAttributeInstruction::from_text(instruction);
    if rule_based {
        let chain = decompose_rule_based(&instr)?;
        println!("{}", chain.to_canonical());
        return Ok(());
    }
    let template = match template {
        Some(path) => PromptTemplate::load(&path)?,
        None => PromptTemplate::default_ref().clone(),
    };
    let completer: Box<dyn coie::backends::TextCompleter> = match endpoint {
        Some(url) => Box::new(HttpBackend::new(BackendEndpoint::new(url))?),
        None => Box::new(coie::backends::MockBackends),
    };
    let result = decompose_llm(&instr, completer.as_ref(), &template, retries)?;
    if let Some(kinds) = &result.recognized_hint {
        let names: Vec<&str> = kinds.iter().map(|k| k.as_str()).collect();
        log::info!("completer recognized: {}", names.join(", "));
    }
    println!("{}", result.chain.to_canonical());
    Ok(())
}

fn edit(
    image: &Path,
    instruction: &str,
    out: &Path,
    no_sr: bool,
    single_shot: bool,
    config: ExperimentConfig,
) -> Result<()> {
    let backends = config.backend_set()?;
    let x0 = imaging::load_png(image).with_context(|| format!("reading {}", image.display()))?;
    let instr = MultiAttributeInstruction::from_text(instruction);
    let executor = ChainExecutor::from_backends(&backends, !no_sr && config.sr_enabled);
    let traced = if single_shot || config.decomposition == Decomposition::None {
        executor.run_single_shot(&x0, &instr)
    } else {
        let chain = match config.decomposition {
            Decomposition::Llm => {
                decompose_llm(
                    &instr,
                    backends.completer.as_ref(),
                    &config.prompt()?,
                    config.decompose_retries,
                )?
                .chain
            }
            _ => decompose_rule_based(&instr)?,
        };
        executor.run_chain(&x0, &chain)
    };
    let (trace, failure) = match traced {
        Ok(trace) => (trace, None),
        Err(aborted) => (*aborted.trace, Some((aborted.step, aborted.source))),
    };
    trace.save(out)?;
    for step in &trace.steps {
        println!(
            "{}. {} [{:?}, {} ms]",
            step.index, step.instruction.text, step.status, step.wall_time_ms
        );
    }
    let final_path = out.join("final.png");
    imaging::save_png(trace.final_image(), &final_path)?;
    println!("final image: {}", final_path.display());
    if let Some((step, source)) = failure {
        bail!("chain aborted at step {step}: {source}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decompose {
            instruction,
            rule_based,
            endpoint,
            template,
            retries,
        } => decompose(&instruction, rule_based, endpoint, template, retries),
        Command::Edit {
            image,
            instruction,
            out,
            no_sr,
            single_shot,
            backends,
        } => edit(&image, &instruction, &out, no_sr, single_shot, backends.load()?),
        Command::SynthCorpus {
            out,
            n,
            widths,
            seed,
            corrupted_fraction,
        } => {
            let spec = CorpusSpec {
                n_faces: n,
                widths,
                seed,
                corrupted_fraction,
            };
            let entries = synthetic::generate_corpus(&spec, &out)?;
            println!(
                "{} faces written to {}",
                entries.len(),
                out.join(synthetic::CORPUS_FILE).display()
            );
            Ok(())
        }
        Command::BuildTestset {
            corpus,
            out,
            n,
            quality_floor,
            counts,
            seed,
            backends,
        } => {
            let config = backends.load()?;
            let spec = TestSetSpec {
                n_faces: n,
                quality_floor,
                attribute_counts: counts,
                seed,
            };
            let entries = dataset::read_corpus(&corpus)?;
            let set = harness::build_testset(&spec, &entries, &config.backend_set()?)?;
            set.save(&out)?;
            println!("{} samples, testset_id {}", set.samples.len(), set.testset_id);
            Ok(())
        }
        Command::BuildDataset {
            corpus,
            plan,
            out,
            stop_after,
            backends,
        } => {
            let config = backends.load()?;
            let build = BuildConfig {
                thresholds: config.thresholds,
                workers: config.workers,
                stop_after,
                ..Default::default()
            };
            let entries = dataset::read_corpus(&corpus)?;
            let plan = EditPlan::load(&plan)?;
            let report = dataset::build_dataset(&entries, &plan, &build, &config.backend_set()?, &out)?;
            println!(
                "planned {}, resumed {}, accepted {}, rejected {}, skipped {}, failed {}",
                report.planned,
                report.resumed,
                report.accepted,
                report.rejected,
                report.skipped,
                report.errors.len()
            );
            for (id, message) in &report.errors {
                log::warn!("{id}: {message}");
            }
            if report.interrupted {
                println!("stopped early; rerun to resume");
            } else if !report.errors.is_empty() {
                println!("some triplets failed; rerun to retry them");
            }
            Ok(())
        }
        Command::ValidateDataset { root } => {
            let problems = dataset::validate_dataset(&root)?;
            for p in &problems {
                println!("{p}");
            }
            if !problems.is_empty() {
                bail!("{} problems found", problems.len());
            }
            println!("ok");
            Ok(())
        }
        Command::RunExperiment { config, testset, out } => {
            let config = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let set = TestSet::load(&testset)?;
            let record = harness::run_experiment_to_dir(&config, &set, &config.backend_set()?, &out)?;
            println!(
                "{}: {} samples ({} with errors) written to {}",
                record.config.model_tag,
                record.n_samples,
                record.n_errors,
                out.display()
            );
            Ok(())
        }
        Command::Report {
            results,
            baseline,
            format,
            out,
        } => {
            let path = harness::render_report(&results, baseline.as_deref(), format, &out)?;
            print!("{}", std::fs::read_to_string(&path)?);
            Ok(())
        }
        Command::MockServe { port, host } => {
            coie::backends::server::serve(SocketAddr::new(host, port))?;
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
