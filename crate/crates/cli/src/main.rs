//! `clone`: command-line driver for the dataset cloning pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dsclone::analysis::{self, Metric, MetricParams};
use dsclone::catalog::{parse_class_list, BackgroundSet, ClassCatalog, MetadataSource};
use dsclone::evaluator::{self, ClassMask, FeatureMatrix, TunerConfig};
use dsclone::generation::{
    self, HttpBackend, HttpBackendConfig, ImageFileFormat, MockBackend, RunOptions,
};
use dsclone::par::Parallelism;
use dsclone::prompt::{self, GenParams, GenerationPlan, PromptTemplate};
use dsclone::report::{self, NamedReport, RunManifest};
use dsclone::store::{self, DatasetStore, DatasetView, ManifestHeader};
use dsclone::trainer::{self, Checkpoint, TrainConfig};
use dsclone::{Error, Result};

const TEMPLATE_HELP: &str = "Comma-separated templates: name (NAME), name_hyper (NAME_HYPERNYM), \
name_def (NAME_DEFINITION), multi (MULTI_HYPERNYM), multi_diff (MULTI_DIFFERENT_HYPERNYM), \
hyper_bg (HYPERNYM_BACKGROUND)";

#[derive(Parser, Debug)]
#[command(
    name = "clone",
    version,
    about = "Clone an image-classification dataset from class names"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resolve a class list against WordNet metadata.
    Catalog {
        #[arg(long)]
        wordnet_meta: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile a deterministic generation plan.
    Plan {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, help = TEMPLATE_HELP)]
        templates: String,
        #[arg(long, conflicts_with = "counts", required_unless_present = "counts")]
        per_class: Option<usize>,
        /// Lines of `wnid count`.
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        backgrounds: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: u32,
        #[arg(long, default_value_t = 7.5)]
        guidance: f64,
        #[arg(long, default_value_t = 512)]
        width: u32,
        #[arg(long, default_value_t = 384)]
        height: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a plan against a backend into a dataset directory.
    Generate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, value_enum)]
        backend: BackendKind,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long, value_enum, default_value_t = FormatArg::Png)]
        format: FormatArg,
    },
    /// Train an encoder and classifier on a generated dataset.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "1,5")]
        topk: String,
        /// Wnids (or class indices), one per line.
        #[arg(long)]
        class_mask: Option<PathBuf>,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        mask_logits: bool,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract encoder features into a feature-matrix file.
    Features {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear-probe accuracy with tuned regularization.
    Probe {
        #[arg(long)]
        train_feats: PathBuf,
        #[arg(long)]
        test_feats: PathBuf,
        #[arg(long, default_value_t = 25)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Representation statistics of a feature matrix.
    Analyze {
        #[arg(long)]
        feats: PathBuf,
        #[arg(long, default_value = "sparsity,intra,redundancy,coding")]
        metrics: String,
        #[arg(long, default_value_t = analysis::DEFAULT_SPARSITY_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = analysis::DEFAULT_EPS2)]
        eps2: f64,
        /// Report coding length in this base instead of nats.
        #[arg(long)]
        log_base: Option<f64>,
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render JSON reports as a Markdown table or SVG spider chart.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum)]
        style: Style,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Png,
    Jpeg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Style {
    Table,
    Spider,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Catalog { .. } => "catalog",
            Command::Plan { .. } => "plan",
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Features { .. } => "features",
            Command::Probe { .. } => "probe",
            Command::Analyze { .. } => "analyze",
            Command::Report { .. } => "report",
        }
    }

    fn out_path(&self) -> &Path {
        match self {
            Command::Catalog { out, .. }
            | Command::Plan { out, .. }
            | Command::Train { out, .. }
            | Command::Eval { out, .. }
            | Command::Features { out, .. }
            | Command::Probe { out, .. }
            | Command::Analyze { out, .. }
            | Command::Report { out, .. } => out,
            Command::Generate { out_dir, .. } => out_dir,
        }
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        }),
        None => Ok(()),
    }
}

/// `0` means every core.
fn worker_pool(workers: usize) -> Parallelism {
    match workers {
        0 => Parallelism::Auto,
        n => Parallelism::from_workers(n),
    }
}

fn parse_ks(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Contract(format!("invalid k {s:?}")))
        })
        .collect()
}

fn run(cmd: &Command, rm: &mut RunManifest) -> Result<()> {
    match cmd {
        Command::Catalog {
            wordnet_meta,
            classes,
            out,
        } => {
            rm.add_input(wordnet_meta)?;
            rm.add_input(classes)?;
            let source = MetadataSource::load(wordnet_meta)?;
            let text = std::fs::read_to_string(classes).map_err(|e| Error::Io {
                path: classes.clone(),
                source: e,
            })?;
            let name = out.file_stem().unwrap_or_default().to_string_lossy();
            let catalog = ClassCatalog::load(&name, &source, &parse_class_list(&text))?;
            ensure_parent(out)?;
            catalog.save(out)?;
            rm.config = json!({ "classes": catalog.len() });
        }
        Command::Plan {
            catalog,
            templates,
            per_class,
            counts,
            backgrounds,
            seed,
            steps,
            guidance,
            width,
            height,
            out,
        } => {
            rm.add_input(catalog)?;
            let templates = PromptTemplate::parse_list(templates)?;
            let catalog = ClassCatalog::read(catalog)?;
            let counts = match (per_class, counts) {
                (Some(n), _) => prompt::uniform_counts(&catalog, *n),
                (None, Some(path)) => {
                    rm.add_input(path)?;
                    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    prompt::parse_counts(&text)?
                }
                (None, None) => {
                    return Err(Error::Contract(
                        "--per-class or --counts is required".into(),
                    ))
                }
            };
            let backgrounds = match backgrounds {
                Some(path) => {
                    rm.add_input(path)?;
                    Some(BackgroundSet::load(path)?)
                }
                None => None,
            };
            let params = GenParams {
                steps: *steps,
                guidance: *guidance,
                width: *width,
                height: *height,
                ..GenParams::default()
            };
            rm.config = json!({ "templates": templates, "seed": seed, "gen_params": params });
            let plan = prompt::build_plan(
                &catalog,
                &templates,
                &counts,
                backgrounds.as_ref(),
                *seed,
                params,
            )?;
            ensure_parent(out)?;
            plan.save(out)?;
        }
        Command::Generate {
            plan,
            backend,
            workers,
            out_dir,
            resume,
            format,
        } => {
            rm.add_input(plan)?;
            let plan = GenerationPlan::read(plan)?;
            let header = ManifestHeader {
                format_version: store::FORMAT_VERSION,
                plan_seed: plan.plan_seed,
                catalog_name: plan.catalog_name.clone(),
            };
            let store = if *resume {
                DatasetStore::open_or_create(out_dir, header)?
            } else {
                DatasetStore::create(out_dir, header)?
            };
            let backend: Box<dyn generation::Backend> = match backend {
                BackendKind::Mock => Box::new(MockBackend),
                BackendKind::Http => Box::new(HttpBackend::new(HttpBackendConfig::from_env()?)),
            };
            let opts = RunOptions {
                workers: *workers,
                resume: *resume,
                format: match format {
                    FormatArg::Png => ImageFileFormat::Png,
                    FormatArg::Jpeg => ImageFileFormat::Jpeg,
                },
                ..RunOptions::default()
            };
            let run = generation::run_plan(&plan, backend.as_ref(), &store, &opts)?;
            rm.config = json!({ "backend": backend.id(), "workers": workers, "resume": resume, "report": run });
            log::info!(
                "completed {} failed {} skipped {}",
                run.completed,
                run.failed,
                run.skipped
            );
            if run.failed > 0 {
                eprintln!(
                    "warning: {} records failed; rerun with --resume to retry",
                    run.failed
                );
            }
        }
        Command::Train {
            manifest,
            config,
            out,
        } => {
            rm.add_input(manifest)?;
            rm.add_input(config)?;
            let cfg = TrainConfig::load(config)?;
            rm.config = serde_json::to_value(&cfg)?;
            let view = DatasetView::from_manifest(manifest)?;
            let ckpt = trainer::train(&view, &cfg)?;
            ckpt.save(out)?;
        }
        Command::Eval {
            checkpoint,
            dataset,
            topk,
            class_mask,
            mask_logits,
            workers,
            out,
        } => {
            rm.add_input(checkpoint)?;
            rm.add_input(dataset)?;
            let ks = parse_ks(topk)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let view = DatasetView::open(dataset, &ckpt.classes)?;
            let mask = match class_mask {
                Some(path) => {
                    rm.add_input(path)?;
                    Some(ClassMask::load(path, &ckpt.classes)?)
                }
                None => None,
            };
            rm.config = json!({ "topk": ks, "mask_logits": mask_logits });
            let report = evaluator::evaluate_topk(
                &ckpt,
                &view,
                &ks,
                mask.as_ref(),
                *mask_logits,
                worker_pool(*workers),
            )?;
            write_json(out, &serde_json::to_value(&report)?)?;
        }
        Command::Features {
            checkpoint,
            dataset,
            workers,
            out,
        } => {
            rm.add_input(checkpoint)?;
            rm.add_input(dataset)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let view = DatasetView::open(dataset, &ckpt.classes)?;
            let feats = evaluator::extract_features(
                &ckpt.model,
                &ckpt.config.normalization,
                &view,
                ckpt.config.multicrop.global_size,
                worker_pool(*workers),
            )?;
            ensure_parent(out)?;
            feats.save(out)?;
            rm.config = json!({ "n": feats.n, "d": feats.d, "skipped": feats.meta.skipped.len() });
        }
        Command::Probe {
            train_feats,
            test_feats,
            trials,
            seed,
            out,
        } => {
            rm.add_input(train_feats)?;
            rm.add_input(test_feats)?;
            let train = FeatureMatrix::load(train_feats)?;
            let test = FeatureMatrix::load(test_feats)?;
            let cfg = TunerConfig {
                n_trials: *trials,
                seed: *seed,
                ..TunerConfig::default()
            };
            rm.config = serde_json::to_value(&cfg)?;
            let report = evaluator::linear_probe(&train, &test, &cfg)?;
            write_json(out, &serde_json::to_value(&report)?)?;
        }
        Command::Analyze {
            feats,
            metrics,
            threshold,
            eps2,
            log_base,
            group,
            out,
        } => {
            rm.add_input(feats)?;
            let metrics = Metric::parse_list(metrics)?;
            let params = MetricParams {
                threshold: *threshold,
                eps2: *eps2,
                log_base: *log_base,
            };
            rm.config = serde_json::to_value(&params)?;
            let x = FeatureMatrix::load(feats)?;
            let report = analysis::analyze(&x, &metrics, &params, group.clone())?;
            write_json(out, &serde_json::to_value(&report)?)?;
        }
        Command::Report { inputs, style, out } => {
            let mut reports = Vec::with_capacity(inputs.len());
            for path in inputs {
                rm.add_input(path)?;
                reports.push(NamedReport::load(path)?);
            }
            let text = match style {
                Style::Table => report::render_table(&reports),
                Style::Spider => report::render_spider(&reports)?,
            };
            ensure_parent(out)?;
            std::fs::write(out, text).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
        }
    }
    rm.add_output(cmd.out_path());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    let mut rm = RunManifest::start(cli.command.name(), args[1..].to_vec());
    let outcome = run(&cli.command, &mut rm);
    rm.finish(&outcome);
    let manifest_path = report::run_manifest_path(cli.command.out_path());
    if let Err(e) = rm.save(&manifest_path) {
        log::warn!(
            "could not write run manifest {}: {e}",
            manifest_path.display()
        );
    }
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
