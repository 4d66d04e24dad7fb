//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 a
//! layer-2 prompt entry was missing and `--strict` was given.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::classifier::{Aggregation, ClassifierConfig, DEFAULT_DELTA, DEFAULT_TOP_K};
use crate::embedding_io::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::report::{emit_report, Emittable, ReportFormat};
use crate::eval::synthetic::{generate_synthetic, AmbiguousMode, SyntheticSpec};
use crate::eval::{ablation_grid, classify_all, evaluate, missing_prompt_keys, sweep, SweepParameter};
use crate::prompt_bank::PromptBank;
use crate::scoring::DEFAULT_TEMPERATURE;
use crate::view_selection::{SelectionConfig, SelectionMode, DEFAULT_SELECTED_VIEWS, DEFAULT_TOTAL_VIEWS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_MISSING_PROMPTS: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mvzero", version, about = "Zero-shot multi-view 3D shape recognition over precomputed embeddings")]
struct Cli {
    /// Worker threads for shape-level parallelism (default: available parallelism).
    /// Results are identical for every thread count.
    #[arg(long, global = true, env = "MVZERO_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Inputs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Prompt bank (JSON).
    #[arg(long)]
    bank: PathBuf,
}

#[derive(Debug, Args)]
struct Pipeline {
    /// Confidence threshold: shapes whose top layer-1 probability is below it
    /// are refined with layer-2 prompts. Default is the published reference setting.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Number of layer-1 candidates passed to layer 2. Default is the
    /// best-performing published setting.
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    /// Number of lowest-entropy views kept per shape. Default is the
    /// published reference setting.
    #[arg(long, default_value_t = DEFAULT_SELECTED_VIEWS)]
    m_select: usize,
    /// Nominal number of views per shape. Default is the published
    /// reference setting; shapes with fewer views clamp m-select with a warning.
    #[arg(long = "views", default_value_t = DEFAULT_TOTAL_VIEWS)]
    m_total: usize,
    /// Logit scale applied to cosine similarities. Not published; the default
    /// is the conventional scale of contrastive image-text encoders.
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// View selection rule.
    #[arg(long, value_enum, default_value_t = SelectionMode::EntropyMin)]
    selection: SelectionMode,
    /// How selected views are combined at layer 1.
    #[arg(long, value_enum, default_value_t = Aggregation::SumLogits)]
    aggregation: Aggregation,
    /// Disable layer-2 refinement entirely.
    #[arg(long)]
    no_hierarchical: bool,
    /// Exit with code 3 if any shape needed a layer-2 entry the bank lacks.
    #[arg(long)]
    strict: bool,
}

impl Pipeline {
    fn config(&self) -> ClassifierConfig {
        ClassifierConfig {
            delta: self.delta,
            top_k: self.top_k,
            temperature: self.temperature,
            selection: SelectionConfig {
                m_total: self.m_total,
                m_select: self.m_select,
                mode: self.selection,
            },
            hierarchical_enabled: !self.no_hierarchical,
            aggregation: self.aggregation,
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Shapes per class.
    #[arg(long)]
    shapes: Option<usize>,
    /// Views per shape.
    #[arg(long)]
    views: Option<usize>,
    /// Clean views per shape; the rest are ambiguous.
    #[arg(long)]
    clean: Option<usize>,
    /// Per-dimension Gaussian noise added to every view.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<AmbiguousMode>,
    /// Sibling-class weight in layer-1 prompts, in [0, 1).
    #[arg(long)]
    confusion: Option<f64>,
    /// Sibling-direction spread of clean views, relative to --sigma.
    #[arg(long)]
    nuisance: Option<f64>,
    /// Upper bound of the distractor pull of ambiguous views.
    #[arg(long)]
    leak: Option<f64>,
    /// Candidate-set sizes to generate layer-2 entries for.
    #[arg(long, value_delimiter = ',')]
    layer2_sizes: Option<Vec<usize>>,
    /// Layer-2 prompt blurring per candidate beyond two.
    #[arg(long)]
    dilution: Option<f64>,
}

impl SynthArgs {
    fn resolve(self) -> SyntheticSpec {
        let r = SyntheticSpec::reference();
        SyntheticSpec {
            classes: self.classes.unwrap_or(r.classes),
            dim: self.dim.unwrap_or(r.dim),
            shapes_per_class: self.shapes.unwrap_or(r.shapes_per_class),
            views: self.views.unwrap_or(r.views),
            clean_views: self.clean.unwrap_or(r.clean_views),
            noise_sigma: self.sigma.unwrap_or(r.noise_sigma),
            ambiguous_mode: self.mode.unwrap_or(r.ambiguous_mode),
            seed: self.seed.unwrap_or(r.seed),
            prompt_confusion: self.confusion.unwrap_or(r.prompt_confusion),
            nuisance_gain: self.nuisance.unwrap_or(r.nuisance_gain),
            distractor_leak: self.leak.unwrap_or(r.distractor_leak),
            layer2_set_sizes: self.layer2_sizes.unwrap_or(r.layer2_set_sizes),
            layer2_dilution: self.dilution.unwrap_or(r.layer2_dilution),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify every shape and write one JSON prediction record per line.
    Classify {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        pipeline: Pipeline,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate accuracy against the manifest labels.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        pipeline: Pipeline,
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Toggle view selection and hierarchical prompts on and off (4 runs).
    Ablate {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        pipeline: Pipeline,
        #[arg(long, value_enum, default_value_t = ReportFormat::Md)]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate once per value of one parameter.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        pipeline: Pipeline,
        #[arg(long, value_enum)]
        param: SweepParameter,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a seeded synthetic dataset and prompt bank. Unset options
    /// take the reference fixture's values.
    Synth {
        #[command(flatten)]
        spec: SynthArgs,
        /// Skip layer-2 entries entirely.
        #[arg(long)]
        no_layer2: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check a manifest (with its embeddings) or a prompt bank.
    #[command(group(clap::ArgGroup::new("target").required(true).args(["manifest", "bank"])))]
    Validate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// List candidate keys the dataset needs at layer 2 that the bank lacks.
    PromptsMissing {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        pipeline: Pipeline,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Outcome {
    Done,
    MissingPrompts,
    Invalid,
}

fn write_output(out: Option<&Path>, payload: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, payload).map_err(|e| Error::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(payload.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn load(inputs: &Inputs) -> Result<(Dataset, PromptBank)> {
    Ok((load_dataset(&inputs.manifest)?, PromptBank::load(&inputs.bank)?))
}

fn strict_outcome(strict: bool, deferred: usize) -> Outcome {
    if deferred > 0 {
        eprintln!("{deferred} shape(s) need layer-2 prompts missing from the bank");
        if strict {
            return Outcome::MissingPrompts;
        }
    }
    Outcome::Done
}

fn execute(command: Command) -> Result<Outcome> {
    match command {
        Command::Classify { inputs, pipeline, out } => {
            let (dataset, bank) = load(&inputs)?;
            let records = classify_all(&dataset, &bank, &pipeline.config())?;
            let mut payload = String::new();
            for r in &records {
                payload.push_str(&serde_json::to_string(r)?);
                payload.push('\n');
            }
            write_output(out.as_deref(), &payload)?;
            let deferred = records.iter().filter(|r| r.deferred_refinement).count();
            Ok(strict_outcome(pipeline.strict, deferred))
        }
        Command::Eval {
            inputs,
            pipeline,
            format,
            out,
        } => {
            let (dataset, bank) = load(&inputs)?;
            let report = evaluate(&dataset, &bank, &pipeline.config())?;
            write_output(out.as_deref(), &emit_report(Emittable::Report(&report), format)?)?;
            eprintln!(
                "accuracy {:.4} ({}/{}) in {} ms",
                report.overall_accuracy, report.correct, report.total, report.runtime_ms
            );
            Ok(strict_outcome(pipeline.strict, report.deferred_count))
        }
        Command::Ablate {
            inputs,
            pipeline,
            format,
            out,
        } => {
            let (dataset, bank) = load(&inputs)?;
            let grid = ablation_grid(&dataset, &bank, &pipeline.config())?;
            write_output(out.as_deref(), &emit_report(Emittable::Grid(&grid), format)?)?;
            let deferred = grid.rows.iter().map(|r| r.report.deferred_count).sum();
            Ok(strict_outcome(pipeline.strict, deferred))
        }
        Command::Sweep {
            inputs,
            pipeline,
            param,
            values,
            format,
            out,
        } => {
            let (dataset, bank) = load(&inputs)?;
            let curve = sweep(&dataset, &bank, &pipeline.config(), param, &values)?;
            write_output(out.as_deref(), &emit_report(Emittable::Curve(&curve), format)?)?;
            let deferred = curve.reports.iter().map(|r| r.deferred_count).sum();
            Ok(strict_outcome(pipeline.strict, deferred))
        }
        Command::Synth {
            spec,
            no_layer2,
            out_dir,
        } => {
            let mut spec = spec.resolve();
            if no_layer2 {
                spec.layer2_set_sizes.clear();
            }
            let fixture = generate_synthetic(&spec)?;
            fixture.save(&out_dir)?;
            eprintln!(
                "wrote {} shapes, {} layer-2 entries to {}",
                fixture.dataset.shapes().len(),
                fixture.bank.layer2.len(),
                out_dir.display()
            );
            Ok(Outcome::Done)
        }
        Command::Validate { manifest, bank } => {
            if let Some(path) = manifest {
                let dataset = load_dataset(&path)?;
                println!(
                    "ok: {} shapes, {} classes, {} view rows",
                    dataset.shapes().len(),
                    dataset.classes().len(),
                    dataset.views.rows()
                );
            }
            if let Some(path) = bank {
                let findings = PromptBank::load_raw(&path)?.validate();
                if !findings.is_empty() {
                    for f in &findings {
                        println!("{} {}", f.code, f.location);
                    }
                    return Ok(Outcome::Invalid);
                }
                println!("ok: no findings");
            }
            Ok(Outcome::Done)
        }
        Command::PromptsMissing { inputs, pipeline, out } => {
            let (dataset, bank) = load(&inputs)?;
            let keys = missing_prompt_keys(&dataset, &bank, &pipeline.config())?;
            let mut payload = keys.join("\n");
            if !payload.is_empty() {
                payload.push('\n');
            }
            write_output(out.as_deref(), &payload)?;
            Ok(Outcome::Done)
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::MissingPrompts) => EXIT_MISSING_PROMPTS,
        Ok(Outcome::Invalid) => EXIT_DATA,
        Err(e @ (Error::InvalidConfig(_) | Error::InvalidSweepValue { .. } | Error::NonPositiveTemperature(_))) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}
