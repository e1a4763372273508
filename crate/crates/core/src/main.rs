use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use mfsurvey::analysis::{
    aggregate_variance, catch_validity, cross_matrix, load_references, Aggregation, AnalysisError,
    AnalysisOptions, CatchPolicy, CatchVerdict, Estimator, Grouping, Inclusion,
};
use mfsurvey::questionnaire::{load_questionnaire, Questionnaire};
use mfsurvey::report::{emit_report, QuestionColumns, ReportData, ReportError, ReportFormat, ReportKind, ReportSpec};
use mfsurvey::runner::{
    load_populations, run_experiment_with, store_status, Cell, ExperimentConfig, LoadedStore, RunError,
    RunOptions,
};
use mfsurvey::statements::{build_statement_persona, consistency_check, lint_catalog, Profile, StatementError, DEFAULT_TOLERANCE};

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NETWORK: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "mfsurvey", version, about = "Moral Foundations Questionnaire surveys of language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run, resume or inspect a survey experiment.
    #[command(subcommand)]
    Survey(SurveyCmd),
    /// Compute statistics over a record store.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Value-statement catalogs.
    #[command(subcommand)]
    Catalog(CatalogCmd),
    /// Value-statement personas.
    #[command(subcommand)]
    Persona(PersonaCmd),
    /// Render tables.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand)]
enum SurveyCmd {
    /// Start (or continue) the experiment described by a config file.
    Run(RunArgs),
    /// Continue an interrupted experiment; the store must already exist.
    Resume(RunArgs),
    /// Per-cell progress of the experiment's store.
    Status {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Stop after this many new samples.
    #[arg(long)]
    max_samples: Option<u32>,
}

#[derive(Args, Clone)]
struct FilterArgs {
    /// Catch policy: `default`, `none`, or `relevance_max=N,agreement_min=M`.
    #[arg(long, default_value = "default")]
    policy: String,
    /// Keep samples with missing answers.
    #[arg(long)]
    include_partial: bool,
    /// `population` or `sample`.
    #[arg(long, default_value = "population")]
    estimator: String,
    /// Foundation score aggregation: `mean` or `sum`.
    #[arg(long, default_value = "mean")]
    aggregation: String,
}

impl FilterArgs {
    fn options(&self) -> Result<AnalysisOptions, CliError> {
        let catch_policy = match self.policy.as_str() {
            "none" | "off" => None,
            p => Some(p.parse::<CatchPolicy>().map_err(CliError::validation)?),
        };
        Ok(AnalysisOptions {
            inclusion: Inclusion {
                include_partial: self.include_partial,
                catch_policy,
            },
            estimator: self.estimator.parse::<Estimator>().map_err(CliError::usage)?,
            aggregation: self.aggregation.parse::<Aggregation>().map_err(CliError::usage)?,
        })
    }
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Mean per-question variance per group.
    Variance {
        #[arg(long)]
        store: PathBuf,
        /// model, persona, model-persona, foundation-persona, question-model, question-persona
        #[arg(long, default_value = "model-persona")]
        by: String,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Distance of each cell's foundation scores to human reference groups.
    Cross {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Attention-check verdict per complete sample.
    Catch {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "default")]
        policy: String,
    },
}

#[derive(Subcommand)]
enum CatalogCmd {
    /// Check a value-statement catalog against the questionnaire.
    Lint {
        path: PathBuf,
        /// Questionnaire file (bundled instrument when omitted).
        #[arg(long)]
        questionnaire: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PersonaCmd {
    /// Print the system text for a profile.
    Build {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        profile: PathBuf,
    },
    /// Compare a persona's instructed levels with a cell's answers.
    Check(CheckArgs),
}

#[derive(Args, Clone)]
struct CheckArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    endpoint: String,
    #[arg(long)]
    persona: String,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Subcommand)]
enum ReportCmd {
    Emit(EmitArgs),
}

#[derive(Args)]
struct EmitArgs {
    /// variance-model-persona, variance-persona-dimension, variance-question, cross, consistency
    #[arg(long)]
    kind: String,
    #[arg(long, default_value = "markdown")]
    format: String,
    #[arg(long)]
    store: PathBuf,
    /// Needed for `cross`.
    #[arg(long)]
    references: Option<PathBuf>,
    /// Per-question columns: `model` or `persona`.
    #[arg(long, default_value = "model")]
    columns: String,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = mfsurvey::report::DEFAULT_PRECISION)]
    precision: usize,
    #[command(flatten)]
    filter: FilterArgs,
    /// Needed for `consistency`.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    persona: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl fmt::Display) -> Self {
        CliError {
            code,
            message: message.to_string(),
        }
    }
    fn usage(m: impl fmt::Display) -> Self {
        Self::new(EXIT_USAGE, m)
    }
    fn validation(m: impl fmt::Display) -> Self {
        Self::new(EXIT_VALIDATION, m)
    }
    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::Config(_) => EXIT_USAGE,
            RunError::Questionnaire(_) | RunError::Store(_) => EXIT_VALIDATION,
            RunError::Io { .. } => EXIT_IO,
            RunError::Client(_) => EXIT_NETWORK,
        };
        CliError::new(code, e)
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        CliError::validation(e)
    }
}

impl From<StatementError> for CliError {
    fn from(e: StatementError) -> Self {
        CliError::validation(e)
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { .. } => CliError::new(EXIT_IO, e),
            _ => CliError::validation(e),
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_store(path: &Path) -> Result<LoadedStore, CliError> {
    let store = load_populations(path)?;
    if store.header.is_none() {
        return Err(CliError::validation(format!("{}: no store header", path.display())));
    }
    Ok(store)
}

async fn survey(cmd: SurveyCmd) -> Result<(), CliError> {
    match cmd {
        SurveyCmd::Run(args) => run(args, false).await,
        SurveyCmd::Resume(args) => run(args, true).await,
        SurveyCmd::Status { config } => {
            let config = ExperimentConfig::load(&config)?;
            if !config.output_path.exists() {
                println!("no store at {}", config.output_path.display());
                return Ok(());
            }
            let status = store_status(&config.output_path)?;
            println!("{:<24} {:<16} {:>8} {:>8} {:>8}", "endpoint", "persona", "complete", "partial", "target");
            for spec in &config.endpoints {
                for p in &config.personas {
                    let s = status
                        .get(&Cell::new(spec.endpoint.name.clone(), p.id.clone()))
                        .cloned()
                        .unwrap_or_default();
                    println!(
                        "{:<24} {:<16} {:>8} {:>8} {:>8}",
                        spec.endpoint.name, p.id, s.complete, s.partial, config.samples_per_cell
                    );
                }
            }
            Ok(())
        }
    }
}

async fn run(args: RunArgs, resume: bool) -> Result<(), CliError> {
    let config = ExperimentConfig::load(&args.config)?;
    if resume && !config.output_path.exists() {
        return Err(CliError::new(
            EXIT_IO,
            format!("{}: nothing to resume", config.output_path.display()),
        ));
    }
    let summary = run_experiment_with(
        &config,
        RunOptions {
            max_new_samples: args.max_samples,
        },
    )
    .await?;
    for (cell, s) in &summary.cells {
        println!(
            "{cell}: {} new complete, {} new partial, {} already recorded",
            s.complete, s.partial, s.resumed
        );
    }
    println!(
        "{} new samples, {} answer records; {} surveys recorded{}",
        summary.new_samples,
        summary.new_answer_records,
        summary.total_surveys,
        if summary.interrupted { " (stopped early)" } else { "" }
    );
    if summary.new_answer_records > 0 && summary.failed_answer_records == summary.new_answer_records {
        return Err(CliError::new(
            EXIT_NETWORK,
            "no request got a reply; check the endpoint address and credentials",
        ));
    }
    Ok(())
}

fn analyze(cmd: AnalyzeCmd) -> Result<(), CliError> {
    match cmd {
        AnalyzeCmd::Variance { store, by, filter } => {
            let grouping: Grouping = by.parse().map_err(CliError::usage)?;
            let opts = filter.options()?;
            let store = load_store(&store)?;
            let table = aggregate_variance(&store.populations, &store.questionnaire, grouping, &opts)?;
            for (k, v) in &table.scored {
                println!("{k}\t{v:.6}");
            }
            for (k, v) in &table.catch {
                println!("{k}\t{v:.6}\t(catch)");
            }
            Ok(())
        }
        AnalyzeCmd::Cross {
            store,
            references,
            filter,
        } => {
            let opts = filter.options()?;
            let refs = load_references(&read(&references)?, opts.aggregation)?;
            let store = load_store(&store)?;
            let m = cross_matrix(&store.populations, &refs, &store.questionnaire, &opts)?;
            let text = emit_report(
                &ReportSpec::new(ReportKind::CrossEvaluation, ReportFormat::Markdown),
                &ReportData::Cross(m),
            )?;
            print!("{text}");
            Ok(())
        }
        AnalyzeCmd::Catch { store, policy } => {
            let policy: CatchPolicy = policy.parse().map_err(CliError::validation)?;
            let store = load_store(&store)?;
            let (mut valid, mut flagged) = (0usize, 0usize);
            for pop in &store.populations {
                for s in pop.complete_samples() {
                    match catch_validity(s, &store.questionnaire, &policy)? {
                        CatchVerdict::Valid => valid += 1,
                        CatchVerdict::Flagged(reasons) => {
                            flagged += 1;
                            println!("{} sample {}: {}", pop.cell, s.sample_index, reasons.join("; "));
                        }
                    }
                }
            }
            println!("{valid} valid, {flagged} flagged");
            Ok(())
        }
    }
}

fn questionnaire_at(path: Option<&Path>) -> Result<Questionnaire, CliError> {
    match path {
        None => Ok(Questionnaire::bundled()),
        Some(p) => load_questionnaire(&read(p)?).map_err(CliError::validation),
    }
}

fn catalog(cmd: CatalogCmd) -> Result<(), CliError> {
    match cmd {
        CatalogCmd::Lint { path, questionnaire } => {
            let q = questionnaire_at(questionnaire.as_deref())?;
            let catalog = lint_catalog(&read(&path)?, &q)?;
            println!("{}: {} statements, no issues", path.display(), catalog.statements().len());
            Ok(())
        }
    }
}

fn consistency_data(args: &CheckArgs) -> Result<ReportData, CliError> {
    let store = load_store(&args.store)?;
    let catalog = lint_catalog(&read(&args.catalog)?, &store.questionnaire)?;
    let persona = build_statement_persona(&catalog, &Profile::from_toml(&read(&args.profile)?)?)?;
    let cell = Cell::new(args.endpoint.clone(), args.persona.clone());
    let pop = store
        .populations
        .iter()
        .find(|p| p.cell == cell)
        .ok_or_else(|| CliError::validation(format!("store has no samples for {cell}")))?;
    Ok(ReportData::Consistency(consistency_check(&persona, pop, args.tolerance)?))
}

fn persona(cmd: PersonaCmd) -> Result<(), CliError> {
    match cmd {
        PersonaCmd::Build { catalog, profile } => {
            let catalog = lint_catalog(&read(&catalog)?, &Questionnaire::bundled())?;
            let p = build_statement_persona(&catalog, &Profile::from_toml(&read(&profile)?)?)?;
            println!("{}", p.system_text);
            Ok(())
        }
        PersonaCmd::Check(args) => {
            let data = consistency_data(&args)?;
            let text = emit_report(&ReportSpec::new(ReportKind::ConsistencyReport, ReportFormat::Markdown), &data)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn report(cmd: ReportCmd) -> Result<(), CliError> {
    let ReportCmd::Emit(args) = cmd;
    let kind: ReportKind = args.kind.parse().map_err(CliError::usage)?;
    let format: ReportFormat = args.format.parse().map_err(CliError::usage)?;
    let opts = args.filter.options()?;
    let data = match kind {
        ReportKind::ConsistencyReport => {
            let need = |o: &Option<_>, name: &str| {
                o.clone()
                    .ok_or_else(|| CliError::usage(format!("--{name} is required for a consistency report")))
            };
            consistency_data(&CheckArgs {
                catalog: need(&args.catalog, "catalog")?,
                profile: need(&args.profile, "profile")?,
                store: args.store.clone(),
                endpoint: args.endpoint.clone().ok_or_else(|| CliError::usage("--endpoint is required for a consistency report"))?,
                persona: args.persona.clone().ok_or_else(|| CliError::usage("--persona is required for a consistency report"))?,
                tolerance: args.tolerance,
            })?
        }
        _ => {
            let store = load_store(&args.store)?;
            let (pops, q) = (&store.populations, &store.questionnaire);
            match kind {
                ReportKind::VarianceByModelPersona => ReportData::model_persona(pops, q, &opts)?,
                ReportKind::VarianceByPersonaDimension => ReportData::persona_dimension(pops, q, &opts)?,
                ReportKind::VariancePerQuestion => {
                    let columns = match args.columns.as_str() {
                        "model" => QuestionColumns::Model,
                        "persona" => QuestionColumns::Persona,
                        c => return Err(CliError::usage(format!("unknown --columns `{c}` (model|persona)"))),
                    };
                    ReportData::per_question(pops, q, &opts, columns)?
                }
                ReportKind::CrossEvaluation => {
                    let path = args
                        .references
                        .as_ref()
                        .ok_or_else(|| CliError::usage("--references is required for a cross report"))?;
                    let refs = load_references(&read(path)?, opts.aggregation)?;
                    ReportData::Cross(cross_matrix(pops, &refs, q, &opts)?)
                }
                ReportKind::ConsistencyReport => unreachable!(),
            }
        }
    };
    let spec = ReportSpec {
        kind,
        format,
        output_path: args.output.clone(),
        precision: args.precision,
    };
    let text = emit_report(&spec, &data)?;
    if args.output.is_none() {
        print!("{text}");
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Survey(cmd) => match tokio::runtime::Runtime::new() {
            Ok(rt) => rt.block_on(survey(cmd)),
            Err(e) => Err(CliError::new(EXIT_OTHER, e)),
        },
        Command::Analyze(cmd) => analyze(cmd),
        Command::Catalog(cmd) => catalog(cmd),
        Command::Persona(cmd) => persona(cmd),
        Command::Report(cmd) => report(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
