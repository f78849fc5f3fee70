use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dialogue_workbench::align::{align_dataset, AlignmentSources, AttentionEntry, CandidateTable};
use dialogue_workbench::check::{
    apply_fixes, apply_mapping_additions, build_value_mapping, check_dataset, AlignmentRecord, Fix,
};
use dialogue_workbench::eval::{evaluate_end_to_end, evaluate_turn_by_turn, EvalOptions};
use dialogue_workbench::format::Style;
use dialogue_workbench::kb::{load_database, load_ontology, Database, Ontology};
use dialogue_workbench::metrics::{BleuConfig, Tokenization};
use dialogue_workbench::model::{load_dataset, save_dataset, validate_dataset, write_atomic, Dataset};
use dialogue_workbench::norm::{NormConfig, Normalizer};
use dialogue_workbench::synth::{synthesize_dataset, to_jsonl, ErrorStats, SynthConfig, SynthTask};
use dialogue_workbench::value_map::{load_value_mapping, save_value_mapping, ValueMapping};
use dialogue_workbench::Execution;

use crate::service::{self, AppState, Config};
use crate::store::Paths;

#[derive(Debug, Parser)]
#[command(
    name = "workbench",
    version,
    about = "Multilingual task-oriented dialogue dataset workbench"
)]
pub struct Cli {
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Match entities without word boundaries (for unspaced scripts).
    #[arg(long, global = true)]
    pub unspaced: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset file against the schema.
    Validate { dataset: PathBuf },
    /// Align annotation values into translated utterances.
    Align(AlignArgs),
    /// Run entity and API checks, optionally applying auto-fixes.
    Check(CheckArgs),
    /// Score a predictor under the turn-by-turn or end-to-end protocol.
    Evaluate(EvaluateArgs),
    /// Generate labeled positives and perturbed negatives.
    Synth(SynthArgs),
    /// Start the post-editing HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    pub dataset: PathBuf,
    /// JSON map from source value to candidate translations.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// JSON list of per-turn attention entries.
    #[arg(long)]
    pub attention: Option<PathBuf>,
    /// Write the value mapping built from the alignments here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub value_map: Option<PathBuf>,
    /// Apply auto-fixes and write the dataset (and value mapping) back.
    #[arg(long)]
    pub fix: bool,
    /// Where fixed data goes; defaults to rewriting the input in place.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Turn,
    E2e,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// `echo`, `script:FILE` or `http:URL`.
    #[arg(long)]
    pub predictor: String,
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub value_map: Option<PathBuf>,
    /// Print every relation in rendered annotations.
    #[arg(long)]
    pub explicit_relations: bool,
    /// Add-one smoothing for BLEU.
    #[arg(long)]
    pub smoothing: bool,
    /// Character-level BLEU tokens.
    #[arg(long)]
    pub chars: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Dst,
    Da,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Error statistics; without them every error type is equally likely.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub negatives: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    /// Derive the ontology from a database when no ontology is given.
    #[arg(long)]
    pub db: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// Directory holding candidates.json and attention.json.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long)]
    pub value_map: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_db(path: Option<&Path>) -> anyhow::Result<Option<Database>> {
    path.map(|p| load_database(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn load_vm(path: Option<&Path>) -> anyhow::Result<ValueMapping> {
    match path {
        Some(p) if p.exists() => load_value_mapping(p).with_context(|| format!("loading {}", p.display())),
        _ => Ok(ValueMapping::default()),
    }
}

fn load_sources(candidates: Option<&Path>, attention: Option<&Path>) -> anyhow::Result<AlignmentSources> {
    let c: CandidateTable = candidates.map(read_json).transpose()?.unwrap_or_default();
    let a: Vec<AttentionEntry> = attention.map(read_json).transpose()?.unwrap_or_default();
    Ok(AlignmentSources::new(c, a))
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let exec = if cli.sequential {
        Execution::Serial
    } else {
        Execution::default()
    };
    let norm = if cli.unspaced {
        NormConfig::unspaced()
    } else {
        NormConfig::default()
    };
    let load = |p: &Path| load_dataset(p).with_context(|| format!("loading {}", p.display()));
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Validate { dataset } => {
            let text = fs::read_to_string(&dataset).with_context(|| format!("reading {}", dataset.display()))?;
            let dialogues = match serde_json::from_str(&text) {
                Ok(d) => d,
                Err(e) => {
                    writeln!(out, "SCHEMA line {}: {e}", e.line())?;
                    return Ok(ExitCode::FAILURE);
                }
            };
            let violations = validate_dataset(&Dataset::new(dialogues));
            for v in &violations {
                writeln!(out, "{v}")?;
            }
            if violations.is_empty() {
                writeln!(out, "ok")?;
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Align(a) => {
            let ds = load(&a.dataset)?;
            let sources = load_sources(a.candidates.as_deref(), a.attention.as_deref())?;
            let outcomes = align_dataset(&ds, &sources, &norm, exec);
            let mut records = Vec::new();
            let mut failed = 0;
            for o in &outcomes {
                writeln!(out, "{}", serde_json::to_string(o)?)?;
                match &o.aligned {
                    Some(entity) => records.push(AlignmentRecord {
                        dialogue_id: o.dialogue_id.clone(),
                        turn_id: o.turn_id,
                        side: o.side,
                        domain: o.domain.clone(),
                        slot: o.slot.clone(),
                        entity: entity.clone(),
                    }),
                    None => failed += 1,
                }
            }
            log::info!("{} aligned, {failed} failed", records.len());
            if let Some(path) = &a.out {
                let vm = build_value_mapping(&ds, &ds, &records)?;
                save_value_mapping(&vm, path)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check(c) => {
            let ds = load(&c.dataset)?;
            let db = load_db(c.db.as_deref())?;
            let mut vm = load_vm(c.value_map.as_deref())?;
            let mut findings = check_dataset(&ds, db.as_ref(), &vm, &norm, exec)?;
            if c.fix {
                let fixes: Vec<Fix> = findings.iter().filter_map(|f| f.suggested_fix.clone()).collect();
                if !fixes.is_empty() {
                    let fixed = apply_fixes(&ds, &fixes)?;
                    apply_mapping_additions(&mut vm, &fixes);
                    let target = c.out.as_ref().unwrap_or(&c.dataset);
                    save_dataset(&fixed, target)?;
                    if let Some(p) = &c.value_map {
                        save_value_mapping(&vm, p)?;
                    }
                    log::info!("applied {} fixes to {}", fixes.len(), target.display());
                    findings = check_dataset(&fixed, db.as_ref(), &vm, &norm, exec)?;
                }
            }
            for f in &findings {
                writeln!(out, "{}", serde_json::to_string(f)?)?;
            }
            Ok(if findings.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Evaluate(e) => {
            let ds = load(&e.dataset)?;
            let vm = load_vm(e.value_map.as_deref())?;
            let normalizer = Normalizer::from_value_mapping(&vm);
            let opts = EvalOptions {
                style: if e.explicit_relations {
                    Style::ExplicitRelation
                } else {
                    Style::ImplicitRelation
                },
                bleu: BleuConfig {
                    tokenization: if e.chars {
                        Tokenization::Chars
                    } else {
                        Tokenization::Words
                    },
                    smoothing: e.smoothing,
                },
                exec,
            };
            let predictor = crate::predictors::from_spec(&e.predictor, &ds, opts.style)?;
            let report = match e.mode {
                Mode::Turn => evaluate_turn_by_turn(&ds, predictor.as_ref(), &normalizer, &opts),
                Mode::E2e => {
                    let Some(db) = load_db(e.db.as_deref())? else {
                        bail!("end-to-end evaluation needs --db");
                    };
                    evaluate_end_to_end(&ds, predictor.as_ref(), &db, &normalizer, &opts)
                }
            };
            write!(out, "{}", report.summary_table())?;
            if let Some(path) = &e.report {
                write_atomic(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth(s) => {
            let ds = load(&s.dataset)?;
            let ontology = match (&s.ontology, &s.db) {
                (Some(p), _) => load_ontology(p)?,
                (None, Some(p)) => Ontology::from_database(&load_database(p)?),
                (None, None) => bail!("synth needs --ontology or --db for replacement values"),
            };
            let stats: ErrorStats = s.stats.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let task = match s.task {
                TaskArg::Dst => SynthTask::Dst,
                TaskArg::Da => SynthTask::Da,
            };
            let mut cfg = SynthConfig::new(task, s.negatives, s.seed);
            cfg.exec = exec;
            let examples = synthesize_dataset(&ds, &stats, &ontology, &cfg)?;
            let counts = examples.iter().fold(BTreeMap::new(), |mut m, x| {
                *m.entry(x.label).or_insert(0usize) += 1;
                m
            });
            writeln!(
                out,
                "{} positives, {} negatives",
                counts.get(&0).copied().unwrap_or(0),
                counts.get(&1).copied().unwrap_or(0)
            )?;
            let jsonl = to_jsonl(&examples);
            write_atomic(&s.out, jsonl.trim_end().as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve(s) => {
            let (candidates, attention) = match &s.sidecar {
                Some(dir) => {
                    let c = dir.join("candidates.json");
                    let a = dir.join("attention.json");
                    (c.exists().then_some(c), a.exists().then_some(a))
                }
                None => (None, None),
            };
            let cfg = Config {
                paths: Paths::for_dataset(&s.dataset, s.value_map.clone()),
                db: load_db(s.db.as_deref())?,
                sources: load_sources(candidates.as_deref(), attention.as_deref())?,
                norm,
                exec,
            };
            let state = AppState::open(cfg)?;
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(service::serve(state, SocketAddr::new(s.host, s.port)))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
