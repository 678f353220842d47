//! `apo`: generate preference data, run the alignment stages, evaluate
//! checkpoints and plot metrics.

mod svg;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apo_core::config::RunConfig;
use apo_core::diffusion::{DiffusionError, EpsModel, GuidanceConfig, InferenceGrid, ReverseSample};
use apo_core::pipeline::{self, MetricsError, MetricsLog, Pipeline, PipelineError, Stage};
use apo_core::synthworld::{evaluate, write_offline_records, write_pairs, DiffusionSampler, SampleGenerator};
use apo_core::{ParamSet, Tensor};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "apo", version, about = "Preference alignment for a toy conditional diffusion model")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the offline records and preference pairs as TSV.
    GenData,
    /// Run one stage or the whole curriculum.
    Run {
        /// pretrain, online, half_online, offline, distill or distill_aware.
        #[arg(long, required_unless_present = "all", conflicts_with = "all")]
        stage: Option<String>,
        #[arg(long)]
        all: bool,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to unguided for distilled checkpoints, guided otherwise.
        #[arg(long, value_enum)]
        guidance: Option<GuidanceMode>,
    },
    /// Plot one or more metrics CSVs as SVG.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GuidanceMode {
    On,
    Off,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn unwritable(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::new(2, format!("cannot write {}: {err}", path.display()))
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Output { .. } => 2,
            PipelineError::MissingPrerequisite { .. } => 3,
            PipelineError::NonFinite { .. } => 4,
            PipelineError::Checkpoint { .. } => 5,
            PipelineError::Metrics(MetricsError::Io(_)) => 2,
            _ => 1,
        };
        Self::new(code, e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    if let Command::Report { csv } = &cli.command {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
        return cmd_report(csv, &out);
    }
    let cfg = effective_config(&cli)?;
    println!("config hash: {}", config_hash(&cfg));
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Run { stage, all } => cmd_run(&cfg, stage.as_deref(), all),
        Command::Eval { checkpoint, guidance } => cmd_eval(&cfg, &checkpoint, guidance),
        Command::Report { .. } => unreachable!(),
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::new(1, e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

/// SHA-256 of the compact JSON serialization of the effective config.
fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config is always serializable");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::unwritable(path, e))
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::unwritable(dir, e))
}

fn cmd_gen_data(cfg: &RunConfig) -> CliResult {
    let pipeline = Pipeline::new(cfg.clone())?;
    let data = pipeline.offline_data();
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let records_path = dir.join("offline_records.tsv");
    write_offline_records(&data.records, create_file(&records_path)?)
        .map_err(|e| Failure::unwritable(&records_path, e))?;
    let pairs_path = dir.join("offline_pairs.tsv");
    write_pairs(&data.pairs, create_file(&pairs_path)?).map_err(|e| Failure::unwritable(&pairs_path, e))?;
    println!(
        "records: {} -> {}\npairs: {} -> {}",
        data.records.len(),
        records_path.display(),
        data.pairs.len(),
        pairs_path.display()
    );
    Ok(())
}

fn cmd_run(cfg: &RunConfig, stage: Option<&str>, all: bool) -> CliResult {
    let outcome = if all {
        pipeline::run_pipeline(cfg)?
    } else {
        let name = stage.expect("clap requires --stage or --all");
        let stage = Stage::from_name(name).ok_or_else(|| {
            let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
            Failure::new(1, format!("unknown stage {name:?}; expected one of {}", names.join(", ")))
        })?;
        pipeline::run_single_stage(cfg, stage)?
    };
    for report in &outcome.reports {
        match report.final_eval() {
            Some(e) => println!(
                "{:<13} updates={:<5} defect_rate={:.4} follow_rate={:.4} mean_quality={:.4} nfe={}",
                report.stage.name(),
                report.updates,
                e.defect_rate,
                e.follow_rate,
                e.mean_quality,
                e.nfe_per_sample
            ),
            None => println!("{:<13} updates={}", report.stage.name(), report.updates),
        }
    }
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

/// Emits a fixed table of points, one row per condition. Checkpoints that
/// carry an `oracle.centers` tensor are evaluated through this instead of the
/// network.
struct TableGenerator {
    points: Tensor,
}

impl SampleGenerator for TableGenerator {
    fn generate(
        &self,
        conds: &[usize],
        _: &InferenceGrid,
        _: Option<&GuidanceConfig>,
        _: u64,
    ) -> Result<ReverseSample, DiffusionError> {
        let rows: Vec<[f64; 2]> = conds
            .iter()
            .map(|&c| {
                let r = self.points.row(c);
                [r[0], r[1]]
            })
            .collect();
        Ok(ReverseSample {
            x0: Tensor::from_rows(&rows),
            nfe: 0,
        })
    }
}

const TABLE_KEY: &str = "oracle.centers";

#[derive(Serialize)]
struct EvalJson<'a> {
    checkpoint: String,
    seed: u64,
    guided: bool,
    defect_rate: f64,
    follow_rate: f64,
    mean_quality: f64,
    nfe: usize,
    n_eval: usize,
    config_hash: &'a str,
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, mode: Option<GuidanceMode>) -> CliResult {
    let bad_checkpoint = |e: &dyn std::fmt::Display| Failure::new(5, format!("checkpoint {}: {e}", checkpoint.display()));
    let params = ParamSet::load(checkpoint).map_err(|e| bad_checkpoint(&e))?;
    let pipeline = Pipeline::new(cfg.clone())?;

    let stem = checkpoint.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    let distilled = matches!(Stage::from_name(&stem), Some(s) if s.produces_student());
    let guided = match mode {
        Some(m) => m == GuidanceMode::On,
        None => !distilled,
    };
    let guidance = guided.then_some(cfg.eval.guidance);

    let model;
    let table;
    let generator: &dyn SampleGenerator = match params.get(TABLE_KEY) {
        Some(entry) => {
            let points = entry.value.clone();
            if points.shape() != [cfg.task.num_modes, 2] {
                return Err(bad_checkpoint(&format!(
                    "{TABLE_KEY} has shape {:?}, expected [{}, 2]",
                    points.shape(),
                    cfg.task.num_modes
                )));
            }
            table = TableGenerator { points };
            &table
        }
        None => {
            model = EpsModel::from_params(params).map_err(|e| bad_checkpoint(&e))?;
            if model.arch().num_conditions != cfg.task.num_modes {
                return Err(bad_checkpoint(&"model condition count does not match the task"));
            }
            &DiffusionSampler {
                model: &model,
                sched: pipeline.schedule(),
            }
        }
    };
    let report = evaluate(
        generator,
        pipeline.grid(),
        guidance.as_ref(),
        &cfg.task,
        cfg.eval.n_eval,
        pipeline.eval_seed(),
    )
    .map_err(|e| Failure::new(1, e.to_string()))?;

    println!(
        "defect_rate={:.6} follow_rate={:.6} mean_quality={:.6} nfe={}",
        report.defect_rate, report.follow_rate, report.mean_quality, report.nfe_per_sample
    );
    let hash = config_hash(cfg);
    let json = EvalJson {
        checkpoint: checkpoint.display().to_string(),
        seed: cfg.seed,
        guided,
        defect_rate: report.defect_rate,
        follow_rate: report.follow_rate,
        mean_quality: report.mean_quality,
        nfe: report.nfe_per_sample,
        n_eval: report.n_eval,
        config_hash: &hash,
    };
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("eval_{stem}.json"));
    let mut text = serde_json::to_string_pretty(&json).expect("report is serializable");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Failure::unwritable(&path, e))?;
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_report(csvs: &[PathBuf], out: &Path) -> CliResult {
    let mut runs = Vec::new();
    for path in csvs {
        let file = fs::File::open(path).map_err(|e| Failure::new(1, format!("cannot read {}: {e}", path.display())))?;
        let log = MetricsLog::read_csv(file).map_err(|e| {
            let line = match &e {
                MetricsError::Malformed { line, .. } => Some(*line),
                MetricsError::Csv(c) => c.position().map(|p| p.line()),
                MetricsError::Io(_) => None,
            };
            match line {
                Some(line) => Failure::new(6, format!("malformed CSV {} at line {line}: {e}", path.display())),
                None => Failure::new(6, format!("malformed CSV {}: {e}", path.display())),
            }
        })?;
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        runs.push(svg::Run { name, log });
    }
    ensure_dir(out)?;
    for (file, doc) in [
        ("loss.svg", svg::loss_overlay(&runs)),
        ("defect_rate.svg", svg::defect_curves(&runs)),
        ("comparison.svg", svg::comparison_bars(&runs)),
    ] {
        let path = out.join(file);
        fs::write(&path, doc).map_err(|e| Failure::unwritable(&path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
