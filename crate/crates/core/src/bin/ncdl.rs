use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ncdl::checkpoint::{Checkpoint, CheckpointKind};
use ncdl::config::ExperimentConfig;
use ncdl::dataio::{read_dataset, read_ground_truth, read_json, write_dataset, write_ground_truth, write_json};
use ncdl::error::NcdlError;
use ncdl::experiment::{
    bootstrap_stage, discovery_checkpoint, discovery_stage, evaluate_stage, infer_stage, mapping_stage,
    EvaluationReport, MappingReport,
};
use ncdl::synth::generate;

#[derive(Parser)]
#[command(name = "ncdl", version, about = "Novel class discovery on region-proposal features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tail dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the known head (with background) on labeled proposals.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the discovery phase from a bootstrap checkpoint.
    Discover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Map class slots to ground-truth names.
    Map {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Score detections with mAP.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        mapping: Option<PathBuf>,
    },
    /// Write post-processed detections.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mapping: Option<PathBuf>,
    },
    /// Compare evaluation reports side by side.
    Report {
        #[command(flatten)]
        common: Common,
        /// Training log (JSONL) to summarize.
        #[arg(long)]
        log: Option<PathBuf>,
        /// `map_report.json` files; the first is the baseline for deltas.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut cfg = ExperimentConfig::default();
            if let Ok(v) = std::env::var(ncdl::config::SEED_ENV) {
                cfg.set_seed(v.trim().parse().context("NCDL_SEED must be an unsigned integer")?);
            }
            cfg.validate()?;
            cfg
        }
    };
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    write_json(&cfg, &common.out.join("config.json"))?;
    Ok(cfg)
}

fn pick(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match flag.as_ref().or(configured.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => bail!("no {what} given (flag or paths.* in the config)"),
    }
}

fn load_checkpoint(path: &Path, kind: CheckpointKind) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != kind {
        bail!("{} holds a {:?} checkpoint, expected {:?}", path.display(), ck.kind, kind);
    }
    Ok(ck)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            let data = generate(&cfg.synth)?;
            write_dataset(&data.dataset, &common.out.join("dataset"))?;
            write_ground_truth(&data.ground_truth, &common.out.join("ground_truth.json"))?;
            write_json(&data.truth, &common.out.join("true_labels.json"))?;
        }
        Command::Bootstrap { common, dataset } => {
            let cfg = load_config(&common)?;
            let ds = read_dataset(&pick(&dataset, &cfg.paths.dataset, "dataset")?)?;
            let (ck, accuracy) = bootstrap_stage(&ds, &cfg)?;
            ck.save(&common.out.join("checkpoint"))?;
            write_json(&serde_json::json!({ "train_accuracy": accuracy }), &common.out.join("bootstrap.json"))?;
        }
        Command::Discover {
            common,
            dataset,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let ds = read_dataset(&pick(&dataset, &cfg.paths.dataset, "dataset")?)?;
            let boot = load_checkpoint(&pick(&checkpoint, &cfg.paths.checkpoint, "checkpoint")?, CheckpointKind::Bootstrap)?;
            let log_path = common.out.join("train_log.jsonl");
            let mut log = std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| log_path.display().to_string())?);
            let every = cfg.discovery.checkpoint_every;
            let result = discovery_stage(&ds, &boot, &cfg, |state, report| {
                serde_json::to_writer(&mut log, report).map_err(std::io::Error::from).and_then(|_| writeln!(log)).map_err(|e| NcdlError::Invalid(format!("writing {}: {e}", log_path.display())))?;
                if every > 0 && state.iter % every == 0 {
                    discovery_checkpoint(state, &ds.known_class_names).save(&common.out.join(format!("checkpoints/iter_{:07}", state.iter)))?;
                }
                Ok(())
            });
            log.flush()?;
            let (ck, _) = match result {
                Err(NcdlError::NonFiniteLoss { iter, dump }) => {
                    let p = common.out.join("nonfinite_step.json");
                    fs::write(&p, dump)?;
                    bail!("non-finite loss at iteration {iter}; step inputs written to {}", p.display());
                }
                other => other?,
            };
            ck.save(&common.out.join("checkpoint"))?;
        }
        Command::Map {
            common,
            dataset,
            checkpoint,
            gt,
        } => {
            let cfg = load_config(&common)?;
            let ds = read_dataset(&pick(&dataset, &cfg.paths.dataset, "dataset")?)?;
            let ck = load_checkpoint(&pick(&checkpoint, &cfg.paths.checkpoint, "checkpoint")?, CheckpointKind::Discovery)?;
            let gt = read_ground_truth(&pick(&gt, &cfg.paths.ground_truth, "ground truth")?)?;
            write_json(&mapping_stage(&ck.params, &ds, &gt)?, &common.out.join("mapping.json"))?;
        }
        Command::Evaluate {
            common,
            dataset,
            checkpoint,
            gt,
            mapping,
        } => {
            let cfg = load_config(&common)?;
            let ds = read_dataset(&pick(&dataset, &cfg.paths.dataset, "dataset")?)?;
            let ck = load_checkpoint(&pick(&checkpoint, &cfg.paths.checkpoint, "checkpoint")?, CheckpointKind::Discovery)?;
            let gt = read_ground_truth(&pick(&gt, &cfg.paths.ground_truth, "ground truth")?)?;
            let mapping: MappingReport = read_json(&pick(&mapping, &cfg.paths.mapping, "mapping")?)?;
            let report = evaluate_stage(&ck.params, &ds, &gt, &mapping, &cfg.postprocess)?;
            write_json(&report, &common.out.join("map_report.json"))?;
        }
        Command::Infer {
            common,
            dataset,
            checkpoint,
            mapping,
        } => {
            let cfg = load_config(&common)?;
            let ds = read_dataset(&pick(&dataset, &cfg.paths.dataset, "dataset")?)?;
            let ck = load_checkpoint(&pick(&checkpoint, &cfg.paths.checkpoint, "checkpoint")?, CheckpointKind::Discovery)?;
            let mapping: MappingReport = read_json(&pick(&mapping, &cfg.paths.mapping, "mapping")?)?;
            let dets = infer_stage(&ck.params, &ds, &mapping.mapping, &cfg.postprocess)?;
            write_json(&dets, &common.out.join("detections.json"))?;
        }
        Command::Report { common, log, reports } => {
            load_config(&common)?;
            let table = report_table(&reports, log.as_deref())?;
            write_json(&table, &common.out.join("report.json"))?;
            fs::write(common.out.join("report.txt"), table.render())?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportRow {
    metric: String,
    values: Vec<Option<f64>>,
    /// Difference to the first column.
    deltas: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct ReportTable {
    columns: Vec<String>,
    rows: Vec<ReportRow>,
    log: Option<serde_json::Value>,
}

impl ReportTable {
    fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!("{:<16}", "metric");
        for (i, c) in self.columns.iter().enumerate() {
            s += &format!(" {:>14}", c);
            if i > 0 {
                s += &format!(" {:>10}", "delta");
            }
        }
        s.push('\n');
        for r in &self.rows {
            s += &format!("{:<16}", r.metric);
            for (i, v) in r.values.iter().enumerate() {
                s += &format!(" {:>14}", fmt(*v));
                if i > 0 {
                    s += &format!(" {:>10}", r.deltas[i].map_or("-".into(), |d| format!("{d:+.4}")));
                }
            }
            s.push('\n');
        }
        if let Some(log) = &self.log {
            s += &format!("log: {log}\n");
        }
        s
    }
}

fn report_table(paths: &[PathBuf], log: Option<&Path>) -> Result<ReportTable> {
    let reports: Vec<EvaluationReport> = paths.iter().map(|p| read_json(p)).collect::<Result<_, _>>()?;
    let columns = paths
        .iter()
        .map(|p| {
            p.parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        })
        .collect();
    let mut rows = Vec::new();
    for (group, get) in [
        ("all", (|r: &EvaluationReport| &r.map.all) as fn(&EvaluationReport) -> &ncdl::evalkit::GroupMetrics),
        ("known", |r| &r.map.known),
        ("novel", |r| &r.map.novel),
    ] {
        for (metric, field) in [
            ("mAP", (|g: &ncdl::evalkit::GroupMetrics| g.map) as fn(&ncdl::evalkit::GroupMetrics) -> Option<f64>),
            ("mAP50", |g| g.map50),
            ("mAP75", |g| g.map75),
            ("mAP_s", |g| g.map_s),
            ("mAP_m", |g| g.map_m),
            ("mAP_l", |g| g.map_l),
        ] {
            let values: Vec<Option<f64>> = reports.iter().map(|r| field(get(r))).collect();
            let deltas = values
                .iter()
                .map(|v| Some(v.as_ref()? - values[0]?))
                .collect();
            rows.push(ReportRow {
                metric: format!("{group}.{metric}"),
                values,
                deltas,
            });
        }
    }
    let log = match log {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let lines: Vec<serde_json::Value> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()
                .with_context(|| format!("parsing {}", p.display()))?;
            Some(serde_json::json!({ "steps": lines.len(), "last": lines.last() }))
        }
        None => None,
    };
    Ok(ReportTable { columns, rows, log })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
