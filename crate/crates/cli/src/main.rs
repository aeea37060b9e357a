use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hrlab::cdap::GateDiagnostics;
use hrlab::config::RunConfig;
use hrlab::metrics::{self, EvalSummary};
use hrlab::plot;
use hrlab::train::{self, AblationAxis, RunDir};
use hrlab::{HrError, Result};

const RUN_DIR_ENV: &str = "HRLAB_RUN_DIR";

#[derive(Parser)]
#[command(name = "hrlab", version, about = "Train, evaluate and ablate the hybrid registration network")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a metrics log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory name under the output root (default: train-<config hash>).
        #[arg(long)]
        name: Option<String>,
    },
    /// Score a checkpoint: per-pair CSV plus a mean ± std summary.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config recorded next to the checkpoint.
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: <run>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant of an ablation axis and print a comparison table.
    Ablate {
        /// One of msbn, cdap, losses, steps.
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render SVG figures from metrics logs, eval CSVs and gate reports.
    Plot {
        /// `*.jsonl` metrics logs, `*.csv` eval records or `gates.json` reports.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted key=value override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Train on one fixed batch of N pairs.
    #[arg(long)]
    overfit: Option<usize>,
    /// Start from the full-resolution defaults instead of the desk-scale ones.
    #[arg(long)]
    paper_scale: bool,
    /// Data-generation threads; 0 is fully deterministic.
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none() && self.set.is_empty() && self.overfit.is_none() && !self.paper_scale && self.workers.is_none()
    }

    fn resolve(&self) -> Result<RunConfig> {
        if self.config.is_some() && self.paper_scale {
            return Err(HrError::Config("--paper-scale and --config are mutually exclusive".into()));
        }
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.paper_scale => RunConfig::paper_scale(),
            None => RunConfig::default(),
        };
        let mut sets = self.set.clone();
        if let Some(n) = self.overfit {
            sets.push(format!("train.overfit={n}"));
        }
        if let Some(w) = self.workers {
            sets.push(format!("train.workers={w}"));
        }
        base.with_overrides(&sets)
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn cmd_train(args: &ConfigArgs, name: Option<&str>) -> Result<()> {
    let cfg = args.resolve()?;
    let name = name.map(String::from).unwrap_or_else(|| format!("train-{}", cfg.config_hash()));
    let dir = RunDir::create(&output_root().join(name), &cfg)?;
    let outcome = train::train(&cfg, Some(&dir))?;
    if let Some(last) = outcome.reports.last() {
        println!("trained {} steps, final total loss {:.6}", outcome.reports.len(), last.total);
    }
    println!("run directory: {}", dir.root.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, args: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    if !checkpoint.is_file() {
        return Err(HrError::Config(format!("checkpoint {} not found", checkpoint.display())));
    }
    let run_root = checkpoint.parent().and_then(Path::parent).map(Path::to_path_buf);
    let cfg = match (&run_root, args.is_empty()) {
        (Some(root), true) if root.join("config.toml").is_file() => RunConfig::load(&root.join("config.toml"))?,
        _ => args.resolve()?,
    };
    let model = train::load_checkpoint(&cfg, checkpoint)?;
    let (records, gates) = train::evaluate_with_gates(&model, &train::scoring_pairs(&cfg)?)?;
    let out = match (out, &run_root) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(root)) => root.join("eval"),
        (None, None) => output_root().join("eval"),
    };
    let summary = train::write_eval(&out, &records, gates.as_ref(), &cfg.config_hash())?;
    print_summary(&summary);
    println!("results: {}", out.display());
    Ok(())
}

fn print_summary(s: &EvalSummary) {
    println!("pairs {}  config {}", s.pairs, s.config_hash);
    println!("RE   {}", s.re);
    println!("NCC  {}", s.ncc);
    for (i, c) in s.cka.iter().enumerate() {
        println!("CKA{i} {c}");
    }
}

fn cmd_ablate(axis: &str, seeds: usize, args: &ConfigArgs) -> Result<()> {
    let axis: AblationAxis = axis.parse()?;
    let base = args.resolve()?;
    let root = output_root().join(format!("ablate-{axis:?}-{}", base.config_hash()).to_lowercase());
    fs::create_dir_all(&root)?;
    let rows = train::run_ablation(&base, axis, seeds, Some(&root))?;
    let table = train::ablation_table(axis, &rows);
    fs::write(root.join("table.md"), &table)?;
    print!("{table}");
    Ok(())
}

/// Label for an eval CSV: its run directory name.
fn csv_label(path: &Path) -> String {
    let mut dir = path.parent();
    if dir.and_then(Path::file_name).is_some_and(|n| n == "eval") {
        dir = dir.and_then(Path::parent);
    }
    dir.and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "figure".into())
}

fn cmd_plot(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut cka_groups = Vec::new();
    let mut written = Vec::new();
    fs::create_dir_all(out)?;
    for input in inputs {
        if !input.is_file() {
            return Err(HrError::Format(format!("{} is not a file", input.display())));
        }
        let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "jsonl" => {
                let reports = plot::parse_metrics_log(&fs::read_to_string(input)?)?;
                let target = out.join(format!("{}_loss.svg", stem(input)));
                plot::loss_curves(&reports, &target)?;
                written.push(target);
            }
            "csv" => {
                let records = metrics::read_records_csv(fs::File::open(input)?)?;
                if records.is_empty() {
                    return Err(HrError::Format(format!("{} has no records", input.display())));
                }
                let s = EvalSummary::from_records(&records, "");
                let mut means = [0.0; 5];
                for (m, c) in means.iter_mut().zip(&s.cka) {
                    *m = c.mean;
                }
                cka_groups.push((csv_label(input), means));
            }
            "json" => {
                let gates: GateDiagnostics = serde_json::from_str(&fs::read_to_string(input)?)
                    .map_err(|e| HrError::Format(format!("{}: {e}", input.display())))?;
                let target = out.join(format!("{}.svg", stem(input)));
                plot::gate_histograms(&gates, &target)?;
                written.push(target);
            }
            _ => {
                return Err(HrError::Format(format!(
                    "{}: expected a .jsonl log, .csv eval records or .json gate report",
                    input.display()
                )))
            }
        }
    }
    if !cka_groups.is_empty() {
        let target = out.join("cka.svg");
        plot::cka_bars(&cka_groups, &target)?;
        written.push(target);
    }
    for w in written {
        println!("{}", w.display());
    }
    Ok(())
}

fn exit_code(e: &HrError) -> u8 {
    match e {
        HrError::NonFinite { .. } => 3,
        HrError::Config(_) | HrError::Format(_) | HrError::InvalidParameter(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Train { cfg, name } => cmd_train(cfg, name.as_deref()),
        Command::Eval { checkpoint, cfg, out } => cmd_eval(checkpoint, cfg, out.as_deref()),
        Command::Ablate { axis, seeds, cfg } => cmd_ablate(axis, *seeds, cfg),
        Command::Plot { inputs, out } => cmd_plot(inputs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
