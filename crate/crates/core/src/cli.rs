//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load_dataset, write_dataset, Domain, PathSet, PropagationTree};
use crate::encoder::encode_batch;
use crate::error::{Error, Result};
use crate::experiment::run_synthetic;
use crate::gradcheck::model_suite;
use crate::pseudo::{kmeans_assign, pseudo_accuracy, source_prototypes};
use crate::synth::{generate, manifest, self_test};
use crate::tensor::no_grad;
use crate::trainer::{embedding_table, evaluate, prepare_samples, train, EvalReport, FileLogger, Sample, TrainObserver, TrainState};

/// `println!` that exits quietly when the reader has gone away, as with
/// `rumor-adapt ... | head`.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            panic!("failed writing to stdout: {e}");
        }
    }};
}

#[derive(Parser, Debug)]
#[command(name = "rumor-adapt", version, about = "Cross-domain rumor detection with contrastive adaptation")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set gamma1=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic source/target dataset pair.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for source.jsonl, target.jsonl and manifest.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a labeled source set and an unlabeled target set.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Labeled source rumors, one JSON tree per line.
        #[arg(long)]
        source: PathBuf,
        /// Target rumors; labels, if present, are used only for evaluation.
        #[arg(long)]
        target: PathBuf,
        /// Run directory for metrics, checkpoints and predictions.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled target set.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target rumors to score.
        #[arg(long)]
        target: PathBuf,
        /// Prediction dump; defaults to predictions.jsonl next to the checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient on a micro model.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on synthetic data for each cell of an α/β/γ grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// e.g. `alpha=0.9/0.1,0.5/0.5;gamma=0.8/0.1/0.1`
        #[arg(long)]
        grid: String,
        /// Also write the CSV rows here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pseudo labels of target rumors against full-source prototypes.
    InspectPseudo {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled source rumors used for the prototypes.
        #[arg(long)]
        source: PathBuf,
        /// Target rumors to assign.
        #[arg(long)]
        target: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Io { .. } | Error::Parse { .. } | Error::Format { .. } | Error::Validation { .. } => 1,
        _ => 2,
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Synth { config, out } => cmd_synth(&config.load()?, &out),
        Command::Train {
            config,
            source,
            target,
            out,
            resume,
        } => cmd_train(&config.load()?, &source, &target, &out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            target,
            predictions,
        } => cmd_eval(&checkpoint, &target, predictions),
        Command::Gradcheck { config } => cmd_gradcheck(&config.load()?),
        Command::Sweep { config, grid, out } => cmd_sweep(&config.load()?, &grid, out.as_deref()),
        Command::InspectPseudo {
            checkpoint,
            source,
            target,
        } => cmd_inspect(&checkpoint, &source, &target),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let (source, target) = generate(&cfg.synth)?;
    create_dir(out)?;
    write_dataset(&out.join("source.jsonl"), &source)?;
    write_dataset(&out.join("target.jsonl"), &target)?;
    write_file(&out.join("manifest.txt"), &manifest(&cfg.synth, &source, &target))?;
    let st = self_test(&cfg.synth, &source, &target);
    out!("wrote {} source and {} target rumors to {}", source.len(), target.len(), out.display());
    out!("stance-only nearest centroid: source {:.1}%, target {:.1}%", 100.0 * st.stance_source, 100.0 * st.stance_target);
    out!("all-token nearest centroid on target: {:.1}%", 100.0 * st.full_target);
    Ok(0)
}

struct Datasets {
    source: Vec<Sample>,
    target: Vec<Sample>,
}

fn load_pair(cfg: &RunConfig, source: &Path, target: &Path) -> Result<Datasets> {
    let src = load_dataset(source, Domain::Source)?;
    let tgt = load_dataset(target, Domain::Target)?;
    let all: Vec<&PropagationTree> = src.iter().chain(tgt.iter()).collect();
    let table = embedding_table(cfg, &all)?;
    Ok(Datasets {
        source: prepare_samples(&src, &table, cfg.train.max_paths)?,
        target: prepare_samples(&tgt, &table, cfg.train.max_paths)?,
    })
}

fn class_name(n_classes: usize, c: usize) -> String {
    match (n_classes, c) {
        (2, 0) => "N".into(),
        (2, 1) => "R".into(),
        _ => format!("class{c}"),
    }
}

fn print_report(report: &EvalReport) {
    out!("accuracy {:.2}", report.accuracy);
    for (c, f1) in report.f1.iter().enumerate() {
        out!("{}-F1 {:.2}", class_name(report.f1.len(), c), f1);
    }
}

fn write_predictions(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = String::new();
    for p in &report.predictions {
        text.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        text.push('\n');
    }
    write_file(path, &text)
}

/// Settings that may differ between a checkpoint and the run resuming it.
const RESUMABLE_KEYS: [&str; 3] = ["epochs", "patience", "checkpoint_every"];

fn cmd_train(cfg: &RunConfig, source: &Path, target: &Path, out: &Path, resume: Option<&Path>) -> Result<i32> {
    let data = load_pair(cfg, source, target)?;
    let state = match resume {
        Some(path) => {
            let (saved, state) = checkpoint::load(path)?;
            let differing: Vec<String> = saved
                .entries()
                .into_iter()
                .zip(cfg.entries())
                .filter(|((k, a), (_, b))| a != b && !RESUMABLE_KEYS.contains(k))
                .map(|((k, a), (_, b))| format!("{k} ({a} in checkpoint, {b} now)"))
                .collect();
            if !differing.is_empty() {
                return Err(Error::Config(format!(
                    "configuration differs from the checkpoint: {}",
                    differing.join(", ")
                )));
            }
            state
        }
        None => TrainState::new(&cfg.train)?,
    };
    let mut logger = FileLogger::create(out, cfg.clone(), false)?;
    for r in &state.history {
        logger.on_step(r)?;
    }
    let state = train(&data.source, &data.target, &cfg.train, state, &mut logger)?;
    let ckpt = out.join("checkpoint.txt");
    checkpoint::save(&ckpt, cfg, &state)?;
    out!("trained {} steps over {} epochs; checkpoint {}", state.step, state.epoch, ckpt.display());
    if let Some(last) = state.history.last() {
        out!("final step loss {:.6}", last.total);
    }
    let report = evaluate(&state.params, &data.target)?;
    write_predictions(&out.join("predictions.jsonl"), &report)?;
    if report.labeled > 0 {
        print_report(&report);
        let mut text = format!("accuracy = {:?}\n", report.accuracy);
        for (c, f1) in report.f1.iter().enumerate() {
            text.push_str(&format!("f1_{} = {:?}\n", class_name(report.f1.len(), c), f1));
        }
        write_file(&out.join("eval.txt"), &text)?;
    }
    Ok(0)
}

fn cmd_eval(ckpt: &Path, target: &Path, predictions: Option<PathBuf>) -> Result<i32> {
    let (cfg, state) = checkpoint::load(ckpt)?;
    let trees = load_dataset(target, Domain::Target)?;
    let all: Vec<&PropagationTree> = trees.iter().collect();
    let table = embedding_table(&cfg, &all)?;
    let samples = prepare_samples(&trees, &table, cfg.train.max_paths)?;
    let report = evaluate(&state.params, &samples)?;
    let path = predictions.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("predictions.jsonl"));
    write_predictions(&path, &report)?;
    if report.labeled == 0 {
        out!("no labeled target rumors; wrote {} predictions to {}", report.predictions.len(), path.display());
    } else {
        print_report(&report);
        out!("predictions {}", path.display());
    }
    Ok(0)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<i32> {
    let entries = model_suite(cfg)?;
    out!("{:<18} {:<12} {:>12} {:>8} {:>9}  status", "loss", "group", "max_rel_err", "checked", "tolerance");
    let mut all = true;
    for e in &entries {
        all &= e.passed();
        out!(
            "{:<18} {:<12} {:>12.3e} {:>8} {:>9.0e}  {}",
            e.loss,
            e.group,
            e.max_rel_error,
            e.checked,
            e.tolerance,
            if e.passed() { "ok" } else { "FAIL" }
        );
    }
    out!("{}", if all { "gradcheck passed" } else { "gradcheck FAILED" });
    Ok(if all { 0 } else { 2 })
}

/// One sweep cell: the group name, its values, and the full configuration.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub group: String,
    pub values: Vec<f64>,
    pub config: RunConfig,
}

/// Parses `group=v/v[/v],v/v;group=...` into cells. Each cell changes one
/// weight group of `base` and leaves the others at their base values.
pub fn parse_grid(base: &RunConfig, spec: &str) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (group, values) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid part {part:?} is not group=values")))?;
        let group = group.trim();
        let keys: &[&str] = match group {
            "alpha" => &["alpha1", "alpha2"],
            "beta" => &["beta1", "beta2"],
            "gamma" => &["gamma1", "gamma2", "gamma3"],
            other => return Err(Error::Config(format!("unknown grid group {other:?} (expected alpha, beta or gamma)"))),
        };
        for cell in values.split(',').map(str::trim) {
            let parts: Vec<&str> = cell.split('/').map(str::trim).collect();
            if parts.len() != keys.len() {
                return Err(Error::Config(format!(
                    "{group} cell {cell:?} needs {} values separated by '/'",
                    keys.len()
                )));
            }
            let mut config = base.clone();
            let mut vals = Vec::new();
            for (k, v) in keys.iter().zip(&parts) {
                config.set(k, v)?;
                vals.push(v.parse::<f64>().map_err(|e| Error::Config(format!("bad {k} value {v:?}: {e}")))?);
            }
            config.validate()?;
            cells.push(SweepCell {
                group: group.to_string(),
                values: vals,
                config,
            });
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(cells)
}

fn cmd_sweep(base: &RunConfig, grid: &str, out: Option<&Path>) -> Result<i32> {
    let cells = parse_grid(base, grid)?;
    let n_classes = base.train.model.n_classes;
    let mut header = "group,alpha1,alpha2,beta1,beta2,gamma1,gamma2,gamma3,accuracy".to_string();
    for c in 0..n_classes {
        header.push_str(&format!(",f1_{}", class_name(n_classes, c)));
    }
    let mut rows = vec![header];
    out!("{}", rows[0]);
    for cell in &cells {
        let (report, _) = run_synthetic(&cell.config, &mut ())?;
        let t = &cell.config.train;
        let mut row = format!(
            "{},{},{},{},{},{},{},{},{:.4}",
            cell.group,
            t.contrastive.alpha[0],
            t.contrastive.alpha[1],
            t.contrastive.beta[0],
            t.contrastive.beta[1],
            t.weights.ce,
            t.weights.contrastive,
            t.weights.consistency,
            report.accuracy
        );
        for f in &report.f1 {
            row.push_str(&format!(",{f:.4}"));
        }
        out!("{row}");
        std::io::stdout().flush().ok();
        rows.push(row);
    }
    if let Some(out) = out {
        write_file(out, &(rows.join("\n") + "\n"))?;
    }
    Ok(0)
}

/// Per-target pseudo label, distance to its center, and held-out label.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PseudoRow {
    pub id: String,
    pub pseudo: usize,
    pub distance: f64,
    pub label: Option<usize>,
}

/// Clusters every target rumor against prototypes of the full source set.
pub fn inspect_pseudo(cfg: &RunConfig, state: &TrainState, source: &[Sample], target: &[Sample]) -> Result<(Vec<PseudoRow>, Option<f64>)> {
    if target.is_empty() {
        return Ok((Vec::new(), None));
    }
    if source.is_empty() {
        return Err(Error::Contract("pseudo labeling needs source rumors for prototypes".into()));
    }
    let params = &state.params;
    let labels: Vec<usize> = source
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Contract(format!("source rumor {} has no label", s.id))))
        .collect::<Result<_>>()?;
    let assigned = no_grad(|| -> Result<_> {
        let src: Vec<&PathSet> = source.iter().map(|s| &s.pathset).collect();
        let tgt: Vec<&PathSet> = target.iter().map(|s| &s.pathset).collect();
        let sf = encode_batch(&src, &params.encoder)?.features;
        let protos = source_prototypes(&sf, &labels, cfg.train.model.n_classes)?;
        let tf = encode_batch(&tgt, &params.encoder)?.features;
        let rows: Vec<Vec<f64>> = (0..tf.rows()).map(|i| tf.row(i)).collect();
        kmeans_assign(&rows, &protos.initial_centers(), &cfg.train.kmeans)
    })?;
    let truth: Vec<Option<usize>> = target.iter().map(|s| s.label).collect();
    let acc = pseudo_accuracy(&assigned.labels, &truth);
    let rows = target
        .iter()
        .zip(assigned.labels.iter().zip(&assigned.distances))
        .map(|(s, (&pseudo, &distance))| PseudoRow {
            id: s.id.clone(),
            pseudo,
            distance,
            label: s.label,
        })
        .collect();
    Ok((rows, acc))
}

fn cmd_inspect(ckpt: &Path, source: &Path, target: &Path) -> Result<i32> {
    let (cfg, state) = checkpoint::load(ckpt)?;
    let data = load_pair(&cfg, source, target)?;
    let (rows, acc) = inspect_pseudo(&cfg, &state, &data.source, &data.target)?;
    for r in &rows {
        out!("{}", serde_json::to_string(r).expect("row serializes"));
    }
    match acc {
        Some(a) => out!("pseudo_accuracy {:.2}", 100.0 * a),
        None => out!("pseudo_accuracy n/a"),
    }
    Ok(0)
}
