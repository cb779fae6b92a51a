//! Command-line entry points: `train`, `ablate`, `analyze`, `gradcheck`.
//!
//! Flags override values from `--config`, which override built-in defaults.
//! Each `cmd_*` function returns the process exit code: 0 on success, 1 on a
//! runtime failure, 2 on an invalid configuration.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use crate::analysis::{self, Axis, SmoothnessRecord};
use crate::checkpoint::Checkpoint;
use crate::config::{Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckSettings};
use crate::router::{Granularity, RoutingMode};
use crate::synthdata;
use crate::tape::OpKind;
use crate::training::{self, CellMetrics, RunResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

const PRECEDENCE: &str =
    "Command-line flags override values read from --config, which override built-in defaults.\nTEA_LOG sets log verbosity (error, warn, info, debug, trace).";

#[derive(Debug, Parser)]
#[command(
    name = "tea",
    version,
    about = "Task- and era-aware mixture of LoRA experts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate data, train one model, write metrics and a checkpoint.
    #[command(after_help = PRECEDENCE)]
    Train(RunArgs),
    /// Train every routing variant on shared data and write a comparison table.
    #[command(after_help = PRECEDENCE)]
    Ablate(RunArgs),
    /// Expert-utilization heatmaps and smoothness metrics from a checkpoint.
    Analyze(AnalyzeArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration; omitted fields keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_experts: Option<usize>,
    /// Total adapter rank; must be divisible by --n-experts.
    #[arg(long)]
    pub rank: Option<usize>,
    /// separate, concat, task-only, era-only or no-moe.
    #[arg(long)]
    pub mode: Option<RoutingMode>,
    /// coarse or fine.
    #[arg(long)]
    pub granularity: Option<Granularity>,
    /// Cross-era conflict of the synthetic data, in [0, 1].
    #[arg(long)]
    pub conflict: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl RunArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            n_experts: self.n_experts,
            rank: self.rank,
            mode: self.mode,
            granularity: self.granularity,
            conflict: self.conflict,
            epochs: self.epochs,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// task, era, or both.
    #[arg(long, default_value = "both")]
    pub axis: String,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupts one backward rule (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<OpKind>,
}

/// Parses arguments, initializes logging from `TEA_LOG`, and dispatches.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("TEA_LOG", "info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Train(a) => cmd_train(a.config.as_deref(), &a.overrides()),
        Command::Ablate(a) => cmd_ablate(a.config.as_deref(), &a.overrides()),
        Command::Analyze(a) => match parse_axes(&a.axis) {
            Ok(axes) => cmd_analyze(&a.checkpoint, &axes, a.out.as_deref()),
            Err(e) => report(&e),
        },
        Command::Gradcheck(a) => cmd_gradcheck_with(
            a.config.as_deref(),
            &GradcheckSettings {
                seeds: (a.seed..a.seed + a.seeds).collect(),
                fault: a.inject_fault,
                ..GradcheckSettings::default()
            },
        ),
    }
}

fn parse_axes(s: &str) -> Result<Vec<Axis>> {
    if s == "both" {
        Ok(vec![Axis::Task, Axis::Era])
    } else {
        Ok(vec![s.parse()?])
    }
}

fn report(e: &Error) -> i32 {
    error!("{e}");
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Loads the file (or defaults) and applies flag overrides.
pub fn resolve_config(path: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(o)?;
    Ok(cfg)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Config(format!(
                        "output directory {} is in use by another run (remove {} if stale)",
                        dir.display(),
                        path.display()
                    ))
                } else {
                    Error::io(&path, e)
                }
            })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn cell_name(c: &CellMetrics) -> String {
    format!("t{}e{}", c.task, c.era)
}

/// Flat metrics table `variant,cell,split,metric,value`. Contains no timing
/// data, so identical runs produce identical bytes.
pub fn metrics_csv(results: &[RunResult]) -> String {
    let mut out = String::from("variant,cell,split,metric,value\n");
    for r in results {
        let variant = variant_key(r);
        for (epoch, loss) in r.epoch_train_loss.iter().enumerate() {
            writeln!(out, "{variant},all,train,loss_epoch{epoch},{loss:?}").unwrap();
        }
        for (split, cells) in [("dev", &r.dev), ("test", &r.test)] {
            for c in cells {
                let cell = cell_name(c);
                writeln!(out, "{variant},{cell},{split},loss,{:?}", c.loss).unwrap();
                writeln!(out, "{variant},{cell},{split},accuracy,{:?}", c.accuracy).unwrap();
            }
            let mean = training::mean_accuracy(cells);
            writeln!(out, "{variant},all,{split},accuracy,{mean:?}").unwrap();
        }
    }
    out
}

fn variant_key(r: &RunResult) -> String {
    if r.granularity == "n/a" {
        r.variant.clone()
    } else {
        format!("{}-{}", r.variant, r.granularity)
    }
}

/// One row per variant: `variant,granularity,cell,accuracy,loss`, where the
/// accuracy and loss are equal-weight means over test cells.
pub fn ablation_csv(results: &[RunResult]) -> String {
    let mut out = String::from("variant,granularity,cell,accuracy,loss\n");
    for r in results {
        let n = r.test.len() as f64;
        let loss = r.test.iter().map(|c| c.loss).sum::<f64>() / n;
        writeln!(
            out,
            "{},{},all,{:?},{loss:?}",
            r.variant,
            r.granularity,
            r.mean_test_accuracy()
        )
        .unwrap();
    }
    out
}

/// Same schema as [`ablation_csv`] with one row per variant and test cell.
pub fn ablation_cells_csv(results: &[RunResult]) -> String {
    let mut out = String::from("variant,granularity,cell,accuracy,loss\n");
    for r in results {
        for c in &r.test {
            writeln!(
                out,
                "{},{},{},{:?},{:?}",
                r.variant,
                r.granularity,
                cell_name(c),
                c.accuracy,
                c.loss
            )
            .unwrap();
        }
    }
    out
}

/// Files written by `train` into the output directory.
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_FILE: &str = "run.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_CELLS_FILE: &str = "ablation_cells.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation.json";

pub fn heatmap_file(axis: Axis) -> String {
    format!("heatmap_{axis}.csv")
}

pub fn smoothness_file(axis: Axis) -> String {
    format!("smoothness_{axis}.json")
}

pub fn cmd_train(config_path: Option<&Path>, overrides: &Overrides) -> i32 {
    match train_inner(config_path, overrides) {
        Ok(dir) => {
            info!("wrote {}", dir.display());
            EXIT_OK
        }
        Err(e) => report(&e),
    }
}

fn train_inner(config_path: Option<&Path>, overrides: &Overrides) -> Result<PathBuf> {
    let cfg = resolve_config(config_path, overrides)?;
    let dir = cfg.output_dir.clone();
    let _lock = DirLock::acquire(&dir)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml())?;
    let data = synthdata::generate(&cfg.synth_spec())?;
    let mut run = training::train(&cfg, &data)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    Checkpoint::from_model(&run.model, &cfg).save(&ck_path)?;
    run.result.checkpoint = Some(CHECKPOINT_FILE.to_string());
    write_file(
        &dir.join(METRICS_FILE),
        metrics_csv(std::slice::from_ref(&run.result)),
    )?;
    let json = serde_json::to_string_pretty(&run.result).expect("result serializes");
    write_file(&dir.join(RUN_FILE), json)?;
    if !run.result.freeze_ok {
        return Err(Error::Contract(
            "frozen backbone weights changed during training".into(),
        ));
    }
    Ok(dir)
}

pub fn cmd_ablate(config_path: Option<&Path>, overrides: &Overrides) -> i32 {
    match ablate_inner(config_path, overrides) {
        Ok(dir) => {
            info!("wrote {}", dir.join(ABLATION_FILE).display());
            EXIT_OK
        }
        Err(e) => report(&e),
    }
}

fn ablate_inner(config_path: Option<&Path>, overrides: &Overrides) -> Result<PathBuf> {
    let cfg = resolve_config(config_path, overrides)?;
    let dir = cfg.output_dir.clone();
    let _lock = DirLock::acquire(&dir)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml())?;
    let data = synthdata::generate(&cfg.synth_spec())?;
    let grid = training::ablation_grid();
    let results = training::run_ablation_suite(&cfg, &data, &grid, true)?;
    write_file(&dir.join(ABLATION_FILE), ablation_csv(&results))?;
    write_file(&dir.join(ABLATION_CELLS_FILE), ablation_cells_csv(&results))?;
    write_file(&dir.join(METRICS_FILE), metrics_csv(&results))?;
    let json = serde_json::to_string_pretty(&results).expect("results serialize");
    write_file(&dir.join(ABLATION_RUNS_FILE), json)?;
    if let Some(r) = results.iter().find(|r| !r.freeze_ok) {
        return Err(Error::Contract(format!(
            "frozen backbone weights changed in variant {}",
            variant_key(r)
        )));
    }
    Ok(dir)
}

pub fn cmd_analyze(checkpoint: &Path, axes: &[Axis], out: Option<&Path>) -> i32 {
    match analyze_inner(checkpoint, axes, out) {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e),
    }
}

fn analyze_inner(checkpoint: &Path, axes: &[Axis], out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.restore_model()?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let data = synthdata::generate(&ck.config.synth_spec())?;
    let variant = ck.config.train.mode.to_string();
    for &axis in axes {
        let m = analysis::utilization(&model, &data.test, axis)?;
        analysis::export_heatmap_data(&m, &dir.join(heatmap_file(axis)))?;
        let s = analysis::smoothness(&m)?;
        let rec = SmoothnessRecord::new(variant.clone(), axis, s);
        let json = serde_json::to_string_pretty(&rec).expect("record serializes");
        write_file(&dir.join(smoothness_file(axis)), json)?;
        info!(
            "{axis} gate: variance {:.5}, entropy {:.5}, max-min {:.5}",
            s.variance, s.entropy, s.max_min
        );
    }
    Ok(())
}

pub fn cmd_gradcheck(config_path: Option<&Path>) -> i32 {
    cmd_gradcheck_with(config_path, &GradcheckSettings::default())
}

pub fn cmd_gradcheck_with(config_path: Option<&Path>, settings: &GradcheckSettings) -> i32 {
    let base = match resolve_config(config_path, &Overrides::default()) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let started = std::time::Instant::now();
    let rep = match gradcheck::model_gradcheck(&base, settings) {
        Ok(r) => r,
        Err(e) => return report(&e),
    };
    let worst = rep.worst();
    let worst_desc = worst.map_or("none".to_string(), |w| {
        format!("{} (mode {}, seed {})", w.name, w.mode, w.seed)
    });
    println!(
        "gradcheck: {} tensors, max relative error {:.3e} at {worst_desc}, tolerance {:.0e}, {:.2}s",
        rep.checks.len(),
        rep.max_relative_error(),
        gradcheck::TOLERANCE,
        started.elapsed().as_secs_f64()
    );
    if rep.passed() {
        EXIT_OK
    } else {
        eprintln!("gradcheck failed: worst tensor {worst_desc}");
        EXIT_FAILURE
    }
}
