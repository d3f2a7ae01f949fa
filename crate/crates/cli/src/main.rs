use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ltd_lab::budget::{lr_at, saving_fraction, LayerTokenLedger, LrAxis};
use ltd_lab::model::{BypassConfig, ModelError, TransformerConfig};
use ltd_lab::schedule::{DropSchedule, ScheduleConfig};
use ltd_lab::trainer::{
    experiment_compare, experiment_dropout_interplay, experiment_layer_sensitivity, read_metrics_csv, train,
    write_metrics_csv, CompareCell, DataConfig, LrSettings, Method, OptimConfig, RunSettings, TrainConfig, TrainError,
};

const DEFAULT_OUT: &str = "runs";

#[derive(Parser)]
#[command(name = "ltd-lab", version, about = "Random layerwise token dropping lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-iteration kept length and LayerToken consumption.
    Plan(Common),
    /// Total LayerTokens and savings of a schedule.
    Budget(Common),
    /// Learning rate on the iteration and LayerToken axes.
    LrCurve(Common),
    /// Train one model.
    Train(Common),
    /// Train every `[[experiment.cells]]` entry under every seed.
    Compare(Common),
    /// Drop tokens in one layer at a time.
    SweepLayer(Common),
    /// Baseline and random-LTD, each with and without dropout.
    DropoutGrid(Common),
    /// Summarize the metric logs of a run directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    /// Output root; beats `LTD_LAB_OUT`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: TransformerConfig,
    train: RunSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lr: Option<LrSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bypass: Option<BypassConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<DataConfig>,
    #[serde(default)]
    optimizer: OptimConfig,
    #[serde(default)]
    experiment: ExperimentSettings,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSettings {
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default)]
    cells: Vec<CompareCell>,
    /// Kept length for `sweep-layer`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kept: Option<usize>,
    /// Baseline iterations `sweep-layer` trains before its per-layer runs.
    #[serde(default)]
    pretrain_iters: u64,
    /// Dropout rate of the dropout cells in `dropout-grid`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dropout_rate: Option<f64>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings { seeds: default_seeds(), cells: Vec::new(), kept: None, pretrain_iters: 0, dropout_rate: None }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

/// Raised for problems with the configuration rather than the run.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause.is::<ConfigError>()
            || cause.is::<ltd_lab::schedule::ScheduleError>()
            || cause.is::<ltd_lab::budget::BudgetError>()
            || matches!(cause.downcast_ref::<ModelError>(), Some(ModelError::Config(_)))
            || cause.downcast_ref::<TrainError>().is_some_and(TrainError::is_config)
    })
}

impl FileConfig {
    fn load(opts: &Common) -> Result<Self> {
        let text = fs::read_to_string(&opts.config)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", opts.config.display())))?;
        let mut cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| config_err(format!("invalid config {}: {e}", opts.config.display())))?;
        if let Some(iters) = opts.iters {
            cfg.train.total_iters = iters;
            if cfg.train.eval_every > iters {
                cfg.train.eval_every = iters;
            }
        }
        if let Some(method) = opts.method {
            cfg.train.method = method;
        }
        if let Some(seed) = opts.seed {
            cfg.train.seed = seed;
            cfg.model.seed = seed;
            if let Some(s) = cfg.schedule.as_mut() {
                s.seed = seed;
            }
            cfg.experiment.seeds = vec![seed];
        }
        Ok(cfg)
    }

    fn layers(&self) -> usize {
        self.model.layers
    }

    fn iters(&self) -> u64 {
        self.train.total_iters
    }

    fn schedule(&self) -> Result<DropSchedule> {
        let sched = self.schedule.as_ref().ok_or_else(|| config_err("this command needs a [schedule] section"))?;
        Ok(sched.resolve(self.layers())?)
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            model: self.model.clone(),
            schedule: self.schedule.clone(),
            bypass: self.bypass.clone(),
            lr: self.lr.clone().ok_or_else(|| config_err("this command needs an [lr] section"))?,
            train: self.train.clone(),
            data: self.data.clone().ok_or_else(|| config_err("this command needs a [data] section"))?,
            optimizer: self.optimizer.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn seeds(&self) -> Result<&[u64]> {
        if self.experiment.seeds.is_empty() {
            return Err(config_err("[experiment].seeds is empty"));
        }
        Ok(&self.experiment.seeds)
    }

    /// Hex SHA-256 of the command and the effective config.
    fn hash(&self, command: &str) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    status: &'a str,
    outputs: Vec<String>,
    version: &'static str,
    config: &'a FileConfig,
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Output directory of one command invocation, `<root>/<command>-<hash>`.
struct RunDir<'a> {
    command: &'a str,
    cfg: &'a FileConfig,
    hash: String,
    path: PathBuf,
    started: u128,
    outputs: Vec<String>,
}

impl<'a> RunDir<'a> {
    fn create(command: &'a str, cfg: &'a FileConfig, out_dir: Option<&Path>) -> Result<Self> {
        let root = match out_dir {
            Some(dir) => dir.to_path_buf(),
            None => std::env::var_os("LTD_LAB_OUT").map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from),
        };
        let hash = cfg.hash(command);
        let path = root.join(format!("{command}-{}", &hash[..12]));
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunDir { command, cfg, hash, path, started: unix_ms(), outputs: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let file = self.path.join(name);
        fs::write(&file, bytes).with_context(|| format!("writing {}", file.display()))?;
        self.outputs.push(name.to_string());
        Ok(file)
    }

    /// Records files an experiment wrote on its own.
    fn collect_outputs(&mut self) -> Result<()> {
        let mut names: Vec<String> = fs::read_dir(&self.path)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != "manifest.json")
            .collect();
        names.sort();
        self.outputs = names;
        Ok(())
    }

    fn finish(self, status: &str) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.hash,
            started_unix_ms: self.started,
            finished_unix_ms: unix_ms(),
            status,
            outputs: self.outputs,
            version: env!("CARGO_PKG_VERSION"),
            config: self.cfg,
        };
        fs::write(self.path.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(self.path)
    }
}

fn csv_bytes<T: Serialize>(header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow!("{}", e.error()))?)
}

fn plan(opts: &Common) -> Result<()> {
    let cfg = FileConfig::load(opts)?;
    let sched = cfg.schedule()?;
    let ledger = LayerTokenLedger::for_schedule(&sched, cfg.layers(), cfg.iters())?;
    let mut cumulative = 0u128;
    let rows = ledger.per_iter().iter().enumerate().map(|(t, &lt)| {
        cumulative += lt as u128;
        (t, sched.kept_length(t as u64), lt, cumulative as u64)
    });
    let bytes = csv_bytes(&["t", "b_t", "layertokens_this_iter", "cumulative_layertokens"], rows)?;
    let mut run = RunDir::create("plan", &cfg, opts.out_dir.as_deref())?;
    let file = run.write("plan.csv", bytes)?;
    run.finish("ok")?;
    println!("{}", file.display());
    Ok(())
}

#[derive(Serialize)]
struct BudgetSummary {
    per_iter_csv_path: String,
    total: u64,
    baseline_total: u64,
    middle_layer_saving: f64,
    whole_model_saving: f64,
}

fn budget(opts: &Common) -> Result<()> {
    let cfg = FileConfig::load(opts)?;
    let sched = cfg.schedule()?;
    let ledger = LayerTokenLedger::for_schedule(&sched, cfg.layers(), cfg.iters())?;
    let savings = saving_fraction(&sched, cfg.layers(), cfg.iters())?;
    let rows = ledger.per_iter().iter().enumerate().map(|(t, &lt)| (t, lt));
    let bytes = csv_bytes(&["t", "layertokens"], rows)?;
    let mut run = RunDir::create("budget", &cfg, opts.out_dir.as_deref())?;
    let csv_path = run.write("per_iter.csv", bytes)?;
    let summary = BudgetSummary {
        per_iter_csv_path: csv_path.display().to_string(),
        total: u64::try_from(ledger.total())?,
        baseline_total: u64::try_from(ledger.baseline_total())?,
        middle_layer_saving: savings.middle_layer,
        whole_model_saving: savings.whole_model,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    run.write("budget.json", format!("{json}\n"))?;
    run.finish("ok")?;
    println!("{json}");
    Ok(())
}

fn lr_curve(opts: &Common) -> Result<()> {
    let cfg = FileConfig::load(opts)?;
    let settings = cfg.lr.as_ref().ok_or_else(|| config_err("lr-curve needs an [lr] section"))?;
    let (l, t_total) = (cfg.layers(), cfg.iters());
    let ledger = match (&cfg.schedule, cfg.train.method) {
        (Some(_), Method::RandomLtd) => LayerTokenLedger::for_schedule(&cfg.schedule()?, l, t_total)?,
        _ => LayerTokenLedger::baseline(l, cfg.model.seq_len, t_total)?,
    };
    let by_iter = LrSettings { axis: LrAxis::Iteration, ..settings.clone() }.with_total(t_total);
    let by_lt = LrSettings { axis: LrAxis::LayerToken, ..settings.clone() }.with_total(t_total);
    by_iter.validate()?;
    let rows = (0..=t_total)
        .map(|t| Ok((t, lr_at(&by_iter, &ledger, t)?, lr_at(&by_lt, &ledger, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = csv_bytes(&["t", "lr_iteration_axis", "lr_layertoken_axis"], rows)?;
    let mut run = RunDir::create("lr-curve", &cfg, opts.out_dir.as_deref())?;
    let file = run.write("lr_curve.csv", bytes)?;
    run.finish("ok")?;
    println!("{}", file.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    method: Method,
    iterations: u64,
    final_eval_loss: f64,
    best_eval_loss: f64,
    layertokens: u64,
    whole_model_saving: f64,
}

fn train_cmd(opts: &Common) -> Result<()> {
    let cfg = FileConfig::load(opts)?;
    let tc = cfg.train_config()?;
    let mut run = RunDir::create("train", &cfg, opts.out_dir.as_deref())?;
    match train(&tc) {
        Ok(result) => {
            run.write("metrics.csv", result.metrics_csv())?;
            result.model.save(&run.path.join("checkpoint"))?;
            run.outputs.push("checkpoint".into());
            let (l, s, t) = (tc.model.layers as f64, tc.model.seq_len as f64, tc.train.total_iters as f64);
            let summary = TrainSummary {
                method: tc.train.method,
                iterations: tc.train.total_iters,
                final_eval_loss: result.final_eval_loss(),
                best_eval_loss: result.best_eval_loss(),
                layertokens: u64::try_from(result.layertokens)?,
                whole_model_saving: 1.0 - result.layertokens as f64 / (l * s * t),
            };
            let json = serde_json::to_string_pretty(&summary)?;
            run.write("summary.json", format!("{json}\n"))?;
            let dir = run.finish("ok")?;
            println!("{}", dir.display());
            Ok(())
        }
        Err(TrainError::Diverged { iter, reason, records }) => {
            let mut bytes = Vec::new();
            write_metrics_csv(&records, &mut bytes)?;
            run.write("metrics.csv", bytes)?;
            run.finish("diverged")?;
            bail!("training diverged at iteration {iter}: {reason}")
        }
        Err(e) => Err(e.into()),
    }
}

fn experiment(opts: &Common, command: &str) -> Result<()> {
    let cfg = FileConfig::load(opts)?;
    let tc = cfg.train_config()?;
    let seeds = cfg.seeds()?.to_vec();
    let mut run = RunDir::create(command, &cfg, opts.out_dir.as_deref())?;
    let out = Some(run.path.as_path());
    match command {
        "compare" => {
            if cfg.experiment.cells.is_empty() {
                return Err(config_err("compare needs at least one [[experiment.cells]] entry"));
            }
            for cell in &cfg.experiment.cells {
                let mut probe = tc.clone();
                probe.train.method = cell.method;
                probe.schedule = cell.schedule.clone().or(probe.schedule);
                probe.bypass = cell.bypass.clone().or(probe.bypass);
                probe.validate().with_context(|| format!("cell {}", cell.name))?;
            }
            experiment_compare(&tc, &cfg.experiment.cells, &seeds, out)?;
        }
        "sweep-layer" => {
            let kept = cfg.experiment.kept.ok_or_else(|| config_err("sweep-layer needs [experiment].kept"))?;
            if kept == 0 || kept > tc.model.seq_len {
                return Err(config_err(format!("[experiment].kept {kept} outside 1..={}", tc.model.seq_len)));
            }
            experiment_layer_sensitivity(&tc, kept, cfg.experiment.pretrain_iters, &seeds, out)?;
        }
        "dropout-grid" => {
            let rate =
                cfg.experiment.dropout_rate.ok_or_else(|| config_err("dropout-grid needs [experiment].dropout_rate"))?;
            if !(rate > 0.0 && rate < 1.0) {
                return Err(config_err(format!("[experiment].dropout_rate {rate} outside (0, 1)")));
            }
            experiment_dropout_interplay(&tc, rate, &seeds, out)?;
        }
        _ => unreachable!("unknown experiment {command}"),
    }
    run.collect_outputs()?;
    let dir = run.finish("ok")?;
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct LogSummary {
    file: String,
    records: usize,
    iterations: u64,
    layertokens: u64,
    final_eval_loss: f64,
    best_eval_loss: f64,
    final_ppl: f64,
}

fn report(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(config_err(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    let mut logs = Vec::new();
    for path in files {
        let Ok(records) = read_metrics_csv(fs::File::open(&path)?) else { continue };
        let Some(last) = records.last() else { continue };
        logs.push(LogSummary {
            file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            records: records.len(),
            iterations: last.iter,
            layertokens: last.layertokens,
            final_eval_loss: last.eval_loss,
            best_eval_loss: records.iter().map(|r| r.eval_loss).fold(f64::INFINITY, f64::min),
            final_ppl: last.ppl,
        });
    }
    if logs.is_empty() {
        bail!("no metric logs in {}", dir.display());
    }
    println!("{}", serde_json::to_string_pretty(&logs)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Plan(o) => plan(o),
        Command::Budget(o) => budget(o),
        Command::LrCurve(o) => lr_curve(o),
        Command::Train(o) => train_cmd(o),
        Command::Compare(o) => experiment(o, "compare"),
        Command::SweepLayer(o) => experiment(o, "sweep-layer"),
        Command::DropoutGrid(o) => experiment(o, "dropout-grid"),
        Command::Report { dir } => report(dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_config_error(&err) { 1 } else { 2 })
        }
    }
}
