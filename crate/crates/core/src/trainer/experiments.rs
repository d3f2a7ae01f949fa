//! Ablation recipes. Each writes one metric CSV per run plus a JSON summary
//! when given an output directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{make_corpus, Corpus};
use super::train::{train_from, train_on, Method, TrainConfig, TrainRun};
use super::TrainError;
use crate::budget::sum_kept_lengths;
use crate::model::BypassConfig;
use crate::schedule::{DropMode, DropSchedule, ExemptLayers, ScheduleConfig};

/// One arm of a comparison: a method with its routing settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareCell {
    pub name: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bypass: Option<BypassConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub name: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub final_eval_loss: Vec<f64>,
    pub mean_final_eval_loss: f64,
    /// LayerTokens of the first seed's run, per sequence.
    pub layertokens: u64,
    /// `1 - layertokens / (l s T)`.
    pub whole_model_saving: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub iterations: u64,
    pub cells: Vec<CellSummary>,
}

impl CompareReport {
    pub fn cell(&self, name: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.name == name)
    }
}

fn corpus_for(cfg: &TrainConfig) -> Result<Corpus, TrainError> {
    make_corpus(cfg.data.kind, cfg.data.seed, cfg.data.size, cfg.model.seq_len)
}

fn write_run(out: Option<&Path>, name: &str, run: &TrainRun) -> Result<(), TrainError> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{name}.csv")), run.metrics_csv())?;
    }
    Ok(())
}

fn write_json<T: Serialize>(out: Option<&Path>, file: &str, value: &T) -> Result<(), TrainError> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(file), serde_json::to_string_pretty(value)? + "\n")?;
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Constant schedule whose total kept tokens over `iters` iterations match
/// `sched` as closely as an integer kept length allows.
pub fn matched_constant(sched: &ScheduleConfig, layers: usize, iters: u64) -> Result<ScheduleConfig, TrainError> {
    let resolved: DropSchedule = sched.resolve(layers)?;
    let kept = (sum_kept_lengths(&resolved, iters) as f64 / iters as f64).round() as usize;
    Ok(ScheduleConfig { b0: kept.clamp(1, sched.s), mode: DropMode::Constant, ..sched.clone() })
}

/// Trains every cell under every seed at equal iteration counts.
///
/// Per-run logs go to `<cell>_seed<seed>.csv`; `curves.csv` stacks them
/// with cell and seed columns and `report.json` holds the summary.
pub fn experiment_compare(
    base: &TrainConfig,
    cells: &[CompareCell],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<CompareReport, TrainError> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config("compare needs at least one cell and one seed".into()));
    }
    let corpus = corpus_for(base)?;
    let (l, s, t) = (base.model.layers, base.model.seq_len, base.train.total_iters);
    let mut summaries = Vec::new();
    let mut curves = csv::Writer::from_writer(Vec::new());
    curves.write_record(["cell", "seed", "iter", "layertokens", "train_loss", "eval_loss"])?;
    for cell in cells {
        let mut cfg = base.clone();
        cfg.train.method = cell.method;
        cfg.schedule = cell.schedule.clone().or(cfg.schedule);
        cfg.bypass = cell.bypass.clone().or(cfg.bypass);
        let mut finals = Vec::new();
        let mut layertokens = None;
        for &seed in seeds {
            let run = train_on(&cfg.with_seed(seed), &corpus)?;
            write_run(out, &format!("{}_seed{seed}", cell.name), &run)?;
            for r in &run.records {
                curves.serialize((&cell.name, seed, r.iter, r.layertokens, r.train_loss, r.eval_loss))?;
            }
            finals.push(run.final_eval_loss());
            layertokens.get_or_insert(run.layertokens as u64);
        }
        let layertokens = layertokens.expect("at least one seed");
        summaries.push(CellSummary {
            name: cell.name.clone(),
            method: cell.method,
            seeds: seeds.to_vec(),
            mean_final_eval_loss: mean(&finals),
            final_eval_loss: finals,
            layertokens,
            whole_model_saving: 1.0 - layertokens as f64 / (l as u64 * s as u64 * t) as f64,
        });
    }
    let report = CompareReport { iterations: t, cells: summaries };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("curves.csv"), curves.into_inner().map_err(|e| e.into_error())?)?;
    }
    write_json(out, "report.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub kept: usize,
    /// Baseline iterations before the per-layer runs; 0 trains from scratch.
    pub pretrain_iters: u64,
    pub seeds: Vec<u64>,
    /// Mean final eval loss with no layer dropped.
    pub no_drop: f64,
    /// Mean final eval loss with only layer `i` dropping, indexed by `i`.
    pub per_layer: Vec<f64>,
}

impl SensitivityReport {
    /// True when the first and last layers give the two highest losses.
    pub fn endpoints_worst(&self) -> bool {
        let n = self.per_layer.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.per_layer[b].total_cmp(&self.per_layer[a]));
        n >= 3 && order[..2].iter().copied().collect::<BTreeSet<_>>() == BTreeSet::from([0, n - 1])
    }
}

/// Single-layer sensitivity sweep.
///
/// For each seed, a baseline model is first trained for `pretrain_iters`
/// iterations (skipped when 0). Every cell then trains `base.train.total_iters`
/// further iterations from that model: one cell with no dropping and one per
/// layer `i` where only layer `i` keeps `kept` tokens. Writes per-run logs,
/// `sensitivity.csv` (layer, seed, eval_loss) and `report.json`.
pub fn experiment_layer_sensitivity(
    base: &TrainConfig,
    kept: usize,
    pretrain_iters: u64,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<SensitivityReport, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("sweep needs at least one seed".into()));
    }
    let corpus = corpus_for(base)?;
    let (l, s) = (base.model.layers, base.model.seq_len);
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["layer", "seed", "eval_loss"])?;

    let mut baseline = base.clone();
    baseline.train.method = Method::Baseline;
    let mut starts = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        if pretrain_iters == 0 {
            starts.push(None);
            continue;
        }
        let mut pre = baseline.with_seed(seed);
        pre.train.total_iters = pretrain_iters;
        pre.train.eval_every = pretrain_iters;
        let run = train_on(&pre, &corpus)?;
        write_run(out, &format!("pretrain_seed{seed}"), &run)?;
        starts.push(Some(run.model));
    }

    let mut no_drop = Vec::new();
    for (&seed, start) in seeds.iter().zip(&starts) {
        let run = train_from(&baseline.with_seed(seed), &corpus, start.as_ref())?;
        write_run(out, &format!("none_seed{seed}"), &run)?;
        table.serialize(("none", seed, run.final_eval_loss()))?;
        no_drop.push(run.final_eval_loss());
    }

    let mut per_layer = Vec::with_capacity(l);
    for layer in 0..l {
        let mut cfg = base.clone();
        cfg.train.method = Method::RandomLtd;
        cfg.schedule = Some(ScheduleConfig {
            s,
            b0: kept,
            s_dec: 1,
            t_full: 1,
            mode: DropMode::Constant,
            exempt_layers: ExemptLayers::Explicit((0..l).filter(|&i| i != layer).collect()),
            keep_special: false,
            seed: 0,
        });
        let mut losses = Vec::new();
        for (&seed, start) in seeds.iter().zip(&starts) {
            let run = train_from(&cfg.with_seed(seed), &corpus, start.as_ref())?;
            write_run(out, &format!("layer{layer}_seed{seed}"), &run)?;
            table.serialize((layer.to_string(), seed, run.final_eval_loss()))?;
            losses.push(run.final_eval_loss());
        }
        per_layer.push(mean(&losses));
    }
    let report = SensitivityReport { kept, pretrain_iters, seeds: seeds.to_vec(), no_drop: mean(&no_drop), per_layer };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sensitivity.csv"), table.into_inner().map_err(|e| e.into_error())?)?;
    }
    write_json(out, "report.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutCell {
    pub name: String,
    pub method: Method,
    pub dropout_rate: f64,
    pub final_eval_loss: f64,
    pub best_eval_loss: f64,
    /// `final - best`, averaged over seeds.
    pub overfit_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutReport {
    pub cells: Vec<DropoutCell>,
}

impl DropoutReport {
    pub fn cell(&self, name: &str) -> Option<&DropoutCell> {
        self.cells.iter().find(|c| c.name == name)
    }
}

/// {baseline, random-LTD} x {dropout at `rate`, no dropout} on the corpus
/// of `base`, reporting how far each final eval loss sits above its best.
/// `base.schedule` drives the random-LTD cells.
pub fn experiment_dropout_interplay(
    base: &TrainConfig,
    rate: f64,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<DropoutReport, TrainError> {
    if base.schedule.is_none() {
        return Err(TrainError::Config("dropout grid needs a [schedule] for its random-LTD cells".into()));
    }
    let corpus = corpus_for(base)?;
    let mut cells = Vec::new();
    for method in [Method::Baseline, Method::RandomLtd] {
        for dropout in [rate, 0.0] {
            let tag = if method == Method::Baseline { "baseline" } else { "random_ltd" };
            let name = format!("{tag}_{}", if dropout > 0.0 { "dropout" } else { "no_dropout" });
            let mut cfg = base.clone();
            cfg.train.method = method;
            cfg.model.dropout_rate = dropout;
            let (mut finals, mut bests) = (Vec::new(), Vec::new());
            for &seed in seeds {
                let run = train_on(&cfg.with_seed(seed), &corpus)?;
                write_run(out, &format!("{name}_seed{seed}"), &run)?;
                finals.push(run.final_eval_loss());
                bests.push(run.best_eval_loss());
            }
            let gaps: Vec<f64> = finals.iter().zip(&bests).map(|(f, b)| f - b).collect();
            cells.push(DropoutCell {
                name,
                method,
                dropout_rate: dropout,
                final_eval_loss: mean(&finals),
                best_eval_loss: mean(&bests),
                overfit_gap: mean(&gaps),
            });
        }
    }
    let report = DropoutReport { cells };
    write_json(out, "report.json", &report)?;
    Ok(report)
}
