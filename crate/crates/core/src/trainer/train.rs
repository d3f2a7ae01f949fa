use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::corpus::{make_corpus, Corpus, CorpusKind};
use super::optim::{AdamW, OptimConfig};
use super::TrainError;
use crate::budget::{lr_at, Decay, LayerTokenLedger, LrAxis, LrConfig};
use crate::model::{
    lm_targets, select_bypass, BypassConfig, BypassMetric, MaskPlan, Phase, Routing, TokenBatch, TokenLossEma,
    Transformer, TransformerConfig,
};
use crate::nn::{Graph, NnError, Scalar};
use crate::rng::{Domain, StreamRng};
use crate::schedule::{DropSchedule, ScheduleConfig};

/// Fraction of positions masked by the masked-LM objective.
pub const MLM_RATE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    RandomLtd,
    #[serde(rename = "tokenbypass")]
    TokenBypass,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "random_ltd" | "random-ltd" => Ok(Method::RandomLtd),
            "tokenbypass" => Ok(Method::TokenBypass),
            _ => Err(format!("unknown method {s:?} (baseline, random_ltd, tokenbypass)")),
        }
    }
}

/// `[lr]` section; the horizon comes from `[train].total_iters`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSettings {
    pub lr_max: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default)]
    pub warmup_iters: u64,
    #[serde(default = "cosine")]
    pub decay: Decay,
    #[serde(default = "layertoken")]
    pub axis: LrAxis,
}

fn cosine() -> Decay {
    Decay::Cosine
}

fn layertoken() -> LrAxis {
    LrAxis::LayerToken
}

impl LrSettings {
    pub fn with_total(&self, total_iters: u64) -> LrConfig {
        LrConfig {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total_iters,
            warmup_iters: self.warmup_iters,
            decay: self.decay,
            axis: self.axis,
        }
    }
}

/// `[train]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub method: Method,
    pub batch_size: usize,
    pub total_iters: u64,
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
}

/// `[data]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: CorpusKind,
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: TransformerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bypass: Option<BypassConfig>,
    pub lr: LrSettings,
    pub train: RunSettings,
    pub data: DataConfig,
    #[serde(default)]
    pub optimizer: OptimConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.model.validate()?;
        let run = &self.train;
        if run.batch_size == 0 || run.total_iters == 0 {
            return bad("batch_size and total_iters must be positive".into());
        }
        if run.eval_every == 0 || run.total_iters % run.eval_every != 0 {
            return bad(format!("eval_every {} must divide total_iters {}", run.eval_every, run.total_iters));
        }
        self.lr_config().validate()?;
        self.optimizer.validate().map_err(TrainError::Config)?;
        let needed = self.data.kind.vocab() + usize::from(!self.model.causal);
        if self.model.vocab < needed {
            return bad(format!(
                "model vocab {} is smaller than the {needed} ids the {:?} corpus needs",
                self.model.vocab, self.data.kind
            ));
        }
        if let Some(sched) = &self.schedule {
            if sched.s != self.model.seq_len {
                return bad(format!("schedule s={} differs from model s={}", sched.s, self.model.seq_len));
            }
        }
        match run.method {
            Method::RandomLtd if self.schedule.is_none() => return bad("random_ltd needs a [schedule] section".into()),
            Method::TokenBypass => match &self.bypass {
                None => return bad("tokenbypass needs a [bypass] section".into()),
                Some(b) => b.validate(self.model.layers)?,
            },
            _ => {}
        }
        let ledger = self.ledger()?;
        if self.lr.axis == LrAxis::LayerToken {
            let target = (self.model.layers * self.model.seq_len) as u128 * self.lr.warmup_iters as u128;
            if ledger.total() < target {
                return Err(crate::budget::BudgetError::WarmupUnreachable { target, available: ledger.total() }.into());
            }
        }
        Ok(())
    }

    pub fn lr_config(&self) -> LrConfig {
        self.lr.with_total(self.train.total_iters)
    }

    /// The drop schedule used by random-LTD runs.
    pub fn drop_schedule(&self) -> Result<Option<DropSchedule>, TrainError> {
        match (&self.schedule, self.train.method) {
            (Some(s), Method::RandomLtd) => Ok(Some(s.resolve(self.model.layers)?)),
            _ => Ok(None),
        }
    }

    /// LayerTokens the configured routing consumes at each iteration.
    pub fn ledger(&self) -> Result<LayerTokenLedger, TrainError> {
        let (l, s, t) = (self.model.layers, self.model.seq_len, self.train.total_iters);
        Ok(match self.train.method {
            Method::Baseline => LayerTokenLedger::baseline(l, s, t)?,
            Method::RandomLtd => {
                let sched = self.drop_schedule()?.ok_or_else(|| TrainError::Config("missing schedule".into()))?;
                LayerTokenLedger::for_schedule(&sched, l, t)?
            }
            Method::TokenBypass => {
                let b = self.bypass.as_ref().ok_or_else(|| TrainError::Config("missing bypass".into()))?;
                LayerTokenLedger::for_bypass(l, s, b.span(), b.kept_len(s), t)?
            }
        })
    }

    /// Copy with every seed (run, model init, drop plans) set to `seed`.
    /// The corpus keeps its own seed.
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        let mut cfg = self.clone();
        cfg.train.seed = seed;
        cfg.model.seed = seed;
        if let Some(s) = cfg.schedule.as_mut() {
            s.seed = seed;
        }
        cfg
    }
}

/// One row of a metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Iterations completed.
    pub iter: u64,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub ppl: f64,
    /// Cumulative LayerTokens consumed, per sequence.
    pub layertokens: u64,
    /// Kept length of the last iteration (full length for baseline).
    pub b_t: usize,
    pub lr: f64,
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(["iter", "train_loss", "eval_loss", "ppl", "layertokens", "b_t", "lr"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRecord>, TrainError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub struct TrainRun {
    pub records: Vec<MetricsRecord>,
    pub model: Transformer<f32>,
    pub layertokens: u128,
}

impl TrainRun {
    pub fn final_eval_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.eval_loss)
    }

    pub fn best_eval_loss(&self) -> f64 {
        self.records.iter().map(|r| r.eval_loss).fold(f64::INFINITY, f64::min)
    }

    pub fn metrics_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_metrics_csv(&self.records, &mut buf).expect("writing to memory");
        buf
    }
}

/// Builds the corpus named in `cfg` and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    let corpus = make_corpus(cfg.data.kind, cfg.data.seed, cfg.data.size, cfg.model.seq_len)?;
    train_on(cfg, &corpus)
}

/// `batch_size` windows of `seq_len` tokens at offsets drawn from
/// `(seed, step)`.
pub fn sample_batch(data: &[usize], batch_size: usize, seq_len: usize, seed: u64, step: u64) -> TokenBatch {
    let mut rng = StreamRng::new(seed, Domain::Batch, &[step]);
    let span = (data.len() - seq_len + 1) as u64;
    let ids = (0..batch_size)
        .flat_map(|_| {
            let o = rng.below(span) as usize;
            data[o..o + seq_len].iter().copied()
        })
        .collect();
    TokenBatch { seqs: batch_size, seq_len, ids }
}

/// Trains a fresh model on `corpus` for `cfg.train.total_iters` steps.
///
/// Every random draw is keyed by `(seed, step)`, so a run is a pure function
/// of its config and corpus. Causal models train on next-token prediction;
/// bidirectional ones on masked-LM with id `vocab - 1` as the mask token.
pub fn train_on(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainRun, TrainError> {
    train_from(cfg, corpus, None)
}

/// [`train_on`] starting from the parameters of `init` instead of a fresh
/// initialization. `init` must have been built from `cfg.model`. Optimizer
/// state starts empty.
pub fn train_from(cfg: &TrainConfig, corpus: &Corpus, init: Option<&Transformer<f32>>) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    let (l, s) = (cfg.model.layers, cfg.model.seq_len);
    if corpus.train.len() < s || corpus.valid.len() < s {
        return Err(TrainError::Config(format!("corpus splits are shorter than s={s}")));
    }
    let run = &cfg.train;
    let sched = cfg.drop_schedule()?;
    let special: Vec<usize> = match &sched {
        Some(sc) if sc.keep_special() => vec![0],
        _ => Vec::new(),
    };
    let ledger = cfg.ledger()?;
    let lr_cfg = cfg.lr_config();
    let mut model = match init {
        Some(m) if m.config() != &cfg.model => {
            return Err(TrainError::Config("initial model was built from a different [model] section".into()))
        }
        Some(m) => m.clone(),
        None => Transformer::<f32>::new(cfg.model.clone())?,
    };
    let mut opt = AdamW::new(cfg.optimizer.clone(), model.params());
    let ema_decay = cfg.bypass.as_ref().map_or(0.9, |b| b.ema_decay);
    let mut ema = TokenLossEma::new(cfg.model.vocab, ema_decay);
    let uses_ema =
        run.method == Method::TokenBypass && cfg.bypass.as_ref().is_some_and(|b| b.metric == BypassMetric::LossEma);
    let mask_id = cfg.model.vocab - 1;

    let mut records = Vec::new();
    let mut consumed = 0u128;
    let (mut loss_sum, mut loss_n) = (0.0f64, 0u64);
    for t in 0..run.total_iters {
        let diverged = |reason: String, records: &Vec<MetricsRecord>| TrainError::Diverged {
            iter: t,
            reason,
            records: records.clone(),
        };
        let batch = sample_batch(&corpus.train, run.batch_size, s, run.seed, t);
        let (inputs, targets) = if cfg.model.causal {
            let targets = lm_targets(&batch);
            (batch.clone(), targets)
        } else {
            let mut rng = StreamRng::new(run.seed, Domain::Mask, &[t]);
            let mut mask = MaskPlan::sample(&batch, MLM_RATE, mask_id, &mut rng);
            if mask.count() == 0 {
                mask.masked[0] = true;
                mask.inputs.ids[0] = mask_id;
            }
            let targets = crate::model::mlm_targets(&batch, &mask);
            (mask.inputs, targets)
        };

        let plans;
        let selection;
        let (routing, b_t) = match run.method {
            Method::Baseline => (Routing::Baseline, s),
            Method::RandomLtd => {
                let sc = sched.as_ref().expect("validated");
                plans = sc.plan_iteration(t, l, &special)?;
                (Routing::RandomLtd(&plans), sc.kept_length(t))
            }
            Method::TokenBypass => {
                let b = cfg.bypass.as_ref().expect("validated");
                selection = select_bypass(b, &inputs, &ema, run.seed, t);
                (Routing::TokenBypass { cfg: b, selection: &selection }, b.kept_len(s))
            }
        };

        let mut g = Graph::<f32>::new();
        let step = (|| -> Result<_, TrainError> {
            let fp = model.forward(&mut g, &inputs, routing, Phase::Train { step: t })?;
            let loss = g.cross_entropy(fp.logits, &targets)?;
            Ok((fp, loss))
        })();
        let (fp, loss) = match step {
            Ok(v) => v,
            Err(TrainError::Model(crate::model::ModelError::Nn(NnError::NonFinite(site))) | TrainError::Nn(NnError::NonFinite(site))) => {
                return Err(diverged(format!("non-finite values in {site}"), &records))
            }
            Err(e) => return Err(e),
        };
        let loss_val = g.value(loss).data()[0] as f64;
        if uses_ema {
            let rows = g.row_losses(loss).expect("cross-entropy node");
            let (ids, losses): (Vec<usize>, Vec<f64>) = targets
                .iter()
                .enumerate()
                .filter(|(_, tg)| tg.is_some())
                .map(|(i, _)| (batch.ids[i], rows[i] as f64))
                .unzip();
            ema.update(&ids, &losses)?;
        }
        let grads = match g.backward(loss) {
            Ok(gr) => gr,
            Err(NnError::NonFinite(site)) => return Err(diverged(format!("non-finite gradient in {site}"), &records)),
            Err(e) => return Err(e.into()),
        };
        let slots: Vec<Option<&[f32]>> = fp.params.iter().map(|&v| grads.get(v)).collect();
        let lr = lr_at(&lr_cfg, &ledger, t)?;
        let norm = opt.step(model.params_mut(), &slots, lr);
        if !norm.is_finite() {
            return Err(diverged(format!("gradient norm {norm}"), &records));
        }

        consumed += fp.layertokens as u128;
        loss_sum += loss_val;
        loss_n += 1;
        if (t + 1) % run.eval_every == 0 {
            let eval_loss = evaluate(&model, &corpus.valid)?;
            if !eval_loss.is_finite() {
                return Err(diverged(format!("eval loss {eval_loss}"), &records));
            }
            records.push(MetricsRecord {
                iter: t + 1,
                train_loss: loss_sum / loss_n as f64,
                eval_loss,
                ppl: eval_loss.exp(),
                layertokens: consumed as u64,
                b_t,
                lr,
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    Ok(TrainRun { records, model, layertokens: consumed })
}

const EVAL_BATCH: usize = 16;

/// Mean token loss over consecutive non-overlapping windows of `data`,
/// full length, no dropout, no random draws. Bidirectional models are scored
/// on a fixed mask of every seventh position.
pub fn evaluate<F: Scalar>(model: &Transformer<F>, data: &[usize]) -> Result<f64, TrainError> {
    let cfg = model.config();
    let s = cfg.seq_len;
    let windows = data.len() / s;
    if windows == 0 {
        return Err(TrainError::EmptyData);
    }
    let mask_id = cfg.vocab - 1;
    let (mut total, mut count) = (0.0f64, 0usize);
    for start in (0..windows).step_by(EVAL_BATCH) {
        let n = EVAL_BATCH.min(windows - start);
        let batch = TokenBatch { seqs: n, seq_len: s, ids: data[start * s..(start + n) * s].to_vec() };
        let (inputs, targets) = if cfg.causal {
            (batch.clone(), lm_targets(&batch))
        } else {
            let mut inputs = batch.clone();
            let mut targets = vec![None; batch.ids.len()];
            for i in (0..batch.ids.len()).filter(|i| i % s % 7 == 3) {
                inputs.ids[i] = mask_id;
                targets[i] = Some(batch.ids[i]);
            }
            (inputs, targets)
        };
        let mut g = Graph::new();
        let fp = model.forward(&mut g, &inputs, Routing::Baseline, Phase::Eval)?;
        let loss = g.cross_entropy(fp.logits, &targets)?;
        let rows = g.row_losses(loss).expect("cross-entropy node");
        for (i, tg) in targets.iter().enumerate() {
            if tg.is_some() {
                total += rows[i].to_f64().unwrap_or(f64::NAN);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
