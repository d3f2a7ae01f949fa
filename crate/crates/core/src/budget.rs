//! LayerToken accounting and the LayerToken learning-rate schedule.
//!
//! One LayerToken is one token processed by one transformer layer. With the
//! first and last layers at full length and `l - 2` middle layers keeping
//! `b_t` tokens, iteration `t` costs `2s + (l - 2) b_t`. The final prediction
//! layer and attention-length effects are not counted.

use serde::{Deserialize, Serialize};

use crate::schedule::{DropMode, DropSchedule, ScheduleError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BudgetError {
    #[error("invalid budget input: {0}")]
    Invalid(String),
    #[error("warmup target of {target} LayerTokens is never reached; the whole run consumes {available}")]
    WarmupUnreachable { target: u128, available: u128 },
    #[error("iteration {t} is past the end of a {total}-iteration run")]
    IterationOutOfRange { t: u64, total: u64 },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// LayerTokens of one iteration with `l - 2` dropping middle layers.
pub fn layertokens_per_iter(layers: usize, seq_len: usize, kept: usize) -> Result<u64, BudgetError> {
    if layers < 2 {
        return Err(BudgetError::Invalid(format!("need at least 2 layers, got {layers}")));
    }
    if kept == 0 || kept > seq_len {
        return Err(BudgetError::Invalid(format!("kept length {kept} outside [1, {seq_len}]")));
    }
    Ok((2 * seq_len + (layers - 2) * kept) as u64)
}

fn layer_split(sched: &DropSchedule, layers: usize) -> Result<(u64, u64), BudgetError> {
    if layers < 2 {
        return Err(BudgetError::Invalid(format!("need at least 2 layers, got {layers}")));
    }
    if let Some(&layer) = sched.exempt_layers().iter().find(|&&l| l >= layers) {
        return Err(ScheduleError::LayerOutOfRange { layer, layers }.into());
    }
    let exempt = sched.exempt_layers().len() as u64;
    Ok((exempt, layers as u64 - exempt))
}

/// `sum_{t < iters} b_t`, summed stage by stage rather than per iteration.
pub fn sum_kept_lengths(sched: &DropSchedule, iters: u64) -> u128 {
    let s = sched.seq_len() as u128;
    let steps = sched.growth_steps() as u128;
    if sched.mode() == DropMode::Constant {
        return sched.initial_kept() as u128 * iters as u128;
    }
    if steps == 0 {
        return s * iters as u128;
    }
    let t_full = sched.full_length_iter() as u128;
    let horizon = (iters as u128).min(t_full);
    let mut total = 0u128;
    for k in 0..steps {
        // stage k covers t with floor(t * steps / t_full) == k
        let start = (k * t_full).div_ceil(steps);
        let end = ((k + 1) * t_full).div_ceil(steps).min(horizon);
        if start >= end {
            if start >= horizon {
                break;
            }
            continue;
        }
        let kept = (sched.initial_kept() as u128 + k * sched.growth_step() as u128).min(s);
        total += kept * (end - start);
    }
    total + s * (iters as u128).saturating_sub(t_full)
}

/// Total LayerTokens consumed by the first `iters` iterations.
pub fn cumulative_layertokens(sched: &DropSchedule, layers: usize, iters: u64) -> Result<u128, BudgetError> {
    let (exempt, dropping) = layer_split(sched, layers)?;
    let s = sched.seq_len() as u128;
    Ok(exempt as u128 * s * iters as u128 + dropping as u128 * sum_kept_lengths(sched, iters))
}

/// Saved share of LayerTokens relative to full-length training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    /// `1 - sum(b_t) / (s T)`: saving inside the dropping layers.
    pub middle_layer: f64,
    /// `1 - cumulative / (l s T)`: saving over the whole stack.
    pub whole_model: f64,
}

pub fn saving_fraction(sched: &DropSchedule, layers: usize, iters: u64) -> Result<Savings, BudgetError> {
    if iters == 0 {
        return Err(BudgetError::Invalid("need at least one iteration".into()));
    }
    let s = sched.seq_len() as u128;
    let kept = sum_kept_lengths(sched, iters);
    let cumulative = cumulative_layertokens(sched, layers, iters)?;
    let full = s * iters as u128;
    Ok(Savings {
        middle_layer: 1.0 - kept as f64 / full as f64,
        whole_model: 1.0 - cumulative as f64 / (layers as u128 * full) as f64,
    })
}

/// Per-iteration and running LayerToken totals of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTokenLedger {
    layers: usize,
    seq_len: usize,
    per_iter: Vec<u64>,
    cumulative: Vec<u128>,
}

impl LayerTokenLedger {
    pub fn from_per_iter(layers: usize, seq_len: usize, per_iter: Vec<u64>) -> Result<Self, BudgetError> {
        if layers == 0 || seq_len == 0 {
            return Err(BudgetError::Invalid("empty model".into()));
        }
        if per_iter.iter().any(|&c| c == 0) {
            return Err(BudgetError::Invalid("every iteration must consume LayerTokens".into()));
        }
        let cumulative = per_iter
            .iter()
            .scan(0u128, |acc, &c| {
                *acc += c as u128;
                Some(*acc)
            })
            .collect();
        Ok(LayerTokenLedger { layers, seq_len, per_iter, cumulative })
    }

    pub fn for_schedule(sched: &DropSchedule, layers: usize, iters: u64) -> Result<Self, BudgetError> {
        let (exempt, dropping) = layer_split(sched, layers)?;
        let s = sched.seq_len() as u64;
        let per_iter = (0..iters).map(|t| exempt * s + dropping * sched.kept_length(t) as u64).collect();
        Self::from_per_iter(layers, sched.seq_len(), per_iter)
    }

    pub fn baseline(layers: usize, seq_len: usize, iters: u64) -> Result<Self, BudgetError> {
        Self::from_per_iter(layers, seq_len, vec![(layers * seq_len) as u64; iters as usize])
    }

    /// A span of `span` consecutive layers processing `kept` tokens each
    /// iteration while the other layers run at full length.
    pub fn for_bypass(layers: usize, seq_len: usize, span: usize, kept: usize, iters: u64) -> Result<Self, BudgetError> {
        if span > layers || kept == 0 || kept > seq_len {
            return Err(BudgetError::Invalid(format!("bypass span {span} / kept {kept}")));
        }
        let per = ((layers - span) * seq_len + span * kept) as u64;
        Self::from_per_iter(layers, seq_len, vec![per; iters as usize])
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn iterations(&self) -> u64 {
        self.per_iter.len() as u64
    }

    pub fn per_iter(&self) -> &[u64] {
        &self.per_iter
    }

    /// LayerTokens consumed by iterations `0..t` (`t` may equal the length).
    pub fn consumed_before(&self, t: u64) -> u128 {
        if t == 0 {
            0
        } else {
            self.cumulative[t as usize - 1]
        }
    }

    pub fn total(&self) -> u128 {
        self.cumulative.last().copied().unwrap_or(0)
    }

    pub fn baseline_total(&self) -> u128 {
        (self.layers * self.seq_len) as u128 * self.per_iter.len() as u128
    }

    /// Smallest `x` with `consumed_before(x) >= target`.
    pub fn first_reaching(&self, target: u128) -> Option<u64> {
        if target == 0 {
            return Some(0);
        }
        let idx = self.cumulative.partition_point(|&c| c < target);
        (idx < self.cumulative.len()).then_some(idx as u64 + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Linear,
    Cosine,
}

/// What the warmup/decay progress is measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrAxis {
    Iteration,
    #[serde(rename = "layertoken")]
    LayerToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    pub lr_max: f64,
    #[serde(default)]
    pub lr_min: f64,
    pub total_iters: u64,
    #[serde(default)]
    pub warmup_iters: u64,
    #[serde(default = "default_decay")]
    pub decay: Decay,
    #[serde(default = "default_axis")]
    pub axis: LrAxis,
}

fn default_decay() -> Decay {
    Decay::Cosine
}

fn default_axis() -> LrAxis {
    LrAxis::LayerToken
}

impl LrConfig {
    pub fn validate(&self) -> Result<(), BudgetError> {
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(BudgetError::Invalid(format!(
                "need 0 <= lr_min ({}) <= lr_max ({})",
                self.lr_min, self.lr_max
            )));
        }
        if self.warmup_iters > self.total_iters {
            return Err(BudgetError::Invalid(format!(
                "warmup_iters {} exceeds total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        Ok(())
    }
}

/// Iterations of warmup under the LayerToken axis: the first iteration
/// count whose cumulative LayerTokens reach `s * l * warmup_iters`.
pub fn lt_warmup_iterations(sched: &DropSchedule, layers: usize, cfg: &LrConfig) -> Result<u64, BudgetError> {
    cfg.validate()?;
    let target = (sched.seq_len() * layers) as u128 * cfg.warmup_iters as u128;
    let available = cumulative_layertokens(sched, layers, cfg.total_iters)?;
    if available < target {
        return Err(BudgetError::WarmupUnreachable { target, available });
    }
    // cumulative is non-decreasing in the iteration count
    let (mut lo, mut hi) = (0u64, cfg.total_iters);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if cumulative_layertokens(sched, layers, mid)? >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo)
}

/// Learning rate for iteration `t` in `0..=cfg.total_iters`.
///
/// With consumption `c(t)` (LayerTokens before `t`, or `t l s` on the
/// iteration axis) and `C_w = s l T_warmup`: linear warmup
/// `lr_max * c / C_w` while `c < C_w`, then decay from `lr_max` to `lr_min`
/// with progress `(c - C_w) / (C_total - C_w)`.
pub fn lr_at(cfg: &LrConfig, ledger: &LayerTokenLedger, t: u64) -> Result<f64, BudgetError> {
    cfg.validate()?;
    if t > cfg.total_iters {
        return Err(BudgetError::IterationOutOfRange { t, total: cfg.total_iters });
    }
    let unit = (ledger.layers() * ledger.seq_len()) as u128;
    let (c, c_total) = match cfg.axis {
        LrAxis::Iteration => (t as u128 * unit, cfg.total_iters as u128 * unit),
        LrAxis::LayerToken => {
            if ledger.iterations() < cfg.total_iters {
                return Err(BudgetError::Invalid(format!(
                    "ledger covers {} iterations, schedule needs {}",
                    ledger.iterations(),
                    cfg.total_iters
                )));
            }
            (ledger.consumed_before(t), ledger.consumed_before(cfg.total_iters))
        }
    };
    let c_warm = cfg.warmup_iters as u128 * unit;
    if c < c_warm {
        return Ok(cfg.lr_max * (c as f64 / c_warm as f64));
    }
    let progress = if c_total > c_warm {
        ((c - c_warm) as f64 / (c_total - c_warm) as f64).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let shape = match cfg.decay {
        Decay::Linear => 1.0 - progress,
        Decay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    };
    Ok(cfg.lr_min + (cfg.lr_max - cfg.lr_min) * shape)
}

/// Large-scale configurations whose LayerToken savings the accountant
/// reproduces. Iteration counts use `tokens / (batch * s)`.
pub mod presets {
    use super::*;
    use crate::schedule::tokens_to_iterations;

    #[derive(Clone, Debug)]
    pub struct Preset {
        pub name: &'static str,
        pub schedule: DropSchedule,
        pub layers: usize,
        pub iters: u64,
    }

    /// 24-layer GPT, s=2048, 256 sequences per batch, 300B tokens; 128 kept
    /// tokens growing by 16 every 1.75B tokens, full length after 210B.
    pub fn gpt3_350m() -> Preset {
        let (s, batch) = (2048u64, 256u64);
        let iters = tokens_to_iterations(300_000_000_000, batch, s);
        let t_full = tokens_to_iterations(210_000_000_000, batch, s);
        Preset {
            name: "gpt3-350m",
            schedule: DropSchedule::mslg(2048, 128, 16, t_full, 24, 1234).expect("valid preset"),
            layers: 24,
            iters,
        }
    }

    /// 24-layer BERT, s=512, batch 1024, 2M iterations; kept length starts
    /// at `b0` and grows by 16 every `tokens_per_step` training tokens.
    pub fn bert_large(name: &'static str, b0: usize, tokens_per_step: u64) -> Preset {
        let (s, batch) = (512u64, 1024u64);
        let steps = (512 - b0 as u64).div_ceil(16);
        let t_full = tokens_to_iterations(steps * tokens_per_step, batch, s);
        Preset {
            name,
            schedule: DropSchedule::mslg(512, b0, 16, t_full, 24, 1234).expect("valid preset"),
            layers: 24,
            iters: 2_000_000,
        }
    }

    pub fn bert_large_ltd1() -> Preset {
        bert_large("bert-large-ltd1", 200, 48_000_000_000)
    }

    pub fn bert_large_ltd2() -> Preset {
        bert_large("bert-large-ltd2", 128, 38_000_000_000)
    }

    /// 12-layer ViT on 224px images (196 patches + 1), 14 epochs of 1.28M
    /// images at batch 256; kept length 66 grows linearly to 197 at 80% of
    /// training.
    pub fn vit_imagenet() -> Preset {
        let iters = 1_281_167u64.div_ceil(256) * 14;
        let t_full = iters * 4 / 5;
        Preset {
            name: "vit-imagenet",
            schedule: DropSchedule::mslg(197, 66, 1, t_full, 12, 1234).expect("valid preset"),
            layers: 12,
            iters,
        }
    }

    pub fn all() -> Vec<Preset> {
        vec![gpt3_350m(), bert_large_ltd1(), bert_large_ltd2(), vit_imagenet()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loop_sum(sched: &DropSchedule, layers: usize, iters: u64) -> u128 {
        (0..iters)
            .map(|t| {
                let b = sched.kept_length(t);
                (sched.exempt_layers().len() * sched.seq_len() + (layers - sched.exempt_layers().len()) * b) as u128
            })
            .sum()
    }

    #[test]
    fn per_iter_examples() {
        assert_eq!(layertokens_per_iter(4, 8, 4).unwrap(), 24);
        assert_eq!(layertokens_per_iter(4, 8, 8).unwrap(), 32);
        assert_eq!(layertokens_per_iter(24, 2048, 128).unwrap(), 6912);
        assert!(layertokens_per_iter(4, 8, 9).is_err());
        assert!(layertokens_per_iter(1, 8, 4).is_err());
    }

    #[test]
    fn cumulative_hand_sum() {
        // b_t = [4, 6, 8] with T_dec = 1
        let sched = DropSchedule::mslg(8, 4, 2, 2, 4, 0).unwrap();
        assert_eq!(cumulative_layertokens(&sched, 4, 3).unwrap(), 84);
        let base = DropSchedule::no_drop(8, 4).unwrap();
        assert_eq!(cumulative_layertokens(&base, 4, 3).unwrap(), 96);
    }

    #[test]
    fn closed_form_matches_loop_on_awkward_horizons() {
        for (s, b0, step, t_full, iters) in [(8, 4, 2, 8, 20), (10, 1, 3, 7, 5), (64, 3, 5, 97, 300), (5, 5, 1, 1, 9)] {
            let sched = DropSchedule::mslg(s, b0, step, t_full, 5, 0).unwrap();
            assert_eq!(cumulative_layertokens(&sched, 5, iters).unwrap(), loop_sum(&sched, 5, iters));
        }
    }

    #[test]
    fn no_drop_saves_nothing() {
        let sched = DropSchedule::no_drop(16, 6).unwrap();
        let s = saving_fraction(&sched, 6, 100).unwrap();
        assert_eq!(s, Savings { middle_layer: 0.0, whole_model: 0.0 });
    }

    #[test]
    fn warmup_hand_sum() {
        let sched = DropSchedule::constant(8, 4, 4, 0).unwrap();
        let cfg = LrConfig {
            lr_max: 1.0,
            lr_min: 0.0,
            total_iters: 10,
            warmup_iters: 2,
            decay: Decay::Linear,
            axis: LrAxis::LayerToken,
        };
        assert_eq!(lt_warmup_iterations(&sched, 4, &cfg).unwrap(), 3);
        let base = DropSchedule::no_drop(8, 4).unwrap();
        assert_eq!(lt_warmup_iterations(&base, 4, &cfg).unwrap(), 2);
    }

    #[test]
    fn warmup_unreachable() {
        let sched = DropSchedule::constant(8, 1, 4, 0).unwrap();
        let cfg = LrConfig {
            lr_max: 1.0,
            lr_min: 0.0,
            total_iters: 10,
            warmup_iters: 10,
            decay: Decay::Linear,
            axis: LrAxis::LayerToken,
        };
        assert!(matches!(lt_warmup_iterations(&sched, 4, &cfg), Err(BudgetError::WarmupUnreachable { .. })));
    }

    #[test]
    fn lr_midpoints() {
        let ledger = LayerTokenLedger::baseline(4, 8, 100).unwrap();
        let mut cfg = LrConfig {
            lr_max: 2.0,
            lr_min: 0.5,
            total_iters: 100,
            warmup_iters: 10,
            decay: Decay::Cosine,
            axis: LrAxis::LayerToken,
        };
        assert_eq!(lr_at(&cfg, &ledger, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&cfg, &ledger, 5).unwrap(), 1.0);
        assert_eq!(lr_at(&cfg, &ledger, 10).unwrap(), 2.0);
        assert!((lr_at(&cfg, &ledger, 55).unwrap() - 1.25).abs() < 1e-12);
        assert_eq!(lr_at(&cfg, &ledger, 100).unwrap(), 0.5);
        cfg.decay = Decay::Linear;
        assert!((lr_at(&cfg, &ledger, 55).unwrap() - 1.25).abs() < 1e-12);
        assert!(matches!(lr_at(&cfg, &ledger, 101), Err(BudgetError::IterationOutOfRange { .. })));
    }

    #[test]
    fn bypass_ledger() {
        let l = LayerTokenLedger::for_bypass(4, 8, 2, 4, 3).unwrap();
        assert_eq!(l.per_iter(), &[24, 24, 24]);
        assert_eq!(l.total(), 72);
        assert_eq!(l.first_reaching(48), Some(2));
        assert_eq!(l.first_reaching(49), Some(3));
        assert_eq!(l.first_reaching(73), None);
    }
}
