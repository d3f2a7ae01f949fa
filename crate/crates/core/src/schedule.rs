//! Kept-length schedules and per-layer random drop plans.
//!
//! Under monotonic sequence-length growth (MSLG) the number of kept tokens
//! starts at `b0` and grows by `s_dec` every `T_dec = t_full / ceil((s - b0) / s_dec)`
//! iterations until it reaches `s` at iteration `t_full`. The last step is
//! truncated when `s_dec` does not divide `s - b0`.
//!
//! Each non-exempt layer draws its own kept set for each iteration from a
//! counter-based stream keyed by `(seed, layer, t)`, so plans never depend on
//! the order in which they are requested.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::rng::{Domain, StreamRng};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("growth horizon t_full={t_full} is shorter than the {steps} growth steps (T_dec < 1)")]
    HorizonTooShort { steps: u64, t_full: u64 },
    #[error("layer {0} is exempt from dropping")]
    ExemptLayer(usize),
    #[error("{special} special positions do not fit in {kept} kept tokens")]
    TooManySpecial { special: usize, kept: usize },
    #[error("special position {pos} outside sequence of length {seq_len}")]
    SpecialOutOfRange { pos: usize, seq_len: usize },
    #[error("{layers} layers cannot host middle-layer dropping (need at least 3)")]
    TooFewLayers { layers: usize },
    #[error("exempt layer {layer} outside a {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropMode {
    Mslg,
    Constant,
}

/// Exemption list as written in a config file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExemptLayers {
    Policy(ExemptPolicy),
    Explicit(BTreeSet<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemptPolicy {
    /// First and last layer always run at full length.
    FirstLast,
}

impl Default for ExemptLayers {
    fn default() -> Self {
        ExemptLayers::Policy(ExemptPolicy::FirstLast)
    }
}

impl ExemptLayers {
    pub fn resolve(&self, layers: usize) -> BTreeSet<usize> {
        match self {
            ExemptLayers::Policy(ExemptPolicy::FirstLast) => {
                [0, layers.saturating_sub(1)].into_iter().collect()
            }
            ExemptLayers::Explicit(set) => set.clone(),
        }
    }
}

/// `[schedule]` section of a config file. Exemptions are resolved against
/// the model depth by [`ScheduleConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub s: usize,
    pub b0: usize,
    #[serde(default = "one")]
    pub s_dec: usize,
    #[serde(default = "one_u64")]
    pub t_full: u64,
    pub mode: DropMode,
    #[serde(default)]
    pub exempt_layers: ExemptLayers,
    #[serde(default)]
    pub keep_special: bool,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn one_u64() -> u64 {
    1
}

impl ScheduleConfig {
    pub fn resolve(&self, layers: usize) -> Result<DropSchedule, ScheduleError> {
        let sched = DropSchedule {
            seq_len: self.s,
            initial_kept: self.b0,
            growth_step: self.s_dec,
            full_length_iter: self.t_full,
            mode: self.mode,
            exempt: self.exempt_layers.resolve(layers),
            keep_special: self.keep_special,
            seed: self.seed,
        };
        sched.validate()?;
        Ok(sched)
    }
}

/// A validated token-dropping policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DropSchedule {
    #[serde(rename = "s")]
    seq_len: usize,
    #[serde(rename = "b0")]
    initial_kept: usize,
    #[serde(rename = "s_dec")]
    growth_step: usize,
    #[serde(rename = "t_full")]
    full_length_iter: u64,
    mode: DropMode,
    #[serde(rename = "exempt_layers")]
    exempt: BTreeSet<usize>,
    keep_special: bool,
    seed: u64,
}

impl DropSchedule {
    /// MSLG schedule with the first and last of `layers` layers exempt.
    pub fn mslg(
        seq_len: usize,
        initial_kept: usize,
        growth_step: usize,
        full_length_iter: u64,
        layers: usize,
        seed: u64,
    ) -> Result<Self, ScheduleError> {
        let sched = DropSchedule {
            seq_len,
            initial_kept,
            growth_step,
            full_length_iter,
            mode: DropMode::Mslg,
            exempt: ExemptLayers::default().resolve(layers),
            keep_special: false,
            seed,
        };
        sched.validate()?;
        Ok(sched)
    }

    /// Fixed kept length for the whole run, first and last layer exempt.
    pub fn constant(seq_len: usize, kept: usize, layers: usize, seed: u64) -> Result<Self, ScheduleError> {
        let sched = DropSchedule {
            seq_len,
            initial_kept: kept,
            growth_step: 1,
            full_length_iter: 1,
            mode: DropMode::Constant,
            exempt: ExemptLayers::default().resolve(layers),
            keep_special: false,
            seed,
        };
        sched.validate()?;
        Ok(sched)
    }

    /// Keeps every token at every layer.
    pub fn no_drop(seq_len: usize, layers: usize) -> Result<Self, ScheduleError> {
        Self::constant(seq_len, seq_len, layers, 0)
    }

    pub fn with_exempt_layers(mut self, exempt: BTreeSet<usize>) -> Self {
        self.exempt = exempt;
        self
    }

    pub fn with_keep_special(mut self, keep: bool) -> Self {
        self.keep_special = keep;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<(), ScheduleError> {
        if self.initial_kept == 0 || self.initial_kept > self.seq_len {
            return Err(ScheduleError::Invalid(format!(
                "b0={} must lie in [1, s={}]",
                self.initial_kept, self.seq_len
            )));
        }
        if self.growth_step == 0 {
            return Err(ScheduleError::Invalid("s_dec must be at least 1".into()));
        }
        if self.full_length_iter == 0 {
            return Err(ScheduleError::Invalid("t_full must be at least 1".into()));
        }
        let steps = self.growth_steps();
        if steps > self.full_length_iter {
            return Err(ScheduleError::HorizonTooShort { steps, t_full: self.full_length_iter });
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn initial_kept(&self) -> usize {
        self.initial_kept
    }

    pub fn growth_step(&self) -> usize {
        self.growth_step
    }

    pub fn full_length_iter(&self) -> u64 {
        self.full_length_iter
    }

    pub fn mode(&self) -> DropMode {
        self.mode
    }

    pub fn exempt_layers(&self) -> &BTreeSet<usize> {
        &self.exempt
    }

    pub fn keep_special(&self) -> bool {
        self.keep_special
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of growth increments, `ceil((s - b0) / s_dec)`; zero for
    /// constant schedules.
    pub fn growth_steps(&self) -> u64 {
        match self.mode {
            DropMode::Constant => 0,
            DropMode::Mslg => (self.seq_len - self.initial_kept).div_ceil(self.growth_step) as u64,
        }
    }

    /// Kept tokens per middle layer at iteration `t`.
    pub fn kept_length(&self, t: u64) -> usize {
        match self.mode {
            DropMode::Constant => self.initial_kept,
            DropMode::Mslg => {
                let steps = self.growth_steps();
                if steps == 0 || t >= self.full_length_iter {
                    return self.seq_len;
                }
                // floor(t / T_dec) with T_dec = t_full / steps, in exact integers
                let stage = (t as u128 * steps as u128 / self.full_length_iter as u128) as usize;
                (self.initial_kept + stage * self.growth_step).min(self.seq_len)
            }
        }
    }

    /// True when no layer ever drops a token.
    pub fn is_no_drop(&self) -> bool {
        self.initial_kept == self.seq_len
    }

    /// Samples the kept/dropped partition for `layer` at iteration `t`.
    ///
    /// With `keep_special` on, every position in `special` is kept and the
    /// remaining slots are drawn uniformly from the other positions.
    pub fn sample_drop_plan(&self, layer: usize, t: u64, special: &[usize]) -> Result<DropPlan, ScheduleError> {
        if self.exempt.contains(&layer) {
            return Err(ScheduleError::ExemptLayer(layer));
        }
        let s = self.seq_len;
        let b = self.kept_length(t);
        let forced: Vec<usize> = if self.keep_special {
            let set: BTreeSet<usize> = special.iter().copied().collect();
            if let Some(&pos) = set.iter().find(|&&p| p >= s) {
                return Err(ScheduleError::SpecialOutOfRange { pos, seq_len: s });
            }
            if set.len() > b {
                return Err(ScheduleError::TooManySpecial { special: set.len(), kept: b });
            }
            set.into_iter().collect()
        } else {
            Vec::new()
        };
        if b == s {
            return Ok(DropPlan::full(layer, t, s));
        }

        let mut is_forced = vec![false; s];
        for &p in &forced {
            is_forced[p] = true;
        }
        let mut pool: Vec<usize> = (0..s).filter(|&p| !is_forced[p]).collect();
        let need = b - forced.len();
        // partial Fisher-Yates: the first `need` slots become a uniform sample
        let mut rng = StreamRng::new(self.seed, Domain::Plan, &[layer as u64, t]);
        for i in 0..need {
            let j = i + rng.below((pool.len() - i) as u64) as usize;
            pool.swap(i, j);
        }
        let mut in_kept = is_forced;
        for &p in &pool[..need] {
            in_kept[p] = true;
        }
        let (mut kept, mut dropped) = (Vec::with_capacity(b), Vec::with_capacity(s - b));
        for (p, &k) in in_kept.iter().enumerate() {
            if k {
                kept.push(p);
            } else {
                dropped.push(p);
            }
        }
        Ok(DropPlan { layer, iteration: t, kept, dropped })
    }

    /// One plan per layer for iteration `t`: exempt layers get full plans,
    /// every other layer an independent sample of the same size.
    pub fn plan_iteration(&self, t: u64, layers: usize, special: &[usize]) -> Result<Vec<DropPlan>, ScheduleError> {
        if let Some(&layer) = self.exempt.iter().find(|&&l| l >= layers) {
            return Err(ScheduleError::LayerOutOfRange { layer, layers });
        }
        if layers < 3 && self.kept_length(t) < self.seq_len && (0..layers).any(|l| !self.exempt.contains(&l)) {
            return Err(ScheduleError::TooFewLayers { layers });
        }
        (0..layers)
            .map(|layer| {
                if self.exempt.contains(&layer) {
                    Ok(DropPlan::full(layer, t, self.seq_len))
                } else {
                    self.sample_drop_plan(layer, t, special)
                }
            })
            .collect()
    }
}

/// Kept (`K`) and dropped (`J`) token positions for one layer at one
/// iteration. Both lists are strictly increasing and partition `0..s`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropPlan {
    pub layer: usize,
    pub iteration: u64,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

impl DropPlan {
    pub fn full(layer: usize, iteration: u64, seq_len: usize) -> Self {
        DropPlan { layer, iteration, kept: (0..seq_len).collect(), dropped: Vec::new() }
    }

    pub fn seq_len(&self) -> usize {
        self.kept.len() + self.dropped.len()
    }

    pub fn is_full(&self) -> bool {
        self.dropped.is_empty()
    }

    /// Row indices of this plan applied to each of `seqs` stacked sequences.
    pub fn batch_rows(&self, seqs: usize) -> (Vec<usize>, Vec<usize>) {
        let s = self.seq_len();
        let expand = |idx: &[usize]| -> Vec<usize> {
            (0..seqs).flat_map(|n| idx.iter().map(move |&p| n * s + p)).collect()
        };
        (expand(&self.kept), expand(&self.dropped))
    }
}

/// Iterations needed to consume `tokens` training tokens at
/// `batch_size` sequences of `seq_len` tokens per iteration (rounded down).
pub fn tokens_to_iterations(tokens: u64, batch_size: u64, seq_len: u64) -> u64 {
    tokens / (batch_size * seq_len)
}
