//! Toy GPT-style (causal) and BERT-style (bidirectional) transformers.
//!
//! Blocks are pre-LN: `x + Attn(LN(x))`, then `x + FFN(LN(x))`. Learned
//! absolute position embeddings are added once, before the first block, so a
//! block running on a gathered subsequence still sees each token's original
//! position through its hidden state.
//!
//! Three routings share the same parameters:
//! - baseline: every block sees every token;
//! - random-LTD: block `i` runs on the kept rows of its own [`DropPlan`] and
//!   the dropped rows pass through unchanged;
//! - TokenBypass: one kept set is chosen at `start_layer`, runs through
//!   `start_layer..=end_layer`, and the bypassed rows rejoin afterwards.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{Graph, NnError, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::rng::{Domain, StreamRng};
use crate::schedule::DropPlan;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("routing does not fit the batch: {0}")]
    Routing(String),
    #[error("token-loss table: {0}")]
    LossTable(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    #[serde(rename = "l")]
    pub layers: usize,
    #[serde(rename = "d")]
    pub hidden: usize,
    pub heads: usize,
    #[serde(rename = "s")]
    pub seq_len: usize,
    pub vocab: usize,
    #[serde(default = "yes")]
    pub causal: bool,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers < 2 {
            return bad(format!("l={} (need at least 2 layers)", self.layers));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return bad(format!("d={} must be a positive multiple of heads={}", self.hidden, self.heads));
        }
        if self.vocab < 2 {
            return bad(format!("vocab={} (need at least 2)", self.vocab));
        }
        if self.seq_len == 0 {
            return bad("s must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate={} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BypassMetric {
    Random,
    LossEma,
}

/// TokenBypass setup: tokens not kept at `start_layer` skip every layer up
/// to and including `end_layer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BypassConfig {
    pub start_layer: usize,
    pub end_layer: usize,
    pub keep_fraction: f64,
    pub metric: BypassMetric,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    /// Keep the tokens with the highest running loss (bypass the easy ones).
    #[serde(default = "yes")]
    pub keep_highest_loss: bool,
}

fn default_ema_decay() -> f64 {
    0.9
}

impl BypassConfig {
    pub fn validate(&self, layers: usize) -> Result<(), ModelError> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(ModelError::Config(format!("keep_fraction {} outside (0, 1]", self.keep_fraction)));
        }
        if self.start_layer < 1 || self.start_layer > self.end_layer || self.end_layer + 2 > layers {
            return Err(ModelError::Config(format!(
                "bypass span {}..={} must lie within layers 1..={}",
                self.start_layer,
                self.end_layer,
                layers.saturating_sub(2)
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(ModelError::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }

    pub fn kept_len(&self, seq_len: usize) -> usize {
        ((self.keep_fraction * seq_len as f64).round() as usize).clamp(1, seq_len)
    }

    pub fn span(&self) -> usize {
        self.end_layer - self.start_layer + 1
    }
}

/// Exponential moving average of per-token loss keyed by vocabulary id.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLossEma {
    decay: f64,
    values: Vec<f64>,
    counts: Vec<u64>,
}

impl TokenLossEma {
    pub fn new(vocab: usize, decay: f64) -> Self {
        TokenLossEma { decay, values: vec![0.0; vocab], counts: vec![0; vocab] }
    }

    /// `None` for ids never observed.
    pub fn get(&self, id: usize) -> Option<f64> {
        (self.counts[id] > 0).then(|| self.values[id])
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    /// First observation of an id stores the loss; later ones blend it in
    /// as `decay * old + (1 - decay) * loss`.
    pub fn update(&mut self, ids: &[usize], losses: &[f64]) -> Result<(), ModelError> {
        if ids.len() != losses.len() {
            return Err(ModelError::LossTable(format!("{} ids for {} losses", ids.len(), losses.len())));
        }
        if let Some(&l) = losses.iter().find(|&&l| !(l >= 0.0 && l.is_finite())) {
            return Err(ModelError::LossTable(format!("loss {l} is not a finite non-negative value")));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.values.len()) {
            return Err(ModelError::LossTable(format!("id {id} outside vocabulary {}", self.values.len())));
        }
        for (&id, &loss) in ids.iter().zip(losses) {
            self.values[id] = if self.counts[id] == 0 {
                loss
            } else {
                self.decay * self.values[id] + (1.0 - self.decay) * loss
            };
            self.counts[id] += 1;
        }
        Ok(())
    }

    /// Ranking score; unseen ids rank above every seen one.
    fn score(&self, id: usize) -> f64 {
        self.get(id).unwrap_or(f64::INFINITY)
    }
}

/// `seqs` sequences of `seq_len` token ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub seqs: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(seqs: usize, seq_len: usize, ids: Vec<usize>) -> Result<Self, ModelError> {
        if seqs * seq_len != ids.len() || seqs == 0 || seq_len == 0 {
            return Err(ModelError::Routing(format!("{} ids for {seqs} x {seq_len}", ids.len())));
        }
        Ok(TokenBatch { seqs, seq_len, ids })
    }

    pub fn seq(&self, n: usize) -> &[usize] {
        &self.ids[n * self.seq_len..(n + 1) * self.seq_len]
    }
}

/// Per-sequence kept positions for a TokenBypass forward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BypassSelection {
    pub kept: Vec<Vec<usize>>,
}

impl BypassSelection {
    fn rows(&self, seq_len: usize) -> (Vec<usize>, Vec<usize>) {
        let mut kept_rows = Vec::new();
        let mut dropped_rows = Vec::new();
        for (n, kept) in self.kept.iter().enumerate() {
            let mut is_kept = vec![false; seq_len];
            kept.iter().for_each(|&p| is_kept[p] = true);
            for (p, &k) in is_kept.iter().enumerate() {
                if k {
                    kept_rows.push(n * seq_len + p);
                } else {
                    dropped_rows.push(n * seq_len + p);
                }
            }
        }
        (kept_rows, dropped_rows)
    }
}

/// Chooses the tokens that run through the bypass span. `Random` draws one
/// shared set per step; `LossEma` ranks each sequence's tokens by their
/// running loss.
pub fn select_bypass(
    cfg: &BypassConfig,
    batch: &TokenBatch,
    ema: &TokenLossEma,
    seed: u64,
    step: u64,
) -> BypassSelection {
    let s = batch.seq_len;
    let b = cfg.kept_len(s);
    let kept = match cfg.metric {
        BypassMetric::Random => {
            let mut rng = StreamRng::new(seed, Domain::Bypass, &[step]);
            let mut pool: Vec<usize> = (0..s).collect();
            for i in 0..b {
                let j = i + rng.below((s - i) as u64) as usize;
                pool.swap(i, j);
            }
            let mut k = pool[..b].to_vec();
            k.sort_unstable();
            vec![k; batch.seqs]
        }
        BypassMetric::LossEma => (0..batch.seqs)
            .map(|n| {
                let ids = batch.seq(n);
                let mut order: Vec<usize> = (0..s).collect();
                order.sort_by(|&a, &c| {
                    let (sa, sc) = (ema.score(ids[a]), ema.score(ids[c]));
                    let ord = if cfg.keep_highest_loss { sc.total_cmp(&sa) } else { sa.total_cmp(&sc) };
                    ord.then(a.cmp(&c))
                });
                let mut k = order[..b].to_vec();
                k.sort_unstable();
                k
            })
            .collect(),
    };
    BypassSelection { kept }
}

/// How tokens are routed through the stack.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'a> {
    Baseline,
    RandomLtd(&'a [DropPlan]),
    TokenBypass { cfg: &'a BypassConfig, selection: &'a BypassSelection },
}

/// Eval runs without dropout; training draws dropout masks from
/// `(model seed, step, layer, site)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Eval,
    Train { step: u64 },
}

pub struct ForwardPass {
    /// `[seqs, seq_len, vocab]`.
    pub logits: Var,
    /// Parameter leaves, indexed like the model's [`ParamStore`].
    pub params: Vec<Var>,
    /// Full-length input of every block.
    pub block_inputs: Vec<Var>,
    /// Token rows each block processed, summed over blocks, per sequence.
    pub layertokens: u64,
}

#[derive(Clone, Debug)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Transformer<F> {
    cfg: TransformerConfig,
    params: ParamStore<F>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

const INIT_STD: f64 = 0.02;

impl<F: Scalar> Transformer<F> {
    pub fn new(cfg: TransformerConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (d, v, s, l) = (cfg.hidden, cfg.vocab, cfg.seq_len, cfg.layers);
        let mut store = ParamStore::new();
        let mut counter = 0u64;
        let mut normal = |shape: Vec<usize>, std: f64| -> Tensor<F> {
            counter += 1;
            let mut rng = StreamRng::new(cfg.seed, Domain::Init, &[counter]);
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| F::from_f64_lossy(dist.sample(&mut rng))).collect();
            Tensor::new(shape, data).expect("shape matches")
        };
        let resid_std = INIT_STD / (2.0 * l as f64).sqrt();
        let tok_emb = store.add("tok_emb", normal(vec![v, d], INIT_STD))?;
        let pos_emb = store.add("pos_emb", normal(vec![s, d], INIT_STD))?;
        let mut blocks = Vec::with_capacity(l);
        for i in 0..l {
            let mut add = |name: &str, t: Tensor<F>| store.add(format!("blocks.{i}.{name}"), t);
            blocks.push(BlockParams {
                ln1_g: add("ln1.gamma", Tensor::full(vec![d], F::one()))?,
                ln1_b: add("ln1.beta", Tensor::zeros(vec![d]))?,
                wq: add("attn.wq", normal(vec![d, d], INIT_STD))?,
                bq: add("attn.bq", Tensor::zeros(vec![d]))?,
                wk: add("attn.wk", normal(vec![d, d], INIT_STD))?,
                bk: add("attn.bk", Tensor::zeros(vec![d]))?,
                wv: add("attn.wv", normal(vec![d, d], INIT_STD))?,
                bv: add("attn.bv", Tensor::zeros(vec![d]))?,
                wo: add("attn.wo", normal(vec![d, d], resid_std))?,
                bo: add("attn.bo", Tensor::zeros(vec![d]))?,
                ln2_g: add("ln2.gamma", Tensor::full(vec![d], F::one()))?,
                ln2_b: add("ln2.beta", Tensor::zeros(vec![d]))?,
                w1: add("ffn.w1", normal(vec![d, 4 * d], INIT_STD))?,
                b1: add("ffn.b1", Tensor::zeros(vec![4 * d]))?,
                w2: add("ffn.w2", normal(vec![4 * d, d], resid_std))?,
                b2: add("ffn.b2", Tensor::zeros(vec![d]))?,
            });
        }
        let lnf_g = store.add("ln_f.gamma", Tensor::full(vec![d], F::one()))?;
        let lnf_b = store.add("ln_f.beta", Tensor::zeros(vec![d]))?;
        let head_w = store.add("head.w", normal(vec![d, v], INIT_STD))?;
        let head_b = store.add("head.b", Tensor::zeros(vec![v]))?;
        Ok(Transformer { cfg, params: store, tok_emb, pos_emb, blocks, lnf_g, lnf_b, head_w, head_b })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Zeroes the output projection so every position predicts the uniform
    /// distribution.
    pub fn zero_output_head(&mut self) {
        for id in [self.head_w, self.head_b] {
            self.params.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Zeroes the attention and feed-forward output projections of `layer`,
    /// turning the block into the identity.
    pub fn make_block_identity(&mut self, layer: usize) {
        let b = &self.blocks[layer];
        for id in [b.wo, b.bo, b.w2, b.b2] {
            self.params.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Writes the parameters plus `model.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        self.params.save(dir)?;
        fs::write(dir.join("model.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let cfg: TransformerConfig = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
        let mut model = Transformer::new(cfg)?;
        let loaded = ParamStore::<F>::load(dir)?;
        if loaded.len() != model.params.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                model.params.len()
            )));
        }
        for (dst, src) in model.params.iter_mut().zip(loaded.iter()) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(ModelError::Config(format!("checkpoint tensor {} does not match {}", src.name, dst.name)));
            }
            dst.tensor = src.tensor.clone();
        }
        Ok(model)
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<(), ModelError> {
        if batch.seq_len > self.cfg.seq_len {
            return Err(ModelError::Routing(format!(
                "sequence length {} exceeds model maximum {}",
                batch.seq_len, self.cfg.seq_len
            )));
        }
        Ok(())
    }

    pub fn forward_baseline(&self, g: &mut Graph<F>, batch: &TokenBatch, phase: Phase) -> Result<ForwardPass, ModelError> {
        self.forward(g, batch, Routing::Baseline, phase)
    }

    pub fn forward_random_ltd(
        &self,
        g: &mut Graph<F>,
        batch: &TokenBatch,
        plans: &[DropPlan],
        phase: Phase,
    ) -> Result<ForwardPass, ModelError> {
        self.forward(g, batch, Routing::RandomLtd(plans), phase)
    }

    pub fn forward_tokenbypass(
        &self,
        g: &mut Graph<F>,
        batch: &TokenBatch,
        cfg: &BypassConfig,
        selection: &BypassSelection,
        phase: Phase,
    ) -> Result<ForwardPass, ModelError> {
        self.forward(g, batch, Routing::TokenBypass { cfg, selection }, phase)
    }

    pub fn forward(&self, g: &mut Graph<F>, batch: &TokenBatch, routing: Routing<'_>, phase: Phase) -> Result<ForwardPass, ModelError> {
        self.check_batch(batch)?;
        let (seqs, s) = (batch.seqs, batch.seq_len);
        match routing {
            Routing::Baseline => {}
            Routing::RandomLtd(plans) => {
                if plans.len() != self.cfg.layers {
                    return Err(ModelError::Routing(format!(
                        "{} plans for {} layers",
                        plans.len(),
                        self.cfg.layers
                    )));
                }
                if let Some(p) = plans.iter().find(|p| p.seq_len() != s) {
                    return Err(ModelError::Routing(format!(
                        "plan for layer {} covers {} positions, batch has {s}",
                        p.layer,
                        p.seq_len()
                    )));
                }
            }
            Routing::TokenBypass { cfg, selection } => {
                cfg.validate(self.cfg.layers)?;
                let b = cfg.kept_len(s);
                if selection.kept.len() != seqs || selection.kept.iter().any(|k| k.len() != b) {
                    return Err(ModelError::Routing(format!("bypass selection must keep {b} tokens in each of {seqs} sequences")));
                }
            }
        }

        let p = self.params.bind(g)?;
        let positions: Vec<usize> = (0..seqs).flat_map(|_| 0..s).collect();
        let tok = g.embedding(p[self.tok_emb.0], &batch.ids)?;
        let pos = g.embedding(p[self.pos_emb.0], &positions)?;
        let mut x = g.add(tok, pos)?;
        x = self.dropout(g, x, phase, u64::MAX, 0)?;

        let mut block_inputs = Vec::with_capacity(self.cfg.layers);
        let mut layertokens = 0u64;
        let mut bypass: Option<(Var, Var, Vec<usize>, Vec<usize>)> = None;
        for layer in 0..self.cfg.layers {
            block_inputs.push(x);
            match routing {
                Routing::Baseline => {
                    x = self.block(g, &p, layer, x, seqs, phase)?;
                    layertokens += s as u64;
                }
                Routing::RandomLtd(plans) => {
                    let plan = &plans[layer];
                    if plan.is_full() {
                        x = self.block(g, &p, layer, x, seqs, phase)?;
                    } else {
                        let (kept, dropped) = plan.batch_rows(seqs);
                        let k = g.gather_rows(x, &kept)?;
                        let k = self.block(g, &p, layer, k, seqs, phase)?;
                        x = g.combine_rows(k, x, &kept, &dropped)?;
                    }
                    layertokens += plan.kept.len() as u64;
                }
                Routing::TokenBypass { cfg, selection } => {
                    let in_span = (cfg.start_layer..=cfg.end_layer).contains(&layer);
                    if !in_span || cfg.kept_len(s) == s {
                        x = self.block(g, &p, layer, x, seqs, phase)?;
                        layertokens += s as u64;
                        continue;
                    }
                    if layer == cfg.start_layer {
                        let (kept, dropped) = selection.rows(s);
                        let k = g.gather_rows(x, &kept)?;
                        bypass = Some((x, k, kept, dropped));
                    }
                    let (saved, k, kept, dropped) = bypass.take().expect("span started");
                    let k = self.block(g, &p, layer, k, seqs, phase)?;
                    layertokens += (kept.len() / seqs) as u64;
                    if layer == cfg.end_layer {
                        x = g.combine_rows(k, saved, &kept, &dropped)?;
                    } else {
                        bypass = Some((saved, k, kept, dropped));
                    }
                }
            }
        }

        let h = g.layernorm(x, p[self.lnf_g.0], p[self.lnf_b.0])?;
        let logits = g.matmul(h, p[self.head_w.0])?;
        let logits = g.add_bias(logits, p[self.head_b.0])?;
        let logits = g.reshape(logits, vec![seqs, s, self.cfg.vocab])?;
        Ok(ForwardPass { logits, params: p, block_inputs, layertokens })
    }

    fn dropout(&self, g: &mut Graph<F>, x: Var, phase: Phase, layer: u64, site: u64) -> Result<Var, ModelError> {
        match phase {
            Phase::Train { step } if self.cfg.dropout_rate > 0.0 => {
                let mut rng = StreamRng::new(self.cfg.seed, Domain::Dropout, &[step, layer, site]);
                Ok(g.dropout(x, self.cfg.dropout_rate, &mut rng)?)
            }
            _ => Ok(x),
        }
    }

    /// One pre-LN block over `seqs` sequences of equal length stacked in `x`.
    fn block(&self, g: &mut Graph<F>, p: &[Var], layer: usize, x: Var, seqs: usize, phase: Phase) -> Result<Var, ModelError> {
        let b = &self.blocks[layer];
        let h = g.layernorm(x, p[b.ln1_g.0], p[b.ln1_b.0])?;
        let q = g.matmul(h, p[b.wq.0])?;
        let q = g.add_bias(q, p[b.bq.0])?;
        let k = g.matmul(h, p[b.wk.0])?;
        let k = g.add_bias(k, p[b.bk.0])?;
        let v = g.matmul(h, p[b.wv.0])?;
        let v = g.add_bias(v, p[b.bv.0])?;
        let a = g.attention(q, k, v, seqs, self.cfg.heads, self.cfg.causal)?;
        let o = g.matmul(a, p[b.wo.0])?;
        let o = g.add_bias(o, p[b.bo.0])?;
        let o = self.dropout(g, o, phase, layer as u64, 0)?;
        let x = g.add(x, o)?;

        let h = g.layernorm(x, p[b.ln2_g.0], p[b.ln2_b.0])?;
        let f = g.matmul(h, p[b.w1.0])?;
        let f = g.add_bias(f, p[b.b1.0])?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, p[b.w2.0])?;
        let f = g.add_bias(f, p[b.b2.0])?;
        let f = self.dropout(g, f, phase, layer as u64, 1)?;
        Ok(g.add(x, f)?)
    }
}

/// Causal LM loss: position `p` predicts token `p + 1`; the last position
/// of each sequence has no target.
pub fn lm_loss<F: Scalar>(g: &mut Graph<F>, logits: Var, batch: &TokenBatch) -> Result<Var, ModelError> {
    Ok(g.cross_entropy(logits, &lm_targets(batch))?)
}

pub fn lm_targets(batch: &TokenBatch) -> Vec<Option<usize>> {
    let s = batch.seq_len;
    (0..batch.ids.len()).map(|i| if i % s + 1 < s { Some(batch.ids[i + 1]) } else { None }).collect()
}

/// Masked positions and the corrupted input for one masked-LM batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    pub inputs: TokenBatch,
}

impl MaskPlan {
    /// Masks each position with probability `rate`; a masked position's
    /// input becomes `mask_id` (80%), a random id below `mask_id` (10%) or
    /// stays unchanged (10%).
    pub fn sample(batch: &TokenBatch, rate: f64, mask_id: usize, rng: &mut StreamRng) -> MaskPlan {
        let mut inputs = batch.clone();
        let mut masked = vec![false; batch.ids.len()];
        for (i, m) in masked.iter_mut().enumerate() {
            if rng.uniform() >= rate {
                continue;
            }
            *m = true;
            let r = rng.uniform();
            if r < 0.8 {
                inputs.ids[i] = mask_id;
            } else if r < 0.9 {
                inputs.ids[i] = rng.below(mask_id as u64) as usize;
            }
        }
        MaskPlan { masked, inputs }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Masked-LM loss: mean over masked positions of predicting the original id.
pub fn mlm_loss<F: Scalar>(g: &mut Graph<F>, logits: Var, original: &TokenBatch, mask: &MaskPlan) -> Result<Var, ModelError> {
    Ok(g.cross_entropy(logits, &mlm_targets(original, mask))?)
}

pub fn mlm_targets(original: &TokenBatch, mask: &MaskPlan) -> Vec<Option<usize>> {
    original.ids.iter().zip(&mask.masked).map(|(&id, &m)| m.then_some(id)).collect()
}
