//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use ltd_lab::model::{Phase, Routing, TokenBatch, Transformer, TransformerConfig};
use ltd_lab::nn::{Graph, Tensor, Var};
use ltd_lab::rng::StreamRng;
use ltd_lab::schedule::DropSchedule;

pub const FD_STEP: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn random_tensor(rng: &mut StreamRng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

/// Analytic gradients of `f` against central differences on every input.
/// Returns the worst per-input relative error.
pub fn grad_check<Fn_>(inputs: &[Tensor<f64>], f: Fn_) -> f64
where
    Fn_: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads.get(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Central-difference check of every model parameter for the loss built by
/// `loss` on top of a forward pass with `routing`.
pub fn model_grad_check<L>(model: &Transformer<f64>, batch: &TokenBatch, routing: Routing<'_>, loss: L) -> f64
where
    L: Fn(&mut Graph<f64>, Var, &TokenBatch) -> Var,
{
    let eval = |m: &Transformer<f64>| -> f64 {
        let mut g = Graph::new();
        let fp = m.forward(&mut g, batch, routing, Phase::Eval).unwrap();
        let l = loss(&mut g, fp.logits, batch);
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let fp = model.forward(&mut g, batch, routing, Phase::Eval).unwrap();
    let l = loss(&mut g, fp.logits, batch);
    let grads = g.backward(l).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = model.clone();
    for (idx, var) in fp.params.iter().enumerate() {
        let n = model.params().iter().nth(idx).unwrap().tensor.len();
        analytic.extend(grads.get(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]));
        for j in 0..n {
            let id = ltd_lab::nn::ParamId(idx);
            let orig = probe.params().get(id).tensor.data()[j];
            probe.params_mut().get_mut(id).tensor.data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe);
            probe.params_mut().get_mut(id).tensor.data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe);
            probe.params_mut().get_mut(id).tensor.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

/// Per-iteration loop over the schedule, independent of the budget
/// module's stage-wise sum.
pub fn loop_cumulative(sched: &DropSchedule, layers: usize, iters: u64) -> u128 {
    let mut total = 0u128;
    for t in 0..iters {
        let b = sched.kept_length(t);
        for layer in 0..layers {
            total += if sched.exempt_layers().contains(&layer) { sched.seq_len() } else { b } as u128;
        }
    }
    total
}

pub fn random_batch(rng: &mut StreamRng, seqs: usize, seq_len: usize, vocab: usize) -> TokenBatch {
    let ids = (0..seqs * seq_len).map(|_| rng.below(vocab as u64) as usize).collect();
    TokenBatch::new(seqs, seq_len, ids).unwrap()
}

/// Small random architecture drawn from `seed`.
pub fn random_config(seed: u64) -> TransformerConfig {
    let mut rng = StreamRng::from_key(seed ^ 0x5eed);
    let heads = 1 + rng.below(2) as usize;
    TransformerConfig {
        layers: 2 + rng.below(4) as usize,
        hidden: heads * 4 * (1 + rng.below(2) as usize),
        heads,
        seq_len: 3 + rng.below(8) as usize,
        vocab: 2 + rng.below(20) as usize,
        causal: rng.below(2) == 0,
        dropout_rate: 0.0,
        seed,
    }
}

/// Full plans through the random-LTD path against the baseline path on one
/// random model, compared bit for bit.
pub fn degeneracy_holds(seed: u64) -> bool {
    let cfg = random_config(seed);
    let model = Transformer::<f64>::new(cfg.clone()).unwrap();
    let mut rng = StreamRng::from_key(seed);
    let seqs = 1 + rng.below(3) as usize;
    let batch = random_batch(&mut rng, seqs, cfg.seq_len, cfg.vocab);
    let plans: Vec<_> = (0..cfg.layers).map(|l| ltd_lab::schedule::DropPlan::full(l, 0, cfg.seq_len)).collect();
    let run = |routing| {
        let mut g = Graph::new();
        let fp = model.forward(&mut g, &batch, routing, Phase::Eval).unwrap();
        g.value(fp.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    run(Routing::Baseline) == run(Routing::RandomLtd(&plans))
}

/// Two-layer `d=8`, `s=6` model with layer 1 keeping positions {0, 2, 3, 5}.
pub fn small_model_fd_check(causal: bool) -> f64 {
    let cfg = TransformerConfig { layers: 2, hidden: 8, heads: 2, seq_len: 6, vocab: 7, causal, dropout_rate: 0.0, seed: 11 };
    let mut model = Transformer::<f64>::new(cfg).unwrap();
    // larger weights than the default init so every path carries signal
    for p in model.params_mut().iter_mut() {
        let mut rng = StreamRng::from_key(p.name.len() as u64 * 7919 + p.tensor.len() as u64);
        for v in p.tensor.data_mut() {
            *v += (rng.uniform() - 0.5) * 0.6;
        }
    }
    let mut rng = StreamRng::from_key(3);
    let batch = random_batch(&mut rng, 2, 6, 7);
    let plans = vec![
        ltd_lab::schedule::DropPlan::full(0, 0, 6),
        ltd_lab::schedule::DropPlan { layer: 1, iteration: 0, kept: vec![0, 2, 3, 5], dropped: vec![1, 4] },
    ];
    model_grad_check(&model, &batch, Routing::RandomLtd(&plans), |g, logits, b| {
        ltd_lab::model::lm_loss(g, logits, b).unwrap()
    })
}

/// Random projection so every output element matters to the scalar loss.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = StreamRng::from_key(seed);
    let w = random_tensor(&mut rng, g.shape(x).to_vec(), 1.0);
    g.weighted_sum(x, &w).unwrap()
}

/// Finite-difference check number `case`; cases cycle through matmul, add,
/// layernorm, softmax, gelu, embedding, dropout, cross-entropy, attention
/// and gather+combine.
pub fn primitive_fd_case(case: u64) -> f64 {
    let mut rng = StreamRng::from_key(1000 + case);
    let m = 1 + rng.below(4) as usize;
    let k = 1 + rng.below(5) as usize;
    let n = 1 + rng.below(5) as usize;
match case % 10 {
        0 => grad_check(
            &[random_tensor(&mut rng, vec![m, k], 1.0), random_tensor(&mut rng, vec![k, n], 1.0)],
            |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                project(g, y, case)
            },
        ),
        1 => grad_check(
            &[random_tensor(&mut rng, vec![m, n], 1.0), random_tensor(&mut rng, vec![m, n], 1.0)],
            |g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                project(g, y, case)
            },
        ),
        2 => grad_check(
            &[
                random_tensor(&mut rng, vec![m, n + 1], 2.0),
                random_tensor(&mut rng, vec![n + 1], 1.0),
                random_tensor(&mut rng, vec![n + 1], 1.0),
            ],
            |g, v| {
                let y = g.layernorm(v[0], v[1], v[2]).unwrap();
                project(g, y, case)
            },
        ),
        3 => grad_check(&[random_tensor(&mut rng, vec![m, n], 3.0)], |g, v| {
            let y = g.softmax(v[0]).unwrap();
            project(g, y, case)
        }),
        4 => grad_check(&[random_tensor(&mut rng, vec![m, n], 3.0)], |g, v| {
            let y = g.gelu(v[0]).unwrap();
            project(g, y, case)
        }),
        5 => {
            let ids: Vec<usize> = (0..m + 2).map(|_| rng.below(n as u64) as usize).collect();
            grad_check(&[random_tensor(&mut rng, vec![n, k], 1.0)], |g, v| {
                let y = g.embedding(v[0], &ids).unwrap();
                project(g, y, case)
            })
        }
        6 => grad_check(&[random_tensor(&mut rng, vec![m, n], 1.0)], |g, v| {
            let mut drng = StreamRng::from_key(case);
            let y = g.dropout(v[0], 0.3, &mut drng).unwrap();
            project(g, y, case)
        }),
        7 => {
            let targets: Vec<Option<usize>> =
                (0..m + 1).map(|i| if i == 0 { None } else { Some(rng.below(n as u64 + 1) as usize) }).collect();
            grad_check(&[random_tensor(&mut rng, vec![m + 1, n + 1], 3.0)], |g, v| {
                g.cross_entropy(v[0], &targets).unwrap()
            })
        }
        8 => {
            let (seqs, len, heads, d) = (1 + case as usize % 2, 2 + rng.below(3) as usize, 2, 4);
            let shape = vec![seqs * len, d];
            grad_check(
                &[
                    random_tensor(&mut rng, shape.clone(), 1.0),
                    random_tensor(&mut rng, shape.clone(), 1.0),
                    random_tensor(&mut rng, shape, 1.0),
                ],
                |g, v| {
                    let y = g.attention(v[0], v[1], v[2], seqs, heads, case % 4 == 0).unwrap();
                    project(g, y, case)
                },
            )
        }
        _ => grad_check(
            &[random_tensor(&mut rng, vec![m + 2, k], 1.0), random_tensor(&mut rng, vec![m + 2, k], 1.0)],
            |g, v| {
                let rows = m + 2;
                let kept: Vec<usize> = (0..rows).filter(|r| r % 2 == 0).collect();
                let dropped: Vec<usize> = (0..rows).filter(|r| r % 2 == 1).collect();
                let gathered = g.gather_rows(v[0], &kept).unwrap();
                let y = g.combine_rows(gathered, v[1], &kept, &dropped).unwrap();
                project(g, y, case)
            },
        ),
    }
}

/// Gather of rows {1, 4} from a random 6x3 input.
pub fn gather_fd_check() -> f64 {
    let mut rng = StreamRng::from_key(61);
    let x = random_tensor(&mut rng, vec![6, 3], 1.0);
    grad_check(&[x], |g, v| {
        let k = g.gather_rows(v[0], &[1, 4]).unwrap();
        project(g, k, 5)
    })
}
