mod common;

use common::loop_cumulative;
use ltd_lab::budget::{
    cumulative_layertokens, layertokens_per_iter, lr_at, lt_warmup_iterations, presets, saving_fraction, BudgetError,
    Decay, LayerTokenLedger, LrAxis, LrConfig,
};
use ltd_lab::schedule::DropSchedule;
use proptest::prelude::*;

fn lr(total: u64, warmup: u64, decay: Decay, axis: LrAxis) -> LrConfig {
    LrConfig { lr_max: 6e-4, lr_min: 6e-5, total_iters: total, warmup_iters: warmup, decay, axis }
}

/// Scans iterations one at a time for the first cumulative crossing.
fn scan_warmup(sched: &DropSchedule, layers: usize, warmup: u64) -> u64 {
    let target = (sched.seq_len() * layers) as u128 * warmup as u128;
    let mut total = 0u128;
    let mut t = 0u64;
    while total < target {
        total += layertokens_per_iter(layers, sched.seq_len(), sched.kept_length(t)).unwrap() as u128;
        t += 1;
    }
    t
}

#[test]
fn hand_sums() {
    assert_eq!(layertokens_per_iter(4, 8, 4).unwrap(), 24);
    assert_eq!(layertokens_per_iter(24, 2048, 128).unwrap(), 6912);
    assert!(layertokens_per_iter(4, 8, 9).is_err());
    // b_t = 4, 6, 8
    let sched = DropSchedule::mslg(8, 4, 2, 2, 4, 0).unwrap();
    assert_eq!(cumulative_layertokens(&sched, 4, 3).unwrap(), 84);
    let none = DropSchedule::no_drop(8, 4).unwrap();
    assert_eq!(cumulative_layertokens(&none, 4, 3).unwrap(), 96);
}

#[test]
fn hand_warmup() {
    let sched = DropSchedule::constant(8, 4, 4, 0).unwrap();
    let cfg = lr(10, 2, Decay::Linear, LrAxis::LayerToken);
    assert_eq!(lt_warmup_iterations(&sched, 4, &cfg).unwrap(), 3);
    let none = DropSchedule::no_drop(8, 4).unwrap();
    assert_eq!(lt_warmup_iterations(&none, 4, &cfg).unwrap(), 2);
    let tight = lr(3, 3, Decay::Linear, LrAxis::LayerToken);
    assert!(matches!(lt_warmup_iterations(&sched, 4, &tight), Err(BudgetError::WarmupUnreachable { .. })));
}

#[test]
fn gpt_warmup_matches_scan() {
    let p = presets::gpt3_350m();
    let cfg = lr(p.iters, 3000, Decay::Cosine, LrAxis::LayerToken);
    let got = lt_warmup_iterations(&p.schedule, p.layers, &cfg).unwrap();
    assert_eq!(got, scan_warmup(&p.schedule, p.layers, 3000));
    assert!(got > 3000);
}

#[test]
fn gpt_cumulative_matches_loop() {
    let p = presets::gpt3_350m();
    assert_eq!(cumulative_layertokens(&p.schedule, p.layers, p.iters).unwrap(), loop_cumulative(&p.schedule, p.layers, p.iters));
}

#[test]
fn lr_midpoints() {
    let ledger = LayerTokenLedger::baseline(4, 8, 100).unwrap();
    let cfg = lr(100, 10, Decay::Cosine, LrAxis::LayerToken);
    assert_eq!(lr_at(&cfg, &ledger, 5).unwrap(), 3e-4);
    let mid = lr_at(&cfg, &ledger, 55).unwrap();
    assert!((mid - (6e-5 + (6e-4 - 6e-5) / 2.0)).abs() < 1e-15);
    assert_eq!(lr_at(&cfg, &ledger, 10).unwrap(), 6e-4);
    assert!((lr_at(&cfg, &ledger, 100).unwrap() - 6e-5).abs() < 1e-18);
    assert!(matches!(lr_at(&cfg, &ledger, 101), Err(BudgetError::IterationOutOfRange { .. })));
}

#[test]
fn lr_axes_agree_without_dropping() {
    let ledger = LayerTokenLedger::for_schedule(&DropSchedule::no_drop(64, 6).unwrap(), 6, 10_000).unwrap();
    for decay in [Decay::Linear, Decay::Cosine] {
        let a = lr(10_000, 700, decay, LrAxis::Iteration);
        let b = LrConfig { axis: LrAxis::LayerToken, ..a.clone() };
        for t in 0..=10_000 {
            assert_eq!(lr_at(&a, &ledger, t).unwrap().to_bits(), lr_at(&b, &ledger, t).unwrap().to_bits(), "t={t}");
        }
    }
}

#[test]
fn layertoken_axis_stretches_warmup() {
    let sched = DropSchedule::mslg(64, 16, 4, 700, 4, 0).unwrap();
    let ledger = LayerTokenLedger::for_schedule(&sched, 4, 1000).unwrap();
    let cfg = lr(1000, 100, Decay::Cosine, LrAxis::LayerToken);
    let lt_warm = lt_warmup_iterations(&sched, 4, &cfg).unwrap();
    assert!(lr_at(&cfg, &ledger, lt_warm - 1).unwrap() < 6e-4);
    let it = LrConfig { axis: LrAxis::Iteration, ..cfg.clone() };
    assert_eq!(lr_at(&it, &ledger, 100).unwrap(), 6e-4);
    assert!(lr_at(&cfg, &ledger, 100).unwrap() < 6e-4);
}

#[test]
fn paper_savings() {
    let vit = presets::vit_imagenet();
    let s = saving_fraction(&vit.schedule, vit.layers, vit.iters).unwrap();
    assert!((s.whole_model - 0.223).abs() < 0.01, "{s:?}");
    let gpt = presets::gpt3_350m();
    let s = saving_fraction(&gpt.schedule, gpt.layers, gpt.iters).unwrap();
    assert!((s.middle_layer - 0.333).abs() < 0.03, "{s:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn cumulative_matches_loop_oracle(
        layers in 3usize..=32,
        s in 2usize..=256,
        b0_frac in 0.0f64..=1.0,
        s_dec in 1usize..64,
        t_frac in 0.0f64..=1.0,
        iters in 1u64..=10_000,
        constant in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let b0 = 1 + ((s - 1) as f64 * b0_frac) as usize;
        let steps = (s - b0).div_ceil(s_dec) as u64;
        let t_full = steps.max(1) + ((iters as f64) * t_frac) as u64;
        let sched = if constant {
            DropSchedule::constant(s, b0, layers, seed).unwrap()
        } else {
            DropSchedule::mslg(s, b0, s_dec, t_full, layers, seed).unwrap()
        };
        prop_assert_eq!(cumulative_layertokens(&sched, layers, iters).unwrap(), loop_cumulative(&sched, layers, iters));
        let sv = saving_fraction(&sched, layers, iters).unwrap();
        prop_assert!(0.0 <= sv.whole_model && sv.whole_model <= sv.middle_layer && sv.middle_layer < 1.0);
        let expect = sv.middle_layer * (layers - 2) as f64 / layers as f64;
        prop_assert!((sv.whole_model - expect).abs() < 1e-12);
    }

    #[test]
    fn lr_rises_then_falls(warmup in 0u64..300, b0 in 1usize..64, linear in any::<bool>()) {
        let sched = DropSchedule::mslg(64, b0, 4, 600, 6, 0).unwrap();
        let ledger = LayerTokenLedger::for_schedule(&sched, 6, 1000).unwrap();
        let decay = if linear { Decay::Linear } else { Decay::Cosine };
        let cfg = lr(1000, warmup, decay, LrAxis::LayerToken);
        let Ok(warm) = lt_warmup_iterations(&sched, 6, &cfg) else { return Ok(()); };
        let curve: Vec<f64> = (0..=1000).map(|t| lr_at(&cfg, &ledger, t).unwrap()).collect();
        for t in 0..1000usize {
            if (t as u64) + 1 < warm {
                prop_assert!(curve[t + 1] >= curve[t]);
            } else if t as u64 >= warm {
                prop_assert!(curve[t + 1] <= curve[t]);
            }
        }
    }
}
