use proptest::prelude::*;

use orchestra::pool::Usd;
use orchestra::reward::{
    normalize_cost, normalize_sqrt, terminal_reward, NormalizerConfig, NormalizerState, RewardError, SHAPING_CAP,
};

/// Buffer holding √c = 1..=100, fed as costs k² USD.
fn hundred() -> NormalizerState {
    let mut state = NormalizerState::new(NormalizerConfig::default()).unwrap();
    for k in 1..=100u32 {
        state.push(Usd::from_f64(f64::from(k * k)));
    }
    state
}

fn oracle_reward(b: bool, c_hat: f64, s: f64, alpha: f64) -> f64 {
    let gate = if b { 1.0 } else { 0.0 };
    gate * ((1.0 - alpha) + alpha * (1.0 - c_hat)) + (1.0 - gate) * s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn correctness_dominates_cost(b in any::<bool>(), c_hat in 0.0f64..=1.0, s in 0.0f64..=SHAPING_CAP) {
        let r = terminal_reward(b, c_hat, s, 0.1).unwrap().value;
        if b {
            prop_assert!(r >= 0.9);
        } else {
            prop_assert!(r <= 0.10);
        }
    }

    #[test]
    fn reward_matches_the_formula(b in any::<bool>(), c_hat in 0.0f64..=1.0, s in 0.0f64..=SHAPING_CAP, alpha in 0.0f64..=1.0) {
        let r = terminal_reward(b, c_hat, s, alpha).unwrap().value;
        prop_assert!((r - oracle_reward(b, c_hat, s, alpha)).abs() <= 1e-12);
    }

    #[test]
    fn normalized_cost_is_monotone(a in 0.0f64..20_000.0, d in 0.0f64..5_000.0) {
        let state = hundred();
        let lo = normalize_cost(&state, Usd::from_f64(a));
        let hi = normalize_cost(&state, Usd::from_f64(a + d));
        prop_assert!((0.0..=1.0).contains(&lo));
        prop_assert!(lo <= hi);
    }
}

#[test]
fn median_cost_sits_at_one_half() {
    let state = hundred();
    assert_eq!(state.bracket(), Some((5.0, 95.0)));
    assert_eq!(normalize_cost(&state, Usd::from_f64(2500.0)), 0.5);
}

#[test]
fn normalizer_clamps_both_ends() {
    let state = hundred();
    assert_eq!(normalize_cost(&state, Usd::from_f64(0.0)), 0.0);
    assert_eq!(normalize_sqrt(&state, 5.0), 0.0);
    assert_eq!(normalize_sqrt(&state, 95.0), 1.0);
    assert_eq!(normalize_cost(&state, Usd::from_f64(1.0e6)), 1.0);
}

#[test]
fn warmup_and_flat_buffers_give_zero() {
    let mut state = NormalizerState::new(NormalizerConfig::default()).unwrap();
    for _ in 0..29 {
        state.push_sqrt(1.0);
    }
    assert_eq!(state.bracket(), None);
    assert_eq!(normalize_sqrt(&state, 50.0), 0.0);
    state.push_sqrt(1.0);
    assert_eq!(state.bracket(), Some((1.0, 1.0)));
    assert_eq!(normalize_sqrt(&state, 50.0), 0.0);
}

#[test]
fn buffer_evicts_oldest_at_capacity() {
    let config = NormalizerConfig {
        capacity: 10,
        warmup: 1,
        ..NormalizerConfig::default()
    };
    let mut state = NormalizerState::new(config).unwrap();
    for k in 1..=20 {
        state.push_sqrt(f64::from(k));
    }
    assert_eq!(state.len(), 10);
    assert_eq!(state.bracket(), Some((11.0, 20.0)));
}

#[test]
fn out_of_range_inputs_are_rejected() {
    assert!(matches!(
        terminal_reward(true, 1.5, 0.0, 0.1),
        Err(RewardError::Domain { name: "c_hat", .. })
    ));
    assert!(matches!(
        terminal_reward(false, 0.0, 0.2, 0.1),
        Err(RewardError::Domain { name: "shaping_s", .. })
    ));
    assert!(matches!(
        terminal_reward(true, 0.0, 0.0, -0.1),
        Err(RewardError::Domain { name: "alpha", .. })
    ));
    let bad = NormalizerConfig {
        lo_pct: 95.0,
        hi_pct: 5.0,
        ..NormalizerConfig::default()
    };
    assert!(NormalizerState::new(bad).is_err());
}
