use std::collections::BTreeSet;

use proptest::prelude::*;

use orchestra::pool::{anonymize_pool, load_registry, pair_cost, AdmissiblePair, AnonymizedView, PoolRegistry};
use orchestra::workers::UsageRecord;

fn registry(prompt_micro: u32, completion_micro: u32) -> PoolRegistry {
    let src = format!(
        r#"{{"primitives":[{{"primitive_id":"direct_answer","cluster":"answer_reason"}}],
            "workers":[{{"worker_id":"w","prompt_price":{},"completion_price":{},"skills":["direct_answer"]}},
                       {{"worker_id":"v","prompt_price":1,"completion_price":1,"skills":["direct_answer"]}},
                       {{"worker_id":"u","prompt_price":2,"completion_price":3,"skills":["direct_answer"]}}]}}"#,
        f64::from(prompt_micro) / 1e6,
        f64::from(completion_micro) / 1e6
    );
    load_registry(&src).unwrap()
}

proptest! {
    #[test]
    fn call_costs_add_exactly(
        prices in (0u32..100_000_000, 0u32..100_000_000),
        a in (0u64..1_000_000, 0u64..1_000_000),
        b in (0u64..1_000_000, 0u64..1_000_000),
    ) {
        let reg = registry(prices.0, prices.1);
        let pair = AdmissiblePair::new("w", "direct_answer");
        let (ua, ub) = (UsageRecord::new(a.0, a.1), UsageRecord::new(b.0, b.1));
        let split = pair_cost(&reg, &pair, &ua).unwrap() + pair_cost(&reg, &pair, &ub).unwrap();
        let joint = pair_cost(&reg, &pair, &(ua + ub)).unwrap();
        prop_assert_eq!(split, joint);
        // micro-dollar prices per million tokens are one pico-dollar per token each
        let want = i128::from(prices.0) * i128::from(a.0) + i128::from(prices.1) * i128::from(a.1);
        prop_assert_eq!(pair_cost(&reg, &pair, &ua).unwrap().pico(), want);
    }

    #[test]
    fn anonymization_is_a_seeded_bijection(seed in any::<u64>()) {
        let reg = registry(1, 1);
        let view = anonymize_pool(&reg, seed);
        prop_assert_eq!(&view, &anonymize_pool(&reg, seed));
        let ids: BTreeSet<&str> = view.entries().map(|(_, w)| w).collect();
        prop_assert_eq!(ids, BTreeSet::from(["u", "v", "w"]));
        for (label, worker) in view.entries() {
            prop_assert_eq!(view.worker_of(&label), Some(worker));
            prop_assert_eq!(view.label_of(worker), Some(label));
        }
        prop_assert_eq!(view.worker_of(&AnonymizedView::label(3)), None);
    }
}
