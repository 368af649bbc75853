mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;

use common::{all_dags, check_dispatch, frontiers_overlap, no_retry_config, run_dag, single_worker_pool};
use orchestra::grammar::{ObsBlock, PlanBlock, RouteBlock, Subtask, TurnBlock};
use orchestra::scheduler::{
    count_tokens, run_episode, truncate_context, EpisodeSpec, Policy, PolicyAction, PolicyView,
};
use orchestra::workers::BackendRouter;

#[tokio::test]
async fn every_small_dag_dispatches_in_layers() {
    let registry = Arc::new(single_worker_pool(0, false));
    let backend = BackendRouter::from_registry(registry.clone(), 8).unwrap();
    for n in 1..=5 {
        for (i, dag) in all_dags(n).iter().enumerate() {
            let outcome = run_dag(dag, &registry, &backend, i as u64).await;
            check_dispatch(dag, &outcome).unwrap_or_else(|e| panic!("{dag:?}: {e}"));
        }
    }
}

#[tokio::test]
async fn independent_nodes_overlap_in_time() {
    let registry = Arc::new(single_worker_pool(50, true));
    let backend = BackendRouter::from_registry(registry.clone(), 8).unwrap();
    // diamond: 1 -> {2, 3, 4} -> 5
    let dag: BTreeMap<u32, BTreeSet<u32>> = [
        (1, BTreeSet::new()),
        (2, BTreeSet::from([1])),
        (3, BTreeSet::from([1])),
        (4, BTreeSet::from([1])),
        (5, BTreeSet::from([2, 3, 4])),
    ]
    .into();
    let outcome = run_dag(&dag, &registry, &backend, 0).await;
    check_dispatch(&dag, &outcome).unwrap();
    assert!(frontiers_overlap(&outcome));
    let wide = outcome.batches.iter().find(|b| b.ready.len() == 3).unwrap();
    assert_eq!(wide.ready, BTreeSet::from([2, 3, 4]));
}

/// Emits a forward dependency; the scheduler must refuse it without dispatching.
struct CyclicPolicy;

impl Policy for CyclicPolicy {
    fn act(&mut self, view: &PolicyView<'_>) -> PolicyAction {
        if view.turn > 1 {
            return PolicyAction::direct_answer("x");
        }
        let card = &view.workers[0];
        let plan = PlanBlock {
            subtasks: vec![Subtask {
                id: 1,
                depends_on: BTreeSet::from([2]),
                description: "a".into(),
            }],
        };
        PolicyAction::decompose(plan, vec![RouteBlock::new(1, &card.label, &card.skills[0], "a")])
    }
}

#[tokio::test]
async fn invalid_plan_is_recorded_not_dispatched() {
    let registry = Arc::new(single_worker_pool(0, false));
    let backend = BackendRouter::from_registry(registry.clone(), 1).unwrap();
    let spec = EpisodeSpec {
        episode_id: "e".into(),
        seed: 1,
    };
    let (doc, outcome) = run_episode(
        "q",
        &mut CyclicPolicy,
        &registry,
        &backend,
        &no_retry_config(true),
        &spec,
    )
    .await
    .unwrap();
    assert!(outcome.timings.is_empty());
    assert!(!outcome.turns[0].is_valid());
    assert!(doc.turns.is_empty());
    assert_eq!(doc.final_answer(), Some("x"));
}

fn turns_with(bodies: &[String]) -> Vec<TurnBlock> {
    bodies
        .iter()
        .enumerate()
        .map(|(i, body)| {
            let id = i as u32 + 1;
            TurnBlock {
                round: id,
                plan: None,
                routes: vec![RouteBlock::new(id, "m", "s", "step")],
                observations: vec![ObsBlock {
                    subtask_id: id,
                    body: body.clone(),
                }],
                verify: None,
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn truncated_context_fits_the_budget(
        words in proptest::collection::vec(1usize..40, 1..6),
        budget in 1usize..200,
    ) {
        let bodies: Vec<String> = words.iter().map(|n| vec!["w"; *n].join(" ")).collect();
        let turns = turns_with(&bodies);
        if let Ok(ctx) = truncate_context("the query", &turns, budget) {
            prop_assert!(count_tokens(&ctx) <= budget);
            prop_assert!(ctx.contains("the query"));
        }
    }
}
