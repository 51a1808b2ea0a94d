//! Invariants checked over randomly generated inputs.

use std::collections::BTreeSet;

use marl_evo::config::RunConfig;
use marl_evo::grpo::{clipped_term, compute_advantages, select_topk, Selection};
use marl_evo::memory::{compute_bounds, plan_similarity, softmax, MemoryConfig, MemoryStore, MemoryUpdate, SimilarityMode};
use marl_evo::reward::efficiency_reward;
use marl_evo::sampler::SamplingCounts;
use marl_evo::text::token_f1;
use proptest::prelude::*;

fn rewards(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, 2..max_len)
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["add", "store", "hours", "price", "12", "7", "ship", "rate"]), 0..6)
        .prop_map(|w| w.join(" "))
}

fn plan() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["math_agent", "qa_agent", "add", "multiply"]), 0..4)
        .prop_map(|p| p.into_iter().map(String::from).collect())
}

/// (query, time, plan, answer, score) of a stored entry.
fn entries() -> impl Strategy<Value = Vec<(String, u64, Vec<String>, String, f64)>> {
    prop::collection::vec((words(), 0..50u64, plan(), words(), -3.0..3.0f64), 0..12)
}

fn store_of(entries: &[(String, u64, Vec<String>, String, f64)]) -> MemoryStore {
    let mut store = MemoryStore::new();
    for (q, t, p, a, s) in entries {
        store.insert(q, *t, p, a, *s);
    }
    store
}

proptest! {
    #[test]
    fn advantages_are_standardized(r in rewards(17)) {
        let set = compute_advantages(&r, 1e-8).unwrap();
        prop_assert_eq!(set.advantages.len(), r.len());
        if set.std > 1e-8 {
            let n = r.len() as f64;
            let mean = set.advantages.iter().sum::<f64>() / n;
            let var = set.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        } else {
            prop_assert!(set.advantages.iter().all(|a| *a == 0.0));
        }
    }

    #[test]
    fn advantages_preserve_order(r in rewards(10)) {
        let set = compute_advantages(&r, 1e-8).unwrap();
        for i in 0..r.len() {
            for j in 0..r.len() {
                if r[i] < r[j] {
                    prop_assert!(set.advantages[i] <= set.advantages[j]);
                }
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(v in prop::collection::vec(-20.0..20.0f64, 1..10), c in -50.0..50.0f64) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x > 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_keeps_the_largest_variances(v in prop::collection::vec(0.0..4.0f64, 0..12), k in 0usize..14) {
        let chosen = select_topk(&v, k);
        prop_assert_eq!(chosen.len(), k.min(v.len()));
        prop_assert!(chosen.windows(2).all(|w| w[0] < w[1]));
        let set: BTreeSet<usize> = chosen.iter().copied().collect();
        for i in 0..v.len() {
            if set.contains(&i) {
                continue;
            }
            for &c in &chosen {
                prop_assert!(v[c] > v[i] || (v[c] == v[i] && c < i));
            }
        }
    }

    #[test]
    fn efficiency_reward_is_a_decreasing_fraction(k in 1usize..200, j in 1usize..200) {
        prop_assume!(j <= k);
        let r = efficiency_reward(j, k).unwrap();
        prop_assert!((0.0..1.0).contains(&r));
        if j < k {
            prop_assert!(efficiency_reward(j + 1, k).unwrap() < r);
        }
        prop_assert!(efficiency_reward(0, k).is_err());
        prop_assert!(efficiency_reward(k + 1, k).is_err());
    }

    #[test]
    fn eviction_postconditions(e in entries(), threshold in -2.0..2.0f64, capacity in 1usize..8) {
        let mut store = store_of(&e);
        let before = store.entries().to_vec();
        let report = store.evict(threshold, capacity);
        prop_assert!(store.len() <= capacity);
        prop_assert!(store.entries().iter().all(|x| x.score >= threshold));
        // every survivor outranks every entry removed for capacity
        for gone in before.iter().filter(|x| report.over_capacity.contains(&x.id)) {
            for kept in store.entries() {
                prop_assert!((kept.score, kept.time, kept.id) > (gone.score, gone.time, gone.id));
            }
        }
        let eligible = before.iter().filter(|x| x.score >= threshold).count();
        prop_assert_eq!(store.len(), eligible.min(capacity));
    }

    #[test]
    fn bounds_are_symmetric_around_the_mean(r in prop::collection::vec(-5.0..5.0f64, 1..20)) {
        let b = compute_bounds(&r);
        prop_assert!(b.lower <= b.mean && b.mean <= b.upper);
        prop_assert!(((b.upper - b.mean) - (b.mean - b.lower)).abs() < 1e-12);
        prop_assert!(((b.upper - b.lower) - 3.92 * b.std).abs() < 1e-12);
    }

    #[test]
    fn decay_never_raises_scores(e in entries(), t in 0u64..60, alpha in 0.0..2.0f64, keep in prop::collection::btree_set(0u64..12, 0..4)) {
        let mut store = store_of(&e);
        let before = store.entries().to_vec();
        store.decay_others(&keep, t, alpha);
        for (old, new) in before.iter().zip(store.entries()) {
            prop_assert!(new.score <= old.score);
            if keep.contains(&old.id) || old.time == t {
                prop_assert_eq!(new.score, old.score);
            }
        }
    }

    #[test]
    fn insertion_happens_exactly_above_the_band(
        e in entries(),
        r in prop::collection::vec(0.0..2.0f64, 1..10),
        pick in 0usize..10,
        query in words(),
        p in plan(),
        output in words(),
    ) {
        let mut store = store_of(&e);
        let bounds = compute_bounds(&r);
        let reward = r[pick % r.len()];
        let recalled = store.recall(&query, 3);
        let update = MemoryUpdate { query: &query, plan: &p, output: &output, reward, mode: SimilarityMode::ToolCall };
        let len = store.len();
        let report = store.update(&update, &recalled, 60, &bounds, &MemoryConfig::default());
        prop_assert_eq!(report.inserted.is_some(), reward > bounds.upper);
        prop_assert_eq!(store.len(), len + report.inserted.is_some() as usize);
        // rewards inside the band leave recalled entries alone
        if reward >= bounds.lower && reward <= bounds.upper {
            prop_assert!(report.adjusted.is_empty());
        }
    }

    #[test]
    fn sampling_counts_follow_the_budgets(budgets in prop::collection::vec(1usize..10, 0..8)) {
        let c = SamplingCounts::for_budgets(&budgets);
        prop_assert_eq!(c.memberships, budgets.iter().sum::<usize>());
        prop_assert_eq!(c.fresh_rollouts + budgets.len(), c.memberships);
        prop_assert_eq!(c.distinct_rollouts, c.fresh_rollouts + 1);
        prop_assert!(c.naive_bound >= c.distinct_rollouts as u128 || budgets.is_empty());
    }

    #[test]
    fn config_survives_toml(
        lr in 1e-6..1.0f64,
        groups in 2usize..10,
        k in 0usize..10,
        seed in any::<u32>(),
        recall in 0usize..5,
        all in any::<bool>(),
        eff in any::<bool>(),
    ) {
        let cfg = RunConfig {
            learning_rate: lr,
            num_groups: groups,
            topk_groups: k,
            seed: seed as u64,
            recall_n: recall,
            selection: if all { Selection::All } else { Selection::Topk },
            efficiency_reward: eff,
            ..RunConfig::default()
        };
        prop_assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn similarities_are_symmetric_and_bounded(a in words(), b in words(), pa in plan(), pb in plan()) {
        let f = token_f1(&a, &b);
        prop_assert_eq!(f, token_f1(&b, &a));
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(token_f1(&a, &a), 1.0);
        let s = plan_similarity(&pa, &pb);
        prop_assert_eq!(s, plan_similarity(&pb, &pa));
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(plan_similarity(&pa, &pa), 1.0);
    }

    #[test]
    fn clipping_never_exceeds_the_unclipped_term(ratio in 0.0..3.0f64, adv in -3.0..3.0f64, eps in 0.05..0.5f64) {
        let term = clipped_term(ratio, adv, eps);
        prop_assert!(term <= ratio * adv + 1e-15);
        if (1.0 - eps..=1.0 + eps).contains(&ratio) {
            prop_assert!((term - ratio * adv).abs() < 1e-15);
        }
    }

    #[test]
    fn stores_persist_exactly(e in entries()) {
        let store = store_of(&e);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.jsonl");
        store.save(&path).unwrap();
        prop_assert_eq!(MemoryStore::load(&path).unwrap(), store);
    }
}
