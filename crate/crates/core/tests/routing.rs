mod common;

use common::{random_queue, reference_order};
use fleetsim_core::routing::{dpa_bucket, order_queue, Policy, QueueKey, SchedulerConfig};
use fleetsim_core::types::{Tier, SECOND};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn key(idx: u32, tier: Tier, remaining_s: i64, now: u64) -> QueueKey {
    QueueKey {
        idx,
        arrival_ts: idx as u64,
        tier,
        priority: 0,
        deadline: (now as i64 + remaining_s * SECOND as i64) as u64,
        input_tokens: 100,
        output_tokens: 10,
    }
}

#[test]
fn dpa_six_request_example() {
    let now = 1_000 * SECOND;
    let mut q = vec![
        key(5, Tier::IwNormal, -10, now),
        key(3, Tier::IwFast, 50, now),
        key(0, Tier::IwFast, -60, now),
        key(4, Tier::IwNormal, 40, now),
        key(2, Tier::IwNormal, 8, now),
        key(1, Tier::IwFast, 5, now),
    ];
    let cfg = SchedulerConfig {
        policy: Policy::Dpa,
        tau_n: 30 * SECOND,
        tau_p: 10 * SECOND,
    };
    order_queue(&mut q, now, &cfg);
    let ids: Vec<u32> = q.iter().map(|k| k.idx).collect();
    assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    assert_eq!(dpa_bucket(&q[0], now, cfg.tau_n, cfg.tau_p), 0);
}

#[test]
fn deferred_niw_always_trails() {
    let now = 0;
    let mut q = vec![
        key(0, Tier::IwNormal, 100, now),
        key(1, Tier::Niw, -999, now),
    ];
    q[1].priority = 1;
    q.reverse();
    for policy in Policy::ALL {
        let mut v = q.clone();
        order_queue(
            &mut v,
            now,
            &SchedulerConfig {
                policy,
                tau_n: 0,
                tau_p: 0,
            },
        );
        assert_eq!(v[1].priority, 1, "{policy:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ordering_matches_reference_and_is_a_permutation(
        seed in any::<u64>(),
        tau_n in 0u64..120_000,
        tau_p in 0u64..30_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, now) = random_queue(&mut rng);
        for policy in Policy::ALL {
            let mut got = q.clone();
            order_queue(&mut got, now, &SchedulerConfig { policy, tau_n, tau_p });
            let ids: Vec<u32> = got.iter().map(|k| k.idx).collect();
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..q.len() as u32).collect::<Vec<_>>());
            prop_assert_eq!(ids, reference_order(&q, now, policy, tau_n, tau_p));
        }
    }
}
