//! Ingestion invariants on generated logs.

use std::collections::BTreeMap;

use prefx_core::corpus::{split_sessions, LogRecord, SESSION_GAP_SECS};
use prefx_core::pipeline::{Dataset, IngestParams};
use prefx_core::synth::{generate, SynthParams};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn log(seed: u64) -> Vec<LogRecord> {
    generate(&SynthParams {
        sessions: 120,
        topics: 6,
        queries_per_topic: 30,
        seed,
        ..SynthParams::default()
    })
    .unwrap()
}

/// Reorders whole users, keeping each user's records together.
fn shuffle_users(records: &[LogRecord], seed: u64) -> Vec<LogRecord> {
    let mut by_user: BTreeMap<&str, Vec<LogRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(&r.user_id).or_default().push(r.clone());
    }
    let mut blocks: Vec<Vec<LogRecord>> = by_user.into_values().collect();
    blocks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    blocks.concat()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn user_order_does_not_change_counts(seed in 0u64..1000, perm in any::<u64>()) {
        let records = log(seed);
        let shuffled = shuffle_users(&records, perm);
        let a = split_sessions(&records);
        let b = split_sessions(&shuffled);
        prop_assert_eq!(a.len(), b.len());
        let p = IngestParams { seed, ..IngestParams::default() };
        let (_, sa) = Dataset::from_log(&records, &p).unwrap();
        let (_, sb) = Dataset::from_log(&shuffled, &p).unwrap();
        prop_assert_eq!((sa.train, sa.dev, sa.test), (sb.train, sb.dev, sb.test));
    }

    #[test]
    fn sessions_and_triplets_are_well_formed(seed in 0u64..1000) {
        let records = log(seed);
        for s in split_sessions(&records) {
            prop_assert!(!s.queries.is_empty());
            for w in s.queries.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
                prop_assert!(w[1].1 - w[0].1 < SESSION_GAP_SECS);
            }
        }
        let (ds, _) = Dataset::from_log(&records, &IngestParams { seed, ..IngestParams::default() }).unwrap();
        for t in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
            prop_assert!(!t.prev_query.is_empty());
            prop_assert!(!t.prefix.is_empty() && t.prefix.len() <= t.next_query.len());
            prop_assert!(t.next_query.starts_with(&t.prefix));
        }
        let ids = ds.train_label_ids().unwrap();
        let n = ds.vocab.len() as u32;
        prop_assert!(ids.iter().all(|&i| i < n));
        let mut used = vec![false; n as usize];
        for &i in &ids {
            used[i as usize] = true;
        }
        prop_assert!(used.into_iter().all(|u| u));
    }
}
