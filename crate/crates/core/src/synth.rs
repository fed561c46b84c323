//! Synthetic search logs with session structure.
//!
//! Queries are built from pseudo-words grouped into topics. Inside a session
//! the next query usually stays on the previous query's topic, topic and
//! query popularity are Zipf-distributed, and a fraction of queries are
//! one-off tail queries that never repeat.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LogRecord, SESSION_GAP_SECS};
use crate::error::{Error, Result};

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br", "ch", "cl",
    "dr", "fl", "gr", "kr", "pl", "qu", "sh", "st", "tr", "x", "y",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "y"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "x", "ck", "m", "l"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub sessions: usize,
    pub sessions_per_user: usize,
    pub topics: usize,
    /// Distinct head queries per topic.
    pub queries_per_topic: usize,
    /// Leading words that identify a topic.
    pub heads_per_topic: usize,
    pub words_per_topic: usize,
    /// Probability that a query starts with its topic's head word.
    pub head_first: f64,
    /// Modifier words shared across all topics.
    pub shared_words: usize,
    /// Probability that the next query keeps the previous query's topic.
    pub stay_prob: f64,
    /// Probability that a query is a one-off never seen elsewhere.
    pub tail_prob: f64,
    pub topic_zipf: f64,
    pub query_zipf: f64,
    /// Mean number of queries per session beyond the first (at least 1).
    pub mean_extra_queries: f64,
    /// Log period in seconds.
    pub span_secs: u64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            sessions: 1000,
            sessions_per_user: 4,
            topics: 100,
            queries_per_topic: 600,
            heads_per_topic: 3,
            words_per_topic: 24,
            head_first: 0.75,
            shared_words: 40,
            stay_prob: 0.4,
            tail_prob: 0.2,
            topic_zipf: 0.8,
            query_zipf: 1.0,
            mean_extra_queries: 1.5,
            span_secs: 90 * 86_400,
            seed: 0,
        }
    }
}

struct Topic {
    queries: Vec<String>,
    heads: Vec<String>,
    popularity: WeightedIndex<f64>,
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-s))).expect("non-empty positive weights")
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w.push_str(CODAS.choose(rng).unwrap());
    w
}

/// `n` distinct words not already in `taken`.
fn fresh_words(n: usize, taken: &mut HashSet<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if w.len() >= 2 && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// A topic query: a head word, up to two topic words and at most one
/// shared modifier. Most queries lead with the head so related queries share
/// long prefixes; the rest use a random word order.
fn compose(heads: &[String], words: &[String], shared: &[String], p: &SynthParams, rng: &mut ChaCha8Rng) -> String {
    let head = heads.choose(rng).unwrap().as_str();
    let n_words = rng.gen_range(0..=2);
    let mut rest: Vec<&str> = words
        .choose_multiple(rng, n_words)
        .map(String::as_str)
        .collect();
    if !shared.is_empty() && rng.gen_bool(0.3) {
        rest.push(shared.choose(rng).unwrap());
    }
    rest.shuffle(rng);
    let mut parts = vec![head];
    parts.extend(rest);
    if !rng.gen_bool(p.head_first) {
        parts.shuffle(rng);
    }
    parts.join(" ")
}

/// Generates raw log records sorted by user and time.
pub fn generate(p: &SynthParams) -> Result<Vec<LogRecord>> {
    if p.sessions == 0 || p.topics == 0 || p.queries_per_topic == 0 || p.heads_per_topic == 0 {
        return Err(Error::invalid("synthetic log needs sessions, topics, queries and head words"));
    }
    for (name, v) in [("stay_prob", p.stay_prob), ("tail_prob", p.tail_prob), ("head_first", p.head_first)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut taken = HashSet::new();
    let shared = fresh_words(p.shared_words, &mut taken, &mut rng);
    let mut topics = Vec::with_capacity(p.topics);
    for _ in 0..p.topics {
        let heads = fresh_words(p.heads_per_topic, &mut taken, &mut rng);
        let words = fresh_words(p.words_per_topic, &mut taken, &mut rng);
        let mut seen = HashSet::new();
        let mut queries = Vec::with_capacity(p.queries_per_topic);
        let mut attempts = 0;
        while queries.len() < p.queries_per_topic && attempts < p.queries_per_topic * 20 {
            attempts += 1;
            let q = compose(&heads, &words, &shared, p, &mut rng);
            if seen.insert(q.clone()) {
                queries.push(q);
            }
        }
        let popularity = zipf(queries.len(), p.query_zipf);
        topics.push(Topic {
            queries,
            heads,
            popularity,
        });
    }
    let topic_pop = zipf(p.topics, p.topic_zipf);
    let per_user = p.sessions_per_user.max(1) as u64;
    let slot = (p.span_secs / per_user).max(2 * SESSION_GAP_SECS);
    let more = 1.0 - 1.0 / p.mean_extra_queries.max(1.0);
    let mut tail_id = 0u64;
    let mut out = Vec::new();
    let mut emitted = 0;
    let mut u = 0;
    while emitted < p.sessions {
        u += 1;
        let user_id = format!("u{u:07}");
        let mut t = rng.gen_range(0..slot);
        while emitted < p.sessions && t < p.span_secs + slot {
            emitted += 1;
            let mut topic = topic_pop.sample(&mut rng);
            let mut prev: Option<String> = None;
            let mut n = 2;
            while n < 12 && rng.gen_bool(more) {
                n += 1;
            }
            for i in 0..n {
                if i > 0 && !rng.gen_bool(p.stay_prob) {
                    topic = topic_pop.sample(&mut rng);
                }
                let tp = &topics[topic];
                let mut q = if rng.gen_bool(p.tail_prob) {
                    tail_id += 1;
                    let w = tp.heads.choose(&mut rng).unwrap();
                    format!("{w} {}", tail_word(tail_id))
                } else {
                    tp.queries[tp.popularity.sample(&mut rng)].clone()
                };
                // consecutive repeats would be collapsed by ingestion anyway
                let mut tries = 0;
                while prev.as_deref() == Some(q.as_str()) && tries < 16 {
                    q = tp.queries[rng.gen_range(0..tp.queries.len())].clone();
                    tries += 1;
                }
                let raw = if rng.gen_bool(0.05) { decorate(&q, &mut rng) } else { q.clone() };
                out.push(LogRecord {
                    user_id: user_id.clone(),
                    query: raw,
                    timestamp: t,
                });
                prev = Some(q);
                t += rng.gen_range(5..SESSION_GAP_SECS / 3);
            }
            t += SESSION_GAP_SECS + 1 + rng.gen_range(0..slot);
        }
    }
    Ok(out)
}

/// Surface noise that normalization removes.
fn decorate(q: &str, rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.5) {
        q.to_uppercase()
    } else {
        format!(" {}. ", q.replacen(' ', "  ", 1))
    }
}

/// Unique base-26 word for tail queries.
fn tail_word(mut id: u64) -> String {
    let mut s = String::from("q");
    while id > 0 {
        s.push((b'a' + (id % 26) as u8) as char);
        id /= 26;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{normalize_query, split_sessions};

    fn small() -> SynthParams {
        SynthParams {
            sessions: 300,
            topics: 10,
            queries_per_topic: 30,
            seed: 7,
            ..SynthParams::default()
        }
    }

    #[test]
    fn session_count_and_gaps() {
        let p = small();
        let log = generate(&p).unwrap();
        let sessions = split_sessions(&log);
        assert_eq!(sessions.len(), p.sessions);
        assert!(sessions.iter().all(|s| s.len() >= 2));
        for s in &sessions {
            for w in s.queries.windows(2) {
                assert!(w[1].1 - w[0].1 < SESSION_GAP_SECS);
            }
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthParams { seed: 8, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn queries_normalize_to_themselves_up_to_noise() {
        let log = generate(&small()).unwrap();
        let clean = log.iter().filter(|r| normalize_query(&r.query) == r.query).count();
        assert!(clean as f64 > 0.9 * log.len() as f64);
        assert!(log.iter().all(|r| !normalize_query(&r.query).is_empty()));
    }

    fn share_rate<'a>(pairs: impl Iterator<Item = (&'a str, &'a str)>) -> f64 {
        let (mut hit, mut n) = (0, 0);
        for (a, b) in pairs {
            let words: HashSet<&str> = a.split(' ').collect();
            n += 1;
            hit += b.split(' ').any(|t| words.contains(t)) as usize;
        }
        hit as f64 / n as f64
    }

    #[test]
    fn consecutive_queries_share_words_more_than_random_pairs() {
        let p = SynthParams {
            tail_prob: 0.0,
            shared_words: 0,
            heads_per_topic: 1,
            queries_per_topic: 4,
            ..small()
        };
        let sessions = split_sessions(&generate(&p).unwrap());
        let consecutive = share_rate(
            sessions
                .iter()
                .flat_map(|s| s.queries.windows(2).map(|w| (w[0].0.as_str(), w[1].0.as_str()))),
        );
        let firsts: Vec<&str> = sessions.iter().map(|s| s.queries[0].0.as_str()).collect();
        let random = share_rate(firsts.windows(2).map(|w| (w[0], w[1])));
        assert!(consecutive > 2.0 * random, "{consecutive} vs {random}");
    }

    #[test]
    fn rejects_bad_params() {
        assert!(generate(&SynthParams { sessions: 0, ..small() }).is_err());
        assert!(generate(&SynthParams { stay_prob: 1.5, ..small() }).is_err());
    }
}
