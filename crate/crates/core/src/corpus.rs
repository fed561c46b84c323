//! Search-log ingestion: query normalization, 30-minute session splitting,
//! (previous query, prefix, next query) triplet sampling and temporal splits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Idle time (seconds) that ends a session.
pub const SESSION_GAP_SECS: u64 = 1800;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub user_id: String,
    pub query: String,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub user_id: String,
    /// Normalized queries with their timestamps.
    pub queries: Vec<(String, u64)>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn start(&self) -> u64 {
        self.queries.first().map(|q| q.1).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryTriplet {
    pub prev_query: String,
    pub prefix: String,
    pub next_query: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub triplets: Vec<QueryTriplet>,
}

/// Label vocabulary built from the train split's next queries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelVocab {
    labels: Vec<String>,
    counts: Vec<u64>,
    ids: HashMap<String, u32>,
}

impl LabelVocab {
    /// Ids are assigned in lexicographic order of the label string.
    pub fn from_next_queries<'a, I: IntoIterator<Item = &'a str>>(queries: I) -> Self {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for q in queries {
            *freq.entry(q).or_default() += 1;
        }
        let mut entries: Vec<_> = freq.into_iter().collect();
        entries.sort_unstable_by(|a, b| a.0.cmp(b.0));
        let labels: Vec<String> = entries.iter().map(|(l, _)| l.to_string()).collect();
        let counts = entries.iter().map(|(_, c)| *c).collect();
        Self::assemble(labels, counts)
    }

    pub fn from_labels(labels: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if labels.len() != counts.len() {
            return Err(Error::invalid("label and count lists differ in length"));
        }
        let vocab = Self::assemble(labels, counts);
        if vocab.ids.len() != vocab.labels.len() {
            let mut seen = std::collections::HashSet::new();
            let dup = vocab.labels.iter().find(|l| !seen.insert(*l)).unwrap();
            return Err(Error::DuplicateLabel(dup.clone()));
        }
        Ok(vocab)
    }

    fn assemble(labels: Vec<String>, counts: Vec<u64>) -> Self {
        let ids = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i as u32))
            .collect();
        LabelVocab { labels, counts, ids }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<u32> {
        self.ids.get(label).copied()
    }

    pub fn label(&self, id: u32) -> &str {
        &self.labels[id as usize]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Train-split frequency of each label.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count_of(&self, label: &str) -> u64 {
        self.id(label).map(|i| self.counts[i as usize]).unwrap_or(0)
    }

    /// `labels.txt`: one label per line, line number = label id.
    pub fn write_labels(&self, path: &Path) -> Result<()> {
        write_lines(path, self.labels.iter().map(String::as_str))
    }

    /// Per-label train frequencies, aligned with `labels.txt`.
    pub fn write_counts(&self, path: &Path) -> Result<()> {
        let lines: Vec<String> = self.counts.iter().map(u64::to_string).collect();
        write_lines(path, lines.iter().map(String::as_str))
    }

    pub fn load(labels_path: &Path, counts_path: Option<&Path>) -> Result<Self> {
        let labels = read_lines(labels_path)?;
        let counts = match counts_path {
            Some(p) => read_lines(p)?
                .iter()
                .map(|l| {
                    l.parse::<u64>()
                        .map_err(|e| Error::format("label counts", e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?,
            None => vec![1; labels.len()],
        };
        Self::from_labels(labels, counts)
    }
}

/// Lowercases, turns periods into spaces, drops every character outside
/// `[a-z0-9 ]`, collapses whitespace runs and trims.
pub fn normalize_query(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars().flat_map(char::to_lowercase) {
        let c = if c == '.' { ' ' } else { c };
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_ascii_lowercase() || c.is_ascii_digit() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

/// Normalizes a typed prefix like a query but keeps one trailing space when
/// the raw input ends in a separator, since sampled prefixes may end at a
/// word boundary.
pub fn normalize_prefix(raw: &str) -> String {
    let mut out = normalize_query(raw);
    let trailing = raw.chars().last().is_some_and(|c| c.is_whitespace() || c == '.');
    if trailing && !out.is_empty() {
        out.push(' ');
    }
    out
}

/// Reads `user_id \t query \t epoch_seconds` lines. A leading header line
/// (non-numeric timestamp on line 1) is skipped; records whose query is blank
/// are dropped.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    parse_log(BufReader::new(file))
}

pub fn parse_log<R: BufRead>(reader: R) -> Result<Vec<LogRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (user, query, ts) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(q), Some(t)) => (u, q, t),
            _ => {
                return Err(Error::format(
                    "log record",
                    format!("line {}: expected 3 tab-separated fields", lineno + 1),
                ))
            }
        };
        let timestamp = match ts.trim().parse::<u64>() {
            Ok(t) => t,
            Err(_) if lineno == 0 => continue,
            Err(e) => {
                return Err(Error::format(
                    "log record",
                    format!("line {}: bad timestamp {ts:?}: {e}", lineno + 1),
                ))
            }
        };
        if query.trim().is_empty() {
            continue;
        }
        records.push(LogRecord {
            user_id: user.to_string(),
            query: query.to_string(),
            timestamp,
        });
    }
    Ok(records)
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}\t{}\t{}", r.user_id, r.query, r.timestamp)?;
    }
    w.flush()?;
    Ok(())
}

/// Groups records into sessions. Records are (stably) ordered by
/// `(user_id, timestamp)` first, so the output does not depend on input order
/// across users. Queries that normalize to nothing are dropped and a query
/// equal to the previous kept query of the session is collapsed.
pub fn split_sessions(records: &[LogRecord]) -> Vec<Session> {
    let mut order: Vec<&LogRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        a.user_id
            .cmp(&b.user_id)
            .then(a.timestamp.cmp(&b.timestamp))
    });

    let mut sessions = Vec::new();
    let mut current: Option<Session> = None;
    for rec in order {
        let query = normalize_query(&rec.query);
        if query.is_empty() {
            continue;
        }
        if let Some(s) = current.as_mut() {
            let (last_q, last_t) = s.queries.last().expect("sessions are never empty");
            if s.user_id == rec.user_id && rec.timestamp - last_t < SESSION_GAP_SECS {
                if *last_q != query {
                    s.queries.push((query, rec.timestamp));
                }
                continue;
            }
            sessions.push(current.take().unwrap());
        }
        current = Some(Session {
            user_id: rec.user_id.clone(),
            queries: vec![(query, rec.timestamp)],
        });
    }
    sessions.extend(current);
    sessions
}

/// Emits `len - 1` triplets `(q_i, prefix(q_{i+1}), q_{i+1})`, each prefix
/// length drawn uniformly from `1..=len(q_{i+1})`.
pub fn make_triplets(session: &Session, rng_seed: u64) -> Vec<QueryTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    session
        .queries
        .windows(2)
        .map(|pair| {
            let (prev, _) = &pair[0];
            let (next, _) = &pair[1];
            let len = rng.gen_range(1..=next.len());
            QueryTriplet {
                prev_query: prev.clone(),
                prefix: next[..len].to_string(),
                next_query: next.clone(),
            }
        })
        .collect()
}

/// Per-session seed derived from the global seed and the session identity,
/// so sampling is independent of how users are ordered or sharded.
pub fn session_seed(seed: u64, session: &Session) -> u64 {
    let mut h = fnv1a(session.user_id.as_bytes());
    h ^= session.start().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    splitmix64(seed ^ splitmix64(h))
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Debug)]
pub struct TemporalSplit {
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
    pub vocab: LabelVocab,
    /// Fraction of test triplets whose next query is in the train vocabulary.
    pub coverage: f64,
}

/// Assigns each session to train / dev / test by its first timestamp:
/// `< dev_start` → train, `< test_start` → dev, otherwise test.
pub fn temporal_split(
    sessions: &[Session],
    dev_start: u64,
    test_start: u64,
    seed: u64,
) -> Result<TemporalSplit> {
    if dev_start > test_start {
        return Err(Error::invalid("split boundaries must be ordered"));
    }
    let mut buckets: [Vec<QueryTriplet>; 3] = Default::default();
    for s in sessions {
        let slot = if s.start() < dev_start {
            0
        } else if s.start() < test_start {
            1
        } else {
            2
        };
        buckets[slot].extend(make_triplets(s, session_seed(seed, s)));
    }
    let [train, dev, test] = buckets;
    for (name, split) in [("train", &train), ("dev", &dev), ("test", &test)] {
        if split.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    let vocab = LabelVocab::from_next_queries(train.iter().map(|t| t.next_query.as_str()));
    let seen = test
        .iter()
        .filter(|t| vocab.id(&t.next_query).is_some())
        .count();
    let coverage = seen as f64 / test.len() as f64;
    Ok(TemporalSplit {
        train: DatasetSplit {
            name: SplitName::Train,
            triplets: train,
        },
        dev: DatasetSplit {
            name: SplitName::Dev,
            triplets: dev,
        },
        test: DatasetSplit {
            name: SplitName::Test,
            triplets: test,
        },
        vocab,
        coverage,
    })
}

/// Boundaries at the given fractions of sessions ordered by start time.
pub fn quantile_boundaries(sessions: &[Session], train_frac: f64, dev_frac: f64) -> Result<(u64, u64)> {
    if sessions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(0.0..1.0).contains(&train_frac) || dev_frac < 0.0 || train_frac + dev_frac >= 1.0 {
        return Err(Error::invalid("split fractions must be positive and sum below 1"));
    }
    let mut starts: Vec<u64> = sessions.iter().map(Session::start).collect();
    starts.sort_unstable();
    let at = |frac: f64| starts[((starts.len() as f64 * frac) as usize).min(starts.len() - 1)];
    Ok((at(train_frac), at(train_frac + dev_frac)))
}

pub fn write_triplets(path: &Path, triplets: &[QueryTriplet]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_triplets(path: &Path) -> Result<Vec<QueryTriplet>> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub(crate) fn write_lines<'a, I: IntoIterator<Item = &'a str>>(path: &Path, lines: I) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        w.write_all(l.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: &str, query: &str, ts: u64) -> LogRecord {
        LogRecord {
            user_id: user.into(),
            query: query.into(),
            timestamp: ts,
        }
    }

    #[test]
    fn prefix_keeps_one_trailing_space() {
        assert_eq!(normalize_prefix("Nikon  "), "nikon ");
        assert_eq!(normalize_prefix("nikon"), "nikon");
        assert_eq!(normalize_prefix("   "), "");
        assert_eq!(normalize_prefix("a.b."), "a b ");
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_query("Nikon.Camera"), "nikon camera");
        assert_eq!(normalize_query("  LAW of   M*otion! "), "law of motion");
        assert_eq!(normalize_query(""), "");
        assert_eq!(normalize_query("...!!"), "");
        assert_eq!(normalize_query("www.Ebay.com"), "www ebay com");
        assert_eq!(normalize_query("tab\tseparated"), "tab separated");
    }

    #[test]
    fn gap_just_below_threshold_keeps_one_session() {
        let recs = [rec("u", "a", 0), rec("u", "b", 100), rec("u", "c", 1899)];
        let s = split_sessions(&recs);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 3);
    }

    #[test]
    fn gap_at_threshold_starts_new_session() {
        let recs = [rec("u", "a", 0), rec("u", "b", 100), rec("u", "c", 1900)];
        let s = split_sessions(&recs);
        assert_eq!(s.iter().map(Session::len).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn user_change_and_duplicates() {
        let recs = [
            rec("u1", "a", 0),
            rec("u1", "A.", 10),
            rec("u1", "b", 20),
            rec("u2", "c", 30),
            rec("u2", "???", 40),
        ];
        let s = split_sessions(&recs);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].queries, vec![("a".into(), 0), ("b".into(), 20)]);
        assert_eq!(s[1].queries.len(), 1);
        assert!(make_triplets(&s[1], 0).is_empty());
    }

    #[test]
    fn triplet_sampling_is_bounded_and_deterministic() {
        let session = Session {
            user_id: "u".into(),
            queries: vec![("ebay".into(), 0), ("cabbage cutter".into(), 5)],
        };
        let seed = (0..1000u64)
            .find(|&s| make_triplets(&session, s)[0].prefix.len() == 7)
            .expect("some seed samples length 7");
        assert_eq!(
            make_triplets(&session, seed),
            vec![QueryTriplet {
                prev_query: "ebay".into(),
                prefix: "cabbage".into(),
                next_query: "cabbage cutter".into(),
            }]
        );
        assert_eq!(make_triplets(&session, seed), make_triplets(&session, seed));
    }

    #[test]
    fn three_queries_give_two_triplets_and_single_char_prefix_is_full() {
        let session = Session {
            user_id: "u".into(),
            queries: vec![("a b".into(), 0), ("c".into(), 1), ("d e".into(), 2)],
        };
        let t = make_triplets(&session, 42);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].prefix, "c");
        assert!(t[1].next_query.starts_with(&t[1].prefix));
    }

    #[test]
    fn split_that_empties_a_bucket_is_an_error() {
        let recs = [rec("u", "a", 0), rec("u", "b", 10)];
        let sessions = split_sessions(&recs);
        assert!(matches!(
            temporal_split(&sessions, 1000, 2000, 0),
            Err(Error::EmptySplit("dev"))
        ));
    }

    #[test]
    fn split_assigns_by_first_timestamp_and_reports_coverage() {
        let recs = [
            rec("u1", "x", 0),
            rec("u1", "y", 10),
            rec("u2", "x", 5000),
            rec("u2", "z", 5010),
            rec("u3", "x", 9000),
            rec("u3", "y", 9010),
            rec("u4", "x", 9500),
            rec("u4", "w", 9510),
        ];
        let sessions = split_sessions(&recs);
        let split = temporal_split(&sessions, 4000, 8000, 1).unwrap();
        assert_eq!(split.train.triplets.len(), 1);
        assert_eq!(split.dev.triplets.len(), 1);
        assert_eq!(split.test.triplets.len(), 2);
        assert_eq!(split.vocab.labels(), &["y".to_string()]);
        assert!((split.coverage - 0.5).abs() < 1e-12);
    }

    #[test]
    fn vocab_ids_are_dense_and_sorted() {
        let v = LabelVocab::from_next_queries(["b", "a", "b", "c"]);
        assert_eq!(v.labels(), &["a", "b", "c"]);
        assert_eq!(v.counts(), &[1, 2, 1]);
        assert_eq!(v.id("b"), Some(1));
        assert!(LabelVocab::from_labels(vec!["a".into(), "a".into()], vec![1, 1]).is_err());
    }

    #[test]
    fn header_line_is_skipped() {
        let text = "AnonID\tQuery\tQueryTime\n1\tfoo\t10\n1\t  \t11\n2\tbar\t12\n";
        let recs = parse_log(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(parse_log("1\tfoo\tnope\n2\tbar\tx\n".as_bytes()).is_err());
        assert!(parse_log("1\tfoo\n".as_bytes()).is_err());
    }
}
