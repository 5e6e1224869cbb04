//! Mining node selection by counting a random challenge in measurement hashes.
//!
//! Every eligible relay hashes its canonical measurement set and counts how
//! often the decimal challenge occurs in the hex digest. The relay with the
//! strictly largest non-zero count mines. A tie at the top, or an all-zero
//! round, is settled by a uniform draw from the aggregator's random source.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{sha256_hex, MeasurementSet};

/// Deterministic generator used when a seed is given.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Entropy-backed generator for deployments that do not need reproducibility.
pub fn entropy_rng() -> SeededRng {
    SeededRng::from_entropy()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConsensusError {
    #[error("challenge range [{lo}, {hi}] is empty")]
    BadRange { lo: u64, hi: u64 },
    #[error("digest `{0}` is not lowercase hex")]
    BadDigest(String),
    #[error("node {0} reported more than once")]
    DuplicateNode(NodeId),
    #[error("no count reports")]
    Empty,
    #[error("tally has no candidates")]
    EmptyTally,
    #[error("selection was aborted")]
    Aborted,
    #[error("bad eligibility config: {0}")]
    BadConfig(String),
    #[error("invalid node id `{0}`")]
    BadNodeId(String),
}

/// Name of a node within one topology, e.g. `R1` or `DA`.
///
/// Names are restricted to ASCII letters, digits, `-`, `_` and `.` so they can
/// appear in the text formats without escaping.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(name: impl Into<String>) -> Result<Self, ConsensusError> {
        let name = name.into();
        let ok = !name.is_empty()
            && name
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'));
        if ok {
            Ok(NodeId(name))
        } else {
            Err(ConsensusError::BadNodeId(name))
        }
    }

    /// `R1`, `R2`, ... for relay number `i` (1-based).
    pub fn relay(i: usize) -> Self {
        NodeId(format!("R{i}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for NodeId {
    type Err = ConsensusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::new(s)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        NodeId::new(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RandomChallenge {
    value: u64,
    rendered: String,
}

impl RandomChallenge {
    pub fn new(value: u64) -> Self {
        Self {
            value,
            rendered: value.to_string(),
        }
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    /// Decimal text searched for in digests.
    pub fn rendered(&self) -> &str {
        &self.rendered
    }
}

pub fn generate_challenge<R: RngCore + ?Sized>(
    rng: &mut R,
    lo: u64,
    hi: u64,
) -> Result<RandomChallenge, ConsensusError> {
    if lo > hi {
        return Err(ConsensusError::BadRange { lo, hi });
    }
    Ok(RandomChallenge::new(rng.gen_range(lo..=hi)))
}

/// Non-overlapping occurrences of the challenge in `digest`, scanned left to
/// right.
pub fn count_occurrences(digest: &str, challenge: &RandomChallenge) -> Result<u32, ConsensusError> {
    if digest.is_empty()
        || !digest
            .bytes()
            .all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
    {
        return Err(ConsensusError::BadDigest(digest.to_string()));
    }
    Ok(digest.matches(challenge.rendered()).count() as u32)
}

/// Digest of a measurement set as hashed for counting.
pub fn measurement_digest(data: &MeasurementSet) -> String {
    sha256_hex(data.canonical().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CountReport {
    pub node: NodeId,
    pub digest: String,
    pub count: u32,
}

impl CountReport {
    /// The honest report for `data` under `challenge`.
    pub fn compute(data: &MeasurementSet, challenge: &RandomChallenge) -> Self {
        let digest = measurement_digest(data);
        let count = count_occurrences(&digest, challenge).expect("sha256 hex is a valid digest");
        Self {
            node: data.node().clone(),
            digest,
            count,
        }
    }
}

/// True iff the report's digest and count are exactly what `data` yields.
pub fn verify_report(
    report: &CountReport,
    data: &MeasurementSet,
    challenge: &RandomChallenge,
) -> bool {
    report.node == *data.node()
        && measurement_digest(data) == report.digest
        && count_occurrences(&report.digest, challenge).ok() == Some(report.count)
}

/// Where a tie at the top count draws its winner from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiePool {
    /// Only the nodes sharing the largest count.
    #[default]
    Tied,
    /// Every node in the tally.
    AllEligible,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Decision {
    Unique(NodeId),
    RandomAmong(Vec<NodeId>),
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelectionTally {
    pub reports: BTreeMap<NodeId, u32>,
    /// Descending by count, ascending by name within equal counts.
    pub sorted: Vec<(NodeId, u32)>,
    pub largest_count_multiplicity: usize,
    pub decision: Decision,
}

impl SelectionTally {
    pub fn top_count(&self) -> Option<u32> {
        self.sorted.first().map(|(_, c)| *c)
    }

    /// Marks the round as failed; `resolve` will then refuse to pick a miner.
    pub fn abort(&mut self) {
        self.decision = Decision::Aborted;
    }
}

pub fn build_tally(reports: &[CountReport]) -> Result<SelectionTally, ConsensusError> {
    build_tally_with(reports, TiePool::Tied)
}

pub fn build_tally_with(
    reports: &[CountReport],
    pool: TiePool,
) -> Result<SelectionTally, ConsensusError> {
    tally_counts(reports.iter().map(|r| (r.node.clone(), r.count)), pool)
}

/// Builds a tally directly from `(node, count)` pairs.
pub fn tally_counts(
    counts: impl IntoIterator<Item = (NodeId, u32)>,
    pool: TiePool,
) -> Result<SelectionTally, ConsensusError> {
    let mut map = BTreeMap::new();
    for (node, count) in counts {
        if map.insert(node.clone(), count).is_some() {
            return Err(ConsensusError::DuplicateNode(node));
        }
    }
    if map.is_empty() {
        return Err(ConsensusError::Empty);
    }
    let mut sorted: Vec<(NodeId, u32)> = map.iter().map(|(n, c)| (n.clone(), *c)).collect();
    // stable sort keeps the name order of the BTreeMap within equal counts
    sorted.sort_by_key(|e| std::cmp::Reverse(e.1));
    let top = sorted[0].1;
    let multiplicity = sorted.iter().take_while(|(_, c)| *c == top).count();
    let decision = if top == 0 {
        Decision::RandomAmong(map.keys().cloned().collect())
    } else if multiplicity == 1 {
        Decision::Unique(sorted[0].0.clone())
    } else {
        match pool {
            TiePool::Tied => Decision::RandomAmong(
                sorted[..multiplicity]
                    .iter()
                    .map(|(n, _)| n.clone())
                    .collect(),
            ),
            TiePool::AllEligible => Decision::RandomAmong(map.keys().cloned().collect()),
        }
    };
    Ok(SelectionTally {
        reports: map,
        sorted,
        largest_count_multiplicity: multiplicity,
        decision,
    })
}

/// Picks the mining node. The random source is consulted only for the
/// random branches.
pub fn resolve<R: RngCore + ?Sized>(
    tally: &SelectionTally,
    rng: &mut R,
) -> Result<NodeId, ConsensusError> {
    match &tally.decision {
        Decision::Unique(node) => Ok(node.clone()),
        Decision::RandomAmong(candidates) => candidates
            .choose(rng)
            .cloned()
            .ok_or(ConsensusError::EmptyTally),
        Decision::Aborted => Err(ConsensusError::Aborted),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityConfig {
    pub k: usize,
    pub n: usize,
}

impl EligibilityConfig {
    pub fn new(k: usize, n: usize) -> Result<Self, ConsensusError> {
        if k == 0 || k > n {
            return Err(ConsensusError::BadConfig(format!(
                "need 1 <= k <= n, got k={k} n={n}"
            )));
        }
        Ok(Self { k, n })
    }

    pub fn all(n: usize) -> Self {
        Self { k: n, n }
    }
}

/// A uniform `k`-subset of `nodes`, sorted by name.
pub fn choose_eligible<R: RngCore + ?Sized>(
    cfg: EligibilityConfig,
    nodes: &[NodeId],
    rng: &mut R,
) -> Result<Vec<NodeId>, ConsensusError> {
    if cfg.n != nodes.len() {
        return Err(ConsensusError::BadConfig(format!(
            "n={} but {} nodes given",
            cfg.n,
            nodes.len()
        )));
    }
    if cfg.k == 0 || cfg.k > cfg.n {
        return Err(ConsensusError::BadConfig(format!(
            "need 1 <= k <= n, got k={} n={}",
            cfg.k, cfg.n
        )));
    }
    let mut chosen: Vec<NodeId> = if cfg.k == cfg.n {
        nodes.to_vec()
    } else {
        index::sample(rng, cfg.n, cfg.k)
            .into_iter()
            .map(|i| nodes[i].clone())
            .collect()
    };
    chosen.sort();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn report(node: &str, count: u32) -> CountReport {
        CountReport {
            node: n(node),
            digest: String::new(),
            count,
        }
    }

    /// Independent non-overlapping scan.
    fn scan(hay: &str, needle: &str) -> u32 {
        let (h, nd) = (hay.as_bytes(), needle.as_bytes());
        let (mut i, mut c) = (0, 0);
        while i + nd.len() <= h.len() {
            if &h[i..i + nd.len()] == nd {
                c += 1;
                i += nd.len();
            } else {
                i += 1;
            }
        }
        c
    }

    #[test]
    fn node_id_rules() {
        assert!(NodeId::new("R1").is_ok());
        assert!(NodeId::new("").is_err());
        assert!(NodeId::new("R|1").is_err());
        assert!(NodeId::new("a b").is_err());
        assert_eq!(NodeId::relay(3).as_str(), "R3");
    }

    #[test]
    fn challenge_generation() {
        let mut rng = seeded_rng(1);
        assert_eq!(generate_challenge(&mut rng, 7, 7).unwrap().value(), 7);
        assert_eq!(
            generate_challenge(&mut rng, 9, 1),
            Err(ConsensusError::BadRange { lo: 9, hi: 1 })
        );
        let draw = |seed| {
            let mut r = seeded_rng(seed);
            (0..20)
                .map(|_| generate_challenge(&mut r, 0, 9).unwrap().value())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_eq!(RandomChallenge::new(0).rendered(), "0");
        assert_eq!(RandomChallenge::new(120).rendered(), "120");
    }

    #[test]
    fn challenge_digits_are_uniform() {
        let mut rng = seeded_rng(2024);
        let mut freq = [0u32; 10];
        for _ in 0..10_000 {
            freq[generate_challenge(&mut rng, 0, 9).unwrap().value() as usize] += 1;
        }
        // binomial(10^4, 0.1): sigma = 30
        for f in freq {
            assert!((f as f64 - 1000.0).abs() <= 90.0, "{freq:?}");
        }
    }

    #[test]
    fn counting_examples() {
        let c = |d: &str, r| count_occurrences(d, &RandomChallenge::new(r)).unwrap();
        assert_eq!(c("abcdef", 7), 0);
        assert_eq!(c("777", 77), 1);
        assert_eq!(c("17a71b7", 7), 3);
        assert!(matches!(
            count_occurrences("ABC", &RandomChallenge::new(1)),
            Err(ConsensusError::BadDigest(_))
        ));
        assert!(count_occurrences("", &RandomChallenge::new(1)).is_err());
    }

    #[test]
    fn counting_agrees_with_scan() {
        let mut rng = seeded_rng(5);
        for _ in 0..2000 {
            let d = sha256_hex(&rng.gen::<[u8; 16]>());
            let ch = RandomChallenge::new(rng.gen_range(0..200));
            let got = count_occurrences(&d, &ch).unwrap();
            assert_eq!(got, scan(&d, ch.rendered()));
            assert!(got as usize <= 64 / ch.rendered().len());
        }
    }

    #[test]
    fn tally_examples() {
        let t = build_tally(&[
            report("R1", 3),
            report("R2", 1),
            report("R3", 3),
            report("R4", 0),
        ])
        .unwrap();
        assert_eq!(
            t.sorted,
            vec![(n("R1"), 3), (n("R3"), 3), (n("R2"), 1), (n("R4"), 0)]
        );
        assert_eq!(t.largest_count_multiplicity, 2);
        assert_eq!(t.decision, Decision::RandomAmong(vec![n("R1"), n("R3")]));

        let t = build_tally(&[report("R1", 0), report("R2", 0)]).unwrap();
        assert_eq!(t.largest_count_multiplicity, 2);
        assert_eq!(t.top_count(), Some(0));

        let t = build_tally(&[report("R1", 5)]).unwrap();
        assert_eq!(t.largest_count_multiplicity, 1);
        assert_eq!(t.decision, Decision::Unique(n("R1")));

        assert_eq!(build_tally(&[]), Err(ConsensusError::Empty));
        assert_eq!(
            build_tally(&[report("R1", 1), report("R1", 2)]),
            Err(ConsensusError::DuplicateNode(n("R1")))
        );
    }

    #[test]
    fn tally_all_eligible_pool() {
        let t = build_tally_with(
            &[report("R1", 3), report("R2", 1), report("R3", 3)],
            TiePool::AllEligible,
        )
        .unwrap();
        assert_eq!(
            t.decision,
            Decision::RandomAmong(vec![n("R1"), n("R2"), n("R3")])
        );
    }

    #[test]
    fn resolve_branches() {
        let mut rng = seeded_rng(9);
        let t = build_tally(&[report("R2", 4), report("R1", 1), report("R3", 0)]).unwrap();
        assert_eq!(resolve(&t, &mut rng).unwrap(), n("R2"));

        let t = build_tally(&[report("R1", 3), report("R3", 3), report("R2", 1)]).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            seen.insert(resolve(&t, &mut rng).unwrap());
        }
        assert_eq!(seen, [n("R1"), n("R3")].into_iter().collect());

        let zeros: Vec<_> = (1..=4).map(|i| report(&format!("R{i}"), 0)).collect();
        let t = build_tally(&zeros).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..400 {
            seen.insert(resolve(&t, &mut rng).unwrap());
        }
        assert_eq!(seen.len(), 4);

        let mut t = build_tally(&[report("R1", 2)]).unwrap();
        t.abort();
        assert_eq!(resolve(&t, &mut rng), Err(ConsensusError::Aborted));
        t.decision = Decision::RandomAmong(vec![]);
        assert_eq!(resolve(&t, &mut rng), Err(ConsensusError::EmptyTally));
    }

    #[test]
    fn unique_resolution_ignores_rng() {
        let t = build_tally(&[report("R2", 4), report("R1", 1)]).unwrap();
        let mut a = seeded_rng(1);
        let before = a.clone();
        resolve(&t, &mut a).unwrap();
        assert_eq!(a, before);
    }

    fn data(node: &str, v: f64) -> MeasurementSet {
        use crate::ledger::{MeasurementRecord, Quantity, Value};
        MeasurementSet::new(
            n(node),
            1,
            vec![MeasurementRecord::new(
                1,
                Quantity::Vm,
                11,
                Value::from_f64(v),
            )],
        )
        .unwrap()
    }

    #[test]
    fn report_verification() {
        let ch = RandomChallenge::new(7);
        let d = data("R1", 1.0);
        let honest = CountReport::compute(&d, &ch);
        assert!(verify_report(&honest, &d, &ch));

        let mut inflated = honest.clone();
        inflated.count += 1;
        assert!(!verify_report(&inflated, &d, &ch));

        let mut foreign = honest.clone();
        foreign.digest = measurement_digest(&data("R1", 2.0));
        foreign.count = count_occurrences(&foreign.digest, &ch).unwrap();
        assert!(!verify_report(&foreign, &d, &ch));
    }

    #[test]
    fn eligibility() {
        let nodes: Vec<NodeId> = (1..=4).map(NodeId::relay).collect();
        let mut rng = seeded_rng(3);
        assert_eq!(
            choose_eligible(EligibilityConfig::all(4), &nodes, &mut rng).unwrap(),
            nodes
        );
        let one = |seed| {
            choose_eligible(
                EligibilityConfig::new(1, 4).unwrap(),
                &nodes,
                &mut seeded_rng(seed),
            )
            .unwrap()
        };
        assert_eq!(one(17), one(17));
        assert_eq!(one(17).len(), 1);
        assert!(EligibilityConfig::new(5, 4).is_err());
        assert!(EligibilityConfig::new(0, 4).is_err());
        assert!(choose_eligible(EligibilityConfig::all(3), &nodes, &mut rng).is_err());
    }

    #[test]
    fn eligibility_is_uniform() {
        let nodes: Vec<NodeId> = (1..=4).map(NodeId::relay).collect();
        let cfg = EligibilityConfig::new(2, 4).unwrap();
        let mut rng = seeded_rng(77);
        let mut hits = BTreeMap::new();
        for _ in 0..10_000 {
            let s = choose_eligible(cfg, &nodes, &mut rng).unwrap();
            assert_eq!(s.len(), 2);
            assert!(s[0] < s[1]);
            for node in s {
                *hits.entry(node).or_insert(0u32) += 1;
            }
        }
        // each node is in a subset w.p. 1/2: sigma = 50
        for (_, h) in hits {
            assert!((h as f64 - 5000.0).abs() <= 150.0, "{h}");
        }
    }
}
