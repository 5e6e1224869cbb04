//! Telemetry records and their canonical text form.
//!
//! Canonical form of a set: `node:cycle|bus,quantity,index,value;...` with
//! values printed to exactly six decimals. Every node hashes these bytes, so
//! the layout must never change.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::consensus::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MeasurementError {
    #[error("unknown quantity `{0}`")]
    BadQuantity(String),
    #[error("duplicate record bus {bus} {quantity} index {index}")]
    DuplicateRecord {
        bus: u8,
        quantity: Quantity,
        index: u32,
    },
    #[error("malformed measurement text: {0}")]
    Malformed(String),
}

/// Measured quantity at a bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quantity {
    /// Voltage magnitude, per unit.
    Vm,
    /// Voltage phase angle, degrees.
    Vp,
    /// Real power, MW.
    P,
    /// Reactive power, MVAr.
    Q,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [Quantity::Vm, Quantity::Vp, Quantity::P, Quantity::Q];

    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::Vm => "Vm",
            Quantity::Vp => "Vp",
            Quantity::P => "P",
            Quantity::Q => "Q",
        }
    }

    /// 1-based position, used for point indices (`bus * 10 + ordinal`).
    pub fn ordinal(self) -> u32 {
        self as u32 + 1
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Quantity {
    type Err = MeasurementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Quantity::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| MeasurementError::BadQuantity(s.to_string()))
    }
}

/// Decimal value stored as an integer count of millionths.
///
/// Storing the fixed-point form keeps the canonical text and the JSON form in
/// agreement: a value never carries precision that the hash does not see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Value(i64);

impl Value {
    pub const SCALE: i64 = 1_000_000;

    pub fn from_micros(micros: i64) -> Self {
        Value(micros)
    }

    /// Rounds to the nearest millionth.
    pub fn from_f64(v: f64) -> Self {
        Value((v * Self::SCALE as f64).round() as i64)
    }

    pub fn micros(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let scale = Self::SCALE as u64;
        write!(f, "{sign}{}.{:06}", abs / scale, abs % scale)
    }
}

impl FromStr for Value {
    type Err = MeasurementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MeasurementError::Malformed(format!("bad value `{s}`"));
        let (neg, digits) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
        if int.is_empty()
            || frac.len() > 6
            || !int.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(bad());
        }
        let int: i64 = int.parse().map_err(|_| bad())?;
        let frac_val: i64 = if frac.is_empty() {
            0
        } else {
            frac.parse::<i64>().map_err(|_| bad())? * 10i64.pow(6 - frac.len() as u32)
        };
        let micros = int
            .checked_mul(Self::SCALE)
            .and_then(|v| v.checked_add(frac_val))
            .ok_or_else(bad)?;
        Ok(Value(if neg { -micros } else { micros }))
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(Value::from_f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub bus: u8,
    pub quantity: Quantity,
    pub index: u32,
    pub value: Value,
}

impl MeasurementRecord {
    pub fn new(bus: u8, quantity: Quantity, index: u32, value: Value) -> Self {
        Self {
            bus,
            quantity,
            index,
            value,
        }
    }

    fn key(&self) -> (u8, Quantity, u32) {
        (self.bus, self.quantity, self.index)
    }

    pub fn canonical(&self) -> String {
        format!(
            "{},{},{},{}",
            self.bus, self.quantity, self.index, self.value
        )
    }

    fn parse(s: &str) -> Result<Self, MeasurementError> {
        let bad = || MeasurementError::Malformed(format!("bad record `{s}`"));
        let mut parts = s.split(',');
        let (Some(bus), Some(q), Some(index), Some(value), None) = (
            parts.next(),
            parts.next(),
            parts.next(),
            parts.next(),
            parts.next(),
        ) else {
            return Err(bad());
        };
        Ok(Self {
            bus: bus.parse().map_err(|_| bad())?,
            quantity: q.parse()?,
            index: index.parse().map_err(|_| bad())?,
            value: value.parse()?,
        })
    }
}

/// One relay's samples for one cycle. Records are kept sorted by
/// `(bus, quantity, index)` with no duplicate keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct MeasurementSet {
    node: NodeId,
    cycle: u64,
    records: Vec<MeasurementRecord>,
}

impl MeasurementSet {
    pub fn new(
        node: NodeId,
        cycle: u64,
        mut records: Vec<MeasurementRecord>,
    ) -> Result<Self, MeasurementError> {
        records.sort_by_key(MeasurementRecord::key);
        if let Some(w) = records.windows(2).find(|w| w[0].key() == w[1].key()) {
            let (bus, quantity, index) = w[0].key();
            return Err(MeasurementError::DuplicateRecord {
                bus,
                quantity,
                index,
            });
        }
        Ok(Self {
            node,
            cycle,
            records,
        })
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn records(&self) -> &[MeasurementRecord] {
        &self.records
    }

    /// Mutable access to record values for fault injection. Keys stay fixed,
    /// so the ordering invariant holds.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Value> {
        self.records.iter_mut().map(|r| &mut r.value)
    }

    /// Replaces the owner name.
    pub fn relabel(&mut self, node: NodeId) {
        self.node = node;
    }

    pub fn set_cycle(&mut self, cycle: u64) {
        self.cycle = cycle;
    }

    pub fn canonical(&self) -> String {
        let mut out = format!("{}:{}|", self.node, self.cycle);
        for (i, r) in self.records.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            out.push_str(&r.canonical());
        }
        out
    }

    pub fn parse_canonical(s: &str) -> Result<Self, MeasurementError> {
        let bad = || MeasurementError::Malformed(format!("bad set `{s}`"));
        let (head, body) = s.split_once('|').ok_or_else(bad)?;
        let (node, cycle) = head.rsplit_once(':').ok_or_else(bad)?;
        let node = NodeId::new(node).map_err(|_| bad())?;
        let cycle = cycle.parse().map_err(|_| bad())?;
        let records = if body.is_empty() {
            Vec::new()
        } else {
            body.split(';')
                .map(MeasurementRecord::parse)
                .collect::<Result<_, _>>()?
        };
        let set = Self::new(node, cycle, records)?;
        if set.canonical() != s {
            return Err(bad());
        }
        Ok(set)
    }
}

impl<'de> Deserialize<'de> for MeasurementSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            node: NodeId,
            cycle: u64,
            records: Vec<MeasurementRecord>,
        }
        let raw = Raw::deserialize(d)?;
        MeasurementSet::new(raw.node, raw.cycle, raw.records).map_err(serde::de::Error::custom)
    }
}

/// Aggregated payload bytes: canonical sets joined by newlines.
pub fn encode_payload(sets: &[MeasurementSet]) -> Vec<u8> {
    sets.iter()
        .map(MeasurementSet::canonical)
        .collect::<Vec<_>>()
        .join("\n")
        .into_bytes()
}

pub fn decode_payload(bytes: &[u8]) -> Result<Vec<MeasurementSet>, MeasurementError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| MeasurementError::Malformed("payload is not UTF-8".into()))?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split('\n')
        .map(MeasurementSet::parse_canonical)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn sample() -> MeasurementSet {
        MeasurementSet::new(
            node("R1"),
            1,
            vec![
                MeasurementRecord::new(1, Quantity::Q, 14, Value::from_f64(-3.649026)),
                MeasurementRecord::new(1, Quantity::Vm, 11, Value::from_f64(1.0)),
                MeasurementRecord::new(1, Quantity::P, 13, Value::from_f64(71.954702)),
                MeasurementRecord::new(1, Quantity::Vp, 12, Value::from_f64(0.0)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn canonical_form_is_sorted_and_fixed_precision() {
        assert_eq!(
            sample().canonical(),
            "R1:1|1,Vm,11,1.000000;1,Vp,12,0.000000;1,P,13,71.954702;1,Q,14,-3.649026"
        );
    }

    #[test]
    fn canonical_digest_matches_reference() {
        // hashlib.sha256(canonical).hexdigest()
        assert_eq!(
            crate::ledger::sha256_hex(sample().canonical().as_bytes()),
            "73df03ae6b2d5829e3597af422ed4233e06abd1de0c3c7e1fdbc374a5c158bc9"
        );
    }

    #[test]
    fn duplicate_keys_rejected() {
        let r = MeasurementRecord::new(2, Quantity::P, 23, Value::default());
        let err = MeasurementSet::new(node("R1"), 1, vec![r.clone(), r]).unwrap_err();
        assert!(matches!(
            err,
            MeasurementError::DuplicateRecord { bus: 2, .. }
        ));
    }

    #[test]
    fn value_formatting() {
        assert_eq!(Value::from_f64(-0.0).to_string(), "0.000000");
        assert_eq!(Value::from_f64(-0.5).to_string(), "-0.500000");
        assert_eq!(Value::from_micros(-1).to_string(), "-0.000001");
        assert_eq!(
            "12.5".parse::<Value>().unwrap(),
            Value::from_micros(12_500_000)
        );
        assert!("1.2345678".parse::<Value>().is_err());
        assert!("abc".parse::<Value>().is_err());
        assert!("-".parse::<Value>().is_err());
    }

    #[test]
    fn payload_round_trip() {
        let mut b = sample();
        b.relabel(node("R2"));
        let sets = vec![sample(), b];
        assert_eq!(decode_payload(&encode_payload(&sets)).unwrap(), sets);
        assert!(decode_payload(b"").unwrap().is_empty());
    }

    #[test]
    fn empty_set_parses() {
        let s = MeasurementSet::new(node("R9"), 3, vec![]).unwrap();
        assert_eq!(s.canonical(), "R9:3|");
        assert_eq!(MeasurementSet::parse_canonical("R9:3|").unwrap(), s);
    }

    proptest! {
        #[test]
        fn value_text_round_trip(micros in -10_000_000_000i64..10_000_000_000) {
            let v = Value::from_micros(micros);
            prop_assert_eq!(v.to_string().parse::<Value>().unwrap(), v);
            prop_assert_eq!(Value::from_f64(v.as_f64()), v);
        }

        #[test]
        fn canonical_round_trip(values in proptest::collection::vec(-1_000_000_000i64..1_000_000_000, 0..12)) {
            let records = values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let bus = (i / 4 + 1) as u8;
                    let q = Quantity::ALL[i % 4];
                    MeasurementRecord::new(bus, q, bus as u32 * 10 + q.ordinal(), Value::from_micros(v))
                })
                .collect();
            let set = MeasurementSet::new(node("R3"), 42, records).unwrap();
            prop_assert_eq!(MeasurementSet::parse_canonical(&set.canonical()).unwrap(), set);
        }
    }
}
