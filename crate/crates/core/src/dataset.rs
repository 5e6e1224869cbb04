//! IEEE 9-bus measurement source.
//!
//! The builtin table holds the converged power-flow solution of the standard
//! 9-bus case: voltage magnitude (pu), angle (degrees) and net injected P/Q
//! (MW, MVAr) per bus. Each cycle adds seeded uniform jitter to every row.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use serde::Deserialize;
use thiserror::Error;

use crate::consensus::{NodeId, SeededRng};
use crate::ledger::{MeasurementRecord, MeasurementSet, Quantity, Value};
use crate::nodes::Telemetry;

pub const BUSES: u8 = 9;

const BUILTIN: &str = include_str!("../data/ieee9.csv");

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bus {0} is missing")]
    MissingBus(u8),
    #[error("bus {bus} lacks quantity {quantity}")]
    MissingQuantity { bus: u8, quantity: Quantity },
    #[error("unknown quantity `{0}`")]
    BadQuantity(String),
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("cannot read dataset: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub bus: u8,
    pub quantity: Quantity,
    pub index: u32,
    pub base: f64,
    /// Half-width of the uniform noise added per cycle.
    pub jitter: f64,
}

#[derive(Debug, Deserialize)]
struct RawRow {
    bus: u8,
    quantity: String,
    index: u32,
    base: f64,
    jitter: f64,
}

/// Rows sorted by `(bus, quantity)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BusDataset {
    rows: Vec<DatasetRow>,
}

impl BusDataset {
    pub fn builtin() -> Self {
        Self::from_reader(BUILTIN.as_bytes()).expect("builtin table is valid")
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// Reads `bus,quantity,index,base,jitter` CSV.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DatasetError> {
        let mut csv = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::new();
        let mut seen = BTreeSet::new();
        for raw in csv.deserialize::<RawRow>() {
            let raw = raw.map_err(|e| DatasetError::ParseError(e.to_string()))?;
            let quantity: Quantity = raw
                .quantity
                .parse()
                .map_err(|_| DatasetError::BadQuantity(raw.quantity.clone()))?;
            if !(1..=BUSES).contains(&raw.bus) {
                return Err(DatasetError::ParseError(format!(
                    "bus {} out of range",
                    raw.bus
                )));
            }
            if !raw.base.is_finite() || !raw.jitter.is_finite() || raw.jitter < 0.0 {
                return Err(DatasetError::ParseError(format!(
                    "bus {} {quantity}: base and jitter must be finite, jitter >= 0",
                    raw.bus
                )));
            }
            if !seen.insert((raw.bus, quantity)) {
                return Err(DatasetError::ParseError(format!(
                    "bus {} {quantity} listed twice",
                    raw.bus
                )));
            }
            rows.push(DatasetRow {
                bus: raw.bus,
                quantity,
                index: raw.index,
                base: raw.base,
                jitter: raw.jitter,
            });
        }
        for bus in 1..=BUSES {
            if !rows.iter().any(|r| r.bus == bus) {
                return Err(DatasetError::MissingBus(bus));
            }
            for quantity in Quantity::ALL {
                if !seen.contains(&(bus, quantity)) {
                    return Err(DatasetError::MissingQuantity { bus, quantity });
                }
            }
        }
        rows.sort_by_key(|r| (r.bus, r.quantity));
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[DatasetRow] {
        &self.rows
    }

    pub fn row(&self, bus: u8, quantity: Quantity) -> Option<&DatasetRow> {
        self.rows
            .iter()
            .find(|r| r.bus == bus && r.quantity == quantity)
    }

    /// One jittered value per row, in row order. The stream depends only on
    /// `(seed, cycle)`.
    pub fn sample_values(&self, cycle: u64, seed: u64) -> Vec<Value> {
        let mut rng = SeededRng::seed_from_u64(seed);
        rng.set_stream(cycle);
        self.rows
            .iter()
            .map(|r| {
                // always draw so a zero-jitter row does not shift later rows
                let u: f64 = rng.gen_range(-1.0..=1.0);
                Value::from_f64(r.base + u * r.jitter)
            })
            .collect()
    }

    /// The set a relay covering `buses` reports in `cycle`.
    pub fn sample_set(&self, node: &NodeId, buses: &[u8], cycle: u64, seed: u64) -> MeasurementSet {
        let values = self.sample_values(cycle, seed);
        let records = self
            .rows
            .iter()
            .zip(values)
            .filter(|(r, _)| buses.contains(&r.bus))
            .map(|(r, v)| MeasurementRecord::new(r.bus, r.quantity, r.index, v))
            .collect();
        MeasurementSet::new(node.clone(), cycle, records).expect("rows are unique")
    }
}

/// Which buses each relay measures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    buses: Vec<Vec<u8>>,
}

impl Partition {
    /// Contiguous blocks of `9 / relays` buses, the last relay taking the
    /// remainder. Beyond nine relays, relay `i` measures bus `i mod 9 + 1`.
    pub fn contiguous(relays: usize) -> Self {
        let n = BUSES as usize;
        let buses = if relays == 0 {
            Vec::new()
        } else if relays <= n {
            let per = n / relays;
            (0..relays)
                .map(|i| {
                    let lo = i * per + 1;
                    let hi = if i + 1 == relays { n } else { (i + 1) * per };
                    (lo..=hi).map(|b| b as u8).collect()
                })
                .collect()
        } else {
            (0..relays).map(|i| vec![(i % n + 1) as u8]).collect()
        };
        Self { buses }
    }

    /// Parses `1,2;3,4;5,6;7,8,9`: one group per relay, in relay order.
    pub fn parse(s: &str) -> Result<Self, DatasetError> {
        let buses = s
            .split(';')
            .map(|group| {
                group
                    .split(',')
                    .map(|b| {
                        let bus: u8 = b
                            .trim()
                            .parse()
                            .map_err(|_| DatasetError::ParseError(format!("bad bus `{b}`")))?;
                        if (1..=BUSES).contains(&bus) {
                            Ok(bus)
                        } else {
                            Err(DatasetError::ParseError(format!("bus {bus} out of range")))
                        }
                    })
                    .collect::<Result<Vec<u8>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { buses })
    }

    pub fn relays(&self) -> usize {
        self.buses.len()
    }

    /// Buses of the relay at 0-based position `i`.
    pub fn buses(&self, i: usize) -> &[u8] {
        self.buses.get(i).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// All relays' sets for one cycle, keyed by relay id (`R1`, `R2`, ...).
pub fn sample_cycle(
    ds: &BusDataset,
    partition: &Partition,
    cycle: u64,
    seed: u64,
) -> BTreeMap<NodeId, MeasurementSet> {
    (0..partition.relays())
        .map(|i| {
            let id = NodeId::relay(i + 1);
            let set = ds.sample_set(&id, partition.buses(i), cycle, seed);
            (id, set)
        })
        .collect()
}

/// Telemetry for one relay backed by the shared dataset.
#[derive(Debug, Clone)]
pub struct DatasetTelemetry {
    dataset: Arc<BusDataset>,
    buses: Vec<u8>,
    seed: u64,
}

impl DatasetTelemetry {
    pub fn new(dataset: Arc<BusDataset>, buses: Vec<u8>, seed: u64) -> Self {
        Self {
            dataset,
            buses,
            seed,
        }
    }
}

impl Telemetry for DatasetTelemetry {
    fn sample(&mut self, node: &NodeId, cycle: u64) -> MeasurementSet {
        self.dataset.sample_set(node, &self.buses, cycle, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_jitter() -> BusDataset {
        let mut ds = BusDataset::builtin();
        for r in &mut ds.rows {
            r.jitter = 0.0;
        }
        ds
    }

    #[test]
    fn builtin_shape() {
        let ds = BusDataset::builtin();
        assert_eq!(ds.rows().len(), 36);
        for bus in 1..=9 {
            for q in Quantity::ALL {
                let row = ds.row(bus, q).unwrap();
                assert_eq!(row.index, bus as u32 * 10 + q.ordinal());
            }
        }
    }

    #[test]
    fn builtin_matches_power_flow() {
        // Converged Newton-Raphson solution of the 9-bus case, 100 MVA base.
        // (Vm pu, angle deg, P MW, Q MVAr)
        let solved: [(f64, f64, f64, f64); 9] = [
            (1.000, 0.000, 71.95, 24.07),
            (1.000, 9.669, 163.00, 14.46),
            (1.000, 4.771, 85.00, -3.65),
            (0.987, -2.407, 0.00, 0.00),
            (0.975, -4.017, -90.00, -30.00),
            (1.003, 1.926, 0.00, 0.00),
            (0.986, 0.622, -100.00, -35.00),
            (0.996, 3.799, 0.00, 0.00),
            (0.958, -4.350, -125.00, -50.00),
        ];
        let ds = BusDataset::builtin();
        for (i, (vm, va, p, q)) in solved.iter().enumerate() {
            let bus = i as u8 + 1;
            let got = |qty| ds.row(bus, qty).unwrap().base;
            for (qty, want) in [
                (Quantity::Vm, vm),
                (Quantity::Vp, va),
                (Quantity::P, p),
                (Quantity::Q, q),
            ] {
                assert!(
                    (got(qty) - want).abs() < 0.005,
                    "bus {bus} {qty}: {} vs {want}",
                    got(qty)
                );
            }
        }
        // generation balances load plus losses
        let injected: f64 = (1..=9).map(|b| ds.row(b, Quantity::P).unwrap().base).sum();
        assert!(injected > 0.0 && injected < 5.0, "losses {injected} MW");
    }

    #[test]
    fn missing_bus() {
        let text: String = BUILTIN
            .lines()
            .filter(|l| !l.starts_with("5,"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            BusDataset::from_reader(text.as_bytes()),
            Err(DatasetError::MissingBus(5))
        ));
    }

    #[test]
    fn bad_rows() {
        let bad_q = BUILTIN.replacen("1,Vm,11", "1,Vx,11", 1);
        assert!(matches!(
            BusDataset::from_reader(bad_q.as_bytes()),
            Err(DatasetError::BadQuantity(q)) if q == "Vx"
        ));
        let bad_num = BUILTIN.replacen("1.000000,0.005", "one,0.005", 1);
        assert!(matches!(
            BusDataset::from_reader(bad_num.as_bytes()),
            Err(DatasetError::ParseError(_))
        ));
        let missing_q: String = BUILTIN
            .lines()
            .filter(|l| !l.starts_with("7,Q"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            BusDataset::from_reader(missing_q.as_bytes()),
            Err(DatasetError::MissingQuantity {
                bus: 7,
                quantity: Quantity::Q
            })
        ));
        let dup = format!("{BUILTIN}1,Vm,11,1.0,0.0\n");
        assert!(BusDataset::from_reader(dup.as_bytes()).is_err());
        assert!(BusDataset::from_reader("bus,quantity,index,base,jitter\n".as_bytes()).is_err());
    }

    #[test]
    fn zero_jitter_returns_base() {
        let ds = zero_jitter();
        let p = Partition::contiguous(4);
        for cycle in [1, 2, 50] {
            let sets = sample_cycle(&ds, &p, cycle, 3);
            for set in sets.values() {
                for r in set.records() {
                    assert_eq!(
                        r.value,
                        Value::from_f64(ds.row(r.bus, r.quantity).unwrap().base)
                    );
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_varies() {
        let ds = BusDataset::builtin();
        let p = Partition::contiguous(4);
        assert_eq!(sample_cycle(&ds, &p, 1, 9), sample_cycle(&ds, &p, 1, 9));
        let a = sample_cycle(&ds, &p, 1, 9);
        let b = sample_cycle(&ds, &p, 2, 9);
        for (x, y) in a.values().zip(b.values()) {
            assert_ne!(x.canonical(), y.canonical());
        }
        assert_ne!(sample_cycle(&ds, &p, 1, 10), a);
        // jitter stays within bounds
        for set in a.values() {
            for r in set.records() {
                let row = ds.row(r.bus, r.quantity).unwrap();
                assert!((r.value.as_f64() - row.base).abs() <= row.jitter + 1e-6);
            }
        }
    }

    #[test]
    fn default_partition() {
        let p = Partition::contiguous(4);
        assert_eq!(p.buses(0), &[1, 2]);
        assert_eq!(p.buses(1), &[3, 4]);
        assert_eq!(p.buses(2), &[5, 6]);
        assert_eq!(p.buses(3), &[7, 8, 9]);
        let sets = sample_cycle(&BusDataset::builtin(), &p, 1, 0);
        let total: usize = sets.values().map(|s| s.records().len()).sum();
        assert_eq!(total, 36);
        assert_eq!(Partition::parse("1,2;3,4;5,6;7,8,9").unwrap(), p);
        assert!(Partition::parse("1,10").is_err());
        assert!(Partition::parse("a").is_err());
    }

    #[test]
    fn partitions_cover_all_buses() {
        for n in 1..=9 {
            let p = Partition::contiguous(n);
            let mut all: Vec<u8> = (0..n).flat_map(|i| p.buses(i).to_vec()).collect();
            all.sort();
            assert_eq!(all, (1..=9).collect::<Vec<u8>>());
        }
        let p = Partition::contiguous(32);
        assert_eq!(p.relays(), 32);
        assert!((0..32).all(|i| p.buses(i).len() == 1));
        assert_eq!(p.buses(9), &[1]);
    }
}
