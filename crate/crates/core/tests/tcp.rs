use std::sync::{Arc, Mutex};

use porch::dataset::BusDataset;
use porch::dnp3m::StreamDecoder;
use porch::harness::tcp::WireTap;
use porch::harness::Latency;
use porch::nodes::{Behavior, ProtocolMessage};
use porch::runner::{run_simulated, run_tcp, RunConfig, Transport};

fn tcp_config(cycles: u64, seed: u64) -> RunConfig {
    RunConfig {
        cycles,
        seed,
        transport: Transport::Tcp,
        base_port: 0,
        ..RunConfig::default()
    }
}

#[test]
fn tcp_and_sim_build_the_same_chain() {
    let dataset = Arc::new(BusDataset::builtin());
    for seed in [1, 2, 3] {
        let tcp = run_tcp(&tcp_config(5, seed), dataset.clone(), None).unwrap();
        let sim_cfg = RunConfig {
            transport: Transport::Sim,
            latency: Latency::Fixed(0),
            ..tcp_config(5, seed)
        };
        let sim = run_simulated(&sim_cfg, dataset.clone()).unwrap();
        assert_eq!(tcp.committed(), 5, "seed {seed}: {:?}", tcp.outcomes);
        assert!(tcp.replicas_identical());
        tcp.validate().unwrap();
        assert_eq!(tcp.chain.to_json(), sim.chain.to_json(), "seed {seed}");
        assert_eq!(tcp.control_chain.to_json(), sim.control_chain.to_json());
        let miners = |r: &porch::runner::RunReport| {
            r.metrics
                .iter()
                .map(|m| m.miner.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(miners(&tcp), miners(&sim));
    }
}

#[test]
fn wire_tap_sees_parseable_protocol_messages() {
    type Chunks = Vec<(String, usize, Vec<u8>)>;
    let seen: Arc<Mutex<Chunks>> = Arc::default();
    let sink = seen.clone();
    let tap: WireTap = Arc::new(move |node, conn, bytes| {
        sink.lock()
            .unwrap()
            .push((node.to_string(), conn, bytes.to_vec()));
    });
    let report = run_tcp(
        &tcp_config(1, 9),
        Arc::new(BusDataset::builtin()),
        Some(tap),
    )
    .unwrap();
    assert_eq!(report.committed(), 1);

    let seen = seen.lock().unwrap();
    let mut streams: std::collections::BTreeMap<(String, usize), StreamDecoder> =
        Default::default();
    let mut kinds = std::collections::BTreeSet::new();
    for (node, conn, bytes) in seen.iter() {
        let decoder = streams.entry((node.clone(), *conn)).or_default();
        decoder.extend(bytes);
        while let Some(msg) = decoder.next_message().unwrap() {
            if let Ok(pm) = ProtocolMessage::from_message(&msg) {
                kinds.insert(pm.body.kind().as_str().to_string());
            }
        }
    }
    for streams_left in streams.values() {
        assert_eq!(streams_left.buffered(), 0);
    }
    for k in [
        "DataRequest",
        "DataResponse",
        "CountShare",
        "Vote",
        "NewBlock",
        "ChainUpdate",
    ] {
        assert!(kinds.contains(k), "{k} not observed in {kinds:?}");
    }
}

#[test]
fn tcp_fault_aborts_without_divergence() {
    let mut cfg = tcp_config(3, 4);
    cfg.behaviors
        .insert(porch::consensus::NodeId::relay(3), Behavior::InflateCount);
    let r = run_tcp(&cfg, Arc::new(BusDataset::builtin()), None).unwrap();
    assert_eq!(r.committed(), 0);
    assert!(r.replicas_identical());
    assert_eq!(r.chain.len(), 1);
    assert!(r
        .metrics
        .iter()
        .all(|m| m.outcome.starts_with("aborted:count-mismatch")));
}
