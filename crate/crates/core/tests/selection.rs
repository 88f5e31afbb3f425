mod common;

use std::net::Ipv4Addr;

use appnet::model::{AppId, ServiceKey};
use appnet::service_table::ServiceEntry;
use appnet::switch::select::{
    rendezvous_score, select_endpoint, RoundRobin, SelectionMode, SelectionStrategy,
};
use common::{entry, host, oracle};
use proptest::prelude::*;

const VIP: Ipv4Addr = Ipv4Addr::new(10, 20, 0, 1);

fn instances(n: u8) -> Vec<ServiceEntry> {
    (1..=n).map(|h| entry(VIP, 443, h, 1)).collect()
}

fn shares(n_inst: u8, clients: u32, seed: u64) -> Vec<u32> {
    let inst = instances(n_inst);
    let refs: Vec<&ServiceEntry> = inst.iter().collect();
    let key = inst[0].key;
    let strategy = SelectionStrategy {
        mode: SelectionMode::Rendezvous,
        seed,
    };
    let mut rr = RoundRobin::default();
    let mut counts = vec![0u32; inst.len()];
    for c in 0..clients {
        let client = AppId::new(&host(200), c);
        let got = select_endpoint(&client, &key, &refs, &strategy, &mut rr).unwrap();
        let want = oracle::winner(&client, &key, &refs, seed);
        assert_eq!(got.id(), refs[want].id(), "client {c}");
        counts[want] += 1;
    }
    counts
}

#[test]
fn two_instances_split_a_thousand_clients() {
    for seed in [0, 1, 0xdead_beef] {
        let c = shares(2, 1000, seed);
        assert!(c.iter().all(|&n| n >= 300), "seed {seed}: {c:?}");
    }
}

#[test]
fn three_instances_split_evenly() {
    let c = shares(3, 3000, 0);
    for n in &c {
        let pct = f64::from(*n) / 30.0;
        assert!((25.0..=42.0).contains(&pct), "{c:?}");
    }
}

#[test]
fn round_robin_alternates_for_one_client() {
    let inst = instances(2);
    let refs: Vec<&ServiceEntry> = inst.iter().collect();
    let strategy = SelectionStrategy {
        mode: SelectionMode::RoundRobin,
        seed: 0,
    };
    let mut rr = RoundRobin::default();
    let client = AppId::new(&host(200), 1);
    let picks: Vec<_> = (0..10)
        .map(|_| select_endpoint(&client, &inst[0].key, &refs, &strategy, &mut rr).unwrap().host)
        .collect();
    for (i, p) in picks.iter().enumerate() {
        assert_eq!(*p, inst[i % 2].host);
    }
}

proptest! {
    #[test]
    fn score_matches_oracle(prefix in any::<u64>(), seq in any::<u32>(), ip in any::<[u8; 4]>(),
                            port in 1u16.., h in any::<u8>(), cseq in any::<u32>(), seed in any::<u64>()) {
        let ip = Ipv4Addr::from(ip);
        prop_assume!(appnet::model::VirtualIp::new(ip).is_ok());
        let mut cand = entry(VIP, port, h, cseq);
        cand.key = ServiceKey::new(appnet::model::VirtualIp::new(ip).unwrap(), port).unwrap();
        let client = AppId { prefix, seq };
        prop_assert_eq!(
            rendezvous_score(&client, &cand.key, &cand, seed),
            oracle::score(&client, &cand.key, &cand, seed)
        );
    }
}
