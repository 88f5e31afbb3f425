use std::net::{Ipv4Addr, SocketAddrV4};

use appnet::gossip::MemberStatus;
use appnet::model::ServiceKey;
use appnet::simharness::net::NetProfile;
use appnet::simharness::{Cluster, StartOpts};
use appnet::switch::select::SelectionMode;

pub fn profile(loss: f64) -> NetProfile {
    NetProfile {
        loss,
        ..NetProfile::default()
    }
}

pub fn name(i: usize) -> String {
    format!("h{i}")
}

/// `n` nodes, all joining through h1.
pub fn cluster(n: usize, seed: u64, loss: f64, mode: SelectionMode) -> Cluster {
    let mut c = Cluster::new(seed, profile(loss));
    for i in 1..=n {
        let opts = StartOpts {
            join: (i > 1).then(|| name(1)),
            gateway: false,
            strategy: Some(mode),
        };
        c.start(&name(i), opts).unwrap();
    }
    c
}

pub fn up_hosts(c: &Cluster) -> Vec<String> {
    c.hosts().filter(|(_, n)| n.up).map(|(k, _)| k.clone()).collect()
}

/// Every running node sees every running node alive.
pub fn membership_settled(c: &Cluster) -> bool {
    let up = up_hosts(c);
    let ids: Vec<_> = up.iter().map(|h| c.host_id(h).unwrap()).collect();
    up.iter().all(|h| {
        let g = &c.node(h).unwrap().gossip;
        ids.iter().all(|id| g.status_of(id) == Some(MemberStatus::Alive))
    })
}

/// Step until `pred` holds, at most `limit` more ticks. Returns the number
/// of ticks stepped.
pub fn steps_until(c: &mut Cluster, limit: u64, mut pred: impl FnMut(&Cluster) -> bool) -> Option<u64> {
    for n in 0..=limit {
        if pred(c) {
            return Some(n);
        }
        if n < limit {
            c.step();
        }
    }
    None
}

pub fn key(addr: SocketAddrV4) -> ServiceKey {
    ServiceKey::from_addr(addr).unwrap()
}

pub fn live_entries(c: &Cluster, host: &str, addr: SocketAddrV4) -> usize {
    c.node(host).unwrap().table.lookup(&key(addr)).len()
}

pub fn everyone_has(c: &Cluster, addr: SocketAddrV4, count: usize) -> bool {
    up_hosts(c).iter().all(|h| live_entries(c, h, addr) == count)
}

pub fn sa(ip: [u8; 4], port: u16) -> SocketAddrV4 {
    SocketAddrV4::new(Ipv4Addr::from(ip), port)
}
