//! Randomized merge checks against a brute-force oracle: for every entry id
//! the surviving replica is the update with the greatest incarnation, a
//! tombstone beating an alive copy at equal incarnation.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use appnet::service_table::{EntryId, EntryState, ServiceEntry, ServiceTable};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use super::{entry, host};

#[derive(Debug, Clone, Copy)]
pub struct Update {
    pub id: u8,
    pub incarnation: u64,
    pub tomb: bool,
}

pub fn update() -> impl Strategy<Value = Update> {
    (0u8..4, 0u64..6, any::<bool>()).prop_map(|(id, incarnation, tomb)| Update {
        id,
        incarnation,
        tomb,
    })
}

/// An owner never publishes two different payloads under one version, so
/// the payload is a function of the version.
pub fn to_entry(u: &Update) -> ServiceEntry {
    let mut e = entry(Ipv4Addr::new(10, 0, 0, 1 + u.id % 2), 80 + u16::from(u.id), 10 + u.id, 1);
    e.incarnation = u.incarnation;
    e.state = if u.tomb {
        EntryState::Tombstone
    } else {
        EntryState::Alive
    };
    e.real.port = 1000 + (u.incarnation as u16) * 2 + u16::from(u.tomb);
    e
}

/// A replica on a host that owns none of the entries.
pub fn replica(updates: &[Update]) -> ServiceTable {
    let mut t = ServiceTable::new(host(0xee));
    for u in updates {
        t.merge_remote(to_entry(u), 0);
    }
    t
}

pub fn join(a: &ServiceTable, b: &ServiceTable) -> ServiceTable {
    let mut out = a.clone();
    for e in b.iter() {
        out.merge_remote(e.clone(), 0);
    }
    out
}

pub type View = BTreeMap<EntryId, (u64, EntryState, u16)>;

pub fn view(t: &ServiceTable) -> View {
    t.iter()
        .map(|e| (e.id(), (e.incarnation, e.state, e.real.port)))
        .collect()
}

pub fn oracle(updates: &[Update]) -> View {
    let mut best: BTreeMap<u8, Update> = BTreeMap::new();
    for u in updates {
        let rank = |x: &Update| (x.incarnation, x.tomb as u8);
        match best.get(&u.id) {
            Some(b) if rank(b) >= rank(u) => {}
            _ => {
                best.insert(u.id, *u);
            }
        }
    }
    best.values()
        .map(|u| {
            let e = to_entry(u);
            (e.id(), (e.incarnation, e.state, e.real.port))
        })
        .collect()
}

fn ops() -> impl Strategy<Value = Vec<Update>> {
    prop::collection::vec(update(), 0..12)
}

/// Runs the property suite for `cases` cases and returns how many ran.
pub fn check_merge_properties(cases: u32) -> Result<u32, String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    let ran = std::cell::Cell::new(0u32);
    let strategy = (ops(), ops(), ops(), any::<prop::sample::Index>());
    let result = runner.run(&strategy, |(a, b, c, rot)| {
        ran.set(ran.get() + 1);
        let (ta, tb, tc) = (replica(&a), replica(&b), replica(&c));
        let ab = join(&ta, &tb);
        prop_assert_eq!(view(&ab), view(&join(&tb, &ta)), "commutative");
        prop_assert_eq!(
            view(&join(&ab, &tc)),
            view(&join(&ta, &join(&tb, &tc))),
            "associative"
        );
        prop_assert_eq!(view(&join(&ta, &ta)), view(&ta), "idempotent");
        prop_assert_eq!(view(&join(&ab, &ab)), view(&ab), "idempotent after join");

        let all: Vec<Update> = a.iter().chain(&b).chain(&c).copied().collect();
        let want = oracle(&all);
        prop_assert_eq!(view(&join(&ab, &tc)), want.clone(), "matches oracle");
        // Arrival order of individual updates does not matter either.
        let mut rotated = all.clone();
        if !rotated.is_empty() {
            let k = rot.index(rotated.len());
            rotated.rotate_left(k);
            rotated.reverse();
        }
        prop_assert_eq!(view(&replica(&rotated)), want, "order independent");
        Ok::<(), TestCaseError>(())
    });
    result.map(|_| ran.get()).map_err(|e| e.to_string())
}
