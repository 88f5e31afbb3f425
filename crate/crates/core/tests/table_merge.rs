mod common;

use common::merge::*;
use common::{entry, host};

use std::net::Ipv4Addr;

use appnet::service_table::{EntryState, MergeOutcome, ServiceTable};

#[test]
fn merge_is_a_semilattice_join() {
    let ran = check_merge_properties(10_000).unwrap();
    assert!(ran >= 10_000);
}

#[test]
fn tombstone_wins_tie_and_loses_to_newer_alive() {
    let mut t = ServiceTable::new(host(0xee));
    let mut e = entry(Ipv4Addr::new(10, 0, 0, 1), 80, 3, 1);
    e.incarnation = 2;
    t.merge_remote(e.clone(), 0);
    let mut tomb = e.clone();
    tomb.state = EntryState::Tombstone;
    assert_eq!(t.merge_remote(tomb.clone(), 1), MergeOutcome::Applied);
    assert_eq!(t.merge_remote(e.clone(), 2), MergeOutcome::Stale);
    e.incarnation = 3;
    assert_eq!(t.merge_remote(e, 3), MergeOutcome::Applied);
    assert!(t.iter().all(|x| x.is_alive()));
}

#[test]
fn owner_refutes_tombstone_of_live_entry() {
    let mut t = ServiceTable::new(host(3));
    let e = entry(Ipv4Addr::new(10, 0, 0, 1), 80, 3, 1);
    t.insert_local(e.clone()).unwrap();
    let mut tomb = e.clone();
    tomb.incarnation = 4;
    tomb.state = EntryState::Tombstone;
    assert_eq!(t.merge_remote(tomb, 1), MergeOutcome::Refuted);
    let now = t.get(&e.id()).unwrap();
    assert!(now.is_alive());
    assert_eq!(now.incarnation, 5);
}
