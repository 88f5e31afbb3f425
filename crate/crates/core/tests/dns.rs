mod common;

use std::net::Ipv4Addr;

use appnet::names::*;
use appnet::service_table::ServiceTable;
use common::{entry, host};

fn table() -> ServiceTable {
    let mut t = ServiceTable::new(host(1));
    let mut e = entry(Ipv4Addr::new(10, 0, 0, 10), 80, 1, 1);
    e.name = Some("shop".into());
    t.insert_local(e).unwrap();
    t
}

#[test]
fn registered_name_answers_with_ttl_one() {
    let resp = respond(&build_query(0x1234, "shop", QTYPE_A), &table()).unwrap();
    let p = parse_response(&resp).unwrap();
    assert_eq!(p.id, 0x1234);
    assert_eq!(p.rcode, RCODE_NOERROR);
    assert!(p.authoritative);
    assert_eq!(p.a, Some((Ipv4Addr::new(10, 0, 0, 10), 1)));
}

#[test]
fn wire_layout_of_an_answer() {
    let q = build_query(7, "shop", QTYPE_A);
    let resp = respond(&q, &table()).unwrap();
    // Header: id, flags QR|AA|RD, one question, one answer.
    assert_eq!(&resp[..12], &[0, 7, 0x85, 0x00, 0, 1, 0, 1, 0, 0, 0, 0]);
    // Question echoed verbatim.
    assert_eq!(&resp[12..q.len()], &q[12..]);
    // Answer: pointer to the name, A, IN, TTL 1, four bytes of address.
    assert_eq!(
        &resp[q.len()..],
        &[0xc0, 0x0c, 0, 1, 0, 1, 0, 0, 0, 1, 0, 4, 10, 0, 0, 10]
    );
}

#[test]
fn names_are_case_insensitive_and_may_end_in_a_dot() {
    let t = table();
    for n in ["SHOP", "shop.", "Shop."] {
        let p = parse_response(&respond(&build_query(1, n, QTYPE_A), &t).unwrap()).unwrap();
        assert_eq!(p.a.map(|a| a.0), Some(Ipv4Addr::new(10, 0, 0, 10)), "{n}");
    }
}

#[test]
fn unknown_name_is_nxdomain() {
    let p = parse_response(&respond(&build_query(9, "example.com", QTYPE_A), &table()).unwrap()).unwrap();
    assert_eq!(p.rcode, RCODE_NXDOMAIN);
    assert_eq!(p.a, None);
}

#[test]
fn other_types_are_not_implemented() {
    let p = parse_response(&respond(&build_query(9, "shop", QTYPE_AAAA), &table()).unwrap()).unwrap();
    assert_eq!(p.rcode, RCODE_NOTIMP);
}

#[test]
fn tombstoned_name_disappears() {
    let mut t = table();
    t.tombstone_host(host(1), 1);
    let p = parse_response(&respond(&build_query(9, "shop", QTYPE_A), &t).unwrap()).unwrap();
    assert_eq!(p.rcode, RCODE_NXDOMAIN);
}

#[test]
fn one_name_on_two_vips_is_servfail() {
    let mut t = table();
    let mut e = entry(Ipv4Addr::new(10, 0, 0, 11), 80, 2, 1);
    e.name = Some("shop".into());
    t.merge_remote(e, 1);
    let p = parse_response(&respond(&build_query(9, "shop", QTYPE_A), &t).unwrap()).unwrap();
    assert_eq!(p.rcode, RCODE_SERVFAIL);
}

#[test]
fn garbage_never_panics() {
    let t = table();
    assert_eq!(respond(&[], &t), None);
    assert_eq!(respond(&[0; 11], &t), None);
    let mut q = build_query(3, "shop", QTYPE_A);
    q.truncate(15);
    let p = parse_response(&respond(&q, &t).unwrap()).unwrap();
    assert_eq!(p.rcode, RCODE_FORMERR);
    // Responses are not answered.
    let mut r = build_query(3, "shop", QTYPE_A);
    r[2] |= 0x80;
    assert_eq!(respond(&r, &t), None);
}

#[test]
fn allocation_is_stable_and_avoids_held_vips() {
    use std::collections::{BTreeMap, BTreeSet};
    let empty = BTreeMap::new();
    let a = allocate_internal_ip("billing", &empty).unwrap();
    assert_eq!(a, allocate_internal_ip("billing", &empty).unwrap());
    assert_eq!(a.addr().octets()[0], 240);
    // Someone else holds it: the next probe is used.
    let mut held = BTreeMap::new();
    held.insert(a, BTreeSet::from(["other".to_string()]));
    let b = allocate_internal_ip("billing", &held).unwrap();
    assert_ne!(a, b);
    // Held by the same name: no conflict.
    held.insert(a, BTreeSet::from(["billing".to_string()]));
    assert_eq!(allocate_internal_ip("billing", &held).unwrap(), a);
}

#[test]
fn allocation_matches_independent_fnv() {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(b"billing");
    h.write(&0u32.to_be_bytes());
    let low = (h.finish() & 0xff_ffff) as u32;
    let [_, x, y, z] = low.to_be_bytes();
    assert_ne!(low, 0);
    let got = allocate_internal_ip("billing", &Default::default()).unwrap();
    assert_eq!(got.addr(), Ipv4Addr::new(240, x, y, z));
}

#[test]
fn names_rarely_collide_in_auto_pool() {
    // 2000 names in a 2^24 pool: expected first-probe collisions are about
    // n^2 / 2^25, i.e. well under one. Probing resolves any that occur.
    use std::collections::{BTreeMap, BTreeSet};
    let mut held: BTreeMap<_, BTreeSet<String>> = BTreeMap::new();
    for i in 0..2000 {
        let name = format!("svc-{i}");
        let vip = allocate_internal_ip(&name, &held).unwrap();
        assert!(!held.contains_key(&vip), "{name} reused {vip:?}");
        held.entry(vip).or_default().insert(name);
    }
    assert_eq!(held.len(), 2000);
}
