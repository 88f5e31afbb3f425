//! Vip allocation for named and anonymous applications, and the DNS
//! responder that answers A queries from the service table.
//!
//! Allocation is a pure function of its key: probe `i` hashes the key bytes
//! followed by `i` as a big-endian u32 with 64-bit FNV-1a, and takes the low
//! 24 bits (AutoPool) or 16 bits (LinkLocal). Zero host parts and values
//! already held by someone else are skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::codec::{Reader, Writer};
use crate::hash::Fnv1a;
use crate::model::{AppId, VirtualIp};
use crate::service_table::{NameError, ServiceTable};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("address pool exhausted")]
    PoolExhausted,
}

/// Which pool an allocation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocPool {
    AutoPool,
    LinkLocal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationRecord {
    pub key: String,
    pub vip: VirtualIp,
    pub pool: AllocPool,
}

pub fn probe_hash(key: &[u8], probe: u32) -> u64 {
    Fnv1a::new().write(key).write(&probe.to_be_bytes()).finish()
}

fn auto_vip(low: u32) -> VirtualIp {
    let [_, x, y, z] = low.to_be_bytes();
    VirtualIp::new(Ipv4Addr::new(240, x, y, z)).expect("240/8 is a valid vip")
}

fn link_local_vip(low: u16) -> VirtualIp {
    let [x, y] = low.to_be_bytes();
    VirtualIp::new(Ipv4Addr::new(169, 254, x, y)).expect("169.254/16 is a valid vip")
}

/// Allocate the AutoPool vip for `name`. `held` maps vips to the names that
/// already use them (as learned from the table); a vip held only by `name`
/// itself is not a conflict.
pub fn allocate_internal_ip(
    name: &str,
    held: &BTreeMap<VirtualIp, BTreeSet<String>>,
) -> Result<VirtualIp, AllocError> {
    for i in 0..(1u32 << 24) {
        let low = (probe_hash(name.as_bytes(), i) & 0xff_ffff) as u32;
        if low == 0 {
            continue;
        }
        let vip = auto_vip(low);
        match held.get(&vip) {
            Some(names) if names.iter().any(|n| n != name) => continue,
            _ => return Ok(vip),
        }
    }
    Err(AllocError::PoolExhausted)
}

/// Allocate a LinkLocal vip for an anonymous application. `taken` holds the
/// link-local vips of other applications on this node.
pub fn allocate_link_local(
    app: &AppId,
    taken: &BTreeSet<VirtualIp>,
) -> Result<VirtualIp, AllocError> {
    let key = app.to_bytes();
    for i in 0..(1u32 << 17) {
        let low = (probe_hash(&key, i) & 0xffff) as u16;
        if low == 0 || low == 0xffff {
            continue;
        }
        let vip = link_local_vip(low);
        if !taken.contains(&vip) {
            return Ok(vip);
        }
    }
    Err(AllocError::PoolExhausted)
}

pub const DNS_TTL: u32 = 1;
pub const QTYPE_A: u16 = 1;
pub const QTYPE_AAAA: u16 = 28;
const QCLASS_IN: u16 = 1;
const MAX_RESPONSE: usize = 512;

pub const RCODE_NOERROR: u8 = 0;
pub const RCODE_FORMERR: u8 = 1;
pub const RCODE_SERVFAIL: u8 = 2;
pub const RCODE_NXDOMAIN: u8 = 3;
pub const RCODE_NOTIMP: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DnsAnswer {
    A { vip: VirtualIp, ttl: u32 },
    NxDomain,
    NotImplemented,
    /// The name maps to several vips.
    ServFail,
}

/// Resolve one question against the table.
pub fn dns_answer(name: &str, qtype: u16, table: &ServiceTable) -> DnsAnswer {
    if qtype != QTYPE_A {
        return DnsAnswer::NotImplemented;
    }
    let name = name.trim_end_matches('.').to_ascii_lowercase();
    match table.lookup_name(&name) {
        Ok(vip) => DnsAnswer::A { vip, ttl: DNS_TTL },
        Err(NameError::NotFound) => DnsAnswer::NxDomain,
        Err(NameError::AmbiguousName(..)) => DnsAnswer::ServFail,
    }
}

struct Question {
    labels: Vec<Vec<u8>>,
    qtype: u16,
    qclass: u16,
}

fn read_question(r: &mut Reader<'_>) -> Option<Question> {
    let mut labels = Vec::new();
    let mut total = 0usize;
    loop {
        let n = r.u8().ok()? as usize;
        if n == 0 {
            break;
        }
        // Queries never need compression pointers.
        if n > 63 {
            return None;
        }
        total += n + 1;
        if total > 255 {
            return None;
        }
        labels.push(r.take(n).ok()?.to_vec());
    }
    Some(Question {
        labels,
        qtype: r.u16().ok()?,
        qclass: r.u16().ok()?,
    })
}

fn write_question(w: &mut Writer, q: &Question) {
    for l in &q.labels {
        w.u8(l.len() as u8).bytes(l);
    }
    w.u8(0).u16(q.qtype).u16(q.qclass);
}

fn header(w: &mut Writer, id: u16, rd: bool, rcode: u8, qd: u16, an: u16) {
    let flags: u16 = 0x8000 | 0x0400 | (u16::from(rd) << 8) | u16::from(rcode);
    w.u16(id).u16(flags).u16(qd).u16(an).u16(0).u16(0);
}

/// Answer a raw DNS query. Returns `None` when the packet is too short to
/// carry a header or is itself a response.
pub fn respond(packet: &[u8], table: &ServiceTable) -> Option<Vec<u8>> {
    let mut r = Reader::new(packet);
    let id = r.u16().ok()?;
    let flags = r.u16().ok()?;
    let qd = r.u16().ok()?;
    let _an = r.u16().ok()?;
    let _ns = r.u16().ok()?;
    let _ar = r.u16().ok()?;
    if flags & 0x8000 != 0 {
        return None;
    }
    let rd = flags & 0x0100 != 0;
    let opcode = (flags >> 11) & 0xf;
    let mut w = Writer::new();
    if opcode != 0 {
        header(&mut w, id, rd, RCODE_NOTIMP, 0, 0);
        return Some(w.into_vec());
    }
    let q = match (qd, read_question(&mut r)) {
        (1, Some(q)) => q,
        _ => {
            header(&mut w, id, rd, RCODE_FORMERR, 0, 0);
            return Some(w.into_vec());
        }
    };
    let name = match q
        .labels
        .iter()
        .map(|l| std::str::from_utf8(l).ok())
        .collect::<Option<Vec<_>>>()
    {
        Some(parts) => parts.join("."),
        None => {
            header(&mut w, id, rd, RCODE_NXDOMAIN, 1, 0);
            write_question(&mut w, &q);
            return Some(w.into_vec());
        }
    };
    let answer = if q.qclass != QCLASS_IN {
        DnsAnswer::NotImplemented
    } else {
        dns_answer(&name, q.qtype, table)
    };
    let (rcode, record) = match answer {
        DnsAnswer::A { vip, ttl } => (RCODE_NOERROR, Some((vip, ttl))),
        DnsAnswer::NxDomain => (RCODE_NXDOMAIN, None),
        DnsAnswer::NotImplemented => (RCODE_NOTIMP, None),
        DnsAnswer::ServFail => (RCODE_SERVFAIL, None),
    };
    header(&mut w, id, rd, rcode, 1, u16::from(record.is_some()));
    write_question(&mut w, &q);
    if let Some((vip, ttl)) = record {
        // Name is a pointer to the question at offset 12.
        w.u16(0xc00c)
            .u16(QTYPE_A)
            .u16(QCLASS_IN)
            .u32(ttl)
            .u16(4)
            .ip(vip.addr());
    }
    debug_assert!(w.len() <= MAX_RESPONSE);
    Some(w.into_vec())
}

/// Build a single-question recursive query, as a stub resolver would.
pub fn build_query(id: u16, name: &str, qtype: u16) -> Vec<u8> {
    let mut w = Writer::new();
    w.u16(id).u16(0x0100).u16(1).u16(0).u16(0).u16(0);
    for label in name.trim_end_matches('.').split('.').filter(|l| !l.is_empty()) {
        w.str8(label);
    }
    w.u8(0).u16(qtype).u16(QCLASS_IN);
    w.into_vec()
}

/// Minimal response reader: id, rcode and the first A record, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub id: u16,
    pub rcode: u8,
    pub authoritative: bool,
    pub a: Option<(Ipv4Addr, u32)>,
}

fn skip_name(r: &mut Reader<'_>) -> Option<()> {
    loop {
        let n = r.u8().ok()?;
        match n {
            0 => return Some(()),
            n if n & 0xc0 == 0xc0 => {
                r.u8().ok()?;
                return Some(());
            }
            n => {
                r.take(n as usize).ok()?;
            }
        }
    }
}

pub fn parse_response(packet: &[u8]) -> Option<ParsedResponse> {
    let mut r = Reader::new(packet);
    let id = r.u16().ok()?;
    let flags = r.u16().ok()?;
    if flags & 0x8000 == 0 {
        return None;
    }
    let qd = r.u16().ok()?;
    let an = r.u16().ok()?;
    r.u16().ok()?;
    r.u16().ok()?;
    for _ in 0..qd {
        skip_name(&mut r)?;
        r.take(4).ok()?;
    }
    let mut a = None;
    for _ in 0..an {
        skip_name(&mut r)?;
        let ty = r.u16().ok()?;
        let _class = r.u16().ok()?;
        let ttl = r.u32().ok()?;
        let len = r.u16().ok()? as usize;
        let data = r.take(len).ok()?;
        if ty == QTYPE_A && len == 4 && a.is_none() {
            a = Some((Ipv4Addr::new(data[0], data[1], data[2], data[3]), ttl));
        }
    }
    Some(ParsedResponse {
        id,
        rcode: (flags & 0xf) as u8,
        authoritative: flags & 0x0400 != 0,
        a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HostId, PoolClass};
    use crate::service_table::tests::{entry, host};

    fn held(pairs: &[(&str, VirtualIp)]) -> BTreeMap<VirtualIp, BTreeSet<String>> {
        let mut m: BTreeMap<VirtualIp, BTreeSet<String>> = BTreeMap::new();
        for (n, v) in pairs {
            m.entry(*v).or_default().insert(n.to_string());
        }
        m
    }

    #[test]
    fn auto_allocation_is_deterministic_and_in_pool() {
        let a = allocate_internal_ip("web", &BTreeMap::new()).unwrap();
        let b = allocate_internal_ip("web", &BTreeMap::new()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class(), PoolClass::AutoPool);
        // Our own holding is not a conflict.
        assert_eq!(allocate_internal_ip("web", &held(&[("web", a)])).unwrap(), a);
    }

    #[test]
    fn conflicting_holder_moves_to_next_probe() {
        let first = allocate_internal_ip("web", &BTreeMap::new()).unwrap();
        let moved = allocate_internal_ip("web", &held(&[("db", first)])).unwrap();
        assert_ne!(first, moved);
        assert_eq!(moved.class(), PoolClass::AutoPool);
    }

    #[test]
    fn link_local_never_zero_and_avoids_taken() {
        let h = HostId([3; 16]);
        for seq in 0..200 {
            let app = AppId::new(&h, seq);
            let v = allocate_link_local(&app, &BTreeSet::new()).unwrap();
            assert_eq!(v.class(), PoolClass::LinkLocal);
            assert_ne!(v.addr(), Ipv4Addr::new(169, 254, 0, 0));
            let taken: BTreeSet<_> = [v].into();
            assert_ne!(allocate_link_local(&app, &taken).unwrap(), v);
        }
    }

    fn table_with_web() -> (ServiceTable, VirtualIp) {
        let mut t = ServiceTable::new(host(1));
        let mut e = entry("240.1.2.3", 80, 1, 1, 0);
        e.name = Some("web".into());
        t.insert_local(e).unwrap();
        (t, "240.1.2.3".parse().unwrap())
    }

    #[test]
    fn a_query_answered_with_ttl_one() {
        let (t, vip) = table_with_web();
        let resp = respond(&build_query(7, "web", QTYPE_A), &t).unwrap();
        let p = parse_response(&resp).unwrap();
        assert_eq!(p.id, 7);
        assert_eq!(p.rcode, RCODE_NOERROR);
        assert!(p.authoritative);
        assert_eq!(p.a, Some((vip.addr(), 1)));
        // Trailing dot and case do not matter.
        let p = parse_response(&respond(&build_query(8, "WEB.", QTYPE_A), &t).unwrap()).unwrap();
        assert_eq!(p.a, Some((vip.addr(), 1)));
    }

    #[test]
    fn unknown_and_unsupported() {
        let (t, _) = table_with_web();
        let p = parse_response(&respond(&build_query(1, "nosuch", QTYPE_A), &t).unwrap()).unwrap();
        assert_eq!((p.rcode, p.a), (RCODE_NXDOMAIN, None));
        let p = parse_response(&respond(&build_query(2, "web", QTYPE_AAAA), &t).unwrap()).unwrap();
        assert_eq!((p.rcode, p.a), (RCODE_NOTIMP, None));
    }

    #[test]
    fn malformed_queries() {
        let (t, _) = table_with_web();
        assert_eq!(respond(&[0, 1, 2], &t), None);
        let mut q = build_query(9, "web", QTYPE_A);
        q.truncate(q.len() - 3);
        let p = parse_response(&respond(&q, &t).unwrap()).unwrap();
        assert_eq!((p.id, p.rcode), (9, RCODE_FORMERR));
        // Responses are not answered.
        let mut q = build_query(9, "web", QTYPE_A);
        q[2] |= 0x80;
        assert_eq!(respond(&q, &t), None);
    }
}
