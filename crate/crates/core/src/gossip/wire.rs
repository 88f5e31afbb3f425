//! Envelope wire format.
//!
//! ```text
//! version:u8 (0x01) | kind:u8 | sender:[u8;16]
//! rumors:  u32 byte length, then entries
//! deltas:  u32 byte length, then entries
//! digest:  u32 byte length (0xffffffff = absent), then entries
//! entry := u16 length | body
//! ```
//!
//! All integers are big-endian. For `PingReq` the first rumor is the probe
//! target.

use crate::codec::{DecodeError, Reader, Writer};
use crate::model::{AppId, ExposeRequest, HostId, RealEndpoint, ServiceKey, TagSet, VirtualIp};
use crate::service_table::{
    DigestItem, EntryId, EntryRole, EntryState, ServiceEntry, Transport, Version,
};

use super::{EnvelopeKind, GossipEnvelope, MemberRecord, MemberStatus};

pub const WIRE_VERSION: u8 = 0x01;
pub const MAX_ENVELOPE: usize = 60_000;
const DIGEST_ABSENT: u32 = u32::MAX;

impl EnvelopeKind {
    fn code(self) -> u8 {
        match self {
            EnvelopeKind::Ping => 1,
            EnvelopeKind::PingReq => 2,
            EnvelopeKind::Ack => 3,
            EnvelopeKind::Sync => 4,
            EnvelopeKind::SyncReply => 5,
        }
    }

    fn from_code(c: u8) -> Result<Self, DecodeError> {
        Ok(match c {
            1 => EnvelopeKind::Ping,
            2 => EnvelopeKind::PingReq,
            3 => EnvelopeKind::Ack,
            4 => EnvelopeKind::Sync,
            5 => EnvelopeKind::SyncReply,
            c => return Err(DecodeError::UnknownCode(c)),
        })
    }
}

pub(crate) fn member_bytes(m: &MemberRecord) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(m.host.as_bytes())
        .ip(m.addr.host_ip)
        .u16(m.addr.port)
        .u8(match m.status {
            MemberStatus::Alive => 0,
            MemberStatus::Suspect => 1,
            MemberStatus::Dead => 2,
        })
        .u64(m.incarnation)
        .u8(u8::from(m.gateway));
    w.into_vec()
}

fn read_member(r: &mut Reader<'_>) -> Result<MemberRecord, DecodeError> {
    let host = HostId(r.array()?);
    let addr = RealEndpoint::new(r.ip()?, r.u16()?);
    let status = match r.u8()? {
        0 => MemberStatus::Alive,
        1 => MemberStatus::Suspect,
        2 => MemberStatus::Dead,
        c => return Err(DecodeError::UnknownCode(c)),
    };
    let incarnation = r.u64()?;
    let gateway = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(DecodeError::Malformed("member flags")),
    };
    Ok(MemberRecord {
        host,
        addr,
        status,
        incarnation,
        last_change: 0,
        gateway,
    })
}

fn write_key(w: &mut Writer, key: &ServiceKey) {
    w.ip(key.vip.addr()).u16(key.port);
}

fn read_key(r: &mut Reader<'_>) -> Result<ServiceKey, DecodeError> {
    let vip = VirtualIp::new(r.ip()?).map_err(|_| DecodeError::Malformed("vip"))?;
    ServiceKey::new(vip, r.u16()?).map_err(|_| DecodeError::Malformed("port"))
}

fn state_code(s: EntryState) -> u8 {
    match s {
        EntryState::Alive => 0,
        EntryState::Tombstone => 1,
    }
}

fn read_state(r: &mut Reader<'_>) -> Result<EntryState, DecodeError> {
    match r.u8()? {
        0 => Ok(EntryState::Alive),
        1 => Ok(EntryState::Tombstone),
        c => Err(DecodeError::UnknownCode(c)),
    }
}

pub(crate) fn entry_bytes(e: &ServiceEntry) -> Vec<u8> {
    let mut w = Writer::new();
    write_key(&mut w, &e.key);
    w.ip(e.real.host_ip)
        .u16(e.real.port)
        .bytes(e.host.as_bytes())
        .bytes(&e.app_id.to_bytes())
        .u64(e.incarnation)
        .u8(state_code(e.state))
        .u8(match e.transport {
            Transport::Stream => 0,
            Transport::Datagram => 1,
        })
        .u8(match e.role {
            EntryRole::Service => 0,
            EntryRole::Gateway => 1,
        });
    match e.expose {
        None => w.u8(0).u16(0),
        Some(ExposeRequest::Auto) => w.u8(1).u16(0),
        Some(ExposeRequest::Port(p)) => w.u8(2).u16(p),
    };
    w.str8(e.name.as_deref().unwrap_or(""));
    let pairs: Vec<(&str, &str)> = e.tags.pairs().collect();
    w.u16(pairs.len() as u16);
    for (k, v) in pairs {
        w.str8(k).str16(v);
    }
    w.into_vec()
}

fn read_entry(r: &mut Reader<'_>) -> Result<ServiceEntry, DecodeError> {
    let key = read_key(r)?;
    let real = RealEndpoint::new(r.ip()?, r.u16()?);
    let host = HostId(r.array()?);
    let app_id = AppId::from_bytes(&r.array()?);
    let incarnation = r.u64()?;
    let state = read_state(r)?;
    let transport = match r.u8()? {
        0 => Transport::Stream,
        1 => Transport::Datagram,
        c => return Err(DecodeError::UnknownCode(c)),
    };
    let role = match r.u8()? {
        0 => EntryRole::Service,
        1 => EntryRole::Gateway,
        c => return Err(DecodeError::UnknownCode(c)),
    };
    let (etag, eport) = (r.u8()?, r.u16()?);
    let expose = match etag {
        0 => None,
        1 => Some(ExposeRequest::Auto),
        2 => Some(ExposeRequest::Port(eport)),
        c => return Err(DecodeError::UnknownCode(c)),
    };
    let name = r.str8()?;
    let n = r.u16()?;
    let mut tags = TagSet::new();
    for _ in 0..n {
        let k = r.str8()?;
        let v = r.str16()?;
        tags.insert(&k, &v)
            .map_err(|_| DecodeError::Malformed("tag"))?;
    }
    Ok(ServiceEntry {
        key,
        real,
        host,
        app_id,
        tags,
        name: (!name.is_empty()).then_some(name),
        incarnation,
        state,
        stamp: 0,
        transport,
        role,
        expose,
    })
}

fn digest_bytes(d: &DigestItem) -> Vec<u8> {
    let mut w = Writer::new();
    write_key(&mut w, &d.id.key);
    w.bytes(d.id.host.as_bytes())
        .bytes(&d.id.app_id.to_bytes())
        .u64(d.version.incarnation)
        .u8(state_code(d.version.state));
    w.into_vec()
}

fn read_digest(r: &mut Reader<'_>) -> Result<DigestItem, DecodeError> {
    let key = read_key(r)?;
    let host = HostId(r.array()?);
    let app_id = AppId::from_bytes(&r.array()?);
    let incarnation = r.u64()?;
    let state = read_state(r)?;
    Ok(DigestItem {
        id: EntryId { key, host, app_id },
        version: Version { incarnation, state },
    })
}

/// Header plus three section length words.
pub(crate) const FIXED_OVERHEAD: usize = 2 + 16 + 4 * 3;
pub(crate) const ENTRY_PREFIX: usize = 2;

fn write_section(w: &mut Writer, items: &[Vec<u8>]) {
    let len: usize = items.iter().map(|i| ENTRY_PREFIX + i.len()).sum();
    w.u32(len as u32);
    for i in items {
        w.u16(i.len() as u16).bytes(i);
    }
}

fn read_section<T>(
    r: &mut Reader<'_>,
    len: usize,
    mut item: impl FnMut(&mut Reader<'_>) -> Result<T, DecodeError>,
) -> Result<Vec<T>, DecodeError> {
    let mut sec = Reader::new(r.take(len)?);
    let mut out = Vec::new();
    while sec.remaining() > 0 {
        let n = sec.u16()? as usize;
        let mut body = Reader::new(sec.take(n)?);
        out.push(item(&mut body)?);
        body.finish()?;
    }
    Ok(out)
}

impl GossipEnvelope {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(WIRE_VERSION)
            .u8(self.kind.code())
            .bytes(self.sender.as_bytes());
        let rumors: Vec<Vec<u8>> = self.membership_rumors.iter().map(member_bytes).collect();
        write_section(&mut w, &rumors);
        let deltas: Vec<Vec<u8>> = self.table_deltas.iter().map(entry_bytes).collect();
        write_section(&mut w, &deltas);
        match &self.sync_digest {
            None => {
                w.u32(DIGEST_ABSENT);
            }
            Some(d) => {
                let items: Vec<Vec<u8>> = d.iter().map(digest_bytes).collect();
                write_section(&mut w, &items);
            }
        }
        w.into_vec()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let v = r.u8()?;
        if v != WIRE_VERSION {
            return Err(DecodeError::Version(v));
        }
        let kind = EnvelopeKind::from_code(r.u8()?)?;
        let sender = HostId(r.array()?);
        let n = r.u32()? as usize;
        let membership_rumors = read_section(&mut r, n, read_member)?;
        let n = r.u32()? as usize;
        let table_deltas = read_section(&mut r, n, read_entry)?;
        let n = r.u32()?;
        let sync_digest = if n == DIGEST_ABSENT {
            None
        } else {
            Some(read_section(&mut r, n as usize, read_digest)?)
        };
        r.finish()?;
        Ok(GossipEnvelope {
            kind,
            sender,
            membership_rumors,
            table_deltas,
            sync_digest,
        })
    }
}

/// Accumulates envelope sections while tracking the encoded size so the
/// result never exceeds [`MAX_ENVELOPE`].
pub(crate) struct SizeBudget {
    used: usize,
}

impl SizeBudget {
    pub fn new() -> Self {
        SizeBudget {
            used: FIXED_OVERHEAD,
        }
    }

    pub fn try_add(&mut self, body_len: usize) -> bool {
        let n = ENTRY_PREFIX + body_len;
        if self.used + n > MAX_ENVELOPE {
            return false;
        }
        self.used += n;
        true
    }

    pub fn digest_item_len() -> usize {
        4 + 2 + 16 + 12 + 8 + 1
    }
}
