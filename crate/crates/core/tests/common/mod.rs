#![allow(dead_code)]

pub mod merge;
pub mod oracle;
pub mod sim;

use std::net::Ipv4Addr;

use appnet::model::{AppId, HostId, RealEndpoint, ServiceKey, TagSet};
use appnet::service_table::{EntryRole, EntryState, ServiceEntry, Transport};

pub fn host(n: u8) -> HostId {
    HostId([n; 16])
}

pub fn entry(vip: Ipv4Addr, port: u16, h: u8, seq: u32) -> ServiceEntry {
    ServiceEntry {
        key: ServiceKey::new(appnet::model::VirtualIp::new(vip).unwrap(), port).unwrap(),
        real: RealEndpoint::new(Ipv4Addr::new(192, 168, 0, h), 40000u16.wrapping_add(seq as u16)),
        host: host(h),
        app_id: AppId::new(&host(h), seq),
        tags: TagSet::new(),
        name: None,
        incarnation: 0,
        state: EntryState::Alive,
        stamp: 0,
        transport: Transport::Stream,
        role: EntryRole::Service,
        expose: None,
    }
}
