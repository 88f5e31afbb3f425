//! Exposure of internal services on external ports.
//!
//! Owners mark entries with an exposure request. The lowest live gateway
//! host picks them up, listens on an external port, advertises the binding
//! as a gateway-role table entry and proxies each external connection to an
//! instance chosen the same way an application connect would choose it.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddrV4;
use std::ops::RangeInclusive;

use thiserror::Error;

use crate::fabric::{Accepted, Fabric};
use crate::model::{AppId, ExposeRequest, HostId, RealEndpoint, ServiceKey, TagSet};
use crate::names::allocate_link_local;
use crate::service_table::{
    EntryId, EntryRole, EntryState, ServiceEntry, ServiceTable, Transport,
};
use crate::switch::select::POLICY_KEY;
use crate::switch::{ClientCtx, Switch, EPHEMERAL_BASE};

pub const PORT_RANGE: RangeInclusive<u16> = 30_000..=32_767;
/// Tag value every gateway session carries.
pub const EXTERNAL_GROUP: &str = "__external__";
const BINDING_SEQ_FLAG: u32 = 0x8000_0000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("no live gateway")]
    NoGateway,
    #[error("external port {0} unavailable")]
    PortUnavailable(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindingState {
    Active,
    Released,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayBinding {
    pub key: ServiceKey,
    pub gateway: HostId,
    pub external_port: u16,
    pub state: BindingState,
}

pub fn choose_gateway(alive: &[HostId]) -> Option<HostId> {
    alive.iter().min().copied()
}

/// Decide where `key` is exposed. `used` holds the external ports already
/// taken on the chosen gateway.
pub fn expose(
    key: ServiceKey,
    requested: ExposeRequest,
    alive_gateways: &[HostId],
    used: &BTreeSet<u16>,
) -> Result<GatewayBinding, GatewayError> {
    let gateway = choose_gateway(alive_gateways).ok_or(GatewayError::NoGateway)?;
    let external_port = match requested {
        ExposeRequest::Port(p) if used.contains(&p) || p == 0 => {
            return Err(GatewayError::PortUnavailable(p))
        }
        ExposeRequest::Port(p) => p,
        ExposeRequest::Auto => PORT_RANGE
            .clone()
            .find(|p| !used.contains(p))
            .ok_or(GatewayError::PortUnavailable(*PORT_RANGE.end()))?,
    };
    Ok(GatewayBinding {
        key,
        gateway,
        external_port,
        state: BindingState::Active,
    })
}

/// App id under which a gateway advertises a binding.
pub fn binding_app_id(gateway: &HostId, port: u16) -> AppId {
    AppId {
        prefix: gateway.prefix(),
        seq: BINDING_SEQ_FLAG | u32::from(port),
    }
}

pub fn binding_entry(b: &GatewayBinding, gateway_ip: std::net::Ipv4Addr) -> ServiceEntry {
    ServiceEntry {
        key: b.key,
        real: RealEndpoint::new(gateway_ip, b.external_port),
        host: b.gateway,
        app_id: binding_app_id(&b.gateway, b.external_port),
        tags: TagSet::new(),
        name: None,
        incarnation: 0,
        state: EntryState::Alive,
        stamp: 0,
        transport: Transport::Stream,
        role: EntryRole::Gateway,
        expose: None,
    }
}

/// Tags carried by the synthetic client of a gateway session: the external
/// marker plus the server's own groups, so exposure implies admission.
pub fn admit_tags(server: &TagSet) -> TagSet {
    let mut t = TagSet::new();
    t.insert(POLICY_KEY, EXTERNAL_GROUP).expect("valid tag");
    if let Some(vals) = server.get(POLICY_KEY) {
        for v in vals {
            t.insert(POLICY_KEY, v).expect("valid tag");
        }
    }
    t
}

/// Active bindings as seen in a table.
pub fn bindings_in(table: &ServiceTable) -> Vec<GatewayBinding> {
    table
        .iter()
        .filter(|e| e.role == EntryRole::Gateway && e.is_alive())
        .map(|e| GatewayBinding {
            key: e.key,
            gateway: e.host,
            external_port: e.real.port,
            state: BindingState::Active,
        })
        .collect()
}

/// Services that ask to be exposed, with the request and tags of the lowest
/// live instance.
fn wanted(table: &ServiceTable) -> BTreeMap<ServiceKey, (ExposeRequest, TagSet)> {
    let mut out = BTreeMap::new();
    for e in table.iter() {
        if e.is_alive() && e.role == EntryRole::Service && e.transport == Transport::Stream {
            if let Some(req) = e.expose {
                out.entry(e.key).or_insert((req, e.tags.clone()));
            }
        }
    }
    out
}

struct Active<F: Fabric> {
    binding: GatewayBinding,
    entry: EntryId,
    listener: F::Listener,
    admit: TagSet,
    sessions: BTreeSet<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionBytes {
    pub inbound: u64,
    pub outbound: u64,
}

/// Gateway role of one node.
pub struct GatewayState<F: Fabric> {
    active: BTreeMap<ServiceKey, Active<F>>,
    sessions: BTreeMap<u64, SessionBytes>,
    next_port: u16,
    /// Finished sessions, most recent last.
    pub finished: Vec<SessionBytes>,
    pub refused: u64,
    pub failures: BTreeMap<ServiceKey, GatewayError>,
}

impl<F: Fabric> Default for GatewayState<F> {
    fn default() -> Self {
        GatewayState {
            active: BTreeMap::new(),
            sessions: BTreeMap::new(),
            next_port: EPHEMERAL_BASE,
            finished: Vec::new(),
            refused: 0,
            failures: BTreeMap::new(),
        }
    }
}

impl<F: Fabric> GatewayState<F> {
    pub fn bindings(&self) -> Vec<GatewayBinding> {
        self.active.values().map(|a| a.binding.clone()).collect()
    }

    pub fn live_sessions(&self) -> usize {
        self.sessions.len()
    }

    fn release(&mut self, key: &ServiceKey, table: &mut ServiceTable, fabric: &mut F, now: u64) {
        if let Some(a) = self.active.remove(key) {
            for id in &a.sessions {
                fabric.stop_proxy(*id);
                if let Some(b) = self.sessions.remove(id) {
                    self.finished.push(b);
                }
            }
            table.tombstone_entry(&a.entry, now);
            log::info!("released {} from port {}", key, a.binding.external_port);
        }
    }

    /// Bring this node's bindings in line with the table. `serving` is true
    /// when this node is the chosen gateway.
    pub fn reconcile(
        &mut self,
        me: HostId,
        alive_gateways: &[HostId],
        table: &mut ServiceTable,
        fabric: &mut F,
        now: u64,
    ) {
        let serving = choose_gateway(alive_gateways) == Some(me);
        let want = if serving { wanted(table) } else { BTreeMap::new() };
        let stale: Vec<ServiceKey> = self
            .active
            .keys()
            .filter(|k| !want.contains_key(k))
            .copied()
            .collect();
        for k in stale {
            self.release(&k, table, fabric, now);
        }
        self.failures.retain(|k, _| want.contains_key(k));
        for (key, (req, tags)) in want {
            if self.active.contains_key(&key) {
                continue;
            }
            let mut used: BTreeSet<u16> =
                self.active.values().map(|a| a.binding.external_port).collect();
            // Auto requests skip ports the host refuses to give us.
            let bound = loop {
                let b = match expose(key, req, alive_gateways, &used) {
                    Ok(b) => b,
                    Err(e) => break Err(e),
                };
                match fabric.listen_external(b.external_port) {
                    Ok(l) => break Ok((b, l)),
                    Err(_) if req == ExposeRequest::Auto => {
                        used.insert(b.external_port);
                    }
                    Err(_) => break Err(GatewayError::PortUnavailable(b.external_port)),
                }
            };
            match bound {
                Ok((binding, listener)) => {
                    let entry = binding_entry(&binding, fabric.host_ip());
                    let id = entry.id();
                    if table.insert_local(entry).is_err() {
                        continue;
                    }
                    log::info!("exposed {} on port {}", key, binding.external_port);
                    self.failures.remove(&key);
                    self.active.insert(
                        key,
                        Active {
                            binding,
                            entry: id,
                            listener,
                            admit: admit_tags(&tags),
                            sessions: BTreeSet::new(),
                        },
                    );
                }
                Err(e) => {
                    if self.failures.insert(key, e.clone()).is_none() {
                        log::warn!("cannot expose {key}: {e}");
                    }
                }
            }
        }
    }

    /// Accept pending external connections and account proxy progress.
    pub fn poll(&mut self, switch: &mut Switch<F>, table: &ServiceTable, fabric: &mut F) {
        for a in self.active.values_mut() {
            loop {
                let ext = match fabric.try_accept(&mut a.listener) {
                    Ok(Some(Accepted::External(s))) => s,
                    Ok(Some(_)) => continue,
                    Ok(None) | Err(_) => break,
                };
                let app_id = binding_app_id(&a.binding.gateway, a.binding.external_port);
                let vip = match allocate_link_local(&app_id, &BTreeSet::new()) {
                    Ok(v) => v,
                    Err(_) => break,
                };
                let port = self.next_port;
                self.next_port = if port == u16::MAX { EPHEMERAL_BASE } else { port + 1 };
                let client = ClientCtx {
                    app_id,
                    vip,
                    tags: a.admit.clone(),
                    port,
                };
                let dest = SocketAddrV4::new(a.binding.key.vip.addr(), a.binding.key.port);
                match switch.connect_as(&client, dest, table, fabric) {
                    Ok((int, _)) => {
                        let id = fabric.start_proxy(ext, int);
                        a.sessions.insert(id);
                        self.sessions.insert(id, SessionBytes::default());
                    }
                    Err(status) => {
                        log::debug!("external connection to {dest} refused: {status:?}");
                        self.refused += 1;
                    }
                }
            }
        }
        for r in fabric.poll_proxies() {
            let Some(prev) = self.sessions.get_mut(&r.id) else {
                continue;
            };
            let delta = (r.inbound - prev.inbound) + (r.outbound - prev.outbound);
            switch.count_data_path(delta);
            *prev = SessionBytes {
                inbound: r.inbound,
                outbound: r.outbound,
            };
            if r.done {
                let b = self.sessions.remove(&r.id).unwrap();
                self.finished.push(b);
                for a in self.active.values_mut() {
                    a.sessions.remove(&r.id);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::normalize_tags;

    fn key() -> ServiceKey {
        "10.1.1.1:80".parse().unwrap()
    }

    #[test]
    fn lowest_gateway_wins() {
        let ha = HostId([1; 16]);
        let hb = HostId([2; 16]);
        let b = expose(key(), ExposeRequest::Auto, &[hb, ha], &BTreeSet::new()).unwrap();
        assert_eq!(b.gateway, ha);
        assert_eq!(b.external_port, 30_000);
    }

    #[test]
    fn fixed_port_twice_is_unavailable() {
        let g = [HostId([1; 16])];
        let mut used = BTreeSet::new();
        let b = expose(key(), ExposeRequest::Port(30_080), &g, &used).unwrap();
        used.insert(b.external_port);
        assert_eq!(
            expose(key(), ExposeRequest::Port(30_080), &g, &used),
            Err(GatewayError::PortUnavailable(30_080))
        );
        // Auto skips taken ports.
        let used: BTreeSet<u16> = [30_000, 30_001].into();
        assert_eq!(expose(key(), ExposeRequest::Auto, &g, &used).unwrap().external_port, 30_002);
    }

    #[test]
    fn no_gateway() {
        assert_eq!(
            expose(key(), ExposeRequest::Auto, &[], &BTreeSet::new()),
            Err(GatewayError::NoGateway)
        );
    }

    #[test]
    fn admit_tags_include_marker_and_server_groups() {
        let t = admit_tags(&normalize_tags(&["grp=2", "tier=db"]).unwrap());
        assert_eq!(t, normalize_tags(&["grp=__external__", "grp=2"]).unwrap());
    }
}
