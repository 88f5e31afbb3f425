//! The trap handler: services each application's control-plane calls
//! against the service table and hands back connected streams.
//!
//! Applications only ever see virtual addresses. Real listeners and sockets
//! are opened on their behalf; connects resolve `vip:port` through the table,
//! pass the tag policy, pick an instance and either pair the two ends
//! in-process (same host) or open a remote stream prefixed with the client's
//! identity. Once a stream is handed over the handler never touches it.

pub mod preamble;
pub mod select;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::{Ipv4Addr, SocketAddrV4};

use serde::Serialize;

use self::preamble::Preamble;
use self::select::{policy_allows, selection_order, Policy, RoundRobin, SelectionStrategy};
use crate::fabric::{Accepted, Fabric};
use crate::model::{AppId, AppIdentity, HostId, RealEndpoint, ServiceKey, TagSet, VirtualIp};
use crate::names;
use crate::service_table::{
    EntryId, EntryRole, EntryState, ServiceEntry, ServiceTable, TableError, Transport,
};
use crate::trap::wire::{HandleKind, TrapOp, TrapReply, TrapRequest, TrapStatus, MAX_DGRAM};

/// First handle id handed to an application.
pub const FIRST_HANDLE: u32 = 3;
/// Start of the virtual ephemeral port range for client identities.
pub const EPHEMERAL_BASE: u16 = 49_152;
/// Connect tries at most this many candidates.
pub const MAX_CONNECT_TRIES: usize = 3;
const DNS_PORT: u16 = 53;
const AUTO_PORT_BASE: u16 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ChannelKind {
    Local,
    Remote,
}

/// Virtual identities of both ends of an established stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConnMeta {
    pub local_virtual: SocketAddrV4,
    pub peer_virtual: SocketAddrV4,
    pub channel_kind: ChannelKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SwitchStats {
    pub trap_requests: u64,
    pub trap_replies: u64,
    /// Bytes the node itself copied between streams (gateway sessions only).
    pub data_path_bytes: u64,
    pub local_connects: u64,
    pub remote_connects: u64,
    /// Managed-listener connections refused for lack of an identity header.
    pub unidentified_streams: u64,
    /// Datagrams dropped for lack of an identity header.
    pub unidentified_dgrams: u64,
    pub dns_queries: u64,
}

/// Whoever is connecting: an application, or the gateway acting for an
/// external client.
#[derive(Debug, Clone)]
pub struct ClientCtx {
    pub app_id: AppId,
    pub vip: VirtualIp,
    pub tags: TagSet,
    pub port: u16,
}

enum StreamState<F: Fabric> {
    Unbound,
    Bound {
        entry: EntryId,
        listener: F::Listener,
        listening: bool,
        /// Same-host connections waiting for accept.
        backlog: VecDeque<(F::Stream, SocketAddrV4)>,
    },
    Connected(ConnMeta),
}

struct DgramState<F: Fabric> {
    sock: Option<(F::Dgram, u16)>,
    /// Virtual port this handle sends from.
    vport: u16,
    entry: Option<EntryId>,
    /// Selection made for each destination key.
    pins: BTreeMap<ServiceKey, EntryId>,
    /// Where replies to a virtual sender go.
    routes: BTreeMap<SocketAddrV4, RealEndpoint>,
    peer: Option<SocketAddrV4>,
    inbox: VecDeque<(SocketAddrV4, Vec<u8>)>,
}

enum Handle<F: Fabric> {
    Stream(StreamState<F>),
    Dgram(DgramState<F>),
}

struct AppCtx<F: Fabric> {
    ident: AppIdentity,
    handles: BTreeMap<u32, Handle<F>>,
    next_handle: u32,
}

impl<F: Fabric> AppCtx<F> {
    /// Client identity without a port yet.
    fn client(&self) -> ClientCtx {
        ClientCtx {
            app_id: self.ident.app_id,
            vip: self.ident.effective_vip,
            tags: self.ident.spec.tags.clone(),
            port: 0,
        }
    }
}

/// First ephemeral port this host hands out. Hosts start in different
/// 256-port blocks so instances of one distributed application rarely
/// pick the same client identity.
pub fn ephemeral_start(host: &HostId) -> u16 {
    EPHEMERAL_BASE + (host.prefix() % 64) as u16 * 256
}

type Reply<F> = (TrapReply, Option<<F as Fabric>::Stream>);

pub struct Switch<F: Fabric> {
    host: HostId,
    strategy: SelectionStrategy,
    apps: BTreeMap<AppId, AppCtx<F>>,
    rr: RoundRobin,
    /// Local stream entries and the handle serving them.
    listeners: BTreeMap<EntryId, (AppId, u32)>,
    /// Next client port per vip; apps sharing a vip share the sequence.
    ports: BTreeMap<VirtualIp, u16>,
    pub stats: SwitchStats,
}

impl<F: Fabric> Switch<F> {
    pub fn new(host: HostId, strategy: SelectionStrategy) -> Self {
        Switch {
            host,
            strategy,
            apps: BTreeMap::new(),
            rr: RoundRobin::default(),
            listeners: BTreeMap::new(),
            ports: BTreeMap::new(),
            stats: SwitchStats::default(),
        }
    }

    fn alloc_port(&mut self, vip: VirtualIp) -> u16 {
        let next = self.ports.entry(vip).or_insert(ephemeral_start(&self.host));
        let p = *next;
        *next = if p == u16::MAX { EPHEMERAL_BASE } else { p + 1 };
        p
    }

    pub fn strategy(&self) -> SelectionStrategy {
        self.strategy
    }

    pub fn attach(&mut self, ident: AppIdentity) {
        self.apps.insert(
            ident.app_id,
            AppCtx {
                ident,
                handles: BTreeMap::new(),
                next_handle: FIRST_HANDLE,
            },
        );
    }

    /// Forget an application and everything it opened.
    pub fn detach(&mut self, app: &AppId) -> bool {
        self.listeners.retain(|_, (a, _)| a != app);
        self.apps.remove(app).is_some()
    }

    pub fn is_attached(&self, app: &AppId) -> bool {
        self.apps.contains_key(app)
    }

    pub fn identity(&self, app: &AppId) -> Option<&AppIdentity> {
        self.apps.get(app).map(|a| &a.ident)
    }

    pub fn identities(&self) -> impl Iterator<Item = &AppIdentity> {
        self.apps.values().map(|a| &a.ident)
    }

    /// Link-local vips in use on this node.
    pub fn link_local_in_use(&self) -> BTreeSet<VirtualIp> {
        self.apps.values().map(|a| a.ident.effective_vip).collect()
    }

    /// Virtual identities of an established stream.
    pub fn conn_meta(&self, app: &AppId, h: u32) -> Option<ConnMeta> {
        match self.apps.get(app)?.handles.get(&h)? {
            Handle::Stream(StreamState::Connected(m)) => Some(*m),
            _ => None,
        }
    }

    /// Decode, service and encode one trap exchange.
    pub fn handle_bytes(
        &mut self,
        app: AppId,
        request: &[u8],
        now: u64,
        table: &mut ServiceTable,
        fabric: &mut F,
    ) -> (Vec<u8>, Option<F::Stream>) {
        self.stats.trap_requests += 1;
        let (reply, stream) = match TrapRequest::decode(request) {
            Ok(req) => self.handle(app, req, now, table, fabric),
            Err(e) => {
                log::debug!("bad trap request from {app}: {e}");
                let op = request
                    .get(1)
                    .and_then(|c| TrapOp::from_code(*c).ok())
                    .unwrap_or(TrapOp::Close);
                (TrapReply::err(op, 0, TrapStatus::InvalidState), None)
            }
        };
        self.stats.trap_replies += 1;
        (reply.encode(), stream)
    }

    pub fn handle(
        &mut self,
        app: AppId,
        req: TrapRequest,
        now: u64,
        table: &mut ServiceTable,
        fabric: &mut F,
    ) -> Reply<F> {
        if !self.apps.contains_key(&app) {
            return (TrapReply::err(req.op, req.handle, TrapStatus::AttachFailed), None);
        }
        let op = req.op;
        let h = req.handle;
        let res = match op {
            TrapOp::Socket => self.op_socket(app, h),
            TrapOp::Bind => self.op_bind(app, h, req.addr.unwrap(), table, fabric),
            TrapOp::Listen => self.op_listen(app, h),
            TrapOp::Connect => self.op_connect(app, h, req.addr.unwrap(), table, fabric),
            TrapOp::Accept => self.op_accept(app, h, fabric),
            TrapOp::GetSockName => self.op_name(app, h, true),
            TrapOp::GetPeerName => self.op_name(app, h, false),
            TrapOp::SendTo => self.op_sendto(app, h, req.addr.unwrap(), req.payload, table, fabric),
            TrapOp::RecvFrom => self.op_recvfrom(app, h, fabric),
            TrapOp::Close => self.op_close(app, h, now, table),
        };
        match res {
            Ok(r) => r,
            Err(status) => (TrapReply::err(op, h, status), None),
        }
    }

    fn app_mut(&mut self, app: AppId) -> &mut AppCtx<F> {
        self.apps.get_mut(&app).expect("attached")
    }

    fn handle_mut(&mut self, app: AppId, h: u32) -> Result<&mut Handle<F>, TrapStatus> {
        self.app_mut(app).handles.get_mut(&h).ok_or(TrapStatus::BadHandle)
    }

    fn op_socket(&mut self, app: AppId, kind: u32) -> Result<Reply<F>, TrapStatus> {
        let kind = HandleKind::from_code(kind).ok_or(TrapStatus::InvalidState)?;
        let a = self.app_mut(app);
        let id = a.next_handle;
        a.next_handle += 1;
        let h = match kind {
            HandleKind::Stream => Handle::Stream(StreamState::Unbound),
            HandleKind::Datagram => Handle::Dgram(DgramState {
                sock: None,
                vport: 0,
                entry: None,
                pins: BTreeMap::new(),
                routes: BTreeMap::new(),
                peer: None,
                inbox: VecDeque::new(),
            }),
        };
        a.handles.insert(id, h);
        Ok((TrapReply::ok(TrapOp::Socket, id), None))
    }

    fn free_service_port(&self, app: &AppCtx<F>, table: &ServiceTable) -> Option<u16> {
        let vip = app.ident.effective_vip;
        (AUTO_PORT_BASE..EPHEMERAL_BASE).find(|p| {
            let key = ServiceKey::new(vip, *p).unwrap();
            table.iter().all(|e| e.key != key || !e.is_alive())
        })
    }

    fn op_bind(
        &mut self,
        app: AppId,
        h: u32,
        addr: SocketAddrV4,
        table: &mut ServiceTable,
        fabric: &mut F,
    ) -> Result<Reply<F>, TrapStatus> {
        let a = self.apps.get(&app).expect("attached");
        let ident = a.ident.clone();
        let ip = *addr.ip();
        if !(ip.is_loopback() || ip.is_unspecified() || ip == ident.effective_vip.addr()) {
            return Err(TrapStatus::InvalidState);
        }
        let kind = match a.handles.get(&h) {
            Some(Handle::Stream(StreamState::Unbound)) => Transport::Stream,
            Some(Handle::Dgram(d)) if d.entry.is_none() => Transport::Datagram,
            Some(_) => return Err(TrapStatus::InvalidState),
            None => return Err(TrapStatus::BadHandle),
        };
        if ident.is_anonymous() {
            return Err(TrapStatus::Unidentified);
        }
        let port = match addr.port() {
            0 => self.free_service_port(a, table).ok_or(TrapStatus::AddrInUse)?,
            p => p,
        };
        let key = ServiceKey::new(ident.effective_vip, port).unwrap();
        let held = table.iter().any(|e| {
            e.is_alive() && e.key == key && e.app_id == app && e.role == EntryRole::Service
        });
        if held {
            return Err(TrapStatus::AddrInUse);
        }
        let mut entry = ServiceEntry {
            key,
            real: RealEndpoint::new(fabric.host_ip(), 0),
            host: self.host,
            app_id: app,
            tags: ident.spec.tags.clone(),
            name: ident.spec.name.clone(),
            incarnation: 0,
            state: EntryState::Alive,
            stamp: 0,
            transport: kind,
            role: EntryRole::Service,
            expose: ident.spec.expose,
        };
        let vaddr = SocketAddrV4::new(key.vip.addr(), port);
        match kind {
            Transport::Stream => {
                let (listener, real_port) = fabric.listen().map_err(|_| TrapStatus::Internal)?;
                entry.real.port = real_port;
                let id = entry.id();
                insert(table, entry)?;
                self.listeners.insert(id, (app, h));
                *self.handle_mut(app, h)? = Handle::Stream(StreamState::Bound {
                    entry: id,
                    listener,
                    listening: false,
                    backlog: VecDeque::new(),
                });
            }
            Transport::Datagram => {
                let Handle::Dgram(d) = self.handle_mut(app, h)? else {
                    unreachable!()
                };
                if d.sock.is_none() {
                    d.sock = Some(fabric.dgram_bind().map_err(|_| TrapStatus::Internal)?);
                }
                entry.real.port = d.sock.as_ref().unwrap().1;
                d.vport = port;
                d.entry = Some(entry.id());
                insert(table, entry)?;
            }
        }
        Ok((TrapReply::ok(TrapOp::Bind, h).with_addr(vaddr), None))
    }

    fn op_listen(&mut self, app: AppId, h: u32) -> Result<Reply<F>, TrapStatus> {
        match self.handle_mut(app, h)? {
            Handle::Stream(StreamState::Bound { listening, .. }) => {
                *listening = true;
                Ok((TrapReply::ok(TrapOp::Listen, h), None))
            }
            _ => Err(TrapStatus::InvalidState),
        }
    }

    /// Resolve `dest` for `client`: loopback rewrite, lookup, policy, then
    /// selection order.
    fn resolve(
        &mut self,
        client: &ClientCtx,
        dest: SocketAddrV4,
        transport: Transport,
        table: &ServiceTable,
    ) -> Result<(ServiceKey, Vec<ServiceEntry>), TrapStatus> {
        let ip = if dest.ip().is_loopback() {
            client.vip.addr()
        } else {
            *dest.ip()
        };
        let vip = VirtualIp::new(ip).map_err(|_| TrapStatus::NoSuchService)?;
        let key = ServiceKey::new(vip, dest.port()).map_err(|_| TrapStatus::NoSuchService)?;
        let found: Vec<&ServiceEntry> = table
            .lookup(&key)
            .into_iter()
            .filter(|e| e.transport == transport)
            .collect();
        if found.is_empty() {
            return Err(TrapStatus::NoSuchService);
        }
        let allowed: Vec<&ServiceEntry> = found
            .into_iter()
            .filter(|e| policy_allows(&client.tags, &e.tags) == Policy::Allow)
            .collect();
        if allowed.is_empty() {
            log::debug!("{} denied access to {key}", client.app_id);
            return Err(TrapStatus::Denied);
        }
        let order = selection_order(&client.app_id, &key, &allowed, &self.strategy, &mut self.rr);
        Ok((key, order.into_iter().cloned().collect()))
    }

    /// Establish a stream from `client` to `dest`. Used for application
    /// connects and for gateway sessions.
    pub fn connect_as(
        &mut self,
        client: &ClientCtx,
        dest: SocketAddrV4,
        table: &ServiceTable,
        fabric: &mut F,
    ) -> Result<(F::Stream, ConnMeta), TrapStatus> {
        let (_, order) = self.resolve(client, dest, Transport::Stream, table)?;
        let local_virtual = SocketAddrV4::new(client.vip.addr(), client.port);
        for cand in order.iter().take(MAX_CONNECT_TRIES) {
            if cand.host == self.host {
                let Some(&(sapp, sh)) = self.listeners.get(&cand.id()) else {
                    continue;
                };
                let Some(Handle::Stream(StreamState::Bound {
                    listening: true,
                    backlog,
                    ..
                })) = self.apps.get_mut(&sapp).and_then(|a| a.handles.get_mut(&sh))
                else {
                    continue;
                };
                let Ok((mine, theirs)) = fabric.local_pair() else {
                    continue;
                };
                backlog.push_back((theirs, local_virtual));
                self.stats.local_connects += 1;
                return Ok((
                    mine,
                    ConnMeta {
                        local_virtual,
                        peer_virtual: dest,
                        channel_kind: ChannelKind::Local,
                    },
                ));
            }
            let pre = Preamble {
                client: local_virtual,
            };
            match fabric.connect(cand.real, Some(&pre)) {
                Ok(s) => {
                    self.stats.remote_connects += 1;
                    return Ok((
                        s,
                        ConnMeta {
                            local_virtual,
                            peer_virtual: dest,
                            channel_kind: ChannelKind::Remote,
                        },
                    ));
                }
                Err(e) => log::debug!("connect to {} failed: {e}", cand.real),
            }
        }
        Err(TrapStatus::ConnRefused)
    }

    fn op_connect(
        &mut self,
        app: AppId,
        h: u32,
        dest: SocketAddrV4,
        table: &mut ServiceTable,
        fabric: &mut F,
    ) -> Result<Reply<F>, TrapStatus> {
        let a = self.app_mut(app);
        match a.handles.get(&h) {
            Some(Handle::Stream(StreamState::Unbound)) => {
                let mut client = a.client();
                client.port = self.alloc_port(client.vip);
                let (stream, meta) = self.connect_as(&client, dest, table, fabric)?;
                *self.handle_mut(app, h)? = Handle::Stream(StreamState::Connected(meta));
                let mut r = TrapReply::ok(TrapOp::Connect, h).with_addr(dest);
                r.transfer = true;
                Ok((r, Some(stream)))
            }
            Some(Handle::Dgram(_)) => {
                // Connected datagram sockets: resolve now, pin the peer.
                let client = self.dgram_client(app, h, fabric)?;
                self.route_dgram(app, h, &client, dest, table)?;
                if let Handle::Dgram(d) = self.handle_mut(app, h)? {
                    d.peer = Some(dest);
                }
                Ok((TrapReply::ok(TrapOp::Connect, h).with_addr(dest), None))
            }
            Some(_) => Err(TrapStatus::InvalidState),
            None => Err(TrapStatus::BadHandle),
        }
    }

    fn op_accept(&mut self, app: AppId, h: u32, fabric: &mut F) -> Result<Reply<F>, TrapStatus> {
        let vip = self.apps[&app].ident.effective_vip;
        let Handle::Stream(StreamState::Bound {
            entry,
            listener,
            listening,
            backlog,
        }) = self.handle_mut(app, h)?
        else {
            return Err(TrapStatus::InvalidState);
        };
        if !*listening {
            return Err(TrapStatus::InvalidState);
        }
        let local_virtual = SocketAddrV4::new(vip.addr(), entry.key.port);
        let mut unidentified = 0;
        let got = if let Some((s, peer)) = backlog.pop_front() {
            Some((s, peer, ChannelKind::Local))
        } else {
            loop {
                match fabric.try_accept(listener) {
                    Ok(Some(Accepted::Managed(s, p))) => break Some((s, p.client, ChannelKind::Remote)),
                    Ok(Some(Accepted::Rejected)) => unidentified += 1,
                    Ok(Some(Accepted::External(_))) => unidentified += 1,
                    Ok(None) | Err(_) => break None,
                }
            }
        };
        self.stats.unidentified_streams += unidentified;
        let Some((stream, peer, kind)) = got else {
            return Err(TrapStatus::WouldBlock);
        };
        let a = self.app_mut(app);
        let id = a.next_handle;
        a.next_handle += 1;
        let meta = ConnMeta {
            local_virtual,
            peer_virtual: peer,
            channel_kind: kind,
        };
        a.handles.insert(id, Handle::Stream(StreamState::Connected(meta)));
        let mut r = TrapReply::ok(TrapOp::Accept, id).with_addr(peer);
        r.transfer = true;
        Ok((r, Some(stream)))
    }

    fn op_name(&mut self, app: AppId, h: u32, sock: bool) -> Result<Reply<F>, TrapStatus> {
        let vip = self.apps[&app].ident.effective_vip.addr();
        let op = if sock { TrapOp::GetSockName } else { TrapOp::GetPeerName };
        let addr = match (self.handle_mut(app, h)?, sock) {
            (Handle::Stream(StreamState::Connected(m)), true) => Some(m.local_virtual),
            (Handle::Stream(StreamState::Connected(m)), false) => Some(m.peer_virtual),
            (Handle::Stream(StreamState::Bound { entry, .. }), true) => {
                Some(SocketAddrV4::new(vip, entry.key.port))
            }
            (Handle::Dgram(d), true) if d.vport != 0 => Some(SocketAddrV4::new(vip, d.vport)),
            (Handle::Dgram(d), false) => Some(d.peer.ok_or(TrapStatus::NotConnected)?),
            (_, true) => None,
            (_, false) => return Err(TrapStatus::NotConnected),
        };
        let mut r = TrapReply::ok(op, h);
        r.addr = addr;
        Ok((r, None))
    }

    /// Make sure a datagram handle has a socket and a virtual port; returns
    /// the identity it sends with.
    fn dgram_client(&mut self, app: AppId, h: u32, fabric: &mut F) -> Result<ClientCtx, TrapStatus> {
        let a = self.app_mut(app);
        let mut client = a.client();
        let needs_port = matches!(a.handles.get(&h), Some(Handle::Dgram(d)) if d.vport == 0);
        let fresh = if needs_port { self.alloc_port(client.vip) } else { 0 };
        let a = self.app_mut(app);
        let Some(Handle::Dgram(d)) = a.handles.get_mut(&h) else {
            return Err(TrapStatus::InvalidState);
        };
        if d.sock.is_none() {
            d.sock = Some(fabric.dgram_bind().map_err(|_| TrapStatus::Internal)?);
        }
        if d.vport == 0 {
            d.vport = fresh;
        }
        client.port = d.vport;
        Ok(client)
    }

    /// Where a datagram for `dest` should go. `None` means the built-in DNS
    /// responder.
    fn route_dgram(
        &mut self,
        app: AppId,
        h: u32,
        client: &ClientCtx,
        dest: SocketAddrV4,
        table: &ServiceTable,
    ) -> Result<Option<RealEndpoint>, TrapStatus> {
        match self.resolve(client, dest, Transport::Datagram, table) {
            Ok((key, order)) => {
                let Handle::Dgram(d) = self.handle_mut(app, h)? else {
                    return Err(TrapStatus::InvalidState);
                };
                let pinned = d
                    .pins
                    .get(&key)
                    .and_then(|id| order.iter().find(|e| e.id() == *id));
                let chosen = pinned.unwrap_or(&order[0]);
                d.pins.insert(key, chosen.id());
                Ok(Some(chosen.real))
            }
            Err(TrapStatus::NoSuchService) => {
                if let Some(Handle::Dgram(d)) = self.apps[&app].handles.get(&h) {
                    if let Some(r) = d.routes.get(&dest) {
                        return Ok(Some(*r));
                    }
                }
                if dest.port() == DNS_PORT {
                    return Ok(None);
                }
                Err(TrapStatus::NoSuchService)
            }
            Err(e) => Err(e),
        }
    }

    fn op_sendto(
        &mut self,
        app: AppId,
        h: u32,
        dest: SocketAddrV4,
        payload: Vec<u8>,
        table: &mut ServiceTable,
        fabric: &mut F,
    ) -> Result<Reply<F>, TrapStatus> {
        if payload.len() > MAX_DGRAM {
            return Err(TrapStatus::MessageTooLong);
        }
        let dest = match (dest.ip().is_unspecified() && dest.port() == 0, self.handle_mut(app, h)?) {
            (true, Handle::Dgram(d)) => d.peer.ok_or(TrapStatus::NotConnected)?,
            (_, Handle::Dgram(_)) => dest,
            _ => return Err(TrapStatus::InvalidState),
        };
        let client = self.dgram_client(app, h, fabric)?;
        let route = self.route_dgram(app, h, &client, dest, table)?;
        let n = payload.len() as u32;
        let Handle::Dgram(d) = self.handle_mut(app, h)? else {
            unreachable!()
        };
        match route {
            Some(to) => {
                let mut bytes = Preamble::new(client.vip.addr(), client.port).encode().to_vec();
                bytes.extend_from_slice(&payload);
                let (sock, _) = d.sock.as_ref().unwrap();
                fabric
                    .dgram_send(sock, to, &bytes)
                    .map_err(|_| TrapStatus::ConnRefused)?;
            }
            None => {
                if let Some(resp) = names::respond(&payload, table) {
                    d.inbox.push_back((dest, resp));
                }
                self.stats.dns_queries += 1;
            }
        }
        let mut r = TrapReply::ok(TrapOp::SendTo, h);
        r.payload = n.to_be_bytes().to_vec();
        Ok((r, None))
    }

    fn op_recvfrom(&mut self, app: AppId, h: u32, fabric: &mut F) -> Result<Reply<F>, TrapStatus> {
        let Handle::Dgram(d) = self.handle_mut(app, h)? else {
            return Err(TrapStatus::InvalidState);
        };
        let mut dropped = 0;
        if let Some((sock, _)) = &d.sock {
            while let Ok(Some((bytes, from))) = fabric.dgram_try_recv(sock) {
                match Preamble::split(&bytes) {
                    Some((p, body)) => {
                        d.routes.insert(p.client, from);
                        d.inbox.push_back((p.client, body.to_vec()));
                    }
                    None => dropped += 1,
                }
            }
        }
        let next = d.inbox.pop_front();
        self.stats.unidentified_dgrams += dropped;
        let (src, payload) = next.ok_or(TrapStatus::WouldBlock)?;
        let mut r = TrapReply::ok(TrapOp::RecvFrom, h).with_addr(src);
        r.payload = payload;
        Ok((r, None))
    }

    fn op_close(
        &mut self,
        app: AppId,
        h: u32,
        now: u64,
        table: &mut ServiceTable,
    ) -> Result<Reply<F>, TrapStatus> {
        let handle = self
            .app_mut(app)
            .handles
            .remove(&h)
            .ok_or(TrapStatus::BadHandle)?;
        let entry = match handle {
            Handle::Stream(StreamState::Bound { entry, .. }) => Some(entry),
            Handle::Dgram(d) => d.entry,
            _ => None,
        };
        if let Some(id) = entry {
            self.listeners.remove(&id);
            table.tombstone_entry(&id, now);
        }
        Ok((TrapReply::ok(TrapOp::Close, h), None))
    }

    /// Record gateway session traffic against the data-path counter.
    pub fn count_data_path(&mut self, bytes: u64) {
        self.stats.data_path_bytes += bytes;
    }
}

fn insert(table: &mut ServiceTable, entry: ServiceEntry) -> Result<(), TrapStatus> {
    match table.insert_local(entry) {
        Ok(_) => Ok(()),
        Err(TableError::DuplicateAppBinding(..)) => Err(TrapStatus::AddrInUse),
        Err(TableError::NotLocal) => Err(TrapStatus::Internal),
    }
}

/// Whether `addr` is one of the given real host addresses.
pub fn is_real_endpoint(addr: &SocketAddrV4, hosts: &BTreeSet<Ipv4Addr>) -> bool {
    hosts.contains(addr.ip())
}
