//! SWIM-style membership with piggybacked service-table dissemination.
//!
//! The protocol is a pure state machine: callers feed it ticks and inbound
//! envelopes and send whatever it returns. One tick is one protocol period.
//! Each period a node pings one member taken from a shuffled round-robin
//! order; an unanswered ping triggers indirect probes through `k_indirect`
//! other members the next period, and if those stay silent the target is
//! suspected. Suspects that do not refute within `suspect_timeout` periods are
//! declared dead. Membership changes and table deltas ride along on every
//! probe message, each retransmitted a bounded number of times; a periodic
//! digest exchange (anti-entropy) repairs whatever the rumors missed.

mod wire;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use self::wire::{MAX_ENVELOPE, WIRE_VERSION};
use self::wire::{entry_bytes, member_bytes, SizeBudget};
use crate::codec::DecodeError;
use crate::model::{HostId, RealEndpoint};
use crate::service_table::{EntryId, ServiceTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MemberStatus {
    Alive,
    Suspect,
    Dead,
}

impl MemberStatus {
    fn precedence(self) -> u8 {
        match self {
            MemberStatus::Alive => 0,
            MemberStatus::Suspect => 1,
            MemberStatus::Dead => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub host: HostId,
    /// Gossip listener address.
    pub addr: RealEndpoint,
    pub status: MemberStatus,
    pub incarnation: u64,
    /// Local time of the last status change; not transmitted.
    pub last_change: u64,
    pub gateway: bool,
}

impl MemberRecord {
    /// Whether `self` should replace `cur` under the incarnation rules.
    fn supersedes(&self, cur: &MemberRecord) -> bool {
        (self.incarnation, self.status.precedence()) > (cur.incarnation, cur.status.precedence())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvelopeKind {
    Ping,
    PingReq,
    Ack,
    Sync,
    SyncReply,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GossipEnvelope {
    pub kind: EnvelopeKind,
    pub sender: HostId,
    pub membership_rumors: Vec<MemberRecord>,
    pub table_deltas: Vec<crate::service_table::ServiceEntry>,
    pub sync_digest: Option<Vec<crate::service_table::DigestItem>>,
}

/// Protocol parameters, in periods where applicable.
#[derive(Debug, Clone)]
pub struct GossipConfig {
    pub k_indirect: usize,
    pub suspect_timeout: u64,
    /// Maximum rumors (of each list) piggybacked on one envelope.
    pub piggyback_limit: usize,
    /// Retransmission multiplier: each rumor goes out at most
    /// `ceil(mult * log2(N + 1))` times.
    pub retransmit_mult: f64,
    pub anti_entropy_period: u64,
    pub join_attempts: u32,
}

impl Default for GossipConfig {
    fn default() -> Self {
        GossipConfig {
            k_indirect: 3,
            suspect_timeout: 4,
            piggyback_limit: 6,
            retransmit_mult: 3.0,
            anti_entropy_period: 10,
            join_attempts: 4,
        }
    }
}

/// Result of processing one inbound envelope.
#[derive(Debug, Default)]
pub struct Handled {
    /// Members this envelope caused us to declare dead.
    pub newly_dead: Vec<HostId>,
    pub replies: Vec<(RealEndpoint, GossipEnvelope)>,
    /// Table deltas that changed local state.
    pub applied: usize,
}

#[derive(Debug, Default, Clone)]
pub struct GossipStats {
    pub decode_errors: u64,
    pub sent: u64,
    pub received: u64,
}

#[derive(Debug, Clone)]
struct Probe {
    target: HostId,
    indirect_sent: bool,
    acked: bool,
}

#[derive(Debug, Clone)]
struct Relay {
    target: HostId,
    requester: RealEndpoint,
    expires: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JoinState {
    Pending {
        peer: RealEndpoint,
        attempts: u32,
        next_try: u64,
    },
    Joined,
    /// Join attempts exhausted; running standalone.
    Degraded,
}

#[derive(Debug)]
pub struct Gossip {
    me: MemberRecord,
    cfg: GossipConfig,
    members: BTreeMap<HostId, MemberRecord>,
    probe_order: Vec<HostId>,
    probe_pos: usize,
    probe: Option<Probe>,
    relays: Vec<Relay>,
    member_rumors: BTreeMap<HostId, u32>,
    entry_rumors: BTreeMap<EntryId, u32>,
    join: JoinState,
    dead_cursor: usize,
    pub stats: GossipStats,
}

impl Gossip {
    pub fn new(host: HostId, addr: RealEndpoint, gateway: bool, cfg: GossipConfig) -> Self {
        Gossip {
            me: MemberRecord {
                host,
                addr,
                status: MemberStatus::Alive,
                incarnation: 0,
                last_change: 0,
                gateway,
            },
            cfg,
            members: BTreeMap::new(),
            probe_order: Vec::new(),
            probe_pos: 0,
            probe: None,
            relays: Vec::new(),
            member_rumors: BTreeMap::new(),
            entry_rumors: BTreeMap::new(),
            join: JoinState::Joined,
            dead_cursor: 0,
            stats: GossipStats::default(),
        }
    }

    /// Begin joining through a single known peer.
    pub fn join(&mut self, peer: RealEndpoint, now: u64) {
        self.join = JoinState::Pending {
            peer,
            attempts: 0,
            next_try: now,
        };
    }

    pub fn join_state(&self) -> &JoinState {
        &self.join
    }

    pub fn host(&self) -> HostId {
        self.me.host
    }

    pub fn me(&self) -> &MemberRecord {
        &self.me
    }

    pub fn config(&self) -> &GossipConfig {
        &self.cfg
    }

    pub fn members(&self) -> impl Iterator<Item = &MemberRecord> {
        self.members.values()
    }

    pub fn member(&self, host: &HostId) -> Option<&MemberRecord> {
        self.members.get(host)
    }

    pub fn status_of(&self, host: &HostId) -> Option<MemberStatus> {
        if *host == self.me.host {
            return Some(self.me.status);
        }
        self.members.get(host).map(|m| m.status)
    }

    /// Live members, including this node.
    pub fn alive_count(&self) -> usize {
        1 + self
            .members
            .values()
            .filter(|m| m.status != MemberStatus::Dead)
            .count()
    }

    /// Hosts of live gateway members, this node included when it is one.
    pub fn alive_gateways(&self) -> Vec<HostId> {
        let mut out: Vec<HostId> = self
            .members
            .values()
            .filter(|m| m.gateway && m.status != MemberStatus::Dead)
            .map(|m| m.host)
            .collect();
        if self.me.gateway {
            out.push(self.me.host);
        }
        out.sort();
        out
    }

    pub fn address_of(&self, host: &HostId) -> Option<RealEndpoint> {
        if *host == self.me.host {
            return Some(self.me.addr);
        }
        self.members.get(host).map(|m| m.addr)
    }

    fn retransmit_limit(&self) -> u32 {
        let n = self.alive_count() as f64;
        (self.cfg.retransmit_mult * (n + 1.0).log2()).ceil().max(1.0) as u32
    }

    fn enqueue_member(&mut self, host: HostId) {
        self.member_rumors.insert(host, 0);
    }

    fn record_for(&self, host: &HostId) -> Option<MemberRecord> {
        if *host == self.me.host {
            Some(self.me.clone())
        } else {
            self.members.get(host).cloned()
        }
    }

    fn drain_table(&mut self, table: &mut ServiceTable) {
        for id in table.take_pending() {
            self.entry_rumors.insert(id, 0);
        }
    }

    /// Build a probe-class envelope carrying up to `piggyback_limit` rumors
    /// of each kind, least-transmitted first.
    fn piggyback(&mut self, kind: EnvelopeKind, head: Option<MemberRecord>, table: &ServiceTable) -> GossipEnvelope {
        let limit = self.retransmit_limit();
        let mut budget = SizeBudget::new();
        let mut rumors = Vec::new();
        if let Some(h) = head {
            budget.try_add(member_bytes(&h).len());
            rumors.push(h);
        }

        let mut order: Vec<(u32, HostId)> = self.member_rumors.iter().map(|(h, n)| (*n, *h)).collect();
        order.sort();
        for (_, host) in order.into_iter().take(self.cfg.piggyback_limit) {
            let Some(rec) = self.record_for(&host) else {
                self.member_rumors.remove(&host);
                continue;
            };
            if !budget.try_add(member_bytes(&rec).len()) {
                break;
            }
            rumors.push(rec);
            let n = self.member_rumors.get_mut(&host).unwrap();
            *n += 1;
            if *n >= limit {
                self.member_rumors.remove(&host);
            }
        }

        let mut deltas = Vec::new();
        let mut order: Vec<(u32, EntryId)> = self.entry_rumors.iter().map(|(h, n)| (*n, *h)).collect();
        order.sort();
        for (_, id) in order.into_iter().take(self.cfg.piggyback_limit) {
            let Some(e) = table.get(&id) else {
                self.entry_rumors.remove(&id);
                continue;
            };
            if !budget.try_add(entry_bytes(e).len()) {
                break;
            }
            deltas.push(e.clone());
            let n = self.entry_rumors.get_mut(&id).unwrap();
            *n += 1;
            if *n >= limit {
                self.entry_rumors.remove(&id);
            }
        }

        GossipEnvelope {
            kind,
            sender: self.me.host,
            membership_rumors: rumors,
            table_deltas: deltas,
            sync_digest: None,
        }
    }

    fn full_membership(&self, budget: &mut SizeBudget) -> Vec<MemberRecord> {
        let mut out = Vec::new();
        for rec in std::iter::once(&self.me).chain(self.members.values()) {
            if !budget.try_add(member_bytes(rec).len()) {
                break;
            }
            out.push(rec.clone());
        }
        out
    }

    /// Digest-carrying envelope for anti-entropy.
    pub fn anti_entropy(&self, table: &ServiceTable) -> GossipEnvelope {
        let mut budget = SizeBudget::new();
        let membership_rumors = self.full_membership(&mut budget);
        let digest = table
            .digest()
            .into_iter()
            .take_while(|_| budget.try_add(SizeBudget::digest_item_len()))
            .collect();
        GossipEnvelope {
            kind: EnvelopeKind::Sync,
            sender: self.me.host,
            membership_rumors,
            table_deltas: Vec::new(),
            sync_digest: Some(digest),
        }
    }

    fn sync_reply(
        &self,
        table: &ServiceTable,
        their: &[crate::service_table::DigestItem],
        with_digest: bool,
    ) -> GossipEnvelope {
        let mut budget = SizeBudget::new();
        let membership_rumors = self.full_membership(&mut budget);
        let digest = with_digest.then(|| {
            table
                .digest()
                .into_iter()
                .take_while(|_| budget.try_add(SizeBudget::digest_item_len()))
                .collect()
        });
        let table_deltas = table
            .newer_than(their)
            .into_iter()
            .take_while(|e| budget.try_add(entry_bytes(e).len()))
            .collect();
        GossipEnvelope {
            kind: EnvelopeKind::SyncReply,
            sender: self.me.host,
            membership_rumors,
            table_deltas,
            sync_digest: digest,
        }
    }

    fn next_probe_target<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<HostId> {
        for _ in 0..2 {
            while self.probe_pos < self.probe_order.len() {
                let h = self.probe_order[self.probe_pos];
                self.probe_pos += 1;
                if matches!(self.status_of(&h), Some(MemberStatus::Alive | MemberStatus::Suspect)) {
                    return Some(h);
                }
            }
            self.probe_order = self
                .members
                .values()
                .filter(|m| m.status != MemberStatus::Dead)
                .map(|m| m.host)
                .collect();
            self.probe_order.shuffle(rng);
            self.probe_pos = 0;
        }
        None
    }

    /// Advance one protocol period.
    pub fn tick<R: Rng + ?Sized>(
        &mut self,
        round: u64,
        rng: &mut R,
        table: &mut ServiceTable,
    ) -> Vec<(RealEndpoint, GossipEnvelope)> {
        self.drain_table(table);
        self.relays.retain(|r| r.expires > round);
        let mut out = Vec::new();

        if let JoinState::Pending { peer, attempts, next_try } = self.join.clone() {
            if round >= next_try {
                if attempts >= self.cfg.join_attempts {
                    log::warn!("join via {peer} failed after {attempts} attempts; running standalone");
                    self.join = JoinState::Degraded;
                } else {
                    out.push((peer, self.anti_entropy(table)));
                    self.join = JoinState::Pending {
                        peer,
                        attempts: attempts + 1,
                        next_try: round + (1u64 << attempts),
                    };
                }
            }
        }

        if let Some(p) = self.probe.clone() {
            let target_live = matches!(
                self.status_of(&p.target),
                Some(MemberStatus::Alive | MemberStatus::Suspect)
            );
            if p.acked || !target_live {
                self.probe = None;
            } else if !p.indirect_sent {
                let mut helpers: Vec<HostId> = self
                    .members
                    .values()
                    .filter(|m| m.status == MemberStatus::Alive && m.host != p.target)
                    .map(|m| m.host)
                    .collect();
                helpers.shuffle(rng);
                helpers.truncate(self.cfg.k_indirect);
                let target_rec = self.members[&p.target].clone();
                for h in helpers {
                    let addr = self.members[&h].addr;
                    let env = self.piggyback(EnvelopeKind::PingReq, Some(target_rec.clone()), table);
                    out.push((addr, env));
                }
                self.probe.as_mut().unwrap().indirect_sent = true;
            } else {
                self.suspect(p.target, round);
                self.probe = None;
            }
        }

        if self.probe.is_none() {
            if let Some(target) = self.next_probe_target(rng) {
                let addr = self.members[&target].addr;
                let env = self.piggyback(EnvelopeKind::Ping, None, table);
                out.push((addr, env));
                self.probe = Some(Probe {
                    target,
                    indirect_sent: false,
                    acked: false,
                });
            }
        }

        let period = self.cfg.anti_entropy_period.max(1);
        let phase = self.me.host.prefix() % period;
        if round > 0 && round % period == phase {
            let alive: Vec<&MemberRecord> = self
                .members
                .values()
                .filter(|m| m.status == MemberStatus::Alive)
                .collect();
            if let Some(peer) = alive.choose(rng) {
                out.push((peer.addr, self.anti_entropy(table)));
            }
            // Probing dead members this way is what heals partitions.
            let dead: Vec<RealEndpoint> = self
                .members
                .values()
                .filter(|m| m.status == MemberStatus::Dead)
                .map(|m| m.addr)
                .collect();
            if !dead.is_empty() {
                let addr = dead[self.dead_cursor % dead.len()];
                self.dead_cursor = self.dead_cursor.wrapping_add(1);
                out.push((addr, self.anti_entropy(table)));
            }
        }

        self.stats.sent += out.len() as u64;
        out
    }

    /// Mark a member suspect locally and start spreading the rumor.
    pub fn suspect(&mut self, host: HostId, now: u64) {
        if let Some(m) = self.members.get_mut(&host) {
            if m.status == MemberStatus::Alive {
                m.status = MemberStatus::Suspect;
                m.last_change = now;
                self.enqueue_member(host);
            }
        }
    }

    /// Promote suspects that outlived the timeout to dead.
    pub fn suspect_timeout_sweep(&mut self, now: u64) -> Vec<HostId> {
        let mut dead = Vec::new();
        for m in self.members.values_mut() {
            if m.status == MemberStatus::Suspect && now.saturating_sub(m.last_change) >= self.cfg.suspect_timeout {
                m.status = MemberStatus::Dead;
                m.last_change = now;
                dead.push(m.host);
            }
        }
        for h in &dead {
            self.enqueue_member(*h);
        }
        dead
    }

    /// Re-assert this node as alive at a higher incarnation.
    pub fn refute(&mut self, seen: u64) -> MemberRecord {
        self.me.incarnation = self.me.incarnation.max(seen) + 1;
        self.me.status = MemberStatus::Alive;
        let host = self.me.host;
        self.enqueue_member(host);
        self.me.clone()
    }

    /// Merge one membership record. Returns true if `rec.host` became dead.
    fn merge_member(&mut self, mut rec: MemberRecord, now: u64) -> bool {
        if rec.host == self.me.host {
            let accused = rec.status != MemberStatus::Alive && rec.incarnation >= self.me.incarnation;
            if accused || rec.incarnation > self.me.incarnation {
                self.refute(rec.incarnation);
            }
            return false;
        }
        rec.last_change = now;
        match self.members.get_mut(&rec.host) {
            None => {
                let dead = rec.status == MemberStatus::Dead;
                let host = rec.host;
                self.members.insert(host, rec);
                self.enqueue_member(host);
                dead
            }
            Some(cur) => {
                if !rec.supersedes(cur) {
                    return false;
                }
                let became_dead = rec.status == MemberStatus::Dead && cur.status != MemberStatus::Dead;
                let host = rec.host;
                *cur = rec;
                self.enqueue_member(host);
                became_dead
            }
        }
    }

    /// Decode and process raw bytes; malformed input is counted and dropped.
    pub fn handle_bytes(
        &mut self,
        bytes: &[u8],
        from: RealEndpoint,
        now: u64,
        table: &mut ServiceTable,
    ) -> Result<Handled, DecodeError> {
        match GossipEnvelope::decode(bytes) {
            Ok(env) => Ok(self.handle_envelope(env, from, now, table)),
            Err(e) => {
                self.stats.decode_errors += 1;
                Err(e)
            }
        }
    }

    pub fn handle_envelope(
        &mut self,
        env: GossipEnvelope,
        from: RealEndpoint,
        now: u64,
        table: &mut ServiceTable,
    ) -> Handled {
        self.stats.received += 1;
        let mut out = Handled::default();
        let target = (env.kind == EnvelopeKind::PingReq)
            .then(|| env.membership_rumors.first().cloned())
            .flatten();
        for rec in env.membership_rumors.iter().cloned() {
            let host = rec.host;
            if self.merge_member(rec, now) {
                out.newly_dead.push(host);
            }
        }

        for e in env.table_deltas.iter().cloned() {
            match table.merge_remote(e, now) {
                crate::service_table::MergeOutcome::Stale => {}
                _ => out.applied += 1,
            }
        }
        self.drain_table(table);

        match env.kind {
            EnvelopeKind::Ping => {
                let ack = self.piggyback(EnvelopeKind::Ack, None, table);
                out.replies.push((from, ack));
            }
            EnvelopeKind::PingReq => {
                if let Some(t) = target {
                    if t.host != self.me.host {
                        self.relays.push(Relay {
                            target: t.host,
                            requester: from,
                            expires: now + 2,
                        });
                        let ping = self.piggyback(EnvelopeKind::Ping, None, table);
                        out.replies.push((t.addr, ping));
                    }
                }
            }
            EnvelopeKind::Ack => {
                if let Some(p) = self.probe.as_mut() {
                    if p.target == env.sender {
                        p.acked = true;
                    }
                }
                let mut forwarded = Vec::new();
                self.relays.retain(|r| {
                    if r.target == env.sender {
                        forwarded.push(r.requester);
                        false
                    } else {
                        true
                    }
                });
                for to in forwarded {
                    out.replies.push((to, env.clone()));
                }
            }
            EnvelopeKind::Sync => {
                let digest = env.sync_digest.as_deref().unwrap_or(&[]);
                out.replies.push((from, self.sync_reply(table, digest, true)));
            }
            EnvelopeKind::SyncReply => {
                if matches!(self.join, JoinState::Pending { .. }) {
                    self.join = JoinState::Joined;
                }
                if let Some(d) = env.sync_digest.as_deref() {
                    out.replies.push((from, self.sync_reply(table, d, false)));
                }
            }
        }
        self.stats.sent += out.replies.len() as u64;
        out
    }
}
