//! The replicated registry mapping service keys to real endpoints.
//!
//! Every node holds a full copy. Entries are owned by the node that inserted
//! them; replicas reconcile per entry with last-writer-wins on
//! `(incarnation, state)`, where a tombstone beats a live entry at the same
//! incarnation. Tombstones are kept for `tomb_ttl` ticks so that late rumors
//! cannot resurrect a removed entry.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AppId, ExposeRequest, HostId, RealEndpoint, ServiceKey, TagSet, VirtualIp};

/// Default tombstone retention, in protocol periods.
pub const DEFAULT_TOMB_TTL: u64 = 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("application {0} already holds {1}")]
    DuplicateAppBinding(AppId, ServiceKey),
    #[error("entry not owned by this node")]
    NotLocal,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NameError {
    #[error("name not found")]
    NotFound,
    #[error("name {0} maps to several vips: {1:?}")]
    AmbiguousName(String, Vec<VirtualIp>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntryState {
    Alive,
    Tombstone,
}

impl EntryState {
    fn rank(self) -> u8 {
        match self {
            EntryState::Alive => 0,
            EntryState::Tombstone => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transport {
    Stream,
    Datagram,
}

/// What an entry advertises: an application's service, or a gateway's
/// external binding for that service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryRole {
    Service,
    Gateway,
}

/// Identity of an entry across the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntryId {
    pub key: ServiceKey,
    pub host: HostId,
    pub app_id: AppId,
}

/// Version used for merge ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Version {
    pub incarnation: u64,
    pub state: EntryState,
}

impl Version {
    fn order_key(self) -> (u64, u8) {
        (self.incarnation, self.state.rank())
    }

    pub fn beats(self, other: Version) -> bool {
        self.order_key() > other.order_key()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub key: ServiceKey,
    pub real: RealEndpoint,
    pub host: HostId,
    pub app_id: AppId,
    pub tags: TagSet,
    pub name: Option<String>,
    pub incarnation: u64,
    pub state: EntryState,
    /// Local logical time of the last applied change; never transmitted.
    pub stamp: u64,
    pub transport: Transport,
    pub role: EntryRole,
    pub expose: Option<ExposeRequest>,
}

impl ServiceEntry {
    pub fn id(&self) -> EntryId {
        EntryId {
            key: self.key,
            host: self.host,
            app_id: self.app_id,
        }
    }

    pub fn version(&self) -> Version {
        Version {
            incarnation: self.incarnation,
            state: self.state,
        }
    }

    pub fn is_alive(&self) -> bool {
        self.state == EntryState::Alive
    }

    /// Equality ignoring the node-local stamp.
    pub fn same_replica(&self, other: &ServiceEntry) -> bool {
        let mut a = self.clone();
        a.stamp = other.stamp;
        a == *other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOutcome {
    Applied,
    Stale,
    /// A remote tombstone for one of our own live entries; we re-asserted it
    /// at a higher incarnation.
    Refuted,
}

/// One digest item: entry identity plus the version held.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DigestItem {
    pub id: EntryId,
    pub version: Version,
}

#[derive(Debug, Clone)]
pub struct ServiceTable {
    local: HostId,
    entries: BTreeMap<EntryId, ServiceEntry>,
    pending: BTreeSet<EntryId>,
    tomb_ttl: u64,
}

impl ServiceTable {
    pub fn new(local: HostId) -> Self {
        Self::with_tomb_ttl(local, DEFAULT_TOMB_TTL)
    }

    pub fn with_tomb_ttl(local: HostId, tomb_ttl: u64) -> Self {
        ServiceTable {
            local,
            entries: BTreeMap::new(),
            pending: BTreeSet::new(),
            tomb_ttl,
        }
    }

    pub fn local_host(&self) -> HostId {
        self.local
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &EntryId) -> Option<&ServiceEntry> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ServiceEntry> {
        self.entries.values()
    }

    /// Register an entry owned by this node.
    pub fn insert_local(&mut self, mut entry: ServiceEntry) -> Result<MergeOutcome, TableError> {
        if entry.host != self.local {
            return Err(TableError::NotLocal);
        }
        let id = entry.id();
        entry.state = EntryState::Alive;
        if let Some(resident) = self.entries.get(&id) {
            if resident.is_alive() {
                return Err(TableError::DuplicateAppBinding(entry.app_id, entry.key));
            }
            entry.incarnation = entry.incarnation.max(resident.incarnation + 1);
        }
        self.entries.insert(id, entry);
        self.pending.insert(id);
        Ok(MergeOutcome::Applied)
    }

    /// All live service instances for `key`, in entry-id order.
    pub fn lookup(&self, key: &ServiceKey) -> Vec<&ServiceEntry> {
        self.range_key(key)
            .filter(|e| e.is_alive() && e.role == EntryRole::Service)
            .collect()
    }

    /// Live gateway bindings for `key`.
    pub fn gateway_bindings(&self, key: &ServiceKey) -> Vec<&ServiceEntry> {
        self.range_key(key)
            .filter(|e| e.is_alive() && e.role == EntryRole::Gateway)
            .collect()
    }

    fn range_key<'a>(&'a self, key: &ServiceKey) -> impl Iterator<Item = &'a ServiceEntry> + 'a {
        let lo = EntryId {
            key: *key,
            host: HostId([0; 16]),
            app_id: AppId { prefix: 0, seq: 0 },
        };
        let hi = EntryId {
            key: *key,
            host: HostId([0xff; 16]),
            app_id: AppId {
                prefix: u64::MAX,
                seq: u32::MAX,
            },
        };
        self.entries.range(lo..=hi).map(|(_, e)| e)
    }

    /// Reconcile an entry received from a peer.
    pub fn merge_remote(&mut self, mut entry: ServiceEntry, now: u64) -> MergeOutcome {
        let id = entry.id();
        entry.stamp = now;
        match self.entries.get_mut(&id) {
            None => {
                self.entries.insert(id, entry);
                self.pending.insert(id);
                MergeOutcome::Applied
            }
            Some(resident) => {
                if !entry.version().beats(resident.version()) {
                    return MergeOutcome::Stale;
                }
                if id.host == self.local
                    && resident.is_alive()
                    && entry.state == EntryState::Tombstone
                {
                    resident.incarnation = entry.incarnation + 1;
                    resident.stamp = now;
                    self.pending.insert(id);
                    return MergeOutcome::Refuted;
                }
                *resident = entry;
                self.pending.insert(id);
                MergeOutcome::Applied
            }
        }
    }

    fn tombstone_where<F: Fn(&ServiceEntry) -> bool>(&mut self, at: u64, pred: F) -> usize {
        let mut n = 0;
        for (id, e) in self.entries.iter_mut() {
            if e.is_alive() && pred(e) {
                e.state = EntryState::Tombstone;
                e.incarnation += 1;
                e.stamp = at;
                self.pending.insert(*id);
                n += 1;
            }
        }
        n
    }

    /// Tombstone every live entry owned by `host`.
    pub fn tombstone_host(&mut self, host: HostId, at: u64) -> usize {
        self.tombstone_where(at, |e| e.host == host)
    }

    /// Tombstone every live entry registered by `app`.
    pub fn tombstone_app(&mut self, app: AppId, at: u64) -> usize {
        let local = self.local;
        self.tombstone_where(at, |e| e.app_id == app && e.host == local)
    }

    pub fn tombstone_entry(&mut self, id: &EntryId, at: u64) -> bool {
        let id = *id;
        self.tombstone_where(at, |e| e.id() == id) == 1
    }

    /// Drop tombstones older than the retention window. Live entries are never
    /// touched.
    pub fn gc_tombstones(&mut self, now: u64) -> usize {
        let ttl = self.tomb_ttl;
        let before = self.entries.len();
        self.entries
            .retain(|_, e| e.is_alive() || now.saturating_sub(e.stamp) <= ttl);
        before - self.entries.len()
    }

    /// The vip shared by all live holders of `name`.
    pub fn lookup_name(&self, name: &str) -> Result<VirtualIp, NameError> {
        let vips: BTreeSet<VirtualIp> = self
            .entries
            .values()
            .filter(|e| e.is_alive() && e.role == EntryRole::Service)
            .filter(|e| e.name.as_deref() == Some(name))
            .map(|e| e.key.vip)
            .collect();
        match vips.len() {
            0 => Err(NameError::NotFound),
            1 => Ok(*vips.iter().next().unwrap()),
            _ => Err(NameError::AmbiguousName(
                name.to_string(),
                vips.into_iter().collect(),
            )),
        }
    }

    /// Names currently bound to each vip, used by the allocator to avoid
    /// handing out a vip that already belongs to another name.
    pub fn names_by_vip(&self) -> BTreeMap<VirtualIp, BTreeSet<String>> {
        let mut out: BTreeMap<VirtualIp, BTreeSet<String>> = BTreeMap::new();
        for e in self.entries.values().filter(|e| e.is_alive()) {
            if let Some(n) = &e.name {
                out.entry(e.key.vip).or_default().insert(n.clone());
            }
        }
        out
    }

    pub fn digest(&self) -> Vec<DigestItem> {
        self.entries
            .iter()
            .map(|(id, e)| DigestItem {
                id: *id,
                version: e.version(),
            })
            .collect()
    }

    /// Entries we hold that are newer than the copy in `digest`, or absent
    /// from it. Tombstones the peer has no copy of are left out: it has
    /// nothing to delete, and it may have collected that tombstone already.
    pub fn newer_than(&self, digest: &[DigestItem]) -> Vec<ServiceEntry> {
        let theirs: BTreeMap<EntryId, Version> =
            digest.iter().map(|d| (d.id, d.version)).collect();
        self.entries
            .iter()
            .filter(|(id, e)| match theirs.get(id) {
                None => e.is_alive(),
                Some(v) => e.version().beats(*v),
            })
            .map(|(_, e)| e.clone())
            .collect()
    }

    /// Changed entry ids awaiting dissemination.
    pub fn take_pending(&mut self) -> Vec<EntryId> {
        std::mem::take(&mut self.pending).into_iter().collect()
    }

    /// Tab-separated dump, one entry per line:
    /// `vip:port real_ip:port host state incarnation name tags`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in self.entries.values() {
            let state = match e.state {
                EntryState::Alive => "alive",
                EntryState::Tombstone => "tombstone",
            };
            let name = match (e.role, &e.name) {
                (EntryRole::Gateway, _) => "@gateway",
                (EntryRole::Service, Some(n)) => n.as_str(),
                (EntryRole::Service, None) => "-",
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.key, e.real, e.host, state, e.incarnation, name, e.tags
            );
        }
        out
    }
}
