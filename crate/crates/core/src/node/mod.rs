//! One node: service table, gossip, trap handler, name allocation and the
//! optional gateway role, driven by ticks and inbound messages.

pub mod control;
pub mod daemon;

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fabric::Fabric;
use crate::gateway::GatewayState;
use crate::gossip::{Gossip, GossipConfig, GossipEnvelope};
use crate::model::{AppId, AppIdentity, AppSpec, HostId, ModelError, RealEndpoint, VirtualIp};
use crate::names::{allocate_internal_ip, allocate_link_local, AllocError};
use crate::service_table::{NameError, ServiceTable, DEFAULT_TOMB_TTL};
use crate::switch::select::SelectionStrategy;
use crate::switch::Switch;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Spec(#[from] ModelError),
    #[error("name {0} already maps to {1}")]
    AmbiguousName(String, VirtualIp),
    #[error(transparent)]
    Name(#[from] NameError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("unknown application {0}")]
    UnknownApp(AppId),
    #[error("bind failed: {0}")]
    BindFailed(std::io::Error),
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    /// Gossip listener.
    pub bind: RealEndpoint,
    pub join: Option<RealEndpoint>,
    pub gateway: bool,
    pub strategy: SelectionStrategy,
    pub run_dir: Option<PathBuf>,
    pub gossip: GossipConfig,
    pub tomb_ttl: u64,
}

impl NodeConfig {
    pub fn new(bind: RealEndpoint) -> Self {
        NodeConfig {
            bind,
            join: None,
            gateway: false,
            strategy: SelectionStrategy::default(),
            run_dir: None,
            gossip: GossipConfig::default(),
            tomb_ttl: DEFAULT_TOMB_TTL,
        }
    }
}

pub struct Node<F: Fabric> {
    cfg: NodeConfig,
    host: HostId,
    pub table: ServiceTable,
    pub gossip: Gossip,
    pub switch: Switch<F>,
    pub fabric: F,
    pub gateway: GatewayState<F>,
    rng: ChaCha8Rng,
    round: u64,
    next_seq: u32,
}

type Outbox = Vec<(RealEndpoint, GossipEnvelope)>;

impl<F: Fabric> Node<F> {
    /// Start a node. The node id and all protocol randomness come from `seed`.
    pub fn start(cfg: NodeConfig, fabric: F, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let host = HostId::random(&mut rng);
        let mut gossip = Gossip::new(host, cfg.bind, cfg.gateway, cfg.gossip.clone());
        if let Some(peer) = cfg.join {
            gossip.join(peer, 0);
        }
        Node {
            table: ServiceTable::with_tomb_ttl(host, cfg.tomb_ttl),
            gossip,
            switch: Switch::new(host, cfg.strategy),
            fabric,
            gateway: GatewayState::default(),
            rng,
            round: 0,
            next_seq: 1,
            host,
            cfg,
        }
    }

    pub fn host(&self) -> HostId {
        self.host
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    /// Current protocol period.
    pub fn now(&self) -> u64 {
        self.round
    }

    /// One protocol period: failure detection, table upkeep, gateway
    /// reconciliation, then gossip.
    pub fn tick(&mut self) -> Outbox {
        let now = self.round;
        for h in self.gossip.suspect_timeout_sweep(now) {
            let n = self.table.tombstone_host(h, now);
            log::info!("{h} declared dead; {n} entries tombstoned");
        }
        self.table.gc_tombstones(now);
        self.reconcile_gateway();
        self.poll_gateway();
        let out = self.gossip.tick(now, &mut self.rng, &mut self.table);
        self.round += 1;
        out
    }

    fn reconcile_gateway(&mut self) {
        let gws = self.gossip.alive_gateways();
        self.gateway
            .reconcile(self.host, &gws, &mut self.table, &mut self.fabric, self.round);
    }

    /// Service external connections and proxy accounting.
    pub fn poll_gateway(&mut self) {
        self.gateway
            .poll(&mut self.switch, &self.table, &mut self.fabric);
    }

    pub fn on_gossip(&mut self, env: GossipEnvelope, from: RealEndpoint) -> Outbox {
        let now = self.round;
        let handled = self.gossip.handle_envelope(env, from, now, &mut self.table);
        for h in handled.newly_dead {
            self.table.tombstone_host(h, now);
        }
        handled.replies
    }

    pub fn on_gossip_bytes(&mut self, bytes: &[u8], from: RealEndpoint) -> Outbox {
        match GossipEnvelope::decode(bytes) {
            Ok(env) => self.on_gossip(env, from),
            Err(e) => {
                self.gossip.stats.decode_errors += 1;
                log::debug!("dropping gossip from {from}: {e}");
                Vec::new()
            }
        }
    }

    fn resolve_vip(&self, spec: &AppSpec, app: &AppId) -> Result<VirtualIp, NodeError> {
        match (&spec.name, spec.vip) {
            (Some(name), Some(vip)) => match self.table.lookup_name(name) {
                Ok(v) if v != vip => Err(NodeError::AmbiguousName(name.clone(), v)),
                Ok(_) | Err(NameError::NotFound) => Ok(vip),
                Err(e) => Err(e.into()),
            },
            (Some(name), None) => match self.table.lookup_name(name) {
                Ok(v) => Ok(v),
                Err(NameError::NotFound) => {
                    Ok(allocate_internal_ip(name, &self.table.names_by_vip())?)
                }
                Err(e) => Err(e.into()),
            },
            (None, Some(vip)) => Ok(vip),
            (None, None) => {
                let taken: BTreeSet<VirtualIp> = self.switch.link_local_in_use();
                Ok(allocate_link_local(app, &taken)?)
            }
        }
    }

    /// Register an application and resolve its effective vip.
    pub fn add_app(&mut self, spec: AppSpec) -> Result<AppIdentity, NodeError> {
        let app_id = AppId::new(&self.host, self.next_seq);
        let effective_vip = self.resolve_vip(&spec, &app_id)?;
        self.next_seq += 1;
        let ident = AppIdentity {
            app_id,
            host: self.host,
            spec,
            effective_vip,
        };
        self.switch.attach(ident.clone());
        log::info!("added {app_id} as {effective_vip}");
        Ok(ident)
    }

    /// Detach an application and tombstone everything it advertised.
    pub fn remove_app(&mut self, app: AppId) -> Result<usize, NodeError> {
        if !self.switch.detach(&app) {
            return Err(NodeError::UnknownApp(app));
        }
        Ok(self.table.tombstone_app(app, self.round))
    }

    /// One trap exchange on behalf of `app`.
    pub fn trap(&mut self, app: AppId, request: &[u8]) -> (Vec<u8>, Option<F::Stream>) {
        let now = self.round;
        self.switch
            .handle_bytes(app, request, now, &mut self.table, &mut self.fabric)
    }

    pub fn dump(&self) -> String {
        self.table.dump()
    }
}
