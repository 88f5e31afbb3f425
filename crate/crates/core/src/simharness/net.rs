//! Gossip transport for the simulator: per-message loss and latency drawn
//! from the run seed, with partitions and crashes taken from the shared
//! [`SimWorld`](crate::fabric::sim::SimWorld).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::gossip::EnvelopeKind;
use crate::model::RealEndpoint;

#[derive(Debug, Clone, PartialEq)]
pub struct NetProfile {
    /// Probability that a probe-class envelope is dropped.
    pub loss: f64,
    /// Delivery delay in ticks, inclusive bounds.
    pub latency: (u64, u64),
}

impl Default for NetProfile {
    fn default() -> Self {
        NetProfile {
            loss: 0.0,
            latency: (0, 0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InFlight {
    pub seq: u64,
    pub from: RealEndpoint,
    pub to: RealEndpoint,
    pub kind: EnvelopeKind,
    pub bytes: Vec<u8>,
}

/// What happened to a message handed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fate {
    Queued { at: u64 },
    Lost,
}

/// Sync exchanges ride on streams and so are not subject to loss.
pub fn is_reliable(kind: EnvelopeKind) -> bool {
    matches!(kind, EnvelopeKind::Sync | EnvelopeKind::SyncReply)
}

pub struct Net {
    pub profile: NetProfile,
    rng: ChaCha8Rng,
    queue: BTreeMap<(u64, u64), InFlight>,
    seq: u64,
    pub sent: u64,
    pub lost: u64,
}

impl Net {
    pub fn new(profile: NetProfile, rng: ChaCha8Rng) -> Self {
        Net {
            profile,
            rng,
            queue: BTreeMap::new(),
            seq: 0,
            sent: 0,
            lost: 0,
        }
    }

    pub fn send(&mut self, now: u64, from: RealEndpoint, to: RealEndpoint, kind: EnvelopeKind, bytes: Vec<u8>) -> (u64, Fate) {
        let seq = self.seq;
        self.seq += 1;
        self.sent += 1;
        // Always draw both numbers so one message's fate does not shift the
        // stream for the next.
        let roll: f64 = self.rng.gen();
        let (lo, hi) = self.profile.latency;
        let delay = self.rng.gen_range(lo..=hi.max(lo));
        if !is_reliable(kind) && roll < self.profile.loss {
            self.lost += 1;
            return (seq, Fate::Lost);
        }
        let at = now + delay;
        self.queue.insert(
            (at, seq),
            InFlight {
                seq,
                from,
                to,
                kind,
                bytes,
            },
        );
        (seq, Fate::Queued { at })
    }

    /// Next message due at or before `now`, in send order.
    pub fn pop_due(&mut self, now: u64) -> Option<InFlight> {
        let (&k, _) = self.queue.iter().next()?;
        if k.0 > now {
            return None;
        }
        self.queue.remove(&k)
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::net::Ipv4Addr;

    fn ep(n: u8) -> RealEndpoint {
        RealEndpoint::new(Ipv4Addr::new(192, 168, 0, n), 7946)
    }

    #[test]
    fn sync_is_never_lost() {
        let profile = NetProfile {
            loss: 1.0,
            latency: (0, 0),
        };
        let mut net = Net::new(profile, ChaCha8Rng::seed_from_u64(1));
        assert_eq!(net.send(0, ep(1), ep(2), EnvelopeKind::Ping, vec![]).1, Fate::Lost);
        assert!(matches!(net.send(0, ep(1), ep(2), EnvelopeKind::Sync, vec![]).1, Fate::Queued { .. }));
    }

    #[test]
    fn delivery_respects_latency_and_order() {
        let profile = NetProfile {
            loss: 0.0,
            latency: (2, 2),
        };
        let mut net = Net::new(profile, ChaCha8Rng::seed_from_u64(1));
        net.send(0, ep(1), ep(2), EnvelopeKind::Ping, vec![1]);
        net.send(0, ep(1), ep(2), EnvelopeKind::Ping, vec![2]);
        assert!(net.pop_due(1).is_none());
        assert_eq!(net.pop_due(2).unwrap().bytes, vec![1]);
        assert_eq!(net.pop_due(2).unwrap().bytes, vec![2]);
    }

    #[test]
    fn loss_rate_tracks_profile() {
        let profile = NetProfile {
            loss: 0.1,
            latency: (0, 0),
        };
        let mut net = Net::new(profile, ChaCha8Rng::seed_from_u64(9));
        for _ in 0..10_000 {
            net.send(0, ep(1), ep(2), EnvelopeKind::Ack, vec![]);
        }
        assert!((800..1200).contains(&net.lost), "lost {}", net.lost);
    }
}
