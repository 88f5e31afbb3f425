//! Tag policy and client-side endpoint selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hash::{fmix64, Fnv1a};
use crate::model::{AppId, ServiceKey, TagSet};
use crate::service_table::ServiceEntry;

/// Tag key consulted by the policy check.
pub const POLICY_KEY: &str = "grp";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Policy {
    Allow,
    Deny(String),
}

/// A server without a `grp` tag admits every managed client; otherwise the
/// client must share at least one `grp` value with it.
pub fn policy_allows(client: &TagSet, server: &TagSet) -> Policy {
    let Some(need) = server.get(POLICY_KEY) else {
        return Policy::Allow;
    };
    match client.get(POLICY_KEY) {
        Some(have) if have.intersection(need).next().is_some() => Policy::Allow,
        Some(have) => Policy::Deny(format!("client grp {have:?} disjoint from {need:?}")),
        None => Policy::Deny(format!("client has no grp; server requires {need:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    Rendezvous,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub mode: SelectionMode,
    pub seed: u64,
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        SelectionStrategy {
            mode: SelectionMode::Rendezvous,
            seed: 0,
        }
    }
}

/// Rendezvous weight of `candidate` for this client and key.
pub fn rendezvous_score(client: &AppId, key: &ServiceKey, candidate: &ServiceEntry, seed: u64) -> u64 {
    let h = Fnv1a::new()
        .write(&client.to_bytes())
        .write(&key.vip.addr().octets())
        .write(&key.port.to_be_bytes())
        .write(candidate.host.as_bytes())
        .write(&candidate.app_id.to_bytes())
        .write(&seed.to_be_bytes())
        .finish();
    fmix64(h)
}

/// Per-(client, key) round-robin counters.
#[derive(Debug, Default, Clone)]
pub struct RoundRobin {
    counters: BTreeMap<(AppId, ServiceKey), u64>,
}

impl RoundRobin {
    /// Current counter value, advancing it.
    pub fn next(&mut self, client: AppId, key: ServiceKey) -> u64 {
        let c = self.counters.entry((client, key)).or_insert(0);
        let v = *c;
        *c += 1;
        v
    }
}

/// All candidates in the order they should be tried: the chosen one first,
/// then the fallbacks. `candidates` must be in table order.
pub fn selection_order<'a>(
    client: &AppId,
    key: &ServiceKey,
    candidates: &[&'a ServiceEntry],
    strategy: &SelectionStrategy,
    rr: &mut RoundRobin,
) -> Vec<&'a ServiceEntry> {
    let mut out: Vec<&ServiceEntry> = candidates.to_vec();
    if out.is_empty() {
        return out;
    }
    match strategy.mode {
        SelectionMode::Rendezvous => {
            // Ties are broken by entry id so the order is total.
            out.sort_by_cached_key(|c| {
                (
                    std::cmp::Reverse(rendezvous_score(client, key, c, strategy.seed)),
                    c.id(),
                )
            });
        }
        SelectionMode::RoundRobin => {
            let start = (rr.next(*client, *key) % out.len() as u64) as usize;
            out.rotate_left(start);
        }
    }
    out
}

/// The single endpoint a connect would use first.
pub fn select_endpoint<'a>(
    client: &AppId,
    key: &ServiceKey,
    candidates: &[&'a ServiceEntry],
    strategy: &SelectionStrategy,
    rr: &mut RoundRobin,
) -> Option<&'a ServiceEntry> {
    selection_order(client, key, candidates, strategy, rr)
        .first()
        .copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{normalize_tags, HostId};
    use crate::service_table::tests::entry;

    fn tags(s: &[&str]) -> TagSet {
        normalize_tags(s).unwrap()
    }

    #[test]
    fn figure_one_policy() {
        assert_eq!(policy_allows(&tags(&["grp=1"]), &tags(&["grp=1", "grp=2"])), Policy::Allow);
        assert!(matches!(
            policy_allows(&tags(&["grp=1"]), &tags(&["grp=2"])),
            Policy::Deny(_)
        ));
        assert_eq!(policy_allows(&tags(&[]), &tags(&[])), Policy::Allow);
        assert!(matches!(policy_allows(&tags(&[]), &tags(&["grp=2"])), Policy::Deny(_)));
        // Other keys are not policy.
        assert_eq!(policy_allows(&tags(&[]), &tags(&["tier=db"])), Policy::Allow);
    }

    #[test]
    fn single_candidate_and_round_robin() {
        let a = entry("10.1.1.1", 80, 1, 1, 0);
        let b = entry("10.1.1.1", 80, 2, 1, 0);
        let client = AppId::new(&HostId([9; 16]), 1);
        let s = SelectionStrategy {
            mode: SelectionMode::RoundRobin,
            seed: 0,
        };
        let mut rr = RoundRobin::default();
        let key = a.key;
        assert_eq!(select_endpoint(&client, &key, &[&a], &s, &mut rr).unwrap().id(), a.id());
        let mut rr = RoundRobin::default();
        let picks: Vec<_> = (0..4)
            .map(|_| select_endpoint(&client, &key, &[&a, &b], &s, &mut rr).unwrap().host)
            .collect();
        assert_eq!(picks, vec![a.host, b.host, a.host, b.host]);
    }

    #[test]
    fn rendezvous_stable_when_losers_leave() {
        let cands: Vec<_> = (1..=5).map(|h| entry("10.1.1.1", 80, h, 1, 0)).collect();
        let key = cands[0].key;
        let s = SelectionStrategy::default();
        let mut rr = RoundRobin::default();
        for seq in 0..200 {
            let client = AppId::new(&HostId([7; 16]), seq);
            let all: Vec<&ServiceEntry> = cands.iter().collect();
            let winner = select_endpoint(&client, &key, &all, &s, &mut rr).unwrap().id();
            let fewer: Vec<&ServiceEntry> = cands
                .iter()
                .enumerate()
                .filter(|(i, c)| c.id() == winner || i % 2 == 0)
                .map(|(_, c)| c)
                .collect();
            assert_eq!(select_endpoint(&client, &key, &fewer, &s, &mut rr).unwrap().id(), winner);
        }
    }
}
