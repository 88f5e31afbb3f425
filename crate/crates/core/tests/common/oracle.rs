//! Independent recomputation of the rendezvous weight: 64-bit FNV-1a from
//! the `fnv` crate over client app id (12 bytes), vip octets, service port
//! (BE), candidate host id (16 bytes), candidate app id (12 bytes) and seed
//! (BE), passed through the murmur3 64-bit finalizer.

use std::hash::Hasher;

use appnet::model::{AppId, ServiceKey};
use appnet::service_table::ServiceEntry;

fn finalize(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51afd7ed558ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ceb9fe1a85ec53);
    k ^ (k >> 33)
}

pub fn score(client: &AppId, key: &ServiceKey, c: &ServiceEntry, seed: u64) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(&client.prefix.to_be_bytes());
    h.write(&client.seq.to_be_bytes());
    h.write(&key.vip.addr().octets());
    h.write(&key.port.to_be_bytes());
    h.write(&c.host.0);
    h.write(&c.app_id.prefix.to_be_bytes());
    h.write(&c.app_id.seq.to_be_bytes());
    h.write(&seed.to_be_bytes());
    finalize(h.finish())
}

/// Index of the highest-weight candidate; ties go to the smaller entry id.
pub fn winner(client: &AppId, key: &ServiceKey, cands: &[&ServiceEntry], seed: u64) -> usize {
    (0..cands.len())
        .max_by(|&i, &j| {
            score(client, key, cands[i], seed)
                .cmp(&score(client, key, cands[j], seed))
                .then(cands[j].id().cmp(&cands[i].id()))
        })
        .expect("at least one candidate")
}
