//! Core identity types: hosts, applications, virtual addresses, tags and
//! the operator-supplied application spec.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while parsing or validating identities.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid virtual ip: {0}")]
    InvalidVip(String),
    #[error("invalid tag: {0}")]
    InvalidTag(String),
    #[error("invalid name: {0}")]
    InvalidName(String),
    #[error("invalid port: {0}")]
    InvalidPort(String),
    #[error("unknown flag: {0}")]
    UnknownFlag(String),
    #[error("missing value for {0}")]
    MissingValue(String),
    #[error("invalid identifier: {0}")]
    InvalidId(String),
}

/// Opaque per-run node identifier, rendered as 32 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HostId(pub [u8; 16]);

impl HostId {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill(&mut b);
        HostId(b)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    /// First eight bytes, used to namespace application ids.
    pub fn prefix(&self) -> u64 {
        let mut p = [0u8; 8];
        p.copy_from_slice(&self.0[..8]);
        u64::from_be_bytes(p)
    }
}

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HostId({})", &hex::encode(self.0)[..8])
    }
}

impl FromStr for HostId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v = hex::decode(s).map_err(|_| ModelError::InvalidId(s.to_string()))?;
        let b: [u8; 16] = v
            .try_into()
            .map_err(|_| ModelError::InvalidId(s.to_string()))?;
        Ok(HostId(b))
    }
}

/// Cluster-unique application identifier: the owning host's prefix plus a
/// per-host sequence number.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AppId {
    pub prefix: u64,
    pub seq: u32,
}

impl AppId {
    pub fn new(host: &HostId, seq: u32) -> Self {
        AppId {
            prefix: host.prefix(),
            seq,
        }
    }

    pub fn to_bytes(&self) -> [u8; 12] {
        let mut b = [0u8; 12];
        b[..8].copy_from_slice(&self.prefix.to_be_bytes());
        b[8..].copy_from_slice(&self.seq.to_be_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; 12]) -> Self {
        let mut p = [0u8; 8];
        p.copy_from_slice(&b[..8]);
        let mut s = [0u8; 4];
        s.copy_from_slice(&b[8..]);
        AppId {
            prefix: u64::from_be_bytes(p),
            seq: u32::from_be_bytes(s),
        }
    }
}

impl fmt::Display for AppId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}-{:08x}", self.prefix, self.seq)
    }
}

impl fmt::Debug for AppId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AppId({self})")
    }
}

impl FromStr for AppId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::InvalidId(s.to_string());
        let (p, q) = s.split_once('-').ok_or_else(bad)?;
        if p.len() != 16 || q.len() != 8 {
            return Err(bad());
        }
        Ok(AppId {
            prefix: u64::from_str_radix(p, 16).map_err(|_| bad())?,
            seq: u32::from_str_radix(q, 16).map_err(|_| bad())?,
        })
    }
}

/// Which address pool a virtual ip falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolClass {
    UserVirtual,
    AutoPool,
    LinkLocal,
}

/// 240.0.0.0/8: allocator-owned pool for named applications.
pub const AUTO_POOL_PREFIX: u8 = 240;
/// 169.254.0.0/16: allocator-owned pool for anonymous clients.
pub const LINK_LOCAL_PREFIX: [u8; 2] = [169, 254];

/// Classify an address by prefix match on the two reserved pools.
pub fn classify_vip(addr: VirtualIp) -> PoolClass {
    let o = addr.0.octets();
    if o[0] == AUTO_POOL_PREFIX {
        PoolClass::AutoPool
    } else if o[..2] == LINK_LOCAL_PREFIX {
        PoolClass::LinkLocal
    } else {
        PoolClass::UserVirtual
    }
}

/// A network-independent application identifier in IPv4 format.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VirtualIp(Ipv4Addr);

impl VirtualIp {
    pub fn new(addr: Ipv4Addr) -> Result<Self, ModelError> {
        if addr.is_unspecified() || addr.is_broadcast() {
            return Err(ModelError::InvalidVip(addr.to_string()));
        }
        Ok(VirtualIp(addr))
    }

    pub fn addr(&self) -> Ipv4Addr {
        self.0
    }

    pub fn class(&self) -> PoolClass {
        classify_vip(*self)
    }
}

impl fmt::Display for VirtualIp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for VirtualIp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vip({})", self.0)
    }
}

impl FromStr for VirtualIp {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let a: Ipv4Addr = s.parse().map_err(|_| ModelError::InvalidVip(s.to_string()))?;
        VirtualIp::new(a)
    }
}

/// (virtual ip, service port): the application-level identity of a service.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct ServiceKey {
    pub vip: VirtualIp,
    pub port: u16,
}

impl ServiceKey {
    pub fn new(vip: VirtualIp, port: u16) -> Result<Self, ModelError> {
        if port == 0 {
            return Err(ModelError::InvalidPort("0".into()));
        }
        Ok(ServiceKey { vip, port })
    }

    pub fn from_addr(addr: std::net::SocketAddrV4) -> Result<Self, ModelError> {
        ServiceKey::new(VirtualIp::new(*addr.ip())?, addr.port())
    }
}

impl fmt::Display for ServiceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.vip, self.port)
    }
}

impl FromStr for ServiceKey {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ip, port) = s
            .rsplit_once(':')
            .ok_or_else(|| ModelError::InvalidVip(s.to_string()))?;
        let port: u16 = port
            .parse()
            .map_err(|_| ModelError::InvalidPort(port.to_string()))?;
        ServiceKey::new(ip.parse()?, port)
    }
}

/// Where a service is actually listening on the host network.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct RealEndpoint {
    pub host_ip: Ipv4Addr,
    pub port: u16,
}

impl RealEndpoint {
    pub fn new(host_ip: Ipv4Addr, port: u16) -> Self {
        RealEndpoint { host_ip, port }
    }
}

impl fmt::Display for RealEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host_ip, self.port)
    }
}

impl From<RealEndpoint> for std::net::SocketAddrV4 {
    fn from(r: RealEndpoint) -> Self {
        std::net::SocketAddrV4::new(r.host_ip, r.port)
    }
}

impl From<std::net::SocketAddrV4> for RealEndpoint {
    fn from(a: std::net::SocketAddrV4) -> Self {
        RealEndpoint::new(*a.ip(), a.port())
    }
}

const MAX_TAG_KEY: usize = 64;
const MAX_TAG_VALUE: usize = 256;

/// Key/value attributes attached to an application. Each key maps to a
/// non-empty set of values.
#[derive(Clone, Default, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct TagSet(BTreeMap<String, BTreeSet<String>>);

impl TagSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        validate_tag(key, value)?;
        self.0
            .entry(key.to_string())
            .or_default()
            .insert(value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&BTreeSet<String>> {
        self.0.get(key)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.0.iter()
    }

    /// Flattened `key=value` pairs in canonical order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0
            .iter()
            .flat_map(|(k, vs)| vs.iter().map(move |v| (k.as_str(), v.as_str())))
    }

    pub fn union(&self, other: &TagSet) -> TagSet {
        let mut out = self.clone();
        for (k, vs) in other.iter() {
            out.0.entry(k.clone()).or_default().extend(vs.iter().cloned());
        }
        out
    }
}

impl fmt::Display for TagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("-");
        }
        let mut first = true;
        for (k, v) in self.pairs() {
            if !first {
                f.write_str(",")?;
            }
            first = false;
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

fn validate_tag(key: &str, value: &str) -> Result<(), ModelError> {
    let bad = || ModelError::InvalidTag(format!("{key}={value}"));
    if key.is_empty()
        || key.len() > MAX_TAG_KEY
        || key.contains('=')
        || key.chars().any(char::is_whitespace)
    {
        return Err(bad());
    }
    if value.is_empty() || value.len() > MAX_TAG_VALUE {
        return Err(bad());
    }
    Ok(())
}

/// Merge `key=value` strings into a tag set. Repeated keys accumulate values.
pub fn normalize_tags<S: AsRef<str>>(pairs: &[S]) -> Result<TagSet, ModelError> {
    let mut tags = TagSet::new();
    for p in pairs {
        let p = p.as_ref();
        let mut it = p.splitn(3, '=');
        let (Some(k), Some(v), None) = (it.next(), it.next(), it.next()) else {
            return Err(ModelError::InvalidTag(p.to_string()));
        };
        tags.insert(k, v)?;
    }
    Ok(tags)
}

/// Validate and lowercase a DNS-style name.
pub fn validate_name(name: &str) -> Result<String, ModelError> {
    let bad = || ModelError::InvalidName(name.to_string());
    let n = name.strip_suffix('.').unwrap_or(name).to_ascii_lowercase();
    if n.is_empty() || n.len() > 253 {
        return Err(bad());
    }
    for label in n.split('.') {
        if label.is_empty()
            || label.len() > 63
            || label.starts_with('-')
            || label.ends_with('-')
            || !label
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'-')
        {
            return Err(bad());
        }
    }
    Ok(n)
}

/// External exposure request for an application's services.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum ExposeRequest {
    Auto,
    Port(u16),
}

/// Operator-supplied identity for an application.
#[derive(Clone, Default, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AppSpec {
    pub name: Option<String>,
    pub vip: Option<VirtualIp>,
    pub tags: TagSet,
    pub expose: Option<ExposeRequest>,
}

/// Parse a user-assigned vip. The reserved pools belong to the allocator and
/// loopback is kept for intra-application addressing.
pub fn parse_user_vip(s: &str) -> Result<VirtualIp, ModelError> {
    let vip: VirtualIp = s.parse()?;
    if vip.class() != PoolClass::UserVirtual || vip.addr().is_loopback() {
        return Err(ModelError::InvalidVip(s.to_string()));
    }
    Ok(vip)
}

/// Parse the `--name/--ip/--tag/--expose` argument grammar.
pub fn parse_app_spec<S: AsRef<str>>(args: &[S]) -> Result<AppSpec, ModelError> {
    let mut spec = AppSpec::default();
    let mut tags: Vec<String> = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let raw = args[i].as_ref();
        let (flag, inline) = match raw.split_once('=') {
            Some((f, v)) if f.starts_with("--") => (f, Some(v.to_string())),
            _ => (raw, None),
        };
        i += 1;
        let value = |i: &mut usize| -> Result<String, ModelError> {
            if let Some(v) = inline.clone() {
                return Ok(v);
            }
            let v = args
                .get(*i)
                .ok_or_else(|| ModelError::MissingValue(flag.to_string()))?;
            *i += 1;
            Ok(v.as_ref().to_string())
        };
        match flag {
            "--name" => spec.name = Some(validate_name(&value(&mut i)?)?),
            "--ip" => spec.vip = Some(parse_user_vip(&value(&mut i)?)?),
            "--tag" => tags.push(value(&mut i)?),
            "--expose" => {
                let next = inline
                    .clone()
                    .or_else(|| args.get(i).map(|a| a.as_ref().to_string()));
                spec.expose = match next {
                    Some(v) if !v.starts_with("--") => {
                        let port: u16 = v.parse().map_err(|_| ModelError::InvalidPort(v.clone()))?;
                        if port == 0 {
                            return Err(ModelError::InvalidPort(v));
                        }
                        if inline.is_none() {
                            i += 1;
                        }
                        Some(ExposeRequest::Port(port))
                    }
                    _ => Some(ExposeRequest::Auto),
                };
            }
            other => return Err(ModelError::UnknownFlag(other.to_string())),
        }
    }
    spec.tags = normalize_tags(&tags)?;
    Ok(spec)
}

/// Canonical argument rendering; `parse_app_spec` inverts it.
pub fn render_app_spec(spec: &AppSpec) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(n) = &spec.name {
        out.push("--name".into());
        out.push(n.clone());
    }
    if let Some(v) = spec.vip {
        out.push("--ip".into());
        out.push(v.to_string());
    }
    for (k, v) in spec.tags.pairs() {
        out.push("--tag".into());
        out.push(format!("{k}={v}"));
    }
    match spec.expose {
        Some(ExposeRequest::Auto) => out.push("--expose".into()),
        Some(ExposeRequest::Port(p)) => {
            out.push("--expose".into());
            out.push(p.to_string());
        }
        None => {}
    }
    out
}

/// A registered application with its resolved virtual ip.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AppIdentity {
    pub app_id: AppId,
    pub host: HostId,
    pub spec: AppSpec,
    pub effective_vip: VirtualIp,
}

impl AppIdentity {
    /// Anonymous applications have neither a name nor a user vip and may not
    /// act as servers.
    pub fn is_anonymous(&self) -> bool {
        self.spec.name.is_none() && self.spec.vip.is_none()
    }
}
