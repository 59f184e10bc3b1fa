//! Shared domain vocabulary: target URLs, resolvers, observations and the
//! mechanism taxonomy.

use std::collections::BTreeSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Number of body bytes kept on an [`HttpObservation`].
pub const BODY_EXCERPT_LEN: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("malformed url {0:?}: {1}")]
    MalformedUrl(String, &'static str),
    #[error("invalid resolver {0}: {1}")]
    InvalidResolver(String, &'static str),
    #[error("invalid observation: {0}")]
    InvalidObservation(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Http,
    Https,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Http => "http",
            Scheme::Https => "https",
        }
    }
}

/// A normalized test-list entry.
///
/// Equality and hashing consider scheme, host, path and query only; `raw`
/// keeps the text the entry was parsed from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetUrl {
    pub raw: String,
    pub scheme: Scheme,
    pub host: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

impl PartialEq for TargetUrl {
    fn eq(&self, other: &Self) -> bool {
        self.scheme == other.scheme
            && self.host == other.host
            && self.path == other.path
            && self.query == other.query
    }
}

impl Eq for TargetUrl {}

impl Hash for TargetUrl {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.scheme.hash(state);
        self.host.hash(state);
        self.path.hash(state);
        self.query.hash(state);
    }
}

impl TargetUrl {
    /// Builds a target from parts, validating the host.
    pub fn new(
        scheme: Scheme,
        host: &str,
        path: &str,
        query: Option<&str>,
    ) -> Result<Self, ModelError> {
        let mut t = TargetUrl {
            raw: String::new(),
            scheme,
            host: normalize_host(host).ok_or_else(|| {
                ModelError::MalformedUrl(host.to_string(), "invalid host")
            })?,
            path: if path.is_empty() {
                "/".to_string()
            } else if path.starts_with('/') {
                path.to_string()
            } else {
                return Err(ModelError::MalformedUrl(
                    path.to_string(),
                    "path must begin with '/'",
                ));
            },
            query: query.map(str::to_string),
        };
        t.raw = t.render();
        Ok(t)
    }

    /// Canonical text form.
    pub fn render(&self) -> String {
        let mut s = format!("{}://{}{}", self.scheme.as_str(), self.host, self.path);
        if let Some(q) = &self.query {
            s.push('?');
            s.push_str(q);
        }
        s
    }

    /// Path plus query, as sent on an HTTP request line.
    pub fn request_uri(&self) -> String {
        match &self.query {
            Some(q) => format!("{}?{}", self.path, q),
            None => self.path.clone(),
        }
    }

    /// Same target with a different host; `raw` is re-rendered.
    pub fn with_host(&self, host: &str) -> Result<Self, ModelError> {
        TargetUrl::new(self.scheme, host, &self.path, self.query.as_deref())
    }

    /// Root entry (`path = "/"`, no query) for `host`.
    pub fn root(host: &str) -> Result<Self, ModelError> {
        TargetUrl::new(Scheme::Http, host, "/", None)
    }
}

impl fmt::Display for TargetUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for TargetUrl {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_target(s)
    }
}

fn normalize_host(host: &str) -> Option<String> {
    let host = host.strip_suffix('.').unwrap_or(host);
    if host.is_empty() || host.len() > 253 {
        return None;
    }
    let valid = host
        .bytes()
        .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_'));
    if !valid || host.starts_with('.') || host.contains("..") {
        return None;
    }
    Some(host.to_ascii_lowercase())
}

/// Parses one test-list entry. A missing scheme defaults to `http` and a
/// missing path to `/`. Fragments are dropped.
pub fn parse_target(raw: &str) -> Result<TargetUrl, ModelError> {
    let malformed = |why| ModelError::MalformedUrl(raw.to_string(), why);
    let text = raw.trim();
    if text.is_empty() {
        return Err(malformed("empty"));
    }
    let text = match text.find('#') {
        Some(i) => &text[..i],
        None => text,
    };

    let scheme_end = text
        .find("://")
        .filter(|&i| i > 0 && text[..i].bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'+' | b'-' | b'.')));
    let (scheme, rest) = match scheme_end {
        Some(i) => {
            let scheme = match text[..i].to_ascii_lowercase().as_str() {
                "http" => Scheme::Http,
                "https" => Scheme::Https,
                _ => return Err(malformed("unsupported scheme")),
            };
            (scheme, &text[i + 3..])
        }
        None => (Scheme::Http, text),
    };

    let host_end = rest.find(['/', '?']).unwrap_or(rest.len());
    let authority = &rest[..host_end];
    if authority.contains('@') {
        return Err(malformed("userinfo not supported"));
    }
    if authority.contains(':') {
        return Err(malformed("explicit ports not supported"));
    }
    let host = normalize_host(authority).ok_or_else(|| malformed("no host"))?;

    let tail = &rest[host_end..];
    let (path, query) = match tail.find('?') {
        Some(i) => (&tail[..i], Some(tail[i + 1..].to_string())),
        None => (tail, None),
    };
    let path = if path.is_empty() { "/" } else { path };
    if path.chars().any(char::is_whitespace)
        || query.as_deref().is_some_and(|q| q.chars().any(char::is_whitespace))
    {
        return Err(malformed("whitespace in path"));
    }

    Ok(TargetUrl {
        raw: raw.to_string(),
        scheme,
        host,
        path: path.to_string(),
        query,
    })
}

/// RFC 1918 membership. IPv6 addresses are never private here.
pub fn is_private_ip(addr: IpAddr) -> bool {
    match addr {
        IpAddr::V4(v4) => {
            let [a, b, ..] = v4.octets();
            a == 10 || (a == 172 && (16..=31).contains(&b)) || (a == 192 && b == 168)
        }
        IpAddr::V6(_) => false,
    }
}

/// A DNS resolver identity and the address it substitutes for NXDOMAIN, if any.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawResolverSpec")]
pub struct ResolverSpec {
    pub name: String,
    pub address: IpAddr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nxdomain_redirector: Option<IpAddr>,
    /// Where queries are actually sent. Defaults to `address:53`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<SocketAddr>,
}

#[derive(Deserialize)]
struct RawResolverSpec {
    name: String,
    address: IpAddr,
    #[serde(default)]
    nxdomain_redirector: Option<IpAddr>,
    #[serde(default)]
    endpoint: Option<SocketAddr>,
}

impl TryFrom<RawResolverSpec> for ResolverSpec {
    type Error = ModelError;

    fn try_from(r: RawResolverSpec) -> Result<Self, Self::Error> {
        ResolverSpec::new(&r.name, r.address, r.nxdomain_redirector)
            .map(|s| s.with_endpoint(r.endpoint))
    }
}

fn is_unicast(addr: IpAddr) -> bool {
    match addr {
        IpAddr::V4(v4) => !(v4.is_unspecified() || v4.is_multicast() || v4.is_broadcast()),
        IpAddr::V6(v6) => !(v6.is_unspecified() || v6.is_multicast()),
    }
}

impl ResolverSpec {
    pub fn new(
        name: &str,
        address: IpAddr,
        nxdomain_redirector: Option<IpAddr>,
    ) -> Result<Self, ModelError> {
        let invalid = |why| ModelError::InvalidResolver(name.to_string(), why);
        if name.is_empty() {
            return Err(invalid("empty name"));
        }
        if !is_unicast(address) {
            return Err(invalid("address is not unicast"));
        }
        if nxdomain_redirector == Some(address) {
            return Err(invalid("redirector equals resolver address"));
        }
        Ok(ResolverSpec {
            name: name.to_string(),
            address,
            nxdomain_redirector,
            endpoint: None,
        })
    }

    pub fn with_endpoint(mut self, endpoint: Option<SocketAddr>) -> Self {
        self.endpoint = endpoint;
        self
    }

    pub fn query_endpoint(&self) -> SocketAddr {
        self.endpoint.unwrap_or(SocketAddr::new(self.address, 53))
    }

    /// The five public resolvers and their NXDOMAIN redirectors.
    pub fn public_defaults() -> Vec<ResolverSpec> {
        let v4 = |a, b, c, d| IpAddr::V4(Ipv4Addr::new(a, b, c, d));
        [
            ("google", v4(8, 8, 8, 8), None),
            ("comodo", v4(8, 26, 56, 26), Some(v4(92, 242, 144, 50))),
            ("opendns", v4(208, 67, 222, 222), Some(v4(67, 215, 65, 132))),
            ("level3", v4(209, 244, 0, 3), None),
            ("norton", v4(198, 153, 192, 40), Some(v4(198, 153, 192, 3))),
        ]
        .into_iter()
        .map(|(n, a, r)| ResolverSpec::new(n, a, r).expect("static resolver table"))
        .collect()
    }
}

/// SHA-256 of a response body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BodyDigest(pub [u8; 32]);

impl BodyDigest {
    pub fn of(body: &[u8]) -> Self {
        BodyDigest(Sha256::digest(body).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl FromStr for BodyDigest {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out)?;
        Ok(BodyDigest(out))
    }
}

impl fmt::Display for BodyDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for BodyDigest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for BodyDigest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DnsOutcome {
    Answers,
    NxDomain,
    Timeout,
    ServFail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDnsObservation")]
pub struct DnsObservation {
    pub resolver: ResolverSpec,
    pub qname: String,
    pub outcome: DnsOutcome,
    pub answers: Vec<IpAddr>,
    pub rtt_ms: u64,
}

#[derive(Deserialize)]
struct RawDnsObservation {
    resolver: ResolverSpec,
    qname: String,
    outcome: DnsOutcome,
    answers: Vec<IpAddr>,
    rtt_ms: u64,
}

impl TryFrom<RawDnsObservation> for DnsObservation {
    type Error = ModelError;

    fn try_from(r: RawDnsObservation) -> Result<Self, Self::Error> {
        DnsObservation::new(r.resolver, &r.qname, r.outcome, r.answers, r.rtt_ms)
    }
}

impl DnsObservation {
    pub fn new(
        resolver: ResolverSpec,
        qname: &str,
        outcome: DnsOutcome,
        answers: Vec<IpAddr>,
        rtt_ms: u64,
    ) -> Result<Self, ModelError> {
        match (outcome, answers.is_empty()) {
            (DnsOutcome::Answers, true) => {
                return Err(ModelError::InvalidObservation("Answers outcome without answers"))
            }
            (DnsOutcome::Answers, false) | (_, true) => {}
            (_, false) => {
                return Err(ModelError::InvalidObservation(
                    "answers present on a failed lookup",
                ))
            }
        }
        Ok(DnsObservation {
            resolver,
            qname: qname.to_string(),
            outcome,
            answers,
            rtt_ms,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TcpResult {
    Connected,
    Refused,
    TimedOut,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcpObservation {
    pub address: IpAddr,
    pub port: u16,
    pub result: TcpResult,
}

/// One HTTP response as seen by the probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawHttpObservation")]
pub struct HttpObservation {
    pub request_host: String,
    pub request_uri: String,
    pub status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_modified: Option<String>,
    pub body_digest: BodyDigest,
    #[serde(with = "b64")]
    pub body_excerpt: Vec<u8>,
}

#[derive(Deserialize)]
struct RawHttpObservation {
    request_host: String,
    request_uri: String,
    status: u16,
    #[serde(default)]
    location: Option<String>,
    #[serde(default)]
    last_modified: Option<String>,
    body_digest: BodyDigest,
    #[serde(with = "b64")]
    body_excerpt: Vec<u8>,
}

impl TryFrom<RawHttpObservation> for HttpObservation {
    type Error = ModelError;

    fn try_from(r: RawHttpObservation) -> Result<Self, Self::Error> {
        if !(100..=599).contains(&r.status) {
            return Err(ModelError::InvalidObservation("status out of range"));
        }
        if r.location.is_some() && !matches!(r.status, 301 | 302) {
            return Err(ModelError::InvalidObservation(
                "location recorded on a non-redirect",
            ));
        }
        if r.body_excerpt.len() > BODY_EXCERPT_LEN {
            return Err(ModelError::InvalidObservation("body excerpt too long"));
        }
        Ok(HttpObservation {
            request_host: r.request_host,
            request_uri: r.request_uri,
            status: r.status,
            location: r.location,
            last_modified: r.last_modified,
            body_digest: r.body_digest,
            body_excerpt: r.body_excerpt,
        })
    }
}

impl HttpObservation {
    /// Builds an observation from a full response. `location` is kept only
    /// for 301/302.
    pub fn from_response(
        request_host: &str,
        request_uri: &str,
        status: u16,
        location: Option<String>,
        last_modified: Option<String>,
        body: &[u8],
    ) -> Result<Self, ModelError> {
        if !(100..=599).contains(&status) {
            return Err(ModelError::InvalidObservation("status out of range"));
        }
        Ok(HttpObservation {
            request_host: request_host.to_string(),
            request_uri: request_uri.to_string(),
            status,
            location: location.filter(|_| matches!(status, 301 | 302)),
            last_modified,
            body_digest: BodyDigest::of(body),
            body_excerpt: body[..body.len().min(BODY_EXCERPT_LEN)].to_vec(),
        })
    }
}

mod b64 {
    use base64::prelude::*;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&BASE64_STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        BASE64_STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

/// What an uncensored channel saw for a target: its addresses and the
/// digest of the body it served.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    #[serde(default)]
    pub addresses: Vec<IpAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_digest: Option<BodyDigest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mechanism {
    DnsInjection,
    IpBlock,
    UrlKeyword,
    Http302Redirect,
    Http200Injection,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::DnsInjection,
        Mechanism::IpBlock,
        Mechanism::UrlKeyword,
        Mechanism::Http302Redirect,
        Mechanism::Http200Injection,
    ];
}

/// Per-target outcome of classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVerdict")]
pub struct Verdict {
    pub target: TargetUrl,
    pub mechanisms: BTreeSet<Mechanism>,
    pub evidence: Vec<String>,
    pub clean: bool,
    /// HTTP evidence could not be decided either way.
    #[serde(default)]
    pub inconclusive: bool,
}

#[derive(Deserialize)]
struct RawVerdict {
    target: TargetUrl,
    mechanisms: BTreeSet<Mechanism>,
    evidence: Vec<String>,
    clean: bool,
    #[serde(default)]
    inconclusive: bool,
}

impl TryFrom<RawVerdict> for Verdict {
    type Error = ModelError;

    fn try_from(r: RawVerdict) -> Result<Self, Self::Error> {
        if r.clean != r.mechanisms.is_empty() {
            return Err(ModelError::InvalidObservation(
                "clean flag disagrees with mechanism set",
            ));
        }
        Ok(Verdict {
            target: r.target,
            mechanisms: r.mechanisms,
            evidence: r.evidence,
            clean: r.clean,
            inconclusive: r.inconclusive,
        })
    }
}

impl Verdict {
    pub fn new(target: TargetUrl, mechanisms: BTreeSet<Mechanism>, evidence: Vec<String>) -> Self {
        Verdict {
            clean: mechanisms.is_empty(),
            target,
            mechanisms,
            evidence,
            inconclusive: false,
        }
    }
}
