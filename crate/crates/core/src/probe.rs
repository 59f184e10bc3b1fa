//! Per-target measurement: DNS against every configured resolver, TCP
//! reachability, URL-keyword check through a portal, and one HTTP fetch.
//!
//! Observations are never thrown away. Transient failures go to the
//! result's error log; any result with a non-empty error log is left out
//! of aggregation.

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::time::timeout;

use crate::dataset::{CleanPath, FetchOutcome};
use crate::dns::{Message, Rcode};
use crate::http::{self, FetchError, HttpResponse};
use crate::model::{
    parse_target, BodyDigest, DnsObservation, DnsOutcome, HttpObservation, Reference,
    ResolverSpec, TargetUrl, TcpObservation, TcpResult,
};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timeouts {
    pub dns: u64,
    pub tcp: u64,
    pub http: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts { dns: 5000, tcp: 5000, http: 10000 }
    }
}

impl Timeouts {
    pub fn dns(&self) -> Duration {
        Duration::from_millis(self.dns)
    }
    pub fn tcp(&self) -> Duration {
        Duration::from_millis(self.tcp)
    }
    pub fn http(&self) -> Duration {
        Duration::from_millis(self.http)
    }
}

/// An uncensored channel: a resolver reachable without interference and,
/// optionally, a fixed address that all clean HTTP fetches connect to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanPathConfig {
    pub resolver: SocketAddr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connect: Option<SocketAddr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub resolvers: Vec<ResolverSpec>,
    #[serde(with = "target_text")]
    pub keyword_portal: TargetUrl,
    pub timeouts: Timeouts,
    pub retries: u32,
    pub workers: usize,
    /// Port for the TCP and HTTP steps.
    pub port: u16,
    /// Known-good addresses, used when DNS yields nothing genuine.
    pub host_overrides: BTreeMap<String, Vec<IpAddr>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean_path: Option<CleanPathConfig>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let mut resolvers = Vec::new();
        if let Some(local) = system_resolver() {
            resolvers.push(local);
        }
        resolvers.extend(ResolverSpec::public_defaults());
        ProbeConfig {
            resolvers,
            keyword_portal: parse_target("http://www.google.com").expect("static url"),
            timeouts: Timeouts::default(),
            retries: 2,
            workers: 8,
            port: 80,
            host_overrides: BTreeMap::new(),
            clean_path: None,
        }
    }
}

mod target_text {
    use super::*;

    pub fn serialize<S: serde::Serializer>(t: &TargetUrl, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.render())
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TargetUrl, D::Error> {
        let s = String::deserialize(d)?;
        parse_target(&s).map_err(serde::de::Error::custom)
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.resolvers.is_empty() {
            return Err(ProbeError::InvalidConfig("resolvers must be non-empty".into()));
        }
        let t = self.timeouts;
        if t.dns == 0 || t.tcp == 0 || t.http == 0 {
            return Err(ProbeError::InvalidConfig("timeouts must be positive".into()));
        }
        if self.workers == 0 {
            return Err(ProbeError::InvalidConfig("workers must be at least 1".into()));
        }
        if self.port == 0 {
            return Err(ProbeError::InvalidConfig("port must be in 1..=65535".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ProbeError> {
        let cfg: ProbeConfig =
            toml::from_str(text).map_err(|e| ProbeError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn redirectors(&self) -> Vec<IpAddr> {
        self.resolvers.iter().filter_map(|r| r.nxdomain_redirector).collect()
    }
}

/// First `nameserver` line of /etc/resolv.conf, as the `local` resolver.
pub fn system_resolver() -> Option<ResolverSpec> {
    let text = std::fs::read_to_string("/etc/resolv.conf").ok()?;
    text.lines()
        .filter_map(|l| l.trim().strip_prefix("nameserver"))
        .filter_map(|a| a.trim().parse::<IpAddr>().ok())
        .find_map(|a| ResolverSpec::new("local", a, None).ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Step {
    Dns,
    Tcp,
    Keyword,
    Http,
}

/// A transient failure. Any entry excludes the result from reporting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub step: Step,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetProbeResult {
    pub target: TargetUrl,
    pub dns: Vec<DnsObservation>,
    pub tcp: Vec<TcpObservation>,
    /// `None` when the portal could not be reached.
    pub keyword: Option<HttpObservation>,
    pub http: Option<HttpObservation>,
    pub errors: Vec<ErrorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
}

impl TargetProbeResult {
    pub fn reportable(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Sends one A query and waits for the matching response.
pub async fn query_a(
    endpoint: SocketAddr,
    qname: &str,
    limit: Duration,
    retries: u32,
) -> (DnsOutcome, Vec<IpAddr>, u64) {
    let started = Instant::now();
    let elapsed = || started.elapsed().as_millis() as u64;
    let local: SocketAddr = if endpoint.is_ipv4() {
        SocketAddr::from(([0, 0, 0, 0], 0))
    } else {
        SocketAddr::from(([0u16; 8], 0))
    };
    let Ok(sock) = UdpSocket::bind(local).await else {
        return (DnsOutcome::ServFail, vec![], elapsed());
    };
    for _ in 0..=retries {
        let id: u16 = rand::random();
        let Ok(query) = Message::query_a(id, qname).encode() else {
            return (DnsOutcome::ServFail, vec![], elapsed());
        };
        if sock.send_to(&query, endpoint).await.is_err() {
            continue;
        }
        let wait = async {
            let mut buf = [0u8; 4096];
            loop {
                let (n, from) = sock.recv_from(&mut buf).await.ok()?;
                if from != endpoint {
                    continue;
                }
                match Message::decode(&buf[..n]) {
                    Ok(m) if m.id == id && m.is_response() => return Some(m),
                    _ => continue,
                }
            }
        };
        match timeout(limit, wait).await {
            Ok(Some(m)) => {
                let answers: Vec<IpAddr> = m.a_records().into_iter().map(IpAddr::V4).collect();
                let outcome = match m.rcode() {
                    Rcode::NoError if !answers.is_empty() => DnsOutcome::Answers,
                    // NOERROR without an A record: nothing to connect to
                    Rcode::NoError | Rcode::NxDomain => DnsOutcome::NxDomain,
                    _ => DnsOutcome::ServFail,
                };
                let answers = if outcome == DnsOutcome::Answers { answers } else { vec![] };
                return (outcome, answers, elapsed());
            }
            Ok(None) | Err(_) => continue,
        }
    }
    (DnsOutcome::Timeout, vec![], elapsed())
}

/// Step 1: one A lookup per configured resolver, run concurrently.
pub async fn dns_step(target: &TargetUrl, config: &ProbeConfig) -> Vec<DnsObservation> {
    let lookups = config.resolvers.iter().map(|r| async move {
        let (outcome, answers, rtt) =
            query_a(r.query_endpoint(), &target.host, config.timeouts.dns(), config.retries).await;
        DnsObservation::new(r.clone(), &target.host, outcome, answers, rtt)
            .expect("outcome and answers are consistent by construction")
    });
    futures::future::join_all(lookups).await
}

/// Step 2: connect to each address and close immediately.
pub async fn tcp_step(addresses: &[IpAddr], port: u16, limit: Duration) -> Vec<TcpObservation> {
    let attempts = addresses.iter().map(|&address| async move {
        let result = match http::connect(SocketAddr::new(address, port), limit).await {
            Ok(_) => TcpResult::Connected,
            Err(FetchError::Refused) => TcpResult::Refused,
            Err(FetchError::ConnectTimeout) => TcpResult::TimedOut,
            Err(_) => TcpResult::Unreachable,
        };
        TcpObservation { address, port, result }
    });
    futures::future::join_all(attempts).await
}

async fn fetch_with_retries(
    addr: SocketAddr,
    host: &str,
    uri: &str,
    config: &ProbeConfig,
) -> Result<HttpObservation, FetchError> {
    let mut last = None;
    for _ in 0..=config.retries {
        match http::get(addr, host, uri, config.timeouts.tcp(), config.timeouts.http()).await {
            Ok(resp) => return Ok(observation_from(host, uri, &resp)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

pub(crate) fn observation_from(host: &str, uri: &str, resp: &HttpResponse) -> HttpObservation {
    let status = if (100..=599).contains(&resp.status) { resp.status } else { 599 };
    HttpObservation::from_response(
        host,
        uri,
        status,
        resp.header("location").map(str::to_string),
        resp.header("last-modified").map(str::to_string),
        &resp.body,
    )
    .expect("status clamped into range")
}

async fn portal_address(config: &ProbeConfig) -> Option<SocketAddr> {
    let host = &config.keyword_portal.host;
    if let Some(addr) = config.host_overrides.get(host).and_then(|v| v.first()) {
        return Some(SocketAddr::new(*addr, config.port));
    }
    tokio::net::lookup_host((host.as_str(), config.port)).await.ok()?.next()
}

/// Step 3: GET `/<target url>` on the portal. A 404 is the normal answer.
pub async fn keyword_step(target: &TargetUrl, config: &ProbeConfig) -> Result<HttpObservation, FetchError> {
    let addr = portal_address(config).await.ok_or_else(|| {
        FetchError::Unreachable(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "portal host did not resolve",
        ))
    })?;
    let uri = format!("/{}", target.render());
    fetch_with_retries(addr, &config.keyword_portal.host, &uri, config).await
}

/// Step 4: GET the target's path from `resolved` with its Host header.
/// Redirects are recorded, not followed.
pub async fn http_step(
    target: &TargetUrl,
    resolved: IpAddr,
    config: &ProbeConfig,
) -> Result<HttpObservation, FetchError> {
    fetch_with_retries(
        SocketAddr::new(resolved, config.port),
        &target.host,
        &target.request_uri(),
        config,
    )
    .await
}

/// Answers that are not some resolver's NXDOMAIN redirector, in resolver
/// order, deduplicated.
pub fn genuine_addresses(dns: &[DnsObservation], redirectors: &[IpAddr]) -> Vec<IpAddr> {
    let mut out = Vec::new();
    for obs in dns.iter().filter(|o| o.outcome == DnsOutcome::Answers) {
        let own = obs.resolver.nxdomain_redirector;
        for a in &obs.answers {
            if Some(*a) != own && !redirectors.contains(a) && !out.contains(a) {
                out.push(*a);
            }
        }
    }
    out
}

/// Runs all four steps for one target. Never fails; problems land in
/// `errors`.
pub async fn run_target(target: &TargetUrl, config: &ProbeConfig) -> TargetProbeResult {
    let mut errors = Vec::new();

    let dns = dns_step(target, config).await;
    for obs in dns.iter().filter(|o| o.outcome == DnsOutcome::Timeout) {
        errors.push(ErrorRecord {
            step: Step::Dns,
            detail: format!("{} timed out for {}", obs.resolver.name, obs.qname),
        });
    }

    let reference = match &config.clean_path {
        Some(clean) => Some(HttpCleanPath::new(clean.clone(), config).reference(target).await),
        None => None,
    };

    let genuine = genuine_addresses(&dns, &config.redirectors());
    let tcp = tcp_step(&genuine, config.port, config.timeouts.tcp()).await;

    let keyword = match keyword_step(target, config).await {
        Ok(obs) => Some(obs),
        Err(e) => {
            errors.push(ErrorRecord { step: Step::Keyword, detail: e.to_string() });
            None
        }
    };

    let connected = tcp
        .iter()
        .find(|o| o.result == TcpResult::Connected)
        .map(|o| o.address);
    let http_addr = connected
        .or_else(|| genuine.first().copied())
        .or_else(|| config.host_overrides.get(&target.host).and_then(|v| v.first().copied()))
        .or_else(|| reference.as_ref().and_then(|r| r.addresses.first().copied()));

    let http = match http_addr {
        Some(addr) => match http_step(target, addr, config).await {
            Ok(obs) => Some(obs),
            Err(e) => {
                errors.push(ErrorRecord {
                    step: Step::Http,
                    detail: format!("{addr}: {e}"),
                });
                None
            }
        },
        None => None,
    };

    TargetProbeResult { target: target.clone(), dns, tcp, keyword, http, errors, reference }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub targets: usize,
    pub reportable: usize,
    pub error_logged: usize,
    pub errors_by_step: BTreeMap<Step, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Campaign {
    pub results: Vec<TargetProbeResult>,
    pub summary: CampaignSummary,
}

/// One pass over `targets` with a bounded worker pool. Output order equals
/// input order.
pub async fn run_campaign(targets: &[TargetUrl], config: &ProbeConfig) -> Result<Campaign, ProbeError> {
    config.validate()?;
    let results: Vec<TargetProbeResult> = stream::iter(targets)
        .map(|t| run_target(t, config))
        .buffered(config.workers)
        .collect()
        .await;

    let mut summary = CampaignSummary { targets: results.len(), ..Default::default() };
    for r in &results {
        if r.reportable() {
            summary.reportable += 1;
        } else {
            summary.error_logged += 1;
        }
        for e in &r.errors {
            *summary.errors_by_step.entry(e.step).or_default() += 1;
        }
    }
    Ok(Campaign { results, summary })
}

#[derive(Debug, Error)]
pub enum CleanFailure {
    #[error("clean lookup failed: {0:?}")]
    Dns(DnsOutcome),
    #[error("clean fetch failed: {0}")]
    Fetch(FetchError),
}

/// Fetches through an uncensored channel: resolve with the clean resolver,
/// then GET from the resolved address (or the fixed `connect` address).
#[derive(Debug, Clone)]
pub struct HttpCleanPath {
    config: CleanPathConfig,
    port: u16,
    timeouts: Timeouts,
    retries: u32,
}

impl HttpCleanPath {
    pub fn new(config: CleanPathConfig, probe: &ProbeConfig) -> Self {
        HttpCleanPath { config, port: probe.port, timeouts: probe.timeouts, retries: probe.retries }
    }

    pub fn with_settings(config: CleanPathConfig, port: u16, timeouts: Timeouts, retries: u32) -> Self {
        HttpCleanPath { config, port, timeouts, retries }
    }

    pub async fn fetch_full(
        &self,
        target: &TargetUrl,
    ) -> Result<(Vec<IpAddr>, HttpResponse), CleanFailure> {
        let (outcome, addrs, _) =
            query_a(self.config.resolver, &target.host, self.timeouts.dns(), self.retries).await;
        if outcome != DnsOutcome::Answers {
            return Err(CleanFailure::Dns(outcome));
        }
        let addr = self.config.connect.unwrap_or(SocketAddr::new(addrs[0], self.port));
        let resp = http::get(addr, &target.host, &target.request_uri(), self.timeouts.tcp(), self.timeouts.http())
            .await
            .map_err(CleanFailure::Fetch)?;
        Ok((addrs, resp))
    }

    /// Reference data for classification. Failures leave fields empty.
    pub async fn reference(&self, target: &TargetUrl) -> Reference {
        match self.fetch_full(target).await {
            Ok((addresses, resp)) => Reference {
                addresses,
                body_digest: Some(BodyDigest::of(&resp.body)),
            },
            Err(CleanFailure::Dns(_)) => Reference::default(),
            Err(CleanFailure::Fetch(_)) => {
                let (outcome, addresses, _) =
                    query_a(self.config.resolver, &target.host, self.timeouts.dns(), 0).await;
                Reference {
                    addresses: if outcome == DnsOutcome::Answers { addresses } else { vec![] },
                    body_digest: None,
                }
            }
        }
    }
}

impl CleanPath for HttpCleanPath {
    async fn fetch(&self, target: &TargetUrl) -> FetchOutcome {
        match self.fetch_full(target).await {
            Ok((_, resp)) => FetchOutcome::Fetched { status: resp.status },
            Err(CleanFailure::Dns(_)) => FetchOutcome::DnsFailure,
            Err(CleanFailure::Fetch(_)) => FetchOutcome::ConnectFailure,
        }
    }
}
