//! Turns observations into mechanism verdicts, and finds out whether a
//! censor fires on the Host header alone or on Host plus request URI.
//!
//! HTTP injection is judged at the socket level: a 200 is considered
//! injected when it matches a known warning-page fingerprint, carries a
//! known injected `Last-Modified` value, or differs from what a clean
//! channel received for the same URL. Without any of those signals the
//! evidence is ambiguous and reported as such.

use std::collections::BTreeSet;
use std::net::{IpAddr, SocketAddr};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::http;
use crate::model::{
    is_private_ip, parse_target, BodyDigest, DnsObservation, DnsOutcome, HttpObservation,
    Mechanism, Reference, ResolverSpec, TcpResult, Verdict,
};
use crate::probe::{observation_from, Timeouts, TargetProbeResult};

pub const DEFAULT_INJECTED_LAST_MODIFIED: &str = "Fri, 19 Apr 2013";

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("http evidence is ambiguous: 200 without fingerprint match or reference")]
    AmbiguousEvidence,
    #[error("result has error-log entries and cannot be classified")]
    ErrorLogged,
    #[error("decoy unreachable: {0}")]
    DecoyUnreachable(http::FetchError),
    #[error("fingerprint set has no detection signal")]
    EmptyFingerprints,
    #[error("fingerprint file: {0}")]
    FingerprintFile(String),
}

/// Signals that identify a censor's warning page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintSet {
    #[serde(rename = "digests", default)]
    pub warning_page_digests: BTreeSet<BodyDigest>,
    #[serde(rename = "patterns", default)]
    pub warning_excerpt_patterns: Vec<String>,
    #[serde(rename = "last_modified", default)]
    pub injected_last_modified: Vec<String>,
}

impl Default for FingerprintSet {
    fn default() -> Self {
        FingerprintSet {
            warning_page_digests: BTreeSet::new(),
            warning_excerpt_patterns: Vec::new(),
            injected_last_modified: vec![DEFAULT_INJECTED_LAST_MODIFIED.to_string()],
        }
    }
}

impl FingerprintSet {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        let any = !self.warning_page_digests.is_empty()
            || self.warning_excerpt_patterns.iter().any(|p| !p.is_empty())
            || self.injected_last_modified.iter().any(|p| !p.is_empty());
        if any {
            Ok(())
        } else {
            Err(ClassifyError::EmptyFingerprints)
        }
    }

    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, ClassifyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClassifyError::FingerprintFile(format!("{}: {e}", path.display())))?;
        let set: FingerprintSet = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ClassifyError::FingerprintFile(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| ClassifyError::FingerprintFile(e.to_string()))?
        };
        set.validate()?;
        Ok(set)
    }

    fn body_matches(&self, obs: &HttpObservation) -> bool {
        self.warning_page_digests.contains(&obs.body_digest)
            || self
                .warning_excerpt_patterns
                .iter()
                .filter(|p| !p.is_empty())
                .any(|p| contains(&obs.body_excerpt, p.as_bytes()))
    }

    fn last_modified_matches(&self, value: &str) -> bool {
        self.injected_last_modified
            .iter()
            .filter(|p| !p.is_empty())
            .any(|p| value.contains(p.as_str()))
    }

    fn location_matches(&self, location: &str) -> bool {
        self.warning_excerpt_patterns
            .iter()
            .filter(|p| !p.is_empty())
            .any(|p| location.contains(p.as_str()))
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn redirector_for(obs: &DnsObservation, known: &[ResolverSpec]) -> Option<IpAddr> {
    known
        .iter()
        .find(|k| k.name == obs.resolver.name || k.address == obs.resolver.address)
        .unwrap_or(&obs.resolver)
        .nxdomain_redirector
}

/// Flags DNS injection when a resolver hands back its own NXDOMAIN
/// redirector, when it says NXDOMAIN for a name the reference channel
/// resolves, or when a redirector-style resolver returns a raw NXDOMAIN.
pub fn classify_dns(
    obs: &DnsObservation,
    known: &[ResolverSpec],
    reference: Option<&[IpAddr]>,
) -> Option<Mechanism> {
    let redirector = redirector_for(obs, known);
    let injected = match obs.outcome {
        DnsOutcome::Answers => redirector.is_some_and(|r| obs.answers.contains(&r)),
        DnsOutcome::NxDomain => {
            reference.is_some_and(|addrs| !addrs.is_empty()) || redirector.is_some()
        }
        DnsOutcome::Timeout | DnsOutcome::ServFail => false,
    };
    injected.then_some(Mechanism::DnsInjection)
}

fn location_host_is_private(location: &str) -> bool {
    parse_target(location)
        .ok()
        .and_then(|t| t.host.parse::<IpAddr>().ok())
        .is_some_and(is_private_ip)
}

/// Classifies one HTTP response. A 200 with no fingerprint match and no
/// reference digest is [`ClassifyError::AmbiguousEvidence`].
pub fn classify_http(
    obs: &HttpObservation,
    fingerprints: &FingerprintSet,
    reference_digest: Option<&BodyDigest>,
) -> Result<Option<Mechanism>, ClassifyError> {
    match obs.status {
        302 => {
            let spoofed = obs
                .location
                .as_deref()
                .is_some_and(|l| location_host_is_private(l) || fingerprints.location_matches(l));
            Ok(spoofed.then_some(Mechanism::Http302Redirect))
        }
        200 => {
            let fingerprinted = fingerprints.body_matches(obs)
                || obs
                    .last_modified
                    .as_deref()
                    .is_some_and(|lm| fingerprints.last_modified_matches(lm));
            if fingerprinted {
                return Ok(Some(Mechanism::Http200Injection));
            }
            match reference_digest {
                Some(d) if *d != obs.body_digest => Ok(Some(Mechanism::Http200Injection)),
                Some(_) => Ok(None),
                None => Err(ClassifyError::AmbiguousEvidence),
            }
        }
        _ => Ok(None),
    }
}

/// Combines every observation of a reportable result into one verdict.
/// `reference` overrides the reference recorded on the result.
pub fn classify_target(
    result: &TargetProbeResult,
    fingerprints: &FingerprintSet,
    known_resolvers: &[ResolverSpec],
    reference: Option<&Reference>,
) -> Result<Verdict, ClassifyError> {
    if !result.reportable() {
        return Err(ClassifyError::ErrorLogged);
    }
    let reference = reference.or(result.reference.as_ref());
    let ref_addrs = reference.map(|r| r.addresses.as_slice());
    let mut mechanisms = BTreeSet::new();
    let mut evidence = Vec::new();

    let redirectors: Vec<IpAddr> = known_resolvers
        .iter()
        .chain(result.dns.iter().map(|o| &o.resolver))
        .filter_map(|r| r.nxdomain_redirector)
        .collect();
    let mut genuine_answers = false;
    for obs in &result.dns {
        if let Some(m) = classify_dns(obs, known_resolvers, ref_addrs) {
            mechanisms.insert(m);
            evidence.push(format!("dns/{}", obs.resolver.name));
        } else if obs.outcome == DnsOutcome::Answers
            && obs.answers.iter().any(|a| !redirectors.contains(a))
        {
            genuine_answers = true;
        }
    }

    if genuine_answers
        && !result.tcp.is_empty()
        && result.tcp.iter().all(|t| t.result != TcpResult::Connected)
    {
        mechanisms.insert(Mechanism::IpBlock);
        evidence.extend(result.tcp.iter().map(|t| format!("tcp/{}:{}", t.address, t.port)));
    }

    if let Some(kw) = &result.keyword {
        if kw.status != 404 {
            mechanisms.insert(Mechanism::UrlKeyword);
            evidence.push("keyword".into());
        }
    }

    let mut inconclusive = false;
    if let Some(obs) = &result.http {
        match classify_http(obs, fingerprints, reference.and_then(|r| r.body_digest.as_ref())) {
            Ok(Some(m)) => {
                mechanisms.insert(m);
                evidence.push("http".into());
            }
            Ok(None) => {}
            Err(ClassifyError::AmbiguousEvidence) => inconclusive = true,
            Err(e) => return Err(e),
        }
    }

    let mut verdict = Verdict::new(result.target.clone(), mechanisms, evidence);
    verdict.inconclusive = inconclusive;
    Ok(verdict)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerVerdict {
    HostOnly,
    HostAndUri,
    NotTriggered,
}

#[derive(Debug, Clone)]
pub struct TriggerConfig {
    /// Host known not to be censored, used for the URI-only request.
    pub benign_host: String,
    pub fingerprints: FingerprintSet,
    pub timeouts: Timeouts,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            benign_host: "example.com".into(),
            fingerprints: FingerprintSet::default(),
            timeouts: Timeouts::default(),
        }
    }
}

async fn censored_at(
    decoy: SocketAddr,
    host: &str,
    uri: &str,
    config: &TriggerConfig,
) -> Result<bool, http::FetchError> {
    let resp = http::get(decoy, host, uri, config.timeouts.tcp(), config.timeouts.http()).await?;
    let obs = observation_from(host, uri, &resp);
    Ok(matches!(classify_http(&obs, &config.fingerprints, None), Ok(Some(_))))
}

/// Sends crafted requests to an uncensored `decoy`: the censored host with
/// `/`, then with `uri`, then a benign host with `uri`.
pub async fn determine_trigger(
    host: &str,
    uri: &str,
    decoy: SocketAddr,
    config: &TriggerConfig,
) -> Result<TriggerVerdict, ClassifyError> {
    let host_alone = censored_at(decoy, host, "/", config)
        .await
        .map_err(ClassifyError::DecoyUnreachable)?;
    if host_alone {
        return Ok(TriggerVerdict::HostOnly);
    }
    let with_uri = censored_at(decoy, host, uri, config)
        .await
        .map_err(ClassifyError::DecoyUnreachable)?;
    if !with_uri {
        return Ok(TriggerVerdict::NotTriggered);
    }
    // A URI-only trigger also lands here; the verdict set has no separate
    // case for it.
    let uri_alone = censored_at(decoy, &config.benign_host, uri, config)
        .await
        .map_err(ClassifyError::DecoyUnreachable)?;
    if uri_alone {
        debug!(host, uri, "uri triggers without the host");
    }
    Ok(TriggerVerdict::HostAndUri)
}
