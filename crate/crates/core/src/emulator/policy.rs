use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{is_private_ip, ResolverSpec};

pub const DEFAULT_REDIRECT_HOST: Ipv4Addr = Ipv4Addr::new(10, 16, 6, 41);
pub const DEFAULT_POP_LABEL: &str = "Isb-Dhok-P2";
pub const DEFAULT_RULE_ID: &str = "124";
pub const DEFAULT_LAST_MODIFIED: &str = "Fri, 19 Apr 2013 00:00:00 GMT";
pub const DEFAULT_PORTAL_HOST: &str = "www.google.com";
pub const DEFAULT_WARNING_BODY: &str = "<html><head><title>Site Blocked</title></head>\
<body><h1>Surf Safely!</h1><p>This site contains content that is restricted \
for viewing within this network.</p></body></html>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("policy invalid at `{path}`: {message}")]
pub struct PolicyInvalid {
    pub path: String,
    pub message: String,
}

impl PolicyInvalid {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        PolicyInvalid { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Generation {
    PassThrough,
    Isp302,
    Ixp200,
}

/// Exact host, or `*.suffix` which matches `suffix` and every subdomain of it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HostPattern {
    Exact(String),
    Suffix(String),
}

impl HostPattern {
    pub fn matches(&self, host: &str) -> bool {
        let host = host.strip_suffix('.').unwrap_or(host);
        match self {
            HostPattern::Exact(h) => host.eq_ignore_ascii_case(h),
            HostPattern::Suffix(s) => {
                let host = host.to_ascii_lowercase();
                host == *s || host.ends_with(&format!(".{s}"))
            }
        }
    }

    /// True when every host matched by `other` is also matched by `self`.
    pub fn covers(&self, other: &HostPattern) -> bool {
        match (self, other) {
            (HostPattern::Exact(a), HostPattern::Exact(b)) => a == b,
            (HostPattern::Exact(_), HostPattern::Suffix(_)) => false,
            (HostPattern::Suffix(_), HostPattern::Exact(b)) => self.matches(b),
            (HostPattern::Suffix(_), HostPattern::Suffix(b)) => self.matches(b),
        }
    }

    /// The literal host this pattern is anchored on.
    pub fn base(&self) -> &str {
        match self {
            HostPattern::Exact(h) | HostPattern::Suffix(h) => h,
        }
    }
}

impl FromStr for HostPattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (wild, body) = match s.strip_prefix("*.") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let body = body.strip_suffix('.').unwrap_or(body).to_ascii_lowercase();
        let ok = !body.is_empty()
            && !body.starts_with('.')
            && !body.contains("..")
            && body
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_'));
        if !ok {
            return Err(format!("{s:?} is not a host or *.suffix pattern"));
        }
        Ok(if wild { HostPattern::Suffix(body) } else { HostPattern::Exact(body) })
    }
}

impl fmt::Display for HostPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HostPattern::Exact(h) => f.write_str(h),
            HostPattern::Suffix(s) => write!(f, "*.{s}"),
        }
    }
}

impl Serialize for HostPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HostPattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HostUriRule {
    pub host: HostPattern,
    pub uri: String,
}

/// Censor configuration. Immutable once loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CensorPolicy {
    pub generation: Generation,
    pub dns_rules: BTreeSet<HostPattern>,
    pub http_host_rules: BTreeSet<HostPattern>,
    pub http_host_uri_rules: BTreeSet<HostUriRule>,
    pub resolver_map: Vec<ResolverSpec>,
    pub redirect_host: IpAddr,
    pub pop_label: String,
    pub rule_id: String,
    #[serde(skip)]
    pub warning_body: Vec<u8>,
    pub warning_last_modified: String,
    pub keyword_portal_interception: bool,
    pub keyword_portal_host: String,
}

/// Which rule class fired for a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleMatch {
    HostUri,
    Host,
}

impl CensorPolicy {
    /// Policy that never interferes.
    pub fn pass_through() -> Self {
        CensorPolicy {
            generation: Generation::PassThrough,
            dns_rules: BTreeSet::new(),
            http_host_rules: BTreeSet::new(),
            http_host_uri_rules: BTreeSet::new(),
            resolver_map: default_resolver_map(),
            redirect_host: IpAddr::V4(DEFAULT_REDIRECT_HOST),
            pop_label: DEFAULT_POP_LABEL.into(),
            rule_id: DEFAULT_RULE_ID.into(),
            warning_body: DEFAULT_WARNING_BODY.as_bytes().to_vec(),
            warning_last_modified: DEFAULT_LAST_MODIFIED.into(),
            keyword_portal_interception: false,
            keyword_portal_host: DEFAULT_PORTAL_HOST.into(),
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), PolicyInvalid> {
        for (i, dns) in self.dns_rules.iter().enumerate() {
            let covered = self.http_host_rules.iter().any(|h| h.covers(dns))
                || self.http_host_uri_rules.iter().any(|r| r.host.covers(dns));
            if !covered {
                return Err(PolicyInvalid::new(
                    format!("dns_rules[{i}]"),
                    format!("{dns} has no covering http_host_rules or http_host_uri_rules entry"),
                ));
            }
        }
        for (i, r) in self.http_host_uri_rules.iter().enumerate() {
            if r.uri.is_empty() {
                return Err(PolicyInvalid::new(
                    format!("http_host_uri_rules[{i}].uri"),
                    "uri substring must be non-empty",
                ));
            }
        }
        if self.generation == Generation::Isp302 && !is_private_ip(self.redirect_host) {
            return Err(PolicyInvalid::new(
                "redirect_host",
                format!("{} is not a private address", self.redirect_host),
            ));
        }
        let mut names = BTreeSet::new();
        for (i, r) in self.resolver_map.iter().enumerate() {
            if !names.insert(r.name.as_str()) {
                return Err(PolicyInvalid::new(
                    format!("resolver_map[{i}].name"),
                    format!("duplicate resolver {}", r.name),
                ));
            }
        }
        if self.keyword_portal_host.is_empty() {
            return Err(PolicyInvalid::new("keyword_portal_host", "must be non-empty"));
        }
        Ok(())
    }

    pub fn dns_blocked(&self, host: &str) -> bool {
        self.generation != Generation::PassThrough && self.dns_rules.iter().any(|p| p.matches(host))
    }

    /// Host+URI rules first, then host rules. PassThrough never matches.
    pub fn http_match(&self, host: &str, uri: &str) -> Option<RuleMatch> {
        if self.generation == Generation::PassThrough {
            return None;
        }
        if self
            .http_host_uri_rules
            .iter()
            .any(|r| r.host.matches(host) && uri.contains(r.uri.as_str()))
        {
            return Some(RuleMatch::HostUri);
        }
        if self.http_host_rules.iter().any(|p| p.matches(host)) {
            return Some(RuleMatch::Host);
        }
        None
    }

    pub fn resolver(&self, name: &str) -> Option<&ResolverSpec> {
        self.resolver_map.iter().find(|r| r.name == name)
    }

    pub fn rule_counts(&self) -> (usize, usize, usize) {
        (
            self.dns_rules.len(),
            self.http_host_rules.len(),
            self.http_host_uri_rules.len(),
        )
    }
}

/// The ISP's own resolver followed by the five public resolvers.
pub fn default_resolver_map() -> Vec<ResolverSpec> {
    let mut v = vec![ResolverSpec::new("local", IpAddr::V4(Ipv4Addr::new(10, 0, 0, 53)), None)
        .expect("static resolver")];
    v.extend(ResolverSpec::public_defaults());
    v
}

/// Everything around the censor: which names exist, what the origin serves,
/// and hosts that never answer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct World {
    /// Authoritative A records for names the origin stub serves.
    pub zone: BTreeMap<String, Vec<Ipv4Addr>>,
    /// Where names outside `zone` are forwarded. Unset means NXDOMAIN.
    pub upstream: Option<SocketAddr>,
    /// Hosts whose HTTP connections are accepted but never answered.
    pub blackhole_hosts: BTreeSet<String>,
    /// Names whose DNS queries are silently dropped.
    pub dns_blackhole_hosts: BTreeSet<String>,
    /// Legitimate origin redirects: host -> Location (served as 302).
    pub origin_redirects: BTreeMap<String, String>,
}

impl World {
    pub fn with_hosts<'a>(hosts: impl IntoIterator<Item = &'a str>, addr: Ipv4Addr) -> Self {
        World {
            zone: hosts.into_iter().map(|h| (h.to_ascii_lowercase(), vec![addr])).collect(),
            ..World::default()
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    generation: Generation,
    #[serde(default)]
    dns_rules: Vec<String>,
    #[serde(default)]
    http_host_rules: Vec<String>,
    #[serde(default)]
    http_host_uri_rules: Vec<RawHostUriRule>,
    #[serde(default)]
    resolver_map: Option<Vec<ResolverSpec>>,
    #[serde(default)]
    redirect_host: Option<IpAddr>,
    #[serde(default)]
    pop_label: Option<String>,
    #[serde(default)]
    rule_id: Option<String>,
    #[serde(default)]
    warning_body: Option<String>,
    #[serde(default)]
    warning_body_file: Option<String>,
    #[serde(default)]
    warning_last_modified: Option<String>,
    #[serde(default)]
    keyword_portal_interception: bool,
    #[serde(default)]
    keyword_portal_host: Option<String>,
    #[serde(default)]
    world: Option<World>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHostUriRule {
    host: String,
    uri: String,
}

fn patterns(field: &str, raw: &[String]) -> Result<BTreeSet<HostPattern>, PolicyInvalid> {
    raw.iter()
        .enumerate()
        .map(|(i, s)| s.parse().map_err(|e| PolicyInvalid::new(format!("{field}[{i}]"), e)))
        .collect()
}

/// Parses and validates a TOML policy. `base_dir` resolves `warning_body_file`.
pub fn load_policy(source: &str, base_dir: Option<&Path>) -> Result<CensorPolicy, PolicyInvalid> {
    load_emulator_config(source, base_dir).map(|(p, _)| p)
}

/// Like [`load_policy`], also returning the optional `[world]` table.
pub fn load_emulator_config(
    source: &str,
    base_dir: Option<&Path>,
) -> Result<(CensorPolicy, World), PolicyInvalid> {
    let file: PolicyFile = toml::from_str(source).map_err(|e| {
        let path = e
            .span()
            .map(|s| format!("byte {}", s.start))
            .unwrap_or_else(|| "<root>".into());
        PolicyInvalid::new(path, e.message().to_string())
    })?;

    let dns_rules = patterns("dns_rules", &file.dns_rules)?;
    let http_host_rules = patterns("http_host_rules", &file.http_host_rules)?;
    let http_host_uri_rules = file
        .http_host_uri_rules
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let host = r
                .host
                .parse()
                .map_err(|e| PolicyInvalid::new(format!("http_host_uri_rules[{i}].host"), e))?;
            Ok(HostUriRule { host, uri: r.uri.clone() })
        })
        .collect::<Result<BTreeSet<_>, PolicyInvalid>>()?;

    let warning_body = match (&file.warning_body, &file.warning_body_file) {
        (Some(_), Some(_)) => {
            return Err(PolicyInvalid::new(
                "warning_body_file",
                "set either warning_body or warning_body_file, not both",
            ))
        }
        (Some(inline), None) => inline.as_bytes().to_vec(),
        (None, Some(file_name)) => {
            let path = match base_dir {
                Some(dir) => dir.join(file_name),
                None => file_name.into(),
            };
            std::fs::read(&path).map_err(|e| {
                PolicyInvalid::new("warning_body_file", format!("{}: {e}", path.display()))
            })?
        }
        (None, None) => DEFAULT_WARNING_BODY.as_bytes().to_vec(),
    };

    let policy = CensorPolicy {
        generation: file.generation,
        dns_rules,
        http_host_rules,
        http_host_uri_rules,
        resolver_map: file.resolver_map.unwrap_or_else(default_resolver_map),
        redirect_host: file.redirect_host.unwrap_or(IpAddr::V4(DEFAULT_REDIRECT_HOST)),
        pop_label: file.pop_label.unwrap_or_else(|| DEFAULT_POP_LABEL.into()),
        rule_id: file.rule_id.unwrap_or_else(|| DEFAULT_RULE_ID.into()),
        warning_body,
        warning_last_modified: file
            .warning_last_modified
            .unwrap_or_else(|| DEFAULT_LAST_MODIFIED.into()),
        keyword_portal_interception: file.keyword_portal_interception,
        keyword_portal_host: file
            .keyword_portal_host
            .map(|h| h.to_ascii_lowercase())
            .unwrap_or_else(|| DEFAULT_PORTAL_HOST.into()),
    };
    policy.validate()?;
    Ok((policy, file.world.unwrap_or_default()))
}
