//! URL transforms for getting around host-based blocking, and a matrix
//! that tries each method against a list of targets.

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{classify_http, ClassifyError, FingerprintSet};
use crate::http;
use crate::model::{parse_target, HttpObservation, ModelError, TargetUrl};
use crate::probe::{genuine_addresses, observation_from, query_a, ProbeConfig, Timeouts};

pub const CORAL_SUFFIX: &str = ".nyud.net";
pub const URL_PLACEHOLDER: &str = "{URL}";

#[derive(Debug, Error)]
pub enum CircumventError {
    #[error("template for {0:?} must contain {URL_PLACEHOLDER} exactly once")]
    BadTemplate(Engine),
    #[error("no template configured for {0:?}")]
    MissingTemplate(Engine),
    #[error("instantiated url is invalid: {0}")]
    InvalidUrl(#[from] ModelError),
    #[error("url does not come from the {0:?} template")]
    NotACacheUrl(Engine),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    WebDnsPlusHostHeader,
    CoralCdn,
    SearchCache,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::WebDnsPlusHostHeader, Method::CoralCdn, Method::SearchCache];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    GoogleCache,
    Bing,
    InternetArchive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accessible,
    Blocked,
    Inconclusive,
}

/// Default cache templates. These follow current provider URL schemes,
/// which drift; override them in config when they do.
pub fn default_cache_templates() -> BTreeMap<Engine, String> {
    BTreeMap::from([
        (Engine::GoogleCache, "http://webcache.googleusercontent.com/search?q=cache:{URL}".to_string()),
        (Engine::Bing, "http://cc.bingj.com/cache.aspx?q={URL}".to_string()),
        (Engine::InternetArchive, "http://web.archive.org/web/{URL}".to_string()),
    ])
}

/// Appends the CoralCDN suffix to the host. Nothing else changes.
pub fn coralize(target: &TargetUrl) -> TargetUrl {
    let host = format!("{}{}", target.host, CORAL_SUFFIX);
    target
        .with_host(&host)
        .expect("a valid host with a valid suffix stays valid")
}

/// Inverse of [`coralize`]; `None` when the host carries no suffix.
pub fn strip_coral(target: &TargetUrl) -> Option<TargetUrl> {
    let host = target.host.strip_suffix(CORAL_SUFFIX)?;
    target.with_host(host).ok()
}

fn split_template(template: &str) -> Option<(&str, &str)> {
    let (pre, post) = template.split_once(URL_PLACEHOLDER)?;
    (!post.contains(URL_PLACEHOLDER)).then_some((pre, post))
}

fn template(templates: &BTreeMap<Engine, String>, engine: Engine) -> Result<(&str, &str), CircumventError> {
    let t = templates.get(&engine).ok_or(CircumventError::MissingTemplate(engine))?;
    split_template(t).ok_or(CircumventError::BadTemplate(engine))
}

/// Instantiates the engine's template with the rendered target, unescaped.
pub fn cache_url(
    target: &TargetUrl,
    engine: Engine,
    templates: &BTreeMap<Engine, String>,
) -> Result<TargetUrl, CircumventError> {
    let (pre, post) = template(templates, engine)?;
    Ok(parse_target(&format!("{pre}{}{post}", target.render()))?)
}

/// Recovers the target embedded by [`cache_url`].
pub fn extract_cached(
    url: &TargetUrl,
    engine: Engine,
    templates: &BTreeMap<Engine, String>,
) -> Result<TargetUrl, CircumventError> {
    let (pre, post) = template(templates, engine)?;
    let rendered = url.render();
    let inner = rendered
        .strip_prefix(pre)
        .and_then(|s| s.strip_suffix(post))
        .ok_or(CircumventError::NotACacheUrl(engine))?;
    Ok(parse_target(inner)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fetched {
    Observed(HttpObservation),
    Failed(String),
}

/// One GET to `address` carrying `host` in the Host header.
pub async fn host_header_fetch(address: SocketAddr, host: &str, uri: &str, timeouts: &Timeouts) -> Fetched {
    match http::get(address, host, uri, timeouts.tcp(), timeouts.http()).await {
        Ok(resp) => Fetched::Observed(observation_from(host, uri, &resp)),
        Err(e) => Fetched::Failed(e.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircumventConfig {
    pub methods: Vec<Method>,
    pub cache_templates: BTreeMap<Engine, String>,
    pub cache_engine: Engine,
    /// Out-of-band host to address table for the direct-IP method.
    pub host_ip_table: BTreeMap<String, Vec<IpAddr>>,
    pub fingerprints: FingerprintSet,
}

impl Default for CircumventConfig {
    fn default() -> Self {
        CircumventConfig {
            methods: Method::ALL.to_vec(),
            cache_templates: default_cache_templates(),
            cache_engine: Engine::GoogleCache,
            host_ip_table: BTreeMap::new(),
            fingerprints: FingerprintSet::default(),
        }
    }
}

impl CircumventConfig {
    pub fn validate(&self) -> Result<(), CircumventError> {
        for (engine, t) in &self.cache_templates {
            split_template(t).ok_or(CircumventError::BadTemplate(*engine))?;
        }
        if self.methods.contains(&Method::SearchCache) {
            template(&self.cache_templates, self.cache_engine)?;
        }
        self.fingerprints
            .validate()
            .map_err(|e| CircumventError::InvalidConfig(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, CircumventError> {
        let cfg: CircumventConfig =
            toml::from_str(text).map_err(|e| CircumventError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub target: TargetUrl,
    pub outcomes: BTreeMap<Method, Outcome>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircumventionMatrix {
    pub rows: Vec<MatrixRow>,
}

impl CircumventionMatrix {
    pub fn get(&self, target: &TargetUrl, method: Method) -> Option<Outcome> {
        self.rows
            .iter()
            .find(|r| &r.target == target)
            .and_then(|r| r.outcomes.get(&method).copied())
    }

    pub fn column(&self, method: Method) -> Vec<Outcome> {
        self.rows.iter().filter_map(|r| r.outcomes.get(&method).copied()).collect()
    }
}

fn judge(fetched: &Fetched, fingerprints: &FingerprintSet) -> Outcome {
    let Fetched::Observed(obs) = fetched else {
        return Outcome::Inconclusive;
    };
    match classify_http(obs, fingerprints, None) {
        Ok(Some(_)) => Outcome::Blocked,
        Ok(None) if obs.status < 400 => Outcome::Accessible,
        Ok(None) => Outcome::Inconclusive,
        // a 200 with no warning signature
        Err(ClassifyError::AmbiguousEvidence) => Outcome::Accessible,
        Err(_) => Outcome::Inconclusive,
    }
}

/// Address for a rewritten host: the table first, then the first genuine
/// answer from the probe's resolvers.
async fn locate(host: &str, config: &CircumventConfig, probe: &ProbeConfig) -> Option<SocketAddr> {
    if let Some(ip) = config.host_ip_table.get(host).and_then(|v| v.first()) {
        return Some(SocketAddr::new(*ip, probe.port));
    }
    let redirectors: Vec<IpAddr> = probe.resolvers.iter().filter_map(|r| r.nxdomain_redirector).collect();
    for r in &probe.resolvers {
        let (outcome, answers, rtt) =
            query_a(r.query_endpoint(), host, probe.timeouts.dns(), probe.retries).await;
        let Ok(obs) = crate::model::DnsObservation::new(r.clone(), host, outcome, answers, rtt) else {
            continue;
        };
        if let Some(ip) = genuine_addresses(&[obs], &redirectors).first() {
            return Some(SocketAddr::new(*ip, probe.port));
        }
    }
    None
}

async fn fetch_via(url: &TargetUrl, config: &CircumventConfig, probe: &ProbeConfig) -> Fetched {
    match locate(&url.host, config, probe).await {
        Some(addr) => host_header_fetch(addr, &url.host, &url.request_uri(), &probe.timeouts).await,
        None => Fetched::Failed(format!("no address for {}", url.host)),
    }
}

async fn try_method(target: &TargetUrl, method: Method, config: &CircumventConfig, probe: &ProbeConfig) -> Outcome {
    let fetched = match method {
        Method::WebDnsPlusHostHeader => match config.host_ip_table.get(&target.host).and_then(|v| v.first()) {
            Some(ip) => {
                let addr = SocketAddr::new(*ip, probe.port);
                host_header_fetch(addr, &target.host, &target.request_uri(), &probe.timeouts).await
            }
            None => Fetched::Failed("host not in host_ip_table".into()),
        },
        Method::CoralCdn => fetch_via(&coralize(target), config, probe).await,
        Method::SearchCache => match cache_url(target, config.cache_engine, &config.cache_templates) {
            Ok(url) => fetch_via(&url, config, probe).await,
            Err(e) => Fetched::Failed(e.to_string()),
        },
    };
    judge(&fetched, &config.fingerprints)
}

/// Tries every method on every target, `probe.workers` targets at a time.
/// Rows come back in input order.
pub async fn evaluate_matrix(
    targets: &[TargetUrl],
    methods: &[Method],
    config: &CircumventConfig,
    probe: &ProbeConfig,
) -> Result<CircumventionMatrix, CircumventError> {
    config.validate()?;
    probe
        .validate()
        .map_err(|e| CircumventError::InvalidConfig(e.to_string()))?;
    let rows = stream::iter(targets.iter().cloned())
        .map(|target| async move {
            let mut outcomes = BTreeMap::new();
            for &m in methods {
                outcomes.insert(m, try_method(&target, m, config, probe).await);
            }
            MatrixRow { target, outcomes }
        })
        .buffered(probe.workers)
        .collect()
        .await;
    Ok(CircumventionMatrix { rows })
}
