//! A configurable censor middlebox and origin stub.
//!
//! The decision functions here are pure; [`server`] wires them to UDP and
//! TCP listeners. Two generations are modelled: ISP-level 302 redirection
//! to a warning host on a private address, and IXP-level injection of a
//! 200 warning page in place of the origin response. DNS injection is
//! resolver-aware: resolvers with an NXDOMAIN redirector get that address
//! back, all others get NXDOMAIN.

mod policy;
pub mod server;

use std::net::{IpAddr, Ipv4Addr};

use serde::{Deserialize, Serialize};

pub use policy::{
    default_resolver_map, load_emulator_config, load_policy, CensorPolicy, Generation,
    HostPattern, HostUriRule, PolicyInvalid, RuleMatch, World, DEFAULT_LAST_MODIFIED,
    DEFAULT_POP_LABEL, DEFAULT_REDIRECT_HOST, DEFAULT_RULE_ID, DEFAULT_WARNING_BODY,
};
pub use server::{EmulatorHandle, OriginLog};

use crate::dns::{Message, Rcode, Record};
use crate::http::{HttpRequest, HttpResponse};
use crate::model::{parse_target, ResolverSpec};

const DNS_TTL: u32 = 300;

/// What the DNS side does with a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DnsReply {
    /// Encoded response to send back.
    Respond(Vec<u8>),
    /// Relay the query to the upstream resolver unchanged.
    Forward,
    /// Send nothing.
    Drop,
}

/// Answers one query as seen by the resolver identity `resolver`.
pub fn handle_dns(policy: &CensorPolicy, world: &World, query: &[u8], resolver: &ResolverSpec) -> DnsReply {
    let msg = match Message::decode_query(query) {
        Ok(m) => m,
        Err(_) => return DnsReply::Respond(Message::formerr(query)),
    };
    let qname = msg.questions[0].name.clone();
    if world.dns_blackhole_hosts.contains(&qname) {
        return DnsReply::Drop;
    }
    let respond = |rcode, answers| {
        DnsReply::Respond(
            Message::response_to(&msg, rcode, answers, false)
                .encode()
                .expect("query name already validated by decode"),
        )
    };

    if policy.dns_blocked(&qname) {
        return match resolver.nxdomain_redirector {
            Some(IpAddr::V4(redirector)) => {
                respond(Rcode::NoError, vec![Record::a(&qname, redirector, DNS_TTL)])
            }
            _ => respond(Rcode::NxDomain, vec![]),
        };
    }
    resolve_clean(world, &msg)
}

/// Resolution with no censorship applied; what a clean channel sees.
pub fn handle_dns_clean(world: &World, query: &[u8]) -> DnsReply {
    match Message::decode_query(query) {
        Ok(msg) => {
            if world.dns_blackhole_hosts.contains(&msg.questions[0].name) {
                return DnsReply::Drop;
            }
            resolve_clean(world, &msg)
        }
        Err(_) => DnsReply::Respond(Message::formerr(query)),
    }
}

fn resolve_clean(world: &World, msg: &Message) -> DnsReply {
    let q = &msg.questions[0];
    let encode = |rcode, answers| {
        DnsReply::Respond(
            Message::response_to(msg, rcode, answers, true)
                .encode()
                .expect("query name already validated by decode"),
        )
    };
    match world.zone.get(&q.name) {
        Some(addrs) if q.qtype == crate::dns::TYPE_A => encode(
            Rcode::NoError,
            addrs.iter().map(|a| Record::a(&q.name, *a, DNS_TTL)).collect(),
        ),
        Some(_) => encode(Rcode::NoError, vec![]),
        None if world.upstream.is_some() => DnsReply::Forward,
        None => encode(Rcode::NxDomain, vec![]),
    }
}

/// Why the middlebox answered the way it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Disposition {
    Censored,
    WarningSite,
    BadRequest,
}

/// What the HTTP side does with a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HttpAction {
    Respond(HttpResponse, Disposition),
    /// Pass the request to the origin stub untouched.
    Forward,
    /// Accept, then never answer.
    Blackhole,
}

/// Middlebox decision for one request from `client`.
pub fn handle_http(policy: &CensorPolicy, world: &World, request: &HttpRequest, client: IpAddr) -> HttpAction {
    let Some(host) = request.host() else {
        return HttpAction::Respond(bad_request(), Disposition::BadRequest);
    };
    if policy.generation == Generation::Isp302 && host == policy.redirect_host.to_string() {
        return HttpAction::Respond(serve_warning_site(policy, request), Disposition::WarningSite);
    }
    if world.blackhole_hosts.contains(&host) {
        return HttpAction::Blackhole;
    }
    let matched = policy.http_match(&host, &request.uri).is_some()
        || (policy.keyword_portal_interception
            && host == policy.keyword_portal_host
            && portal_embeds_blocked(policy, &request.uri));
    if !matched {
        return HttpAction::Forward;
    }
    let response = match policy.generation {
        Generation::PassThrough => return HttpAction::Forward,
        Generation::Isp302 => {
            let location = format!(
                "http://{}/redirect.php?n={}@{}&s={}",
                policy.redirect_host, client, policy.pop_label, policy.rule_id
            );
            let body = format!(
                "<html><head><title>302 Found</title></head><body><a href=\"{location}\">Found</a></body></html>"
            );
            HttpResponse::new(302, "text/html", body.into_bytes()).with_header("Location", &location)
        }
        Generation::Ixp200 => HttpResponse::new(200, "text/html", policy.warning_body.clone())
            .with_header("Last-Modified", &policy.warning_last_modified),
    };
    HttpAction::Respond(response, Disposition::Censored)
}

fn portal_embeds_blocked(policy: &CensorPolicy, uri: &str) -> bool {
    let embedded = uri.strip_prefix('/').unwrap_or(uri);
    match parse_target(embedded) {
        Ok(t) => {
            policy.dns_blocked(&t.host) || policy.http_match(&t.host, &t.request_uri()).is_some()
        }
        Err(_) => false,
    }
}

/// The warning host reached through an ISP-level redirect.
pub fn serve_warning_site(policy: &CensorPolicy, request: &HttpRequest) -> HttpResponse {
    let path = request.uri.split('?').next().unwrap_or("");
    if path == "/redirect.php" {
        HttpResponse::new(200, "text/html", policy.warning_body.clone())
    } else {
        not_found()
    }
}

pub(crate) fn not_found() -> HttpResponse {
    HttpResponse::new(
        404,
        "text/html",
        b"<html><head><title>404 Not Found</title></head><body><h1>Not Found</h1></body></html>".to_vec(),
    )
}

pub(crate) fn bad_request() -> HttpResponse {
    HttpResponse::new(
        400,
        "text/html",
        b"<html><head><title>400 Bad Request</title></head><body><h1>Bad Request</h1></body></html>".to_vec(),
    )
}

/// Content the origin stub serves. Bodies depend on Host and URI so that
/// co-hosted names are distinguishable.
pub fn origin_response(world: &World, portal_host: &str, request: &HttpRequest) -> HttpResponse {
    let Some(host) = request.host() else {
        return bad_request();
    };
    if let Some(location) = world.origin_redirects.get(&host) {
        return HttpResponse::new(302, "text/html", b"<html><body>Moved</body></html>".to_vec())
            .with_header("Location", location);
    }
    let path = request.uri.split('?').next().unwrap_or("");
    if host == portal_host && path != "/" {
        return not_found();
    }
    if path == "/favicon.ico" {
        return HttpResponse::new(200, "image/x-icon", vec![0, 0, 1, 0]);
    }
    let body = format!(
        "<html><head><title>{host}</title></head><body><p>origin content for {host}{}</p></body></html>",
        request.uri
    );
    HttpResponse::new(200, "text/html", body.into_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub summary: String,
}

/// Ordered message summaries for one accepted connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub session: u64,
    pub client: IpAddr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    pub entries: Vec<TranscriptEntry>,
}

/// Summary in the form `HTTP/1.1 302 Found (text/html)`.
pub fn response_summary(resp: &HttpResponse) -> String {
    match resp.content_type() {
        Some(ct) => format!("{} ({ct})", resp.status_line()),
        None => resp.status_line(),
    }
}

/// Loopback address used for every emulated host.
pub const LOOPBACK: Ipv4Addr = Ipv4Addr::LOCALHOST;
