//! UDP and TCP listeners around the pure emulator decisions.

use std::collections::BTreeMap;
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::task::JoinHandle;
use tokio::time::timeout;
use tracing::{debug, warn};

use super::{
    bad_request, handle_dns, handle_dns_clean, handle_http, origin_response, response_summary,
    CensorPolicy, Direction, DnsReply, HttpAction, SessionTranscript, TranscriptEntry, World,
};
use crate::http::{parse_response, read_request, RequestError};
use crate::model::ResolverSpec;

const UPSTREAM_TIMEOUT: Duration = Duration::from_secs(3);
const IDLE_TIMEOUT: Duration = Duration::from_secs(30);

/// Requests that reached the origin stub, in arrival order.
#[derive(Debug, Default)]
pub struct OriginLog {
    requests: Mutex<Vec<(String, String)>>,
}

impl OriginLog {
    fn record(&self, host: &str, uri: &str) {
        self.requests.lock().unwrap().push((host.to_string(), uri.to_string()));
    }

    pub fn count_for(&self, host: &str) -> usize {
        self.requests.lock().unwrap().iter().filter(|(h, _)| h == host).count()
    }

    pub fn all(&self) -> Vec<(String, String)> {
        self.requests.lock().unwrap().clone()
    }
}

#[derive(Default)]
struct Recorder {
    next_id: AtomicU64,
    sessions: Mutex<Vec<SessionTranscript>>,
}

impl Recorder {
    fn begin(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::SeqCst)
    }

    fn finish(&self, t: SessionTranscript) {
        self.sessions.lock().unwrap().push(t);
    }
}

struct Shared {
    policy: CensorPolicy,
    world: World,
    origin_addr: SocketAddr,
    origin_log: Arc<OriginLog>,
    recorder: Recorder,
}

/// A running emulator. Listeners stop when the handle is dropped.
pub struct EmulatorHandle {
    shared: Arc<Shared>,
    http_addr: SocketAddr,
    dns: BTreeMap<String, SocketAddr>,
    clean_dns: SocketAddr,
    tasks: Vec<JoinHandle<()>>,
}

impl Drop for EmulatorHandle {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl EmulatorHandle {
    /// Binds every listener on `bind` with OS-assigned ports.
    pub async fn start(policy: CensorPolicy, world: World, bind: IpAddr) -> io::Result<Self> {
        Self::start_on(policy, world, bind, 0, 0).await
    }

    /// Binds the middlebox HTTP listener on `http_port` and the first
    /// resolver identity on `dns_port`; everything else gets a free port.
    pub async fn start_on(
        policy: CensorPolicy,
        world: World,
        bind: IpAddr,
        http_port: u16,
        dns_port: u16,
    ) -> io::Result<Self> {
        let mut tasks = Vec::new();

        let origin_listener = TcpListener::bind((bind, 0)).await?;
        let origin_addr = origin_listener.local_addr()?;
        let origin_log = Arc::new(OriginLog::default());

        let shared = Arc::new(Shared {
            policy,
            world,
            origin_addr,
            origin_log: origin_log.clone(),
            recorder: Recorder::default(),
        });

        tasks.push(tokio::spawn(origin_loop(origin_listener, shared.clone())));

        let http_listener = TcpListener::bind((bind, http_port)).await?;
        let http_addr = http_listener.local_addr()?;
        tasks.push(tokio::spawn(middlebox_loop(http_listener, shared.clone())));

        let mut dns = BTreeMap::new();
        for (i, resolver) in shared.policy.resolver_map.iter().enumerate() {
            let port = if i == 0 { dns_port } else { 0 };
            let sock = UdpSocket::bind((bind, port)).await?;
            dns.insert(resolver.name.clone(), sock.local_addr()?);
            tasks.push(tokio::spawn(dns_loop(sock, shared.clone(), Some(resolver.clone()))));
        }
        let clean = UdpSocket::bind((bind, 0)).await?;
        let clean_dns = clean.local_addr()?;
        tasks.push(tokio::spawn(dns_loop(clean, shared.clone(), None)));

        Ok(EmulatorHandle { shared, http_addr, dns, clean_dns, tasks })
    }

    pub fn policy(&self) -> &CensorPolicy {
        &self.shared.policy
    }

    /// Middlebox listener; every emulated host is reached through it.
    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    /// Origin stub, bypassing the censor. This is the clean HTTP path.
    pub fn origin_addr(&self) -> SocketAddr {
        self.shared.origin_addr
    }

    pub fn dns_endpoint(&self, resolver: &str) -> Option<SocketAddr> {
        self.dns.get(resolver).copied()
    }

    /// Resolver socket with no censorship applied.
    pub fn clean_dns_endpoint(&self) -> SocketAddr {
        self.clean_dns
    }

    /// The policy's resolver identities, each pointed at its emulator socket.
    pub fn probe_resolvers(&self) -> Vec<ResolverSpec> {
        self.shared
            .policy
            .resolver_map
            .iter()
            .map(|r| r.clone().with_endpoint(self.dns.get(&r.name).copied()))
            .collect()
    }

    pub fn origin_log(&self) -> &OriginLog {
        &self.shared.origin_log
    }

    /// Completed sessions ordered by accept order.
    pub fn transcripts(&self) -> Vec<SessionTranscript> {
        let mut v = self.shared.recorder.sessions.lock().unwrap().clone();
        v.sort_by_key(|t| t.session);
        v
    }

    pub fn clear_transcripts(&self) {
        self.shared.recorder.sessions.lock().unwrap().clear();
    }
}

async fn dns_loop(sock: UdpSocket, shared: Arc<Shared>, identity: Option<ResolverSpec>) {
    let mut buf = vec![0u8; 4096];
    loop {
        let (n, peer) = match sock.recv_from(&mut buf).await {
            Ok(v) => v,
            Err(e) => {
                warn!("dns recv: {e}");
                continue;
            }
        };
        let query = &buf[..n];
        let reply = match &identity {
            Some(r) => handle_dns(&shared.policy, &shared.world, query, r),
            None => handle_dns_clean(&shared.world, query),
        };
        let bytes = match reply {
            DnsReply::Respond(b) => Some(b),
            DnsReply::Drop => None,
            DnsReply::Forward => match shared.world.upstream {
                Some(up) => forward_dns(up, query).await,
                None => None,
            },
        };
        if let Some(b) = bytes {
            if let Err(e) = sock.send_to(&b, peer).await {
                debug!("dns send to {peer}: {e}");
            }
        }
    }
}

async fn forward_dns(upstream: SocketAddr, query: &[u8]) -> Option<Vec<u8>> {
    let local: SocketAddr = if upstream.is_ipv4() {
        "0.0.0.0:0".parse().unwrap()
    } else {
        "[::]:0".parse().unwrap()
    };
    let sock = UdpSocket::bind(local).await.ok()?;
    sock.send_to(query, upstream).await.ok()?;
    let mut buf = vec![0u8; 4096];
    let (n, _) = timeout(UPSTREAM_TIMEOUT, sock.recv_from(&mut buf)).await.ok()?.ok()?;
    buf.truncate(n);
    Some(buf)
}

async fn origin_loop(listener: TcpListener, shared: Arc<Shared>) {
    loop {
        let Ok((mut stream, _)) = listener.accept().await else { continue };
        let shared = shared.clone();
        tokio::spawn(async move {
            let response = match timeout(IDLE_TIMEOUT, read_request(&mut stream)).await {
                Ok(Ok((req, _))) => {
                    shared
                        .origin_log
                        .record(&req.host().unwrap_or_default(), &req.uri);
                    origin_response(&shared.world, &shared.policy.keyword_portal_host, &req)
                }
                Ok(Err(RequestError::Unparseable(_))) => bad_request(),
                _ => return,
            };
            let _ = stream.write_all(&response.encode()).await;
            let _ = stream.shutdown().await;
        });
    }
}

async fn middlebox_loop(listener: TcpListener, shared: Arc<Shared>) {
    loop {
        let Ok((stream, peer)) = listener.accept().await else { continue };
        let shared = shared.clone();
        let session = shared.recorder.begin();
        tokio::spawn(async move {
            let transcript = middlebox_session(stream, peer.ip(), session, &shared).await;
            shared.recorder.finish(transcript);
        });
    }
}

async fn middlebox_session(
    mut stream: TcpStream,
    client: IpAddr,
    session: u64,
    shared: &Shared,
) -> SessionTranscript {
    let mut t = SessionTranscript { session, client, host: None, entries: Vec::new() };
    let push = |t: &mut SessionTranscript, direction, summary: String| {
        t.entries.push(TranscriptEntry { direction, summary });
    };

    let (request, raw) = match timeout(IDLE_TIMEOUT, read_request(&mut stream)).await {
        Ok(Ok(v)) => v,
        Ok(Err(RequestError::Unparseable(why))) => {
            push(&mut t, Direction::ClientToServer, format!("<unparseable: {why}>"));
            let resp = bad_request();
            push(&mut t, Direction::ServerToClient, response_summary(&resp));
            let _ = stream.write_all(&resp.encode()).await;
            let _ = stream.shutdown().await;
            return t;
        }
        _ => {
            push(&mut t, Direction::ClientToServer, "<no request>".into());
            return t;
        }
    };
    t.host = request.host();
    push(&mut t, Direction::ClientToServer, request.request_line());

    match handle_http(&shared.policy, &shared.world, &request, client) {
        HttpAction::Respond(resp, _) => {
            push(&mut t, Direction::ServerToClient, response_summary(&resp));
            let _ = stream.write_all(&resp.encode()).await;
            let _ = stream.shutdown().await;
        }
        HttpAction::Blackhole => {
            // hold the connection open until the client gives up
            let mut sink = [0u8; 1024];
            let _ = timeout(IDLE_TIMEOUT, async {
                while matches!(stream.read(&mut sink).await, Ok(n) if n > 0) {}
            })
            .await;
        }
        HttpAction::Forward => match relay_to_origin(shared.origin_addr, &raw).await {
            Ok(bytes) => {
                let summary = parse_response(&bytes)
                    .map(|r| response_summary(&r))
                    .unwrap_or_else(|_| "<unparseable origin response>".into());
                push(&mut t, Direction::ServerToClient, summary);
                let _ = stream.write_all(&bytes).await;
                let _ = stream.shutdown().await;
            }
            Err(e) => {
                warn!("origin relay failed: {e}");
                push(&mut t, Direction::ServerToClient, "<origin unreachable>".into());
            }
        },
    }
    t
}

async fn relay_to_origin(origin: SocketAddr, raw: &[u8]) -> io::Result<Vec<u8>> {
    let mut up = TcpStream::connect(origin).await?;
    up.write_all(raw).await?;
    let mut out = Vec::new();
    timeout(IDLE_TIMEOUT, up.read_to_end(&mut out))
        .await
        .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "origin timeout"))??;
    Ok(out)
}
