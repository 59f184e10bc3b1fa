//! HTTP/1.1 framing shared by the probe (client side) and the emulator
//! (server side). One request per connection; `Connection: close` always.

use std::net::SocketAddr;
use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::time::timeout;

const MAX_HEAD: usize = 64 * 1024;
const MAX_BODY: usize = 4 * 1024 * 1024;
const MAX_HEADERS: usize = 64;

pub const USER_AGENT: &str = "censorlab/0.1";

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("connection refused")]
    Refused,
    #[error("connect timed out")]
    ConnectTimeout,
    #[error("host unreachable: {0}")]
    Unreachable(std::io::Error),
    #[error("timed out waiting for response")]
    ResponseTimeout,
    #[error("connection reset: {0}")]
    Reset(std::io::Error),
    #[error("malformed response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub method: String,
    pub uri: String,
    pub headers: Vec<(String, String)>,
}

impl HttpRequest {
    pub fn get(host: &str, uri: &str) -> Self {
        HttpRequest {
            method: "GET".into(),
            uri: uri.into(),
            headers: vec![
                ("Host".into(), host.into()),
                ("User-Agent".into(), USER_AGENT.into()),
                ("Accept".into(), "*/*".into()),
                ("Connection".into(), "close".into()),
            ],
        }
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    /// Host header, lowercased, without a port.
    pub fn host(&self) -> Option<String> {
        let h = self.header("host")?.trim();
        let h = match h.rsplit_once(':') {
            Some((name, port)) if port.bytes().all(|b| b.is_ascii_digit()) => name,
            _ => h,
        };
        let h = h.strip_suffix('.').unwrap_or(h);
        (!h.is_empty()).then(|| h.to_ascii_lowercase())
    }

    pub fn request_line(&self) -> String {
        format!("{} {} HTTP/1.1", self.method, self.uri)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.request_line().into_bytes();
        out.extend_from_slice(b"\r\n");
        for (k, v) in &self.headers {
            out.extend_from_slice(format!("{k}: {v}\r\n").as_bytes());
        }
        out.extend_from_slice(b"\r\n");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub reason: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    /// Response with `Content-Type`, `Content-Length` and `Connection: close`.
    pub fn new(status: u16, content_type: &str, body: Vec<u8>) -> Self {
        HttpResponse {
            status,
            reason: reason_phrase(status).into(),
            headers: vec![
                ("Content-Type".into(), content_type.into()),
                ("Content-Length".into(), body.len().to_string()),
                ("Connection".into(), "close".into()),
            ],
            body,
        }
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.insert(0, (name.into(), value.into()));
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn content_type(&self) -> Option<&str> {
        self.header("content-type")
            .map(|v| v.split(';').next().unwrap_or(v).trim())
    }

    pub fn status_line(&self) -> String {
        format!("HTTP/1.1 {} {}", self.status, self.reason)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.status_line().into_bytes();
        out.extend_from_slice(b"\r\n");
        for (k, v) in &self.headers {
            out.extend_from_slice(format!("{k}: {v}\r\n").as_bytes());
        }
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(&self.body);
        out
    }
}

fn find_header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        203 => "Non-Authoritative Information",
        301 => "Moved Permanently",
        302 => "Found",
        400 => "Bad Request",
        403 => "Forbidden",
        404 => "Not Found",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        _ => "Unknown",
    }
}

fn headers_from(parsed: &[httparse::Header<'_>]) -> Vec<(String, String)> {
    parsed
        .iter()
        .map(|h| (h.name.to_string(), String::from_utf8_lossy(h.value).into_owned()))
        .collect()
}

/// Parses a complete response buffer (head plus body up to EOF).
pub fn parse_response(buf: &[u8]) -> Result<HttpResponse, FetchError> {
    match parse_response_partial(buf)? {
        Some((resp, _)) => Ok(resp),
        None => Err(FetchError::Malformed("incomplete response".into())),
    }
}

/// Returns the response and whether its body is known to be complete, or
/// `None` when the head has not fully arrived yet.
fn parse_response_partial(buf: &[u8]) -> Result<Option<(HttpResponse, bool)>, FetchError> {
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut resp = httparse::Response::new(&mut headers);
    let head_len = match resp.parse(buf) {
        Ok(httparse::Status::Complete(n)) => n,
        Ok(httparse::Status::Partial) => return Ok(None),
        Err(e) => return Err(FetchError::Malformed(e.to_string())),
    };
    let status = resp.code.unwrap_or(0);
    let reason = resp.reason.unwrap_or("").to_string();
    let headers = headers_from(resp.headers);
    let rest = &buf[head_len..];

    let chunked = find_header(&headers, "transfer-encoding")
        .is_some_and(|v| v.to_ascii_lowercase().contains("chunked"));
    let (body, complete) = if chunked {
        dechunk(rest)
    } else if let Some(len) = find_header(&headers, "content-length").and_then(|v| v.trim().parse::<usize>().ok()) {
        (rest[..rest.len().min(len)].to_vec(), rest.len() >= len)
    } else if status == 204 || status == 304 || (100..200).contains(&status) {
        (Vec::new(), true)
    } else {
        (rest.to_vec(), false)
    };
    Ok(Some((
        HttpResponse { status, reason, headers, body },
        complete,
    )))
}

fn dechunk(mut data: &[u8]) -> (Vec<u8>, bool) {
    let mut out = Vec::new();
    loop {
        let Some(eol) = data.windows(2).position(|w| w == b"\r\n") else {
            return (out, false);
        };
        let size_text = String::from_utf8_lossy(&data[..eol]);
        let size_text = size_text.split(';').next().unwrap_or("").trim();
        let Ok(size) = usize::from_str_radix(size_text, 16) else {
            return (out, false);
        };
        data = &data[eol + 2..];
        if size == 0 {
            return (out, true);
        }
        if data.len() < size {
            out.extend_from_slice(data);
            return (out, false);
        }
        out.extend_from_slice(&data[..size]);
        data = data.get(size + 2..).unwrap_or(&[]);
    }
}

/// Opens a TCP connection, mapping failures onto probe-level categories.
pub async fn connect(addr: SocketAddr, limit: Duration) -> Result<TcpStream, FetchError> {
    match timeout(limit, TcpStream::connect(addr)).await {
        Err(_) => Err(FetchError::ConnectTimeout),
        Ok(Ok(s)) => Ok(s),
        Ok(Err(e)) if e.kind() == std::io::ErrorKind::ConnectionRefused => Err(FetchError::Refused),
        Ok(Err(e)) if e.kind() == std::io::ErrorKind::TimedOut => Err(FetchError::ConnectTimeout),
        Ok(Err(e)) => Err(FetchError::Unreachable(e)),
    }
}

/// Sends one GET and reads a single response. Redirects are not followed.
pub async fn get(
    addr: SocketAddr,
    host: &str,
    uri: &str,
    connect_limit: Duration,
    response_limit: Duration,
) -> Result<HttpResponse, FetchError> {
    let mut stream = connect(addr, connect_limit).await?;
    let request = HttpRequest::get(host, uri).encode();
    timeout(response_limit, async {
        stream.write_all(&request).await.map_err(FetchError::Reset)?;
        read_response(&mut stream).await
    })
    .await
    .map_err(|_| FetchError::ResponseTimeout)?
}

async fn read_response<R: AsyncRead + Unpin>(stream: &mut R) -> Result<HttpResponse, FetchError> {
    let mut buf = Vec::with_capacity(8192);
    let mut chunk = [0u8; 8192];
    loop {
        let n = match stream.read(&mut chunk).await {
            Ok(n) => n,
            Err(e) if buf.is_empty() => return Err(FetchError::Reset(e)),
            // peer reset after sending data: keep what arrived
            Err(_) => 0,
        };
        if n == 0 {
            return match parse_response_partial(&buf)? {
                Some((resp, _)) => Ok(resp),
                None if buf.is_empty() => Err(FetchError::Reset(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "connection closed without a response",
                ))),
                None => Err(FetchError::Malformed("truncated response head".into())),
            };
        }
        buf.extend_from_slice(&chunk[..n]);
        if buf.len() > MAX_HEAD + MAX_BODY {
            return parse_response(&buf);
        }
        if let Some((resp, true)) = parse_response_partial(&buf)? {
            return Ok(resp);
        }
    }
}

#[derive(Debug, Error)]
pub enum RequestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("connection closed before a request arrived")]
    Closed,
    #[error("unparseable request: {0}")]
    Unparseable(String),
}

/// Reads one request head (and a Content-Length body, if any). Returns the
/// parsed request and the exact bytes consumed.
pub async fn read_request<R: AsyncRead + Unpin>(
    stream: &mut R,
) -> Result<(HttpRequest, Vec<u8>), RequestError> {
    let mut buf = Vec::with_capacity(2048);
    let mut chunk = [0u8; 4096];
    loop {
        let n = stream.read(&mut chunk).await?;
        if n == 0 {
            return Err(if buf.is_empty() {
                RequestError::Closed
            } else {
                RequestError::Unparseable("truncated request".into())
            });
        }
        buf.extend_from_slice(&chunk[..n]);
        let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
        let mut req = httparse::Request::new(&mut headers);
        match req.parse(&buf) {
            Ok(httparse::Status::Complete(head_len)) => {
                let parsed = HttpRequest {
                    method: req.method.unwrap_or("").to_string(),
                    uri: req.path.unwrap_or("").to_string(),
                    headers: headers_from(req.headers),
                };
                let body_len = parsed
                    .header("content-length")
                    .and_then(|v| v.trim().parse::<usize>().ok())
                    .unwrap_or(0)
                    .min(MAX_BODY);
                while buf.len() < head_len + body_len {
                    let n = stream.read(&mut chunk).await?;
                    if n == 0 {
                        break;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                }
                return Ok((parsed, buf));
            }
            Ok(httparse::Status::Partial) if buf.len() < MAX_HEAD => continue,
            Ok(httparse::Status::Partial) => {
                return Err(RequestError::Unparseable("request head too large".into()))
            }
            Err(e) => return Err(RequestError::Unparseable(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_encoding_carries_host() {
        let r = HttpRequest::get("youtube.com", "/");
        let text = String::from_utf8(r.encode()).unwrap();
        assert!(text.starts_with("GET / HTTP/1.1\r\nHost: youtube.com\r\n"));
        assert!(text.ends_with("\r\n\r\n"));
    }

    #[test]
    fn host_strips_port_and_case() {
        let mut r = HttpRequest::get("WWW.Example.com:8080", "/");
        assert_eq!(r.host().as_deref(), Some("www.example.com"));
        r.headers.retain(|(k, _)| k != "Host");
        assert_eq!(r.host(), None);
    }

    #[test]
    fn response_round_trip() {
        let resp = HttpResponse::new(302, "text/html", b"moved".to_vec())
            .with_header("Location", "http://10.16.6.41/redirect.php");
        let parsed = parse_response(&resp.encode()).unwrap();
        assert_eq!(parsed, resp);
        assert_eq!(parsed.status_line(), "HTTP/1.1 302 Found");
    }

    #[test]
    fn chunked_body_is_decoded() {
        let raw = b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n5\r\nhello\r\n6\r\n world\r\n0\r\n\r\n";
        let parsed = parse_response(raw).unwrap();
        assert_eq!(parsed.body, b"hello world");
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(parse_response(b"NOT HTTP AT ALL\r\n\r\n"), Err(FetchError::Malformed(_))));
    }

    #[tokio::test]
    async fn reads_request_head() {
        let raw = b"GET /x?y=1 HTTP/1.1\r\nHost: a.com\r\n\r\n".to_vec();
        let mut cursor = std::io::Cursor::new(raw.clone());
        let (req, bytes) = read_request(&mut cursor).await.unwrap();
        assert_eq!(req.uri, "/x?y=1");
        assert_eq!(req.host().as_deref(), Some("a.com"));
        assert_eq!(bytes, raw);
        let mut bad = std::io::Cursor::new(b"\x00\x01garbage\r\n\r\n".to_vec());
        assert!(matches!(read_request(&mut bad).await, Err(RequestError::Unparseable(_))));
    }
}
