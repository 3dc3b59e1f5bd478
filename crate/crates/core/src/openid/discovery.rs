//! Identifier normalization and provider discovery.
//!
//! Yadis comes first: the identifier page may be an XRDS document, or
//! point at one through an `X-XRDS-Location` header or `<meta>` tag. When
//! that yields nothing usable, the `<link rel>` tags in the page head are
//! used instead.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use super::fetch::{Fetcher, HttpRequest, HttpResponse};
use super::message::{is_absolute_http, ProtocolVersion};

pub const XRDS_CONTENT_TYPE: &str = "application/xrds+xml";
pub const TYPE_SIGNON_2_0: &str = "http://specs.openid.net/auth/2.0/signon";
pub const TYPE_SIGNON_1_1: &str = "http://openid.net/signon/1.1";
pub const TYPE_SIGNON_1_0: &str = "http://openid.net/signon/1.0";

const XRD_NS: &str = "xri://$xrd*($v*2.0)";
const OPENID1_NS: &str = "http://openid.net/xmlns/1.0";
const MAX_REDIRECTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiscoveryError {
    #[error("Expected an OpenID URL.")]
    Empty,
    #[error("unsupported identifier `{0}`: XRI identifiers are not supported")]
    Xri(String),
    #[error("invalid identifier `{0}`")]
    InvalidUrl(String),
    #[error("fetching {url} failed: {reason}")]
    Fetch { url: String, reason: String },
    #[error("more than {MAX_REDIRECTS} redirects from {0}")]
    TooManyRedirects(String),
    #[error("malformed XRDS document: {0}")]
    Xrds(String),
    #[error("no OpenID endpoint found for {0}")]
    NoEndpoints(String),
}

/// User input and the URL it normalizes to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimedIdentifier {
    pub raw: String,
    pub normalized: String,
}

impl fmt::Display for ClaimedIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.normalized)
    }
}

pub fn normalize(raw: &str) -> Result<ClaimedIdentifier, DiscoveryError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(DiscoveryError::Empty);
    }
    let lower = trimmed.to_ascii_lowercase();
    if lower.starts_with("xri://") || trimmed.starts_with(['=', '@', '+', '$', '!', '(']) {
        return Err(DiscoveryError::Xri(trimmed.to_string()));
    }
    let with_scheme = if lower.starts_with("http://") || lower.starts_with("https://") {
        trimmed.to_string()
    } else if trimmed.contains("://") {
        return Err(DiscoveryError::InvalidUrl(trimmed.to_string()));
    } else {
        format!("http://{trimmed}")
    };
    let mut url = Url::parse(&with_scheme).map_err(|_| DiscoveryError::InvalidUrl(trimmed.to_string()))?;
    if !url.has_host() {
        return Err(DiscoveryError::InvalidUrl(trimmed.to_string()));
    }
    url.set_fragment(None);
    Ok(ClaimedIdentifier {
        raw: raw.to_string(),
        normalized: url.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointSource {
    Xrds,
    Html,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpEndpoint {
    pub endpoint_url: String,
    pub version: ProtocolVersion,
    /// The identifier the user claims; the final URL after redirects.
    pub claimed_id: String,
    /// Provider-local identifier, when the claimed one delegates.
    pub local_id: Option<String>,
    /// Lower sorts first. Absent priorities are `u32::MAX`.
    pub priority: u32,
    pub source: EndpointSource,
}

impl OpEndpoint {
    /// The identifier the provider is asked to vouch for.
    pub fn op_local_id(&self) -> &str {
        self.local_id.as_deref().unwrap_or(&self.claimed_id)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct XrdsService {
    pub types: Vec<String>,
    /// URIs with their own priority, in document order.
    pub uris: Vec<(String, Option<u32>)>,
    pub local_id: Option<String>,
    pub delegate: Option<String>,
    pub priority: Option<u32>,
}

impl XrdsService {
    fn version(&self) -> Option<ProtocolVersion> {
        let has = |t: &str| self.types.iter().any(|x| x == t);
        if has(TYPE_SIGNON_2_0) {
            Some(ProtocolVersion::V2_0)
        } else if has(TYPE_SIGNON_1_1) || has(TYPE_SIGNON_1_0) {
            Some(ProtocolVersion::V1_1)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct XrdsDocument {
    pub services: Vec<XrdsService>,
}

fn parse_priority(node: roxmltree::Node) -> Option<u32> {
    node.attribute("priority").and_then(|p| p.trim().parse().ok())
}

pub fn parse_xrds(bytes: &[u8]) -> Result<XrdsDocument, DiscoveryError> {
    let text = std::str::from_utf8(bytes).map_err(|_| DiscoveryError::Xrds("not UTF-8".into()))?;
    let doc = roxmltree::Document::parse(text).map_err(|e| DiscoveryError::Xrds(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "XRDS" {
        return Err(DiscoveryError::Xrds("root element is not XRDS".into()));
    }
    // Only the final XRD describes the resolved identifier.
    let xrd = root
        .children()
        .filter(|n| n.is_element() && n.tag_name().name() == "XRD")
        .last()
        .ok_or_else(|| DiscoveryError::Xrds("no XRD element".into()))?;

    let mut services = Vec::new();
    for svc in xrd.children().filter(|n| n.has_tag_name((XRD_NS, "Service"))) {
        let mut service = XrdsService {
            priority: parse_priority(svc),
            ..Default::default()
        };
        for child in svc.children().filter(|n| n.is_element()) {
            let text = child.text().unwrap_or("").trim().to_string();
            match (child.tag_name().namespace(), child.tag_name().name()) {
                (Some(XRD_NS), "Type") => service.types.push(text),
                (Some(XRD_NS), "URI") => service.uris.push((text, parse_priority(child))),
                (Some(XRD_NS), "LocalID") => service.local_id = Some(text),
                (Some(OPENID1_NS), "Delegate") => service.delegate = Some(text),
                _ => {}
            }
        }
        services.push(service);
    }
    Ok(XrdsDocument { services })
}

impl XrdsDocument {
    /// Sign-on endpoints in priority order, then document order.
    pub fn openid_endpoints(&self, claimed_id: &str) -> Vec<OpEndpoint> {
        let mut ranked = Vec::new();
        for (si, svc) in self.services.iter().enumerate() {
            let Some(version) = svc.version() else { continue };
            let local_id = match version {
                ProtocolVersion::V2_0 => svc.local_id.clone(),
                ProtocolVersion::V1_1 => svc.delegate.clone().or_else(|| svc.local_id.clone()),
            };
            for (ui, (uri, uri_priority)) in svc.uris.iter().enumerate() {
                if !is_absolute_http(uri) {
                    continue;
                }
                let key = (
                    svc.priority.unwrap_or(u32::MAX),
                    uri_priority.unwrap_or(u32::MAX),
                    si,
                    ui,
                );
                ranked.push((
                    key,
                    OpEndpoint {
                        endpoint_url: uri.clone(),
                        version,
                        claimed_id: claimed_id.to_string(),
                        local_id: local_id.clone(),
                        priority: svc.priority.unwrap_or(u32::MAX),
                        source: EndpointSource::Xrds,
                    },
                ));
            }
        }
        ranked.sort_by_key(|(k, _)| *k);
        ranked.into_iter().map(|(_, e)| e).collect()
    }
}

/// A start or empty-element tag seen by the scanner.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Tag {
    name: String,
    attrs: Vec<(String, String)>,
}

impl Tag {
    fn attr(&self, name: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }
}

fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

/// Scans tags up to the end of `<head>`. Stops quietly at anything it
/// cannot make sense of.
fn scan_head(html: &str) -> Vec<Tag> {
    let bytes = html.as_bytes();
    let mut tags = Vec::new();
    let mut i = 0;
    while let Some(off) = html[i..].find('<') {
        i += off + 1;
        if html[i..].starts_with("!--") {
            match html[i..].find("-->") {
                Some(end) => {
                    i += end + 3;
                    continue;
                }
                None => break,
            }
        }
        let closing = bytes.get(i) == Some(&b'/');
        if closing {
            i += 1;
        }
        let name_len = html[i..]
            .bytes()
            .take_while(|b| b.is_ascii_alphanumeric())
            .count();
        if name_len == 0 {
            continue;
        }
        let name = html[i..i + name_len].to_ascii_lowercase();
        i += name_len;
        if closing {
            if name == "head" {
                break;
            }
            continue;
        }
        if name == "body" {
            break;
        }
        let mut attrs = Vec::new();
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            match bytes.get(i) {
                None => return tags,
                Some(b'>') => {
                    i += 1;
                    break;
                }
                Some(b'/') => {
                    i += 1;
                    continue;
                }
                _ => {}
            }
            let key_len = html[i..]
                .bytes()
                .take_while(|b| !b.is_ascii_whitespace() && !matches!(b, b'=' | b'>' | b'/'))
                .count();
            let key = html[i..i + key_len].to_ascii_lowercase();
            i += key_len;
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            let mut value = String::new();
            if bytes.get(i) == Some(&b'=') {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                match bytes.get(i) {
                    Some(&q) if q == b'"' || q == b'\'' => match html[i + 1..].find(q as char) {
                        Some(end) => {
                            value = html[i + 1..i + 1 + end].to_string();
                            i += end + 2;
                        }
                        None => return tags,
                    },
                    Some(_) => {
                        let len = html[i..]
                            .bytes()
                            .take_while(|b| !b.is_ascii_whitespace() && *b != b'>')
                            .count();
                        value = html[i..i + len].to_string();
                        i += len;
                    }
                    None => return tags,
                }
            }
            if key_len == 0 {
                // stray character; skip it to guarantee progress
                i += 1;
                continue;
            }
            attrs.push((key, decode_entities(&value)));
        }
        tags.push(Tag { name, attrs });
    }
    tags
}

fn first_link<'a>(tags: &'a [Tag], rel: &str) -> Option<&'a str> {
    tags.iter()
        .filter(|t| t.name == "link")
        .find(|t| {
            t.attr("rel")
                .is_some_and(|r| r.split_ascii_whitespace().any(|x| x.eq_ignore_ascii_case(rel)))
        })
        .and_then(|t| t.attr("href"))
        .map(str::trim)
}

/// Endpoints from `<link rel>` tags, 2.0 before 1.1.
pub fn html_discover(html: &[u8], claimed_id: &str) -> Vec<OpEndpoint> {
    let text = String::from_utf8_lossy(html);
    let tags = scan_head(&text);
    let mut out = Vec::new();
    let pairs = [
        (ProtocolVersion::V2_0, "openid2.provider", "openid2.local_id"),
        (ProtocolVersion::V1_1, "openid.server", "openid.delegate"),
    ];
    for (rank, (version, provider, local)) in pairs.into_iter().enumerate() {
        if let Some(href) = first_link(&tags, provider).filter(|h| is_absolute_http(h)) {
            out.push(OpEndpoint {
                endpoint_url: href.to_string(),
                version,
                claimed_id: claimed_id.to_string(),
                local_id: first_link(&tags, local).map(str::to_string),
                priority: rank as u32,
                source: EndpointSource::Html,
            });
        }
    }
    out
}

/// Where the response says its XRDS document lives, if anywhere.
pub fn yadis_location(resp: &HttpResponse) -> Option<String> {
    if let Some(loc) = resp.header("x-xrds-location") {
        return Some(loc.trim().to_string());
    }
    let is_html = resp
        .content_type()
        .is_none_or(|ct| ct == "text/html" || ct == "application/xhtml+xml");
    if !is_html {
        return None;
    }
    let text = String::from_utf8_lossy(&resp.body);
    scan_head(&text)
        .into_iter()
        .filter(|t| t.name == "meta")
        .find(|t| t.attr("http-equiv").is_some_and(|h| h.eq_ignore_ascii_case("x-xrds-location")))
        .and_then(|t| t.attr("content").map(|c| c.trim().to_string()))
}

fn is_xrds(resp: &HttpResponse) -> bool {
    resp.content_type().as_deref() == Some(XRDS_CONTENT_TYPE)
}

/// GETs `url`, following redirects. Returns the final URL and response.
pub async fn fetch_following(
    fetcher: &dyn Fetcher,
    url: &str,
) -> Result<(String, HttpResponse), DiscoveryError> {
    let mut current = url.to_string();
    for _ in 0..=MAX_REDIRECTS {
        let req = HttpRequest::get(&current)
            .with_header("accept", "application/xrds+xml, text/html;q=0.9, */*;q=0.1");
        let resp = fetcher.fetch(req).await.map_err(|e| DiscoveryError::Fetch {
            url: current.clone(),
            reason: e.0,
        })?;
        if resp.is_redirect() {
            let location = resp.header("location").ok_or_else(|| DiscoveryError::Fetch {
                url: current.clone(),
                reason: "redirect without Location".into(),
            })?;
            let next = Url::parse(&current)
                .and_then(|base| base.join(location))
                .map_err(|_| DiscoveryError::Fetch {
                    url: current.clone(),
                    reason: format!("bad redirect target `{location}`"),
                })?;
            current = next.to_string();
            continue;
        }
        if !(200..300).contains(&resp.status) {
            return Err(DiscoveryError::Fetch {
                url: current,
                reason: format!("HTTP status {}", resp.status),
            });
        }
        return Ok((current, resp));
    }
    Err(DiscoveryError::TooManyRedirects(url.to_string()))
}

/// Follows the Yadis pointer in `resp`, if any, to an XRDS document.
/// `Ok(None)` means the response carries no Yadis pointer.
pub async fn yadis_discover(
    resp: &HttpResponse,
    fetcher: &dyn Fetcher,
) -> Result<Option<XrdsDocument>, DiscoveryError> {
    if is_xrds(resp) {
        return parse_xrds(&resp.body).map(Some);
    }
    let Some(location) = yadis_location(resp) else {
        return Ok(None);
    };
    let (_, xrds) = fetch_following(fetcher, &location).await?;
    parse_xrds(&xrds.body).map(Some)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discovered {
    /// Final URL after redirects.
    pub claimed_id: String,
    pub endpoints: Vec<OpEndpoint>,
}

/// Resolves `id` to its providers, Yadis first, HTML as fallback.
pub async fn discover(id: &ClaimedIdentifier, fetcher: &dyn Fetcher) -> Result<Discovered, DiscoveryError> {
    let (final_url, resp) = fetch_following(fetcher, &id.normalized).await?;
    let claimed_id = match Url::parse(&final_url) {
        Ok(mut u) => {
            u.set_fragment(None);
            u.to_string()
        }
        Err(_) => final_url.clone(),
    };

    let mut endpoints = match yadis_discover(&resp, fetcher).await {
        Ok(Some(doc)) => doc.openid_endpoints(&claimed_id),
        Ok(None) => Vec::new(),
        Err(e) => {
            tracing::debug!(identifier = %id, error = %e, "yadis failed, trying HTML");
            Vec::new()
        }
    };
    if endpoints.is_empty() && !is_xrds(&resp) {
        endpoints = html_discover(&resp.body, &claimed_id);
    }
    if endpoints.is_empty() {
        return Err(DiscoveryError::NoEndpoints(id.normalized.clone()));
    }
    Ok(Discovered {
        claimed_id,
        endpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::openid::fetch::FetchError;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize("ipsacademy.org").unwrap().normalized, "http://ipsacademy.org/");
        assert_eq!(
            normalize("https://User.example.com/path#frag").unwrap().normalized,
            "https://user.example.com/path"
        );
        assert_eq!(normalize("  example.com:8081/x?y=1 ").unwrap().normalized, "http://example.com:8081/x?y=1");
        assert!(matches!(normalize("=example"), Err(DiscoveryError::Xri(_))));
        assert!(matches!(normalize("xri://=example"), Err(DiscoveryError::Xri(_))));
        assert!(matches!(normalize("@corp"), Err(DiscoveryError::Xri(_))));
        assert_eq!(normalize("   ").unwrap_err().to_string(), "Expected an OpenID URL.");
        assert!(matches!(normalize("ftp://x.org/"), Err(DiscoveryError::InvalidUrl(_))));
    }

    #[test]
    fn normalization_is_idempotent() {
        for raw in ["a.org", "HTTP://A.ORG", "https://a.org:443/p#f", "a.org/~u/x?q=%41"] {
            let once = normalize(raw).unwrap().normalized;
            assert_eq!(normalize(&once).unwrap().normalized, once, "{raw}");
        }
    }

    const XRDS: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<xrds:XRDS xmlns:xrds="xri://$xrds" xmlns="xri://$xrd*($v*2.0)" xmlns:openid="http://openid.net/xmlns/1.0">
  <XRD>
    <Service priority="10">
      <Type>http://openid.net/signon/1.1</Type>
      <URI>http://op.example/v1</URI>
      <openid:Delegate>http://alice.op.example/</openid:Delegate>
    </Service>
    <Service priority="5">
      <Type>http://specs.openid.net/auth/2.0/signon</Type>
      <URI>http://op.example/server</URI>
      <LocalID>http://op.example/id/alice</LocalID>
    </Service>
    <Service>
      <Type>http://example.com/unrelated</Type>
      <URI>http://elsewhere/</URI>
    </Service>
  </XRD>
</xrds:XRDS>"#;

    #[test]
    fn xrds_priority_order() {
        let doc = parse_xrds(XRDS.as_bytes()).unwrap();
        assert_eq!(doc.services.len(), 3);
        let eps = doc.openid_endpoints("http://alice.example/");
        assert_eq!(eps.len(), 2);
        assert_eq!(eps[0].priority, 5);
        assert_eq!(eps[0].version, ProtocolVersion::V2_0);
        assert_eq!(eps[0].local_id.as_deref(), Some("http://op.example/id/alice"));
        assert_eq!(eps[1].priority, 10);
        assert_eq!(eps[1].local_id.as_deref(), Some("http://alice.op.example/"));
    }

    #[test]
    fn malformed_xrds() {
        assert!(matches!(parse_xrds(b"<XRDS><XRD>"), Err(DiscoveryError::Xrds(_))));
        assert!(matches!(parse_xrds(b"<html/>"), Err(DiscoveryError::Xrds(_))));
    }

    #[test]
    fn html_links() {
        let page = br#"<html><head><title>x</title>
            <link href="http://op.example/v1" rel="openid.server">
            <LINK REL='openid2.provider' HREF='http://op.example/server?a=1&amp;b=2'/>
            <link rel="openid2.local_id" href="http://op.example/id/bob">
            </head><body><link rel="openid2.provider" href="http://evil/"></body></html>"#;
        let eps = html_discover(page, "http://bob.example/");
        assert_eq!(eps.len(), 2);
        assert_eq!(eps[0].version, ProtocolVersion::V2_0);
        assert_eq!(eps[0].endpoint_url, "http://op.example/server?a=1&b=2");
        assert_eq!(eps[0].local_id.as_deref(), Some("http://op.example/id/bob"));
        assert_eq!(eps[1].version, ProtocolVersion::V1_1);
        assert_eq!(eps[1].local_id, None);
        assert!(html_discover(b"", "http://x/").is_empty());
    }

    #[test]
    fn html_tolerates_junk() {
        let page = b"<head><!-- <link rel=openid2.provider href=http://commented/> -->\
            <link rel=openid2.provider href=http://op.example/s><link rel=\"openid.server";
        let eps = html_discover(page, "http://x/");
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].endpoint_url, "http://op.example/s");
        assert!(html_discover(b"<head><link rel=openid2.provider href=/relative>", "http://x/").is_empty());
    }

    #[test]
    fn meta_pointer() {
        let resp = HttpResponse::new(
            200,
            r#"<html><head><meta http-equiv="X-XRDS-Location" content="http://a/xrds"></head></html>"#,
        )
        .with_header("Content-Type", "text/html; charset=utf-8");
        assert_eq!(yadis_location(&resp).as_deref(), Some("http://a/xrds"));
        let plain = HttpResponse::new(200, "<html><head></head></html>");
        assert_eq!(yadis_location(&plain), None);
    }

    fn site(req: HttpRequest) -> Result<HttpResponse, FetchError> {
        let html = r#"<html><head><link rel="openid2.provider" href="http://op.example/html"></head></html>"#;
        match req.url.as_str() {
            "http://alice.example/" => Ok(HttpResponse::new(200, html)
                .with_header("content-type", "text/html")
                .with_header("X-XRDS-Location", "http://alice.example/xrds")),
            "http://alice.example/xrds" => {
                Ok(HttpResponse::new(200, XRDS).with_header("content-type", XRDS_CONTENT_TYPE))
            }
            "http://moved.example/" => {
                Ok(HttpResponse::new(302, "").with_header("location", "/home"))
            }
            "http://moved.example/home" => Ok(HttpResponse::new(200, html)),
            "http://loop.example/" => Ok(HttpResponse::new(301, "").with_header("location", "/")),
            "http://badxrds.example/" => Ok(HttpResponse::new(200, html)
                .with_header("X-XRDS-Location", "http://badxrds.example/x")),
            "http://badxrds.example/x" => Ok(HttpResponse::new(200, "<nope")),
            _ => Err(FetchError("connection refused".into())),
        }
    }

    #[tokio::test]
    async fn discover_prefers_xrds() {
        let d = discover(&normalize("alice.example").unwrap(), &site).await.unwrap();
        assert_eq!(d.endpoints[0].endpoint_url, "http://op.example/server");
        assert_eq!(d.endpoints[0].source, EndpointSource::Xrds);
        assert!(d.endpoints.iter().all(|e| e.source == EndpointSource::Xrds));
    }

    #[tokio::test]
    async fn discover_follows_redirects_and_falls_back() {
        let d = discover(&normalize("moved.example").unwrap(), &site).await.unwrap();
        assert_eq!(d.claimed_id, "http://moved.example/home");
        assert_eq!(d.endpoints[0].claimed_id, "http://moved.example/home");
        assert_eq!(d.endpoints[0].endpoint_url, "http://op.example/html");

        let d = discover(&normalize("badxrds.example").unwrap(), &site).await.unwrap();
        assert_eq!(d.endpoints[0].source, EndpointSource::Html);
    }

    #[tokio::test]
    async fn discover_failures() {
        assert!(matches!(
            discover(&normalize("nowhere.invalid").unwrap(), &site).await,
            Err(DiscoveryError::Fetch { .. })
        ));
        assert!(matches!(
            discover(&normalize("loop.example").unwrap(), &site).await,
            Err(DiscoveryError::TooManyRedirects(_))
        ));
    }
}
