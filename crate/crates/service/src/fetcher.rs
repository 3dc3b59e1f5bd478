use std::time::Duration;

use async_trait::async_trait;
use rolegate_core::openid::fetch::{FetchError, Fetcher, HttpRequest, HttpResponse, Method};

/// Body size cap for discovery documents and provider replies.
const MAX_BODY: usize = 1 << 20;

/// [`Fetcher`] over a real HTTP client. Never follows redirects.
#[derive(Clone, Debug)]
pub struct ReqwestFetcher {
    client: reqwest::Client,
}

impl ReqwestFetcher {
    pub fn new(timeout: Duration) -> ReqwestFetcher {
        let client = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .timeout(timeout)
            .user_agent(concat!("rolegate/", env!("CARGO_PKG_VERSION")))
            .build()
            .expect("static client configuration");
        ReqwestFetcher { client }
    }
}

impl Default for ReqwestFetcher {
    fn default() -> Self {
        ReqwestFetcher::new(Duration::from_secs(10))
    }
}

#[async_trait]
impl Fetcher for ReqwestFetcher {
    async fn fetch(&self, request: HttpRequest) -> Result<HttpResponse, FetchError> {
        let method = match request.method {
            Method::Get => reqwest::Method::GET,
            Method::Post => reqwest::Method::POST,
        };
        let mut builder = self.client.request(method, &request.url);
        for (k, v) in &request.headers {
            builder = builder.header(k, v);
        }
        if request.method == Method::Post {
            builder = builder.body(request.body);
        }
        let mut resp = builder.send().await.map_err(|e| FetchError(e.to_string()))?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
            .collect();
        let mut body = Vec::new();
        while let Some(chunk) = resp.chunk().await.map_err(|e| FetchError(e.to_string()))? {
            if body.len() + chunk.len() > MAX_BODY {
                return Err(FetchError(format!("response from {} exceeds {MAX_BODY} bytes", request.url)));
            }
            body.extend_from_slice(&chunk);
        }
        Ok(HttpResponse { status, headers, body })
    }
}
