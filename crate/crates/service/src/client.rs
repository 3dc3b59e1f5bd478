//! A scriptable browser for driving the login flow end to end: the CLI's
//! `e2e-login` and the integration tests use it.
//!
//! Redirects are never followed automatically so each hop can be
//! inspected, and cookies live in a plain name/value jar that callers may
//! read or tamper with.

use std::collections::BTreeMap;
use std::time::Duration;

use parking_lot::Mutex;
use reqwest::header::{COOKIE, LOCATION, SET_COOKIE};
pub use reqwest::Method;
use serde_json::Value;
use thiserror::Error;
use url::Url;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Http {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("bad url {0}")]
    Url(String),
    #[error("unexpected response at step `{step}`: HTTP {status}")]
    Unexpected { step: &'static str, status: u16 },
    #[error("login page did not carry a request token")]
    NoRequestToken,
}

#[derive(Clone, Debug)]
pub struct Page {
    pub url: String,
    pub status: u16,
    pub location: Option<String>,
    pub body: String,
}

impl Page {
    pub fn is_redirect(&self) -> bool {
        matches!(self.status, 301 | 302 | 303 | 307 | 308)
    }

    pub fn json(&self) -> Option<Value> {
        serde_json::from_str(&self.body).ok()
    }

    /// Text of the first `<p class="message">`, unescaped.
    pub fn message(&self) -> Option<String> {
        let start = self.body.find("<p class=\"message\">")? + "<p class=\"message\">".len();
        let end = self.body[start..].find("</p>")? + start;
        Some(unescape(&self.body[start..end]))
    }
}

pub struct Browser {
    client: reqwest::Client,
    base: Url,
    jar: Mutex<BTreeMap<String, String>>,
}

impl Browser {
    pub fn new(base: &str) -> Result<Browser, ClientError> {
        let base = Url::parse(base).map_err(|_| ClientError::Url(base.to_string()))?;
        let client = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .timeout(Duration::from_secs(30))
            .build()
            .expect("static client configuration");
        Ok(Browser {
            client,
            base,
            jar: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn base(&self) -> &Url {
        &self.base
    }

    pub fn cookie(&self, name: &str) -> Option<String> {
        self.jar.lock().get(name).cloned()
    }

    pub fn set_cookie(&self, name: &str, value: &str) {
        self.jar.lock().insert(name.to_string(), value.to_string());
    }

    pub fn remove_cookie(&self, name: &str) {
        self.jar.lock().remove(name);
    }

    pub fn cookies(&self) -> BTreeMap<String, String> {
        self.jar.lock().clone()
    }

    /// A second browser sharing this one's cookies at this moment.
    pub fn fork(&self) -> Browser {
        Browser {
            client: self.client.clone(),
            base: self.base.clone(),
            jar: Mutex::new(self.cookies()),
        }
    }

    fn resolve(&self, target: &str) -> Result<Url, ClientError> {
        self.base.join(target).map_err(|_| ClientError::Url(target.to_string()))
    }

    pub async fn request(&self, method: Method, target: &str, body: Option<Body<'_>>) -> Result<Page, ClientError> {
        let url = self.resolve(target)?;
        let mut req = self.client.request(method, url.clone());
        let jar = self.cookies();
        if !jar.is_empty() {
            let header = jar.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("; ");
            req = req.header(COOKIE, header);
        }
        req = match body {
            Some(Body::Form(pairs)) => req.form(pairs),
            Some(Body::Json(v)) => req.json(v),
            None => req,
        };
        let http_err = |source| ClientError::Http {
            url: url.to_string(),
            source,
        };
        let resp = req.send().await.map_err(http_err)?;
        let status = resp.status().as_u16();
        for v in resp.headers().get_all(SET_COOKIE) {
            if let Ok(v) = v.to_str() {
                self.absorb(v);
            }
        }
        let location = resp
            .headers()
            .get(LOCATION)
            .and_then(|v| v.to_str().ok())
            .map(|l| url.join(l).map(|u| u.to_string()).unwrap_or_else(|_| l.to_string()));
        let body = resp.text().await.map_err(http_err)?;
        Ok(Page {
            url: url.to_string(),
            status,
            location,
            body,
        })
    }

    fn absorb(&self, set_cookie: &str) {
        let mut parts = set_cookie.split(';');
        let Some((name, value)) = parts.next().and_then(|p| p.trim().split_once('=')) else {
            return;
        };
        let expired = parts.any(|a| a.trim().eq_ignore_ascii_case("max-age=0"));
        let mut jar = self.jar.lock();
        if expired || value.is_empty() {
            jar.remove(name);
        } else {
            jar.insert(name.to_string(), value.to_string());
        }
    }

    pub async fn get(&self, target: &str) -> Result<Page, ClientError> {
        self.request(Method::GET, target, None).await
    }

    pub async fn post_form(&self, target: &str, pairs: &[(&str, &str)]) -> Result<Page, ClientError> {
        self.request(Method::POST, target, Some(Body::Form(pairs))).await
    }

    pub async fn post_json(&self, target: &str, value: &Value) -> Result<Page, ClientError> {
        self.request(Method::POST, target, Some(Body::Json(value))).await
    }

    pub async fn delete(&self, target: &str) -> Result<Page, ClientError> {
        self.request(Method::DELETE, target, None).await
    }
}

pub enum Body<'a> {
    Form(&'a [(&'a str, &'a str)]),
    Json(&'a Value),
}

/// Inputs for a scripted login through the test provider's pages.
#[derive(Clone, Debug)]
pub struct LoginScript {
    pub openid_url: String,
    pub username: String,
    pub password: String,
    pub approve: bool,
}

/// What a scripted login saw along the way.
#[derive(Clone, Debug)]
pub struct LoginTranscript {
    pub provider_url: String,
    /// The realm shown on the approval page.
    pub realm_shown: Option<String>,
    /// The provider's redirect back to finish_auth.
    pub callback_url: String,
    pub finish: Page,
}

impl Browser {
    /// try_auth, provider sign-in, approval and finish_auth in sequence.
    pub async fn login(&self, script: &LoginScript) -> Result<LoginTranscript, ClientError> {
        let start = self
            .post_form("/try_auth", &[("openid_url", script.openid_url.as_str())])
            .await?;
        let provider_url = expect_redirect("try_auth", &start)?;
        let (callback_url, realm_shown) = self.approve_at_provider(&provider_url, script).await?;
        let finish = self.get(&callback_url).await?;
        Ok(LoginTranscript {
            provider_url,
            realm_shown,
            callback_url,
            finish,
        })
    }

    /// Walks the provider pages for `provider_url` and returns the
    /// callback URL without visiting it, plus the realm the approval page
    /// showed.
    pub async fn approve_at_provider(
        &self,
        provider_url: &str,
        script: &LoginScript,
    ) -> Result<(String, Option<String>), ClientError> {
        let mut page = self.get(provider_url).await?;
        if page.status != 200 {
            return Err(ClientError::Unexpected {
                step: "provider",
                status: page.status,
            });
        }
        let token = hidden_value(&page.body, "request").ok_or(ClientError::NoRequestToken)?;
        if page.body.contains("name=\"password\"") {
            page = self
                .post_form(
                    "/op/login",
                    &[
                        ("request", token.as_str()),
                        ("username", script.username.as_str()),
                        ("password", script.password.as_str()),
                    ],
                )
                .await?;
            if page.status != 200 {
                return Err(ClientError::Unexpected {
                    step: "provider sign-in",
                    status: page.status,
                });
            }
        }
        let realm = span_text(&page.body, "realm");
        let decision = if script.approve { "approve" } else { "deny" };
        let decided = self
            .post_form("/op/decide", &[("request", token.as_str()), ("decision", decision)])
            .await?;
        Ok((expect_redirect("provider decision", &decided)?, realm))
    }
}

fn expect_redirect(step: &'static str, page: &Page) -> Result<String, ClientError> {
    match (&page.location, page.is_redirect()) {
        (Some(l), true) => Ok(l.clone()),
        _ => Err(ClientError::Unexpected {
            step,
            status: page.status,
        }),
    }
}

/// Value of the hidden input `name` in `html`.
pub fn hidden_value(html: &str, name: &str) -> Option<String> {
    let marker = format!("name=\"{name}\" value=\"");
    let start = html.find(&marker)? + marker.len();
    let end = html[start..].find('"')? + start;
    Some(unescape(&html[start..end]))
}

/// Text of the first `<span class="{class}">`.
pub fn span_text(html: &str, class: &str) -> Option<String> {
    let marker = format!("<span class=\"{class}\">");
    let start = html.find(&marker)? + marker.len();
    let end = html[start..].find("</span>")? + start;
    Some(unescape(&html[start..end]))
}

fn unescape(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&amp;", "&")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scraping() {
        let html = "<input type=\"hidden\" name=\"request\" value=\"abc-_1\">\
                    <span class=\"realm\">http://a.example/?x=1&amp;y=2</span>\
                    <p class=\"message\">You also returned &#39;a@b.c&#39;</p>";
        assert_eq!(hidden_value(html, "request").as_deref(), Some("abc-_1"));
        assert_eq!(span_text(html, "realm").as_deref(), Some("http://a.example/?x=1&y=2"));
        let page = Page {
            url: String::new(),
            status: 200,
            location: None,
            body: html.to_string(),
        };
        assert_eq!(page.message().as_deref(), Some("You also returned 'a@b.c'"));
    }

    #[test]
    fn jar_follows_set_cookie() {
        let b = Browser::new("http://127.0.0.1:1/").unwrap();
        b.absorb("a=1; Path=/; HttpOnly");
        b.absorb("b=2");
        b.absorb("a=; Path=/; Max-Age=0");
        assert_eq!(b.cookies().into_iter().collect::<Vec<_>>(), vec![("b".to_string(), "2".to_string())]);
    }
}
