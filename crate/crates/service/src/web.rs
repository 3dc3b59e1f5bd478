//! Small HTTP helpers: cookies and HTML pages.

use axum::http::header::{COOKIE, SET_COOKIE};
use axum::http::{HeaderMap, HeaderValue};
use axum::response::Html;
use rolegate_core::openid::op::html_escape;

pub const SESSION_COOKIE: &str = "rolegate_session";
pub const LOGIN_COOKIE: &str = "rolegate_login";
pub const OP_COOKIE: &str = "rolegate_op";

/// Value of cookie `name` in the request, if present.
pub fn cookie<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers
        .get_all(COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|pair| pair.trim().split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v)
}

#[derive(Clone, Copy, Debug)]
pub struct CookiePolicy {
    pub secure: bool,
}

impl CookiePolicy {
    pub fn set(&self, name: &str, value: &str, max_age: i64) -> HeaderValue {
        let secure = if self.secure { "; Secure" } else { "" };
        HeaderValue::from_str(&format!(
            "{name}={value}; Path=/; Max-Age={max_age}; HttpOnly; SameSite=Lax{secure}"
        ))
        .expect("cookie values are base64url")
    }

    pub fn clear(&self, name: &str) -> HeaderValue {
        self.set(name, "", 0)
    }

    pub fn append_set(&self, headers: &mut HeaderMap, name: &str, value: &str, max_age: i64) {
        headers.append(SET_COOKIE, self.set(name, value, max_age));
    }

    pub fn append_clear(&self, headers: &mut HeaderMap, name: &str) {
        headers.append(SET_COOKIE, self.clear(name));
    }
}

/// Wraps `body` (already escaped) in a minimal page.
pub fn page(title: &str, body: &str) -> Html<String> {
    Html(format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title></head>\n<body>\n{body}\n</body></html>\n",
        html_escape(title)
    ))
}

/// A page whose whole content is one escaped message.
pub fn message_page(title: &str, message: &str) -> Html<String> {
    page(
        title,
        &format!(
            "<h1>{}</h1>\n<p class=\"message\">{}</p>\n<p><a href=\"/login\">Back to login</a></p>",
            html_escape(title),
            html_escape(message)
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cookie_lookup() {
        let mut h = HeaderMap::new();
        h.append(COOKIE, HeaderValue::from_static("a=1; rolegate_session=v1.xyz"));
        h.append(COOKIE, HeaderValue::from_static("rolegate_login=k"));
        assert_eq!(cookie(&h, SESSION_COOKIE), Some("v1.xyz"));
        assert_eq!(cookie(&h, LOGIN_COOKIE), Some("k"));
        assert_eq!(cookie(&h, "b"), None);
    }

    #[test]
    fn escaping() {
        let Html(p) = message_page("Done", "<script>x</script>");
        assert!(p.contains("&lt;script&gt;"));
        assert!(!p.contains("<script>"));
    }

    #[test]
    fn set_and_clear() {
        let p = CookiePolicy { secure: true };
        let v = p.set("n", "v", 60);
        assert_eq!(v, "n=v; Path=/; Max-Age=60; HttpOnly; SameSite=Lax; Secure");
        assert!(p.clear("n").to_str().unwrap().contains("Max-Age=0"));
    }
}
