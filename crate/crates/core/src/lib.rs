//! Single sign-on and authorization building blocks: an OpenID relying
//! party with Diffie-Hellman associations and replay protection, a minimal
//! identity provider to run it against, and a role engine with dated
//! assignments, ownership and bounded delegation.

pub mod fixture;
pub mod openid;
pub mod rbac;
pub mod store;
