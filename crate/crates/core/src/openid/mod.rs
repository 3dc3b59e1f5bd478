//! OpenID 1.1/2.0 authentication: message codecs, associations, discovery,
//! a relying party and a small provider.

pub mod association;
pub mod btwoc;
pub mod discovery;
pub mod fetch;
pub mod message;
pub mod nonce;
pub mod op;
pub mod realm;
pub mod rp;
pub mod sreg;
