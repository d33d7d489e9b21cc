//! Caller identity and per-operation authorization.
//!
//! Certificate validation happens upstream (a TLS terminator, or trusted test
//! headers); this module only decides who is a member and what each caller
//! may do.

use std::collections::HashSet;
use std::path::Path;

use http::Method;

use crate::path::strip_prefix;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("no credential presented")]
    Unauthenticated,
    #[error("{0:?} is not a member of the federation")]
    Forbidden(String),
}

/// Subject and organisation attributes as delivered by the transport layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransportIdentity {
    pub subject: Option<String>,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientIdentity {
    pub subject: String,
    pub attributes: Vec<String>,
    pub privileged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperationClass {
    Read,
    Write,
    List,
    Delete,
}

impl OperationClass {
    pub const ALL: [OperationClass; 4] = [Self::Read, Self::Write, Self::List, Self::Delete];

    pub fn from_method(method: &Method) -> Option<Self> {
        match method.as_str() {
            "GET" | "HEAD" => Some(Self::Read),
            "PUT" => Some(Self::Write),
            "PROPFIND" => Some(Self::List),
            "DELETE" => Some(Self::Delete),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Default)]
pub struct MembershipRegistry {
    members: HashSet<String>,
    privileged: HashSet<String>,
    required_attribute_prefix: String,
}

impl MembershipRegistry {
    pub fn new(
        members: impl IntoIterator<Item = String>,
        privileged: impl IntoIterator<Item = String>,
        required_attribute_prefix: impl Into<String>,
    ) -> Self {
        MembershipRegistry {
            members: members.into_iter().collect(),
            privileged: privileged.into_iter().collect(),
            required_attribute_prefix: required_attribute_prefix.into(),
        }
    }

    /// Load DN lists (one per line, `#` comments). Either file may be absent
    /// from the configuration.
    pub fn load(
        members: Option<&Path>,
        privileged: Option<&Path>,
        required_attribute_prefix: &str,
    ) -> std::io::Result<Self> {
        let read = |p: Option<&Path>| -> std::io::Result<Vec<String>> {
            match p {
                Some(p) => Ok(parse_dn_list(&std::fs::read_to_string(p)?)),
                None => Ok(Vec::new()),
            }
        };
        Ok(Self::new(read(members)?, read(privileged)?, required_attribute_prefix))
    }

    pub fn is_member(&self, subject: &str) -> bool {
        self.members.contains(subject)
    }

    pub fn is_privileged(&self, subject: &str) -> bool {
        self.privileged.contains(subject)
    }
}

pub fn parse_dn_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Accept a caller carrying an attribute under the organisation prefix, or
/// whose subject is a listed member. Privileged subjects are accepted
/// and flagged.
pub fn authenticate(transport: &TransportIdentity, registry: &MembershipRegistry) -> Result<ClientIdentity, AuthError> {
    let subject = match transport.subject.as_deref().map(str::trim) {
        Some(s) if !s.is_empty() => s.to_string(),
        _ => return Err(AuthError::Unauthenticated),
    };
    let privileged = registry.is_privileged(&subject);
    let by_attribute = !registry.required_attribute_prefix.is_empty()
        && transport
            .attributes
            .iter()
            .any(|a| attribute_matches(a, &registry.required_attribute_prefix));
    if privileged || by_attribute || registry.is_member(&subject) {
        Ok(ClientIdentity {
            subject,
            attributes: transport.attributes.clone(),
            privileged,
        })
    } else {
        Err(AuthError::Forbidden(subject))
    }
}

// "/atlas" matches "/atlas" and "/atlas/Role=x" but not "/atlasx".
fn attribute_matches(attribute: &str, prefix: &str) -> bool {
    attribute
        .strip_prefix(prefix)
        .is_some_and(|rest| rest.is_empty() || rest.starts_with('/') || prefix.ends_with('/'))
}

/// Grant table:
///
/// | caller     | read | list | write        | delete       |
/// |------------|------|------|--------------|--------------|
/// | privileged | yes  | yes  | yes          | yes          |
/// | member     | yes  | yes  | scratch only | scratch only |
///
/// `path` and `scratch_prefix` must be normalized.
pub fn authorize(identity: &ClientIdentity, op: OperationClass, path: &str, scratch_prefix: &str) -> Decision {
    let granted = identity.privileged
        || match op {
            OperationClass::Read | OperationClass::List => true,
            OperationClass::Write | OperationClass::Delete => {
                strip_prefix(path, scratch_prefix).is_some_and(|rest| !rest.is_empty())
            }
        };
    if granted {
        Decision::Allow
    } else {
        Decision::Deny
    }
}
