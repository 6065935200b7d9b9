//! Federation namespace: canonical object paths and longest-prefix origin matching.
//!
//! Canonical text is `/seg1/seg2/...`. Raw input may carry percent-encoding,
//! which is decoded before segments are validated; an encoded `/` is refused
//! so that a single segment can never masquerade as two.

use std::fmt;
use std::str::FromStr;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed path {raw:?}: {reason}")]
pub struct MalformedPath {
    pub raw: String,
    pub reason: &'static str,
}

/// A normalized path naming one object (or one exported subtree) in the federation.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectPath {
    segments: Vec<String>,
}

/// A subtree exported by an origin. Same shape as an object path.
pub type NamespacePrefix = ObjectPath;

// Characters escaped when a segment is embedded in a URL path.
const SEGMENT_ESCAPES: &AsciiSet = &CONTROLS
    .add(b' ')
    .add(b'"')
    .add(b'#')
    .add(b'%')
    .add(b'<')
    .add(b'>')
    .add(b'?')
    .add(b'`')
    .add(b'{')
    .add(b'}')
    .add(b'/');

impl ObjectPath {
    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn file_name(&self) -> &str {
        self.segments.last().map(String::as_str).unwrap_or_default()
    }

    /// True when `prefix` names this path or one of its ancestors.
    pub fn starts_with(&self, prefix: &ObjectPath) -> bool {
        self.segments.len() >= prefix.segments.len()
            && self.segments[..prefix.segments.len()] == prefix.segments[..]
    }

    /// Segments below `prefix`, or `None` if `prefix` does not cover this path.
    pub fn strip_prefix(&self, prefix: &ObjectPath) -> Option<&[String]> {
        self.starts_with(prefix)
            .then(|| &self.segments[prefix.segments.len()..])
    }

    /// Appends one already-validated child segment.
    pub fn join(&self, segment: &str) -> Result<ObjectPath, MalformedPath> {
        let mut segments = self.segments.clone();
        segments.push(check_segment(segment.to_owned(), segment)?);
        Ok(ObjectPath { segments })
    }

    pub fn parent(&self) -> Option<ObjectPath> {
        (self.segments.len() > 1).then(|| ObjectPath {
            segments: self.segments[..self.segments.len() - 1].to_vec(),
        })
    }

    /// Percent-encoded form suitable for the path component of a URL.
    pub fn to_url_path(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            out.push('/');
            out.extend(utf8_percent_encode(seg, SEGMENT_ESCAPES));
        }
        out
    }
}

impl fmt::Display for ObjectPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for seg in &self.segments {
            write!(f, "/{seg}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for ObjectPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectPath({self})")
    }
}

impl FromStr for ObjectPath {
    type Err = MalformedPath;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        normalize_path(s)
    }
}

impl Serialize for ObjectPath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ObjectPath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        normalize_path(&raw).map_err(serde::de::Error::custom)
    }
}

fn malformed(raw: &str, reason: &'static str) -> MalformedPath {
    MalformedPath {
        raw: raw.to_owned(),
        reason,
    }
}

fn check_segment(seg: String, raw: &str) -> Result<String, MalformedPath> {
    match seg.as_str() {
        "" => Err(malformed(raw, "empty segment")),
        "." | ".." => Err(malformed(raw, "relative segment")),
        _ if seg.contains('/') => Err(malformed(raw, "encoded '/' in segment")),
        _ if seg.contains('%') => Err(malformed(raw, "literal '%' in segment")),
        _ if seg.chars().any(char::is_control) => Err(malformed(raw, "control character")),
        _ => Ok(seg),
    }
}

/// Parses raw text into a canonical [`ObjectPath`].
///
/// Duplicate slashes collapse and a trailing slash is dropped. Percent escapes
/// are decoded first; `%2F`, literal `%`, `.`/`..` segments and control
/// characters are rejected, as is the bare root.
pub fn normalize_path(raw: &str) -> Result<ObjectPath, MalformedPath> {
    if raw.is_empty() {
        return Err(malformed(raw, "empty path"));
    }
    if raw.chars().any(char::is_control) {
        return Err(malformed(raw, "control character"));
    }
    let mut segments = Vec::new();
    for piece in raw.split('/').filter(|p| !p.is_empty()) {
        if !valid_escapes(piece) {
            return Err(malformed(raw, "bad percent escape"));
        }
        let decoded = percent_decode_str(piece)
            .decode_utf8()
            .map_err(|_| malformed(raw, "escape decodes to invalid UTF-8"))?
            .into_owned();
        segments.push(check_segment(decoded, raw)?);
    }
    if segments.is_empty() {
        return Err(malformed(raw, "root is not an object"));
    }
    Ok(ObjectPath { segments })
}

fn valid_escapes(piece: &str) -> bool {
    let bytes = piece.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            if i + 2 >= bytes.len()
                || !(bytes[i + 1].is_ascii_hexdigit() && bytes[i + 2].is_ascii_hexdigit())
            {
                return false;
            }
            i += 3;
        } else {
            i += 1;
        }
    }
    true
}

/// Longest prefix in `prefixes` covering `path`.
pub fn match_prefix<'a, I>(path: &ObjectPath, prefixes: I) -> Option<&'a NamespacePrefix>
where
    I: IntoIterator<Item = &'a NamespacePrefix>,
{
    prefixes
        .into_iter()
        .filter(|p| path.starts_with(p))
        .max_by_key(|p| p.segments.len())
}
